//! SE(3) pose-graph optimization with prior and between factors.
//!
//! Residuals are twists: `log(Z^-1 * Xi^-1 * Xj)` for between factors and
//! `log(Z^-1 * X)` for priors. Poses are perturbed on the right,
//! `X <- X * exp(delta)`, and the normal equations are solved by
//! Levenberg-Marquardt with Marquardt (diagonal) damping.

mod g2o;
pub mod sparse;

use std::collections::{BTreeMap, VecDeque};

use nalgebra::{Matrix6, Vector6};
use rustc_hash::FxHashMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{se3_left_jacobian_inv, se3_right_jacobian_inv, RigidPose, Twist};

pub use g2o::write_g2o;
use sparse::BlockSystem;

pub type NodeId = usize;

const SYMMETRY_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FactorKind {
    Prior(NodeId),
    Between(NodeId, NodeId),
}

#[derive(Clone, Debug)]
pub struct Factor {
    kind: FactorKind,
    measurement: RigidPose,
    information: Matrix6<f64>,
}

impl Factor {
    pub fn prior(id: NodeId, measurement: RigidPose, information: Matrix6<f64>) -> Result<Self> {
        validate_information(&information)?;
        Ok(Self {
            kind: FactorKind::Prior(id),
            measurement,
            information,
        })
    }

    pub fn between(i: NodeId, j: NodeId, measurement: RigidPose, information: Matrix6<f64>) -> Result<Self> {
        validate_information(&information)?;
        if i == j {
            return Err(Error::InvalidParameter(format!("between factor connects node {i} to itself")));
        }
        Ok(Self {
            kind: FactorKind::Between(i, j),
            measurement,
            information,
        })
    }

    pub fn kind(&self) -> FactorKind {
        self.kind
    }

    pub fn measurement(&self) -> &RigidPose {
        &self.measurement
    }

    pub fn information(&self) -> &Matrix6<f64> {
        &self.information
    }

    /// Residual twist for the given node poses. `pj` is ignored for priors.
    pub fn residual(&self, pi: &RigidPose, pj: Option<&RigidPose>) -> Vector6<f64> {
        let z_inv = self.measurement.inverse();
        let err = match (self.kind, pj) {
            (FactorKind::Prior(_), _) => z_inv.compose(pi),
            (FactorKind::Between(..), Some(pj)) => z_inv.compose(&pi.inverse().compose(pj)),
            (FactorKind::Between(..), None) => panic!("between factor needs two poses"),
        };
        err.log_unchecked().to_vector()
    }

    /// Residual and its Jacobians with respect to right perturbations of
    /// the first and (for between factors) second node.
    pub fn linearize(&self, pi: &RigidPose, pj: Option<&RigidPose>) -> (Vector6<f64>, Matrix6<f64>, Option<Matrix6<f64>>) {
        let r = self.residual(pi, pj);
        let xi = Twist::from_vector(&r);
        match self.kind {
            FactorKind::Prior(_) => (r, se3_right_jacobian_inv(&xi), None),
            FactorKind::Between(..) => {
                let jj = se3_right_jacobian_inv(&xi);
                let ji = -se3_left_jacobian_inv(&xi) * self.measurement.inverse().adjoint();
                (r, ji, Some(jj))
            }
        }
    }

    fn cost(&self, pi: &RigidPose, pj: Option<&RigidPose>) -> f64 {
        let r = self.residual(pi, pj);
        (r.transpose() * self.information * r)[(0, 0)]
    }
}

/// Checks symmetry (absolute 1e-12) and strict positive definiteness.
pub fn validate_information(info: &Matrix6<f64>) -> Result<()> {
    if !info.iter().all(|v| v.is_finite()) || (info - info.transpose()).abs().max() > SYMMETRY_TOL {
        return Err(Error::InvalidInformation);
    }
    let eig = info.symmetric_eigen();
    if eig.eigenvalues.iter().any(|&l| l <= 0.0) {
        return Err(Error::InvalidInformation);
    }
    Ok(())
}

/// Diagonal information from translation and rotation standard deviations
/// (meters, radians).
pub fn diagonal_information(sigma_trans: f64, sigma_rot: f64) -> Matrix6<f64> {
    let wt = 1.0 / (sigma_trans * sigma_trans);
    let wr = 1.0 / (sigma_rot * sigma_rot);
    Matrix6::from_diagonal(&Vector6::new(wt, wt, wt, wr, wr, wr))
}

#[derive(Clone, Debug, Default)]
pub struct FactorGraph {
    nodes: Vec<(NodeId, RigidPose)>,
    index: FxHashMap<NodeId, usize>,
    factors: Vec<Factor>,
}

impl FactorGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_node(&mut self, id: NodeId, initial: RigidPose) -> Result<()> {
        if self.index.contains_key(&id) {
            return Err(Error::DuplicateNode(id));
        }
        self.index.insert(id, self.nodes.len());
        self.nodes.push((id, initial));
        Ok(())
    }

    pub fn add_factor(&mut self, factor: Factor) -> Result<()> {
        match factor.kind {
            FactorKind::Prior(i) => self.slot(i)?,
            FactorKind::Between(i, j) => {
                self.slot(i)?;
                self.slot(j)?
            }
        };
        self.factors.push(factor);
        Ok(())
    }

    pub fn contains(&self, id: NodeId) -> bool {
        self.index.contains_key(&id)
    }

    pub fn pose(&self, id: NodeId) -> Option<&RigidPose> {
        self.index.get(&id).map(|&s| &self.nodes[s].1)
    }

    /// Replaces a node's current estimate (used for warm starts).
    pub fn set_pose(&mut self, id: NodeId, pose: RigidPose) -> Result<()> {
        let s = self.slot(id)?;
        self.nodes[s].1 = pose;
        Ok(())
    }

    /// Writes every pose of `solution` back as the new initial estimate.
    pub fn apply(&mut self, solution: &Solution) {
        for (id, pose) in &solution.poses {
            if let Some(&s) = self.index.get(id) {
                self.nodes[s].1 = *pose;
            }
        }
    }

    pub fn nodes(&self) -> &[(NodeId, RigidPose)] {
        &self.nodes
    }

    pub fn factors(&self) -> &[Factor] {
        &self.factors
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn slot(&self, id: NodeId) -> Result<usize> {
        self.index.get(&id).copied().ok_or(Error::UnknownNode(id))
    }

    /// Total weighted squared residual at the current estimates.
    pub fn cost(&self) -> f64 {
        let poses: Vec<RigidPose> = self.nodes.iter().map(|n| n.1).collect();
        self.cost_at(&poses)
    }

    fn cost_at(&self, poses: &[RigidPose]) -> f64 {
        self.factors
            .iter()
            .map(|f| match f.kind {
                FactorKind::Prior(i) => f.cost(&poses[self.index[&i]], None),
                FactorKind::Between(i, j) => f.cost(&poses[self.index[&i]], Some(&poses[self.index[&j]])),
            })
            .sum()
    }

    /// Every node must be reachable from a prior through between factors.
    pub fn check_constrained(&self) -> Result<()> {
        let n = self.nodes.len();
        let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
        let mut seen = vec![false; n];
        let mut queue = VecDeque::new();
        for f in &self.factors {
            match f.kind {
                FactorKind::Prior(i) => {
                    let s = self.index[&i];
                    if !seen[s] {
                        seen[s] = true;
                        queue.push_back(s);
                    }
                }
                FactorKind::Between(i, j) => {
                    let (a, b) = (self.index[&i], self.index[&j]);
                    adj[a].push(b);
                    adj[b].push(a);
                }
            }
        }
        if queue.is_empty() {
            return Err(Error::NoPrior);
        }
        while let Some(s) = queue.pop_front() {
            for &t in &adj[s] {
                if !seen[t] {
                    seen[t] = true;
                    queue.push_back(t);
                }
            }
        }
        match seen.iter().position(|&v| !v) {
            Some(s) => Err(Error::UnconstrainedNode(self.nodes[s].0)),
            None => Ok(()),
        }
    }

    fn build_system(&self, poses: &[RigidPose]) -> BlockSystem {
        let mut sys = BlockSystem::new(poses.len());
        for f in &self.factors {
            match f.kind {
                FactorKind::Prior(i) => {
                    let s = self.index[&i];
                    let (r, ji, _) = f.linearize(&poses[s], None);
                    let jt_w = ji.transpose() * f.information;
                    sys.add_block(s, s, &(jt_w * ji));
                    sys.rhs[s] -= jt_w * r;
                }
                FactorKind::Between(i, j) => {
                    let (a, b) = (self.index[&i], self.index[&j]);
                    let (r, ja, jb) = f.linearize(&poses[a], Some(&poses[b]));
                    let jb = jb.expect("between jacobian");
                    let wa = ja.transpose() * f.information;
                    let wb = jb.transpose() * f.information;
                    sys.add_block(a, a, &(wa * ja));
                    sys.add_block(b, b, &(wb * jb));
                    sys.add_block(a, b, &(wa * jb));
                    sys.rhs[a] -= wa * r;
                    sys.rhs[b] -= wb * r;
                }
            }
        }
        sys
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinearSolver {
    Dense,
    Sparse,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub initial_lambda: f64,
    pub lambda_up: f64,
    pub lambda_down: f64,
    pub max_iters: usize,
    pub update_tol: f64,
    pub linear_solver: LinearSolver,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            initial_lambda: 1e-4,
            lambda_up: 10.0,
            lambda_down: 0.5,
            max_iters: 100,
            update_tol: 1e-8,
            linear_solver: LinearSolver::Sparse,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Solution {
    pub poses: BTreeMap<NodeId, RigidPose>,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: usize,
    /// Cost after every accepted step, starting with the initial cost.
    pub cost_history: Vec<f64>,
}

/// Optimizes all node poses of `graph`, starting from their current values.
pub fn optimize(graph: &FactorGraph, cfg: &SolverConfig) -> Result<Solution> {
    graph.check_constrained()?;
    let mut poses: Vec<RigidPose> = graph.nodes.iter().map(|n| n.1).collect();
    let initial_cost = graph.cost_at(&poses);
    let mut cost = initial_cost;
    let mut history = vec![cost];
    let mut lambda = cfg.initial_lambda;
    let mut iterations = 0;

    while iterations < cfg.max_iters {
        iterations += 1;
        let sys = graph.build_system(&poses);
        let mut converged = false;
        loop {
            let mut damped = sys.clone();
            for d in damped.diag.iter_mut() {
                for k in 0..6 {
                    d[(k, k)] *= 1.0 + lambda;
                }
            }
            let step = match cfg.linear_solver {
                LinearSolver::Dense => damped.solve_dense(),
                LinearSolver::Sparse => damped.solve_sparse(),
            };
            let Some(step) = step else {
                if lambda > 1e12 {
                    return Err(Error::SingularSystem);
                }
                lambda *= cfg.lambda_up;
                continue;
            };
            let norm = step.iter().map(|s| s.norm_squared()).sum::<f64>().sqrt();
            if norm < cfg.update_tol {
                converged = true;
                break;
            }
            let candidate: Vec<RigidPose> = poses
                .iter()
                .zip(&step)
                .map(|(p, d)| p.compose(&RigidPose::exp(&Twist::from_vector(d))))
                .collect();
            let new_cost = graph.cost_at(&candidate);
            if new_cost <= cost {
                poses = candidate;
                cost = new_cost;
                history.push(cost);
                lambda = (lambda * cfg.lambda_down).max(1e-12);
                break;
            }
            lambda *= cfg.lambda_up;
            if lambda > 1e12 {
                // No descent possible at this linearization.
                converged = true;
                break;
            }
        }
        if converged {
            break;
        }
    }

    Ok(Solution {
        poses: graph.nodes.iter().map(|n| n.0).zip(poses).collect(),
        initial_cost,
        final_cost: cost,
        iterations,
        cost_history: history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Vec3;
    use nalgebra::DMatrix;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_pose(rng: &mut ChaCha8Rng, t: f64, r: f64) -> RigidPose {
        let v = |rng: &mut ChaCha8Rng, s: f64| Vec3::new(rng.random_range(-s..s), rng.random_range(-s..s), rng.random_range(-s..s));
        let rot = v(rng, r);
        let tr = v(rng, t);
        RigidPose::from_rotation_vector(rot, tr)
    }

    fn info() -> Matrix6<f64> {
        diagonal_information(0.05, 0.01)
    }

    #[test]
    fn consistent_chain_is_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let poses: Vec<RigidPose> = (0..5).map(|_| random_pose(&mut rng, 3.0, 1.0)).collect();
        let mut g = FactorGraph::new();
        for (i, p) in poses.iter().enumerate() {
            g.add_node(i, *p).unwrap();
        }
        g.add_factor(Factor::prior(0, poses[0], info()).unwrap()).unwrap();
        for i in 1..5 {
            g.add_factor(Factor::between(i - 1, i, poses[i - 1].between(&poses[i]), info()).unwrap())
                .unwrap();
        }
        let sol = optimize(&g, &SolverConfig::default()).unwrap();
        assert!(sol.final_cost < 1e-18, "{}", sol.final_cost);
        for (i, p) in poses.iter().enumerate() {
            assert!(sol.poses[&i].max_abs_diff(p) < 1e-9);
        }
    }

    #[test]
    fn two_nodes_fully_determined() {
        let mut g = FactorGraph::new();
        g.add_node(0, RigidPose::identity()).unwrap();
        g.add_node(1, RigidPose::from_yaw(0.3, Vec3::new(0.2, -0.4, 0.1))).unwrap();
        g.add_factor(Factor::prior(0, RigidPose::identity(), info()).unwrap()).unwrap();
        let z = RigidPose::from_translation(Vec3::new(1.0, 0.0, 0.0));
        g.add_factor(Factor::between(0, 1, z, info()).unwrap()).unwrap();
        let sol = optimize(&g, &SolverConfig::default()).unwrap();
        assert!(sol.poses[&1].max_abs_diff(&z) < 1e-9);
        assert!(sol.final_cost <= sol.initial_cost);
    }

    #[test]
    fn unconstrained_node_is_reported() {
        let mut g = FactorGraph::new();
        g.add_node(0, RigidPose::identity()).unwrap();
        g.add_node(7, RigidPose::identity()).unwrap();
        g.add_factor(Factor::prior(0, RigidPose::identity(), info()).unwrap()).unwrap();
        let err = optimize(&g, &SolverConfig::default()).unwrap_err();
        assert_eq!(err.to_string(), "unconstrained node 7");
    }

    #[test]
    fn graph_without_prior_is_rejected() {
        let mut g = FactorGraph::new();
        g.add_node(0, RigidPose::identity()).unwrap();
        g.add_node(1, RigidPose::identity()).unwrap();
        g.add_factor(Factor::between(0, 1, RigidPose::identity(), info()).unwrap()).unwrap();
        assert!(matches!(optimize(&g, &SolverConfig::default()), Err(Error::NoPrior)));
    }

    #[test]
    fn non_pd_information_rejected_at_insertion() {
        let mut bad = info();
        bad[(3, 3)] = 0.0;
        assert!(matches!(Factor::prior(0, RigidPose::identity(), bad), Err(Error::InvalidInformation)));
        let mut asym = info();
        asym[(0, 1)] = 1e-6;
        assert!(matches!(
            Factor::between(0, 1, RigidPose::identity(), asym),
            Err(Error::InvalidInformation)
        ));
    }

    #[test]
    fn factor_with_unknown_node_rejected() {
        let mut g = FactorGraph::new();
        g.add_node(0, RigidPose::identity()).unwrap();
        let f = Factor::between(0, 3, RigidPose::identity(), info()).unwrap();
        assert!(matches!(g.add_factor(f), Err(Error::UnknownNode(3))));
        assert!(matches!(g.add_node(0, RigidPose::identity()), Err(Error::DuplicateNode(0))));
    }

    fn loop_graph(order: &[usize]) -> FactorGraph {
        let truth = [
            RigidPose::identity(),
            RigidPose::from_yaw(std::f64::consts::FRAC_PI_2, Vec3::new(2.0, 0.0, 0.0)),
            RigidPose::from_yaw(std::f64::consts::PI * 0.99, Vec3::new(2.0, 2.0, 0.1)),
            RigidPose::from_yaw(-std::f64::consts::FRAC_PI_2, Vec3::new(0.0, 2.0, 0.0)),
        ];
        let mut g = FactorGraph::new();
        for &i in order {
            g.add_node(i, truth[i].compose(&RigidPose::from_translation(Vec3::new(0.05 * i as f64, 0.0, 0.0))))
                .unwrap();
        }
        g.add_factor(Factor::prior(0, truth[0], info()).unwrap()).unwrap();
        for i in 0..4 {
            let j = (i + 1) % 4;
            let mut z = truth[i].between(&truth[j]);
            if i == 3 {
                z = z.compose(&RigidPose::from_translation(Vec3::new(0.4, 0.0, 0.0)));
            }
            g.add_factor(Factor::between(i, j, z, info()).unwrap()).unwrap();
        }
        g
    }

    #[test]
    fn insertion_order_does_not_change_solution() {
        let a = optimize(&loop_graph(&[0, 1, 2, 3]), &SolverConfig::default()).unwrap();
        let b = optimize(&loop_graph(&[2, 0, 3, 1]), &SolverConfig::default()).unwrap();
        for i in 0..4 {
            assert!(a.poses[&i].max_abs_diff(&b.poses[&i]) < 1e-6);
        }
        assert!((a.final_cost - b.final_cost).abs() <= 1e-6 * a.final_cost.max(1e-12));
    }

    #[test]
    fn dense_and_sparse_solvers_agree() {
        let g = loop_graph(&[0, 1, 2, 3]);
        let sparse = optimize(&g, &SolverConfig::default()).unwrap();
        let dense = optimize(
            &g,
            &SolverConfig {
                linear_solver: LinearSolver::Dense,
                ..SolverConfig::default()
            },
        )
        .unwrap();
        for i in 0..4 {
            assert!(sparse.poses[&i].max_abs_diff(&dense.poses[&i]) < 1e-9);
        }
    }

    #[test]
    fn cost_history_is_non_increasing() {
        let sol = optimize(&loop_graph(&[0, 1, 2, 3]), &SolverConfig::default()).unwrap();
        for w in sol.cost_history.windows(2) {
            assert!(w[1] <= w[0]);
        }
        assert!(sol.final_cost > 0.0);
    }

    #[test]
    fn strong_prior_fixes_gauge() {
        let g0 = loop_graph(&[0, 1, 2, 3]);
        let mut g = FactorGraph::new();
        for (id, p) in g0.nodes() {
            g.add_node(*id, *p).unwrap();
        }
        let anchor = RigidPose::from_yaw(0.2, Vec3::new(0.3, 0.1, 0.0));
        g.add_factor(Factor::prior(0, anchor, Matrix6::identity() * 1e10).unwrap()).unwrap();
        for f in g0.factors().iter().skip(1) {
            g.add_factor(f.clone()).unwrap();
        }
        let sol = optimize(&g, &SolverConfig::default()).unwrap();
        assert!(sol.poses[&0].max_abs_diff(&anchor) < 1e-6);
    }

    fn numeric_jacobian(f: &Factor, pi: &RigidPose, pj: &RigidPose, which: usize) -> Matrix6<f64> {
        let h = 1e-6;
        let mut jac = Matrix6::zeros();
        for k in 0..6 {
            let mut d = Vector6::zeros();
            d[k] = h;
            let plus = RigidPose::exp(&Twist::from_vector(&d));
            let minus = RigidPose::exp(&Twist::from_vector(&-d));
            let (rp, rm) = if which == 0 {
                (f.residual(&pi.compose(&plus), Some(pj)), f.residual(&pi.compose(&minus), Some(pj)))
            } else {
                (f.residual(pi, Some(&pj.compose(&plus))), f.residual(pi, Some(&pj.compose(&minus))))
            };
            jac.set_column(k, &((rp - rm) / (2.0 * h)));
        }
        jac
    }

    #[test]
    fn between_jacobians_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let pi = random_pose(&mut rng, 5.0, 2.0);
            let pj = random_pose(&mut rng, 5.0, 2.0);
            let noise = random_pose(&mut rng, 0.3, 0.3);
            let f = Factor::between(0, 1, pi.between(&pj).compose(&noise), info()).unwrap();
            let (_, ji, jj) = f.linearize(&pi, Some(&pj));
            let ni = numeric_jacobian(&f, &pi, &pj, 0);
            let nj = numeric_jacobian(&f, &pi, &pj, 1);
            let scale_i = ni.abs().max().max(1.0);
            let scale_j = nj.abs().max().max(1.0);
            assert!((ji - ni).abs().max() / scale_i < 1e-5, "{ji}\n{ni}");
            assert!((jj.unwrap() - nj).abs().max() / scale_j < 1e-5);
        }
    }

    /// Independent Gauss-Newton over `[t; rotation vector]` coordinates with
    /// numeric Jacobians of the scalar-weighted stacked residual and a dense
    /// LU solve.
    fn dense_oracle_cost(g: &FactorGraph) -> f64 {
        let ids: Vec<NodeId> = g.nodes().iter().map(|n| n.0).collect();
        let n = ids.len();
        let to_pose = |x: &[f64], k: usize| {
            RigidPose::from_rotation_vector(
                Vec3::new(x[6 * k + 3], x[6 * k + 4], x[6 * k + 5]),
                Vec3::new(x[6 * k], x[6 * k + 1], x[6 * k + 2]),
            )
        };
        let slot = |id: NodeId| ids.iter().position(|&v| v == id).unwrap();
        let residuals = |x: &[f64]| -> Vec<f64> {
            let mut out = Vec::new();
            for f in g.factors() {
                let sqrt_w = f.information().cholesky().unwrap().l().transpose();
                let r = match f.kind() {
                    FactorKind::Prior(i) => {
                        let e = f.measurement().inverse().to_homogeneous() * to_pose(x, slot(i)).to_homogeneous();
                        RigidPose::from_homogeneous(&e).log_unchecked().to_vector()
                    }
                    FactorKind::Between(i, j) => {
                        let e = f.measurement().inverse().to_homogeneous()
                            * to_pose(x, slot(i)).to_homogeneous().try_inverse().unwrap()
                            * to_pose(x, slot(j)).to_homogeneous();
                        RigidPose::from_homogeneous(&e).log_unchecked().to_vector()
                    }
                };
                out.extend((sqrt_w * r).iter());
            }
            out
        };
        let mut x: Vec<f64> = Vec::with_capacity(6 * n);
        for (_, p) in g.nodes() {
            let tw = p.log_unchecked();
            let rv = tw.rotation;
            x.extend([p.translation().x, p.translation().y, p.translation().z, rv.x, rv.y, rv.z]);
        }
        let cost_of = |x: &[f64]| residuals(x).iter().map(|v| v * v).sum::<f64>();
        for _ in 0..200 {
            let r0 = residuals(&x);
            let m = r0.len();
            let mut jac = DMatrix::zeros(m, 6 * n);
            let h = 1e-7;
            for c in 0..6 * n {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[c] += h;
                xm[c] -= h;
                let (rp, rm) = (residuals(&xp), residuals(&xm));
                for row in 0..m {
                    jac[(row, c)] = (rp[row] - rm[row]) / (2.0 * h);
                }
            }
            let r = nalgebra::DVector::from_vec(r0);
            let lhs = jac.transpose() * &jac;
            let rhs = -(jac.transpose() * r);
            let dx = lhs.lu().solve(&rhs).unwrap();
            let before = cost_of(&x);
            let mut step = 1.0;
            loop {
                let cand: Vec<f64> = x.iter().zip(dx.iter()).map(|(a, d)| a + step * d).collect();
                if cost_of(&cand) <= before || step < 1e-6 {
                    x = cand;
                    break;
                }
                step *= 0.5;
            }
            if dx.norm() * step < 1e-12 {
                break;
            }
        }
        cost_of(&x)
    }

    #[test]
    fn loop_cost_matches_dense_oracle() {
        let g = loop_graph(&[0, 1, 2, 3]);
        let sol = optimize(&g, &SolverConfig::default()).unwrap();
        let oracle = dense_oracle_cost(&g);
        assert!(
            (sol.final_cost - oracle).abs() <= 1e-6 * oracle,
            "lm {} oracle {}",
            sol.final_cost,
            oracle
        );
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn accepted_steps_never_increase_cost(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 6;
            let truth: Vec<RigidPose> = (0..n).map(|_| random_pose(&mut rng, 4.0, 1.0)).collect();
            let mut g = FactorGraph::new();
            for (i, p) in truth.iter().enumerate() {
                g.add_node(i, p.compose(&random_pose(&mut rng, 0.3, 0.1))).unwrap();
            }
            g.add_factor(Factor::prior(0, truth[0], info()).unwrap()).unwrap();
            for i in 1..n {
                let z = truth[i - 1].between(&truth[i]).compose(&random_pose(&mut rng, 0.05, 0.02));
                g.add_factor(Factor::between(i - 1, i, z, info()).unwrap()).unwrap();
            }
            let z = truth[0].between(&truth[n - 1]);
            g.add_factor(Factor::between(0, n - 1, z, info()).unwrap()).unwrap();
            let sol = optimize(&g, &SolverConfig::default()).unwrap();
            for w in sol.cost_history.windows(2) {
                prop_assert!(w[1] <= w[0]);
            }
            prop_assert!(sol.final_cost <= sol.initial_cost);
        }
    }
}
