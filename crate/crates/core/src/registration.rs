//! Prior-seeded Generalized-ICP between two oriented surface clouds, using
//! the plane-to-plane covariance model.
//!
//! Each surface point gets the covariance `I - (1 - eps) n n^T` (thin along
//! its normal). For a correspondence `(a, b)` under the current estimate
//! `T` the residual is `d = b - T a` and its cost `d^T (C_b + R C_a R^T)^-1 d`.
//! Updates are right-multiplied twists (`T <- T exp(delta)`), which keeps the
//! solver invariant to any rigid motion applied to the target frame.

use nalgebra::{Matrix3x6, Matrix6, SymmetricEigen, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{extract_oriented_surface_points, OrientedCloud, VoxelGrid};
use crate::geometry::{hat, Mat3, PointCloud, RigidPose, Twist, Vec3};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegConfig {
    /// Convergence threshold on the twist-update norm.
    pub tol: f64,
    pub max_iters: usize,
    /// Minimum matched fraction of source points for a converged result.
    pub min_match: f64,
    /// Covariance along the normal relative to the in-plane directions.
    pub epsilon: f64,
    /// Hessian directions weaker than this fraction of the strongest one
    /// (after scaling rotations by the source radius) are not updated, so the
    /// estimate keeps its prior along unobservable directions.
    pub degeneracy_ratio: f64,
    pub max_halvings: usize,
}

impl Default for RegConfig {
    fn default() -> Self {
        Self {
            tol: 1e-4,
            max_iters: 50,
            min_match: 0.3,
            epsilon: 1e-3,
            degeneracy_ratio: 1e-2,
            max_halvings: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegistrationResult {
    /// Maps source coordinates into the target frame.
    pub transform: RigidPose,
    /// Mean plane-to-plane residual, m^2 (the cost scaled by `2 eps`).
    pub final_error: f64,
    pub matched_fraction: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Accepted error after each iteration, starting with the prior.
    pub error_history: Vec<f64>,
}

struct Evaluation {
    error: f64,
    matched: usize,
    // (source index, target index, combined information matrix)
    matches: Vec<(usize, usize, Mat3)>,
}

/// Target-side data reused across iterations and registrations.
pub struct RegistrationTarget<'a> {
    cloud: &'a OrientedCloud,
    means: Vec<Vec3>,
    covs: Vec<Mat3>,
    grid: VoxelGrid,
}

impl<'a> RegistrationTarget<'a> {
    pub fn new(cloud: &'a OrientedCloud, max_distance: f64, epsilon: f64) -> Self {
        let means = cloud.means();
        let grid = VoxelGrid::build(&means, max_distance);
        let covs = cloud.points().iter().map(|s| plane_covariance(&s.normal, epsilon)).collect();
        Self {
            cloud,
            means,
            covs,
            grid,
        }
    }

    pub fn len(&self) -> usize {
        self.cloud.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cloud.is_empty()
    }
}

/// `R_n diag(eps, 1, 1) R_n^T` where `R_n` maps the x axis onto `n`.
pub fn plane_covariance(normal: &Vec3, epsilon: f64) -> Mat3 {
    Mat3::identity() - normal * normal.transpose() * (1.0 - epsilon)
}

pub fn register(
    source: &OrientedCloud,
    target: &OrientedCloud,
    prior: &RigidPose,
    max_distance: f64,
    cfg: &RegConfig,
) -> Result<RegistrationResult> {
    if !(max_distance > 0.0 && max_distance.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "correspondence distance must be positive, got {max_distance}"
        )));
    }
    if source.is_empty() || target.is_empty() {
        return Err(Error::InsufficientFeatures {
            source_len: source.len(),
            target_len: target.len(),
        });
    }
    let tgt = RegistrationTarget::new(target, max_distance, cfg.epsilon);
    Ok(register_prepared(source, &tgt, prior, cfg))
}

/// Registers a raw source cloud after moving it into the target frame with
/// the prior and extracting its surface points there. Source and target are
/// then sampled on the same voxel lattice, so sampling artefacts that travel
/// with the sensor do not pull the estimate toward the identity.
pub fn register_resampled(
    source: &PointCloud,
    target: &OrientedCloud,
    prior: &RigidPose,
    max_distance: f64,
    cfg: &RegConfig,
) -> Result<RegistrationResult> {
    let moved = extract_oriented_surface_points(&source.transformed(prior), max_distance)?;
    let mut res = register(&moved, target, &RigidPose::identity(), max_distance, cfg)?;
    res.transform = res.transform.compose(prior);
    Ok(res)
}

pub fn register_prepared(
    source: &OrientedCloud,
    target: &RegistrationTarget<'_>,
    prior: &RigidPose,
    cfg: &RegConfig,
) -> RegistrationResult {
    let src_means = source.means();
    let src_covs: Vec<Mat3> = source
        .points()
        .iter()
        .map(|s| plane_covariance(&s.normal, cfg.epsilon))
        .collect();
    // Length scale that makes rotation and translation directions comparable.
    let radius = (src_means.iter().map(|m| m.norm_squared()).sum::<f64>() / src_means.len().max(1) as f64)
        .sqrt()
        .max(1e-3);

    let evaluate = |pose: &RigidPose| -> Evaluation {
        let rot = pose.rotation();
        let mut matches = Vec::with_capacity(src_means.len());
        let mut total = 0.0;
        for (i, a) in src_means.iter().enumerate() {
            let q = pose.transform_point(a);
            if let Some((j, _)) = target.grid.nearest_within(&target.means, &q) {
                let combined = target.covs[j] + rot * src_covs[i] * rot.transpose();
                let info = combined.try_inverse().unwrap_or_else(Mat3::identity);
                let d = target.means[j] - q;
                total += (d.transpose() * info * d)[(0, 0)];
                matches.push((i, j, info));
            }
        }
        let matched = matches.len();
        let error = if matched > 0 {
            2.0 * cfg.epsilon * total / matched as f64
        } else {
            0.0
        };
        Evaluation {
            error,
            matched,
            matches,
        }
    };

    let n_src = src_means.len() as f64;
    let mut pose = *prior;
    let mut current = evaluate(&pose);
    let mut history = vec![current.error];
    let mut iterations = 0;
    let mut small_update = false;

    while iterations < cfg.max_iters && current.matched > 0 {
        iterations += 1;
        let (h, g) = normal_equations(&pose, &src_means, &target.means, &current.matches);
        let delta = match projected_step(&h, &g, radius, cfg.degeneracy_ratio) {
            Some(d) => d,
            None => {
                small_update = true;
                break;
            }
        };

        let mut step = delta;
        let mut accepted = None;
        for _ in 0..=cfg.max_halvings {
            let candidate = pose.compose(&RigidPose::exp(&Twist::from_vector(&step)));
            let eval = evaluate(&candidate);
            if eval.matched > 0 && eval.error <= current.error {
                accepted = Some((candidate, eval, step.norm()));
                break;
            }
            step *= 0.5;
        }
        match accepted {
            Some((candidate, eval, norm)) => {
                pose = candidate;
                current = eval;
                history.push(current.error);
                if norm < cfg.tol {
                    small_update = true;
                    break;
                }
            }
            None => {
                // No descent along the Gauss-Newton direction: a minimum of
                // the piecewise objective with respect to this match set.
                small_update = true;
                break;
            }
        }
    }

    let matched_fraction = current.matched as f64 / n_src;
    RegistrationResult {
        transform: pose,
        final_error: current.error,
        matched_fraction,
        iterations,
        converged: small_update && current.matched > 0 && matched_fraction >= cfg.min_match,
        error_history: history,
    }
}

fn normal_equations(
    pose: &RigidPose,
    src: &[Vec3],
    tgt: &[Vec3],
    matches: &[(usize, usize, Mat3)],
) -> (Matrix6<f64>, Vector6<f64>) {
    let rot = pose.rotation();
    let mut h = Matrix6::zeros();
    let mut g = Vector6::zeros();
    for &(i, j, ref info) in matches {
        let a = src[i];
        let d = tgt[j] - pose.transform_point(&a);
        // d(residual)/d(delta) = -R [I | -a^]
        let mut jac = Matrix3x6::zeros();
        jac.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-rot));
        jac.fixed_view_mut::<3, 3>(0, 3).copy_from(&(rot * hat(&a)));
        let jt_info = jac.transpose() * info;
        h += jt_info * jac;
        g += jt_info * d;
    }
    (h, g)
}

/// Solves `H delta = -g` restricted to well-conditioned eigen-directions of
/// the scale-normalized Hessian.
fn projected_step(h: &Matrix6<f64>, g: &Vector6<f64>, radius: f64, ratio: f64) -> Option<Vector6<f64>> {
    let scale = Vector6::new(1.0, 1.0, 1.0, 1.0 / radius, 1.0 / radius, 1.0 / radius);
    let s = Matrix6::from_diagonal(&scale);
    let hn = s * h * s;
    let gn = s * g;
    let eig = SymmetricEigen::new(hn);
    let max = eig.eigenvalues.max();
    if !(max > 0.0) {
        return None;
    }
    let mut step = Vector6::zeros();
    for k in 0..6 {
        let lambda = eig.eigenvalues[k];
        if lambda > ratio * max {
            let v = eig.eigenvectors.column(k);
            step -= v * (v.dot(&gn) / lambda);
        }
    }
    Some(s * step)
}
