//! Submap-level stage: sequential submap registration, loop closures and the
//! global pose graph. Each optimization `n` (the id of the newest submap)
//! appends `wP_n(s)` to every submap's pose history.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::config::{OverlapQuery, PipelineConfig};
use crate::error::{Error, Result};
use crate::features::{occupied_voxels, overlap_of_sets};
use crate::frontend::{predict_pose, registration_information, SubMap};
use crate::geometry::RigidPose;
use crate::par;
use crate::posegraph::{diagonal_information, optimize, Factor, FactorGraph};
use crate::registration::{register_resampled, RegistrationResult};
use crate::tsdf::reprocess_decision;

#[derive(Clone, Debug, PartialEq)]
pub struct LoopClosure {
    pub from: usize,
    pub to: usize,
    /// Relative pose `wP(to)^-1 wP(from)` implied by the registration.
    pub transform: RigidPose,
    pub error: f64,
    pub overlap: f64,
}

#[derive(Clone, Debug)]
pub struct BackendReport {
    pub n: usize,
    pub submap: usize,
    /// `S_m(n)`: integrated submaps whose pose moved past the reprocess
    /// thresholds since they were last placed in the global map.
    pub moved: Vec<usize>,
    /// `wP_n(s)` for every submap, by id.
    pub poses: Vec<RigidPose>,
    pub loop_closures: Vec<LoopClosure>,
    pub sequential_error: Option<f64>,
    /// Sequential registration failed and the edge carries odometry only.
    pub odometry_only: bool,
    pub lc_threshold: f64,
}

/// `wP(k)** = T_ICP wP(k)*`, where `T_ICP` is a world-frame correction.
/// Unconverged results leave the prediction unchanged; the flag reports
/// whether the registration was used.
pub fn refine_submap_pose(pred: &RigidPose, reg: &RegistrationResult) -> (RigidPose, bool) {
    if reg.converged {
        (reg.transform.compose(pred), true)
    } else {
        (*pred, false)
    }
}

/// `wP(k)* = wP(k-1) oP(k-1)^-1 oP(k)`, or `oP(0)` for the first submap.
pub fn predict_submap_pose(prev: Option<(&RigidPose, &RigidPose)>, odom: &RigidPose) -> RigidPose {
    predict_pose(prev, odom)
}

pub struct Backend {
    cfg: PipelineConfig,
    submaps: Vec<Arc<SubMap>>,
    histories: Vec<BTreeMap<usize, RigidPose>>,
    /// Optimization index at which each submap was last placed.
    placed: Vec<usize>,
    graph: FactorGraph,
    sequential_errors: Vec<f64>,
    loop_closures: Vec<LoopClosure>,
}

fn median(v: &[f64]) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    let m = s.len() / 2;
    Some(if s.len() % 2 == 1 { s[m] } else { 0.5 * (s[m - 1] + s[m]) })
}

impl Backend {
    pub fn new(cfg: PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            submaps: Vec::new(),
            histories: Vec::new(),
            placed: Vec::new(),
            graph: FactorGraph::new(),
            sequential_errors: Vec::new(),
            loop_closures: Vec::new(),
        })
    }

    pub fn submaps(&self) -> &[Arc<SubMap>] {
        &self.submaps
    }

    pub fn history(&self, id: usize) -> Option<&BTreeMap<usize, RigidPose>> {
        self.histories.get(id)
    }

    pub fn loop_closures(&self) -> &[LoopClosure] {
        &self.loop_closures
    }

    pub fn graph(&self) -> &FactorGraph {
        &self.graph
    }

    /// Latest world pose of a submap.
    pub fn current_pose(&self, id: usize) -> Option<&RigidPose> {
        self.histories.get(id)?.values().next_back()
    }

    /// Maps submap-volume coordinates into the world: `wP oP^-1`.
    fn placement(&self, id: usize, world: &RigidPose) -> RigidPose {
        world.compose(&self.submaps[id].odom_pose.inverse())
    }

    fn lc_threshold(&self) -> f64 {
        let b = &self.cfg.backend;
        b.lc_error_thresh.unwrap_or_else(|| {
            median(&self.sequential_errors)
                .map(|m| (b.lc_error_factor * m).max(b.lc_error_floor))
                .unwrap_or(b.lc_error_floor)
        })
    }

    /// Registers `source` submap placed at `source_world` against `target`
    /// at its current pose. Returns the registration in volume coordinates
    /// (source volume into target volume).
    fn register_pair(&self, source: &SubMap, source_world: &RigidPose, target: usize) -> Option<RegistrationResult> {
        let t = &self.submaps[target];
        if source.features.is_empty() || t.features.is_empty() {
            return None;
        }
        let target_place = self.placement(target, self.current_pose(target)?);
        let source_place = source_world.compose(&source.odom_pose.inverse());
        let prior = target_place.between(&source_place);
        register_resampled(&source.surface_cloud, &t.features, &prior, self.cfg.resolution, &self.cfg.registration).ok()
    }

    /// World pose of `source` implied by a volume-to-volume registration
    /// against `target`.
    fn world_from_registration(&self, source: &SubMap, target: usize, transform: &RigidPose) -> RigidPose {
        let target_place = self.placement(target, self.current_pose(target).expect("placed"));
        target_place.compose(transform).compose(&source.odom_pose)
    }

    /// Candidates: non-adjacent older submaps whose coarse clouds overlap
    /// the new one by more than the threshold at resolution r.
    pub fn loop_closure_candidates(&self, s: &SubMap, world: &RigidPose) -> Vec<(usize, f64)> {
        let k = s.id;
        if k < 2 {
            return Vec::new();
        }
        let r = self.cfg.resolution;
        let place = world.compose(&s.odom_pose.inverse());
        let query = occupied_voxels(&s.coarse_cloud.transformed(&place), r);
        let ids: Vec<usize> = (0..k - 1).collect();
        let overlaps = par::map(&ids, |&j| {
            let other = &self.submaps[j];
            let p = self.placement(j, self.current_pose(j).expect("placed"));
            let set = occupied_voxels(&other.coarse_cloud.transformed(&p), r);
            match self.cfg.backend.overlap_query {
                OverlapQuery::New => overlap_of_sets(&query, &set),
                OverlapQuery::Candidate => overlap_of_sets(&set, &query),
            }
        });
        ids.into_iter()
            .zip(overlaps)
            .filter(|(_, o)| *o > self.cfg.backend.lc_overlap_thresh)
            .collect()
    }

    /// Verifies candidates by registration and keeps those under the error
    /// gate.
    pub fn detect_loop_closures(&self, s: &SubMap, world: &RigidPose) -> Vec<LoopClosure> {
        let candidates = self.loop_closure_candidates(s, world);
        let threshold = self.lc_threshold();
        let results = par::map(&candidates, |&(j, overlap)| {
            let reg = self.register_pair(s, world, j)?;
            if !reg.converged || reg.final_error >= threshold {
                return None;
            }
            let w = self.world_from_registration(s, j, &reg.transform);
            Some(LoopClosure {
                from: s.id,
                to: j,
                transform: self.current_pose(j).expect("placed").between(&w),
                error: reg.final_error,
                overlap,
            })
        });
        results.into_iter().flatten().collect()
    }

    pub fn process_submap(&mut self, submap: Arc<SubMap>) -> Result<BackendReport> {
        let k = submap.id;
        if k != self.submaps.len() {
            return Err(Error::OutOfOrder {
                expected: self.submaps.len(),
                got: k,
            });
        }
        let b = self.cfg.backend.clone();
        let prev = k.checked_sub(1);
        let pred = predict_submap_pose(
            prev.map(|p| (self.current_pose(p).expect("placed"), &self.submaps[p].odom_pose)),
            &submap.odom_pose,
        );

        let mut sequential_error = None;
        let mut odometry_only = false;
        let mut refined = pred;
        let mut seq_factor = None;
        if let Some(p) = prev {
            let prev_world = *self.current_pose(p).expect("placed");
            let reg = self.register_pair(&submap, &pred, p);
            if let Some(r) = reg.as_ref().filter(|r| !r.converged) {
                log::debug!(
                    "submap {k}: sequential registration rejected (matched {:.2}, {} iterations, error {:.2e})",
                    r.matched_fraction,
                    r.iterations,
                    r.final_error
                );
            }
            match reg.filter(|r| r.converged) {
                Some(reg) => {
                    // Express the correction in the world frame, then refine.
                    let w = self.world_from_registration(&submap, p, &reg.transform);
                    let world_reg = RegistrationResult {
                        transform: w.compose(&pred.inverse()),
                        ..reg.clone()
                    };
                    refined = refine_submap_pose(&pred, &world_reg).0;
                    sequential_error = Some(reg.final_error);
                    self.sequential_errors.push(reg.final_error);
                    let info = registration_information(&reg, b.min_sigma_trans, b.sigma_rot_deg);
                    seq_factor = Some(Factor::between(p, k, prev_world.between(&refined), info)?);
                }
                None => {
                    odometry_only = true;
                    let info = diagonal_information(b.odom_sigma_trans, b.odom_sigma_rot_deg.to_radians());
                    let z = self.submaps[p].odom_pose.between(&submap.odom_pose);
                    seq_factor = Some(Factor::between(p, k, z, info)?);
                }
            }
        }

        let lc_threshold = self.lc_threshold();
        // Register the submap before candidates are evaluated.
        self.submaps.push(Arc::clone(&submap));
        let closures = self.detect_loop_closures(&submap, &refined);

        self.graph.add_node(k, refined)?;
        if k == 0 {
            let info = diagonal_information(b.prior_sigma_trans, b.prior_sigma_rot_deg.to_radians());
            self.graph.add_factor(Factor::prior(0, refined, info)?)?;
        }
        if let Some(f) = seq_factor {
            self.graph.add_factor(f)?;
        }
        for lc in &closures {
            let info = diagonal_information(lc.error.max(0.0).sqrt().max(b.min_sigma_trans), b.sigma_rot_deg.to_radians());
            self.graph.add_factor(Factor::between(lc.to, lc.from, lc.transform, info)?)?;
        }
        let sol = optimize(&self.graph, &self.cfg.solver)?;
        self.graph.apply(&sol);

        let n = k;
        self.histories.push(BTreeMap::new());
        self.placed.push(n);
        let poses: Vec<RigidPose> = (0..=k).map(|id| *self.graph.pose(id).expect("node exists")).collect();
        for (id, p) in poses.iter().enumerate() {
            self.histories[id].insert(n, *p);
        }
        let mut moved = Vec::new();
        for id in 0..k {
            let old = &self.histories[id][&self.placed[id]];
            if reprocess_decision(old, &poses[id], &self.cfg.reprocess) {
                moved.push(id);
                self.placed[id] = n;
            }
        }
        self.loop_closures.extend(closures.iter().cloned());
        Ok(BackendReport {
            n,
            submap: k,
            moved,
            poses,
            loop_closures: closures,
            sequential_error,
            odometry_only,
            lc_threshold,
        })
    }

    /// World pose of every frame: `wP_n(s) oP(s)^-1 fF(i)`.
    pub fn frame_trajectory(&self) -> Vec<(usize, f64, RigidPose)> {
        let mut out = Vec::new();
        for s in &self.submaps {
            let place = self.placement(s.id, self.current_pose(s.id).expect("placed"));
            for (f, pose) in &s.frames {
                out.push((f.index, f.timestamp, place.compose(pose)));
            }
        }
        out
    }
}
