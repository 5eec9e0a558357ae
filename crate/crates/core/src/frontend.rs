//! Frame-level stage: accumulates frames into rigid submaps.
//!
//! Every submap owns a small factor graph over its frames. The first frame
//! `i*` is anchored by a prior at its odometry pose, so frame poses and the
//! submap volume are expressed in odometry-frame coordinates. Each later
//! frame is registered against its predecessor and against the submap (the
//! coarse TSDF cloud or the first frame, whichever has more raw points).

use std::sync::Arc;

use rustc_hash::FxHashSet;

use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::features::{extract_oriented_surface_points, first_returns, occupied_voxels, overlap_of_sets, OrientedCloud, VoxelKey};
use crate::geometry::{PointCloud, RigidPose, SonarFrame};
use crate::posegraph::{diagonal_information, optimize, Factor, FactorGraph};
use crate::registration::{register_resampled, RegistrationResult};
use crate::tsdf::TsdfVolume;

/// A closed, immutable submap.
#[derive(Clone, Debug)]
pub struct SubMap {
    pub id: usize,
    /// Frames with their final frontend poses.
    pub frames: Vec<(SonarFrame, RigidPose)>,
    pub first_frame_index: usize,
    /// Volume in odometry-frame coordinates.
    pub tsdf: Arc<TsdfVolume>,
    /// `oP(s) = oF(i*)`.
    pub odom_pose: RigidPose,
    pub coarse_cloud: PointCloud,
    /// The coarse cells moved onto the zero level; registration uses these.
    pub surface_cloud: PointCloud,
    /// Features of the surface cloud, used by the backend.
    pub features: OrientedCloud,
}

/// Frame and submap predictions share this form: the previous estimate
/// moved by the odometry increment. Without a previous element the odometry pose is used.
pub fn predict_pose(prev: Option<(&RigidPose, &RigidPose)>, odom: &RigidPose) -> RigidPose {
    match prev {
        Some((estimate, prev_odom)) => estimate.compose(&prev_odom.inverse()).compose(odom),
        None => *odom,
    }
}

/// `fF(i)* = fF(i-1) oF(i-1)^-1 oF(i)`, or `oF(i)` for the first frame.
pub fn predict_frame_pose(prev: Option<(&RigidPose, &RigidPose)>, odom: &RigidPose) -> RigidPose {
    predict_pose(prev, odom)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameReport {
    pub index: usize,
    pub submap: usize,
    pub pose: RigidPose,
    pub sequential: Option<f64>,
    pub to_submap: Option<f64>,
    /// Whether the submap target was the coarse TSDF cloud.
    pub used_tsdf_target: bool,
}

#[derive(Debug)]
pub enum FrontendEvent {
    FrameRegistered(FrameReport),
    SubmapClosed(FrameReport, SubMap),
}

struct OpenSubmap {
    id: usize,
    first_index: usize,
    odom_pose: RigidPose,
    tsdf: TsdfVolume,
    graph: FactorGraph,
    frames: Vec<SonarFrame>,
    first_features: OrientedCloud,
    first_len: usize,
    first_voxels: FxHashSet<VoxelKey>,
    coarse: PointCloud,
    /// Features of the zero-level points, rebuilt lazily after integration.
    surface_features: Option<OrientedCloud>,
    prev_features: OrientedCloud,
}

pub struct Frontend {
    cfg: PipelineConfig,
    expected: Option<usize>,
    next_id: usize,
    open: Option<OpenSubmap>,
}

/// Factor information from a registration: translation sigma from the
/// residual, floored, and a fixed rotation sigma.
pub fn registration_information(reg: &RegistrationResult, min_sigma: f64, sigma_rot_deg: f64) -> nalgebra::Matrix6<f64> {
    let sigma = reg.final_error.max(0.0).sqrt().max(min_sigma);
    diagonal_information(sigma, sigma_rot_deg.to_radians())
}

impl Frontend {
    pub fn new(cfg: PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            expected: None,
            next_id: 0,
            open: None,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    fn features(&self, cloud: &PointCloud) -> Result<OrientedCloud> {
        extract_oriented_surface_points(cloud, self.cfg.resolution)
    }

    fn register(&self, source: &PointCloud, target: &OrientedCloud, prior: &RigidPose) -> Option<RegistrationResult> {
        if source.is_empty() || target.is_empty() {
            return None;
        }
        register_resampled(source, target, prior, self.cfg.resolution, &self.cfg.registration)
            .ok()
            .filter(|r| r.converged)
    }

    fn info(&self, reg: &RegistrationResult) -> nalgebra::Matrix6<f64> {
        let f = &self.cfg.frontend;
        registration_information(reg, f.min_sigma_trans, f.sigma_rot_deg)
    }

    pub fn process_frame(&mut self, mut frame: SonarFrame) -> Result<FrontendEvent> {
        if let Some(e) = self.expected {
            if frame.index != e {
                return Err(Error::OutOfOrder {
                    expected: e,
                    got: frame.index,
                });
            }
        }
        self.expected = Some(frame.index + 1);
        let bin = self.cfg.frontend.first_return_bin_deg;
        if bin > 0.0 {
            frame.cloud = first_returns(&frame.cloud, bin.to_radians())?;
        }
        let features = self.features(&frame.cloud)?;
        let report = match self.open.take() {
            None => self.open_submap(frame, features)?,
            Some(open) => self.extend_submap(open, frame, features)?,
        };
        let open = self.open.as_ref().expect("submap is open");
        if self.is_complete(open)? {
            let s = self.open.take().expect("submap is open");
            return Ok(FrontendEvent::SubmapClosed(report, self.close(s)));
        }
        Ok(FrontendEvent::FrameRegistered(report))
    }

    /// Closes the open submap regardless of the completion criterion (end of
    /// session).
    pub fn finish(&mut self) -> Option<SubMap> {
        self.open.take().map(|s| self.close(s))
    }

    fn open_submap(&mut self, frame: SonarFrame, features: OrientedCloud) -> Result<FrameReport> {
        let id = self.next_id;
        self.next_id += 1;
        let pose = predict_frame_pose(None, &frame.odom_pose);
        let mut graph = FactorGraph::new();
        graph.add_node(frame.index, pose)?;
        let f = &self.cfg.frontend;
        let prior_info = diagonal_information(f.prior_sigma_trans, f.prior_sigma_rot_deg.to_radians());
        graph.add_factor(Factor::prior(frame.index, pose, prior_info)?)?;

        let mut tsdf = TsdfVolume::from_config(&self.cfg.tsdf)?;
        tsdf.integrate_frame(pose.translation(), &frame.cloud.transformed(&pose))?;
        let first_voxels = occupied_voxels(&frame.cloud.transformed(&pose), self.cfg.resolution);
        let coarse = tsdf.coarse_point_cloud();
        let report = FrameReport {
            index: frame.index,
            submap: id,
            pose,
            sequential: None,
            to_submap: None,
            used_tsdf_target: false,
        };
        self.open = Some(OpenSubmap {
            id,
            first_index: frame.index,
            odom_pose: frame.odom_pose,
            tsdf,
            graph,
            first_len: frame.cloud.len(),
            first_voxels,
            first_features: features.clone(),
            prev_features: features,
            coarse,
            surface_features: None,
            frames: vec![frame],
        });
        Ok(report)
    }

    fn extend_submap(&mut self, mut s: OpenSubmap, frame: SonarFrame, features: OrientedCloud) -> Result<FrameReport> {
        let prev = s.frames.last().expect("open submap has frames");
        let prev_pose = *s.graph.pose(prev.index).expect("node exists");
        let predicted = predict_frame_pose(Some((&prev_pose, &prev.odom_pose)), &frame.odom_pose);

        // Sequential registration in the sensor frame of i-1.
        let seq = self.register(&frame.cloud, &s.prev_features, &prev_pose.between(&predicted));

        // Submap registration against the richer target.
        let used_tsdf_target = s.coarse.len() > s.first_len;
        let first_pose = *s.graph.pose(s.first_index).expect("anchor exists");
        let to_submap = if used_tsdf_target {
            if s.surface_features.is_none() {
                s.surface_features = Some(self.features(&s.tsdf.surface_point_cloud())?);
            }
            let target = s.surface_features.as_ref().expect("just computed");
            // The result maps sensor coordinates into the anchored frame.
            self.register(&frame.cloud, target, &predicted)
                .map(|r| (s.odom_pose.inverse().compose(&r.transform), r))
        } else {
            self.register(&frame.cloud, &s.first_features, &first_pose.between(&predicted))
                .map(|r| (r.transform, r))
        };

        s.graph.add_node(frame.index, predicted)?;
        match &seq {
            Some(r) => s.graph.add_factor(Factor::between(prev.index, frame.index, r.transform, self.info(r))?)?,
            None if to_submap.is_none() => {
                // Odometry fallback keeps the node attached at its prediction.
                let f = &self.cfg.backend;
                let info = diagonal_information(f.odom_sigma_trans, f.odom_sigma_rot_deg.to_radians());
                let z = prev.odom_pose.between(&frame.odom_pose);
                s.graph.add_factor(Factor::between(prev.index, frame.index, z, info)?)?;
            }
            None => {}
        }
        if let Some((z, r)) = &to_submap {
            s.graph.add_factor(Factor::between(s.first_index, frame.index, *z, self.info(r))?)?;
        }
        let sol = optimize(&s.graph, &self.cfg.solver)?;
        s.graph.apply(&sol);
        let pose = *s.graph.pose(frame.index).expect("node exists");

        s.tsdf.integrate_frame(pose.translation(), &frame.cloud.transformed(&pose))?;
        s.coarse = s.tsdf.coarse_point_cloud();
        s.surface_features = None;
        s.prev_features = features;
        let report = FrameReport {
            index: frame.index,
            submap: s.id,
            pose,
            sequential: seq.map(|r| r.final_error),
            to_submap: to_submap.map(|(_, r)| r.final_error),
            used_tsdf_target,
        };
        s.frames.push(frame);
        self.open = Some(s);
        Ok(report)
    }

    fn is_complete(&self, s: &OpenSubmap) -> Result<bool> {
        let last = s.frames.last().expect("open submap has frames");
        if last.index == s.first_index || last.cloud.is_empty() {
            return Ok(false);
        }
        let pose = s.graph.pose(last.index).expect("node exists");
        let latest = occupied_voxels(&last.cloud.transformed(pose), self.cfg.resolution);
        Ok(submap_complete(
            &latest,
            &s.first_voxels,
            s.coarse.len(),
            s.first_len,
            self.cfg.frontend.overlap_thresh,
        ))
    }

    fn close(&self, s: OpenSubmap) -> SubMap {
        let surface_cloud = s.tsdf.surface_point_cloud();
        let features = extract_oriented_surface_points(&surface_cloud, self.cfg.resolution).expect("valid resolution");
        let frames = s
            .frames
            .into_iter()
            .map(|f| {
                let p = *s.graph.pose(f.index).expect("node exists");
                (f, p)
            })
            .collect();
        SubMap {
            id: s.id,
            frames,
            first_frame_index: s.first_index,
            tsdf: Arc::new(s.tsdf),
            odom_pose: s.odom_pose,
            coarse_cloud: s.coarse,
            surface_cloud,
            features,
        }
    }
}

/// Completion test on occupancy sets at resolution r: the latest frame has
/// drifted away from the first (overlap below the threshold, measured with
/// the latest frame as query) and the submap holds more coarse points than
/// the first frame.
pub fn submap_complete(
    latest: &FxHashSet<VoxelKey>,
    first: &FxHashSet<VoxelKey>,
    coarse_len: usize,
    first_len: usize,
    overlap_thresh: f64,
) -> bool {
    overlap_of_sets(latest, first) < overlap_thresh && coarse_len > first_len
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Vec3;
    use proptest::prelude::*;

    fn arb_pose() -> impl Strategy<Value = RigidPose> {
        (prop::array::uniform3(-2.0..2.0f64), prop::array::uniform3(-5.0..5.0f64)).prop_map(|(r, t)| {
            RigidPose::from_rotation_vector(Vec3::from(r), Vec3::from(t))
        })
    }

    #[test]
    fn first_frame_prediction_is_odometry() {
        let o = RigidPose::from_yaw(0.3, Vec3::new(1.0, 2.0, 3.0));
        assert_eq!(predict_frame_pose(None, &o), o);
    }

    proptest! {
        #[test]
        fn prediction_matches_matrix_products(a in arb_pose(), b in arb_pose(), c in arb_pose()) {
            let got = predict_frame_pose(Some((&a, &b)), &c).to_homogeneous();
            let want = a.to_homogeneous() * b.to_homogeneous().try_inverse().unwrap() * c.to_homogeneous();
            prop_assert!((got - want).abs().max() < 1e-9);
            // Without correction the prediction telescopes to the odometry.
            let tel = predict_frame_pose(Some((&b, &b)), &c);
            prop_assert!(tel.max_abs_diff(&c) < 1e-9);
        }
    }

    fn keys(range: std::ops::Range<i32>) -> FxHashSet<VoxelKey> {
        range.map(|x| VoxelKey([x, 0, 0])).collect()
    }

    #[test]
    fn completion_needs_low_overlap_and_a_large_submap() {
        let first = keys(0..10);
        assert!(!submap_complete(&first, &first, 100, 10, 0.3));
        let latest = keys(8..18); // overlap 0.2
        assert!(!submap_complete(&latest, &first, 5, 10, 0.3));
        assert!(submap_complete(&latest, &first, 50, 10, 0.3));
    }

    #[test]
    fn out_of_order_frames_are_rejected() {
        let mut fe = Frontend::new(PipelineConfig::default()).unwrap();
        let frame = |index| SonarFrame {
            index,
            timestamp: index as f64,
            odom_pose: RigidPose::identity(),
            cloud: PointCloud::empty(),
        };
        fe.process_frame(frame(0)).unwrap();
        assert!(matches!(fe.process_frame(frame(2)), Err(Error::OutOfOrder { expected: 1, got: 2 })));
    }

    #[test]
    fn empty_frames_fall_back_to_odometry() {
        let mut fe = Frontend::new(PipelineConfig::default()).unwrap();
        for i in 0..3 {
            let odom = RigidPose::from_translation(Vec3::new(0.1 * i as f64, 0.0, 0.0));
            let ev = fe
                .process_frame(SonarFrame {
                    index: i,
                    timestamp: i as f64,
                    odom_pose: odom,
                    cloud: PointCloud::empty(),
                })
                .unwrap();
            match ev {
                FrontendEvent::FrameRegistered(r) => assert!(r.pose.max_abs_diff(&odom) < 1e-9),
                FrontendEvent::SubmapClosed(..) => panic!("empty frames never close a submap"),
            }
        }
        let s = fe.finish().unwrap();
        assert_eq!(s.frames.len(), 3);
        assert!(s.tsdf.is_empty());
    }
}
