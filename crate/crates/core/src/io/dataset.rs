//! On-disk dataset layout:
//!
//! ```text
//! manifest.toml        frame count, rate and sensor metadata
//! odom.tum             one odometry pose per frame
//! gt.tum               optional ground-truth poses, same timestamps
//! gt_mesh.ply          optional reference mesh
//! frames/000000.ply    sensor-frame clouds, dense numbering from 0
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::ply;
use super::tum::{self, Trajectory};
use crate::error::{Error, Result};
use crate::geometry::SonarFrame;
use crate::par;
use crate::simkit::SensorModel;
use crate::tsdf::TriangleMesh;

pub const MANIFEST: &str = "manifest.toml";
pub const ODOM: &str = "odom.tum";
pub const GT: &str = "gt.tum";
pub const GT_MESH: &str = "gt_mesh.ply";
pub const FRAMES_DIR: &str = "frames";

/// Maximum timestamp mismatch tolerated between odom.tum and gt.tum.
const TIME_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub name: String,
    pub frame_count: usize,
    pub rate_hz: f64,
    #[serde(default)]
    pub seed: u64,
    pub sensor: SensorModel,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: Manifest,
    pub frames: Vec<SonarFrame>,
    pub ground_truth: Option<Trajectory>,
    pub gt_mesh: Option<TriangleMesh>,
}

pub fn frame_path(dir: &Path, index: usize) -> PathBuf {
    dir.join(FRAMES_DIR).join(format!("{index:06}.ply"))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

impl Dataset {
    pub fn odometry(&self) -> Trajectory {
        self.frames.iter().map(|f| (f.timestamp, f.odom_pose)).collect()
    }

    /// Writes every file of the layout. Clouds are stored as float32.
    pub fn save(&self, dir: &Path) -> Result<()> {
        create_dir(&dir.join(FRAMES_DIR))?;
        let manifest = toml::to_string(&self.manifest).map_err(|e| Error::Stage(e.to_string()))?;
        let mpath = dir.join(MANIFEST);
        std::fs::write(&mpath, manifest).map_err(|e| Error::io(&mpath, e))?;
        tum::write_tum(&dir.join(ODOM), &self.odometry())?;
        if let Some(gt) = &self.ground_truth {
            tum::write_tum(&dir.join(GT), gt)?;
        }
        if let Some(mesh) = &self.gt_mesh {
            ply::write_mesh(&dir.join(GT_MESH), mesh)?;
        }
        let results = par::map(&self.frames, |f| ply::write_cloud(&frame_path(dir, f.index), &f.cloud));
        results.into_iter().collect::<Result<Vec<()>>>()?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Dataset> {
        let mpath = dir.join(MANIFEST);
        if !mpath.is_file() {
            return Err(Error::Schema(format!("{}: missing {MANIFEST}", dir.display())));
        }
        let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let manifest: Manifest = crate::config::parse_toml(&text, &mpath)?;

        let opath = dir.join(ODOM);
        if !opath.is_file() {
            return Err(Error::Schema(format!("{}: missing {ODOM}", dir.display())));
        }
        let odom = tum::read_tum(&opath)?;
        if odom.len() != manifest.frame_count {
            return Err(Error::Schema(format!(
                "{ODOM} has {} poses but the manifest declares {} frames",
                odom.len(),
                manifest.frame_count
            )));
        }
        for i in 1..odom.len() {
            if odom[i].0 <= odom[i - 1].0 {
                return Err(Error::Schema(format!("frame {i}: timestamps must strictly increase")));
            }
        }

        let ground_truth = if dir.join(GT).is_file() {
            let gt = tum::read_tum(&dir.join(GT))?;
            if gt.len() != odom.len() {
                return Err(Error::Schema(format!("{GT} has {} poses, expected {}", gt.len(), odom.len())));
            }
            if let Some(i) = (0..gt.len()).find(|&i| (gt[i].0 - odom[i].0).abs() > TIME_TOLERANCE) {
                return Err(Error::Schema(format!("frame {i}: {GT} timestamp does not match {ODOM}")));
            }
            Some(gt)
        } else {
            None
        };
        let gt_mesh = if dir.join(GT_MESH).is_file() {
            Some(ply::read_ply(&dir.join(GT_MESH))?.into_mesh()?)
        } else {
            None
        };

        let fdir = dir.join(FRAMES_DIR);
        if !fdir.is_dir() {
            return Err(Error::Schema(format!("{}: missing {FRAMES_DIR}/", dir.display())));
        }
        let on_disk = std::fs::read_dir(&fdir)
            .map_err(|e| Error::io(&fdir, e))?
            .filter(|e| e.as_ref().map(|e| e.path().extension().is_some_and(|x| x == "ply")).unwrap_or(false))
            .count();
        if on_disk != manifest.frame_count {
            return Err(Error::Schema(format!(
                "{FRAMES_DIR}/ holds {on_disk} clouds but the manifest declares {} frames",
                manifest.frame_count
            )));
        }
        let frames = par::map_range(manifest.frame_count, |i| -> Result<SonarFrame> {
            let path = frame_path(dir, i);
            if !path.is_file() {
                return Err(Error::Schema(format!("frame {i}: missing {}", path.display())));
            }
            let cloud = ply::read_ply(&path)?.into_cloud().map_err(|e| Error::Schema(format!("frame {i}: {e}")))?;
            Ok(SonarFrame {
                index: i,
                timestamp: odom[i].0,
                odom_pose: odom[i].1,
                cloud,
            })
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;

        Ok(Dataset {
            manifest,
            frames,
            ground_truth,
            gt_mesh,
        })
    }
}
