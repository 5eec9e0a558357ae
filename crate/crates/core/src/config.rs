//! Pipeline configuration. Files are TOML: `key = value` lines, `#`
//! comments and optional `[section]` headers. Unknown keys are rejected.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::posegraph::SolverConfig;
use crate::registration::RegConfig;
use crate::tsdf::{ReprocessThresholds, TsdfConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FrontendConfig {
    /// The submap closes when the latest/first frame overlap drops below this.
    pub overlap_thresh: f64,
    /// Lower bound on the translation sigma of registration factors, m.
    pub min_sigma_trans: f64,
    pub sigma_rot_deg: f64,
    /// Sigmas of the anchor prior on the first submap frame.
    pub prior_sigma_trans: f64,
    pub prior_sigma_rot_deg: f64,
    /// Bearing cell for the first-return filter, degrees; 0 disables it.
    pub first_return_bin_deg: f64,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        Self {
            overlap_thresh: 0.3,
            min_sigma_trans: 0.02,
            sigma_rot_deg: 0.5,
            prior_sigma_trans: 1e-3,
            prior_sigma_rot_deg: 0.01,
            first_return_bin_deg: 0.25,
        }
    }
}

/// Which submap's occupancy is the denominator of the loop-closure overlap.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OverlapQuery {
    /// The newly closed submap (default).
    New,
    /// The older candidate submap.
    Candidate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub lc_overlap_thresh: f64,
    /// Adaptive gate: factor times the median sequential registration error.
    pub lc_error_factor: f64,
    pub lc_error_floor: f64,
    /// Fixed gate overriding the adaptive one when set, m^2.
    pub lc_error_thresh: Option<f64>,
    pub overlap_query: OverlapQuery,
    pub min_sigma_trans: f64,
    pub sigma_rot_deg: f64,
    /// Sigmas for odometry-only edges (failed sequential registration).
    pub odom_sigma_trans: f64,
    pub odom_sigma_rot_deg: f64,
    pub prior_sigma_trans: f64,
    pub prior_sigma_rot_deg: f64,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            lc_overlap_thresh: 0.5,
            lc_error_factor: 4.0,
            lc_error_floor: 1e-4,
            lc_error_thresh: None,
            overlap_query: OverlapQuery::New,
            min_sigma_trans: 0.02,
            sigma_rot_deg: 0.5,
            odom_sigma_trans: 0.5,
            odom_sigma_rot_deg: 5.0,
            prior_sigma_trans: 1e-3,
            prior_sigma_rot_deg: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Feature and correspondence resolution r, m.
    pub resolution: f64,
    pub registration: RegConfig,
    pub frontend: FrontendConfig,
    pub backend: BackendConfig,
    pub tsdf: TsdfConfig,
    pub solver: SolverConfig,
    pub reprocess: ReprocessThresholds,
    /// Capacity of each inter-stage queue.
    pub queue_capacity: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            resolution: 0.5,
            registration: RegConfig::default(),
            frontend: FrontendConfig::default(),
            backend: BackendConfig::default(),
            tsdf: TsdfConfig::default(),
            solver: SolverConfig::default(),
            reprocess: ReprocessThresholds::default(),
            queue_capacity: 4,
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = parse_toml(&text, path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("resolution", self.resolution),
            ("tsdf.voxel_size", self.tsdf.voxel_size),
            ("tsdf.truncation", self.tsdf.truncation),
            ("frontend.min_sigma_trans", self.frontend.min_sigma_trans),
            ("frontend.sigma_rot_deg", self.frontend.sigma_rot_deg),
            ("backend.min_sigma_trans", self.backend.min_sigma_trans),
            ("backend.odom_sigma_trans", self.backend.odom_sigma_trans),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidParameter(format!("{name} must be positive, got {v}")));
            }
        }
        let bin = self.frontend.first_return_bin_deg;
        if !(bin >= 0.0 && bin.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "frontend.first_return_bin_deg must be non-negative, got {bin}"
            )));
        }
        if self.queue_capacity == 0 {
            return Err(Error::InvalidParameter("queue_capacity must be at least 1".into()));
        }
        Ok(())
    }

    /// Fully resolved configuration as TOML text.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].bytes().filter(|&b| b == b'\n').count() + 1
}

/// Parses TOML into `T`, reporting the offending line on failure.
pub fn parse_toml<T: DeserializeOwned>(text: &str, path: &Path) -> Result<T> {
    toml::from_str(text).map_err(|e| match e.span() {
        Some(span) => Error::ParseLine {
            path: path.to_path_buf(),
            line: line_of(text, span.start),
            message: e.message().to_string(),
        },
        None => Error::Parse {
            path: path.to_path_buf(),
            message: e.message().to_string(),
        },
    })
}
