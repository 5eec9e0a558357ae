use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{so3_exp, RigidPose, Vec3};

/// Dead-reckoning error model: a constant heading-rate bias about the
/// vertical axis, a speed scale error and per-step white noise.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DriftModel {
    /// Degrees per second.
    pub yaw_rate_bias_deg: f64,
    pub velocity_scale_error: f64,
    /// Per-step translation noise (m) and heading noise (deg).
    pub trans_noise_sigma: f64,
    pub rot_noise_sigma_deg: f64,
    pub rng_seed: u64,
}

impl DriftModel {
    pub fn is_zero(&self) -> bool {
        self.yaw_rate_bias_deg == 0.0
            && self.velocity_scale_error == 0.0
            && self.trans_noise_sigma == 0.0
            && self.rot_noise_sigma_deg == 0.0
    }
}

/// Integrates the true relative motions corrupted by the drift model. The
/// first pose is kept; with a zero model the input is returned untouched.
pub fn simulate_odometry(truth: &[RigidPose], timestamps: &[f64], drift: &DriftModel) -> Result<Vec<RigidPose>> {
    if truth.is_empty() {
        return Err(Error::EmptyInput("trajectory".into()));
    }
    if truth.len() != timestamps.len() {
        return Err(Error::InvalidParameter("one timestamp per pose required".into()));
    }
    if drift.is_zero() {
        return Ok(truth.to_vec());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(drift.rng_seed);
    let mut out = Vec::with_capacity(truth.len());
    out.push(truth[0]);
    for i in 1..truth.len() {
        let dt = timestamps[i] - timestamps[i - 1];
        let rel = truth[i - 1].between(&truth[i]);
        let n: [f64; 4] = std::array::from_fn(|_| StandardNormal.sample(&mut rng));
        let dtrans = rel.translation() * (1.0 + drift.velocity_scale_error)
            + Vec3::new(n[0], n[1], n[2]) * drift.trans_noise_sigma;
        let dyaw = (drift.yaw_rate_bias_deg * dt + drift.rot_noise_sigma_deg * n[3]).to_radians();
        let prev: &RigidPose = &out[i - 1];
        let t = prev.translation() + prev.rotate(&dtrans);
        let r = so3_exp(&Vec3::new(0.0, 0.0, dyaw)) * prev.rotation() * rel.rotation();
        out.push(RigidPose::new(r, t));
    }
    Ok(out)
}
