use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::scene::Scene;
use crate::error::{Error, Result};
use crate::geometry::{PointCloud, RigidPose, Vec3};

/// Fan-shaped multibeam range sensor. Body frame: x forward, y right,
/// z down; azimuth rotates about z, elevation tilts toward +z.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SensorModel {
    pub h_fov_deg: f64,
    pub v_fov_deg: f64,
    pub h_beams: usize,
    pub v_beams: usize,
    pub max_range: f64,
    pub range_noise_sigma: f64,
    pub dropout_prob: f64,
    pub multipath_prob: f64,
    pub rng_seed: u64,
}

impl Default for SensorModel {
    fn default() -> Self {
        Self {
            h_fov_deg: 90.0,
            v_fov_deg: 40.0,
            h_beams: 128,
            v_beams: 48,
            max_range: 15.0,
            range_noise_sigma: 0.02,
            dropout_prob: 0.0,
            multipath_prob: 0.0,
            rng_seed: 1,
        }
    }
}

impl SensorModel {
    pub fn validate(&self) -> Result<()> {
        let ok = self.h_fov_deg > 0.0
            && self.h_fov_deg < 180.0
            && self.v_fov_deg > 0.0
            && self.v_fov_deg < 180.0
            && self.h_beams > 0
            && self.v_beams > 0
            && self.max_range > 0.0
            && self.range_noise_sigma >= 0.0
            && (0.0..=1.0).contains(&self.dropout_prob)
            && (0.0..=1.0).contains(&self.multipath_prob);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!("invalid sensor model {self:?}")))
        }
    }

    /// Beam angles (azimuth, elevation) in radians, sampled at cell centres
    /// so the fan never exceeds the nominal field of view.
    pub fn beam_angles(&self) -> Vec<(f64, f64)> {
        let (h, v) = (self.h_fov_deg.to_radians(), self.v_fov_deg.to_radians());
        let mut out = Vec::with_capacity(self.h_beams * self.v_beams);
        for j in 0..self.v_beams {
            let el = -0.5 * v + v * (j as f64 + 0.5) / self.v_beams as f64;
            for i in 0..self.h_beams {
                let az = -0.5 * h + h * (i as f64 + 0.5) / self.h_beams as f64;
                out.push((az, el));
            }
        }
        out
    }

    pub fn beam_directions(&self) -> Vec<Vec3> {
        self.beam_angles()
            .into_iter()
            .map(|(az, el)| Vec3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin()))
            .collect()
    }

    /// Random stream for one frame, independent of render order.
    pub fn frame_rng(&self, frame_index: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.rng_seed);
        rng.set_stream(frame_index as u64);
        rng
    }
}

/// Casts every beam from `sensor_pose` and returns hits in the sensor
/// frame. Each beam consumes exactly three draws so streams stay aligned
/// whatever the scene.
pub fn render_frame<R: Rng>(scene: &Scene, sensor_pose: &RigidPose, model: &SensorModel, rng: &mut R) -> PointCloud {
    let origin = sensor_pose.translation();
    let mut points = Vec::new();
    for dir in model.beam_directions() {
        let drop: f64 = rng.random();
        let noise: f64 = StandardNormal.sample(rng);
        let ghost: f64 = rng.random();
        let world_dir = sensor_pose.rotate(&dir);
        let Some(range) = scene.raycast(origin, &world_dir) else {
            continue;
        };
        if range > model.max_range || drop < model.dropout_prob {
            continue;
        }
        let measured = range + model.range_noise_sigma * noise;
        if measured <= 0.0 {
            continue;
        }
        points.push(dir * measured);
        if ghost < model.multipath_prob && 2.0 * measured <= model.max_range {
            points.push(dir * (2.0 * measured));
        }
    }
    PointCloud::from_finite(points)
}
