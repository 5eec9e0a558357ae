//! Deterministic synthetic datasets: analytic scenes, a fan-shaped range
//! sensor, waypoint trajectories and drifting odometry.

mod odometry;
mod scene;
mod sensor;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use odometry::{simulate_odometry, DriftModel};
pub use scene::{Primitive, Scene, Wave};
pub use sensor::{render_frame, SensorModel};

use crate::error::{Error, Result};
use crate::geometry::{RigidPose, SonarFrame, Vec3};
use crate::io::dataset::{Dataset, Manifest};
use crate::par;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Waypoint {
    pub position: [f64; 3],
    #[serde(default)]
    pub yaw_deg: f64,
}

/// Piecewise-linear path through waypoints. Position and heading are
/// interpolated linearly per segment; a segment lasts as long as the
/// slower of translating at `speed` and turning at `yaw_rate_deg`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectorySpec {
    pub speed: f64,
    #[serde(default = "default_yaw_rate")]
    pub yaw_rate_deg: f64,
    /// Fixed sensor tilt, applied after the heading.
    #[serde(default)]
    pub pitch_deg: f64,
    #[serde(default)]
    pub roll_deg: f64,
    pub waypoints: Vec<Waypoint>,
}

fn default_yaw_rate() -> f64 {
    10.0
}

fn default_rate() -> f64 {
    6.0
}

impl TrajectorySpec {
    /// Segment end times, starting at 0.
    fn knots(&self) -> Result<Vec<f64>> {
        if self.waypoints.len() < 2 || !(self.speed > 0.0) || !(self.yaw_rate_deg > 0.0) {
            return Err(Error::InvalidParameter(
                "trajectory needs two waypoints and positive speed and yaw rate".into(),
            ));
        }
        let mut knots = vec![0.0];
        for w in self.waypoints.windows(2) {
            let d = (Vec3::from(w[1].position) - Vec3::from(w[0].position)).norm();
            let turn = (w[1].yaw_deg - w[0].yaw_deg).abs();
            let dur = (d / self.speed).max(turn / self.yaw_rate_deg);
            if dur <= 0.0 {
                return Err(Error::InvalidParameter("repeated waypoint".into()));
            }
            knots.push(knots.last().unwrap() + dur);
        }
        Ok(knots)
    }

    pub fn duration(&self) -> Result<f64> {
        Ok(*self.knots()?.last().unwrap())
    }

    /// Sensor pose at time `t`, clamped to the path ends.
    pub fn pose_at(&self, t: f64) -> Result<RigidPose> {
        let knots = self.knots()?;
        let seg = knots.windows(2).position(|k| t <= k[1]).unwrap_or(knots.len() - 2);
        let (t0, t1) = (knots[seg], knots[seg + 1]);
        let s = ((t - t0) / (t1 - t0)).clamp(0.0, 1.0);
        let (a, b) = (&self.waypoints[seg], &self.waypoints[seg + 1]);
        let p = Vec3::from(a.position) * (1.0 - s) + Vec3::from(b.position) * s;
        let yaw = a.yaw_deg * (1.0 - s) + b.yaw_deg * s;
        Ok(RigidPose::from_euler_zyx(
            yaw.to_radians(),
            self.pitch_deg.to_radians(),
            self.roll_deg.to_radians(),
            p,
        ))
    }

    /// Poses sampled at `rate_hz` from t = 0 through the end of the path.
    pub fn sample(&self, rate_hz: f64) -> Result<(Vec<f64>, Vec<RigidPose>)> {
        let n = (self.duration()? * rate_hz).floor() as usize + 1;
        let times: Vec<f64> = (0..n).map(|i| i as f64 / rate_hz).collect();
        let poses = times.iter().map(|t| self.pose_at(*t)).collect::<Result<_>>()?;
        Ok((times, poses))
    }
}

/// A complete simulation description, read from TOML.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_rate")]
    pub rate_hz: f64,
    #[serde(default)]
    pub sensor: SensorModel,
    #[serde(default)]
    pub drift: DriftModel,
    pub trajectory: TrajectorySpec,
    pub primitives: Vec<Primitive>,
}

impl Scenario {
    pub fn parse(text: &str, path: &Path) -> Result<Scenario> {
        let s: Scenario = crate::config::parse_toml(text, path)?;
        s.sensor.validate()?;
        Scene::new(s.primitives.clone())?;
        s.trajectory.knots()?;
        if !(s.rate_hz > 0.0) {
            return Err(Error::InvalidParameter("rate_hz must be positive".into()));
        }
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Scenario> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    /// Overrides every random stream from a single seed.
    pub fn reseed(&mut self, seed: u64) {
        self.seed = seed;
        self.sensor.rng_seed = seed.wrapping_mul(2).wrapping_add(1);
        self.drift.rng_seed = seed.wrapping_mul(2).wrapping_add(2);
    }

    /// Renders the dataset in memory, with clouds quantized to float32 as
    /// they are stored on disk.
    pub fn render(&self) -> Result<Dataset> {
        let scene = Scene::new(self.primitives.clone())?;
        let (times, truth) = self.trajectory.sample(self.rate_hz)?;
        let odom = simulate_odometry(&truth, &times, &self.drift)?;
        let clouds = par::map_range(truth.len(), |i| {
            let c = render_frame(&scene, &truth[i], &self.sensor, &mut self.sensor.frame_rng(i));
            let q: Vec<Vec3> = c
                .points()
                .iter()
                .map(|p| p.map(|v| v as f32 as f64))
                .collect();
            crate::geometry::PointCloud::from_finite(q)
        });
        let frames = clouds
            .into_iter()
            .enumerate()
            .map(|(i, cloud)| SonarFrame {
                index: i,
                timestamp: times[i],
                odom_pose: odom[i],
                cloud,
            })
            .collect::<Vec<_>>();
        Ok(Dataset {
            manifest: Manifest {
                name: self.name.clone(),
                frame_count: frames.len(),
                rate_hz: self.rate_hz,
                seed: self.seed,
                sensor: self.sensor.clone(),
            },
            frames,
            ground_truth: Some(times.iter().copied().zip(truth).collect()),
            gt_mesh: Some(scene.reference_mesh()),
        })
    }
}

/// Renders `scenario`, writes it under `out_dir` and returns the dataset as
/// read back from disk.
pub fn generate_dataset(scenario: &Scenario, out_dir: &Path) -> Result<Dataset> {
    scenario.render()?.save(out_dir)?;
    Dataset::load(out_dir)
}
