#![allow(dead_code)]

use std::path::{Path, PathBuf};

use sonarslam::io::Dataset;
use sonarslam::simkit::Scenario;

pub fn scenario_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name)
}

pub fn bundled(name: &str) -> Scenario {
    Scenario::load(&scenario_path(name)).expect("bundled scenario loads")
}

/// One lap around a small furnished room with a biased compass. The lap
/// ends where it started, so the last submaps overlap the first.
pub const LOOP_ROOM: &str = r#"
name = "loop_room"
seed = 7
rate_hz = 6.0

[sensor]
h_beams = 64
v_beams = 24
range_noise_sigma = 0.01

[drift]
yaw_rate_bias_deg = 0.4
velocity_scale_error = 0.01
trans_noise_sigma = 0.001
rot_noise_sigma_deg = 0.01

[trajectory]
speed = 0.5
yaw_rate_deg = 20.0
waypoints = [
  { position = [-2.0, -1.5, 1.0], yaw_deg = 0.0 },
  { position = [2.0, -1.5, 1.0], yaw_deg = 0.0 },
  { position = [2.0, -1.5, 1.0], yaw_deg = 90.0 },
  { position = [2.0, 1.5, 1.0], yaw_deg = 90.0 },
  { position = [2.0, 1.5, 1.0], yaw_deg = 180.0 },
  { position = [-2.0, 1.5, 1.0], yaw_deg = 180.0 },
  { position = [-2.0, 1.5, 1.0], yaw_deg = 270.0 },
  { position = [-2.0, -1.5, 1.0], yaw_deg = 270.0 },
  { position = [-2.0, -1.5, 1.0], yaw_deg = 360.0 },
  { position = [1.0, -1.5, 1.0], yaw_deg = 360.0 },
]

[[primitives]]
type = "box"
center = [0.0, 0.0, 1.5]
half_extents = [5.03, 4.03, 2.03]

[[primitives]]
type = "box"
center = [4.73, 1.03, 1.5]
half_extents = [0.3, 0.4, 2.03]

[[primitives]]
type = "box"
center = [-4.83, -1.47, 1.5]
half_extents = [0.2, 0.35, 2.03]

[[primitives]]
type = "box"
center = [1.53, 3.83, 1.27]
half_extents = [1.5, 0.2, 0.15]

[[primitives]]
type = "box"
center = [-1.97, -3.83, 2.13]
half_extents = [1.0, 0.2, 0.2]

[[primitives]]
type = "box"
center = [2.53, -3.73, 1.53]
half_extents = [0.4, 0.3, 1.2]

[[primitives]]
type = "sphere"
center = [0.5, 0.3, 3.1]
radius = 0.4

[[primitives]]
type = "sphere"
center = [-3.0, 2.0, 3.0]
radius = 0.5

[[primitives]]
type = "sphere"
center = [3.6, -0.5, 3.2]
radius = 0.4
"#;

pub fn loop_room() -> Scenario {
    Scenario::parse(LOOP_ROOM, Path::new("loop_room.toml")).expect("fixture parses")
}

pub fn render(s: &Scenario) -> Dataset {
    s.render().expect("scenario renders")
}
