//! File formats: TUM trajectories, PLY clouds and meshes, dataset layout.

pub mod dataset;
pub mod ply;
pub mod tum;

pub use dataset::{Dataset, Manifest};
pub use tum::{read_tum, write_tum, Trajectory};
