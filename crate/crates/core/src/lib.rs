pub mod backend;
pub mod config;
pub mod error;
pub mod eval;
pub mod features;
pub mod frontend;
pub mod geometry;
pub mod io;
pub mod par;
pub mod pipeline;
pub mod posegraph;
pub mod registration;
pub mod simkit;
pub mod tsdf;

pub use error::{Error, Result};
