//! Differentiable multi-view RGBD consistency toolkit.

pub mod autodiff;
pub mod camera;
pub mod config;
pub mod error;
pub mod generator;
pub mod geometry;
pub mod gradsuite;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod oracle;
pub mod voxel;

pub use error::{Error, Result};
