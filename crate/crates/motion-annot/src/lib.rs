//! Markerless whole-body motion annotation toolkit.

pub mod bundle;
pub mod camera;
pub mod error;
pub mod filter;
pub mod fit_local;
pub mod keypoints;
pub mod kinematics;
pub mod losses;
mod optim;
pub mod pose;
pub mod rotation;
pub mod skeleton;
pub mod synth;
pub mod triangulation;

pub use error::{Error, Result};
