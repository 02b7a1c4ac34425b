//! Relative pose estimation for robot teams sharing UWB ranges, camera
//! bearings, gravity directions and IMU data.

pub mod dataset;
pub mod error;
pub mod eval;
pub mod idcode;
pub mod mfre;
pub mod outlier_pcm;
pub mod pipeline;
pub mod preint;
pub mod residuals;
pub mod rotation;
pub mod sfc;
pub mod sfo;
pub mod sim;
pub mod solver;
pub mod types;

pub use error::{Error, Result};
pub use rotation::{quat_exp, quat_log, OrthogonalMatrix, Quat, RotationMatrix};
pub use types::*;
