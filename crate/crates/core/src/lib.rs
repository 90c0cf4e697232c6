//! Learning image-space dynamics of planar chains and controlling them by
//! optimizing torque sequences through the learned model.

pub mod autodiff;
pub mod control;
pub mod dynnet;
pub mod error;
pub mod harness;
pub mod io;
pub mod sim;
pub mod vision;

pub use error::{Error, Result};
