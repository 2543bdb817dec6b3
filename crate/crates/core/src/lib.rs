//! Single-pass coarse-to-fine joint affine and deformable registration of
//! 3D volumes.

pub mod autograd;
pub mod error;
pub mod evaluation;
pub mod field_algebra;
pub mod losses;
pub mod network;
pub mod training;
pub mod volumes;

pub use error::{Error, Result};
