//! Direct photometric recovery of depth, relative pose, appearance flow and
//! optical flow from calibrated frame pairs or triplets.

pub mod error;
pub mod eval;
pub mod experiment;
pub mod geometry;
pub mod gradcheck;
pub mod image;
pub mod io;
pub mod losses;
pub mod photometric;
pub mod solver;
pub mod pyramid;
pub mod synth;
pub mod warping;

pub use error::{Error, Result};
pub use image::{DepthMap, ImageBuffer};
