//! Multi-view multi-person 3D pose regression.
//!
//! Joint queries attend to multi-view feature maps through projective attention and
//! are decoded layer by layer into groups of 3D joints. Training matches predicted
//! person groups to ground truth with the Hungarian algorithm.

pub mod autodiff;
mod binio;
pub mod camgeom;
pub mod error;
pub mod metrics;
pub mod model;
pub mod scenegen;
pub mod setmatch;
pub mod workspace;

pub use error::{Error, Result};
