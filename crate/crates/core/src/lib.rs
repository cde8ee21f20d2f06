//! Constructive compilation of monotone maps, affine coupling flows and
//! single-coordinate transformations into deep narrow MLPs, with grid-based
//! sup-norm verification.

pub mod error;
pub mod coupling;
pub mod netcore;
pub mod pipeline;
pub mod sct;
pub mod verify;
pub mod pwl1d;

pub use error::{Error, Result};
pub use netcore::{ActivationTag, AffineMap, Box, Layer, Network};
