//! Network data model: affine maps, activations, boxes, evaluation,
//! composition, inversion and interval propagation.

mod activation;
mod affine;
mod boxes;
mod network;

pub use activation::{
    leaky_relu, lookup_activation, register_activation, ActivationTag, CustomActivation,
};
pub use affine::{AffineMap, INVERTIBILITY_THRESHOLD};
pub use boxes::{linspace, Box};
pub use network::{IntervalTrace, Layer, LayerBounds, Network};
