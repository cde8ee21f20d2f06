//! Single-coordinate transformations: sharpening, slice induction, and
//! lifts into wider ReLU and general-σ networks.

mod lift;
mod sharpen;
mod slices;

pub use lift::{fit_sigma_ridge, lift_general, lift_relu, lift_relu_flow, GeneralLift, SigmaRidge, SigmaTerm, MIN_DERIVATIVE};
pub use sharpen::{sharpen_step, SharpenState, StepOutcome, StepReport};
pub use slices::{compile_sct_leakyrelu, compile_sct_with, SctCompiled, SctOptions, SctOracle, SliceTable};
