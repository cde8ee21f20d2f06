//! Coupling flows, ridge sums, and their compilation to narrow networks.

mod acf;
mod fit;
mod inn;
mod flow;
mod ridge;

pub use acf::{acf_flow, build_ridge_add, build_translation_add, compile_acf, AcfSpec};
pub use fit::{fit_on_samples, fit_ridge, FitOptions, RidgeFit};
pub use flow::{CouplingFlow, FlowOp};
pub use ridge::{RidgeSum, RidgeTerm};
pub use inn::{compile_inn, InnCompiled, InnProgram, InnStage};
pub(crate) use flow::apply_op as apply_flow_op;
pub(crate) use fit::{random_features, solve_features};
