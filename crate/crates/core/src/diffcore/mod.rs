//! Reverse-mode automatic differentiation, the Adam optimizer, and
//! weight penalties.

mod adam;
pub mod gradcheck;
mod graph;
mod params;
mod penalty;
mod tensor;

pub use adam::{adam_step, AdamState};
pub use gradcheck::{check_gradients, check_param_gradients, relative_error, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub use params::{ParamEntry, ParamId, ParameterSet};
pub use penalty::{regularization_penalty, PenaltyMode, PenaltyScope, ATTENTION_GROUP};
pub use tensor::Tensor;

pub(crate) use graph::sigmoid;
