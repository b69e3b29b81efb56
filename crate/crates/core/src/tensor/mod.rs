//! Dense tensors, reverse-mode differentiation, neural primitives and SGD.

mod conv;
mod element;
pub mod gradcheck;
mod graph;
mod norm;
mod ops;
mod optim;
mod params;
#[allow(clippy::module_inception)]
mod tensor;

pub use element::{DType, Element};
pub use gradcheck::{finite_diff_grad, rel_err, DEFAULT_FD_STEP};
pub use graph::{BackCtx, Gradients, Graph, Var};
pub use norm::{BatchStats, Mode, BN_EPS, BN_MOMENTUM};
pub use optim::{Schedule, SgdState};
pub use params::{Param, ParamId, ParamKind, ParamStore, Session, StatUpdate, StepOutput};
pub use tensor::Tensor;

pub(crate) use ops::softmax_row;
