//! Reverse-mode automatic differentiation over static dense graphs.
//!
//! A [`Graph`] is built once from primitive operations and executed per
//! batch with [`Graph::forward`]; [`Graph::backward`] then propagates the
//! gradient of one scalar node to every `Param` and `Input` leaf.
//! Parameter values live outside the graph in [`ParamStore`]s so one
//! graph can serve several models (trainable, frozen) at once.

mod gradcheck;
mod graph;
mod optim;
mod store;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport, LeafDeviation, FD_ABS_FLOOR, FD_STEP};
pub use graph::{Gradients, Graph, LeafKind, NodeId, Values};
pub use optim::{sgd_step, Adam};
pub use store::{ParamEntry, ParamStore};
pub use tensor::Tensor;

pub(crate) use graph::{log_sum_exp, softmax_in_place};
