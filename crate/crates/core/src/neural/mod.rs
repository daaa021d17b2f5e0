//! Differentiable numeric core: dense tensors, a reverse-mode tape over a
//! fixed op set, LSTM cells, parameter storage with an adaptive-moment
//! optimizer, checkpoints, and a finite-difference gradient checker.

pub mod functions;
pub mod gradcheck;
pub mod graph;
pub mod lstm;
pub mod store;
pub mod tensor;

pub use functions::{log_softmax, log_sum_exp, perplexity, softmax_with_temperature};
pub use gradcheck::gradient_check;
pub use graph::{Graph, NodeId};
pub use lstm::{lstm_step, LstmCell};
pub use store::{AdamParams, CheckpointMeta, GradMap, ParamId, ParameterStore};
pub use tensor::{dot, mm_nn, mm_nt, mm_tn, Tensor};
