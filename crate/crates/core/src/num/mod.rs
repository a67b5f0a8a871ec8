//! Numeric core: tensors, the gradient tape, parameters, and the BiLSTM.

mod lstm;
mod param;
mod tape;
mod tensor;

pub use lstm::{BiLstm, BiLstmOut};
pub use param::{
    load_checkpoint, save_checkpoint, AdamConfig, BoundParams, Init, Param, ParamStore, Registry,
    CHECKPOINT_VERSION,
};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
