//! Minimal neural-network toolkit: 2-D tensors, tape-based reverse-mode
//! autodiff, standard layers, Adam/AdamW, binary checkpoints, and a
//! finite-difference gradient checker.
//!
//! Everything is generic over [`tensor::Element`], so models train in `f32`
//! and the identical code paths can be verified in `f64`.

pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod optim;
pub mod store;
pub mod tape;
pub mod tensor;

pub use checkpoint::{load as load_checkpoint, save as save_checkpoint};
pub use gradcheck::{check_gradients, GradCheckConfig, GradCheckOutcome, GradCheckReport};
pub use layers::{
    attention_encoder_forward, dense_forward, gru_step, Dense, EncoderLayer, GruCell, Init,
    LayerNorm, Mlp, MultiHeadAttention,
};
pub use optim::{optimizer_step, Algorithm, Optimizer, OptimizerConfig};
pub use store::{ParamId, ParameterStore};
pub use tape::{log_softmax_row, softmax_row, Gradients, Tape, Var};
pub use tensor::{Element, Tensor};
