//! The differentiable outcome predictor and its training machinery.

pub mod io;
pub mod model;
pub mod optim;
pub mod params;
pub mod train;

pub use model::{
    accumulate_backward, attention_pool, backward, bce_loss, forward, gru_forward, infer,
    predict_outcome, Dropout, ForwardTrace, Head, Target, PASS_SLOT,
};
pub use optim::{OptState, OptimizerKind};
pub use params::{
    params_axpy, params_cosine, params_norm, Dims, Gradients, Layer, ModelParams, DEFAULT_HIDDEN,
};
