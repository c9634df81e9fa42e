//! The context-adaptive detector: convolutional main branch, auxiliary
//! branch over context slices, merge formulations, loss, gradients and
//! optimization.

mod adam;
pub mod gradcheck;
pub mod layers;
mod merge;
mod model;
mod params;
mod train;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use merge::{
    equivalent_threshold, logit, merge_at, merge_aw, merge_moe, merge_static, moe_terms, sigmoid,
    softmax, MoeTerms,
};
pub use model::{
    add_l2_grad, backward, batch_gradients, batch_loss, bce, bce_loss, forward, forward_aux,
    forward_main, is_correct, l2_penalty, predict, AuxActivations, BatchResult, ClipPatch,
    Example, Forward, MainActivations, CLAMP, DEFAULT_L2,
};
pub use params::{
    DetectorParams, Formulation, Geometry, InputNorm, Tensor, Weights, PARAM_NAMES,
};
pub use train::{accuracy, initial_params, train, EpochRecord, TrainConfig, TrainingHistory};
