//! Deterministic dense numerics: matrices, seeded RNG streams, affine and
//! two-layer forward/backward passes, and the SGD training machinery.

mod matrix;
mod nn;
mod optim;
mod rng;

pub use matrix::{order_invariant_sum, Matrix};
pub use nn::{
    backward_linear, backward_mlp, cross_entropy, dropout_mask, linear_backprop, linear_forward,
    relu, softmax, softmax_cross_entropy_grad, softmax_row_into, LinearGrads, MlpCache, MlpGrads,
    MlpParams, CE_EPSILON,
};
pub use optim::{EarlyStopper, PlateauScheduler, SgdState, DEFAULT_MIN_LR, IMPROVEMENT_THRESHOLD};
pub use rng::RngStream;
