//! Output layers: closed-form ridge regression and the linear and
//! nonlinear attention readouts trained by gradient descent.

mod attention;
mod model;
mod ridge;
pub(crate) mod serde_matrix;
mod train;

pub use attention::{
    attention_forward_linear, attention_forward_nonlinear, attention_gradient, attention_loss,
    predict_linear, predict_nonlinear, quadratic_form, AttentionGradient, AttentionNet,
    AttentionOutput, AttentionRef, HiddenActivation, LinearAttention, NetGradient,
    NonlinearAttention,
};
pub use model::{closed_loop_step, ReadoutModel, SavedModel, MODEL_FORMAT_VERSION};
pub use ridge::{
    default_lambda_grid, predict_ridge, ridge_objective, select_lambda, train_ridge, LambdaSearch,
    RidgeWeights,
};
pub use train::{
    linear_hessian_max, train_attention, AttentionKind, AttentionModel, Conditioning, LossCurve,
    Optimizer, TrainConfig, TrainedAttention, GRAM_FEATURE_LIMIT, STABLE_FRACTION,
};
