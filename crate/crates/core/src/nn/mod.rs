//! A small NHWC tensor engine with hand-written backward passes for the
//! layer types of the malaria CNN: valid convolution, batch normalization,
//! dropout, max/average pooling, flatten, dense and ReLU, trained with
//! softmax cross-entropy and Adam.

mod adam;
mod gradcheck;
pub mod layers;
mod linalg;
mod loss;
mod network;
mod tensor;
mod train;

use std::sync::atomic::{AtomicBool, Ordering};

use thiserror::Error;

pub use adam::{adam_step, AdamConfig};
pub use gradcheck::{check_gradients, compare_gradients, gradient_check, relative_error, GradCheckReport, LayerCheck};
pub use loss::{softmax_cross_entropy, SoftmaxOutput, LOG_CLAMP};
pub use network::{
    build_fig11_network, build_fig11_network_with, build_reduced_network, commit_batch_statistics, count_params,
    infer_shapes, layer_param_counts, network_backward, network_forward, network_forward_replay, DropoutRates,
    ForwardCache, Gradients, LayerCache, LayerParams, LayerSpec, Mode, NetworkSpec, ParamCount, ParamState,
};
pub use tensor::{Scalar, Tensor};
pub use train::{evaluate, train_epoch, EpochStats, EvalStats};

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

static PARALLEL: AtomicBool = AtomicBool::new(true);

/// Switches the matrix kernels between rayon and a strictly sequential
/// loop. Results are bit-identical either way.
pub fn set_parallel(enabled: bool) {
    PARALLEL.store(enabled, Ordering::SeqCst);
}

pub fn parallel_enabled() -> bool {
    PARALLEL.load(Ordering::Relaxed)
}
