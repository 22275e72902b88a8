//! Numeric primitives of the Mamba block, each paired with an exact
//! reverse-mode gradient.
//!
//! Every public function here is a pure function of its inputs. The
//! `Array`-level entry points validate shapes and reject non-finite
//! inputs; the slice-level `pub(crate)` routines they wrap are what the
//! model's hot loops call directly.

mod activation;
mod conv;
mod grad;
mod linalg;
mod loss;
mod norm;
mod scan;

pub use activation::{
    sigmoid, silu, silu_array, silu_backward, silu_grad, softplus, softplus_array,
    softplus_backward, softplus_grad,
};
pub use conv::{causal_conv1d, causal_conv1d_backward, ConvCache, ConvGrads};
pub use grad::{grad, GradOp};
pub use linalg::{matmul, matmul_backward};
pub use loss::{cross_entropy, embedding, embedding_backward, LossOutput};
pub use norm::{rmsnorm, rmsnorm_backward};
pub use scan::{
    selective_scan_seq, selective_scan_seq_backward, selective_scan_step, ScanGrads, ScanParams,
    SsmState,
};

pub(crate) use conv::{conv_backward_raw, conv_forward_raw};
pub(crate) use linalg::gemm;
pub(crate) use loss::cross_entropy_sum_raw;
pub(crate) use norm::{rmsnorm_backward_raw, rmsnorm_raw};
pub(crate) use scan::{scan_backward_raw, scan_forward_raw, ScanBuffers, ScanDims, ScanGradBuffers};

/// Inputs to `softplus` above this value take the asymptotic branch.
pub const SOFTPLUS_THRESHOLD: f64 = 20.0;
