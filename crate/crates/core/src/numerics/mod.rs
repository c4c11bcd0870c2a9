//! Dense float64 arrays and the small set of neural building blocks used by the fusion
//! stack, each with a hand-written backward pass and a finite-difference harness to check it.

mod attention;
mod gradcheck;
mod ops;
mod params;
mod rng;
mod tensor;

pub use attention::{
    ffn_backward, ffn_cached, mhsa, mhsa_backward, mhsa_cached, mlp_backward, mlp_cached,
    FfnParams, MhsaCache, MhsaParams, MlpCache,
};
pub use gradcheck::{finite_diff_check, relative_error, FdReport, FdTensorReport, REL_ERR_FLOOR};
pub use ops::{
    bce_with_logit, layer_norm, layer_norm_backward, layer_norm_cached, linear, linear_backward,
    relu, relu_backward, sigmoid, softmax_backward, softmax_masked, LayerNormCache,
    LayerNormParams, LinearParams, NEG_BLOCK,
};
pub use params::{prefixed, prefixed_mut, Params};
pub use rng::{init_params, InitScheme, Rng};
pub use tensor::{col_sum, matmul, matmul_nt, matmul_tn, Tensor};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NumericsError {
    #[error("{op}: shape mismatch ({detail})")]
    Shape { op: &'static str, detail: String },
    #[error("softmax row {0} is fully blocked")]
    FullyBlockedRow(usize),
    #[error("non-finite value: {0}")]
    NonFinite(String),
}
