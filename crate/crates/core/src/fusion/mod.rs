//! Query alignment, interaction masks and the fusion transformer.

mod batch;
pub mod checkpoint;
mod eqformer;
mod mask;
mod mln;

pub use batch::{align_and_concat, align_and_concat_cached, align_backward, AlignCache, AlignedBatch};
pub use eqformer::{
    canonical_order, eqformer_backward, eqformer_forward, eqformer_forward_cached, masked_mhsa,
    BlockParams, EqFormerCache, EqFormerConfig, EqFormerParams,
};
pub use mask::{
    build_combined, build_pcm, build_qsm, build_ssm, combine_masks, parse_tau, to_additive,
    AttnMask, MaskConfig,
};
pub use mln::{mln_align, mln_align_cached, mln_backward, MlnCache, MlnParams, TRANSFORM_FEATURES};

use crate::numerics::NumericsError;
use crate::wire::WireError;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FusionError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("shape: {0}")]
    Shape(String),
    #[error("{got} agents exceed the limit of {max}")]
    TooManyAgents { got: usize, max: usize },
    #[error("duplicate agent id")]
    DuplicateAgent,
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Wire(#[from] WireError),
}
