//! Motion-conditioned layer normalization: the CAV→ego transform is encoded into a
//! per-channel scale and shift that modulate the normalized CAV queries.

use crate::geometry::Transform;
use crate::numerics::{
    init_params, layer_norm_backward, layer_norm_cached, mlp_backward, mlp_cached, prefixed,
    prefixed_mut, InitScheme, LayerNormCache, LayerNormParams, LinearParams, MlpCache,
    NumericsError, Params, Rng, Tensor,
};

pub const TRANSFORM_FEATURES: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct MlnParams {
    /// 16 → H
    pub encoder_hidden: LinearParams,
    /// H → 2D; the first D outputs are the scale, the last D the shift.
    pub encoder_output: LinearParams,
    pub norm: LayerNormParams,
}

impl MlnParams {
    /// Identity start: the encoder output layer has zero weight and bias `(1…1, 0…0)`, so the
    /// module initially returns `layer_norm(q)` for any transform.
    pub fn init(rng: &mut Rng, dim: usize, hidden: usize) -> Self {
        let encoder_hidden = init_params(rng, TRANSFORM_FEATURES, hidden, InitScheme::XavierUniform);
        let mut encoder_output = init_params(rng, hidden, 2 * dim, InitScheme::Zeros);
        for v in &mut encoder_output.bias.data_mut()[..dim] {
            *v = 1.0;
        }
        Self {
            encoder_hidden,
            encoder_output,
            norm: LayerNormParams::new(dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.norm.gamma.len()
    }
}

impl Params for MlnParams {
    fn tensors(&self) -> Vec<(String, &Tensor)> {
        prefixed("encoder_hidden", self.encoder_hidden.tensors())
            .chain(prefixed("encoder_output", self.encoder_output.tensors()))
            .chain(prefixed("norm", self.norm.tensors()))
            .collect()
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        prefixed_mut("encoder_hidden", self.encoder_hidden.tensors_mut())
            .chain(prefixed_mut("encoder_output", self.encoder_output.tensors_mut()))
            .chain(prefixed_mut("norm", self.norm.tensors_mut()))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct MlnCache {
    encoder: MlpCache,
    modulation: Tensor,
    normed: Tensor,
    norm: LayerNormCache,
}

pub fn mln_align(q: &Tensor, e: &Transform, p: &MlnParams) -> Result<Tensor, NumericsError> {
    Ok(mln_align_cached(q, e, p)?.0)
}

pub fn mln_align_cached(
    q: &Tensor,
    e: &Transform,
    p: &MlnParams,
) -> Result<(Tensor, MlnCache), NumericsError> {
    let d = p.dim();
    let code = Tensor::from_vec(vec![1, TRANSFORM_FEATURES], e.to_row_major().to_vec())?;
    let (modulation, encoder) = mlp_cached(&code, &p.encoder_hidden, &p.encoder_output)?;
    let (normed, norm) = layer_norm_cached(q, &p.norm)?;
    let m = modulation.row(0);
    let (gamma, beta) = m.split_at(d);
    let mut out = normed.clone();
    for i in 0..out.rows() {
        for ((o, g), b) in out.row_mut(i).iter_mut().zip(gamma).zip(beta) {
            *o = g * *o + b;
        }
    }
    Ok((
        out,
        MlnCache {
            encoder,
            modulation,
            normed,
            norm,
        },
    ))
}

/// Returns `(dq, dparams)`.
pub fn mln_backward(cache: &MlnCache, p: &MlnParams, dout: &Tensor) -> (Tensor, MlnParams) {
    let d = p.dim();
    let gamma = &cache.modulation.row(0)[..d];
    let mut dmod = Tensor::zeros(&[1, 2 * d]);
    let mut dnormed = Tensor::zeros(&[dout.rows(), d]);
    for i in 0..dout.rows() {
        let dr = dout.row(i);
        let nr = cache.normed.row(i);
        for j in 0..d {
            dmod.data_mut()[j] += dr[j] * nr[j];
            dmod.data_mut()[d + j] += dr[j];
        }
        for (j, o) in dnormed.row_mut(i).iter_mut().enumerate() {
            *o = dr[j] * gamma[j];
        }
    }
    let (dq, norm) = layer_norm_backward(&cache.norm, &p.norm, &dnormed);
    let (_, encoder_hidden, encoder_output) =
        mlp_backward(&cache.encoder, &p.encoder_hidden, &p.encoder_output, &dmod);
    (
        dq,
        MlnParams {
            encoder_hidden,
            encoder_output,
            norm,
        },
    )
}
