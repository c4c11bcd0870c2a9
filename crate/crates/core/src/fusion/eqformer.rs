//! Stack of post-norm transformer blocks over the fused query set.
//!
//! Slots are visited in a canonical order derived from their content (valid slots first,
//! then a total order on the raw bits of features, centers and scores). Every reduction
//! over slots therefore runs in the same order no matter how the input was arranged, which
//! makes the output permutation-equivariant and padding-invariant bit for bit.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::numerics::{
    ffn_backward, ffn_cached, layer_norm_backward, layer_norm_cached, mhsa, mhsa_backward,
    mhsa_cached, prefixed, prefixed_mut, FfnParams, LayerNormCache, LayerNormParams,
    MhsaCache, MhsaParams, MlpCache, NumericsError, Params, Rng, Tensor,
};

use super::mask::{build_combined, to_additive, AttnMask};
use super::{AlignedBatch, FusionError, MaskConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EqFormerConfig {
    pub dim: usize,
    pub heads: usize,
    pub ffn_width: usize,
    pub blocks: usize,
}

impl EqFormerConfig {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            heads: 4,
            ffn_width: 2 * dim,
            blocks: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub attn: MhsaParams,
    pub norm1: LayerNormParams,
    pub ffn: FfnParams,
    pub norm2: LayerNormParams,
}

impl BlockParams {
    pub fn init(rng: &mut Rng, cfg: &EqFormerConfig) -> Self {
        Self {
            attn: MhsaParams::init(rng, cfg.dim, cfg.heads),
            norm1: LayerNormParams::new(cfg.dim),
            ffn: FfnParams::init(rng, cfg.dim, cfg.ffn_width),
            norm2: LayerNormParams::new(cfg.dim),
        }
    }
}

impl Params for BlockParams {
    fn tensors(&self) -> Vec<(String, &Tensor)> {
        prefixed("attn", self.attn.tensors())
            .chain(prefixed("norm1", self.norm1.tensors()))
            .chain(prefixed("ffn", self.ffn.tensors()))
            .chain(prefixed("norm2", self.norm2.tensors()))
            .collect()
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        prefixed_mut("attn", self.attn.tensors_mut())
            .chain(prefixed_mut("norm1", self.norm1.tensors_mut()))
            .chain(prefixed_mut("ffn", self.ffn.tensors_mut()))
            .chain(prefixed_mut("norm2", self.norm2.tensors_mut()))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EqFormerParams {
    pub blocks: Vec<BlockParams>,
}

impl EqFormerParams {
    pub fn init(rng: &mut Rng, cfg: &EqFormerConfig) -> Self {
        Self {
            blocks: (0..cfg.blocks).map(|_| BlockParams::init(rng, cfg)).collect(),
        }
    }
}

impl Params for EqFormerParams {
    fn tensors(&self) -> Vec<(String, &Tensor)> {
        self.blocks
            .iter()
            .enumerate()
            .flat_map(|(i, b)| prefixed(&format!("block{i}"), b.tensors()).collect::<Vec<_>>())
            .collect()
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        self.blocks
            .iter_mut()
            .enumerate()
            .flat_map(|(i, b)| {
                prefixed_mut(&format!("block{i}"), b.tensors_mut()).collect::<Vec<_>>()
            })
            .collect()
    }
}

pub fn masked_mhsa(x: &Tensor, mask: &AttnMask, p: &MhsaParams) -> Result<Tensor, NumericsError> {
    mhsa(x, &to_additive(mask), p)
}

#[derive(Debug, Clone)]
struct BlockCache {
    attn: MhsaCache,
    norm1: LayerNormCache,
    ffn: MlpCache,
    norm2: LayerNormCache,
}

#[derive(Debug, Clone)]
pub struct EqFormerCache {
    perm: Vec<usize>,
    blocks: Vec<BlockCache>,
}

impl EqFormerCache {
    /// Attention weights of block `b`, head `h`, in original slot order.
    pub fn attention(&self, b: usize, h: usize) -> Tensor {
        let w = &self.blocks[b].attn.weights[h];
        let n = self.perm.len();
        let mut out = Tensor::zeros(&[n, n]);
        for a in 0..n {
            for c in 0..n {
                out.set(self.perm[a], self.perm[c], w.get(a, c));
            }
        }
        out
    }
}

fn cmp_bits(a: &[f64], b: &[f64]) -> Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

/// Content-derived visiting order of the slots.
pub fn canonical_order(batch: &AlignedBatch) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..batch.len()).collect();
    perm.sort_by(|&i, &j| {
        batch.valid[j]
            .cmp(&batch.valid[i])
            .then_with(|| cmp_bits(batch.features.row(i), batch.features.row(j)))
            .then_with(|| cmp_bits(batch.centers.row(i), batch.centers.row(j)))
            .then_with(|| cmp_bits(batch.scores.row(i), batch.scores.row(j)))
    });
    perm
}

fn scatter_rows(t: &Tensor, perm: &[usize]) -> Tensor {
    let mut out = Tensor::zeros(t.shape());
    for (a, &i) in perm.iter().enumerate() {
        out.row_mut(i).copy_from_slice(t.row(a));
    }
    out
}

/// Per-block outputs in the original slot order.
pub fn eqformer_forward(
    batch: &AlignedBatch,
    cfg: &MaskConfig,
    p: &EqFormerParams,
) -> Result<Vec<Tensor>, FusionError> {
    Ok(eqformer_forward_cached(batch, cfg, p)?.0)
}

pub fn eqformer_forward_cached(
    batch: &AlignedBatch,
    cfg: &MaskConfig,
    p: &EqFormerParams,
) -> Result<(Vec<Tensor>, EqFormerCache), FusionError> {
    let mask = build_combined(&batch.valid, &batch.centers, &batch.scores, cfg)?;
    let perm = canonical_order(batch);
    let additive = to_additive(&mask.permuted(&perm));
    let mut x = batch.features.select_rows(&perm);
    let mut outputs = Vec::with_capacity(p.blocks.len());
    let mut caches = Vec::with_capacity(p.blocks.len());
    for b in &p.blocks {
        let (a, attn) = mhsa_cached(&x, &additive, &b.attn)?;
        let (h, norm1) = layer_norm_cached(&x.add(&a)?, &b.norm1)?;
        let (f, ffn) = ffn_cached(&h, &b.ffn)?;
        let (y, norm2) = layer_norm_cached(&h.add(&f)?, &b.norm2)?;
        outputs.push(scatter_rows(&y, &perm));
        caches.push(BlockCache {
            attn,
            norm1,
            ffn,
            norm2,
        });
        x = y;
    }
    Ok((
        outputs,
        EqFormerCache {
            perm,
            blocks: caches,
        },
    ))
}

/// `d_outputs[b]` is the loss gradient w.r.t. block `b`'s output (original slot order), or
/// `None` when the loss does not read that block. Returns the gradient w.r.t. the input
/// features and the parameter gradients.
pub fn eqformer_backward(
    cache: &EqFormerCache,
    p: &EqFormerParams,
    d_outputs: &[Option<Tensor>],
) -> (Tensor, EqFormerParams) {
    let n = cache.perm.len();
    let d = p.blocks.first().map_or(0, |b| b.attn.dim());
    let mut grads = p.zeros_like();
    let mut g = Tensor::zeros(&[n, d]);
    for (bi, b) in p.blocks.iter().enumerate().rev() {
        if let Some(Some(dy)) = d_outputs.get(bi) {
            g.add_assign(&dy.select_rows(&cache.perm)).expect("gradient shape");
        }
        let c = &cache.blocks[bi];
        let (dz2, gn2) = layer_norm_backward(&c.norm2, &b.norm2, &g);
        let (dh_ffn, gffn) = ffn_backward(&c.ffn, &b.ffn, &dz2);
        let dh = dz2.add(&dh_ffn).expect("gradient shape");
        let (dz1, gn1) = layer_norm_backward(&c.norm1, &b.norm1, &dh);
        let (dx_attn, gattn) = mhsa_backward(&c.attn, &b.attn, &dz1);
        g = dz1.add(&dx_attn).expect("gradient shape");
        grads.blocks[bi] = BlockParams {
            attn: gattn,
            norm1: gn1,
            ffn: gffn,
            norm2: gn2,
        };
    }
    (scatter_rows(&g, &cache.perm), grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_diff_check;

    fn random_batch(rng: &mut Rng, n: usize, valid: usize, d: usize) -> AlignedBatch {
        let mut features = rng.normal_tensor(&[n, d], 1.0);
        let mut centers = rng.normal_tensor(&[n, 3], 6.0);
        let mut scores =
            Tensor::from_vec(vec![n, 1], (0..n).map(|_| rng.uniform(0.0, 1.0)).collect()).unwrap();
        for i in valid..n {
            features.row_mut(i).fill(0.0);
            centers.row_mut(i).fill(0.0);
            scores.row_mut(i).fill(0.0);
        }
        AlignedBatch {
            features,
            centers,
            scores,
            valid: (0..n).map(|i| i < valid).collect(),
            slot_agent: (0..n).map(|i| (i < valid).then_some(0)).collect(),
        }
    }

    fn permute(b: &AlignedBatch, perm: &[usize]) -> AlignedBatch {
        AlignedBatch {
            features: b.features.select_rows(perm),
            centers: b.centers.select_rows(perm),
            scores: b.scores.select_rows(perm),
            valid: perm.iter().map(|&i| b.valid[i]).collect(),
            slot_agent: perm.iter().map(|&i| b.slot_agent[i]).collect(),
        }
    }

    #[test]
    fn output_shapes() {
        let mut rng = Rng::new(1);
        let cfg = EqFormerConfig::new(16);
        let p = EqFormerParams::init(&mut rng, &cfg);
        let b = random_batch(&mut rng, 12, 9, 16);
        let out = eqformer_forward(&b, &MaskConfig::default(), &p).unwrap();
        assert_eq!(out.len(), 3);
        assert!(out.iter().all(|t| t.shape() == [12, 16] && t.is_finite()));
    }

    #[test]
    fn permutation_equivariance_is_exact() {
        let mut rng = Rng::new(2);
        let cfg = EqFormerConfig::new(16);
        let p = EqFormerParams::init(&mut rng, &cfg);
        let b = random_batch(&mut rng, 10, 10, 16);
        let out = eqformer_forward(&b, &MaskConfig::default(), &p).unwrap();
        let mut perm: Vec<usize> = (0..10).collect();
        rng.shuffle(&mut perm);
        let out_p = eqformer_forward(&permute(&b, &perm), &MaskConfig::default(), &p).unwrap();
        for (a, bp) in out.iter().zip(&out_p) {
            assert_eq!(&a.select_rows(&perm), bp);
        }
    }

    #[test]
    fn padding_invariance_is_exact() {
        let mut rng = Rng::new(3);
        let cfg = EqFormerConfig::new(8);
        let p = EqFormerParams::init(&mut rng, &cfg);
        let b = random_batch(&mut rng, 12, 6, 8);
        let idx: Vec<usize> = (0..6).collect();
        let short = permute(&b, &idx);
        let full = eqformer_forward(&b, &MaskConfig::default(), &p).unwrap();
        let trimmed = eqformer_forward(&short, &MaskConfig::default(), &p).unwrap();
        for (f, t) in full.iter().zip(&trimmed) {
            assert_eq!(&f.select_rows(&idx), t);
        }
    }

    #[test]
    fn blocked_keys_do_not_influence_others() {
        let mut rng = Rng::new(4);
        let cfg = EqFormerConfig::new(8);
        let p = EqFormerParams::init(&mut rng, &cfg);
        let mut b = random_batch(&mut rng, 8, 8, 8);
        // slot 5 is background, so every other slot is blocked from it
        b.scores.set(5, 0, 0.05);
        let out = eqformer_forward(&b, &MaskConfig::default(), &p).unwrap();
        for v in b.features.row_mut(5) {
            *v += 3.0;
        }
        let out2 = eqformer_forward(&b, &MaskConfig::default(), &p).unwrap();
        for (a, c) in out.iter().zip(&out2) {
            for i in (0..8).filter(|&i| i != 5) {
                assert_eq!(a.row(i), c.row(i));
            }
        }
    }

    #[test]
    fn attention_respects_the_mask() {
        let mut rng = Rng::new(5);
        let cfg = EqFormerConfig::new(8);
        let p = EqFormerParams::init(&mut rng, &cfg);
        let b = random_batch(&mut rng, 10, 7, 8);
        let mcfg = MaskConfig::default();
        let (_, cache) = eqformer_forward_cached(&b, &mcfg, &p).unwrap();
        let mask = build_combined(&b.valid, &b.centers, &b.scores, &mcfg).unwrap();
        for h in 0..cfg.heads {
            let w = cache.attention(0, h);
            for i in 0..10 {
                let row_sum: f64 = w.row(i).iter().sum();
                assert!((row_sum - 1.0).abs() < 1e-12);
                for j in 0..10 {
                    if mask.is_blocked(i, j) {
                        assert_eq!(w.get(i, j), 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = Rng::new(6);
        let cfg = EqFormerConfig {
            dim: 8,
            heads: 2,
            ffn_width: 12,
            blocks: 2,
        };
        let p = EqFormerParams::init(&mut rng, &cfg);
        let b = random_batch(&mut rng, 6, 5, 8);
        let mcfg = MaskConfig::default();
        // padded rows sit at zero variance where layer norm is too curved for differencing;
        // the loss never reads them
        let mut w0 = rng.normal_tensor(&[6, 8], 1.0);
        let mut w1 = rng.normal_tensor(&[6, 8], 1.0);
        w0.row_mut(5).fill(0.0);
        w1.row_mut(5).fill(0.0);
        let dot = |a: &Tensor, w: &Tensor| a.data().iter().zip(w.data()).map(|(x, y)| x * y).sum::<f64>();
        let f = |p: &EqFormerParams| {
            let out = eqformer_forward(&b, &mcfg, p).unwrap();
            dot(&out[0], &w0) + dot(&out[1], &w1)
        };
        let (_, cache) = eqformer_forward_cached(&b, &mcfg, &p).unwrap();
        let (dx, grad) = eqformer_backward(&cache, &p, &[Some(w0.clone()), Some(w1.clone())]);
        let r = finite_diff_check(f, &p, &grad, 1e-6, 1e-5).unwrap();
        assert!(r.passed, "{:?}", r.worst());

        // input gradient, one coordinate at a time
        for &(i, j) in &[(0, 0), (2, 5), (4, 7)] {
            let h = 1e-6;
            let mut bp = b.clone();
            bp.features.set(i, j, b.features.get(i, j) + h);
            let mut bm = b.clone();
            bm.features.set(i, j, b.features.get(i, j) - h);
            let fx = |bb: &AlignedBatch| {
                let out = eqformer_forward(bb, &mcfg, &p).unwrap();
                dot(&out[0], &w0) + dot(&out[1], &w1)
            };
            let num = (fx(&bp) - fx(&bm)) / (2.0 * h);
            assert!(crate::numerics::relative_error(dx.get(i, j), num) < 1e-5);
        }
    }
}
