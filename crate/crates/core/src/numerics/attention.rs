//! Multi-head self-attention with an additive mask, and the position-wise feed-forward block.

use super::ops::{linear, linear_backward, relu, relu_backward, softmax_backward, softmax_masked};
use super::params::{prefixed, prefixed_mut};
use super::tensor::{matmul, matmul_nt, matmul_tn};
use super::{init_params, InitScheme, LinearParams, NumericsError, Params, Rng, Tensor};

/// Query/key/value/output projections. Head `h` owns columns `[h·d_h, (h+1)·d_h)` of the
/// q/k/v projections, which is the same as separate per-head projection matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct MhsaParams {
    pub heads: usize,
    pub query: LinearParams,
    pub key: LinearParams,
    pub value: LinearParams,
    pub output: LinearParams,
}

impl MhsaParams {
    pub fn init(rng: &mut Rng, dim: usize, heads: usize) -> Self {
        assert!(heads > 0 && dim % heads == 0, "heads must divide the model width");
        Self {
            heads,
            query: init_params(rng, dim, dim, InitScheme::XavierUniform),
            key: init_params(rng, dim, dim, InitScheme::XavierUniform),
            value: init_params(rng, dim, dim, InitScheme::XavierUniform),
            output: init_params(rng, dim, dim, InitScheme::XavierUniform),
        }
    }

    pub fn dim(&self) -> usize {
        self.query.in_dim()
    }

    pub fn head_dim(&self) -> usize {
        self.dim() / self.heads
    }
}

impl Params for MhsaParams {
    fn tensors(&self) -> Vec<(String, &Tensor)> {
        prefixed("query", self.query.tensors())
            .chain(prefixed("key", self.key.tensors()))
            .chain(prefixed("value", self.value.tensors()))
            .chain(prefixed("output", self.output.tensors()))
            .collect()
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        prefixed_mut("query", self.query.tensors_mut())
            .chain(prefixed_mut("key", self.key.tensors_mut()))
            .chain(prefixed_mut("value", self.value.tensors_mut()))
            .chain(prefixed_mut("output", self.output.tensors_mut()))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct MhsaCache {
    x: Tensor,
    q: Tensor,
    k: Tensor,
    v: Tensor,
    /// Attention weights per head, `n × n` each.
    pub weights: Vec<Tensor>,
    concat: Tensor,
}

pub fn mhsa(x: &Tensor, additive_mask: &Tensor, p: &MhsaParams) -> Result<Tensor, NumericsError> {
    Ok(mhsa_cached(x, additive_mask, p)?.0)
}

/// Per head: `softmax(q kᵀ / √d_h + mask) v`; heads concatenated, then output-projected.
pub fn mhsa_cached(
    x: &Tensor,
    additive_mask: &Tensor,
    p: &MhsaParams,
) -> Result<(Tensor, MhsaCache), NumericsError> {
    let n = x.rows();
    if p.dim() % p.heads != 0 {
        return Err(NumericsError::Shape {
            op: "mhsa",
            detail: format!("{} heads do not divide width {}", p.heads, p.dim()),
        });
    }
    if additive_mask.rows() != n || additive_mask.cols() != n {
        return Err(NumericsError::Shape {
            op: "mhsa",
            detail: format!("mask {:?} for {n} tokens", additive_mask.shape()),
        });
    }
    let q = linear(x, &p.query)?;
    let k = linear(x, &p.key)?;
    let v = linear(x, &p.value)?;
    let dh = p.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut concat = Tensor::zeros(&[n, p.dim()]);
    let mut weights = Vec::with_capacity(p.heads);
    for h in 0..p.heads {
        let qh = q.col_block(h * dh, dh);
        let kh = k.col_block(h * dh, dh);
        let vh = v.col_block(h * dh, dh);
        let logits = matmul_nt(&qh, &kh)?.scale(scale);
        let w = softmax_masked(&logits, additive_mask)?;
        concat.set_col_block(h * dh, &matmul(&w, &vh)?);
        weights.push(w);
    }
    let y = linear(&concat, &p.output)?;
    Ok((
        y,
        MhsaCache {
            x: x.clone(),
            q,
            k,
            v,
            weights,
            concat,
        },
    ))
}

pub fn mhsa_backward(cache: &MhsaCache, p: &MhsaParams, dy: &Tensor) -> (Tensor, MhsaParams) {
    let (dconcat, d_output) = linear_backward(&cache.concat, &p.output, dy);
    let n = dy.rows();
    let dh = p.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = Tensor::zeros(&[n, p.dim()]);
    let mut dk = Tensor::zeros(&[n, p.dim()]);
    let mut dv = Tensor::zeros(&[n, p.dim()]);
    for h in 0..p.heads {
        let w = &cache.weights[h];
        let qh = cache.q.col_block(h * dh, dh);
        let kh = cache.k.col_block(h * dh, dh);
        let vh = cache.v.col_block(h * dh, dh);
        let doh = dconcat.col_block(h * dh, dh);
        let dw = matmul_nt(&doh, &vh).expect("head shapes");
        dv.set_col_block(h * dh, &matmul_tn(w, &doh).expect("head shapes"));
        let dlogits = softmax_backward(w, &dw).scale(scale);
        dq.set_col_block(h * dh, &matmul(&dlogits, &kh).expect("head shapes"));
        dk.set_col_block(h * dh, &matmul_tn(&dlogits, &qh).expect("head shapes"));
    }
    let (dx_q, d_query) = linear_backward(&cache.x, &p.query, &dq);
    let (dx_k, d_key) = linear_backward(&cache.x, &p.key, &dk);
    let (dx_v, d_value) = linear_backward(&cache.x, &p.value, &dv);
    let mut dx = dx_q;
    dx.add_assign(&dx_k).expect("same shape");
    dx.add_assign(&dx_v).expect("same shape");
    (
        dx,
        MhsaParams {
            heads: p.heads,
            query: d_query,
            key: d_key,
            value: d_value,
            output: d_output,
        },
    )
}

/// Two-layer position-wise MLP with a ReLU in between.
#[derive(Debug, Clone, PartialEq)]
pub struct FfnParams {
    pub hidden: LinearParams,
    pub output: LinearParams,
}

impl FfnParams {
    pub fn init(rng: &mut Rng, dim: usize, width: usize) -> Self {
        Self {
            hidden: init_params(rng, dim, width, InitScheme::XavierUniform),
            output: init_params(rng, width, dim, InitScheme::XavierUniform),
        }
    }
}

impl Params for FfnParams {
    fn tensors(&self) -> Vec<(String, &Tensor)> {
        prefixed("hidden", self.hidden.tensors())
            .chain(prefixed("output", self.output.tensors()))
            .collect()
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        prefixed_mut("hidden", self.hidden.tensors_mut())
            .chain(prefixed_mut("output", self.output.tensors_mut()))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct MlpCache {
    x: Tensor,
    pre: Tensor,
    act: Tensor,
}

/// `output(relu(hidden(x)))`, shared by the FFN, the MLN encoder and the task heads.
pub fn mlp_cached(
    x: &Tensor,
    hidden: &LinearParams,
    output: &LinearParams,
) -> Result<(Tensor, MlpCache), NumericsError> {
    let pre = linear(x, hidden)?;
    let act = relu(&pre);
    let y = linear(&act, output)?;
    Ok((
        y,
        MlpCache {
            x: x.clone(),
            pre,
            act,
        },
    ))
}

pub fn mlp_backward(
    cache: &MlpCache,
    hidden: &LinearParams,
    output: &LinearParams,
    dy: &Tensor,
) -> (Tensor, LinearParams, LinearParams) {
    let (dact, d_output) = linear_backward(&cache.act, output, dy);
    let dpre = relu_backward(&cache.pre, &dact);
    let (dx, d_hidden) = linear_backward(&cache.x, hidden, &dpre);
    (dx, d_hidden, d_output)
}

pub fn ffn_cached(x: &Tensor, p: &FfnParams) -> Result<(Tensor, MlpCache), NumericsError> {
    mlp_cached(x, &p.hidden, &p.output)
}

pub fn ffn_backward(cache: &MlpCache, p: &FfnParams, dy: &Tensor) -> (Tensor, FfnParams) {
    let (dx, hidden, output) = mlp_backward(cache, &p.hidden, &p.output, dy);
    (dx, FfnParams { hidden, output })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_check, NEG_BLOCK};

    fn random_mask(rng: &mut Rng, n: usize) -> Tensor {
        let mut m = Tensor::zeros(&[n, n]);
        for i in 0..n {
            for j in 0..n {
                if i != j && rng.bernoulli(0.4) {
                    m.set(i, j, NEG_BLOCK);
                }
            }
        }
        m
    }

    fn randomize_biases(rng: &mut Rng, p: &mut MhsaParams) {
        for (name, t) in p.tensors_mut() {
            if name.ends_with("bias") {
                *t = rng.normal_tensor(t.shape(), 0.3);
            }
        }
    }

    #[test]
    fn single_open_position_returns_projected_value() {
        let mut rng = Rng::new(1);
        let n = 4;
        let p = MhsaParams::init(&mut rng, 8, 2);
        let x = rng.normal_tensor(&[n, 8], 1.0);
        let mut mask = Tensor::full(&[n, n], NEG_BLOCK);
        for i in 0..n {
            mask.set(i, i, 0.0);
        }
        let y = mhsa(&x, &mask, &p).unwrap();
        let own = linear(&linear(&x, &p.value).unwrap(), &p.output).unwrap();
        for (a, b) in y.data().iter().zip(own.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn blocked_key_has_no_influence() {
        let mut rng = Rng::new(2);
        let n = 6;
        let p = MhsaParams::init(&mut rng, 8, 4);
        let x = rng.normal_tensor(&[n, 8], 1.0);
        let mask = random_mask(&mut rng, n);
        let y = mhsa(&x, &mask, &p).unwrap();
        for j in 0..n {
            let mut x2 = x.clone();
            for v in x2.row_mut(j) {
                *v += 10.0 * rng.normal();
            }
            let y2 = mhsa(&x2, &mask, &p).unwrap();
            for i in 0..n {
                if mask.get(i, j) != 0.0 {
                    assert_eq!(y.row(i), y2.row(i));
                }
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = Rng::new(3);
        let n = 5;
        let mut p = MhsaParams::init(&mut rng, 8, 2);
        randomize_biases(&mut rng, &mut p);
        let x = rng.normal_tensor(&[n, 8], 1.0);
        let mask = random_mask(&mut rng, n);
        let w = rng.normal_tensor(&[n, 8], 1.0);
        let f = |p: &MhsaParams| {
            let y = mhsa(&x, &mask, p).unwrap();
            y.data().iter().zip(w.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        let (_, cache) = mhsa_cached(&x, &mask, &p).unwrap();
        let (dx, grad) = mhsa_backward(&cache, &p, &w);
        let r = finite_diff_check(f, &p, &grad, 1e-6, 1e-5).unwrap();
        assert!(r.passed, "{:?}", r.worst());

        // input gradient, one coordinate at a time
        for idx in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[idx] += 1e-6;
            let mut xm = x.clone();
            xm.data_mut()[idx] -= 1e-6;
            let fp: f64 = mhsa(&xp, &mask, &p).unwrap().data().iter().zip(w.data()).map(|(a, b)| a * b).sum();
            let fm: f64 = mhsa(&xm, &mask, &p).unwrap().data().iter().zip(w.data()).map(|(a, b)| a * b).sum();
            let num = (fp - fm) / 2e-6;
            assert!(crate::numerics::relative_error(dx.data()[idx], num) < 1e-6);
        }
    }

    #[test]
    fn ffn_gradients_match_finite_differences() {
        let mut rng = Rng::new(4);
        let mut p = FfnParams::init(&mut rng, 6, 12);
        p.hidden.bias = rng.normal_tensor(&[12], 0.2);
        let x = rng.normal_tensor(&[4, 6], 1.0);
        let w = rng.normal_tensor(&[4, 6], 1.0);
        let f = |p: &FfnParams| {
            let (y, _) = ffn_cached(&x, p).unwrap();
            y.data().iter().zip(w.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        let (_, cache) = ffn_cached(&x, &p).unwrap();
        let (_, grad) = ffn_backward(&cache, &p, &w);
        let r = finite_diff_check(f, &p, &grad, 1e-6, 1e-5).unwrap();
        assert!(r.passed, "{:?}", r.worst());
    }
}
