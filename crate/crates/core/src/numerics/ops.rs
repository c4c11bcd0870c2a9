use super::tensor::{col_sum, matmul, matmul_nt, matmul_tn, same_shape};
use super::{NumericsError, Params, Tensor};

/// Additive value for blocked attention positions; `exp` of it underflows to exactly 0.
pub const NEG_BLOCK: f64 = -1e9;

#[derive(Debug, Clone, PartialEq)]
pub struct LinearParams {
    /// `out × in`
    pub weight: Tensor,
    /// `out`
    pub bias: Tensor,
}

impl LinearParams {
    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }
}

impl Params for LinearParams {
    fn tensors(&self) -> Vec<(String, &Tensor)> {
        vec![("weight".into(), &self.weight), ("bias".into(), &self.bias)]
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![
            ("weight".into(), &mut self.weight),
            ("bias".into(), &mut self.bias),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub epsilon: f64,
}

impl LayerNormParams {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: Tensor::full(&[dim], 1.0),
            beta: Tensor::zeros(&[dim]),
            epsilon: 1e-5,
        }
    }
}

impl Params for LayerNormParams {
    fn tensors(&self) -> Vec<(String, &Tensor)> {
        vec![("gamma".into(), &self.gamma), ("beta".into(), &self.beta)]
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![
            ("gamma".into(), &mut self.gamma),
            ("beta".into(), &mut self.beta),
        ]
    }
}

/// `x · Wᵀ + b`
pub fn linear(x: &Tensor, p: &LinearParams) -> Result<Tensor, NumericsError> {
    if x.cols() != p.in_dim() {
        return Err(NumericsError::Shape {
            op: "linear",
            detail: format!("input width {} vs layer in {}", x.cols(), p.in_dim()),
        });
    }
    let mut y = matmul_nt(x, &p.weight)?;
    let b = p.bias.data();
    for i in 0..y.rows() {
        for (v, bv) in y.row_mut(i).iter_mut().zip(b) {
            *v += bv;
        }
    }
    Ok(y)
}

/// Returns `(dx, dparams)` for `y = linear(x, p)` given `dy`.
pub fn linear_backward(x: &Tensor, p: &LinearParams, dy: &Tensor) -> (Tensor, LinearParams) {
    let dx = matmul(dy, &p.weight).expect("dy matches layer output");
    let dw = matmul_tn(dy, x).expect("dy rows match x rows");
    let db = col_sum(dy);
    (dx, LinearParams { weight: dw, bias: db })
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// Gradient of ReLU given its pre-activation input.
pub fn relu_backward(pre: &Tensor, dy: &Tensor) -> Tensor {
    let mut dx = dy.clone();
    for (d, &p) in dx.data_mut().iter_mut().zip(pre.data()) {
        if p <= 0.0 {
            *d = 0.0;
        }
    }
    dx
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy of `sigmoid(logit)` against `target`, computed stably from the logit.
pub fn bce_with_logit(logit: f64, target: f64) -> f64 {
    logit.max(0.0) - logit * target + (-logit.abs()).exp().ln_1p()
}

/// Saved intermediate values for the layer-norm backward pass.
#[derive(Debug, Clone)]
pub struct LayerNormCache {
    pub xhat: Tensor,
    pub inv_std: Vec<f64>,
}

fn check_ln(x: &Tensor, p: &LayerNormParams) -> Result<(), NumericsError> {
    if x.cols() != p.gamma.len() || x.cols() != p.beta.len() {
        return Err(NumericsError::Shape {
            op: "layer_norm",
            detail: format!("width {} vs params {}", x.cols(), p.gamma.len()),
        });
    }
    Ok(())
}

/// Row-wise standardization followed by `gamma ⊙ x̂ + beta` (biased variance).
pub fn layer_norm(x: &Tensor, p: &LayerNormParams) -> Result<Tensor, NumericsError> {
    Ok(layer_norm_cached(x, p)?.0)
}

pub fn layer_norm_cached(
    x: &Tensor,
    p: &LayerNormParams,
) -> Result<(Tensor, LayerNormCache), NumericsError> {
    check_ln(x, p)?;
    let d = x.cols();
    let mut y = Tensor::zeros(&[x.rows(), d]);
    let mut xhat = Tensor::zeros(&[x.rows(), d]);
    let mut inv_std = Vec::with_capacity(x.rows());
    for i in 0..x.rows() {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + p.epsilon).sqrt();
        inv_std.push(is);
        let xh = xhat.row_mut(i);
        for (h, v) in xh.iter_mut().zip(row) {
            *h = (v - mean) * is;
        }
        let xh = xhat.row(i).to_vec();
        for (j, o) in y.row_mut(i).iter_mut().enumerate() {
            *o = p.gamma.data()[j] * xh[j] + p.beta.data()[j];
        }
    }
    Ok((y, LayerNormCache { xhat, inv_std }))
}

pub fn layer_norm_backward(
    cache: &LayerNormCache,
    p: &LayerNormParams,
    dy: &Tensor,
) -> (Tensor, LayerNormParams) {
    let d = dy.cols();
    let mut dx = Tensor::zeros(&[dy.rows(), d]);
    let mut dgamma = Tensor::zeros(&[d]);
    let mut dbeta = Tensor::zeros(&[d]);
    let g = p.gamma.data();
    for i in 0..dy.rows() {
        let dyr = dy.row(i);
        let xh = cache.xhat.row(i);
        let mut sum_dxh = 0.0;
        let mut sum_dxh_xh = 0.0;
        for j in 0..d {
            dgamma.data_mut()[j] += dyr[j] * xh[j];
            dbeta.data_mut()[j] += dyr[j];
            let dxh = dyr[j] * g[j];
            sum_dxh += dxh;
            sum_dxh_xh += dxh * xh[j];
        }
        let is = cache.inv_std[i];
        let n = d as f64;
        for (j, o) in dx.row_mut(i).iter_mut().enumerate() {
            let dxh = dyr[j] * g[j];
            *o = is / n * (n * dxh - sum_dxh - xh[j] * sum_dxh_xh);
        }
    }
    (
        dx,
        LayerNormParams {
            gamma: dgamma,
            beta: dbeta,
            epsilon: p.epsilon,
        },
    )
}

/// Row-wise softmax of `logits + additive_mask`.
///
/// Every row must keep at least one open (zero-mask) position; a row where every entry is
/// blocked is rejected instead of silently normalizing over blocked logits.
pub fn softmax_masked(logits: &Tensor, additive_mask: &Tensor) -> Result<Tensor, NumericsError> {
    same_shape("softmax_masked", logits, additive_mask)?;
    let n = logits.cols();
    let mut out = Tensor::zeros(&[logits.rows(), n]);
    for i in 0..logits.rows() {
        let l = logits.row(i);
        let m = additive_mask.row(i);
        if !m.iter().any(|&v| v > NEG_BLOCK / 2.0) {
            return Err(NumericsError::FullyBlockedRow(i));
        }
        let z: Vec<f64> = l.iter().zip(m).map(|(a, b)| a + b).collect();
        let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let o = out.row_mut(i);
        let mut sum = 0.0;
        for (oj, zj) in o.iter_mut().zip(&z) {
            *oj = (zj - max).exp();
            sum += *oj;
        }
        for oj in o.iter_mut() {
            *oj /= sum;
        }
    }
    Ok(out)
}

/// Gradient w.r.t. softmax inputs given the softmax output `p` and upstream `dp`.
pub fn softmax_backward(p: &Tensor, dp: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(&[p.rows(), p.cols()]);
    for i in 0..p.rows() {
        let pr = p.row(i);
        let dr = dp.row(i);
        let dot: f64 = pr.iter().zip(dr).map(|(a, b)| a * b).sum();
        for (j, o) in out.row_mut(i).iter_mut().enumerate() {
            *o = pr[j] * (dr[j] - dot);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_check, init_params, InitScheme, Rng};

    #[test]
    fn softmax_uniform_and_one_hot() {
        let z = Tensor::zeros(&[4, 4]);
        let p = softmax_masked(&z, &z).unwrap();
        assert!(p.data().iter().all(|&v| v == 0.25));

        let mut mask = Tensor::full(&[3, 3], NEG_BLOCK);
        for i in 0..3 {
            mask.set(i, i, 0.0);
        }
        let mut rng = Rng::new(4);
        let logits = rng.normal_tensor(&[3, 3], 3.0);
        let p = softmax_masked(&logits, &mask).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(p.get(i, j), if i == j { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn softmax_matches_direct_formula() {
        let mut rng = Rng::new(6);
        let logits = rng.normal_tensor(&[6, 6], 2.0);
        let mut mask = Tensor::zeros(&[6, 6]);
        for i in 0..6 {
            for j in 0..6 {
                if i != j && rng.bernoulli(0.4) {
                    mask.set(i, j, NEG_BLOCK);
                }
            }
        }
        let p = softmax_masked(&logits, &mask).unwrap();
        for i in 0..6 {
            let denom: f64 = (0..6)
                .filter(|&j| mask.get(i, j) == 0.0)
                .map(|j| logits.get(i, j).exp())
                .sum();
            let mut row_sum = 0.0;
            for j in 0..6 {
                let want = if mask.get(i, j) == 0.0 {
                    logits.get(i, j).exp() / denom
                } else {
                    0.0
                };
                assert!((p.get(i, j) - want).abs() < 1e-12);
                if mask.get(i, j) != 0.0 {
                    assert_eq!(p.get(i, j), 0.0);
                }
                row_sum += p.get(i, j);
            }
            assert!((row_sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rejects_fully_blocked_row() {
        let logits = Tensor::zeros(&[2, 2]);
        let mut mask = Tensor::zeros(&[2, 2]);
        mask.set(1, 0, NEG_BLOCK);
        mask.set(1, 1, NEG_BLOCK);
        assert_eq!(
            softmax_masked(&logits, &mask),
            Err(NumericsError::FullyBlockedRow(1))
        );
    }

    #[test]
    fn softmax_gradient_of_uniform_row_is_zero() {
        // d/dz of sum(p) vanishes; so does the gradient for a symmetric upstream.
        let p = softmax_masked(&Tensor::zeros(&[1, 5]), &Tensor::zeros(&[1, 5])).unwrap();
        let g = softmax_backward(&p, &Tensor::full(&[1, 5], 0.7));
        assert!(g.data().iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn layer_norm_cases() {
        let p = LayerNormParams::new(3);
        let x = Tensor::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap();
        let y = layer_norm(&x, &p).unwrap();
        let want = [-1.2247, 0.0, 1.2247];
        for (a, b) in y.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-3);
        }

        let mut p = LayerNormParams::new(4);
        p.beta = Tensor::full(&[4], 0.3);
        let y = layer_norm(&Tensor::full(&[2, 4], 7.5), &p).unwrap();
        assert!(y.data().iter().all(|v| (v - 0.3).abs() < 1e-12));
    }

    #[test]
    fn layer_norm_matches_formula() {
        let mut rng = Rng::new(8);
        let x = rng.normal_tensor(&[5, 6], 2.0);
        let mut p = LayerNormParams::new(6);
        p.gamma = rng.normal_tensor(&[6], 1.0);
        p.beta = rng.normal_tensor(&[6], 1.0);
        let y = layer_norm(&x, &p).unwrap();
        for i in 0..5 {
            let r = x.row(i);
            let mean = r.iter().sum::<f64>() / 6.0;
            let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 6.0;
            for j in 0..6 {
                let want = p.gamma.data()[j] * (r[j] - mean) / (var + 1e-5).sqrt()
                    + p.beta.data()[j];
                assert!((y.get(i, j) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn linear_cases() {
        let mut rng = Rng::new(10);
        let x = rng.normal_tensor(&[3, 4], 1.0);
        let id = LinearParams {
            weight: Tensor::identity(4),
            bias: Tensor::zeros(&[4]),
        };
        assert_eq!(linear(&x, &id).unwrap(), x);

        let p = LinearParams {
            weight: Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]).unwrap(),
            bias: Tensor::zeros(&[3]),
        };
        let y = linear(&Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap(), &p).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0, 3.0]);

        let p = init_params(&mut rng, 4, 5, InitScheme::XavierUniform);
        let mut p = p;
        p.bias = rng.normal_tensor(&[5], 1.0);
        let y = linear(&x, &p).unwrap();
        for i in 0..3 {
            for o in 0..5 {
                let mut want = p.bias.data()[o];
                for k in 0..4 {
                    want += x.get(i, k) * p.weight.get(o, k);
                }
                assert!((y.get(i, o) - want).abs() < 1e-12);
            }
        }
        assert!(linear(&Tensor::zeros(&[1, 3]), &p).is_err());
    }

    #[test]
    fn bias_gradient_of_summed_linear_is_ones() {
        let mut rng = Rng::new(12);
        let x = rng.normal_tensor(&[1, 3], 1.0);
        let p = init_params(&mut rng, 3, 4, InitScheme::XavierUniform);
        let (_, g) = linear_backward(&x, &p, &Tensor::full(&[1, 4], 1.0));
        assert!(g.bias.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn layer_norm_then_sum_gradcheck() {
        let mut rng = Rng::new(14);
        let x = rng.normal_tensor(&[3, 5], 1.5);
        let w = rng.normal_tensor(&[3, 5], 1.0);
        let mut p = LayerNormParams::new(5);
        p.gamma = rng.normal_tensor(&[5], 1.0);
        p.beta = rng.normal_tensor(&[5], 1.0);
        // Weighted sum, since a plain sum of a layer norm output is constant in x.
        let f = |p: &LayerNormParams| {
            let y = layer_norm(&x, p).unwrap();
            y.data().iter().zip(w.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        let (_, cache) = layer_norm_cached(&x, &p).unwrap();
        let (_, grad) = layer_norm_backward(&cache, &p, &w);
        let report = finite_diff_check(f, &p, &grad, 1e-6, 1e-5).unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn bce_matches_naive() {
        for &(l, t) in &[(0.3, 1.0), (-2.0, 0.0), (5.0, 0.0), (-7.0, 1.0), (0.0, 0.0)] {
            let p = sigmoid(l);
            let naive = -(t * p.ln() + (1.0 - t) * (1.0 - p).ln());
            assert!((bce_with_logit(l, t) - naive).abs() < 1e-12);
        }
        assert!((bce_with_logit(0.0, 0.0) - 2f64.ln()).abs() < 1e-15);
    }
}
