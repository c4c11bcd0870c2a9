use crate::geometry::BBox3D;
use crate::numerics::{
    init_params, mlp_backward, mlp_cached, prefixed, prefixed_mut, sigmoid, InitScheme,
    LinearParams, MlpCache, NumericsError, Params, Rng, Tensor,
};

use super::{Detection, Roi};

pub const BOX_PARAMS: usize = 8;
/// Decoded log-sizes are clamped to this magnitude so boxes stay finite.
const MAX_LOG_SIZE: f64 = 6.0;
/// Initial classification bias; a sigmoid of about 0.1 for every slot.
const CLS_PRIOR_BIAS: f64 = -2.2;

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub reg_hidden: LinearParams,
    pub reg_output: LinearParams,
    pub cls_hidden: LinearParams,
    pub cls_output: LinearParams,
}

impl HeadParams {
    pub fn init(rng: &mut Rng, dim: usize, classes: usize) -> Self {
        let mut cls_output = init_params(rng, dim, classes, InitScheme::XavierUniform);
        cls_output.bias.fill(CLS_PRIOR_BIAS);
        Self {
            reg_hidden: init_params(rng, dim, dim, InitScheme::XavierUniform),
            reg_output: init_params(rng, dim, BOX_PARAMS, InitScheme::XavierUniform),
            cls_hidden: init_params(rng, dim, dim, InitScheme::XavierUniform),
            cls_output,
        }
    }

    pub fn classes(&self) -> usize {
        self.cls_output.out_dim()
    }
}

impl Params for HeadParams {
    fn tensors(&self) -> Vec<(String, &Tensor)> {
        prefixed("reg_hidden", self.reg_hidden.tensors())
            .chain(prefixed("reg_output", self.reg_output.tensors()))
            .chain(prefixed("cls_hidden", self.cls_hidden.tensors()))
            .chain(prefixed("cls_output", self.cls_output.tensors()))
            .collect()
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        prefixed_mut("reg_hidden", self.reg_hidden.tensors_mut())
            .chain(prefixed_mut("reg_output", self.reg_output.tensors_mut()))
            .chain(prefixed_mut("cls_hidden", self.cls_hidden.tensors_mut()))
            .chain(prefixed_mut("cls_output", self.cls_output.tensors_mut()))
            .collect()
    }
}

/// Raw head outputs for `n` queries.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutput {
    /// `n × 8`: Δcenter (normalized units), log l, log w, log h, sin yaw, cos yaw
    pub reg: Tensor,
    /// `n × C`, pre-sigmoid
    pub logits: Tensor,
    /// `n × 3`, normalized reference points
    pub refs: Tensor,
}

impl HeadOutput {
    pub fn len(&self) -> usize {
        self.reg.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn prob(&self, i: usize, class: usize) -> f64 {
        sigmoid(self.logits.get(i, class))
    }

    /// Box parameters in the regression target encoding (absolute normalized center).
    pub fn box_params(&self, i: usize) -> [f64; BOX_PARAMS] {
        let r = self.reg.row(i);
        let c = self.refs.row(i);
        [
            c[0] + r[0],
            c[1] + r[1],
            c[2] + r[2],
            r[3],
            r[4],
            r[5],
            r[6],
            r[7],
        ]
    }

    pub fn decode(&self, i: usize, roi: &Roi) -> Detection {
        let p = self.box_params(i);
        let center = roi.denormalize(&[p[0], p[1], p[2]]);
        let size = [p[3], p[4], p[5]].map(|v| v.clamp(-MAX_LOG_SIZE, MAX_LOG_SIZE).exp());
        let yaw = p[6].atan2(p[7]);
        let (class_id, score) = (0..self.logits.cols())
            .map(|c| (c, self.prob(i, c)))
            .fold((0, f64::NEG_INFINITY), |best, x| if x.1 > best.1 { x } else { best });
        Detection {
            bbox: BBox3D::new(center, size, yaw).expect("decoded box is finite with positive size"),
            score,
            class_id,
        }
    }
}

#[derive(Debug, Clone)]
pub struct HeadCache {
    reg: MlpCache,
    cls: MlpCache,
}

pub fn head_raw(q: &Tensor, refs: &Tensor, p: &HeadParams) -> Result<(HeadOutput, HeadCache), NumericsError> {
    if refs.rows() != q.rows() || refs.cols() != 3 {
        return Err(NumericsError::Shape {
            op: "head",
            detail: format!("q {:?} vs refs {:?}", q.shape(), refs.shape()),
        });
    }
    let (reg, reg_cache) = mlp_cached(q, &p.reg_hidden, &p.reg_output)?;
    let (logits, cls_cache) = mlp_cached(q, &p.cls_hidden, &p.cls_output)?;
    Ok((
        HeadOutput {
            reg,
            logits,
            refs: refs.clone(),
        },
        HeadCache {
            reg: reg_cache,
            cls: cls_cache,
        },
    ))
}

pub fn head_forward(q: &Tensor, refs: &Tensor, p: &HeadParams, roi: &Roi) -> Result<Vec<Detection>, NumericsError> {
    let (out, _) = head_raw(q, refs, p)?;
    Ok((0..out.len()).map(|i| out.decode(i, roi)).collect())
}

/// Gradients of the raw outputs flow back to `(dq, dparams)`.
pub fn head_backward(cache: &HeadCache, p: &HeadParams, d_reg: &Tensor, d_logits: &Tensor) -> (Tensor, HeadParams) {
    let (dq_reg, reg_hidden, reg_output) = mlp_backward(&cache.reg, &p.reg_hidden, &p.reg_output, d_reg);
    let (dq_cls, cls_hidden, cls_output) = mlp_backward(&cache.cls, &p.cls_hidden, &p.cls_output, d_logits);
    (
        dq_reg.add(&dq_cls).expect("same shape"),
        HeadParams {
            reg_hidden,
            reg_output,
            cls_hidden,
            cls_output,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_diff_check;

    #[test]
    fn zero_regression_decodes_to_reference() {
        let mut rng = Rng::new(1);
        let mut p = HeadParams::init(&mut rng, 8, 1);
        p.reg_output.weight.fill(0.0);
        p.reg_output.bias.fill(0.0);
        p.reg_output.bias.data_mut()[7] = 1.0; // cos = 1, sin = 0
        let roi = Roi::default();
        let q = rng.normal_tensor(&[3, 8], 1.0);
        let refs = Tensor::from_rows(&[vec![0.5, 0.5, 0.5], vec![0.0, 0.0, 0.0], vec![0.25, 1.0, 0.5]]).unwrap();
        let dets = head_forward(&q, &refs, &p, &roi).unwrap();
        assert_eq!(dets.len(), 3);
        assert_eq!(dets[0].bbox.center(), [0.0, 0.0, 0.0]);
        assert_eq!(dets[1].bbox.center(), [-50.0, -50.0, -3.0]);
        assert_eq!(dets[2].bbox.center(), [-25.0, 50.0, 0.0]);
        for d in &dets {
            assert_eq!(d.bbox.size(), [1.0, 1.0, 1.0]);
            assert_eq!(d.bbox.yaw(), 0.0);
            assert!((0.0..=1.0).contains(&d.score));
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = Rng::new(2);
        let p = HeadParams::init(&mut rng, 6, 2);
        let q = rng.normal_tensor(&[5, 6], 1.0);
        let refs = rng.normal_tensor(&[5, 3], 0.2);
        let wr = rng.normal_tensor(&[5, 8], 1.0);
        let wl = rng.normal_tensor(&[5, 2], 1.0);
        let dot = |a: &Tensor, b: &Tensor| a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum::<f64>();
        let f = |p: &HeadParams| {
            let (o, _) = head_raw(&q, &refs, p).unwrap();
            dot(&o.reg, &wr) + dot(&o.logits, &wl)
        };
        let (_, cache) = head_raw(&q, &refs, &p).unwrap();
        let (_, g) = head_backward(&cache, &p, &wr, &wl);
        let r = finite_diff_check(f, &p, &g, 1e-6, 1e-5).unwrap();
        assert!(r.passed, "{:?}", r.worst());
    }
}
