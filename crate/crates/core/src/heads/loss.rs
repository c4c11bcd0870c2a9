use serde::{Deserialize, Serialize};

use crate::geometry::BBox3D;
use crate::numerics::{bce_with_logit, sigmoid, Tensor};

use super::head::{HeadOutput, BOX_PARAMS};
use super::hungarian::hungarian;
use super::Roi;

/// A ground-truth object for supervision.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Target {
    pub bbox: BBox3D,
    pub class_id: usize,
}

/// Regression encoding of a ground-truth box.
pub fn target_params(b: &BBox3D, roi: &Roi) -> [f64; BOX_PARAMS] {
    let c = roi.normalize_unclamped(&b.center());
    let s = b.size();
    [
        c[0],
        c[1],
        c[2],
        s[0].ln(),
        s[1].ln(),
        s[2].ln(),
        b.yaw().sin(),
        b.yaw().cos(),
    ]
}

fn l1(a: &[f64; BOX_PARAMS], b: &[f64; BOX_PARAMS]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub w_sin: f64,
    pub w_co: f64,
    pub lambda_reg: f64,
    pub w_cls: f64,
    pub w_box: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_sin: 1.0,
            w_co: 1.0,
            lambda_reg: 5.0,
            w_cls: 1.0,
            w_box: 1.0,
        }
    }
}

/// Matched `(prediction index, ground-truth index)` pairs; every other valid prediction is
/// background.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Assignment {
    pub pairs: Vec<(usize, usize)>,
}

/// Pair cost `w_cls·(1 − p_gt_class) + w_box·L1(box params)`.
pub fn match_cost(out: &HeadOutput, i: usize, gt: &Target, roi: &Roi, w_cls: f64, w_box: f64) -> f64 {
    w_cls * (1.0 - out.prob(i, gt.class_id)) + w_box * l1(&out.box_params(i), &target_params(&gt.bbox, roi))
}

/// Optimal one-to-one matching of the valid predictions to the ground truth.
const NON_FINITE_COST: f64 = 1e12;

pub fn hungarian_match(
    out: &HeadOutput,
    valid: &[bool],
    gts: &[Target],
    roi: &Roi,
    w_cls: f64,
    w_box: f64,
) -> Assignment {
    let preds: Vec<usize> = (0..out.len()).filter(|&i| valid[i]).collect();
    let mut cost = Vec::with_capacity(preds.len() * gts.len());
    for &i in &preds {
        for g in gts {
            let c = match_cost(out, i, g, roi, w_cls, w_box);
            // non-finite predictions still get matched so the loss itself reports them
            cost.push(if c.is_finite() { c } else { NON_FINITE_COST });
        }
    }
    let pairs = hungarian(&cost, preds.len(), gts.len())
        .into_iter()
        .map(|(r, c)| (preds[r], c))
        .collect();
    Assignment { pairs }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LayerLoss {
    pub cls: f64,
    pub reg: f64,
}

/// Gradient of one layer's `cls + lambda_reg·reg` w.r.t. its raw head outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub d_reg: Tensor,
    pub d_logits: Tensor,
}

impl LayerGrad {
    pub fn scaled(&self, s: f64) -> LayerGrad {
        LayerGrad {
            d_reg: self.d_reg.scale(s),
            d_logits: self.d_logits.scale(s),
        }
    }
}

/// Classification: BCE averaged over valid slots × classes, with matched slots targeting
/// their ground-truth class. Regression: L1 over the 8 box parameters, summed per pair and
/// averaged over matched pairs.
pub fn layer_loss(
    out: &HeadOutput,
    valid: &[bool],
    gts: &[Target],
    roi: &Roi,
    w: &LossWeights,
) -> (LayerLoss, LayerGrad, Assignment) {
    let n = out.len();
    let classes = out.logits.cols();
    let assignment = hungarian_match(out, valid, gts, roi, w.w_cls, w.w_box);
    let mut target_class = vec![None; n];
    for &(i, g) in &assignment.pairs {
        target_class[i] = Some(gts[g].class_id);
    }

    let n_valid = valid.iter().filter(|&&v| v).count();
    let cls_norm = (n_valid * classes).max(1) as f64;
    let mut cls = 0.0;
    let mut d_logits = Tensor::zeros(&[n, classes]);
    for i in (0..n).filter(|&i| valid[i]) {
        for c in 0..classes {
            let t = if target_class[i] == Some(c) { 1.0 } else { 0.0 };
            let z = out.logits.get(i, c);
            cls += bce_with_logit(z, t);
            d_logits.set(i, c, (sigmoid(z) - t) / cls_norm);
        }
    }
    cls /= cls_norm;

    let reg_norm = assignment.pairs.len().max(1) as f64;
    let mut reg = 0.0;
    let mut d_reg = Tensor::zeros(&[n, BOX_PARAMS]);
    for &(i, g) in &assignment.pairs {
        let p = out.box_params(i);
        let t = target_params(&gts[g].bbox, roi);
        for j in 0..BOX_PARAMS {
            let diff = p[j] - t[j];
            reg += diff.abs();
            let sign = if diff > 0.0 {
                1.0
            } else if diff < 0.0 {
                -1.0
            } else {
                0.0
            };
            d_reg.set(i, j, w.lambda_reg * sign / reg_norm);
        }
    }
    reg /= reg_norm;

    (LayerLoss { cls, reg }, LayerGrad { d_reg, d_logits }, assignment)
}

/// One layer's head outputs together with the validity of its slots.
#[derive(Debug, Clone, Copy)]
pub struct LayerPrediction<'a> {
    pub out: &'a HeadOutput,
    pub valid: &'a [bool],
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub single_cls: f64,
    pub single_reg: f64,
    pub coop_cls: f64,
    pub coop_reg: f64,
    pub single_layers: Vec<LayerLoss>,
    pub coop_layers: Vec<LayerLoss>,
}

impl LossBreakdown {
    pub fn single(&self, lambda_reg: f64) -> f64 {
        self.single_cls + lambda_reg * self.single_reg
    }

    pub fn coop(&self, lambda_reg: f64) -> f64 {
        self.coop_cls + lambda_reg * self.coop_reg
    }
}

/// Gradients of `total` w.r.t. each supervised layer's raw outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrads {
    pub single: Vec<LayerGrad>,
    pub coop: Vec<LayerGrad>,
}

/// `total = w_sin·Σ_single (cls + λ·reg) + w_co·Σ_coop (cls + λ·reg)`, each layer matched
/// independently. The single stage is supervised against `single_gts`, the cooperative
/// stage against `coop_gts`.
pub fn supervised_loss(
    single: &[LayerPrediction],
    coop: &[LayerPrediction],
    single_gts: &[Target],
    coop_gts: &[Target],
    roi: &Roi,
    w: &LossWeights,
) -> (LossBreakdown, LossGrads) {
    let mut b = LossBreakdown::default();
    let mut grads = LossGrads {
        single: Vec::with_capacity(single.len()),
        coop: Vec::with_capacity(coop.len()),
    };
    for lp in single {
        let (l, g, _) = layer_loss(lp.out, lp.valid, single_gts, roi, w);
        b.single_cls += l.cls;
        b.single_reg += l.reg;
        b.single_layers.push(l);
        grads.single.push(g.scaled(w.w_sin));
    }
    for lp in coop {
        let (l, g, _) = layer_loss(lp.out, lp.valid, coop_gts, roi, w);
        b.coop_cls += l.cls;
        b.coop_reg += l.reg;
        b.coop_layers.push(l);
        grads.coop.push(g.scaled(w.w_co));
    }
    b.total = w.w_sin * b.single(w.lambda_reg) + w.w_co * b.coop(w.lambda_reg);
    (b, grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn roi() -> Roi {
        Roi::default()
    }

    fn random_output(rng: &mut Rng, n: usize, classes: usize) -> HeadOutput {
        HeadOutput {
            reg: rng.normal_tensor(&[n, 8], 0.5),
            logits: rng.normal_tensor(&[n, classes], 2.0),
            refs: Tensor::from_vec(vec![n, 3], (0..3 * n).map(|_| rng.uniform(0.0, 1.0)).collect()).unwrap(),
        }
    }

    fn random_targets(rng: &mut Rng, m: usize, classes: usize) -> Vec<Target> {
        (0..m)
            .map(|_| Target {
                bbox: BBox3D::new(
                    [rng.uniform(-40.0, 40.0), rng.uniform(-40.0, 40.0), rng.uniform(-1.0, 1.0)],
                    [rng.uniform(3.0, 5.0), rng.uniform(1.5, 2.5), rng.uniform(1.4, 2.0)],
                    rng.uniform(-3.0, 3.0),
                )
                .unwrap(),
                class_id: rng.index(classes),
            })
            .collect()
    }

    /// Output whose decoded boxes and probabilities reproduce `gts` on the first slots.
    fn perfect_output(gts: &[Target], n: usize, classes: usize) -> HeadOutput {
        let mut reg = Tensor::zeros(&[n, 8]);
        let mut logits = Tensor::full(&[n, classes], -800.0);
        let refs = Tensor::full(&[n, 3], 0.0);
        for (i, g) in gts.iter().enumerate() {
            reg.row_mut(i).copy_from_slice(&target_params(&g.bbox, &roi()));
            logits.set(i, g.class_id, 800.0);
        }
        HeadOutput { reg, logits, refs }
    }

    #[test]
    fn perfect_predictions_have_zero_loss() {
        let mut rng = Rng::new(1);
        let gts = random_targets(&mut rng, 3, 2);
        let out = perfect_output(&gts, 6, 2);
        let (l, _, a) = layer_loss(&out, &[true; 6], &gts, &roi(), &LossWeights::default());
        assert_eq!(a.pairs, vec![(0, 0), (1, 1), (2, 2)]);
        assert_eq!(l.reg, 0.0);
        assert_eq!(l.cls, 0.0);
    }

    #[test]
    fn no_ground_truth_gives_log_two() {
        let out = HeadOutput {
            reg: Tensor::zeros(&[4, 8]),
            logits: Tensor::zeros(&[4, 1]),
            refs: Tensor::zeros(&[4, 3]),
        };
        let (l, _, a) = layer_loss(&out, &[true; 4], &[], &roi(), &LossWeights::default());
        assert!(a.pairs.is_empty());
        assert_eq!(l.reg, 0.0);
        assert!((l.cls - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn swapped_colocated_predictions_match_their_boxes() {
        let mut rng = Rng::new(2);
        let gts = random_targets(&mut rng, 2, 1);
        let mut out = perfect_output(&gts, 2, 1);
        let r0 = out.reg.row(0).to_vec();
        let r1 = out.reg.row(1).to_vec();
        out.reg.row_mut(0).copy_from_slice(&r1);
        out.reg.row_mut(1).copy_from_slice(&r0);
        let a = hungarian_match(&out, &[true, true], &gts, &roi(), 1.0, 1.0);
        assert_eq!(a.pairs, vec![(0, 1), (1, 0)]);
    }

    #[test]
    fn matching_ignores_common_cost_scale() {
        let mut rng = Rng::new(3);
        for _ in 0..50 {
            let out = random_output(&mut rng, 6, 2);
            let gts = random_targets(&mut rng, 4, 2);
            let valid: Vec<bool> = (0..6).map(|_| rng.bernoulli(0.8)).collect();
            let a = hungarian_match(&out, &valid, &gts, &roi(), 1.0, 1.0);
            let b = hungarian_match(&out, &valid, &gts, &roi(), 4.0, 4.0);
            assert_eq!(a, b);
            assert!(a.pairs.iter().all(|&(i, _)| valid[i]));
        }
    }

    /// Straight-line restatement of the loss used as an independent oracle.
    fn oracle_layer(out: &HeadOutput, valid: &[bool], gts: &[Target], pairs: &[(usize, usize)], lambda: f64) -> f64 {
        let mut cls_terms = Vec::new();
        for i in 0..out.len() {
            if !valid[i] {
                continue;
            }
            for c in 0..out.logits.cols() {
                let matched = pairs.iter().any(|&(p, g)| p == i && gts[g].class_id == c);
                let p = 1.0 / (1.0 + (-out.logits.get(i, c)).exp());
                cls_terms.push(if matched { -p.ln() } else { -(1.0 - p).ln() });
            }
        }
        let cls = cls_terms.iter().sum::<f64>() / cls_terms.len() as f64;
        let mut reg = 0.0;
        for &(i, g) in pairs {
            let b = &gts[g].bbox;
            let r = out.reg.row(i);
            let f = out.refs.row(i);
            let norm = |v: f64, lo: f64, hi: f64| (v - lo) / (hi - lo);
            let c = b.center();
            reg += (f[0] + r[0] - norm(c[0], -50.0, 50.0)).abs()
                + (f[1] + r[1] - norm(c[1], -50.0, 50.0)).abs()
                + (f[2] + r[2] - norm(c[2], -3.0, 3.0)).abs()
                + (r[3] - b.size()[0].ln()).abs()
                + (r[4] - b.size()[1].ln()).abs()
                + (r[5] - b.size()[2].ln()).abs()
                + (r[6] - b.yaw().sin()).abs()
                + (r[7] - b.yaw().cos()).abs();
        }
        if !pairs.is_empty() {
            reg /= pairs.len() as f64;
        }
        cls + lambda * reg
    }

    #[test]
    fn matches_independent_oracle() {
        let mut rng = Rng::new(4);
        let w = LossWeights {
            w_sin: 0.7,
            w_co: 1.3,
            ..Default::default()
        };
        for _ in 0..20 {
            let outs: Vec<HeadOutput> = (0..4).map(|_| random_output(&mut rng, 6, 2)).collect();
            let valid: Vec<bool> = (0..6).map(|i| i < 5).collect();
            let gts = random_targets(&mut rng, 3, 2);
            let single = [LayerPrediction { out: &outs[0], valid: &valid }];
            let coop: Vec<LayerPrediction> = outs[1..].iter().map(|o| LayerPrediction { out: o, valid: &valid }).collect();
            let (b, _) = supervised_loss(&single, &coop, &gts, &gts, &roi(), &w);
            let mut want = 0.0;
            for (k, o) in outs.iter().enumerate() {
                let a = hungarian_match(o, &valid, &gts, &roi(), 1.0, 1.0);
                let l = oracle_layer(o, &valid, &gts, &a.pairs, 5.0);
                want += if k == 0 { 0.7 * l } else { 1.3 * l };
            }
            assert!((b.total - want).abs() < 1e-10, "{} vs {}", b.total, want);
            let recomposed = 0.7 * b.single(5.0) + 1.3 * b.coop(5.0);
            assert!((b.total - recomposed).abs() < 1e-12);
            let per_layer: f64 = b.coop_layers.iter().map(|l| l.cls + 5.0 * l.reg).sum();
            assert!((b.coop(5.0) - per_layer).abs() < 1e-12);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = Rng::new(5);
        let out = random_output(&mut rng, 5, 2);
        let valid = vec![true, true, false, true, true];
        let gts = random_targets(&mut rng, 3, 2);
        let w = LossWeights::default();
        let (_, g, _) = layer_loss(&out, &valid, &gts, &roi(), &w);
        let f = |o: &HeadOutput| {
            let (l, _, _) = layer_loss(o, &valid, &gts, &roi(), &w);
            l.cls + w.lambda_reg * l.reg
        };
        let h = 1e-6;
        for (t, gt) in [(0, &g.d_reg), (1, &g.d_logits)] {
            let base = if t == 0 { &out.reg } else { &out.logits };
            for idx in 0..base.len() {
                let mut p = out.clone();
                let mut m = out.clone();
                let (tp, tm) = if t == 0 { (&mut p.reg, &mut m.reg) } else { (&mut p.logits, &mut m.logits) };
                tp.data_mut()[idx] += h;
                tm.data_mut()[idx] -= h;
                let num = (f(&p) - f(&m)) / (2.0 * h);
                let err = crate::numerics::relative_error(gt.data()[idx], num);
                assert!(err < 1e-5, "tensor {t} idx {idx}: {} vs {num}", gt.data()[idx]);
            }
        }
    }
}
