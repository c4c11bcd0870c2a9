use serde::{Deserialize, Serialize};

use crate::geometry::bev_iou;
use crate::heads::{Detection, Target};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub ap50: f64,
    pub ap70: f64,
    /// `(recall, precision)` after each detection, at IoU 0.5.
    pub pr50: Vec<(f64, f64)>,
    pub bandwidth_bits: u64,
}

pub fn evaluate(dets: &[Detection], gts: &[Target], bandwidth_bits: u64) -> EvalResult {
    EvalResult {
        ap50: eval_ap(dets, gts, 0.5),
        ap70: eval_ap(dets, gts, 0.7),
        pr50: pr_curve(dets, gts, 0.5),
        bandwidth_bits,
    }
}

fn by_score(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    order
}

/// True-positive flags in descending score order; each detection claims the best-overlapping
/// unclaimed ground truth of its class with IoU ≥ `iou_thr`.
fn tp_flags(dets: &[Detection], gts: &[Target], iou_thr: f64) -> Vec<bool> {
    let mut claimed = vec![false; gts.len()];
    by_score(dets)
        .into_iter()
        .map(|i| {
            let d = &dets[i];
            let best = gts
                .iter()
                .enumerate()
                .filter(|(g, t)| !claimed[*g] && t.class_id == d.class_id)
                .map(|(g, t)| (g, bev_iou(&d.bbox, &t.bbox)))
                .filter(|&(_, iou)| iou >= iou_thr)
                .max_by(|a, b| a.1.total_cmp(&b.1));
            match best {
                Some((g, _)) => {
                    claimed[g] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

pub fn pr_curve(dets: &[Detection], gts: &[Target], iou_thr: f64) -> Vec<(f64, f64)> {
    let mut tp = 0usize;
    tp_flags(dets, gts, iou_thr)
        .into_iter()
        .enumerate()
        .map(|(n, hit)| {
            tp += hit as usize;
            let recall = if gts.is_empty() { 0.0 } else { tp as f64 / gts.len() as f64 };
            (recall, tp as f64 / (n + 1) as f64)
        })
        .collect()
}

/// Precision-recall over several scenes at once: detections are matched within their own
/// scene, then ranked together by score.
pub fn pooled_pr_curve(scenes: &[(Vec<Detection>, Vec<Target>)], iou_thr: f64) -> Vec<(f64, f64)> {
    let total_gts: usize = scenes.iter().map(|(_, g)| g.len()).sum();
    let mut ranked: Vec<(f64, bool)> = scenes
        .iter()
        .flat_map(|(dets, gts)| {
            let order = by_score(dets);
            let flags = tp_flags(dets, gts, iou_thr);
            order.into_iter().zip(flags).map(|(i, hit)| (dets[i].score, hit))
        })
        .collect();
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut tp = 0usize;
    ranked
        .iter()
        .enumerate()
        .map(|(n, &(_, hit))| {
            tp += hit as usize;
            let recall = if total_gts == 0 { 0.0 } else { tp as f64 / total_gts as f64 };
            (recall, tp as f64 / (n + 1) as f64)
        })
        .collect()
}

/// Area under the all-point interpolated precision-recall curve.
pub fn eval_ap(dets: &[Detection], gts: &[Target], iou_thr: f64) -> f64 {
    if gts.is_empty() {
        return if dets.is_empty() { 1.0 } else { 0.0 };
    }
    let pr = pr_curve(dets, gts, iou_thr);
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (i, &(r, _)) in pr.iter().enumerate() {
        if r > prev_recall {
            let p_interp = pr[i..].iter().map(|x| x.1).fold(0.0, f64::max);
            ap += (r - prev_recall) * p_interp;
            prev_recall = r;
        }
    }
    ap
}

/// Greedy score-ordered suppression: a detection is dropped when it overlaps an already
/// kept one of the same class with BEV IoU above `iou_thr`.
pub fn nms(dets: &[Detection], iou_thr: f64) -> Vec<Detection> {
    let mut kept: Vec<Detection> = Vec::new();
    for i in by_score(dets) {
        let d = dets[i];
        if kept.iter().all(|k| k.class_id != d.class_id || bev_iou(&k.bbox, &d.bbox) <= iou_thr) {
            kept.push(d);
        }
    }
    kept
}
