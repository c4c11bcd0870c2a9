use crate::geometry::{relative_transform, Pose};
use crate::numerics::{Params, Tensor};
use crate::wire::QueryPayload;

use super::mln::{mln_align_cached, mln_backward, MlnCache, MlnParams};
use super::{FusionError, MaskConfig};

/// Ego queries followed by aligned CAV queries, zero-padded to a fixed slot count.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedBatch {
    /// `n × D`
    pub features: Tensor,
    /// `n × 3`, ego frame
    pub centers: Tensor,
    /// `n × C`
    pub scores: Tensor,
    pub valid: Vec<bool>,
    /// Sending agent of each slot; `None` for padding.
    pub slot_agent: Vec<Option<u32>>,
}

impl AlignedBatch {
    pub fn len(&self) -> usize {
        self.valid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.valid.is_empty()
    }

    pub fn num_valid(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    fn fill(&mut self, offset: usize, id: u32, q: &Tensor, centers: &Tensor, scores: &Tensor) {
        for i in 0..q.rows() {
            self.features.row_mut(offset + i).copy_from_slice(q.row(i));
            self.centers.row_mut(offset + i).copy_from_slice(centers.row(i));
            self.scores.row_mut(offset + i).copy_from_slice(scores.row(i));
            self.valid[offset + i] = true;
            self.slot_agent[offset + i] = Some(id);
        }
    }
}

/// Per-CAV alignment state needed for the backward pass.
#[derive(Debug, Clone)]
pub struct AlignCache {
    pub segments: Vec<AlignSegment>,
}

#[derive(Debug, Clone)]
pub struct AlignSegment {
    pub offset: usize,
    pub rows: usize,
    pub mln: MlnCache,
}

pub fn align_and_concat(
    ego: &QueryPayload,
    cavs: &[QueryPayload],
    ego_pose: &Pose,
    cfg: &MaskConfig,
    p: &MlnParams,
) -> Result<AlignedBatch, FusionError> {
    Ok(align_and_concat_cached(ego, cavs, ego_pose, cfg, p)?.0)
}

/// Slot layout: the ego's `k_ego` queries, then each CAV's `k` queries in ascending
/// `agent_id` order, then zero rows up to `k_ego + (max_agents − 1)·k`. All CAVs must share
/// `k`; with no CAVs the per-CAV capacity is `k_ego`.
pub fn align_and_concat_cached(
    ego: &QueryPayload,
    cavs: &[QueryPayload],
    ego_pose: &Pose,
    cfg: &MaskConfig,
    p: &MlnParams,
) -> Result<(AlignedBatch, AlignCache), FusionError> {
    let (d, c) = (ego.dim, ego.classes);
    if d != p.dim() {
        return Err(FusionError::Shape(format!("payload D {d} vs model D {}", p.dim())));
    }
    if cavs.len() + 1 > cfg.max_agents {
        return Err(FusionError::TooManyAgents {
            got: cavs.len() + 1,
            max: cfg.max_agents,
        });
    }
    let cav_k = cavs.first().map_or(ego.k, |q| q.k);
    for q in cavs {
        if q.dim != d || q.classes != c || q.k != cav_k {
            return Err(FusionError::Shape(format!(
                "agent {} sends k={} D={} C={}, expected k={cav_k} D={d} C={c}",
                q.agent_id, q.k, q.dim, q.classes
            )));
        }
    }
    let mut order: Vec<&QueryPayload> = cavs.iter().collect();
    order.sort_by_key(|q| q.agent_id);
    if order.windows(2).any(|w| w[0].agent_id == w[1].agent_id)
        || order.iter().any(|q| q.agent_id == ego.agent_id)
    {
        return Err(FusionError::DuplicateAgent);
    }

    let n = ego.k + (cfg.max_agents - 1) * cav_k;
    let mut batch = AlignedBatch {
        features: Tensor::zeros(&[n, d]),
        centers: Tensor::zeros(&[n, 3]),
        scores: Tensor::zeros(&[n, c]),
        valid: vec![false; n],
        slot_agent: vec![None; n],
    };
    batch.fill(
        0,
        ego.agent_id,
        &ego.features_tensor(),
        &ego.centers_tensor(),
        &ego.scores_tensor(),
    );

    let mut segments = Vec::with_capacity(order.len());
    for (a, q) in order.iter().enumerate() {
        let offset = ego.k + a * cav_k;
        let e = relative_transform(&q.sender_pose()?, ego_pose);
        let (aligned, mln) = mln_align_cached(&q.features_tensor(), &e, p)?;
        let raw = q.centers_tensor();
        let mut moved = Tensor::zeros(&[q.k, 3]);
        for i in 0..q.k {
            let r = raw.row(i);
            moved.row_mut(i).copy_from_slice(&e.apply(&[r[0], r[1], r[2]]));
        }
        batch.fill(offset, q.agent_id, &aligned, &moved, &q.scores_tensor());
        segments.push(AlignSegment {
            offset,
            rows: q.k,
            mln,
        });
    }

    Ok((batch, AlignCache { segments }))
}

/// Accumulates MLN parameter gradients from the gradient w.r.t. the batch features.
pub fn align_backward(cache: &AlignCache, p: &MlnParams, dfeatures: &Tensor) -> MlnParams {
    let mut grad = p.zeros_like();
    for seg in &cache.segments {
        let idx: Vec<usize> = (seg.offset..seg.offset + seg.rows).collect();
        let (_, g) = mln_backward(&seg.mln, p, &dfeatures.select_rows(&idx));
        grad.accumulate(&g);
    }
    grad
}
