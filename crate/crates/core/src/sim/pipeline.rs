use crate::fusion::{align_and_concat, eqformer_forward, AlignedBatch};
use crate::geometry::{relative_transform, Pose};
use crate::heads::{head_raw, normalize_refs, Detection, HeadOutput};
use crate::wire::{bandwidth_bits, deserialize, serialize, top_k_select, QueryPayload};

use super::eval::{evaluate, nms, EvalResult};
use super::model::Model;
use super::{Emulator, PostConfig, Scenario, SimConfig, SimError};

/// Payload frames are either encoded and decoded, or handed over as in-memory structs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WireMode {
    Serialize,
    Bypass,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PipelineOptions {
    pub k: usize,
    pub k_ego: usize,
    pub wire: WireMode,
    /// `false` drops every CAV, giving the ego-only path.
    pub cooperative: bool,
}

impl PipelineOptions {
    pub fn from_config(cfg: &SimConfig) -> Self {
        Self {
            k: cfg.k,
            k_ego: cfg.k_ego,
            wire: WireMode::Serialize,
            cooperative: true,
        }
    }
}

/// What reaches the ego's fusion stage for one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneQueries {
    pub ego: QueryPayload,
    pub cavs: Vec<QueryPayload>,
    pub ego_pose: Pose,
    /// Agent indices whose data is used, ego first.
    pub connected: Vec<usize>,
    pub bandwidth_bits: u64,
}

fn connected_agents(scn: &Scenario, cfg: &SimConfig, cooperative: bool) -> Vec<usize> {
    let ego = &scn.agents[0];
    std::iter::once(0)
        .chain((1..scn.agents.len()).filter(|&a| {
            let ag = &scn.agents[a];
            cooperative && ((ag.x - ego.x).powi(2) + (ag.y - ego.y).powi(2)).sqrt() <= cfg.comm_range
        }))
        .collect()
}

/// Emulate every connected agent, select Top-k and deliver the CAV payloads.
pub fn gather_queries(
    scn: &Scenario,
    emu: &Emulator,
    cfg: &SimConfig,
    opts: &PipelineOptions,
) -> Result<SceneQueries, SimError> {
    let connected = connected_agents(scn, cfg, opts.cooperative);
    let ego_obs = emu.observe(scn, 0)?;
    let ego_pose = scn.ego_pose();
    let ego = top_k_select(
        scn.agents[0].id,
        &ego_pose,
        &ego_obs.features,
        &ego_obs.centers,
        &ego_obs.scores,
        opts.k_ego,
    )?;
    let mut cavs = Vec::with_capacity(connected.len() - 1);
    let mut bits = 0;
    for &a in &connected[1..] {
        let obs = emu.observe(scn, a)?;
        let ag = &scn.agents[a];
        let sent = top_k_select(ag.id, &ag.pose(), &obs.features, &obs.centers, &obs.scores, opts.k)?;
        bits += bandwidth_bits(sent.k as u64, sent.dim as u64, sent.classes as u64);
        let received = match opts.wire {
            WireMode::Serialize => deserialize(&serialize(&sent)?)?,
            WireMode::Bypass => sent,
        };
        cavs.push(received);
    }
    Ok(SceneQueries {
        ego,
        cavs,
        ego_pose,
        connected,
        bandwidth_bits: bits,
    })
}

/// Fused batch and the final-layer head output.
pub fn fuse(model: &Model, q: &SceneQueries, cfg: &SimConfig) -> Result<(AlignedBatch, HeadOutput), SimError> {
    let batch = align_and_concat(&q.ego, &q.cavs, &q.ego_pose, &cfg.mask, &model.mln)?;
    let layers = eqformer_forward(&batch, &cfg.mask, &model.eqformer)?;
    let refs = normalize_refs(&batch.centers, &cfg.scenario.roi).map_err(|e| SimError::Config(e.to_string()))?;
    let (out, _) = head_raw(layers.last().expect("at least one block"), &refs, &model.coop_head)?;
    Ok((batch, out))
}

/// Decode the valid slots, drop low scores, then suppress duplicates.
pub fn postprocess(out: &HeadOutput, valid: &[bool], cfg: &SimConfig) -> Vec<Detection> {
    let dets: Vec<Detection> = (0..out.len())
        .filter(|&i| valid[i])
        .map(|i| out.decode(i, &cfg.scenario.roi))
        .collect();
    threshold_and_suppress(dets, &cfg.post)
}

fn threshold_and_suppress(dets: Vec<Detection>, post: &PostConfig) -> Vec<Detection> {
    let kept: Vec<Detection> = dets.into_iter().filter(|d| d.score > post.score_threshold).collect();
    nms(&kept, post.nms_iou)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineResult {
    /// Ego frame.
    pub detections: Vec<Detection>,
    pub bandwidth_bits: u64,
    pub eval: EvalResult,
}

pub fn run_pipeline(
    scn: &Scenario,
    emu: &Emulator,
    model: &Model,
    cfg: &SimConfig,
    opts: &PipelineOptions,
) -> Result<PipelineResult, SimError> {
    let q = gather_queries(scn, emu, cfg, opts)?;
    let (batch, out) = fuse(model, &q, cfg)?;
    let detections = postprocess(&out, &batch.valid, cfg);
    let eval = evaluate(&detections, &scn.ground_truth(), q.bandwidth_bits);
    Ok(PipelineResult {
        detections,
        bandwidth_bits: q.bandwidth_bits,
        eval,
    })
}

/// The same model with every CAV disconnected.
pub fn ego_only(scn: &Scenario, emu: &Emulator, model: &Model, cfg: &SimConfig) -> Result<PipelineResult, SimError> {
    let opts = PipelineOptions {
        cooperative: false,
        ..PipelineOptions::from_config(cfg)
    };
    run_pipeline(scn, emu, model, cfg, &opts)
}

/// Each connected agent runs the single-agent head on its own Top-`k_ego` queries,
/// thresholds, and sends boxes; the ego unions everything and suppresses duplicates.
/// Bandwidth is 8 floats of 32 bits per box sent by a CAV.
pub fn late_fusion_baseline(
    scn: &Scenario,
    emu: &Emulator,
    model: &Model,
    cfg: &SimConfig,
) -> Result<PipelineResult, SimError> {
    let roi = &cfg.scenario.roi;
    let ego_pose = scn.ego_pose();
    let mut all = Vec::new();
    let mut bits = 0u64;
    for a in connected_agents(scn, cfg, true) {
        let ag = &scn.agents[a];
        let obs = emu.observe(scn, a)?;
        let p = top_k_select(ag.id, &ag.pose(), &obs.features, &obs.centers, &obs.scores, cfg.k_ego)?;
        let refs = normalize_refs(&p.centers_tensor(), roi).map_err(|e| SimError::Config(e.to_string()))?;
        let (out, _) = head_raw(&p.features_tensor(), &refs, &model.single_head)?;
        let e = relative_transform(&ag.pose(), &ego_pose);
        let mut n_sent = 0u64;
        for i in 0..out.len() {
            let d = out.decode(i, roi);
            if d.score > cfg.post.score_threshold {
                n_sent += 1;
                all.push(Detection {
                    bbox: d.bbox.transformed(&e),
                    ..d
                });
            }
        }
        if a != 0 {
            bits += n_sent * 8 * 32;
        }
    }
    let detections = nms(&all, cfg.post.nms_iou);
    let eval = evaluate(&detections, &scn.ground_truth(), bits);
    Ok(PipelineResult {
        detections,
        bandwidth_bits: bits,
        eval,
    })
}
