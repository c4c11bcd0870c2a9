use serde::{Deserialize, Serialize};

use crate::fusion::{
    align_and_concat_cached, align_backward, eqformer_backward, eqformer_forward_cached,
    EqFormerConfig, EqFormerParams, MlnParams,
};
use crate::heads::{
    head_backward, head_raw, normalize_refs, supervised_loss, HeadParams, LayerPrediction,
    LossBreakdown, Target,
};
use crate::numerics::{prefixed, prefixed_mut, Params, Rng, Tensor};

use super::pipeline::{gather_queries, PipelineOptions, SceneQueries};
use super::{Emulator, Scenario, SimConfig, SimError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub dim: usize,
    pub classes: usize,
    pub heads: usize,
    pub ffn_width: usize,
    pub blocks: usize,
    pub mln_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::for_dim(32, 1)
    }
}

impl ModelConfig {
    pub fn for_dim(dim: usize, classes: usize) -> Self {
        Self {
            dim,
            classes,
            heads: 4,
            ffn_width: 2 * dim,
            blocks: 3,
            mln_hidden: dim,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(SimError::Config(format!("heads {} must divide dim {}", self.heads, self.dim)));
        }
        if self.classes == 0 || self.blocks == 0 || self.ffn_width == 0 || self.mln_hidden == 0 {
            return Err(SimError::Config("classes, blocks, ffn_width and mln_hidden must be positive".into()));
        }
        Ok(())
    }

    pub fn eqformer(&self) -> EqFormerConfig {
        EqFormerConfig {
            dim: self.dim,
            heads: self.heads,
            ffn_width: self.ffn_width,
            blocks: self.blocks,
        }
    }
}

/// All trainable parameters: alignment, fusion and both heads.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub mln: MlnParams,
    pub eqformer: EqFormerParams,
    pub single_head: HeadParams,
    pub coop_head: HeadParams,
}

impl Model {
    pub fn init(seed: u64, cfg: &ModelConfig) -> Self {
        let mut rng = Rng::derive(seed, 0x3d1);
        Self {
            mln: MlnParams::init(&mut rng, cfg.dim, cfg.mln_hidden),
            eqformer: EqFormerParams::init(&mut rng, &cfg.eqformer()),
            single_head: HeadParams::init(&mut rng, cfg.dim, cfg.classes),
            coop_head: HeadParams::init(&mut rng, cfg.dim, cfg.classes),
        }
    }
}

impl Params for Model {
    fn tensors(&self) -> Vec<(String, &Tensor)> {
        prefixed("mln", self.mln.tensors())
            .chain(prefixed("eqformer", self.eqformer.tensors()))
            .chain(prefixed("single_head", self.single_head.tensors()))
            .chain(prefixed("coop_head", self.coop_head.tensors()))
            .collect()
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        prefixed_mut("mln", self.mln.tensors_mut())
            .chain(prefixed_mut("eqformer", self.eqformer.tensors_mut()))
            .chain(prefixed_mut("single_head", self.single_head.tensors_mut()))
            .chain(prefixed_mut("coop_head", self.coop_head.tensors_mut()))
            .collect()
    }
}

/// Which fusion layers the cooperative loss reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Supervision {
    AllLayers,
    FinalLayer,
}

/// One scene's fused inputs and its two supervision sets.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub queries: SceneQueries,
    /// Objects the ego itself sees (ego frame).
    pub single_gts: Vec<Target>,
    /// Objects seen by the ego or any connected CAV (ego frame).
    pub coop_gts: Vec<Target>,
}

pub fn build_sample(scn: &Scenario, emu: &Emulator, cfg: &SimConfig) -> Result<TrainSample, SimError> {
    let queries = gather_queries(scn, emu, cfg, &PipelineOptions::from_config(cfg))?;
    let single_gts = scn.targets_in_frame(0, true);
    let connected: Vec<usize> = queries.connected.clone();
    let all = scn.ground_truth();
    let coop_gts = scn
        .objects
        .iter()
        .zip(all)
        .filter(|(o, _)| connected.iter().any(|&a| o.visible_to[a]))
        .map(|(_, t)| t)
        .collect();
    Ok(TrainSample {
        queries,
        single_gts,
        coop_gts,
    })
}

/// Loss and its gradient w.r.t. every model parameter.
pub fn loss_and_grad(
    model: &Model,
    sample: &TrainSample,
    cfg: &SimConfig,
    sup: Supervision,
) -> Result<(LossBreakdown, Model), SimError> {
    let q = &sample.queries;
    let roi = &cfg.scenario.roi;
    let (batch, align_cache) = align_and_concat_cached(&q.ego, &q.cavs, &q.ego_pose, &cfg.mask, &model.mln)?;
    let (layers, eq_cache) = eqformer_forward_cached(&batch, &cfg.mask, &model.eqformer)?;
    let refs = normalize_refs(&batch.centers, roi).map_err(|e| SimError::Config(e.to_string()))?;
    let supervised: Vec<usize> = match sup {
        Supervision::AllLayers => (0..layers.len()).collect(),
        Supervision::FinalLayer => vec![layers.len() - 1],
    };
    let mut coop = Vec::with_capacity(supervised.len());
    for &l in &supervised {
        coop.push(head_raw(&layers[l], &refs, &model.coop_head)?);
    }

    let ego_q = q.ego.features_tensor();
    let ego_refs = normalize_refs(&q.ego.centers_tensor(), roi).map_err(|e| SimError::Config(e.to_string()))?;
    let (single_out, single_cache) = head_raw(&ego_q, &ego_refs, &model.single_head)?;
    let ego_valid = vec![true; ego_q.rows()];

    let single_preds = [LayerPrediction {
        out: &single_out,
        valid: &ego_valid,
    }];
    let coop_preds: Vec<LayerPrediction> = coop
        .iter()
        .map(|(o, _)| LayerPrediction {
            out: o,
            valid: &batch.valid,
        })
        .collect();
    let (breakdown, grads) = supervised_loss(
        &single_preds,
        &coop_preds,
        &sample.single_gts,
        &sample.coop_gts,
        roi,
        &cfg.loss,
    );

    let mut coop_head = model.coop_head.zeros_like();
    let mut d_layers: Vec<Option<Tensor>> = vec![None; layers.len()];
    for ((&l, (_, cache)), g) in supervised.iter().zip(&coop).zip(&grads.coop) {
        let (dq, gp) = head_backward(cache, &model.coop_head, &g.d_reg, &g.d_logits);
        coop_head.accumulate(&gp);
        d_layers[l] = Some(dq);
    }
    let (dx, eqformer) = eqformer_backward(&eq_cache, &model.eqformer, &d_layers);
    let mln = align_backward(&align_cache, &model.mln, &dx);
    let (_, single_head) = head_backward(&single_cache, &model.single_head, &grads.single[0].d_reg, &grads.single[0].d_logits);
    Ok((
        breakdown,
        Model {
            mln,
            eqformer,
            single_head,
            coop_head,
        },
    ))
}

pub fn loss_only(model: &Model, sample: &TrainSample, cfg: &SimConfig, sup: Supervision) -> Result<LossBreakdown, SimError> {
    Ok(loss_and_grad(model, sample, cfg, sup)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_diff_check;
    use crate::sim::gen_scenario;

    #[test]
    fn parameter_names_are_unique() {
        let m = Model::init(1, &ModelConfig::default());
        let mut names: Vec<String> = m.tensors().into_iter().map(|(n, _)| n).collect();
        let n = names.len();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), n);
        assert!(names.iter().any(|s| s == "eqformer.block2.attn.query.weight"));
    }

    #[test]
    fn full_model_gradients_match_finite_differences() {
        let mut cfg = SimConfig::default();
        cfg.model = ModelConfig::for_dim(16, 1);
        cfg.emulator.dim = 16;
        cfg.k = 4;
        cfg.k_ego = 4;
        cfg.scenario.agents_min = 2;
        cfg.scenario.agents_max = 2;
        let scn = gen_scenario(3, &cfg.scenario).unwrap();
        let emu = Emulator::new(cfg.emulator);
        let sample = build_sample(&scn, &emu, &cfg).unwrap();
        assert_eq!(sample.queries.cavs.len(), 1);
        let mut model = Model::init(4, &cfg.model);
        // leave the identity start so the alignment encoder carries gradient
        let mut rng = Rng::new(8);
        for v in model.mln.encoder_output.weight.data_mut() {
            *v = 0.05 * rng.normal();
        }
        let (_, grad) = loss_and_grad(&model, &sample, &cfg, Supervision::AllLayers).unwrap();
        let f = |m: &Model| loss_only(m, &sample, &cfg, Supervision::AllLayers).unwrap().total;
        let r = finite_diff_check(f, &model, &grad, 1e-6, 1e-4).unwrap();
        assert!(r.passed, "{:?}", r.worst());
    }
}
