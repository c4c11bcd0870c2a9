//! Synthetic multi-agent scenes, detector emulation, the end-to-end cooperative pipeline,
//! evaluation, the late-fusion baseline and toy training.

mod emulator;
mod eval;
mod model;
mod pipeline;
mod scenario;
mod train;

pub use emulator::{Emulator, EmulatorConfig, Observation};
pub use eval::{eval_ap, evaluate, nms, pooled_pr_curve, pr_curve, EvalResult};
pub use model::{
    build_sample, loss_and_grad, loss_only, Model, ModelConfig, Supervision, TrainSample,
};
pub use pipeline::{
    ego_only, fuse, gather_queries, late_fusion_baseline, postprocess, run_pipeline,
    PipelineOptions, PipelineResult, SceneQueries, WireMode,
};
pub use scenario::{gen_scenario, AgentState, Scenario, ScenarioConfig, SceneObject, SCENARIO_VERSION, TAG_DIM};
pub use train::{
    eval_seeds, smoothed, step_size, train_scene_seed, train_toy, val_seeds, Adam, LogRecord, TrainConfig,
    TrainResult,
};

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::fusion::{FusionError, MaskConfig};
use crate::heads::LossWeights;
use crate::numerics::NumericsError;
use crate::wire::WireError;

#[derive(Debug, Clone, thiserror::Error)]
pub enum SimError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("scenario generation for seed {seed} failed after {retries} retries")]
    Infeasible { seed: u64, retries: usize },
    #[error("format: {0}")]
    Format(String),
    #[error("io: {0}")]
    Io(String),
    #[error("training diverged at step {step}")]
    Diverged { step: usize, last_good: Box<Model> },
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PostConfig {
    /// Detections scoring at or below this are dropped.
    pub score_threshold: f64,
    pub nms_iou: f64,
}

impl Default for PostConfig {
    fn default() -> Self {
        Self {
            score_threshold: 0.20,
            nms_iou: 0.5,
        }
    }
}

/// Everything that defines a simulated run except training hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub scenario: ScenarioConfig,
    pub emulator: EmulatorConfig,
    pub model: ModelConfig,
    pub mask: MaskConfig,
    /// Queries transmitted per CAV.
    pub k: usize,
    /// Ego queries entering the fusion batch.
    pub k_ego: usize,
    pub loss: LossWeights,
    pub post: PostConfig,
    /// Center-to-center V2V range, meters.
    pub comm_range: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            scenario: ScenarioConfig::default(),
            emulator: EmulatorConfig::default(),
            model: ModelConfig::default(),
            mask: MaskConfig::default(),
            k: 8,
            k_ego: 8,
            loss: LossWeights::default(),
            post: PostConfig::default(),
            comm_range: 70.0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::Config(m));
        self.scenario.validate()?;
        self.emulator.validate(self.mask.theta)?;
        self.model.validate()?;
        self.mask.validate()?;
        if self.emulator.dim != self.model.dim {
            return bad(format!("emulator dim {} ≠ model dim {}", self.emulator.dim, self.model.dim));
        }
        if self.emulator.classes != self.model.classes || self.scenario.classes != self.model.classes {
            return bad("class counts of scenario, emulator and model must agree".into());
        }
        if self.k > self.emulator.n_queries || self.k_ego > self.emulator.n_queries {
            return bad(format!("k and k_ego must not exceed n_queries = {}", self.emulator.n_queries));
        }
        if self.k_ego == 0 {
            return bad("k_ego must be ≥ 1".into());
        }
        if self.scenario.agents_max > self.mask.max_agents {
            return bad(format!(
                "scenario.agents_max {} exceeds mask.max_agents {}",
                self.scenario.agents_max, self.mask.max_agents
            ));
        }
        if self.scenario.objects_max > self.emulator.n_queries {
            return bad("objects_max exceeds the query budget".into());
        }
        if !(self.comm_range > 0.0) {
            return bad("comm_range must be positive".into());
        }
        Ok(())
    }
}

/// Write-then-rename so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), SimError> {
    let io = |e: std::io::Error| SimError::Io(format!("{}: {e}", path.display()));
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = std::fs::File::create(&tmp).map_err(io)?;
        f.write_all(bytes).map_err(io)?;
        f.sync_all().map_err(io)?;
    }
    std::fs::rename(&tmp, path).map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid_and_round_trips() {
        let cfg = SimConfig::default();
        cfg.validate().unwrap();
        let s = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<SimConfig>(&s).unwrap(), cfg);
    }

    #[test]
    fn inconsistent_dims_are_rejected() {
        let mut cfg = SimConfig::default();
        cfg.model.dim = 16;
        assert!(cfg.validate().is_err());
        let mut cfg = SimConfig::default();
        cfg.k = 65;
        assert!(cfg.validate().is_err());
    }
}
