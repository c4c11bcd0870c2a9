use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::numerics::{Params, Tensor};

use super::model::{build_sample, loss_and_grad, Model, Supervision, TrainSample};
use super::pipeline::{run_pipeline, PipelineOptions};
use super::{gen_scenario, Emulator, SimConfig, SimError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    /// Scenes per step.
    pub batch: usize,
    pub lr: f64,
    /// Anneal the step size along a half cosine to zero at the last step.
    pub cosine_decay: bool,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm ceiling; `0` disables clipping.
    pub grad_clip: f64,
    pub seed: u64,
    /// Validation AP every this many steps; `0` disables it.
    pub val_every: usize,
    pub val_scenes: usize,
    pub supervision: Supervision,
    pub smoothing_window: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 6000,
            batch: 4,
            lr: 3e-3,
            cosine_decay: true,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: 10.0,
            seed: 0,
            val_every: 500,
            val_scenes: 8,
            supervision: Supervision::AllLayers,
            smoothing_window: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.batch == 0 || self.smoothing_window == 0 {
            return Err(SimError::Config("batch and smoothing_window must be ≥ 1".into()));
        }
        if !(self.lr >= 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(SimError::Config("lr must be ≥ 0 and betas in [0, 1)".into()));
        }
        if !(self.eps > 0.0) || !(self.grad_clip >= 0.0) {
            return Err(SimError::Config("eps must be > 0 and grad_clip ≥ 0".into()));
        }
        Ok(())
    }
}

/// Scene seed for batch element `b` of `step`; disjoint from validation and evaluation seeds.
pub fn train_scene_seed(seed: u64, step: usize, batch: usize, b: usize) -> u64 {
    10_000_000u64.wrapping_mul(seed + 1) + (step * batch + b) as u64
}

pub fn val_seeds(n: usize) -> Vec<u64> {
    (0..n as u64).map(|i| 900_000_000 + i).collect()
}

/// Held-out scenes for reporting; never seen in training or validation.
pub fn eval_seeds(n: usize) -> Vec<u64> {
    (0..n as u64).map(|i| 800_000_000 + i).collect()
}

/// Trailing mean over at most `window` values ending at each index.
pub fn smoothed(values: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    let mut sum = 0.0;
    values
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            sum += v;
            if i >= w {
                sum -= values[i - w];
            }
            sum / (i + 1).min(w) as f64
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct Adam {
    m: Model,
    v: Model,
    t: u64,
}

impl Adam {
    pub fn new(model: &Model) -> Self {
        Self {
            m: model.zeros_like(),
            v: model.zeros_like(),
            t: 0,
        }
    }

    pub fn step(&mut self, model: &mut Model, grad: &Model, lr: f64, tc: &TrainConfig) {
        self.t += 1;
        let bc1 = 1.0 - tc.beta1.powi(self.t as i32);
        let bc2 = 1.0 - tc.beta2.powi(self.t as i32);
        let params = model.tensors_mut();
        let ms = self.m.tensors_mut();
        let vs = self.v.tensors_mut();
        for ((((_, p), (_, m)), (_, v)), (_, g)) in params.into_iter().zip(ms).zip(vs).zip(grad.tensors()) {
            update(p, m, v, g, lr, tc, bc1, bc2);
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn update(p: &mut Tensor, m: &mut Tensor, v: &mut Tensor, g: &Tensor, lr: f64, tc: &TrainConfig, bc1: f64, bc2: f64) {
    let (p, m, v) = (p.data_mut(), m.data_mut(), v.data_mut());
    for (i, &gi) in g.data().iter().enumerate() {
        m[i] = tc.beta1 * m[i] + (1.0 - tc.beta1) * gi;
        v[i] = tc.beta2 * v[i] + (1.0 - tc.beta2) * gi * gi;
        p[i] -= lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + tc.eps);
    }
}

pub fn step_size(tc: &TrainConfig, step: usize) -> f64 {
    if tc.cosine_decay && tc.steps > 0 {
        0.5 * tc.lr * (1.0 + (std::f64::consts::PI * step as f64 / tc.steps as f64).cos())
    } else {
        tc.lr
    }
}

fn grad_norm(g: &Model) -> f64 {
    g.tensors()
        .iter()
        .flat_map(|(_, t)| t.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// One JSONL line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub total: f64,
    pub single_cls: f64,
    pub single_reg: f64,
    pub coop_cls: f64,
    pub coop_reg: f64,
    /// `cls + lambda_reg·reg` of the last fusion layer alone.
    pub final_layer: f64,
    pub grad_norm: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub val_ap50: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    pub model: Model,
    pub log: Vec<LogRecord>,
}

impl TrainResult {
    pub fn log_jsonl(&self) -> String {
        self.log
            .iter()
            .map(|r| serde_json::to_string(r).expect("plain record") + "\n")
            .collect()
    }

    pub fn final_layer_losses(&self) -> Vec<f64> {
        self.log.iter().map(|r| r.final_layer).collect()
    }
}

fn mean_val_ap(model: &Model, cfg: &SimConfig, emu: &Emulator, n: usize) -> Result<f64, SimError> {
    let opts = PipelineOptions::from_config(cfg);
    let aps: Vec<f64> = val_seeds(n)
        .par_iter()
        .map(|&s| {
            let scn = gen_scenario(s, &cfg.scenario)?;
            Ok(run_pipeline(&scn, emu, model, cfg, &opts)?.eval.ap50)
        })
        .collect::<Result<_, SimError>>()?;
    Ok(aps.iter().sum::<f64>() / n.max(1) as f64)
}

/// Adam on the summed scene losses of each batch. Batch scenes are assembled and
/// differentiated in parallel and reduced in a fixed order, so runs are bit-reproducible.
pub fn train_toy(cfg: &SimConfig, tc: &TrainConfig) -> Result<TrainResult, SimError> {
    cfg.validate()?;
    tc.validate()?;
    let emu = Emulator::new(cfg.emulator);
    let mut model = Model::init(tc.seed, &cfg.model);
    let mut adam = Adam::new(&model);
    let mut log = Vec::with_capacity(tc.steps);
    let mut last_good = model.clone();
    for step in 0..tc.steps {
        let per_scene: Vec<_> = (0..tc.batch)
            .into_par_iter()
            .map(|b| {
                let scn = gen_scenario(train_scene_seed(tc.seed, step, tc.batch, b), &cfg.scenario)?;
                let sample: TrainSample = build_sample(&scn, &emu, cfg)?;
                loss_and_grad(&model, &sample, cfg, tc.supervision)
            })
            .collect::<Result<_, SimError>>()?;
        let inv = 1.0 / tc.batch as f64;
        let mut grad = model.zeros_like();
        let mut rec = LogRecord {
            step,
            total: 0.0,
            single_cls: 0.0,
            single_reg: 0.0,
            coop_cls: 0.0,
            coop_reg: 0.0,
            final_layer: 0.0,
            grad_norm: 0.0,
            val_ap50: None,
        };
        for (lb, g) in &per_scene {
            grad.accumulate(g);
            let last = lb.coop_layers.last().expect("a supervised layer");
            rec.total += inv * lb.total;
            rec.single_cls += inv * lb.single_cls;
            rec.single_reg += inv * lb.single_reg;
            rec.coop_cls += inv * lb.coop_cls;
            rec.coop_reg += inv * lb.coop_reg;
            rec.final_layer += inv * (last.cls + cfg.loss.lambda_reg * last.reg);
        }
        grad.scale_all(inv);
        rec.grad_norm = grad_norm(&grad);
        if !rec.total.is_finite() || !rec.grad_norm.is_finite() {
            return Err(SimError::Diverged {
                step,
                last_good: Box::new(last_good),
            });
        }
        last_good.clone_from(&model);
        if tc.grad_clip > 0.0 && rec.grad_norm > tc.grad_clip {
            grad.scale_all(tc.grad_clip / rec.grad_norm);
        }
        adam.step(&mut model, &grad, step_size(tc, step), tc);
        if !model.all_finite() {
            return Err(SimError::Diverged {
                step: step + 1,
                last_good: Box::new(last_good),
            });
        }
        if tc.val_every > 0 && ((step + 1) % tc.val_every == 0 || step + 1 == tc.steps) {
            rec.val_ap50 = Some(mean_val_ap(&model, cfg, &emu, tc.val_scenes)?);
        }
        log.push(rec);
    }
    Ok(TrainResult { model, log })
}
