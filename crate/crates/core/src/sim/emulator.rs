//! Stand-in for a single-agent query detector: each visible object becomes one confident
//! query whose feature is a fixed random embedding of its attributes, and the rest of the
//! query budget is filled with low-score background.

use serde::{Deserialize, Serialize};

use crate::geometry::relative_transform;
use crate::numerics::{Rng, Tensor};

use super::scenario::{Scenario, TAG_DIM};
use super::SimError;

const EMULATOR_STREAM: u64 = 0xe3a1;
const EMBEDDING_STREAM: u64 = 0xe3b0;
/// Attribute slot that flags a real object; background queries leave it at zero.
const OBJECTNESS: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmulatorConfig {
    pub n_queries: usize,
    pub dim: usize,
    pub classes: usize,
    /// Center noise std at zero range, meters; grows by `1 + 2·d/R`.
    pub sigma_center: f64,
    pub sigma_feature: f64,
    /// Score of an object at zero range and at the edge of the sensing range.
    pub score_near: f64,
    pub score_far: f64,
    pub score_noise: f64,
    pub background_cap: f64,
    /// Seeds the fixed attribute embedding; the same for every agent and scenario.
    pub embedding_seed: u64,
}

impl Default for EmulatorConfig {
    fn default() -> Self {
        Self {
            n_queries: 64,
            dim: 32,
            classes: 1,
            sigma_center: 0.15,
            sigma_feature: 0.05,
            score_near: 0.95,
            score_far: 0.5,
            score_noise: 0.02,
            background_cap: 0.15,
            embedding_seed: 7,
        }
    }
}

impl EmulatorConfig {
    pub fn validate(&self, theta: f64) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::Config(m));
        if self.n_queries == 0 || self.dim == 0 || self.classes == 0 {
            return bad("n_queries, dim and classes must be positive".into());
        }
        if self.sigma_center < 0.0 || self.sigma_feature < 0.0 || self.score_noise < 0.0 {
            return bad("noise levels must be ≥ 0".into());
        }
        if !(self.background_cap < theta) {
            return bad(format!("background_cap {} must be below theta {theta}", self.background_cap));
        }
        if !(self.score_far > theta && self.score_near <= 1.0 && self.score_far <= self.score_near) {
            return bad(format!("need theta < score_far ≤ score_near ≤ 1 (theta = {theta})"));
        }
        Ok(())
    }

    pub fn attr_dim(&self) -> usize {
        9 + TAG_DIM + self.classes
    }
}

/// One agent's detector output, in its own frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    /// `N × D`
    pub features: Tensor,
    /// `N × 3`
    pub centers: Tensor,
    /// `N × C`
    pub scores: Tensor,
    /// Scene object behind each query, `None` for background.
    pub source: Vec<Option<usize>>,
}

#[derive(Debug, Clone)]
pub struct Emulator {
    cfg: EmulatorConfig,
    /// `D × attr_dim`
    embedding: Tensor,
}

impl Emulator {
    pub fn new(cfg: EmulatorConfig) -> Self {
        let a = cfg.attr_dim();
        let mut rng = Rng::derive(cfg.embedding_seed, EMBEDDING_STREAM);
        let embedding = rng.normal_tensor(&[cfg.dim, a], 1.0 / (a as f64).sqrt());
        Self { cfg, embedding }
    }

    pub fn config(&self) -> &EmulatorConfig {
        &self.cfg
    }

    fn embed(&self, attr: &[f64], noise: f64, rng: &mut Rng, out: &mut [f64]) {
        for (d, o) in out.iter_mut().enumerate() {
            let row = self.embedding.row(d);
            *o = row.iter().zip(attr).map(|(w, x)| w * x).sum::<f64>() + noise * rng.normal();
        }
    }

    /// Deterministic in `(scenario seed, agent index, config)`.
    pub fn observe(&self, scn: &Scenario, agent: usize) -> Result<Observation, SimError> {
        let mut rng = Rng::derive(scn.seed ^ EMULATOR_STREAM, agent as u64);
        self.observe_with(scn, agent, &mut rng)
    }

    pub fn observe_with(&self, scn: &Scenario, agent: usize, rng: &mut Rng) -> Result<Observation, SimError> {
        let cfg = &self.cfg;
        let ag = scn
            .agents
            .get(agent)
            .ok_or_else(|| SimError::Config(format!("agent index {agent} out of range")))?;
        if scn.classes != cfg.classes {
            return Err(SimError::Config(format!(
                "scenario has {} classes, emulator {}",
                scn.classes, cfg.classes
            )));
        }
        let to_agent = relative_transform(&crate::geometry::Pose::identity(), &ag.pose());
        let visible: Vec<usize> = (0..scn.objects.len()).filter(|&o| scn.objects[o].visible_to[agent]).collect();
        if visible.len() > cfg.n_queries {
            return Err(SimError::Config(format!(
                "{} visible objects exceed the {} query budget",
                visible.len(),
                cfg.n_queries
            )));
        }

        let (n, d, c) = (cfg.n_queries, cfg.dim, cfg.classes);
        let mut features = Tensor::zeros(&[n, d]);
        let mut centers = Tensor::zeros(&[n, 3]);
        let mut scores = Tensor::zeros(&[n, c]);
        let mut source = vec![None; n];
        let mut attr = vec![0.0; cfg.attr_dim()];
        let range = ag.sensing_range;

        for (slot, &o) in visible.iter().enumerate() {
            let obj = &scn.objects[o];
            let b = obj.bbox.transformed(&to_agent);
            let [x, y, z] = b.center();
            let dist = (x * x + y * y).sqrt();
            let s = b.size();
            attr.fill(0.0);
            attr[0] = OBJECTNESS;
            attr[1] = x / 50.0;
            attr[2] = y / 50.0;
            attr[3] = z;
            attr[4] = s[0].ln();
            attr[5] = s[1].ln();
            attr[6] = s[2].ln();
            attr[7] = b.yaw().sin();
            attr[8] = b.yaw().cos();
            attr[9..9 + TAG_DIM].copy_from_slice(&obj.tag);
            attr[9 + TAG_DIM + obj.class_id] = 1.0;
            self.embed(&attr, cfg.sigma_feature, rng, features.row_mut(slot));

            let sigma = cfg.sigma_center * (1.0 + 2.0 * dist / range);
            let noisy = [x + sigma * rng.normal(), y + sigma * rng.normal(), z + 0.5 * sigma * rng.normal()];
            centers.row_mut(slot).copy_from_slice(&noisy);

            let base = cfg.score_near - (cfg.score_near - cfg.score_far) * (dist / range).min(1.0);
            let score = (base + cfg.score_noise * rng.normal()).clamp(cfg.score_far, 1.0);
            for k in 0..c {
                let v = if k == obj.class_id { score } else { rng.uniform(0.0, cfg.background_cap) };
                scores.set(slot, k, v);
            }
            source[slot] = Some(o);
        }

        for slot in visible.len()..n {
            attr.fill(0.0);
            for v in &mut attr[1..] {
                *v = rng.normal();
            }
            self.embed(&attr, cfg.sigma_feature, rng, features.row_mut(slot));
            let r = range * rng.uniform(0.0, 1.0).sqrt();
            let t = rng.uniform(-std::f64::consts::PI, std::f64::consts::PI);
            centers
                .row_mut(slot)
                .copy_from_slice(&[r * t.cos(), r * t.sin(), rng.uniform(-1.0, 0.0)]);
            for k in 0..c {
                scores.set(slot, k, rng.uniform(0.0, cfg.background_cap));
            }
        }

        let mut order: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut order);
        Ok(Observation {
            features: features.select_rows(&order),
            centers: centers.select_rows(&order),
            scores: scores.select_rows(&order),
            source: order.iter().map(|&i| source[i]).collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::scenario::{gen_scenario, ScenarioConfig};

    #[test]
    fn zero_noise_centers_are_exact() {
        let scn = gen_scenario(5, &ScenarioConfig::default()).unwrap();
        let emu = Emulator::new(EmulatorConfig {
            sigma_center: 0.0,
            ..Default::default()
        });
        for a in 0..scn.agents.len() {
            let obs = emu.observe(&scn, a).unwrap();
            let gts = scn.targets_in_frame(a, false);
            for (i, src) in obs.source.iter().enumerate() {
                if let Some(o) = src {
                    let want = gts[*o].bbox.center();
                    let got = obs.centers.row(i);
                    for k in 0..3 {
                        assert!((got[k] - want[k]).abs() < 1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn visible_objects_outscore_background() {
        let emu = Emulator::new(EmulatorConfig::default());
        for seed in 0..30 {
            let scn = gen_scenario(seed, &ScenarioConfig::default()).unwrap();
            for a in 0..scn.agents.len() {
                let obs = emu.observe(&scn, a).unwrap();
                let key = |i: usize| obs.scores.row(i).iter().cloned().fold(f64::MIN, f64::max);
                let min_obj = (0..64).filter(|&i| obs.source[i].is_some()).map(key).fold(f64::MAX, f64::min);
                let max_bg = (0..64).filter(|&i| obs.source[i].is_none()).map(key).fold(f64::MIN, f64::max);
                assert!(min_obj > 0.2 && max_bg < 0.2 && min_obj > max_bg);
                let seen: Vec<usize> = obs.source.iter().flatten().cloned().collect();
                let want: Vec<usize> = (0..scn.objects.len()).filter(|&o| scn.objects[o].visible_to[a]).collect();
                let mut sorted = seen.clone();
                sorted.sort_unstable();
                assert_eq!(sorted, want, "exactly the visible objects yield queries");
            }
        }
    }

    #[test]
    fn deterministic_per_agent() {
        let scn = gen_scenario(9, &ScenarioConfig::default()).unwrap();
        let emu = Emulator::new(EmulatorConfig::default());
        assert_eq!(emu.observe(&scn, 1).unwrap(), emu.observe(&scn, 1).unwrap());
        assert_ne!(emu.observe(&scn, 0).unwrap(), emu.observe(&scn, 1).unwrap());
    }

    #[test]
    fn config_checks() {
        assert!(EmulatorConfig::default().validate(0.2).is_ok());
        let bad = EmulatorConfig {
            background_cap: 0.25,
            ..Default::default()
        };
        assert!(bad.validate(0.2).is_err());
    }
}
