use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::geometry::{bev_iou, relative_transform, BBox3D, Pose};
use crate::heads::{Roi, Target};
use crate::numerics::Rng;

use super::SimError;

pub const SCENARIO_VERSION: u32 = 1;
pub const TAG_DIM: usize = 8;
const SCENARIO_STREAM: u64 = 0x5ce0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub objects_min: usize,
    pub objects_max: usize,
    /// Agent count range, ego included.
    pub agents_min: usize,
    pub agents_max: usize,
    /// Fraction of objects hidden from the ego but seen by a CAV.
    pub occlusion_fraction: f64,
    pub sensing_range: f64,
    pub cav_distance_min: f64,
    pub cav_distance_max: f64,
    /// Minimum BEV center spacing between any two objects or agents.
    pub min_separation: f64,
    pub object_yaw_jitter: f64,
    pub agent_yaw_jitter: f64,
    pub classes: usize,
    pub roi: Roi,
    pub max_retries: usize,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            objects_min: 4,
            objects_max: 8,
            agents_min: 2,
            agents_max: 4,
            occlusion_fraction: 0.5,
            sensing_range: 35.0,
            cav_distance_min: 15.0,
            cav_distance_max: 35.0,
            min_separation: 6.0,
            object_yaw_jitter: 0.15,
            agent_yaw_jitter: 0.05,
            classes: 1,
            roi: Roi::default(),
            max_retries: 500,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::Config(m.to_string()));
        if self.objects_min > self.objects_max {
            return bad("objects_min > objects_max");
        }
        if self.agents_min < 1 || self.agents_min > self.agents_max {
            return bad("need 1 ≤ agents_min ≤ agents_max");
        }
        if !(0.0..=1.0).contains(&self.occlusion_fraction) {
            return bad("occlusion_fraction must be in [0, 1]");
        }
        if !(self.sensing_range > 0.0) || !(self.min_separation > 0.0) {
            return bad("sensing_range and min_separation must be positive");
        }
        if !(self.cav_distance_min >= 0.0 && self.cav_distance_min <= self.cav_distance_max) {
            return bad("need 0 ≤ cav_distance_min ≤ cav_distance_max");
        }
        if self.classes < 1 {
            return bad("classes must be ≥ 1");
        }
        self.roi.validate().map_err(|e| SimError::Config(e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub id: u32,
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
    pub sensing_range: f64,
}

impl AgentState {
    pub fn pose(&self) -> Pose {
        Pose::planar(self.x, self.y, 0.0, self.yaw)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    /// World frame.
    pub bbox: BBox3D,
    pub class_id: usize,
    /// Identity features shared by every agent that observes the object.
    pub tag: Vec<f64>,
    pub occluded_from_ego: bool,
    /// One flag per agent, same order as `Scenario::agents`.
    pub visible_to: Vec<bool>,
}

/// Agent 0 is the ego.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub version: u32,
    pub seed: u64,
    pub roi: Roi,
    pub classes: usize,
    pub agents: Vec<AgentState>,
    pub objects: Vec<SceneObject>,
}

impl Scenario {
    pub fn ego_pose(&self) -> Pose {
        self.agents[0].pose()
    }

    /// Objects as supervision targets in agent `a`'s frame, optionally only those it sees.
    pub fn targets_in_frame(&self, a: usize, visible_only: bool) -> Vec<Target> {
        let e = relative_transform(&Pose::identity(), &self.agents[a].pose());
        self.objects
            .iter()
            .filter(|o| !visible_only || o.visible_to[a])
            .map(|o| Target {
                bbox: o.bbox.transformed(&e),
                class_id: o.class_id,
            })
            .collect()
    }

    /// Every object, in the ego frame.
    pub fn ground_truth(&self) -> Vec<Target> {
        self.targets_in_frame(0, false)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, SimError> {
        let scn: Scenario = serde_json::from_str(s).map_err(|e| SimError::Format(e.to_string()))?;
        if scn.version != SCENARIO_VERSION {
            return Err(SimError::Format(format!("unsupported scenario version {}", scn.version)));
        }
        Ok(scn)
    }

    pub fn dump(&self, path: &Path) -> Result<(), SimError> {
        super::write_atomic(path, self.to_json().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self, SimError> {
        Self::from_json(&std::fs::read_to_string(path).map_err(|e| SimError::Io(e.to_string()))?)
    }
}

fn dist2(a: (f64, f64), b: (f64, f64)) -> f64 {
    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
}

fn heading(rng: &mut Rng, jitter: f64) -> f64 {
    let base = if rng.bernoulli(0.5) { 0.0 } else { std::f64::consts::PI };
    crate::geometry::normalize_yaw(base + rng.uniform(-jitter, jitter))
}

/// Deterministic in `(seed, cfg)`.
pub fn gen_scenario(seed: u64, cfg: &ScenarioConfig) -> Result<Scenario, SimError> {
    cfg.validate()?;
    let mut rng = Rng::derive(seed, SCENARIO_STREAM);
    for _ in 0..cfg.max_retries.max(1) {
        if let Some(s) = try_generate(seed, cfg, &mut rng) {
            return Ok(s);
        }
    }
    Err(SimError::Infeasible {
        seed,
        retries: cfg.max_retries,
    })
}

fn try_generate(seed: u64, cfg: &ScenarioConfig, rng: &mut Rng) -> Option<Scenario> {
    let roi = &cfg.roi;
    let inside = |x: f64, y: f64, margin: f64| {
        x - margin >= roi.min[0] && x + margin <= roi.max[0] && y - margin >= roi.min[1] && y + margin <= roi.max[1]
    };
    let n_agents = cfg.agents_min + rng.index(cfg.agents_max - cfg.agents_min + 1);
    let mut ids: Vec<u32> = (1..100).collect();
    rng.shuffle(&mut ids);

    let mut agents = vec![AgentState {
        id: 0,
        x: 0.0,
        y: 0.0,
        yaw: 0.0,
        sensing_range: cfg.sensing_range,
    }];
    let mut attempts = 0;
    while agents.len() < n_agents {
        attempts += 1;
        if attempts > cfg.max_retries {
            return None;
        }
        let d = rng.uniform(cfg.cav_distance_min, cfg.cav_distance_max);
        let bearing = rng.uniform(-std::f64::consts::PI, std::f64::consts::PI);
        let (x, y) = (d * bearing.cos(), d * bearing.sin());
        if !inside(x, y, 0.0) || agents.iter().any(|a| dist2((a.x, a.y), (x, y)) < cfg.min_separation) {
            continue;
        }
        agents.push(AgentState {
            id: ids[agents.len() - 1],
            x,
            y,
            yaw: heading(rng, cfg.agent_yaw_jitter),
            sensing_range: cfg.sensing_range,
        });
    }

    let n_objects = cfg.objects_min + rng.index(cfg.objects_max - cfg.objects_min + 1);
    let n_occluded = if agents.len() > 1 {
        (cfg.occlusion_fraction * n_objects as f64).round() as usize
    } else {
        0
    };
    let mut objects: Vec<SceneObject> = Vec::with_capacity(n_objects);
    for o in 0..n_objects {
        let occluded = o < n_occluded;
        let anchor = if occluded { 1 + rng.index(agents.len() - 1) } else { 0 };
        let mut placed = None;
        for _ in 0..cfg.max_retries {
            let r = cfg.sensing_range * 0.85 * rng.uniform(0.0, 1.0).sqrt();
            let t = rng.uniform(-std::f64::consts::PI, std::f64::consts::PI);
            let (x, y) = (agents[anchor].x + r * t.cos(), agents[anchor].y + r * t.sin());
            if !inside(x, y, 3.0) {
                continue;
            }
            let clear_agents = agents.iter().all(|a| dist2((a.x, a.y), (x, y)) >= cfg.min_separation);
            let clear_objects = objects.iter().all(|b| {
                let c = b.bbox.center();
                dist2((c[0], c[1]), (x, y)) >= cfg.min_separation
            });
            if clear_agents && clear_objects {
                placed = Some((x, y));
                break;
            }
        }
        let (x, y) = placed?;
        let size = [rng.uniform(3.8, 5.0), rng.uniform(1.7, 2.1), rng.uniform(1.4, 1.8)];
        let z = rng.uniform(-1.0, 0.0);
        let bbox = BBox3D::new([x, y, z], size, heading(rng, cfg.object_yaw_jitter)).ok()?;
        if objects.iter().any(|b| bev_iou(&b.bbox, &bbox) > 0.0) {
            return None;
        }
        let visible_to = agents
            .iter()
            .enumerate()
            .map(|(a, ag)| dist2((ag.x, ag.y), (x, y)) <= ag.sensing_range && !(a == 0 && occluded))
            .collect();
        objects.push(SceneObject {
            bbox,
            class_id: rng.index(cfg.classes),
            tag: (0..TAG_DIM).map(|_| rng.normal()).collect(),
            occluded_from_ego: occluded,
            visible_to,
        });
    }
    Some(Scenario {
        version: SCENARIO_VERSION,
        seed,
        roi: cfg.roi,
        classes: cfg.classes,
        agents,
        objects,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_scenario() {
        let cfg = ScenarioConfig::default();
        assert_eq!(gen_scenario(11, &cfg).unwrap(), gen_scenario(11, &cfg).unwrap());
        assert_ne!(gen_scenario(11, &cfg).unwrap(), gen_scenario(12, &cfg).unwrap());
    }

    #[test]
    fn no_occlusion_means_ego_sees_everything() {
        let cfg = ScenarioConfig {
            occlusion_fraction: 0.0,
            ..Default::default()
        };
        for seed in 0..50 {
            let s = gen_scenario(seed, &cfg).unwrap();
            assert!(s.objects.iter().all(|o| o.visible_to[0]));
        }
    }

    #[test]
    fn structural_invariants() {
        let cfg = ScenarioConfig::default();
        for seed in 0..200 {
            let s = gen_scenario(seed, &cfg).unwrap();
            assert!(s.agents.len() >= cfg.agents_min && s.agents.len() <= cfg.agents_max);
            let mut ids: Vec<u32> = s.agents.iter().map(|a| a.id).collect();
            ids.sort_unstable();
            ids.dedup();
            assert_eq!(ids.len(), s.agents.len());
            for o in &s.objects {
                assert!(s.roi.contains(&o.bbox.center()));
                assert!(o.visible_to.iter().any(|&v| v), "every object is seen by someone");
                if o.occluded_from_ego {
                    assert!(!o.visible_to[0]);
                }
            }
        }
    }

    #[test]
    fn json_round_trip() {
        let s = gen_scenario(3, &ScenarioConfig::default()).unwrap();
        let back = Scenario::from_json(&s.to_json()).unwrap();
        assert_eq!(s, back);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("scn.json");
        s.dump(&p).unwrap();
        assert_eq!(Scenario::load(&p).unwrap(), s);
        let bumped = s.to_json().replace("\"version\": 1", "\"version\": 9");
        assert!(Scenario::from_json(&bumped).is_err());
    }

    #[test]
    fn impossible_density_fails() {
        let cfg = ScenarioConfig {
            objects_min: 200,
            objects_max: 200,
            max_retries: 5,
            ..Default::default()
        };
        assert!(matches!(gen_scenario(1, &cfg), Err(SimError::Infeasible { .. })));
    }
}
