use std::path::{Path, PathBuf};

use cocmt::fusion::parse_tau;
use cocmt::sim::{ModelConfig, SimConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SeedRange {
    pub start: u64,
    pub count: usize,
}

impl Default for SeedRange {
    fn default() -> Self {
        Self {
            start: 800_000_000,
            count: 20,
        }
    }
}

impl SeedRange {
    pub fn seeds(&self) -> Vec<u64> {
        (0..self.count as u64).map(|i| self.start + i).collect()
    }
}

/// The whole run: scene, emulator, model and mask settings, training, scene seeds and paths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub sim: SimConfig,
    pub train: TrainConfig,
    /// Evaluation scenes for `simulate` and `ablate`.
    pub seeds: SeedRange,
    pub out_dir: PathBuf,
    /// Model weights; defaults to `<out_dir>/model.cqck`.
    pub checkpoint: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            sim: SimConfig::default(),
            train: TrainConfig::default(),
            seeds: SeedRange::default(),
            out_dir: PathBuf::from("out"),
            checkpoint: None,
        }
    }
}

/// Command-line values layered over the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub k: Option<usize>,
    pub dim: Option<usize>,
    pub classes: Option<usize>,
    pub tau: Option<String>,
    pub theta: Option<f64>,
    pub agents: Option<usize>,
    pub scenes: Option<usize>,
    pub checkpoint: Option<PathBuf>,
    pub paper_parity: bool,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    /// Strict parse; errors carry the path of the offending field.
    pub fn parse(text: &str) -> Result<Self, String> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            format!("at `{path}`: {}", e.into_inner())
        })
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<(), CliError> {
        let sim = &mut self.sim;
        if o.paper_parity {
            set_dim(sim, 256);
            sim.emulator.n_queries = 900;
            sim.k = 50;
            sim.k_ego = 50;
        }
        if let Some(c) = o.classes {
            sim.scenario.classes = c;
            sim.emulator.classes = c;
            sim.model.classes = c;
        }
        if let Some(d) = o.dim {
            set_dim(sim, d);
        }
        if let Some(k) = o.k {
            sim.k = k;
        }
        if let Some(t) = &o.tau {
            sim.mask.tau = parse_tau(t).map_err(CliError::Config)?;
        }
        if let Some(t) = o.theta {
            sim.mask.theta = t;
        }
        if let Some(a) = o.agents {
            sim.scenario.agents_min = a;
            sim.scenario.agents_max = a;
            sim.mask.max_agents = sim.mask.max_agents.max(a);
        }
        if let Some(s) = o.seed {
            self.seeds.start = s;
            self.train.seed = s;
        }
        if let Some(n) = o.scenes {
            self.seeds.count = n;
        }
        if let Some(p) = &o.out {
            self.out_dir = p.clone();
        }
        if let Some(p) = &o.checkpoint {
            self.checkpoint = Some(p.clone());
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.sim.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.train.validate().map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.out_dir.join("model.cqck"))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain config") + "\n"
    }
}

fn set_dim(sim: &mut SimConfig, d: usize) {
    let heads = sim.model.heads;
    let blocks = sim.model.blocks;
    sim.model = ModelConfig {
        heads,
        blocks,
        ..ModelConfig::for_dim(d, sim.model.classes)
    };
    sim.emulator.dim = d;
}
