use serde::{Deserialize, Serialize};

use crate::numerics::{Tensor, NEG_BLOCK};

use super::FusionError;

/// Interaction gates for the fusion stack.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskConfig {
    /// Proximity threshold in meters; `f64::INFINITY` (`"inf"` in JSON) disables the
    /// distance gate.
    #[serde(with = "tau_serde")]
    pub tau: f64,
    /// Confidence threshold; slots whose best class score is `≤ theta` are background.
    pub theta: f64,
    /// Maximum number of agents (ego included) in one fused batch.
    pub max_agents: usize,
    pub use_qsm: bool,
    pub use_pcm: bool,
    pub use_ssm: bool,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            tau: 10.0,
            theta: 0.20,
            max_agents: 4,
            use_qsm: true,
            use_pcm: true,
            use_ssm: true,
        }
    }
}

impl MaskConfig {
    pub fn validate(&self) -> Result<(), FusionError> {
        if !(self.tau > 0.0) {
            return Err(FusionError::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        if !(0.0..1.0).contains(&self.theta) {
            return Err(FusionError::Config(format!(
                "theta must be in [0, 1), got {}",
                self.theta
            )));
        }
        if self.max_agents < 1 {
            return Err(FusionError::Config("max_agents must be ≥ 1".into()));
        }
        Ok(())
    }
}

mod tau_serde {
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() && *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Num(f64),
        Str(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(v),
            Raw::Str(s) => match s.as_str() {
                "inf" | "infinity" | "+inf" => Ok(f64::INFINITY),
                other => Err(de::Error::custom(format!("expected a number or \"inf\", got \"{other}\""))),
            },
        }
    }
}

/// Parses a tau value as written on the command line or in a config: a number or `inf`.
pub fn parse_tau(s: &str) -> Result<f64, String> {
    match s.trim() {
        "inf" | "infinity" | "+inf" | "∞" => Ok(f64::INFINITY),
        t => t.parse::<f64>().map_err(|e| format!("tau `{t}`: {e}")),
    }
}

/// Square boolean interaction mask; `true` means the pair may not interact.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttnMask {
    n: usize,
    blocked: Vec<bool>,
}

impl AttnMask {
    pub fn open(n: usize) -> Self {
        Self {
            n,
            blocked: vec![false; n * n],
        }
    }

    pub fn from_fn(n: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut blocked = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                blocked.push(f(i, j));
            }
        }
        Self { n, blocked }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn is_blocked(&self, i: usize, j: usize) -> bool {
        self.blocked[i * self.n + j]
    }

    pub fn set(&mut self, i: usize, j: usize, blocked: bool) {
        self.blocked[i * self.n + j] = blocked;
    }

    pub fn count_blocked(&self) -> usize {
        self.blocked.iter().filter(|&&b| b).count()
    }

    /// Reorders rows and columns: entry `(a, b)` of the result is `(perm[a], perm[b])`.
    pub fn permuted(&self, perm: &[usize]) -> AttnMask {
        AttnMask::from_fn(perm.len(), |a, b| self.is_blocked(perm[a], perm[b]))
    }
}

/// Blocks every pair that involves an invalid (padding) slot.
pub fn build_qsm(valid: &[bool]) -> AttnMask {
    AttnMask::from_fn(valid.len(), |i, j| !(valid[i] && valid[j]))
}

/// Blocks pairs whose centers are more than `tau` apart (3D Euclidean); `D == tau` is allowed.
pub fn build_pcm(centers: &Tensor, tau: f64) -> AttnMask {
    let n = centers.rows();
    AttnMask::from_fn(n, |i, j| {
        let (a, b) = (centers.row(i), centers.row(j));
        let d = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt();
        d > tau
    })
}

/// Blocks every pair touching a slot whose best class score is `≤ theta`.
pub fn build_ssm(scores: &Tensor, theta: f64) -> AttnMask {
    let n = scores.rows();
    let background: Vec<bool> = (0..n)
        .map(|i| {
            let key = scores.row(i).iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            key <= theta
        })
        .collect();
    AttnMask::from_fn(n, |i, j| background[i] || background[j])
}

/// Union of the blocked sets, with every diagonal entry forced open so that each softmax
/// row keeps at least its own position.
pub fn combine_masks(masks: &[&AttnMask]) -> Result<AttnMask, FusionError> {
    let n = masks.first().map_or(0, |m| m.n);
    if masks.iter().any(|m| m.n != n) {
        return Err(FusionError::Shape("masks differ in size".into()));
    }
    Ok(AttnMask::from_fn(n, |i, j| {
        i != j && masks.iter().any(|m| m.is_blocked(i, j))
    }))
}

/// Blocked → `NEG_BLOCK`, allowed → 0.
pub fn to_additive(m: &AttnMask) -> Tensor {
    let data = m
        .blocked
        .iter()
        .map(|&b| if b { NEG_BLOCK } else { 0.0 })
        .collect();
    Tensor::from_vec(vec![m.n, m.n], data).expect("n × n entries")
}

/// Builds the combined mask for a batch, honoring the per-mask enable switches.
pub fn build_combined(
    valid: &[bool],
    centers: &Tensor,
    scores: &Tensor,
    cfg: &MaskConfig,
) -> Result<AttnMask, FusionError> {
    let n = valid.len();
    let qsm = if cfg.use_qsm { build_qsm(valid) } else { AttnMask::open(n) };
    let pcm = if cfg.use_pcm && cfg.tau.is_finite() {
        build_pcm(centers, cfg.tau)
    } else {
        AttnMask::open(n)
    };
    let ssm = if cfg.use_ssm { build_ssm(scores, cfg.theta) } else { AttnMask::open(n) };
    combine_masks(&[&qsm, &pcm, &ssm])
}
