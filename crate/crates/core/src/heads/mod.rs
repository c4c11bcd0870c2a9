//! Detection heads, set matching and the deep-supervision loss.

mod head;
mod hungarian;
mod loss;

pub use head::{head_backward, head_forward, head_raw, HeadCache, HeadOutput, HeadParams, BOX_PARAMS};
pub use hungarian::{assignment_cost, hungarian};
pub use loss::{
    hungarian_match, layer_loss, match_cost, supervised_loss, target_params, Assignment,
    LayerGrad, LayerLoss, LayerPrediction, LossBreakdown, LossGrads, LossWeights, Target,
};

use serde::{Deserialize, Serialize};

use crate::geometry::BBox3D;
use crate::numerics::Tensor;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("degenerate roi: {0}")]
pub struct RoiError(String);

/// Axis-aligned detection range in the ego frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Roi {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Default for Roi {
    fn default() -> Self {
        Self {
            min: [-50.0, -50.0, -3.0],
            max: [50.0, 50.0, 3.0],
        }
    }
}

impl Roi {
    pub fn new(min: [f64; 3], max: [f64; 3]) -> Result<Self, RoiError> {
        let r = Self { min, max };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<(), RoiError> {
        for a in 0..3 {
            if !(self.max[a] - self.min[a] > 0.0) || !self.min[a].is_finite() || !self.max[a].is_finite() {
                return Err(RoiError(format!("axis {a}: [{}, {}]", self.min[a], self.max[a])));
            }
        }
        Ok(())
    }

    pub fn contains(&self, p: &[f64; 3]) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] && p[a] <= self.max[a])
    }

    pub fn normalize_unclamped(&self, p: &[f64; 3]) -> [f64; 3] {
        std::array::from_fn(|a| (p[a] - self.min[a]) / (self.max[a] - self.min[a]))
    }

    pub fn denormalize(&self, u: &[f64; 3]) -> [f64; 3] {
        std::array::from_fn(|a| self.min[a] + u[a] * (self.max[a] - self.min[a]))
    }
}

/// Maps each center into `[0, 1]³` relative to `roi`, clamping outside points.
pub fn normalize_refs(centers: &Tensor, roi: &Roi) -> Result<Tensor, RoiError> {
    roi.validate()?;
    let mut out = Tensor::zeros(&[centers.rows(), 3]);
    for i in 0..centers.rows() {
        let c = centers.row(i);
        let u = roi.normalize_unclamped(&[c[0], c[1], c[2]]);
        for (o, v) in out.row_mut(i).iter_mut().zip(u) {
            *o = v.clamp(0.0, 1.0);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox3D,
    pub score: f64,
    pub class_id: usize,
}
