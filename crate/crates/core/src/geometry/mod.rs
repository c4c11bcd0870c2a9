//! Rigid poses, inter-agent transforms and oriented-box BEV geometry.

mod bbox;
mod pose;

pub use bbox::{bev_iou, normalize_yaw, BBox3D, Polygon2D};
pub use pose::{compose, invert, relative_transform, transform_points, Pose, Transform};

#[derive(Debug, Clone, thiserror::Error, PartialEq)]
pub enum GeometryError {
    #[error("rotation is not orthonormal (max |RᵀR − I| = {0:e})")]
    NotOrthonormal(f64),
    #[error("rotation has determinant {0}, expected +1")]
    NotProperRotation(f64),
    #[error("homogeneous bottom row must be [0, 0, 0, 1]")]
    BadBottomRow,
    #[error("box size must be strictly positive, got {0:?}")]
    NonPositiveSize([f64; 3]),
    #[error("non-finite value")]
    NonFinite,
}
