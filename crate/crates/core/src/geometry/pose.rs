use nalgebra::{Matrix3, Matrix4, Rotation3, Vector3};

use super::GeometryError;

const ORTHO_TOL: f64 = 1e-9;

fn check_rotation(r: &Matrix3<f64>) -> Result<(), GeometryError> {
    if !r.iter().all(|v| v.is_finite()) {
        return Err(GeometryError::NonFinite);
    }
    let err = (r.transpose() * r - Matrix3::identity()).abs().max();
    if err > ORTHO_TOL {
        return Err(GeometryError::NotOrthonormal(err));
    }
    let det = r.determinant();
    if (det - 1.0).abs() > ORTHO_TOL {
        return Err(GeometryError::NotProperRotation(det));
    }
    Ok(())
}

/// Rigid pose of an agent in the world frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl Pose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        check_rotation(&rotation)?;
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Ground-plane pose: rotation about +z by `yaw`.
    pub fn planar(x: f64, y: f64, z: f64, yaw: f64) -> Self {
        Self {
            rotation: *Rotation3::from_axis_angle(&Vector3::z_axis(), yaw).matrix(),
            translation: Vector3::new(x, y, z),
        }
    }

    /// Projects an almost-rigid 4x4 matrix (e.g. one decoded from float32) onto the nearest
    /// proper rotation. Fails when the rotation block is too far from orthonormal to be a pose.
    pub fn from_matrix_reorthonormalized(m: &Matrix4<f64>) -> Result<Self, GeometryError> {
        if !m.iter().all(|v| v.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        let r: Matrix3<f64> = m.fixed_view::<3, 3>(0, 0).into_owned();
        let drift = (r.transpose() * r - Matrix3::identity()).abs().max();
        if drift > 1e-3 {
            return Err(GeometryError::NotOrthonormal(drift));
        }
        let rot = Rotation3::from_matrix_eps(&r, 1e-15, 64, Rotation3::identity());
        Self::new(*rot.matrix(), m.fixed_view::<3, 1>(0, 3).into_owned())
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    /// Heading about +z, assuming a ground-plane pose.
    pub fn yaw(&self) -> f64 {
        self.rotation[(1, 0)].atan2(self.rotation[(0, 0)])
    }

    pub fn to_transform(&self) -> Transform {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        Transform { matrix: m }
    }
}

/// Homogeneous rigid transform. The bottom row is always exactly `[0, 0, 0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transform {
    matrix: Matrix4<f64>,
}

impl Transform {
    pub fn new(matrix: Matrix4<f64>) -> Result<Self, GeometryError> {
        let bottom = [matrix[(3, 0)], matrix[(3, 1)], matrix[(3, 2)], matrix[(3, 3)]];
        if bottom != [0.0, 0.0, 0.0, 1.0] {
            return Err(GeometryError::BadBottomRow);
        }
        check_rotation(&matrix.fixed_view::<3, 3>(0, 0).into_owned())?;
        if !matrix.iter().all(|v| v.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        Ok(Self { matrix })
    }

    pub fn identity() -> Self {
        Self {
            matrix: Matrix4::identity(),
        }
    }

    pub fn translation(x: f64, y: f64, z: f64) -> Self {
        Pose::new(Matrix3::identity(), Vector3::new(x, y, z))
            .expect("identity rotation")
            .to_transform()
    }

    pub fn matrix(&self) -> &Matrix4<f64> {
        &self.matrix
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.matrix.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation_part(&self) -> Vector3<f64> {
        self.matrix.fixed_view::<3, 1>(0, 3).into_owned()
    }

    /// Rotation about +z encoded by this transform (ground-plane assumption).
    pub fn yaw(&self) -> f64 {
        self.matrix[(1, 0)].atan2(self.matrix[(0, 0)])
    }

    /// Row-major flattening of the full 4x4 matrix.
    pub fn to_row_major(&self) -> [f64; 16] {
        let mut out = [0.0; 16];
        for r in 0..4 {
            for c in 0..4 {
                out[r * 4 + c] = self.matrix[(r, c)];
            }
        }
        out
    }

    pub fn apply(&self, p: &[f64; 3]) -> [f64; 3] {
        let m = &self.matrix;
        let mut out = [0.0; 3];
        for (r, o) in out.iter_mut().enumerate() {
            *o = m[(r, 0)] * p[0] + m[(r, 1)] * p[1] + m[(r, 2)] * p[2] + m[(r, 3)];
        }
        out
    }
}

/// Matrix product `a · b`: apply `b` first, then `a`.
pub fn compose(a: &Transform, b: &Transform) -> Transform {
    let mut m = a.matrix * b.matrix;
    // Keep the homogeneous row exact regardless of rounding.
    m[(3, 0)] = 0.0;
    m[(3, 1)] = 0.0;
    m[(3, 2)] = 0.0;
    m[(3, 3)] = 1.0;
    Transform { matrix: m }
}

pub fn invert(t: &Transform) -> Transform {
    let rt = t.rotation().transpose();
    let ti = -(rt * t.translation_part());
    let mut m = Matrix4::identity();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&rt);
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(&ti);
    Transform { matrix: m }
}

/// Transform mapping points expressed in the CAV frame into the ego frame.
pub fn relative_transform(cav_pose: &Pose, ego_pose: &Pose) -> Transform {
    compose(&invert(&ego_pose.to_transform()), &cav_pose.to_transform())
}

pub fn transform_points(e: &Transform, pts: &[[f64; 3]]) -> Vec<[f64; 3]> {
    pts.iter().map(|p| e.apply(p)).collect()
}
