use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::{GeometryError, Transform};

/// Wraps an angle into `(-π, π]`.
pub fn normalize_yaw(yaw: f64) -> f64 {
    let mut a = yaw % (2.0 * PI);
    if a <= -PI {
        a += 2.0 * PI;
    } else if a > PI {
        a -= 2.0 * PI;
    }
    a
}

/// Oriented 3D box: center in meters, `(length, width, height)`, yaw about +z.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawBox", into = "RawBox")]
pub struct BBox3D {
    center: [f64; 3],
    size: [f64; 3],
    yaw: f64,
}

#[derive(Serialize, Deserialize)]
struct RawBox {
    center: [f64; 3],
    size: [f64; 3],
    yaw: f64,
}

impl TryFrom<RawBox> for BBox3D {
    type Error = GeometryError;
    fn try_from(r: RawBox) -> Result<Self, Self::Error> {
        BBox3D::new(r.center, r.size, r.yaw)
    }
}

impl From<BBox3D> for RawBox {
    fn from(b: BBox3D) -> Self {
        RawBox {
            center: b.center,
            size: b.size,
            yaw: b.yaw,
        }
    }
}

impl BBox3D {
    pub fn new(center: [f64; 3], size: [f64; 3], yaw: f64) -> Result<Self, GeometryError> {
        if !center.iter().chain(size.iter()).all(|v| v.is_finite()) || !yaw.is_finite() {
            return Err(GeometryError::NonFinite);
        }
        if size.iter().any(|&s| s <= 0.0) {
            return Err(GeometryError::NonPositiveSize(size));
        }
        Ok(Self {
            center,
            size,
            yaw: normalize_yaw(yaw),
        })
    }

    pub fn center(&self) -> [f64; 3] {
        self.center
    }

    pub fn size(&self) -> [f64; 3] {
        self.size
    }

    pub fn yaw(&self) -> f64 {
        self.yaw
    }

    /// Re-expresses the box in another frame; the yaw picks up the transform's heading.
    pub fn transformed(&self, e: &Transform) -> BBox3D {
        BBox3D {
            center: e.apply(&self.center),
            size: self.size,
            yaw: normalize_yaw(self.yaw + e.yaw()),
        }
    }

    /// Counter-clockwise BEV footprint.
    pub fn bev_polygon(&self) -> Polygon2D {
        let (s, c) = self.yaw.sin_cos();
        let hl = self.size[0] / 2.0;
        let hw = self.size[1] / 2.0;
        let [cx, cy, _] = self.center;
        let corners = [(hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw)];
        let vertices = corners
            .iter()
            .map(|&(dx, dy)| [cx + c * dx - s * dy, cy + s * dx + c * dy])
            .collect();
        Polygon2D { vertices }
    }

    pub fn bev_area(&self) -> f64 {
        self.size[0] * self.size[1]
    }
}

/// Convex polygon with counter-clockwise vertices.
#[derive(Debug, Clone, PartialEq)]
pub struct Polygon2D {
    pub vertices: Vec<[f64; 2]>,
}

impl Polygon2D {
    /// Shoelace area. Positive for counter-clockwise order.
    pub fn signed_area(&self) -> f64 {
        let v = &self.vertices;
        if v.len() < 3 {
            return 0.0;
        }
        let mut acc = 0.0;
        for i in 0..v.len() {
            let a = v[i];
            let b = v[(i + 1) % v.len()];
            acc += a[0] * b[1] - b[0] * a[1];
        }
        0.5 * acc
    }

    pub fn area(&self) -> f64 {
        self.signed_area().abs()
    }

    /// Sutherland–Hodgman clip of `self` against the convex, counter-clockwise `clip`.
    pub fn clip(&self, clip: &Polygon2D) -> Polygon2D {
        let mut out = self.vertices.clone();
        let c = &clip.vertices;
        for i in 0..c.len() {
            if out.is_empty() {
                break;
            }
            let a = c[i];
            let b = c[(i + 1) % c.len()];
            let side = |p: [f64; 2]| (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]);
            let input = std::mem::take(&mut out);
            for j in 0..input.len() {
                let cur = input[j];
                let prev = input[(j + input.len() - 1) % input.len()];
                let (sc, sp) = (side(cur), side(prev));
                if sc >= 0.0 {
                    if sp < 0.0 {
                        out.push(intersect(prev, cur, sp, sc));
                    }
                    out.push(cur);
                } else if sp >= 0.0 {
                    out.push(intersect(prev, cur, sp, sc));
                }
            }
        }
        Polygon2D { vertices: out }
    }
}

fn intersect(p: [f64; 2], q: [f64; 2], sp: f64, sq: f64) -> [f64; 2] {
    let t = sp / (sp - sq);
    [p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]
}

/// Intersection-over-union of the yaw-rotated BEV rectangles of two boxes.
pub fn bev_iou(a: &BBox3D, b: &BBox3D) -> f64 {
    let area_a = a.bev_area();
    let area_b = b.bev_area();
    if area_a <= 0.0 || area_b <= 0.0 {
        return 0.0;
    }
    // Quick reject on circumscribed circles.
    let ra = 0.5 * a.size[0].hypot(a.size[1]);
    let rb = 0.5 * b.size[0].hypot(b.size[1]);
    let d = (a.center[0] - b.center[0]).hypot(a.center[1] - b.center[1]);
    if d > ra + rb {
        return 0.0;
    }
    let pa = a.bev_polygon();
    let pb = b.bev_polygon();
    // Clip in a canonical order so the result is symmetric bit-for-bit.
    let (subject, clipper) = if canonical_le(a, b) { (&pa, &pb) } else { (&pb, &pa) };
    let inter = subject.clip(clipper).area().min(area_a).min(area_b);
    let union = area_a + area_b - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

fn canonical_le(a: &BBox3D, b: &BBox3D) -> bool {
    let ka = [a.center[0], a.center[1], a.size[0], a.size[1], a.yaw];
    let kb = [b.center[0], b.center[1], b.size[0], b.size[1], b.yaw];
    for (x, y) in ka.iter().zip(&kb) {
        match x.total_cmp(y) {
            std::cmp::Ordering::Less => return true,
            std::cmp::Ordering::Greater => return false,
            std::cmp::Ordering::Equal => {}
        }
    }
    true
}
