//! Top-k query selection, the `CQF1` frame format, and bandwidth accounting.
//!
//! Frame layout (all little-endian):
//!
//! | offset | size        | field                                   |
//! |--------|-------------|-----------------------------------------|
//! | 0      | 4           | magic `b"CQF1"`                         |
//! | 4      | 2           | version (`u16`, currently 1)            |
//! | 6      | 4           | agent id (`u32`)                        |
//! | 10     | 2           | k (`u16`)                               |
//! | 12     | 2           | D (`u16`)                               |
//! | 14     | 2           | C (`u16`)                               |
//! | 16     | 4·k·D       | features, row-major `f32`               |
//! | ...    | 4·k·3       | centers, row-major `f32`                |
//! | ...    | 4·k·C       | scores, row-major `f32`                 |
//! | ...    | 64          | sender pose, row-major 4x4 `f32`        |

use std::path::Path;

use crate::geometry::{GeometryError, Pose};
use crate::numerics::Tensor;

pub const MAGIC: [u8; 4] = *b"CQF1";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 16;
const POSE_FLOATS: usize = 16;

#[derive(Debug, Clone, thiserror::Error, PartialEq)]
pub enum WireError {
    #[error("k = {k} exceeds the {n} available queries")]
    KTooLarge { k: usize, n: usize },
    #[error("query tensors disagree on row count or width: {0}")]
    Shape(String),
    #[error("cannot encode {field} = {value}: does not fit in u16")]
    Overflow { field: &'static str, value: usize },
    #[error("decode error in field `{field}`: {detail}")]
    Decode { field: &'static str, detail: String },
    #[error("sender pose is not rigid: {0}")]
    Pose(#[from] GeometryError),
    #[error("io: {0}")]
    Io(String),
}

impl WireError {
    /// Name of the frame field a decode error refers to.
    pub fn field(&self) -> Option<&'static str> {
        match self {
            WireError::Decode { field, .. } => Some(field),
            _ => None,
        }
    }
}

/// What one agent transmits: `k` query rows with their centers and class scores, plus the
/// sender pose as control-plane metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryPayload {
    pub agent_id: u32,
    pub k: usize,
    pub dim: usize,
    pub classes: usize,
    /// `k × dim`
    pub features: Vec<f32>,
    /// `k × 3`, meters in the sender frame
    pub centers: Vec<f32>,
    /// `k × classes`, probabilities
    pub scores: Vec<f32>,
    /// Sender pose, row-major 4x4.
    pub pose: [f32; POSE_FLOATS],
}

impl QueryPayload {
    pub fn features_tensor(&self) -> Tensor {
        to_tensor(&self.features, self.k, self.dim)
    }

    pub fn centers_tensor(&self) -> Tensor {
        to_tensor(&self.centers, self.k, 3)
    }

    pub fn scores_tensor(&self) -> Tensor {
        to_tensor(&self.scores, self.k, self.classes)
    }

    pub fn center(&self, i: usize) -> [f64; 3] {
        let c = &self.centers[i * 3..i * 3 + 3];
        [c[0] as f64, c[1] as f64, c[2] as f64]
    }

    /// Ranking key of row `i`: the highest class probability.
    pub fn key(&self, i: usize) -> f32 {
        self.scores[i * self.classes..(i + 1) * self.classes]
            .iter()
            .cloned()
            .fold(f32::NEG_INFINITY, f32::max)
    }

    /// Sender pose recovered from its float32 encoding.
    pub fn sender_pose(&self) -> Result<Pose, WireError> {
        let m = nalgebra::Matrix4::from_row_slice(&self.pose.map(|v| v as f64));
        Ok(Pose::from_matrix_reorthonormalized(&m)?)
    }

    /// Bit-for-bit equality, including the sign of zeros and NaN payloads.
    pub fn bit_identical(&self, other: &QueryPayload) -> bool {
        let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        self.agent_id == other.agent_id
            && self.k == other.k
            && self.dim == other.dim
            && self.classes == other.classes
            && bits(&self.features) == bits(&other.features)
            && bits(&self.centers) == bits(&other.centers)
            && bits(&self.scores) == bits(&other.scores)
            && bits(&self.pose) == bits(&other.pose)
    }
}

fn to_tensor(v: &[f32], rows: usize, cols: usize) -> Tensor {
    Tensor::from_vec(vec![rows, cols], v.iter().map(|&x| x as f64).collect())
        .expect("payload invariants keep lengths consistent")
}

pub fn pose_to_f32(pose: &Pose) -> [f32; POSE_FLOATS] {
    pose.to_transform().to_row_major().map(|v| v as f32)
}

/// Indices of the `k` rows with the highest max-class score, in descending key order;
/// ties go to the lower original index.
pub fn top_k_indices(scores: &Tensor, k: usize) -> Result<Vec<usize>, WireError> {
    let n = scores.rows();
    if k > n {
        return Err(WireError::KTooLarge { k, n });
    }
    let keys: Vec<f64> = (0..n)
        .map(|i| scores.row(i).iter().cloned().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let mut idx: Vec<usize> = (0..n).collect();
    // sort_by is stable, so equal keys keep ascending index order
    idx.sort_by(|&a, &b| keys[b].total_cmp(&keys[a]));
    idx.truncate(k);
    Ok(idx)
}

/// Keeps the `k` most confident queries of an `N`-query detector output.
pub fn top_k_select(
    agent_id: u32,
    pose: &Pose,
    q: &Tensor,
    c: &Tensor,
    s: &Tensor,
    k: usize,
) -> Result<QueryPayload, WireError> {
    let n = q.rows();
    if c.rows() != n || s.rows() != n || c.cols() != 3 {
        return Err(WireError::Shape(format!(
            "q {:?}, c {:?}, s {:?}",
            q.shape(),
            c.shape(),
            s.shape()
        )));
    }
    let idx = top_k_indices(s, k)?;
    let gather = |t: &Tensor| -> Vec<f32> {
        idx.iter()
            .flat_map(|&i| t.row(i).iter().map(|&v| v as f32))
            .collect()
    };
    Ok(QueryPayload {
        agent_id,
        k,
        dim: q.cols(),
        classes: s.cols(),
        features: gather(q),
        centers: gather(c),
        scores: gather(s),
        pose: pose_to_f32(pose),
    })
}

pub fn frame_len(k: usize, dim: usize, classes: usize) -> usize {
    HEADER_LEN + 4 * (k * (dim + 3 + classes) + POSE_FLOATS)
}

fn u16_field(field: &'static str, value: usize) -> Result<u16, WireError> {
    u16::try_from(value).map_err(|_| WireError::Overflow { field, value })
}

pub fn serialize(p: &QueryPayload) -> Result<Vec<u8>, WireError> {
    let k = u16_field("k", p.k)?;
    let d = u16_field("D", p.dim)?;
    let c = u16_field("C", p.classes)?;
    if p.features.len() != p.k * p.dim
        || p.centers.len() != p.k * 3
        || p.scores.len() != p.k * p.classes
    {
        return Err(WireError::Shape("payload buffers disagree with k/D/C".into()));
    }
    let mut out = Vec::with_capacity(frame_len(p.k, p.dim, p.classes));
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&p.agent_id.to_le_bytes());
    out.extend_from_slice(&k.to_le_bytes());
    out.extend_from_slice(&d.to_le_bytes());
    out.extend_from_slice(&c.to_le_bytes());
    for v in p
        .features
        .iter()
        .chain(&p.centers)
        .chain(&p.scores)
        .chain(&p.pose)
    {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

fn decode_err(field: &'static str, detail: impl Into<String>) -> WireError {
    WireError::Decode {
        field,
        detail: detail.into(),
    }
}

pub fn deserialize(bytes: &[u8]) -> Result<QueryPayload, WireError> {
    if bytes.len() < 4 || bytes[..4] != MAGIC {
        return Err(decode_err("magic", "expected b\"CQF1\""));
    }
    if bytes.len() < HEADER_LEN {
        return Err(decode_err(
            "length",
            format!("{} bytes is shorter than the header", bytes.len()),
        ));
    }
    let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]);
    let version = u16_at(4);
    if version != VERSION {
        return Err(decode_err("version", format!("unsupported version {version}")));
    }
    let agent_id = u32::from_le_bytes([bytes[6], bytes[7], bytes[8], bytes[9]]);
    let k = u16_at(10) as usize;
    let dim = u16_at(12) as usize;
    let classes = u16_at(14) as usize;
    let want = frame_len(k, dim, classes);
    if bytes.len() != want {
        return Err(decode_err(
            "length",
            format!("frame is {} bytes, header implies {want}", bytes.len()),
        ));
    }
    let mut floats = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]));
    let mut take = |n: usize| -> Vec<f32> { floats.by_ref().take(n).collect() };
    let features = take(k * dim);
    let centers = take(k * 3);
    let scores = take(k * classes);
    let pose_v = take(POSE_FLOATS);
    let mut pose = [0f32; POSE_FLOATS];
    pose.copy_from_slice(&pose_v);
    Ok(QueryPayload {
        agent_id,
        k,
        dim,
        classes,
        features,
        centers,
        scores,
        pose,
    })
}

/// Transmitted tensor payload in bits: `k · (D + 3 + C)` float32 values. The frame header
/// and the sender pose are control-plane metadata and are not counted.
pub fn bandwidth_bits(k: u64, dim: u64, classes: u64) -> u64 {
    k * (dim + 3 + classes) * 32
}

/// Megabits (10⁶ bits).
pub fn bits_to_mb(bits: u64) -> f64 {
    bits as f64 / 1e6
}

/// Renders a bit count as megabits with three decimals, e.g. `"0.416 Mb"`; zero is `"0 Mb"`.
pub fn format_mb(bits: u64) -> String {
    if bits == 0 {
        "0 Mb".to_string()
    } else {
        format!("{:.3} Mb", bits_to_mb(bits))
    }
}

/// Writes one frame to a `.cqf` file.
pub fn write_frame_file(path: &Path, payload: &QueryPayload) -> Result<(), WireError> {
    let bytes = serialize(payload)?;
    std::fs::write(path, bytes).map_err(|e| WireError::Io(format!("{}: {e}", path.display())))
}

pub fn read_frame_file(path: &Path) -> Result<QueryPayload, WireError> {
    let bytes =
        std::fs::read(path).map_err(|e| WireError::Io(format!("{}: {e}", path.display())))?;
    deserialize(&bytes)
}
