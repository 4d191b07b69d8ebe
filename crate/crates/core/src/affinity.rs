//! Fused appearance and epipolar affinity between detections of different views.

use nalgebra::{DMatrix, Matrix3, Vector2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{epipolar_line, fundamental_matrix, point_line_distance, CameraView, GeometryError};
use crate::partition::Partition;

/// Keypoints scored below this do not take part in the epipolar distance.
pub const DEFAULT_SCORE_FLOOR: f64 = 0.2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AffinityError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub score: f64,
}

impl Keypoint {
    pub fn position(&self) -> Vector2<f64> {
        Vector2::new(self.x, self.y)
    }
}

/// One detected person box in one view.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub view_id: usize,
    pub index_in_view: usize,
    /// `(x, y, w, h)` in pixels.
    pub bbox: [f64; 4],
    pub keypoints: Vec<Keypoint>,
    pub descriptor: Vec<f64>,
    pub visible: Vec<bool>,
}

impl Detection {
    /// Builds a detection, marking keypoints at or above `score_floor` visible.
    pub fn new(
        view_id: usize,
        index_in_view: usize,
        bbox: [f64; 4],
        keypoints: Vec<Keypoint>,
        descriptor: Vec<f64>,
        score_floor: f64,
    ) -> Self {
        let visible = keypoints.iter().map(|k| k.score >= score_floor && k.x.is_finite() && k.y.is_finite()).collect();
        Self { view_id, index_in_view, bbox, keypoints, descriptor, visible }
    }

    pub fn n_joints(&self) -> usize {
        self.keypoints.len()
    }

    pub fn is_visible(&self, joint: usize) -> bool {
        self.visible[joint]
    }
}

/// All detections of one view, ordered by `index_in_view`.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionSet {
    pub view_id: usize,
    pub detections: Vec<Detection>,
}

/// Sigmoid midpoints and widths mapping distances to affinities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AffinityScale {
    /// Descriptor distance at which appearance affinity is 0.5.
    pub mid_a: f64,
    pub width_a: f64,
    /// Epipolar distance (px) at which geometric affinity is 0.5.
    pub mid_g: f64,
    pub width_g: f64,
}

impl Default for AffinityScale {
    fn default() -> Self {
        Self { mid_a: 1.0, width_a: 0.25, mid_g: 25.0, width_g: 5.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AffinityConfig {
    #[serde(flatten)]
    pub scale: AffinityScale,
    /// Gate on the raw epipolar distance in pixels; pairs beyond it get zero affinity.
    pub th: f64,
    pub score_floor: f64,
}

impl Default for AffinityConfig {
    fn default() -> Self {
        Self { scale: AffinityScale::default(), th: 40.0, score_floor: DEFAULT_SCORE_FLOOR }
    }
}

/// Symmetric `m × m` affinity over all detections, stacked view by view.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityMatrix {
    values: DMatrix<f64>,
    partition: Partition,
}

impl AffinityMatrix {
    /// Wraps a raw matrix, zeroing same-view blocks and checking symmetry and range.
    pub fn from_values(mut values: DMatrix<f64>, partition: Partition) -> Result<Self, AffinityError> {
        let m = partition.m();
        if values.nrows() != m || values.ncols() != m {
            return Err(AffinityError::DimensionMismatch(format!(
                "affinity is {}x{} but partition sums to {m}",
                values.nrows(),
                values.ncols()
            )));
        }
        for v in 0..partition.n_views() {
            let r = partition.range(v);
            values.view_mut((r.start, r.start), (r.len(), r.len())).fill(0.0);
        }
        for i in 0..m {
            for j in 0..m {
                let a = values[(i, j)];
                if !(0.0..=1.0).contains(&a) {
                    return Err(AffinityError::DimensionMismatch(format!(
                        "affinity entry ({i},{j}) = {a} outside [0,1]"
                    )));
                }
                if a != values[(j, i)] {
                    return Err(AffinityError::DimensionMismatch(format!("affinity is not symmetric at ({i},{j})")));
                }
            }
        }
        Ok(Self { values, partition })
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn partition(&self) -> &Partition {
        &self.partition
    }

    pub fn m(&self) -> usize {
        self.partition.m()
    }
}

fn sigmoid_decreasing(dist: f64, mid: f64, width: f64) -> f64 {
    1.0 / (1.0 + ((dist - mid) / width).exp())
}

/// Sigmoid of descriptor distance; larger means more alike.
pub fn appearance_affinity(desc_a: &[f64], desc_b: &[f64], scale: &AffinityScale) -> Result<f64, AffinityError> {
    if desc_a.len() != desc_b.len() {
        return Err(AffinityError::DimensionMismatch(format!(
            "descriptor lengths {} and {}",
            desc_a.len(),
            desc_b.len()
        )));
    }
    let dist = desc_a.iter().zip(desc_b).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    Ok(sigmoid_decreasing(dist, scale.mid_a, scale.width_a))
}

/// Symmetric mean point-to-epipolar-line distance over joints visible in both poses.
///
/// `f_ab` maps pixels of `b` to lines in `a`'s image, `f_ba` the reverse.
/// Joints whose epipolar line is degenerate are skipped. Returns
/// `f64::INFINITY` when no joint is usable.
pub fn geometric_distance(a: &Detection, b: &Detection, f_ab: &Matrix3<f64>, f_ba: &Matrix3<f64>) -> f64 {
    let mut total = 0.0;
    let mut used = 0usize;
    for n in 0..a.n_joints().min(b.n_joints()) {
        if !(a.is_visible(n) && b.is_visible(n)) {
            continue;
        }
        let xa = a.keypoints[n].position();
        let xb = b.keypoints[n].position();
        let (Ok(la), Ok(lb)) = (epipolar_line(f_ab, &xb), epipolar_line(f_ba, &xa)) else {
            continue;
        };
        total += point_line_distance(&xa, &la) + point_line_distance(&xb, &lb);
        used += 1;
    }
    if used == 0 {
        f64::INFINITY
    } else {
        total / (2.0 * used as f64)
    }
}

/// Sigmoid of epipolar distance; the infinite sentinel maps to zero.
pub fn geometric_affinity(d_g: f64, scale: &AffinityScale) -> f64 {
    if d_g.is_infinite() {
        return 0.0;
    }
    sigmoid_decreasing(d_g, scale.mid_g, scale.width_g)
}

/// Geometric mean of the two cues, gated on the raw epipolar distance.
pub fn fused_affinity(a_app: f64, a_geo: f64, d_g: f64, th: f64) -> f64 {
    if d_g <= th {
        (a_app * a_geo).sqrt()
    } else {
        0.0
    }
}

/// Checks that every view has the same joint count and descriptor length.
/// Returns `(n_joints, descriptor_dim)` of the first detection, if any.
pub fn check_consistency(views: &[DetectionSet]) -> Result<Option<(usize, usize)>, AffinityError> {
    let mut shape = None;
    for set in views {
        for (k, det) in set.detections.iter().enumerate() {
            if det.index_in_view != k {
                return Err(AffinityError::DimensionMismatch(format!(
                    "view {} detection at position {k} has index {}",
                    set.view_id, det.index_in_view
                )));
            }
            if det.view_id != set.view_id {
                return Err(AffinityError::DimensionMismatch(format!(
                    "detection {} claims view {} inside view {}",
                    det.index_in_view, det.view_id, set.view_id
                )));
            }
            if det.descriptor.is_empty() || det.descriptor.iter().any(|v| !v.is_finite()) {
                return Err(AffinityError::DimensionMismatch(format!(
                    "view {} detection {}: descriptor must be non-empty and finite",
                    set.view_id, det.index_in_view
                )));
            }
            if det.visible.len() != det.keypoints.len() {
                return Err(AffinityError::DimensionMismatch("visibility mask length".into()));
            }
            let s = (det.n_joints(), det.descriptor.len());
            match shape {
                None => shape = Some(s),
                Some(expected) if expected != s => {
                    return Err(AffinityError::DimensionMismatch(format!(
                        "view {} detection {} has {} joints / descriptor length {}, expected {} / {}",
                        set.view_id, det.index_in_view, s.0, s.1, expected.0, expected.1
                    )))
                }
                _ => {}
            }
        }
    }
    Ok(shape)
}

/// Fills every cross-view block with the fused affinity.
pub fn build_affinity(
    views: &[DetectionSet],
    cams: &[CameraView],
    cfg: &AffinityConfig,
) -> Result<AffinityMatrix, AffinityError> {
    if views.len() != cams.len() {
        return Err(AffinityError::DimensionMismatch(format!(
            "{} detection sets for {} cameras",
            views.len(),
            cams.len()
        )));
    }
    for (v, (set, cam)) in views.iter().zip(cams).enumerate() {
        if set.view_id != v || cam.id() != v {
            return Err(AffinityError::DimensionMismatch(format!(
                "view {v}: detection set is view {} and camera is {}",
                set.view_id,
                cam.id()
            )));
        }
    }
    check_consistency(views)?;

    let partition = Partition::new(views.iter().map(|s| s.detections.len()).collect());
    let m = partition.m();
    let mut values = DMatrix::<f64>::zeros(m, m);
    for vi in 0..views.len() {
        for vj in vi + 1..views.len() {
            if views[vi].detections.is_empty() || views[vj].detections.is_empty() {
                continue;
            }
            let f_ij = fundamental_matrix(&cams[vi], &cams[vj])?;
            let f_ji = fundamental_matrix(&cams[vj], &cams[vi])?;
            for a in &views[vi].detections {
                for b in &views[vj].detections {
                    let d_g = geometric_distance(a, b, &f_ij, &f_ji);
                    let app = appearance_affinity(&a.descriptor, &b.descriptor, &cfg.scale)?;
                    let geo = geometric_affinity(d_g, &cfg.scale);
                    let value = fused_affinity(app, geo, d_g, cfg.th);
                    let gi = partition.global(vi, a.index_in_view);
                    let gj = partition.global(vj, b.index_in_view);
                    values[(gi, gj)] = value;
                    values[(gj, gi)] = value;
                }
            }
        }
    }
    Ok(AffinityMatrix { values, partition })
}
