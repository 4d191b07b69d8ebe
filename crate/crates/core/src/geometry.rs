//! Calibrated pinhole camera math: projection, fundamental matrices,
//! epipolar lines and linear (DLT) triangulation.
//!
//! Cameras are plain 3×4 projection matrices in pixel units. Nothing here
//! decomposes them into intrinsics and extrinsics; the camera center is the
//! right null vector of the projection matrix.

use nalgebra::{DMatrix, Matrix3, Matrix3x4, Vector2, Vector3, Vector4};
use thiserror::Error;

/// Singular-value ratio below which a projection matrix is treated as rank deficient.
const RANK_TOL: f64 = 1e-12;

/// Camera centers closer than this (relative to their magnitude) are coincident.
const COINCIDENT_TOL: f64 = 1e-9;

/// Relative gap between the two smallest DLT singular values that signals near-parallel rays.
const ILL_CONDITIONED_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("projection matrix of camera {0} does not have rank 3")]
    RankDeficient(usize),
    #[error("camera {0} has its center at infinity")]
    CenterAtInfinity(usize),
    #[error("point is behind or on the principal plane of camera {0}")]
    NonPositiveDepth(usize),
    #[error("non-finite input")]
    NonFinite,
    #[error("cameras {0} and {1} share a center; epipolar geometry is undefined")]
    CoincidentCenters(usize, usize),
    #[error("point maps to the epipole; epipolar line is degenerate")]
    DegenerateLine,
    #[error("triangulation needs at least 2 observations, got {0}")]
    TooFewObservations(usize),
    #[error("triangulation is ill-conditioned (near-parallel rays)")]
    IllConditioned,
}

/// A calibrated projective camera.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraView {
    id: usize,
    projection: Matrix3x4<f64>,
    center: Vector3<f64>,
    image_size: (u32, u32),
}

impl CameraView {
    /// Builds a camera from its projection matrix, deriving the center from
    /// the matrix null space.
    pub fn new(id: usize, projection: Matrix3x4<f64>, image_size: (u32, u32)) -> Result<Self, GeometryError> {
        if projection.iter().any(|v| !v.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        let sv = projection.singular_values();
        let smax = sv.max();
        if !(smax > 0.0) || sv.min() <= RANK_TOL * smax {
            return Err(GeometryError::RankDeficient(id));
        }
        // Right null vector via signed 3×3 minors (cofactor expansion).
        let minor = |skip: usize| {
            let cols: Vec<usize> = (0..4).filter(|&c| c != skip).collect();
            Matrix3::from_fn(|r, c| projection[(r, cols[c])]).determinant()
        };
        let null = Vector4::new(minor(0), -minor(1), minor(2), -minor(3));
        if null[3].abs() <= RANK_TOL * null.norm() {
            return Err(GeometryError::CenterAtInfinity(id));
        }
        let center = Vector3::new(null[0], null[1], null[2]) / null[3];
        Ok(Self { id, projection, center, image_size })
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn projection(&self) -> &Matrix3x4<f64> {
        &self.projection
    }

    pub fn center(&self) -> &Vector3<f64> {
        &self.center
    }

    pub fn image_size(&self) -> (u32, u32) {
        self.image_size
    }

    /// Image diagonal in pixels.
    pub fn diagonal(&self) -> f64 {
        let (w, h) = self.image_size;
        (f64::from(w).powi(2) + f64::from(h).powi(2)).sqrt()
    }

    /// Signed depth of a point along the principal axis, positive in front.
    pub fn depth(&self, point: &Vector3<f64>) -> f64 {
        let m = self.projection.fixed_view::<3, 3>(0, 0);
        let w = (self.projection * point.push(1.0))[2];
        let m3 = m.row(2).norm();
        w * m.determinant().signum() / m3
    }
}

/// Line `a x + b y + c = 0` in pixel coordinates with `a² + b² = 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpipolarLine {
    coeffs: Vector3<f64>,
}

impl EpipolarLine {
    /// `(a, b, c)`, normalized so that `(a, b)` is a unit vector whose first
    /// non-zero component is positive.
    pub fn coeffs(&self) -> &Vector3<f64> {
        &self.coeffs
    }
}

/// Projects a world point to pixel coordinates.
pub fn project(cam: &CameraView, point: &Vector3<f64>) -> Result<Vector2<f64>, GeometryError> {
    if point.iter().any(|v| !v.is_finite()) {
        return Err(GeometryError::NonFinite);
    }
    if !(cam.depth(point) > 0.0) {
        return Err(GeometryError::NonPositiveDepth(cam.id));
    }
    let h = cam.projection * point.push(1.0);
    Ok(Vector2::new(h[0] / h[2], h[1] / h[2]))
}

fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v[2], v[1], v[2], 0.0, -v[0], -v[1], v[0], 0.0)
}

/// Fundamental matrix `F` with `x_iᵀ F x_j = 0` for corresponding pixels,
/// scaled to unit Frobenius norm.
///
/// `F · homog(x_j)` is the epipolar line of `x_j` in image `i`.
pub fn fundamental_matrix(cam_i: &CameraView, cam_j: &CameraView) -> Result<Matrix3<f64>, GeometryError> {
    let scale = cam_i.center.norm().max(cam_j.center.norm()).max(1.0);
    if (cam_i.center - cam_j.center).norm() <= COINCIDENT_TOL * scale {
        return Err(GeometryError::CoincidentCenters(cam_i.id, cam_j.id));
    }
    let pj = &cam_j.projection;
    let gram = pj * pj.transpose();
    let gram_inv = gram.try_inverse().ok_or(GeometryError::RankDeficient(cam_j.id))?;
    let pj_pinv = pj.transpose() * gram_inv;
    let epipole = cam_i.projection * cam_j.center.push(1.0);
    let f = skew(&epipole) * cam_i.projection * pj_pinv;
    let norm = f.norm();
    if !(norm > 0.0) {
        return Err(GeometryError::CoincidentCenters(cam_i.id, cam_j.id));
    }
    Ok(f / norm)
}

/// Epipolar line `F · homog(x)`, normalized to a Euclidean point-line metric.
pub fn epipolar_line(f: &Matrix3<f64>, x: &Vector2<f64>) -> Result<EpipolarLine, GeometryError> {
    let xh = x.push(1.0);
    let mut l = f * xh;
    let ab = l[0].hypot(l[1]);
    if !ab.is_finite() || ab <= 1e-12 * f.norm() * xh.norm() {
        return Err(GeometryError::DegenerateLine);
    }
    l /= ab;
    if l[0] < 0.0 || (l[0] == 0.0 && l[1] < 0.0) {
        l = -l;
    }
    Ok(EpipolarLine { coeffs: l })
}

/// Euclidean distance from a pixel to a normalized line.
pub fn point_line_distance(x: &Vector2<f64>, line: &EpipolarLine) -> f64 {
    let l = &line.coeffs;
    (l[0] * x[0] + l[1] * x[1] + l[2]).abs()
}

/// Linear triangulation from two or more calibrated observations.
///
/// Each pixel is first mapped to coordinates normalized by the image
/// diagonal (and the matching transform applied to its camera), then every
/// DLT row is scaled to unit norm. The solution is the right singular
/// vector of the smallest singular value.
pub fn triangulate(observations: &[(&CameraView, Vector2<f64>)]) -> Result<Vector3<f64>, GeometryError> {
    let n = observations.len();
    if n < 2 {
        return Err(GeometryError::TooFewObservations(n));
    }
    let mut a = DMatrix::<f64>::zeros(2 * n, 4);
    for (k, (cam, x)) in observations.iter().enumerate() {
        if x.iter().any(|v| !v.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        let (w, h) = cam.image_size;
        let (cx, cy) = (f64::from(w) / 2.0, f64::from(h) / 2.0);
        let d = cam.diagonal().max(1.0);
        let t = Matrix3::new(1.0 / d, 0.0, -cx / d, 0.0, 1.0 / d, -cy / d, 0.0, 0.0, 1.0);
        let p = t * cam.projection;
        let u = (x[0] - cx) / d;
        let v = (x[1] - cy) / d;
        let r0 = p.row(2) * u - p.row(0);
        let r1 = p.row(2) * v - p.row(1);
        for (i, row) in [r0, r1].iter().enumerate() {
            let norm = row.norm();
            let scaled = if norm > 0.0 { row / norm } else { *row };
            a.row_mut(2 * k + i).copy_from(&scaled);
        }
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t.ok_or(GeometryError::IllConditioned)?;
    // nalgebra does not sort singular values; order them explicitly.
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let s = |k: usize| svd.singular_values[order[k]];
    if s(2) - s(3) <= ILL_CONDITIONED_TOL * s(0) {
        return Err(GeometryError::IllConditioned);
    }
    let x = v_t.row(order[3]);
    if x[3].abs() <= 1e-12 * x.norm() {
        return Err(GeometryError::IllConditioned);
    }
    let point = Vector3::new(x[0] / x[3], x[1] / x[3], x[2] / x[3]);
    if point.iter().any(|v| !v.is_finite()) {
        return Err(GeometryError::IllConditioned);
    }
    Ok(point)
}

/// Builds `K [R | -R c]` for a camera at `center` looking at `target`, with
/// world `+z` up and image `y` pointing down.
pub fn look_at_camera(
    id: usize,
    focal_px: f64,
    image_size: (u32, u32),
    center: Vector3<f64>,
    target: Vector3<f64>,
) -> Result<CameraView, GeometryError> {
    let forward = (target - center).normalize();
    let up = Vector3::z();
    let right = forward.cross(&up);
    if right.norm() < 1e-9 {
        return Err(GeometryError::RankDeficient(id));
    }
    let right = right.normalize();
    let down = forward.cross(&right);
    let r = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
    let t = -r * center;
    let (w, h) = image_size;
    let k = Matrix3::new(focal_px, 0.0, f64::from(w) / 2.0, 0.0, focal_px, f64::from(h) / 2.0, 0.0, 0.0, 1.0);
    let mut rt = Matrix3x4::zeros();
    rt.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
    rt.set_column(3, &t);
    CameraView::new(id, k * rt, image_size)
}
