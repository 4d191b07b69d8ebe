//! Synthetic multi-camera scenes with known ground truth, plus the
//! evaluation metrics used against them.

use std::f64::consts::TAU;

use nalgebra::{Rotation3, Vector2, Vector3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::affinity::{Detection, DetectionSet, Keypoint, DEFAULT_SCORE_FLOOR};
use crate::geometry::{look_at_camera, project, CameraView};
use crate::matching::PersonCluster;
use crate::pose3d::{HeatmapConfig, HeatmapModel, Pose3D, SkeletonPrior};

/// Probability that a keypoint of a true detection is dropped (low score).
pub const JOINT_DROPOUT: f64 = 0.1;

pub const IMAGE_SIZE: (u32, u32) = (1920, 1080);
pub const FOCAL_PX: f64 = 1100.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GenError {
    #[error("invalid scene config: {0}")]
    ConfigInvalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub n_people: usize,
    pub n_views: usize,
    /// Radius of the camera circle in world units (meters).
    pub rig_radius: f64,
    pub keypoint_noise_px: f64,
    pub descriptor_dim: usize,
    /// Expected norm of the descriptor noise vector.
    pub descriptor_noise: f64,
    /// Norm of each identity embedding.
    pub identity_separation: f64,
    pub miss_rate: f64,
    /// Probability that a view receives one false detection.
    pub false_rate: f64,
    pub rng_seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            n_people: 3,
            n_views: 4,
            rig_radius: 6.0,
            keypoint_noise_px: 0.0,
            descriptor_dim: 16,
            descriptor_noise: 0.1,
            identity_separation: 4.0,
            miss_rate: 0.0,
            false_rate: 0.0,
            rng_seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<(), GenError> {
        let bad = |msg: String| Err(GenError::ConfigInvalid(msg));
        if self.n_views < 2 {
            return bad(format!("n_views must be at least 2, got {}", self.n_views));
        }
        for (name, r) in [("miss_rate", self.miss_rate), ("false_rate", self.false_rate)] {
            if !(0.0..=1.0).contains(&r) {
                return bad(format!("{name} = {r} outside [0,1]"));
            }
        }
        if !(self.rig_radius > 1.0 && self.rig_radius.is_finite()) {
            return bad(format!("rig_radius must exceed 1, got {}", self.rig_radius));
        }
        if self.descriptor_dim == 0 {
            return bad("descriptor_dim must be positive".into());
        }
        for (name, v) in [
            ("keypoint_noise_px", self.keypoint_noise_px),
            ("descriptor_noise", self.descriptor_noise),
            ("identity_separation", self.identity_separation),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and non-negative"));
            }
        }
        Ok(())
    }
}

/// Who each detection really is.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Person(usize),
    FalsePositive,
}

impl Label {
    pub fn person(self) -> Option<usize> {
        match self {
            Label::Person(p) => Some(p),
            Label::FalsePositive => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub cameras: Vec<CameraView>,
    pub poses3d: Vec<Vec<Vector3<f64>>>,
    /// `labels[view][index]`.
    pub labels: Vec<Vec<Label>>,
    /// Noise-free projection of every keypoint of every detection.
    pub clean_keypoints: Vec<Vec<Vec<Vector2<f64>>>>,
}

impl GroundTruth {
    pub fn n_false(&self) -> usize {
        self.labels.iter().flatten().filter(|l| **l == Label::FalsePositive).count()
    }
}

/// A generated frame: ground truth, detector output and heatmaps.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub truth: GroundTruth,
    pub detections: Vec<DetectionSet>,
    pub heatmaps: HeatmapModel,
}

/// Canonical bone directions for the COCO tree, body frame with `+x` to the
/// person's left, `+y` forward and `+z` up. Indexed like `SkeletonPrior::coco17` edges.
fn coco_directions() -> [Vector3<f64>; 16] {
    let v = |x: f64, y: f64, z: f64| Vector3::new(x, y, z).normalize();
    [
        v(0.45, -0.3, 0.85),
        v(-0.45, -0.3, 0.85),
        v(0.7, -0.7, 0.1),
        v(-0.7, -0.7, 0.1),
        v(0.6, -0.3, -0.75),
        v(-0.6, -0.3, -0.75),
        v(0.15, 0.0, -1.0),
        v(0.1, 0.2, -1.0),
        v(-0.15, 0.0, -1.0),
        v(-0.1, 0.2, -1.0),
        v(-0.15, 0.0, -1.0),
        v(0.15, 0.0, -1.0),
        v(0.0, 0.05, -1.0),
        v(0.0, -0.05, -1.0),
        v(0.0, 0.05, -1.0),
        v(0.0, -0.05, -1.0),
    ]
}

/// Bone direction for edges the COCO table does not cover.
fn fallback_direction(edge: usize) -> Vector3<f64> {
    let a = edge as f64 * 2.399_963;
    Vector3::new(0.3 * a.cos(), 0.3 * a.sin(), -1.0).normalize()
}

fn perturb(dir: Vector3<f64>, sigma: f64, rng: &mut ChaCha8Rng) -> Vector3<f64> {
    let n: f64 = StandardNormal.sample(rng);
    let m: f64 = StandardNormal.sample(rng);
    let k: f64 = StandardNormal.sample(rng);
    (dir + Vector3::new(n, m, k) * sigma).normalize()
}

/// Samples a standing skeleton with feet on the floor, centered on `position`.
fn sample_skeleton(prior: &SkeletonPrior, position: Vector2<f64>, rng: &mut ChaCha8Rng) -> Vec<Vector3<f64>> {
    let coco = prior.n_joints == 17 && prior.edges == SkeletonPrior::coco17().edges;
    let dirs = coco_directions();
    let scale = rng.random_range(0.92..1.08);
    let tree = prior.rooted(0);
    let mut joints = vec![Vector3::zeros(); prior.n_joints];
    for &j in &tree.order {
        let Some((parent, edge)) = tree.parent[j] else {
            continue;
        };
        let (a, _) = prior.edges[edge];
        let mut dir = if coco { dirs[edge] } else { fallback_direction(edge) };
        // Directions are stored from the edge's first joint.
        if a != parent {
            dir = -dir;
        }
        let limb = coco && [6, 7, 8, 9, 12, 13, 14, 15].contains(&edge);
        dir = perturb(dir, if limb { 0.25 } else { 0.05 }, rng);
        let noise: f64 = StandardNormal.sample(rng);
        let length =
            (prior.bone_mean[edge] * scale + 0.5 * prior.bone_std[edge] * noise).max(0.2 * prior.bone_mean[edge]);
        joints[j] = joints[parent] + dir * length;
    }
    let floor = joints.iter().map(|t| t.z).fold(f64::INFINITY, f64::min);
    let yaw = Rotation3::from_axis_angle(&Vector3::z_axis(), rng.random_range(0.0..TAU));
    let center: Vector3<f64> = joints.iter().sum::<Vector3<f64>>() / joints.len() as f64;
    joints
        .iter()
        .map(|t| {
            let local = Vector3::new(t.x - center.x, t.y - center.y, t.z - floor);
            yaw * local + Vector3::new(position.x, position.y, 0.0)
        })
        .collect()
}

fn unit_embedding(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-9 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn in_image(x: &Vector2<f64>) -> bool {
    let (w, h) = IMAGE_SIZE;
    x.x >= 0.0 && x.y >= 0.0 && x.x < f64::from(w) && x.y < f64::from(h)
}

struct RawDetection {
    label: Label,
    keypoints: Vec<Keypoint>,
    clean: Vec<Vector2<f64>>,
    descriptor: Vec<f64>,
}

/// Generates a scene with the default COCO skeleton prior.
pub fn generate(cfg: &SceneConfig) -> Result<Scene, GenError> {
    generate_with_prior(cfg, &SkeletonPrior::coco17())
}

pub fn generate_with_prior(cfg: &SceneConfig, prior: &SkeletonPrior) -> Result<Scene, GenError> {
    cfg.validate()?;
    prior.validate().map_err(|e| GenError::ConfigInvalid(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);

    let target = Vector3::new(0.0, 0.0, 1.0);
    let phase = rng.random_range(0.0..TAU);
    let cameras: Vec<CameraView> = (0..cfg.n_views)
        .map(|v| {
            let angle = phase + TAU * v as f64 / cfg.n_views as f64 + rng.random_range(-0.15..0.15);
            let height = rng.random_range(2.2..2.8);
            let center = Vector3::new(cfg.rig_radius * angle.cos(), cfg.rig_radius * angle.sin(), height);
            look_at_camera(v, FOCAL_PX, IMAGE_SIZE, center, target).expect("rig cameras are valid")
        })
        .collect();

    // People inside the rig, pairwise at least `min_sep` apart.
    let area = 0.4 * cfg.rig_radius;
    let mut min_sep: f64 = 1.0;
    let mut positions: Vec<Vector2<f64>> = Vec::new();
    let mut attempts = 0;
    while positions.len() < cfg.n_people {
        let r = area * rng.random::<f64>().sqrt();
        let a = rng.random_range(0.0..TAU);
        let p = Vector2::new(r * a.cos(), r * a.sin());
        if positions.iter().all(|q| (p - q).norm() >= min_sep) {
            positions.push(p);
        }
        attempts += 1;
        if attempts % 2000 == 0 {
            min_sep *= 0.9;
        }
    }
    let poses3d: Vec<Vec<Vector3<f64>>> = positions.iter().map(|p| sample_skeleton(prior, *p, &mut rng)).collect();
    let identities: Vec<Vec<f64>> = (0..cfg.n_people)
        .map(|_| {
            unit_embedding(cfg.descriptor_dim, &mut rng).into_iter().map(|x| x * cfg.identity_separation).collect()
        })
        .collect();

    let pixel_noise = Normal::new(0.0, cfg.keypoint_noise_px.max(0.0)).expect("finite sigma");
    let desc_noise = Normal::new(0.0, cfg.descriptor_noise / (cfg.descriptor_dim as f64).sqrt()).expect("finite sigma");
    let garbage = Normal::new(0.0, 30.0).expect("finite sigma");

    let mut detections = Vec::with_capacity(cfg.n_views);
    let mut labels = Vec::with_capacity(cfg.n_views);
    let mut clean_keypoints = Vec::with_capacity(cfg.n_views);
    for cam in &cameras {
        let mut raw: Vec<RawDetection> = Vec::new();
        let mut observe = |joints: &[Vector3<f64>], label: Label, identity: &[f64], rng: &mut ChaCha8Rng| {
            let mut keypoints = Vec::with_capacity(joints.len());
            let mut clean = Vec::with_capacity(joints.len());
            for t in joints {
                let x = project(cam, t).unwrap_or_else(|_| Vector2::new(-1.0, -1.0));
                clean.push(x);
                let noisy = x + Vector2::new(pixel_noise.sample(rng), pixel_noise.sample(rng));
                let kp = if !in_image(&x) {
                    Keypoint { x: noisy.x, y: noisy.y, score: 0.0 }
                } else if rng.random::<f64>() < JOINT_DROPOUT {
                    Keypoint {
                        x: noisy.x + garbage.sample(rng),
                        y: noisy.y + garbage.sample(rng),
                        score: rng.random_range(0.0..0.15),
                    }
                } else {
                    Keypoint { x: noisy.x, y: noisy.y, score: rng.random_range(0.5..1.0) }
                };
                keypoints.push(kp);
            }
            let descriptor = identity.iter().map(|x| x + desc_noise.sample(rng)).collect();
            raw.push(RawDetection { label, keypoints, clean, descriptor });
        };
        for (p, pose) in poses3d.iter().enumerate() {
            if rng.random::<f64>() < cfg.miss_rate {
                continue;
            }
            observe(pose, Label::Person(p), &identities[p], &mut rng);
        }
        if rng.random::<f64>() < cfg.false_rate {
            let r = 0.6 * cfg.rig_radius * rng.random::<f64>().sqrt();
            let a = rng.random_range(0.0..TAU);
            let pose = sample_skeleton(prior, Vector2::new(r * a.cos(), r * a.sin()), &mut rng);
            let identity: Vec<f64> =
                unit_embedding(cfg.descriptor_dim, &mut rng).into_iter().map(|x| x * cfg.identity_separation).collect();
            observe(&pose, Label::FalsePositive, &identity, &mut rng);
        }
        raw.shuffle(&mut rng);

        let view = cam.id();
        let mut set = DetectionSet { view_id: view, detections: Vec::with_capacity(raw.len()) };
        let mut view_labels = Vec::with_capacity(raw.len());
        let mut view_clean = Vec::with_capacity(raw.len());
        for (index, r) in raw.into_iter().enumerate() {
            let bbox = bounding_box(&r.keypoints);
            set.detections.push(Detection::new(view, index, bbox, r.keypoints, r.descriptor, DEFAULT_SCORE_FLOOR));
            view_labels.push(r.label);
            view_clean.push(r.clean);
        }
        detections.push(set);
        labels.push(view_labels);
        clean_keypoints.push(view_clean);
    }

    let heatmaps =
        HeatmapModel::from_detections(&detections, &HeatmapConfig::default()).expect("default heatmap config is valid");
    Ok(Scene { truth: GroundTruth { cameras, poses3d, labels, clean_keypoints }, detections, heatmaps })
}

fn bounding_box(keypoints: &[Keypoint]) -> [f64; 4] {
    let visible: Vec<&Keypoint> = keypoints.iter().filter(|k| k.score >= DEFAULT_SCORE_FLOOR).collect();
    let pts = if visible.is_empty() { keypoints.iter().collect() } else { visible };
    let (mut x0, mut y0, mut x1, mut y1) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for k in pts {
        x0 = x0.min(k.x);
        y0 = y0.min(k.y);
        x1 = x1.max(k.x);
        y1 = y1.max(k.y);
    }
    let margin = 0.1 * (x1 - x0).max(y1 - y0);
    [x0 - margin, y0 - margin, x1 - x0 + 2.0 * margin, y1 - y0 + 2.0 * margin]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Pairwise precision/recall over all cross-view detection pairs.
///
/// With no predicted (or no true) pairs, precision (or recall) is 1.
pub fn matching_f1(clusters: &[PersonCluster], gt: &GroundTruth) -> MatchScore {
    let mut cluster_of: Vec<Vec<Option<usize>>> = gt.labels.iter().map(|l| vec![None; l.len()]).collect();
    for c in clusters {
        for m in &c.members {
            if let Some(slot) = cluster_of.get_mut(m.view).and_then(|v| v.get_mut(m.index)) {
                *slot = Some(c.cluster_id);
            }
        }
    }
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for vi in 0..gt.labels.len() {
        for vj in vi + 1..gt.labels.len() {
            for a in 0..gt.labels[vi].len() {
                for b in 0..gt.labels[vj].len() {
                    let predicted = matches!((cluster_of[vi][a], cluster_of[vj][b]), (Some(x), Some(y)) if x == y);
                    let truth =
                        matches!((gt.labels[vi][a].person(), gt.labels[vj][b].person()), (Some(x), Some(y)) if x == y);
                    match (predicted, truth) {
                        (true, true) => tp += 1,
                        (true, false) => fp += 1,
                        (false, true) => fn_ += 1,
                        _ => {}
                    }
                }
            }
        }
    }
    let precision = if tp + fp == 0 { 1.0 } else { tp as f64 / (tp + fp) as f64 };
    let recall = if tp + fn_ == 0 { 1.0 } else { tp as f64 / (tp + fn_) as f64 };
    let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
    MatchScore { precision, recall, f1 }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcpReport {
    /// One entry per ground-truth person; 0 when no estimate was assigned.
    pub per_person: Vec<f64>,
    pub average: f64,
    /// Estimate index assigned to each ground-truth person.
    pub assignment: Vec<Option<usize>>,
}

fn mean_joint_distance(a: &[Vector3<f64>], b: &[Vector3<f64>]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).norm()).sum::<f64>() / a.len().max(1) as f64
}

/// Percentage of correct parts: a part is correct when both endpoints lie
/// within `alpha` times the true part length of their true positions.
///
/// Estimates are assigned to ground-truth people greedily by smallest mean
/// joint distance, each person and estimate used at most once.
pub fn pcp(estimated: &[Pose3D], gt_poses: &[Vec<Vector3<f64>>], edges: &[(usize, usize)], alpha: f64) -> PcpReport {
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (e, est) in estimated.iter().enumerate() {
        for (g, truth) in gt_poses.iter().enumerate() {
            if est.joints.len() == truth.len() {
                pairs.push((mean_joint_distance(&est.joints, truth), e, g));
            }
        }
    }
    pairs.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
    let mut assignment = vec![None; gt_poses.len()];
    let mut used = vec![false; estimated.len()];
    for (_, e, g) in pairs {
        if assignment[g].is_none() && !used[e] {
            assignment[g] = Some(e);
            used[e] = true;
        }
    }
    let per_person: Vec<f64> = gt_poses
        .iter()
        .zip(&assignment)
        .map(|(truth, est)| {
            let Some(e) = est else {
                return 0.0;
            };
            let joints = &estimated[*e].joints;
            if edges.is_empty() {
                return 1.0;
            }
            let correct = edges
                .iter()
                .filter(|&&(i, j)| {
                    let length = (truth[i] - truth[j]).norm();
                    (joints[i] - truth[i]).norm() <= alpha * length && (joints[j] - truth[j]).norm() <= alpha * length
                })
                .count();
            correct as f64 / edges.len() as f64
        })
        .collect();
    let average = if per_person.is_empty() { 1.0 } else { per_person.iter().sum::<f64>() / per_person.len() as f64 };
    PcpReport { per_person, average, assignment }
}

/// Mean Euclidean joint error of assigned estimates (by the PCP assignment).
pub fn mean_joint_error(
    estimated: &[Pose3D],
    gt_poses: &[Vec<Vector3<f64>>],
    assignment: &[Option<usize>],
) -> Option<f64> {
    let errors: Vec<f64> = assignment
        .iter()
        .zip(gt_poses)
        .filter_map(|(a, truth)| a.map(|e| mean_joint_distance(&estimated[e].joints, truth)))
        .collect();
    (!errors.is_empty()).then(|| errors.iter().sum::<f64>() / errors.len() as f64)
}
