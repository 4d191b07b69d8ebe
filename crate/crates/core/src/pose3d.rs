//! Per-person 3D reconstruction from a cluster of matched 2D poses.
//!
//! Two reconstructions are offered: plain multi-view triangulation of each
//! joint, and a pictorial-structure MAP estimate whose state space per joint
//! is the set of points triangulated from every pair of views. The latter
//! is solved exactly by max-product on the skeleton tree.

use std::collections::VecDeque;

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::affinity::DetectionSet;
use crate::geometry::{project, triangulate, CameraView};
use crate::matching::PersonCluster;

/// Proposals closer than this (world units) are merged.
pub const DEDUP_RADIUS: f64 = 0.01;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PoseError {
    #[error("invalid skeleton: {0}")]
    InvalidSkeleton(String),
    #[error("cluster has no members")]
    EmptyCluster,
    #[error("cluster needs at least 2 members, got {0}")]
    TooFewMembers(usize),
    #[error("no joint could be reconstructed")]
    AllJointsUnresolved,
    #[error("cluster references missing detection (view {0}, index {1})")]
    UnknownMember(usize, usize),
    #[error("skeleton has {expected} joints but detections have {found}")]
    JointCountMismatch { expected: usize, found: usize },
    #[error("invalid heatmap model: {0}")]
    InvalidHeatmap(String),
}

/// Tree-structured bone-length prior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkeletonPrior {
    pub n_joints: usize,
    pub edges: Vec<(usize, usize)>,
    pub bone_mean: Vec<f64>,
    pub bone_std: Vec<f64>,
}

/// COCO keypoint order used by the default skeleton.
pub const COCO_JOINTS: [&str; 17] = [
    "nose",
    "left_eye",
    "right_eye",
    "left_ear",
    "right_ear",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
    "left_hip",
    "right_hip",
    "left_knee",
    "right_knee",
    "left_ankle",
    "right_ankle",
];

impl SkeletonPrior {
    pub fn new(
        n_joints: usize,
        edges: Vec<(usize, usize)>,
        bone_mean: Vec<f64>,
        bone_std: Vec<f64>,
    ) -> Result<Self, PoseError> {
        let prior = Self { n_joints, edges, bone_mean, bone_std };
        prior.validate()?;
        Ok(prior)
    }

    pub fn validate(&self) -> Result<(), PoseError> {
        let bad = |msg: String| Err(PoseError::InvalidSkeleton(msg));
        if self.n_joints == 0 {
            return bad("no joints".into());
        }
        if self.edges.len() + 1 != self.n_joints {
            return bad(format!("{} edges for {} joints", self.edges.len(), self.n_joints));
        }
        if self.bone_mean.len() != self.edges.len() || self.bone_std.len() != self.edges.len() {
            return bad("bone statistics do not match edge count".into());
        }
        if let Some(s) = self.bone_std.iter().find(|s| !(**s > 0.0)) {
            return bad(format!("bone std {s} is not positive"));
        }
        if self.bone_mean.iter().any(|m| !(m.is_finite() && *m >= 0.0)) {
            return bad("bone means must be finite and non-negative".into());
        }
        if let Some(&(a, b)) = self.edges.iter().find(|(a, b)| *a >= self.n_joints || *b >= self.n_joints || a == b) {
            return bad(format!("edge ({a},{b}) is out of range"));
        }
        let tree = self.rooted(0);
        if tree.order.len() != self.n_joints {
            return bad("edges do not connect every joint".into());
        }
        Ok(())
    }

    /// Default 17-joint COCO tree with adult bone lengths in meters.
    pub fn coco17() -> Self {
        let bones: [((usize, usize), f64, f64); 16] = [
            ((0, 1), 0.04, 0.008),
            ((0, 2), 0.04, 0.008),
            ((1, 3), 0.07, 0.012),
            ((2, 4), 0.07, 0.012),
            ((0, 5), 0.26, 0.025),
            ((0, 6), 0.26, 0.025),
            ((5, 7), 0.30, 0.025),
            ((7, 9), 0.26, 0.022),
            ((6, 8), 0.30, 0.025),
            ((8, 10), 0.26, 0.022),
            ((5, 11), 0.52, 0.035),
            ((6, 12), 0.52, 0.035),
            ((11, 13), 0.43, 0.03),
            ((13, 15), 0.42, 0.03),
            ((12, 14), 0.43, 0.03),
            ((14, 16), 0.42, 0.03),
        ];
        Self {
            n_joints: 17,
            edges: bones.iter().map(|b| b.0).collect(),
            bone_mean: bones.iter().map(|b| b.1).collect(),
            bone_std: bones.iter().map(|b| b.2).collect(),
        }
    }

    /// BFS structure of the tree hanging from `root`.
    pub fn rooted(&self, root: usize) -> RootedTree {
        let mut adjacency = vec![Vec::new(); self.n_joints];
        for (e, &(a, b)) in self.edges.iter().enumerate() {
            if a < self.n_joints && b < self.n_joints {
                adjacency[a].push((b, e));
                adjacency[b].push((a, e));
            }
        }
        let mut parent = vec![None; self.n_joints];
        let mut seen = vec![false; self.n_joints];
        let mut order = Vec::with_capacity(self.n_joints);
        let mut queue = VecDeque::from([root]);
        seen[root] = true;
        while let Some(j) = queue.pop_front() {
            order.push(j);
            for &(k, e) in &adjacency[j] {
                if !seen[k] {
                    seen[k] = true;
                    parent[k] = Some((j, e));
                    queue.push_back(k);
                }
            }
        }
        RootedTree { root, order, parent }
    }
}

/// Skeleton tree with a chosen root, in breadth-first order.
#[derive(Debug, Clone, PartialEq)]
pub struct RootedTree {
    pub root: usize,
    pub order: Vec<usize>,
    /// `(parent joint, edge index)` for every non-root joint.
    pub parent: Vec<Option<(usize, usize)>>,
}

/// Isotropic Gaussian stand-in for a detector heatmap around one keypoint.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JointHeatmap {
    pub mode: Vector2<f64>,
    pub sigma_px: f64,
    pub peak: f64,
    pub floor: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeatmapConfig {
    pub sigma_px: f64,
    pub floor: f64,
}

impl Default for HeatmapConfig {
    fn default() -> Self {
        Self { sigma_px: 8.0, floor: 1e-6 }
    }
}

/// Heatmaps for every view, detection and joint.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapModel {
    maps: Vec<Vec<Vec<JointHeatmap>>>,
}

impl HeatmapModel {
    /// One heatmap per keypoint, peaked at the keypoint with height equal to
    /// its detector score.
    pub fn from_detections(views: &[DetectionSet], cfg: &HeatmapConfig) -> Result<Self, PoseError> {
        if !(cfg.sigma_px > 0.0) || !(cfg.floor > 0.0 && cfg.floor < 1.0) {
            return Err(PoseError::InvalidHeatmap(format!("sigma_px = {}, floor = {}", cfg.sigma_px, cfg.floor)));
        }
        let maps = views
            .iter()
            .map(|set| {
                set.detections
                    .iter()
                    .map(|det| {
                        det.keypoints
                            .iter()
                            .map(|k| JointHeatmap {
                                mode: k.position(),
                                sigma_px: cfg.sigma_px,
                                peak: k.score.clamp(2.0 * cfg.floor, 1.0),
                                floor: cfg.floor,
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect();
        Ok(Self { maps })
    }

    pub fn get(&self, view: usize, detection: usize, joint: usize) -> Option<&JointHeatmap> {
        self.maps.get(view)?.get(detection)?.get(joint)
    }
}

/// Reconstructed 3D pose of one person.
#[derive(Debug, Clone, PartialEq)]
pub struct Pose3D {
    pub joints: Vec<Vector3<f64>>,
    /// Views whose observations produced each joint; empty when imputed.
    pub source_views: Vec<Vec<usize>>,
    /// Joints without a two-view estimate, filled in from the prior.
    pub unresolved: Vec<usize>,
    pub log_posterior: Option<f64>,
}

/// A candidate location for one joint.
#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    pub point: Vector3<f64>,
    pub views: Vec<usize>,
}

struct Observation<'a> {
    view: usize,
    index: usize,
    cam: &'a CameraView,
    pixel: Vector2<f64>,
}

fn check_members(cluster: &PersonCluster, views: &[DetectionSet], cams: &[CameraView]) -> Result<usize, PoseError> {
    if cluster.members.is_empty() {
        return Err(PoseError::EmptyCluster);
    }
    let mut n_joints = None;
    for m in &cluster.members {
        let det = views
            .get(m.view)
            .and_then(|s| s.detections.get(m.index))
            .filter(|_| m.view < cams.len())
            .ok_or(PoseError::UnknownMember(m.view, m.index))?;
        match n_joints {
            None => n_joints = Some(det.n_joints()),
            Some(n) if n != det.n_joints() => {
                return Err(PoseError::JointCountMismatch { expected: n, found: det.n_joints() })
            }
            _ => {}
        }
    }
    Ok(n_joints.unwrap_or(0))
}

fn observations<'a>(
    cluster: &PersonCluster,
    views: &[DetectionSet],
    cams: &'a [CameraView],
    joint: usize,
) -> Vec<Observation<'a>> {
    cluster
        .members
        .iter()
        .filter_map(|m| {
            let det = &views[m.view].detections[m.index];
            det.is_visible(joint).then(|| Observation {
                view: m.view,
                index: m.index,
                cam: &cams[m.view],
                pixel: det.keypoints[joint].position(),
            })
        })
        .collect()
}

/// Triangulates each joint from every pair of cluster views that see it.
///
/// An empty list for a joint means it is visible in fewer than two views
/// (or every pair was ill-conditioned); such joints end up unresolved.
pub fn joint_proposals(
    cluster: &PersonCluster,
    views: &[DetectionSet],
    cams: &[CameraView],
) -> Result<Vec<Vec<Proposal>>, PoseError> {
    let n_joints = check_members(cluster, views, cams)?;
    if cluster.members.len() < 2 {
        return Err(PoseError::TooFewMembers(cluster.members.len()));
    }
    let mut out = Vec::with_capacity(n_joints);
    for joint in 0..n_joints {
        let obs = observations(cluster, views, cams, joint);
        let mut proposals: Vec<Proposal> = Vec::new();
        for a in 0..obs.len() {
            for b in a + 1..obs.len() {
                let Ok(point) = triangulate(&[(obs[a].cam, obs[a].pixel), (obs[b].cam, obs[b].pixel)]) else {
                    continue;
                };
                match proposals.iter_mut().find(|p| (p.point - point).norm() < DEDUP_RADIUS) {
                    Some(existing) => {
                        for v in [obs[a].view, obs[b].view] {
                            if !existing.views.contains(&v) {
                                existing.views.push(v);
                            }
                        }
                        existing.views.sort_unstable();
                    }
                    None => proposals.push(Proposal { point, views: vec![obs[a].view, obs[b].view] }),
                }
            }
        }
        out.push(proposals);
    }
    Ok(out)
}

fn log_gaussian_heatmap(t: &Vector3<f64>, cam: &CameraView, map: &JointHeatmap) -> Option<(f64, Vector2<f64>)> {
    let x = project(cam, t).ok()?;
    let r = x - map.mode;
    Some((map.peak.ln() - r.norm_squared() / (2.0 * map.sigma_px * map.sigma_px), r))
}

/// Sum over views of the floored log heatmap value at the projection of `t`.
pub fn unary_log_likelihood(t: &Vector3<f64>, observations: &[(&CameraView, &JointHeatmap)]) -> f64 {
    observations
        .iter()
        .map(|(cam, map)| {
            let floor = map.floor.ln();
            match log_gaussian_heatmap(t, cam, map) {
                Some((v, _)) => v.max(floor),
                None => floor,
            }
        })
        .sum()
}

/// Gradient of the unfloored log likelihood with respect to `t`.
pub fn unary_log_likelihood_gradient(t: &Vector3<f64>, observations: &[(&CameraView, &JointHeatmap)]) -> Vector3<f64> {
    let mut grad = Vector3::zeros();
    for (cam, map) in observations {
        let Some((_, r)) = log_gaussian_heatmap(t, cam, map) else {
            continue;
        };
        let p = cam.projection();
        let h = p * t.push(1.0);
        let (u, v) = (h[0] / h[2], h[1] / h[2]);
        let row = |k: usize| Vector3::new(p[(k, 0)], p[(k, 1)], p[(k, 2)]);
        let du = (row(0) - row(2) * u) / h[2];
        let dv = (row(1) - row(2) * v) / h[2];
        grad -= (du * r[0] + dv * r[1]) / (map.sigma_px * map.sigma_px);
    }
    grad
}

/// Unnormalized log Gaussian on bone length.
pub fn pairwise_log_prior(t_i: &Vector3<f64>, t_j: &Vector3<f64>, mean: f64, std: f64) -> f64 {
    let d = (t_i - t_j).norm() - mean;
    -d * d / (2.0 * std * std)
}

/// Exact MAP assignment on a tree by two-pass max-product.
///
/// `pairwise(edge, parent, parent_state, child, child_state)` scores an
/// edge of the rooted tree. Ties resolve to the lowest state index.
/// Returns the chosen state per joint and the objective value.
pub fn tree_max_product<F>(tree: &RootedTree, unary: &[Vec<f64>], pairwise: F) -> (Vec<usize>, f64)
where
    F: Fn(usize, usize, usize, usize, usize) -> f64,
{
    let n = unary.len();
    let mut belief: Vec<Vec<f64>> = unary.to_vec();
    let mut best_child: Vec<Vec<usize>> = vec![Vec::new(); n];
    for &child in tree.order.iter().rev() {
        let Some((parent, edge)) = tree.parent[child] else {
            continue;
        };
        let mut msg = vec![f64::NEG_INFINITY; unary[parent].len()];
        let mut arg = vec![0; unary[parent].len()];
        for ps in 0..unary[parent].len() {
            for cs in 0..unary[child].len() {
                let v = belief[child][cs] + pairwise(edge, parent, ps, child, cs);
                if v > msg[ps] {
                    msg[ps] = v;
                    arg[ps] = cs;
                }
            }
        }
        for (b, m) in belief[parent].iter_mut().zip(&msg) {
            *b += m;
        }
        best_child[child] = arg;
    }

    let root = tree.root;
    let (mut root_state, mut best) = (0, f64::NEG_INFINITY);
    for (s, &v) in belief[root].iter().enumerate() {
        if v > best {
            best = v;
            root_state = s;
        }
    }
    let mut states = vec![0; n];
    states[root] = root_state;
    for &j in &tree.order {
        if let Some((parent, _)) = tree.parent[j] {
            states[j] = best_child[j][states[parent]];
        }
    }
    (states, best)
}

/// Fills unresolved joints by walking out from resolved ones: each is placed
/// at its parent plus the mean bone length along the parent's own bone
/// direction (world `-z` when the parent has no usable bone).
fn impute_unresolved(
    joints: &mut [Option<Vector3<f64>>],
    prior: &SkeletonPrior,
) -> Result<Vec<Vector3<f64>>, PoseError> {
    let anchor = joints.iter().position(Option::is_some).ok_or(PoseError::AllJointsUnresolved)?;
    let tree = prior.rooted(anchor);
    for &j in &tree.order {
        if joints[j].is_some() {
            continue;
        }
        let (parent, edge) = tree.parent[j].expect("anchor is resolved");
        let tp = joints[parent].expect("parents are filled first");
        let dir = tree.parent[parent]
            .and_then(|(gp, _)| joints[gp])
            .map(|tg| tp - tg)
            .filter(|d| d.norm() > 1e-12)
            .map(|d| d.normalize())
            .unwrap_or(-Vector3::z());
        joints[j] = Some(tp + dir * prior.bone_mean[edge]);
    }
    Ok(joints.iter().map(|j| j.expect("tree spans all joints")).collect())
}

fn check_prior(prior: &SkeletonPrior, n_joints: usize) -> Result<(), PoseError> {
    prior.validate()?;
    if prior.n_joints != n_joints {
        return Err(PoseError::JointCountMismatch { expected: prior.n_joints, found: n_joints });
    }
    Ok(())
}

/// Pictorial-structure MAP estimate over pairwise-triangulated proposals.
pub fn infer_3dps(
    cluster: &PersonCluster,
    views: &[DetectionSet],
    heatmaps: &HeatmapModel,
    cams: &[CameraView],
    prior: &SkeletonPrior,
) -> Result<Pose3D, PoseError> {
    let n_joints = check_members(cluster, views, cams)?;
    check_prior(prior, n_joints)?;
    let proposals = joint_proposals(cluster, views, cams)?;
    if proposals.iter().all(Vec::is_empty) {
        return Err(PoseError::AllJointsUnresolved);
    }

    let mut unary = Vec::with_capacity(n_joints);
    for (joint, props) in proposals.iter().enumerate() {
        if props.is_empty() {
            // Single neutral state so messages pass through.
            unary.push(vec![0.0]);
            continue;
        }
        let obs = observations(cluster, views, cams, joint);
        let mut maps = Vec::with_capacity(obs.len());
        for o in &obs {
            let map = heatmaps.get(o.view, o.index, joint).ok_or(PoseError::UnknownMember(o.view, o.index))?;
            maps.push((o.cam, map));
        }
        unary.push(props.iter().map(|p| unary_log_likelihood(&p.point, &maps)).collect());
    }

    let tree = prior.rooted(0);
    let (states, objective) = tree_max_product(&tree, &unary, |edge, parent, ps, child, cs| {
        match (proposals[parent].get(ps), proposals[child].get(cs)) {
            (Some(a), Some(b)) => pairwise_log_prior(&a.point, &b.point, prior.bone_mean[edge], prior.bone_std[edge]),
            _ => 0.0,
        }
    });

    let mut joints: Vec<Option<Vector3<f64>>> = Vec::with_capacity(n_joints);
    let mut source_views = Vec::with_capacity(n_joints);
    let mut unresolved = Vec::new();
    for (joint, props) in proposals.iter().enumerate() {
        match props.get(states[joint]) {
            Some(p) => {
                joints.push(Some(p.point));
                source_views.push(p.views.clone());
            }
            None => {
                joints.push(None);
                source_views.push(Vec::new());
                unresolved.push(joint);
            }
        }
    }
    Ok(Pose3D {
        joints: impute_unresolved(&mut joints, prior)?,
        source_views,
        unresolved,
        log_posterior: Some(objective),
    })
}

/// Per-joint triangulation over every cluster view where the joint is visible.
pub fn triangulate_pose(
    cluster: &PersonCluster,
    views: &[DetectionSet],
    cams: &[CameraView],
    prior: &SkeletonPrior,
) -> Result<Pose3D, PoseError> {
    let n_joints = check_members(cluster, views, cams)?;
    if cluster.members.len() < 2 {
        return Err(PoseError::TooFewMembers(cluster.members.len()));
    }
    check_prior(prior, n_joints)?;
    let mut joints = Vec::with_capacity(n_joints);
    let mut source_views = Vec::with_capacity(n_joints);
    let mut unresolved = Vec::new();
    for joint in 0..n_joints {
        let obs = observations(cluster, views, cams, joint);
        let pairs: Vec<(&CameraView, Vector2<f64>)> = obs.iter().map(|o| (o.cam, o.pixel)).collect();
        match triangulate(&pairs) {
            Ok(p) => {
                joints.push(Some(p));
                source_views.push(obs.iter().map(|o| o.view).collect());
            }
            Err(_) => {
                joints.push(None);
                source_views.push(Vec::new());
                unresolved.push(joint);
            }
        }
    }
    Ok(Pose3D { joints: impute_unresolved(&mut joints, prior)?, source_views, unresolved, log_posterior: None })
}
