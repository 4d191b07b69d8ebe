//! Frame and batch orchestration: affinity, matching, reconstruction, evaluation.

use std::path::Path;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::affinity::{build_affinity, check_consistency, AffinityError, DetectionSet};
use crate::evalgen::{matching_f1, mean_joint_error, pcp, GroundTruth, Label, MatchScore};
use crate::geometry::CameraView;
use crate::io::{self, FrameDoc, IoError, PersonRecord, ReconstructionMode, RunConfig};
use crate::matching::{
    brute_force_consistent_match, extract_clusters, solve, MatchError, MatchMatrix, MatchProblem, PersonCluster,
};
use crate::pose3d::{infer_3dps, triangulate_pose, HeatmapModel, Pose3D, PoseError, SkeletonPrior};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error(transparent)]
    Affinity(#[from] AffinityError),
    #[error(transparent)]
    Match(#[from] MatchError),
    #[error(transparent)]
    Pose(#[from] PoseError),
    #[error("solver did not converge after {0} iterations")]
    NotConverged(usize),
    #[error("frame {index} ({name})")]
    Frame {
        index: usize,
        name: String,
        #[source]
        source: Box<PipelineError>,
    },
}

impl PipelineError {
    /// Whether the failure comes from malformed or inconsistent input.
    pub fn is_input_error(&self) -> bool {
        match self {
            PipelineError::Io(IoError::Parse(_) | IoError::Schema(_)) | PipelineError::SchemaMismatch(_) => true,
            PipelineError::Affinity(AffinityError::DimensionMismatch(_)) => true,
            PipelineError::Frame { source, .. } => source.is_input_error(),
            _ => false,
        }
    }

    pub fn is_not_converged(&self) -> bool {
        match self {
            PipelineError::NotConverged(_) => true,
            PipelineError::Frame { source, .. } => source.is_not_converged(),
            _ => false,
        }
    }
}

/// One frame of input, optionally with ground truth.
#[derive(Debug, Clone)]
pub struct FrameInput {
    pub name: String,
    pub cameras: Vec<CameraView>,
    pub detections: Vec<DetectionSet>,
    pub truth: Option<GroundTruth>,
}

impl FrameInput {
    /// Loads `calibration.json`, `detections.json` and, when present,
    /// `ground_truth.json` from a scene directory.
    pub fn load_dir(dir: &Path, score_floor: f64) -> Result<Self, IoError> {
        let cameras = io::parse_calibration(&io::read_text(&dir.join(io::CALIBRATION_FILE))?)?;
        let detections = io::parse_detections(&io::read_text(&dir.join(io::DETECTIONS_FILE))?, score_floor)?;
        let gt_path = dir.join(io::GROUND_TRUTH_FILE);
        let truth = if gt_path.exists() {
            Some(io::parse_ground_truth(&io::read_text(&gt_path)?, cameras.clone())?)
        } else {
            None
        };
        Ok(Self { name: dir.display().to_string(), cameras, detections, truth })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StageTimings {
    pub affinity: Duration,
    pub matching: Duration,
    pub reconstruction: Duration,
}

impl StageTimings {
    pub fn total(&self) -> Duration {
        self.affinity + self.matching + self.reconstruction
    }
}

#[derive(Debug, Clone)]
pub struct FrameResult {
    pub matches: MatchMatrix,
    pub clusters: Vec<PersonCluster>,
    /// `(cluster_id, pose)` for every reconstructed cluster.
    pub people: Vec<(usize, Pose3D)>,
    pub timings: StageTimings,
}

impl FrameResult {
    pub fn to_doc(&self, scene: Option<String>) -> FrameDoc {
        FrameDoc {
            schema: Some(io::SCHEMA.to_string()),
            scene,
            clusters: io::clusters_to_records(&self.clusters),
            converged: self.matches.converged,
            iterations: self.matches.iterations,
            people: self.people.iter().map(|(id, p)| PersonRecord::new(*id, p)).collect(),
        }
    }

    pub fn poses(&self) -> Vec<Pose3D> {
        self.people.iter().map(|(_, p)| p.clone()).collect()
    }
}

fn check_frame(
    cfg: &RunConfig,
    prior: &SkeletonPrior,
    cams: &[CameraView],
    views: &[DetectionSet],
) -> Result<(), PipelineError> {
    if cams.len() != views.len() {
        return Err(PipelineError::SchemaMismatch(format!(
            "{} cameras but {} detection views",
            cams.len(),
            views.len()
        )));
    }
    let shape = check_consistency(views).map_err(|e| PipelineError::SchemaMismatch(e.to_string()))?;
    if let Some((n, _)) = shape {
        if n != prior.n_joints {
            return Err(PipelineError::SchemaMismatch(format!(
                "detections have {n} joints but the skeleton prior has {}",
                prior.n_joints
            )));
        }
    }
    if !(cfg.affinity.th >= 0.0) {
        return Err(PipelineError::SchemaMismatch("affinity.th must be non-negative".into()));
    }
    Ok(())
}

/// Matches persons across views and reconstructs each of them.
///
/// Clusters for which no joint is visible in two views produce no pose.
pub fn run_frame(
    cfg: &RunConfig,
    prior: &SkeletonPrior,
    cams: &[CameraView],
    views: &[DetectionSet],
) -> Result<FrameResult, PipelineError> {
    check_frame(cfg, prior, cams, views)?;
    let mut timings = StageTimings::default();

    let start = Instant::now();
    let affinity = build_affinity(views, cams, &cfg.affinity)?;
    timings.affinity = start.elapsed();

    let start = Instant::now();
    let matches = if cfg.oracle {
        brute_force_consistent_match(&affinity)?
    } else {
        solve(&MatchProblem::new(affinity, &cfg.solver)?)?
    };
    if cfg.strict && !matches.converged {
        return Err(PipelineError::NotConverged(matches.iterations));
    }
    let clusters = extract_clusters(&matches.quantized, &matches.partition)?;
    timings.matching = start.elapsed();

    let start = Instant::now();
    let heatmaps = match cfg.mode {
        ReconstructionMode::Pictorial => Some(HeatmapModel::from_detections(views, &cfg.heatmap)?),
        ReconstructionMode::Triangulation => None,
    };
    let mut people = Vec::with_capacity(clusters.len());
    for cluster in &clusters {
        let pose = match &heatmaps {
            Some(h) => infer_3dps(cluster, views, h, cams, prior),
            None => triangulate_pose(cluster, views, cams, prior),
        };
        match pose {
            Ok(p) => people.push((cluster.cluster_id, p)),
            Err(PoseError::AllJointsUnresolved) => {}
            Err(e) => return Err(e.into()),
        }
    }
    timings.reconstruction = start.elapsed();

    Ok(FrameResult { matches, clusters, people, timings })
}

/// Metrics of one frame against its ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameMetrics {
    #[serde(flatten)]
    pub matching: MatchScore,
    pub pcp: f64,
    pub pcp_per_person: Vec<f64>,
    pub mean_joint_error: Option<f64>,
    /// Fraction of injected false detections left out of every cluster.
    pub false_rejection: Option<f64>,
    pub n_clusters: usize,
    pub n_people: usize,
}

pub fn evaluate_frame(
    clusters: &[PersonCluster],
    poses: &[Pose3D],
    truth: &GroundTruth,
    prior: &SkeletonPrior,
    alpha: f64,
) -> FrameMetrics {
    let matching = matching_f1(clusters, truth);
    let report = pcp(poses, &truth.poses3d, &prior.edges, alpha);
    let n_false = truth.n_false();
    let false_rejection = (n_false > 0).then(|| {
        let in_cluster =
            |v: usize, k: usize| clusters.iter().any(|c| c.members.iter().any(|m| m.view == v && m.index == k));
        let rejected = truth
            .labels
            .iter()
            .enumerate()
            .flat_map(|(v, l)| l.iter().enumerate().map(move |(k, l)| (v, k, *l)))
            .filter(|&(v, k, l)| l == Label::FalsePositive && !in_cluster(v, k))
            .count();
        rejected as f64 / n_false as f64
    });
    FrameMetrics {
        matching,
        pcp: report.average,
        pcp_per_person: report.per_person.clone(),
        mean_joint_error: mean_joint_error(poses, &truth.poses3d, &report.assignment),
        false_rejection,
        n_clusters: clusters.len(),
        n_people: truth.poses3d.len(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameEntry {
    #[serde(flatten)]
    pub result: Option<FrameDoc>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metrics: Option<FrameMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub frames: usize,
    pub failed: usize,
    pub evaluated: usize,
    pub mean_precision: Option<f64>,
    pub mean_recall: Option<f64>,
    pub mean_f1: Option<f64>,
    pub mean_pcp: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchDoc {
    pub schema: String,
    pub frames: Vec<FrameEntry>,
    pub aggregate: Aggregate,
}

/// Wall-clock percentiles per stage, in milliseconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub frames: usize,
    pub affinity_ms: [f64; 2],
    pub matching_ms: [f64; 2],
    pub reconstruction_ms: [f64; 2],
    pub total_ms: [f64; 2],
    /// Frames per second of the whole batch, including scheduling.
    pub throughput_fps: f64,
}

/// Nearest-rank percentile of unsorted samples.
pub fn percentile(samples: &[f64], q: f64) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let rank = ((q / 100.0) * s.len() as f64).ceil().max(1.0) as usize;
    s[rank.min(s.len()) - 1]
}

pub struct BatchResult {
    pub frames: Vec<Result<FrameResult, PipelineError>>,
    pub metrics: Vec<Option<FrameMetrics>>,
    pub aggregate: Aggregate,
    pub wall_time: Duration,
}

impl BatchResult {
    pub fn to_doc(&self, inputs: &[FrameInput]) -> BatchDoc {
        let frames = self
            .frames
            .iter()
            .zip(inputs)
            .zip(&self.metrics)
            .map(|((r, input), metrics)| match r {
                Ok(f) => FrameEntry {
                    result: Some(f.to_doc(Some(input.name.clone()))),
                    error: None,
                    metrics: metrics.clone(),
                },
                Err(e) => FrameEntry { result: None, error: Some(format!("{}: {e}", input.name)), metrics: None },
            })
            .collect();
        BatchDoc { schema: io::SCHEMA.to_string(), frames, aggregate: self.aggregate.clone() }
    }

    pub fn timing_report(&self) -> TimingReport {
        let ok: Vec<StageTimings> = self.frames.iter().filter_map(|f| f.as_ref().ok()).map(|f| f.timings).collect();
        TimingReport::from_timings(&ok, self.frames.len(), self.wall_time)
    }
}

impl TimingReport {
    /// Percentiles over `timings`; throughput counts `attempted` frames over `wall_time`.
    pub fn from_timings(timings: &[StageTimings], attempted: usize, wall_time: Duration) -> Self {
        let ms = |f: &dyn Fn(&StageTimings) -> Duration| {
            let v: Vec<f64> = timings.iter().map(|t| f(t).as_secs_f64() * 1e3).collect();
            [percentile(&v, 50.0), percentile(&v, 95.0)]
        };
        let secs = wall_time.as_secs_f64();
        TimingReport {
            frames: timings.len(),
            affinity_ms: ms(&|t| t.affinity),
            matching_ms: ms(&|t| t.matching),
            reconstruction_ms: ms(&|t| t.reconstruction),
            total_ms: ms(&|t| t.total()),
            throughput_fps: if secs > 0.0 { attempted as f64 / secs } else { f64::INFINITY },
        }
    }
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = values.collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Runs every frame on a pool of `workers` threads.
///
/// Results keep input order regardless of scheduling. Without
/// `keep_going`, the first failing frame (in input order) fails the batch.
pub fn run_batch(
    cfg: &RunConfig,
    prior: &SkeletonPrior,
    inputs: &[FrameInput],
    workers: usize,
    keep_going: bool,
) -> Result<BatchResult, PipelineError> {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(workers.max(1)).build().expect("thread pool");
    let start = Instant::now();
    let frames: Vec<Result<FrameResult, PipelineError>> =
        pool.install(|| inputs.par_iter().map(|f| run_frame(cfg, prior, &f.cameras, &f.detections)).collect());
    let wall_time = start.elapsed();

    if !keep_going {
        if let Some((index, _)) = frames.iter().enumerate().find(|(_, r)| r.is_err()) {
            let mut frames = frames;
            let err = frames.swap_remove(index).err().expect("found an error");
            return Err(PipelineError::Frame { index, name: inputs[index].name.clone(), source: Box::new(err) });
        }
    }

    let metrics: Vec<Option<FrameMetrics>> = frames
        .iter()
        .zip(inputs)
        .map(|(r, input)| match (r, &input.truth) {
            (Ok(f), Some(gt)) => Some(evaluate_frame(&f.clusters, &f.poses(), gt, prior, cfg.pcp_alpha)),
            _ => None,
        })
        .collect();
    let evaluated: Vec<&FrameMetrics> = metrics.iter().flatten().collect();
    let aggregate = Aggregate {
        frames: frames.len(),
        failed: frames.iter().filter(|r| r.is_err()).count(),
        evaluated: evaluated.len(),
        mean_precision: mean(evaluated.iter().map(|m| m.matching.precision)),
        mean_recall: mean(evaluated.iter().map(|m| m.matching.recall)),
        mean_f1: mean(evaluated.iter().map(|m| m.matching.f1)),
        mean_pcp: mean(evaluated.iter().map(|m| m.pcp)),
    };
    Ok(BatchResult { frames, metrics, aggregate, wall_time })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::affinity::{Detection, Keypoint};
    use crate::evalgen::{generate, SceneConfig};

    #[test]
    fn percentiles() {
        let v = [5.0, 1.0, 3.0, 2.0, 4.0];
        assert_eq!(percentile(&v, 50.0), 3.0);
        assert_eq!(percentile(&v, 95.0), 5.0);
        assert_eq!(percentile(&[], 50.0), 0.0);
    }

    #[test]
    fn empty_views_succeed() {
        let scene = generate(&SceneConfig::default()).unwrap();
        let views: Vec<DetectionSet> =
            (0..scene.truth.cameras.len()).map(|v| DetectionSet { view_id: v, detections: Vec::new() }).collect();
        let out = run_frame(&RunConfig::default(), &SkeletonPrior::coco17(), &scene.truth.cameras, &views).unwrap();
        assert!(out.clusters.is_empty() && out.people.is_empty());
    }

    #[test]
    fn mismatched_joint_counts() {
        let scene = generate(&SceneConfig::default()).unwrap();
        let mut views = scene.detections.clone();
        let d = &views[1].detections[0];
        views[1].detections[0] = Detection::new(
            d.view_id,
            d.index_in_view,
            d.bbox,
            vec![Keypoint { x: 0.0, y: 0.0, score: 1.0 }; 5],
            d.descriptor.clone(),
            0.2,
        );
        let err = run_frame(&RunConfig::default(), &SkeletonPrior::coco17(), &scene.truth.cameras, &views).unwrap_err();
        assert!(matches!(err, PipelineError::SchemaMismatch(_)), "{err}");
        assert!(err.is_input_error());
    }
}
