//! JSON file formats.
//!
//! Every object-shaped file carries `"schema": "mvmatch/1"`. Readers accept
//! a missing key but reject any other value. The calibration file is a bare
//! array of cameras (an object `{"schema", "cameras"}` is also accepted).

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, Matrix3x4, Vector2, Vector3};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::affinity::{AffinityConfig, AffinityMatrix, Detection, DetectionSet, Keypoint};
use crate::evalgen::{GroundTruth, Label, SceneConfig};
use crate::geometry::{CameraView, GeometryError};
use crate::matching::{Member, PersonCluster, SolverConfig};
use crate::partition::Partition;
use crate::pose3d::{HeatmapConfig, Pose3D, SkeletonPrior};

pub const SCHEMA: &str = "mvmatch/1";

pub const CALIBRATION_FILE: &str = "calibration.json";
pub const DETECTIONS_FILE: &str = "detections.json";
pub const GROUND_TRUTH_FILE: &str = "ground_truth.json";

#[derive(Debug, Error)]
pub enum IoError {
    #[error("cannot access {}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("schema mismatch: {0}")]
    Schema(String),
}

impl IoError {
    fn parse(context: impl std::fmt::Display, err: impl std::fmt::Display) -> Self {
        IoError::Parse(format!("{context}: {err}"))
    }
}

fn check_schema(schema: &Option<String>) -> Result<(), IoError> {
    match schema.as_deref() {
        None | Some(SCHEMA) => Ok(()),
        Some(other) => Err(IoError::Schema(format!("expected \"{SCHEMA}\", found \"{other}\""))),
    }
}

fn schema_tag() -> Option<String> {
    Some(SCHEMA.to_string())
}

pub fn read_text(path: &Path) -> Result<String, IoError> {
    fs::read_to_string(path).map_err(|source| IoError::Io { path: path.to_path_buf(), source })
}

pub fn write_text(path: &Path, text: &str) -> Result<(), IoError> {
    fs::write(path, text).map_err(|source| IoError::Io { path: path.to_path_buf(), source })
}

fn parse<T: DeserializeOwned>(what: &str, text: &str) -> Result<T, IoError> {
    serde_json::from_str(text).map_err(|e| IoError::parse(what, e))
}

pub fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("file types serialize");
    s.push('\n');
    s
}

// ---------------------------------------------------------------------------
// Calibration

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CameraRecord {
    pub id: usize,
    #[serde(rename = "P")]
    pub p: [[f64; 4]; 3],
    pub image_size: [u32; 2],
}

#[derive(Deserialize)]
#[serde(untagged)]
enum CalibrationDoc {
    Bare(Vec<CameraRecord>),
    Wrapped { schema: Option<String>, cameras: Vec<CameraRecord> },
}

pub fn cameras_to_records(cams: &[CameraView]) -> Vec<CameraRecord> {
    cams.iter()
        .map(|c| {
            let p = c.projection();
            CameraRecord {
                id: c.id(),
                p: std::array::from_fn(|r| std::array::from_fn(|k| p[(r, k)])),
                image_size: [c.image_size().0, c.image_size().1],
            }
        })
        .collect()
}

pub fn calibration_to_json(cams: &[CameraView]) -> String {
    to_json(&cameras_to_records(cams))
}

/// Parses cameras and orders them by id, which must be `0..V`.
pub fn parse_calibration(text: &str) -> Result<Vec<CameraView>, IoError> {
    let records = match parse::<CalibrationDoc>("calibration", text)? {
        CalibrationDoc::Bare(r) => r,
        CalibrationDoc::Wrapped { schema, cameras } => {
            check_schema(&schema)?;
            cameras
        }
    };
    let mut cams = records
        .iter()
        .map(|r| {
            let p = Matrix3x4::from_fn(|i, k| r.p[i][k]);
            CameraView::new(r.id, p, (r.image_size[0], r.image_size[1]))
        })
        .collect::<Result<Vec<_>, GeometryError>>()
        .map_err(|e| IoError::parse("calibration", e))?;
    cams.sort_by_key(CameraView::id);
    for (k, c) in cams.iter().enumerate() {
        if c.id() != k {
            return Err(IoError::Schema(format!("camera ids must be 0..{}, found {}", cams.len(), c.id())));
        }
    }
    Ok(cams)
}

// ---------------------------------------------------------------------------
// Detections

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub bbox: [f64; 4],
    pub keypoints: Vec<[f64; 3]>,
    pub descriptor: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ViewRecord {
    pub view_id: usize,
    pub detections: Vec<DetectionRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectionsDoc {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schema: Option<String>,
    pub views: Vec<ViewRecord>,
}

pub fn detections_to_json(views: &[DetectionSet]) -> String {
    let doc = DetectionsDoc {
        schema: schema_tag(),
        views: views
            .iter()
            .map(|set| ViewRecord {
                view_id: set.view_id,
                detections: set
                    .detections
                    .iter()
                    .map(|d| DetectionRecord {
                        bbox: d.bbox,
                        keypoints: d.keypoints.iter().map(|k| [k.x, k.y, k.score]).collect(),
                        descriptor: d.descriptor.clone(),
                    })
                    .collect(),
            })
            .collect(),
    };
    to_json(&doc)
}

/// Parses detections and orders views by id, which must be `0..V`.
pub fn parse_detections(text: &str, score_floor: f64) -> Result<Vec<DetectionSet>, IoError> {
    let doc: DetectionsDoc = parse("detections", text)?;
    check_schema(&doc.schema)?;
    let mut views: Vec<DetectionSet> = doc
        .views
        .into_iter()
        .map(|v| DetectionSet {
            view_id: v.view_id,
            detections: v
                .detections
                .into_iter()
                .enumerate()
                .map(|(k, d)| {
                    let keypoints = d.keypoints.iter().map(|&[x, y, score]| Keypoint { x, y, score }).collect();
                    Detection::new(v.view_id, k, d.bbox, keypoints, d.descriptor, score_floor)
                })
                .collect(),
        })
        .collect();
    views.sort_by_key(|v| v.view_id);
    for (k, v) in views.iter().enumerate() {
        if v.view_id != k {
            return Err(IoError::Schema(format!("view ids must be 0..{}, found {}", views.len(), v.view_id)));
        }
    }
    Ok(views)
}

// ---------------------------------------------------------------------------
// Ground truth

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AssociationRecord {
    pub view: usize,
    pub index: usize,
    /// `null` for a false detection.
    pub person: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroundTruthDoc {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schema: Option<String>,
    pub poses3d: Vec<Vec<[f64; 3]>>,
    pub associations: Vec<AssociationRecord>,
    /// `clean_keypoints[view][index][joint]`, noise-free projections.
    #[serde(default)]
    pub clean_keypoints: Vec<Vec<Vec<[f64; 2]>>>,
}

pub fn ground_truth_to_json(gt: &GroundTruth) -> String {
    let doc = GroundTruthDoc {
        schema: schema_tag(),
        poses3d: gt.poses3d.iter().map(|p| p.iter().map(|t| [t.x, t.y, t.z]).collect()).collect(),
        associations: gt
            .labels
            .iter()
            .enumerate()
            .flat_map(|(view, labels)| {
                labels.iter().enumerate().map(move |(index, l)| AssociationRecord { view, index, person: l.person() })
            })
            .collect(),
        clean_keypoints: gt
            .clean_keypoints
            .iter()
            .map(|v| v.iter().map(|d| d.iter().map(|x| [x.x, x.y]).collect()).collect())
            .collect(),
    };
    to_json(&doc)
}

/// Parses ground truth; `cameras` come from the scene's calibration file.
pub fn parse_ground_truth(text: &str, cameras: Vec<CameraView>) -> Result<GroundTruth, IoError> {
    let doc: GroundTruthDoc = parse("ground truth", text)?;
    check_schema(&doc.schema)?;
    let n_views = cameras.len();
    let mut labels: Vec<Vec<Option<Label>>> = vec![Vec::new(); n_views];
    for a in &doc.associations {
        let view =
            labels.get_mut(a.view).ok_or_else(|| IoError::Schema(format!("association references view {}", a.view)))?;
        if view.len() <= a.index {
            view.resize(a.index + 1, None);
        }
        if let Some(p) = a.person {
            if p >= doc.poses3d.len() {
                return Err(IoError::Schema(format!("association references person {p}")));
            }
        }
        view[a.index] = Some(a.person.map_or(Label::FalsePositive, Label::Person));
    }
    let labels = labels
        .into_iter()
        .enumerate()
        .map(|(v, l)| {
            l.into_iter()
                .enumerate()
                .map(|(k, x)| x.ok_or_else(|| IoError::Schema(format!("detection ({v},{k}) has no association"))))
                .collect::<Result<Vec<_>, _>>()
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(GroundTruth {
        cameras,
        poses3d: doc.poses3d.iter().map(|p| p.iter().map(|t| Vector3::new(t[0], t[1], t[2])).collect()).collect(),
        labels,
        clean_keypoints: doc
            .clean_keypoints
            .iter()
            .map(|v| v.iter().map(|d| d.iter().map(|x| Vector2::new(x[0], x[1])).collect()).collect())
            .collect(),
    })
}

// ---------------------------------------------------------------------------
// Skeleton prior

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SkeletonDoc {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schema: Option<String>,
    pub n_joints: usize,
    pub edges: Vec<[usize; 2]>,
    pub bone_mean: Vec<f64>,
    pub bone_std: Vec<f64>,
}

pub fn parse_skeleton(text: &str) -> Result<SkeletonPrior, IoError> {
    let doc: SkeletonDoc = parse("skeleton prior", text)?;
    check_schema(&doc.schema)?;
    SkeletonPrior::new(doc.n_joints, doc.edges.iter().map(|e| (e[0], e[1])).collect(), doc.bone_mean, doc.bone_std)
        .map_err(|e| IoError::Schema(e.to_string()))
}

pub fn skeleton_to_json(prior: &SkeletonPrior) -> String {
    to_json(&SkeletonDoc {
        schema: schema_tag(),
        n_joints: prior.n_joints,
        edges: prior.edges.iter().map(|&(a, b)| [a, b]).collect(),
        bone_mean: prior.bone_mean.clone(),
        bone_std: prior.bone_std.clone(),
    })
}

// ---------------------------------------------------------------------------
// Configs

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum ReconstructionMode {
    #[default]
    #[serde(rename = "triangulation")]
    Triangulation,
    #[serde(rename = "3dps")]
    Pictorial,
}

impl std::str::FromStr for ReconstructionMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "triangulation" => Ok(Self::Triangulation),
            "3dps" => Ok(Self::Pictorial),
            other => Err(format!("unknown mode {other:?}; expected \"triangulation\" or \"3dps\"")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub schema: Option<String>,
    pub affinity: AffinityConfig,
    pub solver: SolverConfig,
    pub heatmap: HeatmapConfig,
    pub mode: ReconstructionMode,
    /// Skeleton prior file; the built-in COCO prior when absent.
    pub skeleton: Option<PathBuf>,
    pub timing: bool,
    /// Treat solver non-convergence as an error.
    pub strict: bool,
    /// PCP threshold used by evaluation.
    pub pcp_alpha: f64,
    /// Replace the solver with exhaustive search (small problems only).
    pub oracle: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema: schema_tag(),
            affinity: AffinityConfig::default(),
            solver: SolverConfig::default(),
            heatmap: HeatmapConfig::default(),
            mode: ReconstructionMode::default(),
            skeleton: None,
            timing: false,
            strict: false,
            pcp_alpha: 0.5,
            oracle: false,
        }
    }
}

impl RunConfig {
    /// Loads the skeleton prior, resolving a relative path against `base`.
    pub fn load_prior(&self, base: Option<&Path>) -> Result<SkeletonPrior, IoError> {
        match &self.skeleton {
            None => Ok(SkeletonPrior::coco17()),
            Some(p) => {
                let path = match base {
                    Some(b) if p.is_relative() => b.join(p),
                    _ => p.clone(),
                };
                parse_skeleton(&read_text(&path)?)
            }
        }
    }
}

pub fn parse_run_config(text: &str) -> Result<RunConfig, IoError> {
    let cfg: RunConfig = parse("run config", text)?;
    check_schema(&cfg.schema)?;
    Ok(cfg)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SceneConfigDoc {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    schema: Option<String>,
    #[serde(flatten)]
    config: SceneConfig,
}

pub fn parse_scene_config(text: &str) -> Result<SceneConfig, IoError> {
    let doc: SceneConfigDoc = parse("scene config", text)?;
    check_schema(&doc.schema)?;
    Ok(doc.config)
}

pub fn scene_config_to_json(cfg: &SceneConfig) -> String {
    to_json(&SceneConfigDoc { schema: schema_tag(), config: cfg.clone() })
}

// ---------------------------------------------------------------------------
// Affinity

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AffinityDoc {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schema: Option<String>,
    pub partition: Vec<usize>,
    pub values: Vec<Vec<f64>>,
}

pub fn affinity_to_json(a: &AffinityMatrix) -> String {
    to_json(&AffinityDoc {
        schema: schema_tag(),
        partition: a.partition().counts().to_vec(),
        values: matrix_rows(a.values()),
    })
}

pub fn parse_affinity(text: &str) -> Result<AffinityMatrix, IoError> {
    let doc: AffinityDoc = parse("affinity", text)?;
    check_schema(&doc.schema)?;
    let m = doc.values.len();
    if doc.values.iter().any(|r| r.len() != m) {
        return Err(IoError::Schema("affinity values must be square".into()));
    }
    let values = DMatrix::from_fn(m, m, |i, j| doc.values[i][j]);
    AffinityMatrix::from_values(values, Partition::new(doc.partition)).map_err(|e| IoError::Schema(e.to_string()))
}

// ---------------------------------------------------------------------------
// Results

pub fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

pub fn clusters_to_records(clusters: &[PersonCluster]) -> Vec<Vec<Member>> {
    clusters.iter().map(|c| c.members.clone()).collect()
}

pub fn clusters_from_records(records: &[Vec<Member>]) -> Vec<PersonCluster> {
    records
        .iter()
        .enumerate()
        .map(|(cluster_id, members)| PersonCluster { cluster_id, members: members.clone() })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchDoc {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schema: Option<String>,
    pub clusters: Vec<Vec<Member>>,
    #[serde(rename = "P")]
    pub p: Vec<Vec<f64>>,
    pub converged: bool,
    pub iterations: usize,
}

impl MatchDoc {
    pub fn new(clusters: &[PersonCluster], relaxed: &DMatrix<f64>, converged: bool, iterations: usize) -> Self {
        Self {
            schema: schema_tag(),
            clusters: clusters_to_records(clusters),
            p: matrix_rows(relaxed),
            converged,
            iterations,
        }
    }
}

pub fn parse_match(text: &str) -> Result<MatchDoc, IoError> {
    let doc: MatchDoc = parse("match result", text)?;
    check_schema(&doc.schema)?;
    Ok(doc)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonRecord {
    pub cluster_id: usize,
    pub joints: Vec<[f64; 3]>,
    pub unresolved: Vec<usize>,
    pub log_posterior: Option<f64>,
}

impl PersonRecord {
    pub fn new(cluster_id: usize, pose: &Pose3D) -> Self {
        Self {
            cluster_id,
            joints: pose.joints.iter().map(|t| [t.x, t.y, t.z]).collect(),
            unresolved: pose.unresolved.clone(),
            log_posterior: pose.log_posterior,
        }
    }

    pub fn to_pose(&self) -> Pose3D {
        Pose3D {
            joints: self.joints.iter().map(|t| Vector3::new(t[0], t[1], t[2])).collect(),
            source_views: vec![Vec::new(); self.joints.len()],
            unresolved: self.unresolved.clone(),
            log_posterior: self.log_posterior,
        }
    }
}

/// Result of one frame: matching output plus reconstructed people.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameDoc {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schema: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scene: Option<String>,
    #[serde(default)]
    pub clusters: Vec<Vec<Member>>,
    #[serde(default)]
    pub converged: bool,
    #[serde(default)]
    pub iterations: usize,
    #[serde(default)]
    pub people: Vec<PersonRecord>,
}

pub fn parse_frame(text: &str) -> Result<FrameDoc, IoError> {
    let doc: FrameDoc = parse("results", text)?;
    check_schema(&doc.schema)?;
    Ok(doc)
}
