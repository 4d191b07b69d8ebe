//! Multi-person 3D pose estimation from a few calibrated views.
//!
//! 2D pose detections are associated across views by a convex,
//! cycle-consistent multi-way matching (ADMM with a nuclear-norm penalty),
//! and each resulting person is reconstructed in 3D either by direct
//! triangulation or by a pictorial-structure model over triangulated
//! proposals. A synthetic scene generator provides ground truth.
//!
//! ```
//! use mvmatch::evalgen::{generate, SceneConfig};
//! use mvmatch::io::RunConfig;
//! use mvmatch::pipeline::run_frame;
//! use mvmatch::pose3d::SkeletonPrior;
//!
//! let scene = generate(&SceneConfig { n_people: 2, n_views: 3, ..Default::default() }).unwrap();
//! let out = run_frame(&RunConfig::default(), &SkeletonPrior::coco17(), &scene.truth.cameras, &scene.detections).unwrap();
//! assert_eq!(out.clusters.len(), 2);
//! ```

pub mod affinity;
pub mod evalgen;
pub mod geometry;
pub mod io;
pub mod matching;
pub mod partition;
pub mod pipeline;
pub mod pose3d;

pub use affinity::{AffinityMatrix, Detection, DetectionSet};
pub use geometry::CameraView;
pub use matching::{MatchMatrix, PersonCluster};
pub use partition::Partition;
pub use pose3d::{Pose3D, SkeletonPrior};
