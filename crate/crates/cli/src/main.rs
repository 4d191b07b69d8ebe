use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use mvmatch::affinity::{build_affinity, AffinityMatrix, DetectionSet};
use mvmatch::evalgen::{generate, GenError, SceneConfig};
use mvmatch::geometry::CameraView;
use mvmatch::io::{self, FrameDoc, IoError, MatchDoc, PersonRecord, ReconstructionMode, RunConfig};
use mvmatch::matching::{brute_force_consistent_match, extract_clusters, solve, MatchError, MatchProblem};
use mvmatch::pipeline::{evaluate_frame, run_batch, run_frame, FrameEntry, FrameInput, PipelineError, TimingReport};
use mvmatch::pose3d::{infer_3dps, triangulate_pose, HeatmapModel, PoseError, SkeletonPrior};

const EXIT_FAILURE: u8 = 1;
const EXIT_INPUT: u8 = 2;
const EXIT_NOT_CONVERGED: u8 = 3;

#[derive(Parser)]
#[command(name = "mvmatch", version, about = "Multi-view person matching and 3D pose reconstruction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene (calibration, detections, ground truth).
    Generate(GenerateArgs),
    /// Match detections across views.
    Match(MatchArgs),
    /// Reconstruct 3D poses from matched clusters.
    Reconstruct(ReconstructArgs),
    /// Score results against a scene's ground truth.
    Evaluate(EvaluateArgs),
    /// Run matching and reconstruction end to end, over one or many frames.
    Pipeline(PipelineArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Scene config file; built-in defaults when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Number of frames. With more than one, frame k goes to `out/frame_kkkk`
    /// and uses seed `rng_seed + k`.
    #[arg(long, default_value_t = 1)]
    frames: usize,
    /// Override the config's seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct RunArgs {
    /// Run config file; built-in defaults when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Reconstruction mode, overriding the config.
    #[arg(long)]
    mode: Option<ReconstructionMode>,
    /// Replace the solver with exhaustive search (refuses above 12 detections).
    #[arg(long)]
    oracle: bool,
    /// Fail with exit code 3 when the solver does not converge.
    #[arg(long)]
    strict: bool,
}

#[derive(Args)]
struct InputArgs {
    #[arg(long)]
    calib: Option<PathBuf>,
    #[arg(long)]
    detections: Option<PathBuf>,
}

#[derive(Args)]
struct MatchArgs {
    #[command(flatten)]
    run: RunArgs,
    #[command(flatten)]
    input: InputArgs,
    /// Precomputed affinity file, instead of calibration and detections.
    #[arg(long, conflicts_with_all = ["calib", "detections"])]
    affinity: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReconstructArgs {
    #[command(flatten)]
    run: RunArgs,
    #[command(flatten)]
    input: InputArgs,
    /// Match or pipeline result holding the clusters; they are copied to the output.
    #[arg(long)]
    matches: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Scene directory with ground truth.
    #[arg(long)]
    scene: PathBuf,
    /// Match, reconstruct or single-frame pipeline result.
    #[arg(long)]
    results: PathBuf,
    /// Run config (skeleton prior and PCP threshold).
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct PipelineArgs {
    #[command(flatten)]
    run: RunArgs,
    #[command(flatten)]
    input: InputArgs,
    /// Scene directory; repeatable. A directory without a calibration file
    /// is expanded to its subdirectories in name order.
    #[arg(long, conflicts_with_all = ["calib", "detections"])]
    scene: Vec<PathBuf>,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Report failed frames instead of aborting the batch.
    #[arg(long)]
    keep_going: bool,
    /// Write per-stage timing percentiles to this file.
    #[arg(long)]
    timing: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

struct Run {
    cfg: RunConfig,
    prior: SkeletonPrior,
}

impl RunArgs {
    fn load(&self) -> Result<Run> {
        let mut cfg = match &self.config {
            Some(path) => io::parse_run_config(&io::read_text(path)?)?,
            None => RunConfig::default(),
        };
        if let Some(mode) = self.mode {
            cfg.mode = mode;
        }
        cfg.oracle |= self.oracle;
        cfg.strict |= self.strict;
        let base = self.config.as_deref().and_then(Path::parent);
        let prior = cfg.load_prior(base)?;
        Ok(Run { cfg, prior })
    }
}

impl InputArgs {
    fn load(&self, score_floor: f64) -> Result<(Vec<CameraView>, Vec<DetectionSet>)> {
        let (Some(calib), Some(dets)) = (&self.calib, &self.detections) else {
            bail!(IoError::Parse("both --calib and --detections are required".into()));
        };
        let cams = io::parse_calibration(&io::read_text(calib)?)?;
        let views = io::parse_detections(&io::read_text(dets)?, score_floor)?;
        Ok((cams, views))
    }
}

fn write_out(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    io::write_text(path, text)?;
    Ok(())
}

fn cmd_generate(args: &GenerateArgs) -> Result<()> {
    let mut cfg = match &args.config {
        Some(path) => io::parse_scene_config(&io::read_text(path)?)?,
        None => SceneConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.rng_seed = seed;
    }
    if args.frames == 0 {
        bail!(GenError::ConfigInvalid("--frames must be at least 1".into()));
    }
    for k in 0..args.frames {
        let (dir, frame_cfg) = if args.frames == 1 {
            (args.out.clone(), cfg.clone())
        } else {
            let mut c = cfg.clone();
            c.rng_seed = cfg.rng_seed.wrapping_add(k as u64);
            (args.out.join(format!("frame_{k:04}")), c)
        };
        let scene = generate(&frame_cfg)?;
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        write_out(&dir.join(io::CALIBRATION_FILE), &io::calibration_to_json(&scene.truth.cameras))?;
        write_out(&dir.join(io::DETECTIONS_FILE), &io::detections_to_json(&scene.detections))?;
        write_out(&dir.join(io::GROUND_TRUTH_FILE), &io::ground_truth_to_json(&scene.truth))?;
        write_out(&dir.join("scene_config.json"), &io::scene_config_to_json(&frame_cfg))?;
    }
    Ok(())
}

fn cmd_match(args: &MatchArgs) -> Result<()> {
    let run = args.run.load()?;
    let affinity: AffinityMatrix = match &args.affinity {
        Some(path) => io::parse_affinity(&io::read_text(path)?)?,
        None => {
            let (cams, views) = args.input.load(run.cfg.affinity.score_floor)?;
            build_affinity(&views, &cams, &run.cfg.affinity).map_err(PipelineError::from)?
        }
    };
    let result = if run.cfg.oracle {
        brute_force_consistent_match(&affinity)?
    } else {
        solve(&MatchProblem::new(affinity, &run.cfg.solver)?)?
    };
    if run.cfg.strict && !result.converged {
        bail!(PipelineError::NotConverged(result.iterations));
    }
    let clusters = extract_clusters(&result.quantized, &result.partition)?;
    let doc = MatchDoc::new(&clusters, &result.relaxed, result.converged, result.iterations);
    write_out(&args.out, &io::to_json(&doc))
}

fn cmd_reconstruct(args: &ReconstructArgs) -> Result<()> {
    let run = args.run.load()?;
    let (cams, views) = args.input.load(run.cfg.affinity.score_floor)?;
    let mut doc = io::parse_frame(&io::read_text(&args.matches)?)?;
    doc.schema = Some(io::SCHEMA.to_string());
    let clusters = io::clusters_from_records(&doc.clusters);
    let heatmaps = match run.cfg.mode {
        ReconstructionMode::Pictorial => Some(HeatmapModel::from_detections(&views, &run.cfg.heatmap)?),
        ReconstructionMode::Triangulation => None,
    };
    let mut people = Vec::with_capacity(clusters.len());
    for cluster in &clusters {
        let pose = match &heatmaps {
            Some(h) => infer_3dps(cluster, &views, h, &cams, &run.prior),
            None => triangulate_pose(cluster, &views, &cams, &run.prior),
        };
        match pose {
            Ok(p) => people.push(PersonRecord::new(cluster.cluster_id, &p)),
            Err(PoseError::AllJointsUnresolved) => {}
            Err(e) => return Err(e.into()),
        }
    }
    let out = FrameDoc { people, ..doc };
    write_out(&args.out, &io::to_json(&out))
}

fn cmd_evaluate(args: &EvaluateArgs) -> Result<()> {
    let cfg = match &args.config {
        Some(path) => io::parse_run_config(&io::read_text(path)?)?,
        None => RunConfig::default(),
    };
    let prior = cfg.load_prior(args.config.as_deref().and_then(Path::parent))?;
    let input = FrameInput::load_dir(&args.scene, cfg.affinity.score_floor)?;
    let Some(truth) = &input.truth else {
        bail!(IoError::Parse(format!("{} has no {}", args.scene.display(), io::GROUND_TRUTH_FILE)));
    };
    let doc = io::parse_frame(&io::read_text(&args.results)?)?;
    let clusters = io::clusters_from_records(&doc.clusters);
    let poses: Vec<_> = doc.people.iter().map(PersonRecord::to_pose).collect();
    let metrics = evaluate_frame(&clusters, &poses, truth, &prior, cfg.pcp_alpha);
    print!("{}", io::to_json(&metrics));
    Ok(())
}

fn expand_scenes(dirs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for dir in dirs {
        if dir.join(io::CALIBRATION_FILE).exists() {
            out.push(dir.clone());
            continue;
        }
        let mut subdirs: Vec<PathBuf> = fs::read_dir(dir)
            .with_context(|| format!("reading {}", dir.display()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join(io::CALIBRATION_FILE).exists())
            .collect();
        if subdirs.is_empty() {
            bail!(IoError::Parse(format!("{} contains no scene", dir.display())));
        }
        subdirs.sort();
        out.extend(subdirs);
    }
    Ok(out)
}

fn cmd_pipeline(args: &PipelineArgs) -> Result<()> {
    let run = args.run.load()?;
    let floor = run.cfg.affinity.score_floor;
    if args.scene.is_empty() {
        let (cams, views) = args.input.load(floor)?;
        let result = run_frame(&run.cfg, &run.prior, &cams, &views)?;
        write_out(&args.out, &io::to_json(&result.to_doc(None)))?;
        if let Some(path) = &args.timing {
            let report = TimingReport::from_timings(&[result.timings], 1, result.timings.total());
            write_out(path, &io::to_json(&report))?;
        }
        return Ok(());
    }
    let mut inputs = Vec::new();
    let mut load_failures = Vec::new();
    for (index, dir) in expand_scenes(&args.scene)?.iter().enumerate() {
        match FrameInput::load_dir(dir, floor) {
            Ok(input) => inputs.push(input),
            Err(e) if args.keep_going => {
                load_failures.push((index, format!("{}: {:#}", dir.display(), anyhow::Error::from(e))))
            }
            Err(e) => {
                return Err(
                    PipelineError::Frame { index, name: dir.display().to_string(), source: Box::new(e.into()) }.into()
                )
            }
        }
    }
    let result = run_batch(&run.cfg, &run.prior, &inputs, args.workers, args.keep_going)?;
    let mut doc = result.to_doc(&inputs);
    for (index, error) in load_failures {
        doc.frames.insert(index, FrameEntry { result: None, error: Some(error), metrics: None });
        doc.aggregate.frames += 1;
        doc.aggregate.failed += 1;
    }
    write_out(&args.out, &io::to_json(&doc))?;
    let report = result.timing_report();
    if let Some(path) = &args.timing {
        write_out(path, &io::to_json(&report))?;
    } else if run.cfg.timing {
        eprint!("{}", io::to_json(&report));
    }
    if doc.aggregate.failed > 0 {
        eprintln!("{} of {} frames failed", doc.aggregate.failed, doc.aggregate.frames);
    }
    Ok(())
}

/// Maps a failure to the documented exit codes.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<PipelineError>() {
            if e.is_not_converged() {
                return EXIT_NOT_CONVERGED;
            }
            if e.is_input_error() {
                return EXIT_INPUT;
            }
        }
        if let Some(IoError::Parse(_) | IoError::Schema(_)) = cause.downcast_ref::<IoError>() {
            return EXIT_INPUT;
        }
        if cause.downcast_ref::<GenError>().is_some() {
            return EXIT_INPUT;
        }
        if let Some(MatchError::InvalidProblem(_)) = cause.downcast_ref::<MatchError>() {
            return EXIT_INPUT;
        }
        if let Some(
            PoseError::InvalidSkeleton(_)
            | PoseError::UnknownMember(..)
            | PoseError::JointCountMismatch { .. }
            | PoseError::InvalidHeatmap(_),
        ) = cause.downcast_ref::<PoseError>()
        {
            return EXIT_INPUT;
        }
    }
    EXIT_FAILURE
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Match(a) => cmd_match(a),
        Command::Reconstruct(a) => cmd_reconstruct(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Pipeline(a) => cmd_pipeline(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
