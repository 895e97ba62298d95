//! Command-line interface.

use std::path::{Path, PathBuf};
use std::sync::mpsc::channel;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use crowdgaze_core::corpus::{write_detection_frames, write_gaze_crops};
use crowdgaze_core::detector::FaceDetector;
use crowdgaze_core::gaze::GazeEstimator;
use crowdgaze_core::session::{Session, SessionConfig};
use crowdgaze_core::synth::{gen_detection_corpus, gen_gaze_corpus};
use crowdgaze_core::training::{train_models, TrainingRecipe};
use thiserror::Error;

use crate::app::{run_pipeline, PipelineOptions, DEFAULT_CALIBRATION_PATH};
use crate::server::{Hub, Server, CLIENT_BACKLOG};
use crate::source::{open_camera, Cursor, FileSource, SyntheticSource, VideoSource};

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_RESOURCE: u8 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "crowdgaze",
    version,
    about = "Multi-person gaze tracking with per-person calibration",
    arg_required_else_help = true,
    args_conflicts_with_subcommands = true
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Option<Commands>,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Subcommand)]
pub enum Commands {
    /// Train both networks on synthetic corpora and write weight files.
    Train(TrainArgs),
    /// Write synthetic training corpora to disk.
    Corpus(CorpusArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SourceKind {
    Synthetic,
    File,
    Camera,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Where frames come from.
    #[arg(long, value_enum, default_value = "synthetic")]
    pub source: SourceKind,
    /// Camera device index for `--source camera`.
    #[arg(long, default_value_t = 0)]
    pub camera_index: u32,
    /// Directory of PNG frames for `--source file`.
    #[arg(long)]
    pub video: Option<PathBuf>,
    /// Frame rate assigned to file frames.
    #[arg(long, default_value_t = 30.0)]
    pub fps: f64,
    /// Deliver file or synthetic frames at their nominal rate.
    #[arg(long)]
    pub pace: bool,
    /// Seed for the synthetic audience.
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Persons in the synthetic audience.
    #[arg(long, default_value_t = 4)]
    pub synthetic_persons: usize,
    /// Session config JSON; the flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Detector upscale factor.
    #[arg(long)]
    pub upscale: Option<f64>,
    /// Maximum gaze crops per inference batch.
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Calibration polynomial degree.
    #[arg(long)]
    pub degree: Option<u32>,
    /// Minimum gaze start confidence for a valid estimate.
    #[arg(long)]
    pub min_start_conf: Option<f32>,
    /// Minimum gaze vector confidence for a valid estimate.
    #[arg(long)]
    pub min_vec_conf: Option<f32>,
    #[arg(long, default_value = "weights/detector.ggwt")]
    pub weights_detector: PathBuf,
    #[arg(long, default_value = "weights/gaze.ggwt")]
    pub weights_gaze: PathBuf,
    /// Record the session log to this CSV file from the first frame.
    #[arg(long)]
    pub record: Option<PathBuf>,
    /// Where `save_calibration` writes the fitted maps.
    #[arg(long, default_value = DEFAULT_CALIBRATION_PATH)]
    pub calibration: PathBuf,
    /// Install maps from a saved calibration file before the first frame.
    #[arg(long)]
    pub load_calibration: Option<PathBuf>,
    /// Serve the WebSocket protocol on 127.0.0.1 at this port (0 picks one).
    #[arg(long)]
    pub serve_port: Option<u16>,
    /// Stop after this many frames.
    #[arg(long)]
    pub frames: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, default_value = "weights")]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub detector_frames: Option<usize>,
    #[arg(long)]
    pub detector_epochs: Option<usize>,
    #[arg(long)]
    pub gaze_crops: Option<usize>,
    #[arg(long)]
    pub gaze_epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct CorpusArgs {
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 500)]
    pub frames: usize,
    #[arg(long, default_value_t = 1000)]
    pub crops: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Resource(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Usage(_) => EXIT_USAGE,
            Self::Resource(_) => EXIT_RESOURCE,
        }
    }
}

fn resource(context: impl std::fmt::Display) -> impl FnOnce(&dyn std::fmt::Display) -> CliError {
    move |e| CliError::Resource(format!("{context}: {e}"))
}

pub fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Some(Commands::Train(a)) => train(&a),
        Some(Commands::Corpus(a)) => corpus(&a),
        None => run(&cli.run),
    }
}

/// Session config from `--config` plus flag overrides.
pub fn session_config(a: &RunArgs) -> Result<SessionConfig, CliError> {
    let mut cfg = match &a.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| resource(format!("cannot read {}", p.display()))(&e))?;
            serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("invalid session config {}: {e}", p.display())))?
        }
        None => SessionConfig::default(),
    };
    if let Some(u) = a.upscale {
        cfg.detector.upscale_factor = u;
    }
    if let Some(b) = a.batch_size {
        cfg.batch.batch_size = b;
    }
    if let Some(d) = a.degree {
        cfg.degree = d;
    }
    if let Some(t) = a.min_start_conf {
        cfg.validity.min_start_conf = t;
    }
    if let Some(t) = a.min_vec_conf {
        cfg.validity.min_vec_conf = t;
    }
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(cfg)
}

fn open_source(a: &RunArgs, cursor: &Cursor) -> Result<Box<dyn VideoSource>, CliError> {
    match a.source {
        SourceKind::Synthetic => Ok(Box::new(SyntheticSource::new(a.seed, a.synthetic_persons, cursor.clone(), a.pace))),
        SourceKind::File => {
            let dir = a
                .video
                .as_deref()
                .ok_or_else(|| CliError::Usage("--source file needs --video DIR".into()))?;
            if !(a.fps > 0.0 && a.fps.is_finite()) {
                return Err(CliError::Usage("--fps must be positive".into()));
            }
            Ok(Box::new(
                FileSource::open(dir, a.fps, a.pace).map_err(|e| resource("cannot open video")(&e))?,
            ))
        }
        SourceKind::Camera => open_camera(a.camera_index).map_err(|e| resource("cannot open camera")(&e)),
    }
}

fn load_models(a: &RunArgs) -> Result<(FaceDetector, GazeEstimator), CliError> {
    let det = FaceDetector::load(&a.weights_detector)
        .map_err(|e| resource(format!("cannot load detector weights {}", a.weights_detector.display()))(&e))?;
    let est =
        GazeEstimator::load(&a.weights_gaze).map_err(|e| resource(format!("cannot load gaze weights {}", a.weights_gaze.display()))(&e))?;
    Ok((det, est))
}

pub fn run(a: &RunArgs) -> Result<(), CliError> {
    let cfg = session_config(a)?;
    let cursor = Cursor::default();
    let source = open_source(a, &cursor)?;
    let (det, est) = load_models(a)?;
    let mut session = Session::new(cfg, det, est).map_err(|e| CliError::Usage(e.to_string()))?;
    if let Some(p) = &a.load_calibration {
        let n = session
            .calibration
            .load_maps(p)
            .map_err(|e| resource(format!("cannot load calibration {}", p.display()))(&e))?;
        log::info!("installed {n} calibration maps from {}", p.display());
    }

    let (tx, rx) = channel();
    let hub = Hub::new(CLIENT_BACKLOG);
    let server = match a.serve_port {
        Some(port) => Some(Server::bind(port, hub.clone(), tx).map_err(|e| resource(format!("cannot serve on port {port}"))(&e))?),
        None => {
            drop(tx);
            None
        }
    };
    if let Some(s) = &server {
        println!("listening on ws://{}", s.local_addr());
    }
    let opts = PipelineOptions {
        record: a.record.clone(),
        record_on_start: a.record.is_some(),
        calibration_path: a.calibration.clone(),
        frames: a.frames,
    };
    let t = Instant::now();
    let result = run_pipeline(source, session, &opts, rx, server.as_ref().map(|_| hub.clone()), cursor);
    if let Some(s) = server {
        s.shutdown();
    }
    let (_, summary) = result.map_err(|e| resource("pipeline stopped")(&e))?;
    log::info!(
        "{} frames in {:.1?} ({} dropped), {} log rows",
        summary.frames,
        t.elapsed(),
        summary.dropped,
        summary.rows
    );
    Ok(())
}

fn train(a: &TrainArgs) -> Result<(), CliError> {
    let mut recipe = TrainingRecipe::default();
    if let Some(n) = a.detector_frames {
        recipe.detector_frames = n;
    }
    if let Some(n) = a.detector_epochs {
        recipe.detector.epochs = n;
    }
    if let Some(n) = a.gaze_crops {
        recipe.gaze_crops = n;
    }
    if let Some(n) = a.gaze_epochs {
        recipe.gaze.epochs = n;
    }
    let m = train_models(&recipe, |net, epoch, loss| println!("{net} epoch {epoch} loss {loss:.5}"))
        .map_err(|e| resource("training failed")(&e))?;
    println!(
        "detector: precision {:.3} recall {:.3} in {:.1?}",
        m.detector_eval.precision, m.detector_eval.recall, m.detector_time
    );
    println!("gaze: mean angle {:.2} deg in {:.1?}", m.gaze_eval.mean_angle_deg, m.gaze_time);
    std::fs::create_dir_all(&a.out_dir).map_err(|e| resource(format!("cannot create {}", a.out_dir.display()))(&e))?;
    save(&a.out_dir.join("detector.ggwt"), |p| m.detector.save(p).map_err(|e| e.to_string()))?;
    save(&a.out_dir.join("gaze.ggwt"), |p| m.estimator.save(p).map_err(|e| e.to_string()))
}

fn save(path: &Path, f: impl FnOnce(&Path) -> Result<(), String>) -> Result<(), CliError> {
    f(path).map_err(|e| CliError::Resource(format!("cannot write {}: {e}", path.display())))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn corpus(a: &CorpusArgs) -> Result<(), CliError> {
    let det = gen_detection_corpus(a.frames, 1..=3, a.seed);
    let fail = |e: &dyn std::fmt::Display| CliError::Resource(format!("cannot write corpus: {e}"));
    write_detection_frames(&a.out_dir.join("detection/train"), &det.train).map_err(|e| fail(&e))?;
    write_detection_frames(&a.out_dir.join("detection/test"), &det.test).map_err(|e| fail(&e))?;
    write_gaze_crops(&a.out_dir.join("gaze"), &gen_gaze_corpus(a.crops, a.seed)).map_err(|e| fail(&e))?;
    println!(
        "wrote {} + {} detection frames and {} gaze crops to {}",
        det.train.len(),
        det.test.len(),
        a.crops,
        a.out_dir.display()
    );
    Ok(())
}
