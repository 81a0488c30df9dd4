//! The `mstformer` command line.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 data error
//! (missing or malformed files), 4 numeric divergence during training.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::ais;
use crate::atm::{atm_to_csv, build_atm};
use crate::checkpoint::{self, Checkpoint};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::evaluation::{self, constant_velocity_baseline, evaluate, grid_table, EvaluationReport, GridRow, SweepParam};
use crate::io_util::write_atomic;
use crate::loss::{predict_track, LossTarget};
use crate::network::ModelInput;
use crate::plot::{line_svg, track_svg, Series};
use crate::preprocess::{build_dataset, hex_sha256, load_dataset, resample, save_dataset, Dataset, Sample, MANIFEST_FILE};
use crate::synthetic;
use crate::training::{eval_seed, train_with, TrainLog};
use crate::trajectory::{read_store, read_trajectory, write_store, write_trajectory, Trajectory, TrajectoryPoint};

pub const CHECKPOINT_FILE: &str = "model.mstf";
pub const TRAIN_MANIFEST_FILE: &str = "train_manifest.json";

#[derive(Parser, Debug)]
#[command(name = "mstformer", version, about = "Vessel trajectory forecasting: data preparation, training and evaluation")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// TOML run configuration. Keys that are not set keep their defaults.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Root seed. Replaces the fleet, training and evaluation seeds.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Dotted configuration override such as `train.batch_size=16`. Repeatable; wins over --config.
    #[arg(long = "override", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Parse AIS CSV exports into a trajectory store.
    Ingest {
        /// AIS CSV files.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        /// Output trajectory store directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic fleet into a trajectory store.
    Synth {
        /// Output trajectory store directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Resample a trajectory store onto the uniform grid and build a windowed dataset.
    Preprocess {
        /// Input trajectory store directory.
        #[arg(long)]
        input: PathBuf,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model. Writes model.mstf and train_manifest.json into --out.
    Train {
        /// Dataset directory.
        #[arg(long)]
        dataset: PathBuf,
        /// Run directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on the test split. Writes report.txt and report.json into --out.
    Evaluate {
        /// Dataset directory.
        #[arg(long)]
        dataset: PathBuf,
        /// Checkpoint file.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Report directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict one window and write the predicted track in the store format.
    Predict {
        #[command(flatten)]
        window: WindowArgs,
        /// Checkpoint file.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output track file (CSV).
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate once per value of a parameter. Writes sweep.txt and sweep.json into --out.
    Sweep {
        /// Dataset directory.
        #[arg(long)]
        dataset: PathBuf,
        /// Parameter to sweep.
        #[arg(long, value_enum)]
        param: SweepArg,
        /// Report directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate the six ablation variants. Writes ablation.txt and ablation.json into --out.
    Ablate {
        /// Dataset directory.
        #[arg(long)]
        dataset: PathBuf,
        /// Report directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Render figures.
    #[command(subcommand)]
    Plot(PlotCommand),
}

#[derive(Args, Debug, Clone)]
pub struct WindowArgs {
    /// Dataset directory.
    #[arg(long)]
    pub dataset: PathBuf,
    /// Split the window is taken from.
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    /// Window index within the split.
    #[arg(long, default_value_t = 0)]
    pub window: usize,
}

#[derive(Subcommand, Debug)]
pub enum PlotCommand {
    /// SVG of history, truth, prediction and constant-velocity tracks for one window.
    Track {
        #[command(flatten)]
        window: WindowArgs,
        /// Checkpoint used to predict the window.
        #[arg(long, required_unless_present = "prediction")]
        checkpoint: Option<PathBuf>,
        /// Predicted track written by `predict`; used instead of running the model.
        #[arg(long)]
        prediction: Option<PathBuf>,
        /// Output SVG file.
        #[arg(long)]
        out: PathBuf,
    },
    /// SVG of test DIS and corner DIS against the swept value, from a sweep.json.
    Curve {
        /// sweep.json written by `sweep`.
        #[arg(long)]
        report: PathBuf,
        /// Output SVG file.
        #[arg(long)]
        out: PathBuf,
    },
    /// SVG of training and validation loss per epoch, from a train_manifest.json.
    Loss {
        /// train_manifest.json written by `train`.
        #[arg(long)]
        manifest: PathBuf,
        /// Output SVG file.
        #[arg(long)]
        out: PathBuf,
    },
    /// One step's ATM grid as CSV.
    Atm {
        #[command(flatten)]
        window: WindowArgs,
        /// Encoder step within the window.
        #[arg(long, default_value_t = 0)]
        step: usize,
        /// Output CSV file.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SweepArg {
    AtmProportion,
    CFactor,
}

impl From<SweepArg> for SweepParam {
    fn from(a: SweepArg) -> Self {
        match a {
            SweepArg::AtmProportion => SweepParam::AtmProportion,
            SweepArg::CFactor => SweepParam::CFactor,
        }
    }
}

/// Written beside every checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainManifest {
    pub seed: u64,
    pub config: RunConfig,
    pub dataset_manifest_sha256: String,
    pub checkpoint_sha256: String,
    pub log: TrainLog,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluateOutput {
    pub seed: u64,
    pub dataset_manifest_sha256: String,
    pub checkpoint_sha256: String,
    pub report: EvaluationReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridOutput {
    pub seed: u64,
    pub dataset_manifest_sha256: String,
    pub rows: Vec<GridRow>,
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::StackTooShallow { .. } => 2,
        Error::Divergence { .. } => 4,
        _ => 3,
    }
}

/// Parses `argv` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn execute(cli: &Cli) -> Result<()> {
    let c = &cli.common;
    let cfg = RunConfig::load(c.config.as_deref(), &c.overrides, c.seed)?;
    match &cli.command {
        Command::Ingest { inputs, out } => ingest(&cfg, inputs, out),
        Command::Synth { out } => synth(&cfg, out),
        Command::Preprocess { input, out } => preprocess(&cfg, input, out),
        Command::Train { dataset, out } => train_cmd(&cfg, dataset, out),
        Command::Evaluate { dataset, checkpoint, out } => evaluate_cmd(&cfg, dataset, checkpoint, out),
        Command::Predict { window, checkpoint, out } => predict_cmd(&cfg, window, checkpoint, out),
        Command::Sweep { dataset, param, out } => grid_cmd(&cfg, dataset, out, Some((*param).into())),
        Command::Ablate { dataset, out } => grid_cmd(&cfg, dataset, out, None),
        Command::Plot(p) => plot_cmd(&cfg, p),
    }
}

fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::io(path, std::io::Error::new(std::io::ErrorKind::NotFound, "no such file")))
    }
}

fn require_dir(path: &Path) -> Result<()> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(Error::io(path, std::io::Error::new(std::io::ErrorKind::NotFound, "no such directory")))
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    write_atomic(path, text.as_bytes())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

fn file_sha256(path: &Path) -> Result<String> {
    Ok(hex_sha256(&fs::read(path).map_err(|e| Error::io(path, e))?))
}

fn dataset_with_hash(dir: &Path) -> Result<(Dataset, String)> {
    require_dir(dir)?;
    let hash = file_sha256(&dir.join(MANIFEST_FILE))?;
    Ok((load_dataset(dir)?, hash))
}

fn ingest(cfg: &RunConfig, inputs: &[PathBuf], out: &Path) -> Result<()> {
    for p in inputs {
        require_file(p)?;
    }
    let ic = &cfg.ingest;
    let (mut records, mut skipped, mut outside) = (Vec::new(), 0, 0);
    for p in inputs {
        let o = ais::parse_csv(p, &ic.bbox, &ic.columns)?;
        records.extend(o.records);
        skipped += o.skipped;
        outside += o.out_of_bounds;
    }
    let parsed = records.len();
    let mut records = ais::clean(&records, &ic.cleaning);
    if let Some(cap) = ic.per_type_cap {
        records = ais::cap_per_type(&records, cap, cfg.seed);
    }
    let segments: Vec<Trajectory> =
        ais::group_by_vessel(&records).iter().flat_map(|t| ais::segment(t, &ic.segment)).collect();
    let files = write_store(out, &segments)?;
    eprintln!(
        "ingest: {parsed} records ({skipped} unparsable, {outside} outside the box), {} kept, {} segments in {} files",
        records.len(),
        segments.len(),
        files.len()
    );
    Ok(())
}

fn synth(cfg: &RunConfig, out: &Path) -> Result<()> {
    let fleet = synthetic::generate(&cfg.fleet)?;
    let files = write_store(out, &fleet)?;
    eprintln!("synth: {} vessels written to {}", files.len(), out.display());
    Ok(())
}

fn preprocess(cfg: &RunConfig, input: &Path, out: &Path) -> Result<()> {
    require_dir(input)?;
    let mut uniform = Vec::new();
    let mut dropped = 0;
    for traj in read_store(input)? {
        let parts = ais::split_at_gaps(&traj, cfg.ingest.segment.max_gap_s);
        let many = parts.len() > 1;
        for (k, mut part) in parts.into_iter().enumerate() {
            if many {
                part.vessel_id = format!("{}-s{k}", part.vessel_id);
            }
            match resample(&part, cfg.dataset.interval_s) {
                Ok(t) => uniform.push(t),
                Err(Error::TooShort { .. }) => dropped += 1,
                Err(e) => return Err(e),
            }
        }
    }
    let mut ds = build_dataset(uniform, &cfg.dataset, &cfg.split)?;
    ds.sources = vec![input.display().to_string()];
    ds.seed = Some(cfg.seed);
    let m = save_dataset(out, &ds)?;
    eprintln!(
        "preprocess: {} trajectories ({dropped} too short), windows train/val/test = {}/{}/{}",
        m.trajectories.len(),
        m.train_windows,
        m.val_windows,
        m.test_windows
    );
    Ok(())
}

fn train_cmd(cfg: &RunConfig, dataset: &Path, out: &Path) -> Result<()> {
    let (ds, ds_hash) = dataset_with_hash(dataset)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let model = cfg.model.clone().with_spec(&ds.spec);
    let result = train_with(&ds, &model, &cfg.train, Some(out), &mut |r| {
        eprintln!(
            "epoch {:>3}  lr {:.3e}  train {:.6}  val {:.6}  ({:.1} s)",
            r.epoch, r.lr, r.train_loss, r.val_loss, r.wall_s
        )
    })?;
    let ck_path = out.join(CHECKPOINT_FILE);
    checkpoint::save(&ck_path, &result.net.cfg, &ds.stats, &result.params)?;
    let manifest = TrainManifest {
        seed: cfg.seed,
        config: cfg.clone(),
        dataset_manifest_sha256: ds_hash,
        checkpoint_sha256: file_sha256(&ck_path)?,
        log: result.log,
    };
    write_json(&out.join(TRAIN_MANIFEST_FILE), &manifest)?;
    eprintln!(
        "train: best epoch {} ({:?}); checkpoint {}",
        manifest.log.best_epoch,
        manifest.log.stop_reason,
        ck_path.display()
    );
    Ok(())
}

fn load_pair(dataset: &Path, ck: &Path) -> Result<(Dataset, String, Checkpoint, String)> {
    require_file(ck)?;
    let (ds, ds_hash) = dataset_with_hash(dataset)?;
    let model = checkpoint::load(ck)?;
    if model.stats != ds.stats {
        return Err(Error::Format(format!(
            "{} was trained with different normalization than {}",
            ck.display(),
            dataset.display()
        )));
    }
    let ck_hash = file_sha256(ck)?;
    Ok((ds, ds_hash, model, ck_hash))
}

fn evaluate_cmd(cfg: &RunConfig, dataset: &Path, ck: &Path, out: &Path) -> Result<()> {
    let (ds, ds_hash, model, ck_hash) = load_pair(dataset, ck)?;
    let report = evaluate(&model.net, &model.params, &ds, cfg.eval.corner_mode, cfg.seed)?;
    let text = report.to_text();
    write_atomic(&out.join("report.txt"), text.as_bytes())?;
    let doc = EvaluateOutput { seed: cfg.seed, dataset_manifest_sha256: ds_hash, checkpoint_sha256: ck_hash, report };
    write_json(&out.join("report.json"), &doc)?;
    print!("{text}");
    Ok(())
}

fn pick_sample<'a>(ds: &'a Dataset, w: &WindowArgs) -> Result<&'a Sample> {
    let split = match w.split {
        SplitArg::Train => &ds.train,
        SplitArg::Val => &ds.val,
        SplitArg::Test => &ds.test,
    };
    split.get(w.window).ok_or_else(|| {
        Error::Config(format!("window {} out of range; the {:?} split has {} windows", w.window, w.split, split.len()))
    })
}

/// Predicted track of one window, in the store's trajectory format.
fn predicted_track(model: &Checkpoint, sample: &Sample, seed: u64, window: usize) -> Result<Trajectory> {
    let input = ModelInput::from_sample(sample, &model.config);
    let z = model.net.predict(&model.params, &input, eval_seed(seed, window))?;
    let target = LossTarget::from_sample(sample, &model.stats, model.config.loss_correction);
    let track = predict_track(&z, &target)?;
    let t0 = sample.points[sample.spec.enc_len].t;
    let points = (0..track.lon.len())
        .map(|i| TrajectoryPoint {
            t: t0 + chrono::Duration::seconds(sample.spec.interval_s * (i as i64 + 1)),
            lon: track.lon[i],
            lat: track.lat[i],
            sog: track.sog[i],
            cog: track.cog[i],
            heading: track.cog[i],
        })
        .collect();
    Ok(Trajectory::new(format!("{}-pred", sample.vessel_id), points, sample.spec.interval_s))
}

fn predict_cmd(cfg: &RunConfig, w: &WindowArgs, ck: &Path, out: &Path) -> Result<()> {
    let (ds, _, model, _) = load_pair(&w.dataset, ck)?;
    let sample = pick_sample(&ds, w)?;
    let traj = predicted_track(&model, sample, cfg.seed, w.window)?;
    if let Some(dir) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    write_trajectory(out, &traj)?;
    eprintln!("predict: {} steps written to {}", traj.len(), out.display());
    Ok(())
}

fn grid_cmd(cfg: &RunConfig, dataset: &Path, out: &Path, param: Option<SweepParam>) -> Result<()> {
    let (ds, ds_hash) = dataset_with_hash(dataset)?;
    let model = cfg.model.clone().with_spec(&ds.spec);
    let (rows, stem) = match param {
        Some(p) => (evaluation::sweep(&ds, p, &model, &cfg.train, cfg.eval.corner_mode)?, "sweep"),
        None => (evaluation::ablation_grid(&ds, &model, &cfg.train, cfg.eval.corner_mode)?, "ablation"),
    };
    let text = grid_table(&rows);
    write_atomic(&out.join(format!("{stem}.txt")), text.as_bytes())?;
    write_json(&out.join(format!("{stem}.json")), &GridOutput { seed: cfg.seed, dataset_manifest_sha256: ds_hash, rows })?;
    print!("{text}");
    Ok(())
}

fn plot_cmd(cfg: &RunConfig, cmd: &PlotCommand) -> Result<()> {
    let (out, content) = match cmd {
        PlotCommand::Track { window, checkpoint, prediction, out } => {
            let (ds, sample, pred) = match prediction {
                Some(p) => {
                    require_file(p)?;
                    let (ds, _) = dataset_with_hash(&window.dataset)?;
                    let sample = pick_sample(&ds, window)?.clone();
                    (ds, sample, read_trajectory(p)?)
                }
                None => {
                    let ck = checkpoint.as_deref().expect("clap requires one of the two");
                    let (ds, _, model, _) = load_pair(&window.dataset, ck)?;
                    let sample = pick_sample(&ds, window)?.clone();
                    let pred = predicted_track(&model, &sample, cfg.seed, window.window)?;
                    (ds, sample, pred)
                }
            };
            drop(ds);
            (out, track_figure(&sample, &pred)?)
        }
        PlotCommand::Curve { report, out } => {
            require_file(report)?;
            let doc: GridOutput = read_json(report)?;
            let pts = |f: fn(&GridRow) -> f64| -> Vec<(f64, f64)> {
                doc.rows.iter().filter_map(|r| r.value.map(|v| (v, f(r)))).collect()
            };
            let series = [
                Series::new("test DIS", "#1f77b4", pts(|r| r.report.overall.dis_km)).with_markers(),
                Series::new("corner DIS", "#d62728", pts(|r| r.report.corner.dis_km)).with_markers(),
            ];
            (out, line_svg("DIS against swept value", "value", "DIS (km)", &series))
        }
        PlotCommand::Loss { manifest, out } => {
            require_file(manifest)?;
            let m: TrainManifest = read_json(manifest)?;
            let pts = |f: fn(&crate::training::EpochRecord) -> f64| -> Vec<(f64, f64)> {
                m.log.epochs.iter().map(|e| (e.epoch as f64, f(e))).collect()
            };
            let series = [
                Series::new("train", "#1f77b4", pts(|e| e.train_loss)).with_markers(),
                Series::new("validation", "#d62728", pts(|e| e.val_loss)).with_markers(),
            ];
            (out, line_svg("Loss per epoch", "epoch", "loss", &series))
        }
        PlotCommand::Atm { window, step, out } => {
            let (ds, _) = dataset_with_hash(&window.dataset)?;
            let sample = pick_sample(&ds, window)?;
            if *step >= sample.spec.enc_len {
                return Err(Error::Config(format!("step {step} out of range; encoder has {} steps", sample.spec.enc_len)));
            }
            let (p, next) = sample.enc_pair(*step);
            (out, atm_to_csv(&build_atm(p, next, &cfg.model.atm).cells))
        }
    };
    write_atomic(out, content.as_bytes())?;
    eprintln!("plot: wrote {}", out.display());
    Ok(())
}

fn track_figure(sample: &Sample, pred: &Trajectory) -> Result<String> {
    let enc = sample.spec.enc_len;
    let history: Vec<(f64, f64)> = sample.points[..=enc].iter().map(|p| (p.lon, p.lat)).collect();
    let origin = history[enc];
    let with_origin = |rows: Vec<(f64, f64)>| std::iter::once(origin).chain(rows).collect::<Vec<_>>();
    let truth = with_origin(sample.y.rows().into_iter().map(|r| (r[0], r[1])).collect());
    let cv = constant_velocity_baseline(sample)?;
    let cv = with_origin(cv.rows().into_iter().map(|r| (r[0], r[1])).collect());
    let predicted = with_origin(pred.points.iter().map(|p| (p.lon, p.lat)).collect());
    let series = [
        Series::new("history", "#7f7f7f", history),
        Series::new("truth", "black", truth).with_markers(),
        Series::new("prediction", "#d62728", predicted).with_markers(),
        Series::new("constant velocity", "#1f77b4", cv),
    ];
    Ok(track_svg(&format!("{} from {}", sample.vessel_id, crate::trajectory::format_timestamp(&sample.points[enc].t)), &series))
}
