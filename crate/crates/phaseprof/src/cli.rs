//! The `phaseprof` command line: synthesize or collocate data, train,
//! predict, evaluate, render reports.
//!
//! Exit codes: 0 success, 1 usage or I/O error, 2 degenerate-metric
//! warning, 3 numerical failure (non-finite values). Every command
//! writes one run manifest alongside its outputs. `PHASEPROF_THREADS`
//! caps worker threads for scene-parallel stages.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use crate::colloc::{self, CollocError, LabeledPatch, NUM_LAYERS, SENTINEL};
use crate::io::{self, config, cpck, cptx, manifest::RunManifest, scene, tracks, IoError};
use crate::metrics::{self, MetricsError, NamedReport, StripData};
use crate::model::{Arch, ModelConfig, ModelError, ModelParameters};
use crate::synth::{self, SynthError};
use crate::tensor::{Graph, TensorError};
use crate::train::{self, TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Colloc(#[from] CollocError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Tensor(TensorError::NonFinite { .. })
            | CliError::Tensor(TensorError::NonFiniteGradient { .. })
            | CliError::Train(TrainError::NonFinite { .. }) => 3,
            CliError::Metrics(MetricsError::KappaUndefined) => 2,
            _ => 1,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

/// Command outcome: success, or success with degenerate-metric warnings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Clean,
    DegenerateMetrics,
}

#[derive(Parser, Debug)]
#[command(
    name = "phaseprof",
    version,
    about = "3D cloud-phase profile reconstruction from imager patches"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Match profiler tracks to imager scenes and cut labeled patches.
    Collocate(CollocateArgs),
    /// Generate synthetic labeled patches with dense truth attached.
    Synth(SynthArgs),
    /// Train a model on a CPTX patch file.
    Train(TrainArgs),
    /// Predict class volumes for every patch in a CPTX file.
    Predict(PredictArgs),
    /// Evaluate predictions against labeled patches.
    Eval(EvalArgs),
    /// Render metric tables and profile strips from eval outputs.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct CollocateArgs {
    /// Directory of scene .json/.bin pairs.
    #[arg(long)]
    scenes: PathBuf,
    /// Profiler track CSV.
    #[arg(long)]
    tracks: PathBuf,
    /// Temporal matching half-window in minutes.
    #[arg(long, default_value_t = 5)]
    window_min: u32,
    /// Patch edge length in pixels.
    #[arg(long, default_value_t = 128)]
    patch: usize,
    /// Tiling stride; defaults to the patch size (non-overlapping).
    #[arg(long)]
    stride: Option<usize>,
    /// Output CPTX file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Number of patches to generate.
    #[arg(long)]
    scenes: usize,
    /// Patch edge length in pixels.
    #[arg(long, default_value_t = 128)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Cloud blob count range, e.g. "40,55".
    #[arg(long)]
    clouds: Option<String>,
    /// Channel noise sigma.
    #[arg(long)]
    noise: Option<f64>,
    /// Output CPTX file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Input CPTX patch file.
    #[arg(long)]
    data: PathBuf,
    /// INI config with model and training keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Architecture: sgmagnet or baseline.
    #[arg(long)]
    arch: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Train against dense truth (full mask) instead of sparse labels.
    #[arg(long, default_value_t = false)]
    dense: bool,
    /// Extra key=value overrides applied after the config file.
    #[arg(long = "set")]
    set: Vec<String>,
    /// Output directory for best.cpck, model.ini, log.csv.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct PredictArgs {
    /// Training output directory (best.cpck + model.ini).
    #[arg(long)]
    ckpt: PathBuf,
    /// Input CPTX patch file.
    #[arg(long)]
    data: PathBuf,
    /// Output CPTX file of predicted class volumes.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Predictions CPTX (from `phaseprof predict`).
    #[arg(long)]
    pred: PathBuf,
    /// Labeled data CPTX the predictions are judged against.
    #[arg(long)]
    data: PathBuf,
    /// Evaluate against dense truth over all pixels instead of the mask.
    #[arg(long, default_value_t = false)]
    dense: bool,
    /// Model name used in reports; defaults to the prediction file stem.
    #[arg(long)]
    name: Option<String>,
    /// Output directory for metrics_<name>.json.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Directory holding metrics_*.json files.
    #[arg(long = "in")]
    input: PathBuf,
    /// Output directory for CSV tables and strip images.
    #[arg(long)]
    out: PathBuf,
}

/// Entry point for the binary; returns the process exit code.
pub fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(Outcome::Clean) => ExitCode::SUCCESS,
        Ok(Outcome::DegenerateMetrics) => {
            eprintln!(
                "warning: degenerate metrics encountered (zero denominators or absent classes)"
            );
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(command: Command) -> Result<Outcome> {
    match command {
        Command::Collocate(args) => cmd_collocate(args),
        Command::Synth(args) => cmd_synth(args),
        Command::Train(args) => cmd_train(args),
        Command::Predict(args) => cmd_predict(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Report(args) => cmd_report(args),
    }
}

fn file_manifest_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    out.with_file_name(name)
}

fn cmd_collocate(args: CollocateArgs) -> Result<Outcome> {
    let mut m = RunManifest::start("collocate");
    m.inputs = vec![
        args.scenes.display().to_string(),
        args.tracks.display().to_string(),
    ];
    let scenes = scene::load_scene_dir(&args.scenes)?;
    let shots = tracks::load_tracks(&args.tracks)?;
    let stride = args.stride.unwrap_or(args.patch);
    let (patches, stats) = colloc::collocate(
        &scenes,
        &shots,
        args.window_min as i64 * 60,
        args.patch,
        stride,
    )?;
    cptx::save_patches(&args.out, &patches)?;
    println!(
        "matched {} of {} shots onto {} pixels; {} patches, mask density {:.6}",
        stats.shots_matched,
        stats.shots_total,
        stats.pixels_labeled,
        stats.patches,
        stats.mask_density
    );
    if patches.is_empty() {
        eprintln!("warning: no shots matched any scene; wrote an empty container");
    }
    m.outputs = vec![args.out.display().to_string()];
    m.finish(&file_manifest_path(&args.out))?;
    Ok(Outcome::Clean)
}

fn parse_clouds(raw: &str) -> Result<(u32, u32)> {
    let usage = || CliError::Usage(format!("--clouds expects MIN,MAX, got '{raw}'"));
    let (lo, hi) = raw.split_once(',').ok_or_else(usage)?;
    Ok((
        lo.trim().parse().map_err(|_| usage())?,
        hi.trim().parse().map_err(|_| usage())?,
    ))
}

fn cmd_synth(args: SynthArgs) -> Result<Outcome> {
    let mut m = RunManifest::start("synth");
    m.seed = Some(args.seed);
    let mut spec = synth::SceneSpec {
        seed: args.seed,
        height: args.size,
        width: args.size,
        ..synth::SceneSpec::default()
    };
    if let Some(raw) = &args.clouds {
        spec.cloud_count = parse_clouds(raw)?;
    }
    if let Some(sigma) = args.noise {
        spec.noise_sigma = sigma;
    }
    let patches = synth::synth_patches(&spec, args.scenes)?;
    cptx::save_patches(&args.out, &patches)?;
    let masked: usize = patches.iter().map(|p| p.mask_count()).sum();
    println!(
        "wrote {} synthetic patches ({}x{}, {} track pixels) to {}",
        patches.len(),
        args.size,
        args.size,
        masked,
        args.out.display()
    );
    m.outputs = vec![args.out.display().to_string()];
    m.finish(&file_manifest_path(&args.out))?;
    Ok(Outcome::Clean)
}

fn cmd_train(args: TrainArgs) -> Result<Outcome> {
    let mut m = RunManifest::start("train");
    m.inputs = vec![args.data.display().to_string()];
    m.config = args.config.as_ref().map(|p| p.display().to_string());
    let patches = cptx::load_patches(&args.data)?;
    if patches.is_empty() {
        return Err(CliError::Train(TrainError::EmptyTrainSet));
    }
    let mut map: BTreeMap<String, String> = match &args.config {
        Some(path) => {
            let text =
                std::fs::read_to_string(path).map_err(|e| CliError::Io(io::io_err(path, e)))?;
            config::parse_ini(&text)?
        }
        None => BTreeMap::new(),
    };
    config::apply_overrides(&mut map, &args.set)?;
    // dedicated flags win over the file and --set
    if let Some(epochs) = args.epochs {
        map.insert("epochs".into(), epochs.to_string());
    }
    if let Some(seed) = args.seed {
        map.insert("seed".into(), seed.to_string());
    }
    if let Some(bs) = args.batch_size {
        map.insert("batch_size".into(), bs.to_string());
    }
    if args.dense {
        map.insert("dense".into(), "true".into());
    }
    if !map.contains_key("in_channels") {
        map.insert("in_channels".into(), patches[0].num_channels.to_string());
    }
    let arch: Arch = match &args.arch {
        Some(raw) => raw.parse()?,
        None => map
            .get("arch")
            .map(|s| s.parse())
            .transpose()?
            .unwrap_or(Arch::Sgmagnet),
    };
    let model_cfg = ModelConfig::from_map(&map)?;
    let train_cfg = TrainConfig::from_map(&map)?;
    m.seed = Some(train_cfg.seed);

    let (train_idx, val_idx, test_idx) =
        train::split_dataset(patches.len(), train_cfg.split, train_cfg.seed);
    let pick =
        |idx: &[usize]| -> Vec<LabeledPatch> { idx.iter().map(|&i| patches[i].clone()).collect() };
    let train_set = pick(&train_idx);
    let val_set = pick(&val_idx);
    std::fs::create_dir_all(&args.out).map_err(|e| CliError::Io(io::io_err(&args.out, e)))?;
    let splits = serde_json::json!({
        "train": train_idx,
        "val": val_idx,
        "test": test_idx,
    });
    let splits_path = args.out.join("splits.json");
    io::write_atomic(&splits_path, |w| {
        w.write_all(splits.to_string().as_bytes())
            .map_err(|e| io::io_err(&splits_path, e))
    })?;
    let outcome = train::train(
        arch,
        &model_cfg,
        &train_cfg,
        &train_set,
        &val_set,
        Some(&args.out),
    )?;
    let last = outcome.log.last();
    println!(
        "trained {} for {} epochs; final train loss {:.6}, best val loss {:.6}",
        arch,
        outcome.log.len(),
        last.map_or(f64::NAN, |l| l.train_loss),
        outcome.best_val
    );
    m.outputs = vec![
        args.out.join("best.cpck").display().to_string(),
        args.out.join("model.ini").display().to_string(),
        args.out.join("log.csv").display().to_string(),
    ];
    m.finish(&args.out.join("manifest.json"))?;
    Ok(Outcome::Clean)
}

/// Loads the model config + arch + parameters from a training output dir.
fn load_model(ckpt_dir: &Path) -> Result<(Arch, ModelConfig, ModelParameters)> {
    let ini_path = ckpt_dir.join("model.ini");
    let text =
        std::fs::read_to_string(&ini_path).map_err(|e| CliError::Io(io::io_err(&ini_path, e)))?;
    let map = config::parse_ini(&text)?;
    let arch: Arch = map
        .get("arch")
        .ok_or_else(|| CliError::Usage(format!("{}: missing 'arch' key", ini_path.display())))?
        .parse()?;
    let model_cfg = ModelConfig::from_map(&map)?;
    let ck = cpck::load_checkpoint(&ckpt_dir.join("best.cpck"))?;
    Ok((arch, model_cfg, ModelParameters::from_map(ck.params)))
}

fn cmd_predict(args: PredictArgs) -> Result<Outcome> {
    let mut m = RunManifest::start("predict");
    m.inputs = vec![
        args.ckpt.display().to_string(),
        args.data.display().to_string(),
    ];
    let (arch, model_cfg, params) = load_model(&args.ckpt)?;
    if model_cfg.height_dim != NUM_LAYERS {
        return Err(CliError::Usage(format!(
            "checkpoint was trained with {} layers, patch data always has {}",
            model_cfg.height_dim, NUM_LAYERS
        )));
    }
    let patches = cptx::load_patches(&args.data)?;
    let mut outputs = Vec::with_capacity(patches.len());
    for patch in &patches {
        if patch.num_channels != model_cfg.in_channels {
            return Err(CliError::Train(TrainError::ChannelMismatch {
                expected: model_cfg.in_channels,
                got: patch.num_channels,
            }));
        }
        let batch = train::assemble_batch(&[patch], false)?;
        let mut g = Graph::inference();
        let vars = params.register(&mut g);
        let x = g.leaf(&batch.x);
        let probs = crate::model::forward_arch(&mut g, arch, x, &vars, &model_cfg)?;
        let classes = metrics::argmax_classes(g.value(probs), g.shape(probs));
        outputs.push(LabeledPatch {
            channels: Vec::new(),
            num_channels: 0,
            height: patch.height,
            width: patch.width,
            labels: classes,
            mask: vec![true; patch.height * patch.width],
            dense: None,
        });
    }
    cptx::save_patches(&args.out, &outputs)?;
    println!(
        "predicted {} patches with {} -> {}",
        outputs.len(),
        arch,
        args.out.display()
    );
    m.outputs = vec![args.out.display().to_string()];
    m.finish(&file_manifest_path(&args.out))?;
    Ok(Outcome::Clean)
}

fn cmd_eval(args: EvalArgs) -> Result<Outcome> {
    let mut m = RunManifest::start("eval");
    m.inputs = vec![
        args.pred.display().to_string(),
        args.data.display().to_string(),
    ];
    let pred = cptx::load_patches(&args.pred)?;
    let data = cptx::load_patches(&args.data)?;
    if pred.len() != data.len() {
        return Err(CliError::Usage(format!(
            "prediction file has {} patches, data file {}",
            pred.len(),
            data.len()
        )));
    }
    let mut mask_cm = metrics::ConfusionMatrix::new(2);
    let mut phase_cm = metrics::ConfusionMatrix::new(4);
    let mut voxels = 0u64;
    let mut strip: Option<StripData> = None;
    for (p, d) in pred.iter().zip(data.iter()) {
        if (p.height, p.width) != (d.height, d.width) {
            return Err(CliError::Usage(format!(
                "patch size mismatch: prediction {}x{}, data {}x{}",
                p.height, p.width, d.height, d.width
            )));
        }
        let (truth, mask): (&[u8], Vec<bool>) = if args.dense {
            let dense = d
                .dense
                .as_ref()
                .ok_or(CliError::Train(TrainError::DenseUnavailable))?;
            (dense, vec![true; d.height * d.width])
        } else {
            (&d.labels, d.mask.clone())
        };
        voxels += metrics::accumulate(
            &p.labels,
            truth,
            &mask,
            (1, NUM_LAYERS, d.height, d.width),
            &mut mask_cm,
            &mut phase_cm,
        )?;
        if strip.is_none() && d.mask.iter().any(|&b| b) {
            strip = Some(build_strip(p, d, truth));
        }
    }
    if voxels == 0 {
        return Err(CliError::Metrics(MetricsError::EmptyMask));
    }
    let report = metrics::MetricsReport {
        mask: metrics::mask_metrics(&mask_cm)?,
        phase: metrics::phase_metrics(&phase_cm)?,
        voxels,
    };
    let name = args.name.clone().unwrap_or_else(|| {
        args.pred
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "model".to_string())
    });
    let degenerate = report.degenerate();
    let named = NamedReport {
        model: name.clone(),
        report,
        strip,
    };
    std::fs::create_dir_all(&args.out).map_err(|e| CliError::Io(io::io_err(&args.out, e)))?;
    let json_path = args.out.join(format!("metrics_{name}.json"));
    let text = serde_json::to_string_pretty(&named).expect("report serializes");
    io::write_atomic(&json_path, |w| {
        w.write_all(text.as_bytes())
            .map_err(|e| io::io_err(&json_path, e))
    })?;
    println!(
        "{name}: {} voxels, mask F1 {:.6}, balanced accuracy {:.6}, kappa {:.6}",
        named.report.voxels,
        named.report.mask.f1,
        named.report.phase.balanced_accuracy,
        named.report.phase.kappa
    );
    m.outputs = vec![json_path.display().to_string()];
    m.finish(&args.out.join(format!("eval_{name}.manifest.json")))?;
    Ok(if degenerate {
        Outcome::DegenerateMetrics
    } else {
        Outcome::Clean
    })
}

/// Pulls the along-track truth/prediction columns of one patch for the
/// strip figures (track pixels in row-major order, capped at 512).
fn build_strip(pred: &LabeledPatch, data: &LabeledPatch, truth: &[u8]) -> StripData {
    let hw = data.height * data.width;
    let track: Vec<usize> = (0..hw).filter(|&p| data.mask[p]).take(512).collect();
    let len = track.len();
    let mut t_cols = vec![0u8; NUM_LAYERS * len];
    let mut p_cols = vec![0u8; NUM_LAYERS * len];
    for (t, &pixel) in track.iter().enumerate() {
        for d in 0..NUM_LAYERS {
            let tv = truth[d * hw + pixel];
            t_cols[d * len + t] = if tv == SENTINEL { 0 } else { tv };
            p_cols[d * len + t] = pred.labels[d * hw + pixel];
        }
    }
    StripData {
        len,
        truth: t_cols,
        pred: p_cols,
    }
}

fn cmd_report(args: ReportArgs) -> Result<Outcome> {
    let mut m = RunManifest::start("report");
    m.inputs = vec![args.input.display().to_string()];
    let mut entries: Vec<PathBuf> = std::fs::read_dir(&args.input)
        .map_err(|e| CliError::Io(io::io_err(&args.input, e)))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .map(|n| n.to_string_lossy().starts_with("metrics_"))
                .unwrap_or(false)
                && p.extension().is_some_and(|e| e == "json")
        })
        .collect();
    entries.sort();
    if entries.is_empty() {
        return Err(CliError::Usage(format!(
            "no metrics_*.json files in {}",
            args.input.display()
        )));
    }
    let mut reports = BTreeMap::new();
    for path in &entries {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(io::io_err(path, e)))?;
        let named: NamedReport = serde_json::from_str(&text).map_err(|e| {
            CliError::Io(IoError::Invalid {
                path: path.display().to_string(),
                detail: e.to_string(),
            })
        })?;
        reports.insert(named.model.clone(), named);
    }
    let degenerate = metrics::render_report(&reports, &args.out)?;
    println!(
        "rendered {} model(s) into {}",
        reports.len(),
        args.out.display()
    );
    m.outputs = vec![
        args.out.join("mask_metrics.csv").display().to_string(),
        args.out.join("phase_metrics.csv").display().to_string(),
        args.out.join("per_class_metrics.csv").display().to_string(),
    ];
    m.finish(&args.out.join("report.manifest.json"))?;
    Ok(if degenerate {
        Outcome::DegenerateMetrics
    } else {
        Outcome::Clean
    })
}
