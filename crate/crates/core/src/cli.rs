//! The `segfilter` command line.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or configuration error,
//! 3 numerical failure.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::ensemble::{self, EnsembleOutput, Transform};
use crate::error::{Error, ErrorKind, Result};
use crate::gradcheck::{self, GradCheckConfig};
use crate::metrics;
use crate::nn::ModelParameters;
use crate::pipeline::{self, ExperimentConfig, ExperimentReport, SweepReport};
use crate::qualityfilter::{self, QualityFilterParams};
use crate::segmodel::{Image, LabelMask};
use crate::synthdata::{Dataset, Sample};
use crate::tensor::segt::SegtArray;
use crate::tensor::Tensor;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "segfilter",
    version,
    about = "Ensemble auto-annotation with a learned per-pixel quality filter"
)]
pub struct Cli {
    /// Print errors on stderr as a JSON object.
    #[arg(long, global = true)]
    pub json_errors: bool,
    /// Worker threads (default: available cores).
    #[arg(long, global = true, value_name = "N")]
    pub threads: Option<usize>,
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset directory.
    GenData(GenDataArgs),
    /// Train the ensemble members on the labeled subset.
    TrainEnsemble(TrainEnsembleArgs),
    /// Run the ensemble on a split and write fused labels.
    AutoAnnotate(AutoAnnotateArgs),
    /// Train the quality network on annotations of a labeled split.
    TrainFilter(TrainFilterArgs),
    /// Apply a trained quality network to auto-annotations.
    Filter(FilterArgs),
    /// Train a target model on the labeled subset plus optional auto-annotations.
    TrainTarget(TrainTargetArgs),
    /// Run the full labeled-only / unfiltered / filtered experiment.
    RunExperiment(RunExperimentArgs),
    /// Run the experiment for several labeled fractions.
    Sweep(SweepArgs),
    /// Render a report file as JSON, an aligned table or CSV.
    Report(ReportArgs),
    /// Check every layer's gradients against finite differences.
    GradCheck(GradCheckArgs),
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Experiment configuration JSON (defaults when omitted).
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override the master seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let load = || {
            let mut cfg = match &self.config {
                Some(p) => ExperimentConfig::load(p)?,
                None => ExperimentConfig::default(),
            };
            if let Some(s) = self.seed {
                cfg.seed = s;
            }
            cfg.validate()?;
            Ok(cfg)
        };
        load().map_err(|e| match e {
            Error::InvalidArgument(m) => Error::data(format!("configuration: {m}")),
            e => e,
        })
    }
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Output dataset directory.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainEnsembleArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Dataset directory written by gen-data.
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// Output directory for the member checkpoints.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitArg {
    Unlabeled,
    Labeled,
    Quality,
    Validation,
}

#[derive(Debug, Args)]
pub struct AutoAnnotateArgs {
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// Directory written by train-ensemble.
    #[arg(long, value_name = "DIR")]
    pub ensemble: PathBuf,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Which split to annotate.
    #[arg(long, value_enum, default_value = "unlabeled")]
    pub split: SplitArg,
    /// Also write every member's softmax maps (needed by train-filter and filter).
    #[arg(long)]
    pub keep_members: bool,
}

#[derive(Debug, Args)]
pub struct TrainFilterArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// auto-annotate output for a labeled or quality split, with members.
    #[arg(long, value_name = "DIR")]
    pub annotations: PathBuf,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FilterArgs {
    /// Directory written by train-filter.
    #[arg(long, value_name = "DIR")]
    pub filter: PathBuf,
    /// auto-annotate output with members.
    #[arg(long, value_name = "DIR")]
    pub annotations: PathBuf,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Override the keep threshold stored with the filter.
    #[arg(long)]
    pub threshold: Option<f32>,
}

#[derive(Debug, Args)]
pub struct TrainTargetArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// Auto-annotations of the unlabeled split to add (filter or auto-annotate output).
    #[arg(long, value_name = "DIR")]
    pub labels: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RunExperimentArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Use this dataset instead of generating one from the configuration.
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
    /// Run directory.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Skip writing model checkpoints.
    #[arg(long)]
    pub no_checkpoints: bool,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Comma-separated labeled fractions.
    #[arg(long, value_delimiter = ',', default_values_t = vec![1.0, 0.3, 0.15])]
    pub fractions: Vec<f64>,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ReportFormat {
    Json,
    Table,
    Csv,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// report.json or sweep.json from a run directory.
    #[arg(long, value_name = "FILE")]
    pub input: PathBuf,
    #[arg(long, value_enum, default_value = "table")]
    pub format: ReportFormat,
}

#[derive(Debug, Args)]
pub struct GradCheckArgs {
    /// Random cases per layer.
    #[arg(long, default_value_t = 32)]
    pub cases: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Finite-difference step.
    #[arg(long, default_value_t = 1e-3)]
    pub epsilon: f64,
    /// Largest accepted relative error.
    #[arg(long, default_value_t = 1e-3)]
    pub tolerance: f64,
    /// Print the full per-tensor results as JSON.
    #[arg(long)]
    pub json: bool,
}

/// Machine-readable error printed with `--json-errors`.
#[derive(Debug, Serialize)]
struct ErrorJson<'a> {
    kind: &'a str,
    exit_code: i32,
    message: String,
}

fn exit_code(e: &Error) -> i32 {
    match e.kind() {
        ErrorKind::Usage => EXIT_USAGE,
        ErrorKind::Data => EXIT_DATA,
        ErrorKind::Numerical => EXIT_NUMERICAL,
    }
}

fn report_error(json: bool, kind: &str, code: i32, message: String) {
    if json {
        let e = ErrorJson {
            kind,
            exit_code: code,
            message,
        };
        eprintln!("{}", serde_json::to_string(&e).expect("error serializes"));
    } else {
        eprintln!("error: {message}");
    }
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let json_errors = args.iter().any(|a| a == "--json-errors");
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind as K;
            if matches!(e.kind(), K::DisplayHelp | K::DisplayVersion) {
                print!("{e}");
                return EXIT_OK;
            }
            if json_errors {
                report_error(true, "usage", EXIT_USAGE, e.kind().to_string());
            } else {
                eprint!("{e}");
            }
            return EXIT_USAGE;
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .try_init();
    if let Some(n) = cli.threads {
        if n == 0 {
            report_error(json_errors, "usage", EXIT_USAGE, "--threads must be at least 1".into());
            return EXIT_USAGE;
        }
        // A global pool can only be installed once per process.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match dispatch(&cli.command) {
        Ok(code) => code,
        Err(e) => {
            let code = exit_code(&e);
            let kind = match e.kind() {
                ErrorKind::Usage => "usage",
                ErrorKind::Data => "data",
                ErrorKind::Numerical => "numerical",
            };
            report_error(cli.json_errors, kind, code, e.to_string());
            code
        }
    }
}

fn dispatch(cmd: &Command) -> Result<i32> {
    match cmd {
        Command::GenData(a) => gen_data(a),
        Command::TrainEnsemble(a) => train_ensemble(a),
        Command::AutoAnnotate(a) => auto_annotate(a),
        Command::TrainFilter(a) => train_filter(a),
        Command::Filter(a) => filter(a),
        Command::TrainTarget(a) => train_target(a),
        Command::RunExperiment(a) => run_experiment(a),
        Command::Sweep(a) => sweep(a),
        Command::Report(a) => report(a),
        Command::GradCheck(a) => grad_check(a),
    }
    .map(|()| EXIT_OK)
    .or_else(|e| match e {
        // grad-check signals failed checks through this variant.
        Error::Numerical(ref m) if m == GRADCHECK_FAILED => Ok(EXIT_NUMERICAL),
        e => Err(e),
    })
}

const GRADCHECK_FAILED: &str = "gradient check failed";

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Refuses to write into an input directory.
fn check_out(out: &Path, inputs: &[&Path]) -> Result<()> {
    let abs = |p: &Path| std::fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf());
    for i in inputs {
        if abs(out) == abs(i) {
            return Err(Error::invalid(format!(
                "--out {} would overwrite an input",
                out.display()
            )));
        }
    }
    Ok(())
}

fn gen_data(a: &GenDataArgs) -> Result<()> {
    let cfg = a.config.load()?;
    let ds = cfg.generate_dataset()?;
    ds.save(&a.out)?;
    println!(
        "wrote {} samples to {}",
        ds.labeled.len() + ds.quality.len() + ds.validation.len() + ds.unlabeled.len(),
        a.out.display()
    );
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct EnsembleMeta {
    num_models: usize,
    transforms: Vec<Transform>,
    labeled_ids: Vec<usize>,
    base_seed: u64,
    config_hash: String,
}

const ENSEMBLE_FILE: &str = "ensemble.json";

fn load_ensemble(dir: &Path) -> Result<(EnsembleMeta, Vec<ModelParameters>)> {
    let meta: EnsembleMeta = read_json(&dir.join(ENSEMBLE_FILE))?;
    let members = (0..meta.num_models)
        .map(|i| ModelParameters::load(dir.join(format!("model_{i}"))))
        .collect::<Result<_>>()?;
    Ok((meta, members))
}

fn labeled_subset<'a>(cfg: &ExperimentConfig, ds: &'a Dataset) -> Result<Vec<&'a Sample>> {
    Ok(pipeline::select_labeled(cfg, ds)?
        .into_iter()
        .map(|i| &ds.labeled[i])
        .collect())
}

fn train_ensemble(a: &TrainEnsembleArgs) -> Result<()> {
    let cfg = a.config.load()?;
    check_out(&a.out, &[&a.data])?;
    let ds = Dataset::load(&a.data)?;
    check_classes(&cfg, &ds)?;
    let subset = labeled_subset(&cfg, &ds)?;
    let data: Vec<(&Image, &LabelMask)> = subset.iter().map(|s| (&s.image, &s.label)).collect();
    let seed = cfg.ensemble_seed(0);
    let members = ensemble::train_ensemble(&data, cfg.num_models, &cfg.segnet, &cfg.ensemble_hyper, seed)?;
    std::fs::create_dir_all(&a.out)?;
    for (i, m) in members.iter().enumerate() {
        m.save(a.out.join(format!("model_{i}")))?;
    }
    write_json(
        &a.out.join(ENSEMBLE_FILE),
        &EnsembleMeta {
            num_models: cfg.num_models,
            transforms: cfg.transforms.clone(),
            labeled_ids: subset.iter().map(|s| s.id).collect(),
            base_seed: seed,
            config_hash: cfg.hash(),
        },
    )?;
    println!("trained {} members on {} labeled images", members.len(), subset.len());
    Ok(())
}

fn check_classes(cfg: &ExperimentConfig, ds: &Dataset) -> Result<()> {
    if ds.scene.num_classes != cfg.scene.num_classes {
        return Err(Error::data(format!(
            "dataset has {} classes, configuration {}",
            ds.scene.num_classes, cfg.scene.num_classes
        )));
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct AnnotationMeta {
    split: SplitArg,
    ids: Vec<usize>,
    num_models: usize,
    num_transforms: usize,
    num_classes: usize,
    members: bool,
}

const ANNOTATIONS_FILE: &str = "annotations.json";

fn split_images(ds: &Dataset, split: SplitArg) -> Vec<(usize, &Image)> {
    match split {
        SplitArg::Unlabeled => ds.unlabeled.ids().iter().copied().zip(ds.unlabeled.images()).collect(),
        SplitArg::Labeled => ds.labeled.iter().map(|s| (s.id, &s.image)).collect(),
        SplitArg::Quality => ds.quality.iter().map(|s| (s.id, &s.image)).collect(),
        SplitArg::Validation => ds.validation.iter().map(|s| (s.id, &s.image)).collect(),
    }
}

fn auto_annotate(a: &AutoAnnotateArgs) -> Result<()> {
    check_out(&a.out, &[&a.data, &a.ensemble])?;
    let ds = Dataset::load(&a.data)?;
    let (meta, members) = load_ensemble(&a.ensemble)?;
    let images = split_images(&ds, a.split);
    std::fs::create_dir_all(&a.out)?;
    for (id, image) in &images {
        let e_out = ensemble::ensemble_infer(&members, &meta.transforms, image)?;
        let (fused, _) = ensemble::fuse(&e_out)?;
        save_mask(&fused, &a.out.join(format!("fused_{id}.segt")))?;
        if a.keep_members {
            e_out.to_stacked().save_segt(a.out.join(format!("members_{id}.segt")))?;
        }
    }
    write_json(
        &a.out.join(ANNOTATIONS_FILE),
        &AnnotationMeta {
            split: a.split,
            ids: images.iter().map(|(id, _)| *id).collect(),
            num_models: meta.num_models,
            num_transforms: meta.transforms.len(),
            num_classes: ds.scene.num_classes,
            members: a.keep_members,
        },
    )?;
    println!("annotated {} images", images.len());
    Ok(())
}

fn save_mask(mask: &LabelMask, path: &Path) -> Result<()> {
    SegtArray::u8(vec![mask.height(), mask.width()], mask.data().to_vec())?.save(path)
}

fn load_mask(path: &Path) -> Result<LabelMask> {
    let (shape, data) = SegtArray::load(path)?.into_u8()?;
    match shape[..] {
        [h, w] => LabelMask::new(h, w, data),
        _ => Err(Error::Format(format!("{}: expected a 2-D mask", path.display()))),
    }
}

fn load_members(dir: &Path, meta: &AnnotationMeta, id: usize) -> Result<EnsembleOutput> {
    if !meta.members {
        return Err(Error::data(format!(
            "{} has no member maps; rerun auto-annotate with --keep-members",
            dir.display()
        )));
    }
    let stacked = Tensor::load_segt(dir.join(format!("members_{id}.segt")))?;
    EnsembleOutput::from_stacked(&stacked, meta.num_models, meta.num_transforms)
}

fn train_filter(a: &TrainFilterArgs) -> Result<()> {
    let cfg = a.config.load()?;
    check_out(&a.out, &[&a.data, &a.annotations])?;
    let ds = Dataset::load(&a.data)?;
    let meta: AnnotationMeta = read_json(&a.annotations.join(ANNOTATIONS_FILE))?;
    let truth: Vec<&Sample> = match meta.split {
        SplitArg::Labeled => ds.labeled.iter().collect(),
        SplitArg::Quality => ds.quality.iter().collect(),
        SplitArg::Validation | SplitArg::Unlabeled => {
            return Err(Error::invalid(format!(
                "the quality network trains on the labeled or quality split, not {:?}",
                meta.split
            )))
        }
    };
    let mut qset = Vec::with_capacity(meta.ids.len());
    for id in &meta.ids {
        let sample = truth
            .iter()
            .find(|s| s.id == *id)
            .ok_or_else(|| Error::data(format!("sample {id} not in the dataset split")))?;
        let e_out = load_members(&a.annotations, &meta, *id)?;
        let fused = load_mask(&a.annotations.join(format!("fused_{id}.segt")))?;
        qset.push((e_out, qualityfilter::build_quality_target(&fused, &sample.label)?));
    }
    let (params, log) = qualityfilter::train_quality_filter(&qset, &cfg.quality, &mut cfg.quality_rng(0))?;
    params.save(&a.out)?;
    println!(
        "trained quality filter on {} images, final loss {:.4}",
        qset.len(),
        log.step_losses.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct FilterSidecar {
    id: usize,
    threshold: f32,
    /// Fraction of pixels kept (ground truth is not consulted).
    retention: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct FilteredMeta {
    ids: Vec<usize>,
    threshold: f32,
}

const FILTERED_FILE: &str = "filtered.json";

fn filter(a: &FilterArgs) -> Result<()> {
    check_out(&a.out, &[&a.filter, &a.annotations])?;
    let mut params = QualityFilterParams::load(&a.filter)?;
    if let Some(t) = a.threshold {
        params = params.with_threshold(t)?;
    }
    let meta: AnnotationMeta = read_json(&a.annotations.join(ANNOTATIONS_FILE))?;
    std::fs::create_dir_all(&a.out)?;
    let mut kept_total = 0.0;
    for &id in &meta.ids {
        let e_out = load_members(&a.annotations, &meta, id)?;
        let fused = load_mask(&a.annotations.join(format!("fused_{id}.segt")))?;
        let (_, mask) = qualityfilter::predict_quality(&params, &e_out)?;
        let filtered = qualityfilter::apply_filter(&fused, &mask)?;
        SegtArray::u8(vec![mask.height(), mask.width()], mask.data().to_vec())?
            .save(a.out.join(format!("quality_{id}.segt")))?;
        save_mask(&filtered, &a.out.join(format!("filtered_{id}.segt")))?;
        let retention = mask.kept() as f64 / mask.data().len() as f64;
        kept_total += retention;
        write_json(
            &a.out.join(format!("filtered_{id}.json")),
            &FilterSidecar {
                id,
                threshold: params.threshold,
                retention,
            },
        )?;
    }
    write_json(
        &a.out.join(FILTERED_FILE),
        &FilteredMeta {
            ids: meta.ids.clone(),
            threshold: params.threshold,
        },
    )?;
    println!(
        "filtered {} annotations, mean retention {:.3}",
        meta.ids.len(),
        kept_total / meta.ids.len().max(1) as f64
    );
    Ok(())
}

/// Reads auto-annotations of the unlabeled split from a filter or
/// auto-annotate directory.
fn load_auto_labels(dir: &Path, ds: &Dataset) -> Result<Vec<LabelMask>> {
    let (ids, prefix) = if dir.join(FILTERED_FILE).exists() {
        (read_json::<FilteredMeta>(&dir.join(FILTERED_FILE))?.ids, "filtered")
    } else {
        let meta: AnnotationMeta = read_json(&dir.join(ANNOTATIONS_FILE))?;
        if meta.split != SplitArg::Unlabeled {
            return Err(Error::invalid("auto-annotations must cover the unlabeled split"));
        }
        (meta.ids, "fused")
    };
    if ids != ds.unlabeled.ids() {
        return Err(Error::data("auto-annotation ids do not match the unlabeled split"));
    }
    ids.iter()
        .map(|id| load_mask(&dir.join(format!("{prefix}_{id}.segt"))))
        .collect()
}

#[derive(Debug, Serialize)]
struct TargetMetrics {
    train_images: usize,
    train_pixels: u64,
    validation_ids: Vec<usize>,
    iou: metrics::IouReport,
}

fn train_target(a: &TrainTargetArgs) -> Result<()> {
    let cfg = a.config.load()?;
    let mut inputs: Vec<&Path> = vec![&a.data];
    if let Some(l) = &a.labels {
        inputs.push(l);
    }
    check_out(&a.out, &inputs)?;
    let ds = Dataset::load(&a.data)?;
    check_classes(&cfg, &ds)?;
    let subset = labeled_subset(&cfg, &ds)?;
    let auto = match &a.labels {
        Some(dir) => load_auto_labels(dir, &ds)?,
        None => Vec::new(),
    };
    let mut data: Vec<(&Image, &LabelMask)> = subset.iter().map(|s| (&s.image, &s.label)).collect();
    data.extend(ds.unlabeled.images().iter().zip(&auto));
    let model = pipeline::train_target(&cfg, &data, None)?;
    let cm = pipeline::evaluate(&model, &ds.validation, ds.scene.num_classes)?;
    let iou = metrics::iou(&cm)?;
    model.save(a.out.join("model"))?;
    write_json(
        &a.out.join("metrics.json"),
        &TargetMetrics {
            train_images: data.len(),
            train_pixels: data.iter().map(|(_, m)| m.labeled_pixels() as u64).sum(),
            validation_ids: ds.validation.iter().map(|s| s.id).collect(),
            iou: iou.clone(),
        },
    )?;
    println!("validation mIoU {:.2}", 100.0 * iou.miou);
    Ok(())
}

/// Provenance written next to every experiment output.
#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub seed: u64,
    pub crate_version: String,
    pub report_schema_version: u32,
    pub created_unix: u64,
    pub files: Vec<String>,
}

fn write_manifest(out: &Path, cfg: &ExperimentConfig, files: Vec<String>) -> Result<()> {
    let created_unix = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    write_json(
        &out.join("run_manifest.json"),
        &RunManifest {
            config_hash: cfg.hash(),
            seed: cfg.seed,
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
            report_schema_version: pipeline::REPORT_SCHEMA_VERSION,
            created_unix,
            files,
        },
    )
}

fn run_experiment(a: &RunExperimentArgs) -> Result<()> {
    let cfg = a.config.load()?;
    if let Some(d) = &a.data {
        check_out(&a.out, &[d])?;
    }
    let ds = match &a.data {
        Some(d) => {
            let ds = Dataset::load(d)?;
            check_classes(&cfg, &ds)?;
            ds
        }
        None => cfg.generate_dataset()?,
    };
    let (report, state) = pipeline::run_experiment_on(&cfg, &ds)?;
    std::fs::create_dir_all(&a.out)?;
    write_json(&a.out.join("config.json"), &cfg)?;
    write_json(&a.out.join("report.json"), &report)?;
    let mut files = vec!["config.json".to_string(), "report.json".to_string()];
    if !a.no_checkpoints {
        if let Some(ck) = &state.checkpoints {
            let root = a.out.join("checkpoints");
            for (i, m) in ck.ensemble.iter().enumerate() {
                m.save(root.join(format!("ensemble/model_{i}")))?;
            }
            ck.filter.save(root.join("filter"))?;
            for (name, m) in &ck.targets {
                m.save(root.join(format!("target_{name}")))?;
            }
            files.push("checkpoints".into());
        }
    }
    write_manifest(&a.out, &cfg, files)?;
    print!("{}", render_experiment_table(&report));
    Ok(())
}

fn sweep(a: &SweepArgs) -> Result<()> {
    let cfg = a.config.load()?;
    let report = pipeline::run_fraction_sweep(&cfg, &a.fractions)?;
    std::fs::create_dir_all(&a.out)?;
    write_json(&a.out.join("config.json"), &cfg)?;
    write_json(&a.out.join("sweep.json"), &report)?;
    write_manifest(&a.out, &cfg, vec!["config.json".into(), "sweep.json".into()])?;
    print!("{}", render_sweep_table(&report));
    Ok(())
}

/// Either report shape, told apart by its fields.
#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum AnyReport {
    Sweep(SweepReport),
    Experiment(ExperimentReport),
}

fn report(a: &ReportArgs) -> Result<()> {
    let parsed: AnyReport = read_json(&a.input)?;
    let text = match (&parsed, a.format) {
        (AnyReport::Experiment(r), ReportFormat::Json) => serde_json::to_string_pretty(r)? + "\n",
        (AnyReport::Sweep(r), ReportFormat::Json) => serde_json::to_string_pretty(r)? + "\n",
        (AnyReport::Experiment(r), ReportFormat::Table) => render_experiment_table(r),
        (AnyReport::Sweep(r), ReportFormat::Table) => render_sweep_table(r),
        (AnyReport::Experiment(r), ReportFormat::Csv) => render_experiment_csv(r),
        (AnyReport::Sweep(r), ReportFormat::Csv) => render_sweep_csv(r),
    };
    print!("{text}");
    Ok(())
}

fn pct(v: Option<f64>) -> String {
    v.map_or("-".into(), |v| format!("{:.1}", 100.0 * v))
}

/// Arm mIoUs, then the per-class precision and retention table.
pub fn render_experiment_table(r: &ExperimentReport) -> String {
    let mut s = String::new();
    for it in &r.iterations {
        let _ = writeln!(s, "iteration {} (labeled fraction {})", it.iteration, r.labeled_fraction);
        let _ = writeln!(s, "{:<14} {:>7}", "arm", "mIoU");
        for a in &it.arms {
            let _ = writeln!(s, "{:<14} {:>7.2}", a.name, 100.0 * a.iou.miou);
        }
        let _ = writeln!(s);
        let _ = writeln!(
            s,
            "{:<6} {:>9} {:>9} {:>9} {:>9} {:>9}",
            "class", "support", "prec_unf", "prec_fil", "retained", "iou_gain"
        );
        for c in &it.classes {
            let _ = writeln!(
                s,
                "{:<6} {:>9} {:>9} {:>9} {:>9} {:>9}",
                c.class,
                c.support,
                pct(c.precision_unfiltered),
                pct(c.precision_filtered),
                pct(c.retention),
                pct(c.iou_gain)
            );
        }
        if let Some(a) = &it.annotation {
            let _ = writeln!(s, "overall retention {:.1}%", 100.0 * a.retention.overall);
            let curve: Vec<String> = a.retention_curve.iter().map(|(t, v)| format!("{t:.1}:{:.1}", 100.0 * v)).collect();
            let _ = writeln!(s, "retention by threshold {}", curve.join(" "));
        }
        if let Some(c) = it.precision_iou_correlation {
            let _ = writeln!(s, "precision/IoU gain correlation {c:.2}");
        }
        let _ = writeln!(
            s,
            "log-likelihood before {:.1} after {:.1}",
            it.likelihood.before, it.likelihood.after
        );
    }
    s
}

pub fn render_sweep_table(r: &SweepReport) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<9} {:>13} {:>11} {:>9} {:>7}",
        "fraction", "labeled_only", "unfiltered", "filtered", "gain"
    );
    for e in &r.entries {
        let m = |a: &str| e.report.miou(a);
        let gain = m(pipeline::ARM_FILTERED).zip(m(pipeline::ARM_LABELED_ONLY)).map(|(f, b)| f - b);
        let _ = writeln!(
            s,
            "{:<9} {:>13} {:>11} {:>9} {:>7}",
            e.fraction,
            pct(m(pipeline::ARM_LABELED_ONLY)),
            pct(m(pipeline::ARM_UNFILTERED)),
            pct(m(pipeline::ARM_FILTERED)),
            pct(gain)
        );
    }
    s
}

fn csv_num(v: Option<f64>) -> String {
    v.map_or(String::new(), |v| format!("{v}"))
}

pub fn render_experiment_csv(r: &ExperimentReport) -> String {
    let mut s = String::new();
    let arms: Vec<&str> = r.last().arms.iter().map(|a| a.name.as_str()).collect();
    let mut header = vec!["iteration", "class", "support", "precision_unfiltered", "precision_filtered", "retention"];
    let iou_cols: Vec<String> = arms.iter().map(|a| format!("iou_{a}")).collect();
    header.extend(iou_cols.iter().map(String::as_str));
    let _ = writeln!(s, "{}", header.join(","));
    for it in &r.iterations {
        for c in &it.classes {
            let mut row = vec![
                it.iteration.to_string(),
                c.class.to_string(),
                c.support.to_string(),
                csv_num(c.precision_unfiltered),
                csv_num(c.precision_filtered),
                csv_num(c.retention),
            ];
            for a in &arms {
                row.push(csv_num(it.arm(a).and_then(|x| x.iou.per_class[c.class])));
            }
            let _ = writeln!(s, "{}", row.join(","));
        }
    }
    s
}

pub fn render_sweep_csv(r: &SweepReport) -> String {
    let mut s = String::from("fraction,arm,miou\n");
    for e in &r.entries {
        for a in &e.report.last().arms {
            let _ = writeln!(s, "{},{},{}", e.fraction, a.name, a.iou.miou);
        }
    }
    s
}

fn grad_check(a: &GradCheckArgs) -> Result<()> {
    if a.cases == 0 || !(a.epsilon > 0.0) || !(a.tolerance > 0.0) {
        return Err(Error::invalid("cases, epsilon and tolerance must be positive"));
    }
    let cfg = GradCheckConfig {
        cases_per_layer: a.cases,
        epsilon: a.epsilon,
        tolerance: a.tolerance,
        seed: a.seed,
    };
    let report = gradcheck::run_gradcheck(&cfg)?;
    if a.json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        println!("{:<22} {:>7} {:>12} {:>6}", "layer", "shapes", "max_rel_err", "ok");
        for (layer, worst, shapes) in report.summary() {
            let ok = worst <= cfg.tolerance;
            println!("{layer:<22} {shapes:>7} {worst:>12.3e} {:>6}", if ok { "pass" } else { "FAIL" });
        }
    }
    if report.passed() {
        Ok(())
    } else {
        Err(Error::Numerical(GRADCHECK_FAILED.into()))
    }
}
