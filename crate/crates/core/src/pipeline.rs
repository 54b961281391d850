//! The auto-annotation loop and the experiment protocols built on it.
//!
//! One iteration trains an ensemble on the current training data, labels
//! the unlabeled images with the fused ensemble prediction, trains the
//! quality network on the quality set, masks the auto-annotations it
//! rejects and retrains the target model on manual plus surviving
//! auto-annotated pixels. Manual labels are never replaced.

use std::path::Path;
use std::time::Instant;

use log::info;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ensemble::{self, default_transforms, EnsembleOutput, Transform};
use crate::error::{Error, Result};
use crate::metrics::{self, ConfusionMatrix, IouReport, PrecisionCounts, RetentionCounts, RetentionReport};
use crate::nn::{self, LrSchedule, ModelParameters, TrainHyper};
use crate::qualityfilter::{self, QualityConfig, QualityFilterParams, QualityMask};
use crate::segmodel::{self, Image, LabelMask, SegNetConfig};
use crate::synthdata::{self, Dataset, Sample, SceneConfig, SplitCounts};
use crate::tensor::Rng;

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const RETENTION_CURVE_THRESHOLDS: [f32; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];

// Sub-stream tags for seeds derived from the master seed.
const STREAM_DATA: u64 = 1;
const STREAM_SPLIT: u64 = 2;
const STREAM_SUBSET: u64 = 3;
const STREAM_ENSEMBLE: u64 = 4;
const STREAM_QUALITY: u64 = 5;
const STREAM_TARGET: u64 = 6;

/// Where the quality network gets its training images.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QualitySetMode {
    /// The labeled training subset, which the ensemble was also trained on.
    ReuseLabeled,
    /// The held-out quality split, disjoint from the labeled subset.
    Disjoint,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Scene generator settings. Its `seed` is replaced by one derived from
    /// the master seed.
    pub scene: SceneConfig,
    /// `labeled` is the pool the labeled fraction is drawn from.
    pub counts: SplitCounts,
    pub labeled_fraction: f64,
    /// Pixels of a rare class that make an image preferred by the subset
    /// selection.
    pub rare_threshold: usize,
    pub num_models: usize,
    pub transforms: Vec<Transform>,
    pub segnet: SegNetConfig,
    pub ensemble_hyper: TrainHyper,
    pub target_hyper: TrainHyper,
    pub quality: QualityConfig,
    pub quality_set: QualitySetMode,
    pub em_iterations: usize,
    /// Start each filtered retraining from the previous target instead of
    /// a fresh initialization.
    pub warm_start: bool,
    /// Adds the max-softmax confidence arm at this threshold.
    pub confidence_threshold: Option<f32>,
    /// Adds an arm filtered with the ground truth of the unlabeled images.
    pub oracle_arm: bool,
    /// Refuse to continue when the filter keeps less than this fraction of
    /// the auto-annotated pixels.
    pub min_retention: f64,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let scene = SceneConfig::default();
        let hyper = TrainHyper {
            epochs: 0,
            batch_size: 4,
            learning_rate: 0.05,
            momentum: 0.9,
            steps: Some(600),
            class_weights: None,
            clip_norm: Some(1.0),
            schedule: LrSchedule::Cosine,
        };
        Self {
            segnet: SegNetConfig {
                in_channels: 3,
                num_classes: scene.num_classes,
                width: 16,
                depth: 5,
                zero_head: false,
            },
            scene,
            counts: SplitCounts {
                labeled: 160,
                unlabeled: 120,
                quality: 24,
                validation: 40,
            },
            labeled_fraction: 0.15,
            rare_threshold: 50,
            num_models: 3,
            transforms: default_transforms(),
            ensemble_hyper: TrainHyper {
                steps: Some(1500),
                ..hyper.clone()
            },
            target_hyper: TrainHyper {
                steps: Some(1500),
                ..hyper.clone()
            },
            quality: QualityConfig {
                hyper: TrainHyper {
                    steps: Some(300),
                    ..hyper
                },
                balance: 0.5,
                ..QualityConfig::default()
            },
            quality_set: QualitySetMode::Disjoint,
            em_iterations: 1,
            warm_start: false,
            confidence_threshold: None,
            oracle_arm: false,
            min_retention: 0.01,
            seed: 0,
        }
    }
}

fn merge_json(base: &mut serde_json::Value, over: serde_json::Value) {
    match (base, over) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                merge_json(b.entry(k).or_insert(serde_json::Value::Null), v);
            }
        }
        (b, o) => *b = o,
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        if self.segnet.num_classes != self.scene.num_classes {
            return Err(Error::invalid(format!(
                "segnet predicts {} classes but scenes have {}",
                self.segnet.num_classes, self.scene.num_classes
            )));
        }
        if self.segnet.in_channels != 3 {
            return Err(Error::invalid("scenes are RGB; segnet.in_channels must be 3"));
        }
        self.segnet.architecture()?;
        synthdata::subset_size(self.labeled_fraction, self.counts.labeled)?;
        if self.num_models == 0 || self.transforms.is_empty() {
            return Err(Error::invalid("ensemble needs at least one model and one transform"));
        }
        if self.em_iterations == 0 {
            return Err(Error::invalid("em_iterations must be at least 1"));
        }
        for h in [&self.ensemble_hyper, &self.target_hyper, &self.quality.hyper] {
            h.validate()?;
        }
        for t in [Some(self.quality.threshold), self.confidence_threshold].into_iter().flatten() {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::invalid(format!("threshold {t} outside [0, 1]")));
            }
        }
        if !(0.0..=1.0).contains(&self.min_retention) {
            return Err(Error::invalid(format!("min_retention {} outside [0, 1]", self.min_retention)));
        }
        Ok(())
    }

    /// Hex SHA-256 of the compact JSON serialization.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Reads a JSON file holding any subset of the fields; nested objects
    /// are merged key by key onto the defaults.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let overrides: serde_json::Value = serde_json::from_str(text)?;
        if !overrides.is_object() {
            return Err(Error::data("configuration must be a JSON object"));
        }
        let mut merged = serde_json::to_value(Self::default())?;
        merge_json(&mut merged, overrides);
        let cfg: Self = serde_json::from_value(merged)?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn derived_seed(&self, stream: u64) -> u64 {
        Rng::stream(self.seed, stream).next_u64()
    }

    /// Base seed of the ensemble trained in iteration `it`.
    pub fn ensemble_seed(&self, it: usize) -> u64 {
        Rng::stream(self.derived_seed(STREAM_ENSEMBLE), it as u64).next_u64()
    }

    /// Generator driving quality-network training in iteration `it`.
    pub fn quality_rng(&self, it: usize) -> Rng {
        Rng::stream(self.derived_seed(STREAM_QUALITY), it as u64)
    }

    /// Scene settings with the seed derived from the master seed.
    pub fn scene_for_run(&self) -> SceneConfig {
        SceneConfig {
            seed: self.derived_seed(STREAM_DATA),
            ..self.scene.clone()
        }
    }

    /// Generates the dataset this configuration describes.
    pub fn generate_dataset(&self) -> Result<Dataset> {
        self.validate()?;
        synthdata::make_splits(&self.scene_for_run(), self.counts, &mut Rng::stream(self.seed, STREAM_SPLIT))
    }
}

/// Validation result of one trained target model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmReport {
    pub name: String,
    /// Ids of every training image, manual ones first.
    pub train_ids: Vec<usize>,
    /// Labeled (non-IGNORE) training pixels.
    pub train_pixels: u64,
    pub confusion: ConfusionMatrix,
    pub iou: IouReport,
}

/// Quality of the auto-annotations of the unlabeled images, measured
/// against their held-out ground truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationReport {
    pub unfiltered: PrecisionCounts,
    pub filtered: PrecisionCounts,
    pub precision_unfiltered: Vec<Option<f64>>,
    pub precision_filtered: Vec<Option<f64>>,
    pub retention: RetentionReport,
    /// `(threshold, overall retention)` pairs.
    pub retention_curve: Vec<(f32, f64)>,
    pub confidence: Option<ConfidenceReport>,
    pub oracle_precision: Option<Vec<Option<f64>>>,
    /// Pixel accuracy of the quality mask as a predictor of annotation
    /// correctness, and that of the always-keep predictor.
    pub filter_accuracy: f64,
    pub keep_all_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceReport {
    pub threshold: f32,
    pub precision: Vec<Option<f64>>,
    pub retention: f64,
}

/// Conditional log-likelihood of the filtered training data before and
/// after the M-step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LikelihoodStep {
    pub before: f64,
    pub after: f64,
}

/// Per-class rows shaped like the precision table: support, both
/// precisions, retention and the IoU change between the unfiltered and
/// filtered arms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassRow {
    pub class: usize,
    pub support: u64,
    pub precision_unfiltered: Option<f64>,
    pub precision_filtered: Option<f64>,
    pub retention: Option<f64>,
    pub iou_gain: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationReport {
    pub iteration: usize,
    pub labeled_ids: Vec<usize>,
    pub quality_ids: Vec<usize>,
    pub validation_ids: Vec<usize>,
    pub arms: Vec<ArmReport>,
    pub annotation: Option<AnnotationReport>,
    pub classes: Vec<ClassRow>,
    /// Pearson correlation of per-class precision gain and IoU gain.
    pub precision_iou_correlation: Option<f64>,
    pub likelihood: LikelihoodStep,
    pub quality_final_loss: f64,
}

impl IterationReport {
    pub fn arm(&self, name: &str) -> Option<&ArmReport> {
        self.arms.iter().find(|a| a.name == name)
    }
}

pub const ARM_LABELED_ONLY: &str = "labeled_only";
pub const ARM_UNFILTERED: &str = "unfiltered";
pub const ARM_FILTERED: &str = "filtered";
pub const ARM_CONFIDENCE: &str = "confidence";
pub const ARM_ORACLE: &str = "oracle";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub schema_version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub labeled_fraction: f64,
    pub num_classes: usize,
    pub iterations: Vec<IterationReport>,
}

impl ExperimentReport {
    pub fn last(&self) -> &IterationReport {
        self.iterations.last().expect("at least one iteration")
    }

    /// Validation mIoU of an arm in the last iteration.
    pub fn miou(&self, arm: &str) -> Option<f64> {
        self.last().arm(arm).map(|a| a.iou.miou)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub fraction: f64,
    pub report: ExperimentReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub schema_version: u32,
    pub config_hash: String,
    pub entries: Vec<SweepEntry>,
}

/// Models produced by the last iteration, for checkpointing.
#[derive(Clone, Debug)]
pub struct Checkpoints {
    pub ensemble: Vec<ModelParameters>,
    pub filter: QualityFilterParams,
    pub targets: Vec<(String, ModelParameters)>,
}

/// Mutable state carried between iterations.
#[derive(Clone, Debug)]
pub struct PipelineState {
    /// Indices into `dataset.labeled` forming the manual training set.
    pub labeled: Vec<usize>,
    /// Indices into `dataset.labeled` or `dataset.quality` for the quality set.
    pub quality: QualitySource,
    pub baseline: ModelParameters,
    pub baseline_report: ArmReport,
    /// Current target model (the filtered arm of the last iteration).
    pub target: ModelParameters,
    /// Filtered auto-annotations of the unlabeled images from the last
    /// iteration; `None` before the first.
    pub auto_labels: Option<Vec<LabelMask>>,
    pub reports: Vec<IterationReport>,
    pub checkpoints: Option<Checkpoints>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum QualitySource {
    Labeled(Vec<usize>),
    Held(Vec<usize>),
}

fn samples_of<'a>(ds: &'a Dataset, src: &QualitySource) -> Vec<&'a Sample> {
    match src {
        QualitySource::Labeled(ix) => ix.iter().map(|&i| &ds.labeled[i]).collect(),
        QualitySource::Held(ix) => ix.iter().map(|&i| &ds.quality[i]).collect(),
    }
}

fn pairs<'a>(samples: &[&'a Sample]) -> Vec<(&'a Image, &'a LabelMask)> {
    samples.iter().map(|s| (&s.image, &s.label)).collect()
}

/// Trains a target model. Every arm draws its initialization and data
/// order from the same seed, so arms differ only in their labels.
pub fn train_target(
    cfg: &ExperimentConfig,
    data: &[(&Image, &LabelMask)],
    init: Option<&ModelParameters>,
) -> Result<ModelParameters> {
    let mut rng = Rng::new(cfg.derived_seed(STREAM_TARGET));
    let fresh = segmodel::build_segnet_with(&cfg.segnet, &mut rng)?;
    let params = init.cloned().unwrap_or(fresh);
    segmodel::train_segmodel(params, data, &cfg.target_hyper, &mut rng).map(|(p, _)| p)
}

/// Validation confusion, accumulated per image in id order.
pub fn evaluate(params: &ModelParameters, validation: &[Sample], num_classes: usize) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(num_classes);
    for s in validation {
        let pred = segmodel::predict_labels(&segmodel::infer_softmax(params, &s.image)?);
        cm.accumulate(&pred, &s.label)?;
    }
    Ok(cm)
}

fn arm_report(
    name: &str,
    params: &ModelParameters,
    train_ids: Vec<usize>,
    data: &[(&Image, &LabelMask)],
    ds: &Dataset,
) -> Result<ArmReport> {
    let confusion = evaluate(params, &ds.validation, ds.scene.num_classes)?;
    Ok(ArmReport {
        name: name.into(),
        train_ids,
        train_pixels: data.iter().map(|(_, m)| m.labeled_pixels() as u64).sum(),
        iou: metrics::iou(&confusion)?,
        confusion,
    })
}

/// Indices into `ds.labeled` of the class-balanced labeled subset.
pub fn select_labeled(cfg: &ExperimentConfig, ds: &Dataset) -> Result<Vec<usize>> {
    let pool: Vec<(usize, &LabelMask)> = ds.labeled.iter().map(|s| (s.id, &s.label)).collect();
    let chosen = synthdata::balanced_subset(
        &pool,
        cfg.labeled_fraction,
        cfg.rare_threshold,
        cfg.scene.num_classes,
        &mut Rng::stream(cfg.seed, STREAM_SUBSET),
    )?;
    Ok((0..ds.labeled.len())
        .filter(|&i| chosen.binary_search(&ds.labeled[i].id).is_ok())
        .collect())
}

/// Selects the labeled subset and the quality set and trains the
/// labeled-only baseline.
pub fn initialize(cfg: &ExperimentConfig, ds: &Dataset) -> Result<PipelineState> {
    cfg.validate()?;
    let labeled = select_labeled(cfg, ds)?;
    let chosen: Vec<usize> = labeled.iter().map(|&i| ds.labeled[i].id).collect();
    let quality = match cfg.quality_set {
        QualitySetMode::ReuseLabeled => QualitySource::Labeled(labeled.clone()),
        QualitySetMode::Disjoint => QualitySource::Held((0..ds.quality.len()).collect()),
    };
    let manual: Vec<&Sample> = labeled.iter().map(|&i| &ds.labeled[i]).collect();
    let data = pairs(&manual);
    let clock = Instant::now();
    let baseline = train_target(cfg, &data, None)?;
    info!("labeled-only baseline trained in {:.1}s", clock.elapsed().as_secs_f64());
    let baseline_report = arm_report(ARM_LABELED_ONLY, &baseline, chosen, &data, ds)?;
    Ok(PipelineState {
        labeled,
        quality,
        target: baseline.clone(),
        baseline,
        baseline_report,
        auto_labels: None,
        reports: Vec::new(),
        checkpoints: None,
    })
}

struct Annotated {
    fused: Vec<LabelMask>,
    probs: Vec<crate::tensor::Tensor>,
    masks: Vec<QualityMask>,
    confidence: Vec<QualityMask>,
}

fn annotate_unlabeled(
    cfg: &ExperimentConfig,
    ds: &Dataset,
    members: &[ModelParameters],
    filter: &QualityFilterParams,
) -> Result<Annotated> {
    let mut out = Annotated {
        fused: Vec::new(),
        probs: Vec::new(),
        masks: Vec::new(),
        confidence: Vec::new(),
    };
    for image in ds.unlabeled.images() {
        let e_out = ensemble::ensemble_infer(members, &cfg.transforms, image)?;
        let (fused, mean) = ensemble::fuse(&e_out)?;
        let (probs, mask) = qualityfilter::predict_quality(filter, &e_out)?;
        if let Some(t) = cfg.confidence_threshold {
            out.confidence.push(qualityfilter::confidence_filter(&mean, t));
        }
        out.fused.push(fused);
        out.probs.push(probs);
        out.masks.push(mask);
    }
    Ok(out)
}

/// Ensemble outputs and correctness targets for the quality network.
pub fn quality_training_set(
    cfg: &ExperimentConfig,
    samples: &[&Sample],
    members: &[ModelParameters],
) -> Result<Vec<(EnsembleOutput, QualityMask)>> {
    samples
        .iter()
        .map(|s| {
            let e_out = ensemble::ensemble_infer(members, &cfg.transforms, &s.image)?;
            let (fused, _) = ensemble::fuse(&e_out)?;
            let target = qualityfilter::build_quality_target(&fused, &s.label)?;
            Ok((e_out, target))
        })
        .collect()
}

/// One pass of the loop: ensemble, auto-annotation, quality filter,
/// retraining of every arm, evaluation.
pub fn run_iteration(mut state: PipelineState, cfg: &ExperimentConfig, ds: &Dataset) -> Result<PipelineState> {
    let it = state.reports.len();
    let c = cfg.scene.num_classes;
    let manual: Vec<&Sample> = state.labeled.iter().map(|&i| &ds.labeled[i]).collect();
    let manual_ids: Vec<usize> = manual.iter().map(|s| s.id).collect();
    let u_ids = ds.unlabeled.ids().to_vec();

    let mut ens_data = pairs(&manual);
    if let Some(auto) = &state.auto_labels {
        ens_data.extend(ds.unlabeled.images().iter().zip(auto));
    }
    let clock = Instant::now();
    let members = ensemble::train_ensemble(
        &ens_data,
        cfg.num_models,
        &cfg.segnet,
        &cfg.ensemble_hyper,
        cfg.ensemble_seed(it),
    )?;

    info!("iteration {it}: ensemble trained in {:.1}s", clock.elapsed().as_secs_f64());
    let clock = Instant::now();
    let qsamples = samples_of(ds, &state.quality);
    let qset = quality_training_set(cfg, &qsamples, &members)?;
    let mut qrng = cfg.quality_rng(it);
    let (filter, qlog) = qualityfilter::train_quality_filter(&qset, &cfg.quality, &mut qrng)?;
    drop(qset);
    info!("iteration {it}: quality filter trained in {:.1}s", clock.elapsed().as_secs_f64());
    let clock = Instant::now();

    let ann = annotate_unlabeled(cfg, ds, &members, &filter)?;
    let filtered: Vec<LabelMask> = ann
        .fused
        .iter()
        .zip(&ann.masks)
        .map(|(f, m)| qualityfilter::apply_filter(f, m))
        .collect::<Result<_>>()?;
    info!("iteration {it}: annotated {} images in {:.1}s", ann.fused.len(), clock.elapsed().as_secs_f64());
    let clock = Instant::now();
    if !ann.masks.is_empty() {
        let total: usize = ann.masks.iter().map(|m| m.data().len()).sum();
        let kept: usize = ann.masks.iter().map(|m| m.kept()).sum();
        let retained = kept as f64 / total as f64;
        if retained < cfg.min_retention {
            return Err(Error::Infeasible(format!(
                "quality filter keeps {:.3}% of auto-annotated pixels, below the {:.3}% floor",
                100.0 * retained,
                100.0 * cfg.min_retention
            )));
        }
    }

    fn merged<'a>(manual: &[&'a Sample], images: &'a [Image], labels: &'a [LabelMask]) -> Vec<(&'a Image, &'a LabelMask)> {
        let mut d = pairs(manual);
        d.extend(images.iter().zip(labels));
        d
    }
    let u_images = ds.unlabeled.images();
    let train_ids: Vec<usize> = manual_ids.iter().chain(&u_ids).copied().collect();

    let mut arms = vec![state.baseline_report.clone()];
    let mut targets = Vec::new();

    let unfiltered_data = merged(&manual, u_images, &ann.fused);
    let unfiltered = train_target(cfg, &unfiltered_data, None)?;
    arms.push(arm_report(ARM_UNFILTERED, &unfiltered, train_ids.clone(), &unfiltered_data, ds)?);
    targets.push((ARM_UNFILTERED.to_string(), unfiltered));

    let filtered_data = merged(&manual, u_images, &filtered);
    let init = (cfg.warm_start && it > 0).then_some(&state.target);
    let filtered_target = train_target(cfg, &filtered_data, init)?;
    arms.push(arm_report(ARM_FILTERED, &filtered_target, train_ids.clone(), &filtered_data, ds)?);

    let likelihood = LikelihoodStep {
        before: nn::conditional_log_likelihood(&state.target, &filtered_data)?,
        after: nn::conditional_log_likelihood(&filtered_target, &filtered_data)?,
    };

    let mut confidence_labels = None;
    if let Some(t) = cfg.confidence_threshold {
        let labels: Vec<LabelMask> = ann
            .fused
            .iter()
            .zip(&ann.confidence)
            .map(|(f, m)| qualityfilter::apply_filter(f, m))
            .collect::<Result<_>>()?;
        let data = merged(&manual, u_images, &labels);
        let model = train_target(cfg, &data, None)?;
        arms.push(arm_report(ARM_CONFIDENCE, &model, train_ids.clone(), &data, ds)?);
        targets.push((ARM_CONFIDENCE.to_string(), model));
        confidence_labels = Some((t, labels));
    }

    let mut oracle_labels = None;
    if cfg.oracle_arm {
        let truth = ds.unlabeled_truth.for_oracle_arm();
        let labels: Vec<LabelMask> = ann
            .fused
            .iter()
            .zip(truth)
            .map(|(f, g)| qualityfilter::apply_filter(f, &qualityfilter::build_quality_target(f, g)?))
            .collect::<Result<_>>()?;
        let data = merged(&manual, u_images, &labels);
        let model = train_target(cfg, &data, None)?;
        arms.push(arm_report(ARM_ORACLE, &model, train_ids.clone(), &data, ds)?);
        targets.push((ARM_ORACLE.to_string(), model));
        oracle_labels = Some(labels);
    }

    info!("iteration {it}: {} arms trained in {:.1}s", arms.len() - 1, clock.elapsed().as_secs_f64());
    let annotation = if ds.unlabeled.is_empty() {
        None
    } else {
        let truth = ds.unlabeled_truth.for_evaluation("annotation-quality");
        let mut unf = PrecisionCounts::new(c);
        let mut fil = PrecisionCounts::new(c);
        let mut ret = RetentionCounts::new(c);
        for i in 0..truth.len() {
            unf.accumulate(&ann.fused[i], &truth[i], None)?;
            fil.accumulate(&ann.fused[i], &truth[i], Some(&ann.masks[i]))?;
            ret.accumulate(&ann.masks[i], &truth[i])?;
        }
        let (mut agree, mut correct, mut counted) = (0u64, 0u64, 0u64);
        for i in 0..truth.len() {
            let target = qualityfilter::build_quality_target(&ann.fused[i], &truth[i])?;
            for (&t, &m) in target.data().iter().zip(ann.masks[i].data()) {
                if t != qualityfilter::UNDEFINED {
                    counted += 1;
                    agree += (t == m) as u64;
                    correct += (t == qualityfilter::KEEP) as u64;
                }
            }
        }
        let mut curve = Vec::new();
        for tau in RETENTION_CURVE_THRESHOLDS {
            let mut r = RetentionCounts::new(c);
            for (p, g) in ann.probs.iter().zip(truth) {
                r.accumulate(&qualityfilter::threshold_mask(p, tau)?, g)?;
            }
            curve.push((tau, r.report()?.overall));
        }
        let confidence = match (&confidence_labels, ann.confidence.is_empty()) {
            (Some((t, _)), false) => {
                let mut p = PrecisionCounts::new(c);
                let mut r = RetentionCounts::new(c);
                for i in 0..truth.len() {
                    p.accumulate(&ann.fused[i], &truth[i], Some(&ann.confidence[i]))?;
                    r.accumulate(&ann.confidence[i], &truth[i])?;
                }
                Some(ConfidenceReport {
                    threshold: *t,
                    precision: p.precision(),
                    retention: r.report()?.overall,
                })
            }
            _ => None,
        };
        let oracle_precision = match &oracle_labels {
            Some(labels) => {
                let mut p = PrecisionCounts::new(c);
                for (l, g) in labels.iter().zip(truth) {
                    p.accumulate(l, g, None)?;
                }
                Some(p.precision())
            }
            None => None,
        };
        Some(AnnotationReport {
            precision_unfiltered: unf.precision(),
            precision_filtered: fil.precision(),
            unfiltered: unf,
            filtered: fil,
            retention: ret.report()?,
            retention_curve: curve,
            confidence,
            oracle_precision,
            filter_accuracy: agree as f64 / counted as f64,
            keep_all_accuracy: correct as f64 / counted as f64,
        })
    };

    let (classes, correlation) = class_rows(&arms, annotation.as_ref(), c);
    state.reports.push(IterationReport {
        iteration: it,
        labeled_ids: manual_ids,
        quality_ids: qsamples.iter().map(|s| s.id).collect(),
        validation_ids: ds.validation.iter().map(|s| s.id).collect(),
        arms,
        annotation,
        classes,
        precision_iou_correlation: correlation,
        likelihood,
        quality_final_loss: qlog.step_losses.last().copied().unwrap_or(f64::NAN),
    });
    targets.insert(0, (ARM_FILTERED.to_string(), filtered_target.clone()));
    targets.insert(0, (ARM_LABELED_ONLY.to_string(), state.baseline.clone()));
    state.checkpoints = Some(Checkpoints {
        ensemble: members,
        filter,
        targets,
    });
    state.target = filtered_target;
    state.auto_labels = Some(filtered);
    Ok(state)
}

fn class_rows(arms: &[ArmReport], ann: Option<&AnnotationReport>, c: usize) -> (Vec<ClassRow>, Option<f64>) {
    let find = |n: &str| arms.iter().find(|a| a.name == n);
    let (unf, fil) = (find(ARM_UNFILTERED), find(ARM_FILTERED));
    let mut rows = Vec::with_capacity(c);
    let (mut dp, mut di) = (Vec::new(), Vec::new());
    for class in 0..c {
        let iou_gain = match (unf, fil) {
            (Some(u), Some(f)) => match (u.iou.per_class[class], f.iou.per_class[class]) {
                (Some(a), Some(b)) => Some(b - a),
                _ => None,
            },
            _ => None,
        };
        let (pu, pf, retention) = match ann {
            Some(a) => (
                a.precision_unfiltered[class],
                a.precision_filtered[class],
                a.retention.per_class[class],
            ),
            None => (None, None, None),
        };
        if let (Some(pu), Some(pf), Some(g)) = (pu, pf, iou_gain) {
            dp.push(pf - pu);
            di.push(g);
        }
        rows.push(ClassRow {
            class,
            support: ann.map_or(0, |a| a.unfiltered.predicted[class]),
            precision_unfiltered: pu,
            precision_filtered: pf,
            retention,
            iou_gain,
        });
    }
    (rows, metrics::pearson(&dp, &di))
}

/// Trains and evaluates the labeled-only, unfiltered and filtered arms
/// (plus the optional confidence and oracle arms) on `ds`.
pub fn run_experiment_on(cfg: &ExperimentConfig, ds: &Dataset) -> Result<(ExperimentReport, PipelineState)> {
    let mut state = initialize(cfg, ds)?;
    for _ in 0..cfg.em_iterations {
        state = run_iteration(state, cfg, ds)?;
    }
    let report = ExperimentReport {
        schema_version: REPORT_SCHEMA_VERSION,
        config_hash: cfg.hash(),
        seed: cfg.seed,
        labeled_fraction: cfg.labeled_fraction,
        num_classes: cfg.scene.num_classes,
        iterations: state.reports.clone(),
    };
    Ok((report, state))
}

/// Generates the configured dataset and runs the arms on it.
pub fn run_three_arm_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    let ds = cfg.generate_dataset()?;
    run_experiment_on(cfg, &ds).map(|(r, _)| r)
}

/// Runs the experiment once per labeled fraction on a shared dataset.
pub fn run_fraction_sweep(cfg: &ExperimentConfig, fractions: &[f64]) -> Result<SweepReport> {
    if fractions.is_empty() {
        return Err(Error::invalid("no fractions to sweep"));
    }
    let mut checked = Vec::with_capacity(fractions.len());
    for &f in fractions {
        let c = ExperimentConfig {
            labeled_fraction: f,
            ..cfg.clone()
        };
        c.validate()?;
        checked.push(c);
    }
    let ds = cfg.generate_dataset()?;
    let entries = checked
        .iter()
        .map(|c| {
            Ok(SweepEntry {
                fraction: c.labeled_fraction,
                report: run_experiment_on(c, &ds)?.0,
            })
        })
        .collect::<Result<_>>()?;
    Ok(SweepReport {
        schema_version: REPORT_SCHEMA_VERSION,
        config_hash: cfg.hash(),
        entries,
    })
}
