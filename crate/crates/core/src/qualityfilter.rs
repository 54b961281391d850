//! The annotation-quality model: a small CNN that reads the ensemble's
//! softmax maps and predicts, per pixel, whether the fused label is right.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ensemble::EnsembleOutput;
use crate::error::{Error, Result};
use crate::nn::{self, Activation, Architecture, LayerSpec, ModelParameters, Supervised, TrainHyper, TrainLog};
use crate::segmodel::{LabelMask, SoftmaxMap, IGNORE};
use crate::tensor::{Rng, Tape, Tensor, Var};

pub const DISCARD: u8 = 0;
pub const KEEP: u8 = 1;
/// Ground truth is void here, so correctness is undefined.
pub const UNDEFINED: u8 = 255;

/// Per-pixel keep / discard decisions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QualityMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl QualityMask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape(format!(
                "{} entries for a {height}x{width} quality mask",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|&&v| v != DISCARD && v != KEEP && v != UNDEFINED) {
            return Err(Error::data(format!("quality value {v} is not 0, 1 or 255")));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: u8) -> Self {
        Self::new(height, width, vec![value; height * width]).expect("valid fill value")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn kept(&self) -> usize {
        self.data.iter().filter(|&&v| v == KEEP).count()
    }

    fn check_shape(&self, h: usize, w: usize) -> Result<()> {
        if (self.height, self.width) != (h, w) {
            return Err(Error::shape(format!(
                "{}x{} quality mask for a {h}x{w} annotation",
                self.height, self.width
            )));
        }
        Ok(())
    }
}

/// Which ensemble maps feed the quality network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QualityInput {
    /// One map per model, averaged over its transforms: `num_models * C` channels.
    ModelAveraged,
    /// Every (model, transform) member: `num_models * num_transforms * C` channels.
    PerMember,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QualityConfig {
    pub input: QualityInput,
    /// Keep a pixel when the predicted probability is at least this.
    pub threshold: f32,
    /// The loss of wrongly annotated pixels is scaled by
    /// `(#correct / #wrong)^balance` over the training set: 0 is plain
    /// cross-entropy, 1 weighs both outcomes equally.
    #[serde(default)]
    pub balance: f32,
    pub hyper: TrainHyper,
}

impl Default for QualityConfig {
    fn default() -> Self {
        Self {
            input: QualityInput::ModelAveraged,
            threshold: 0.5,
            balance: 0.0,
            hyper: TrainHyper::default(),
        }
    }
}

/// Trained quality network plus the metadata needed to feed it.
#[derive(Clone, Debug, PartialEq)]
pub struct QualityFilterParams {
    pub net: ModelParameters,
    pub threshold: f32,
    pub input: QualityInput,
    pub num_classes: usize,
    pub num_models: usize,
    pub num_transforms: usize,
}

#[derive(Serialize, Deserialize)]
struct FilterMeta {
    threshold: f32,
    input: QualityInput,
    num_classes: usize,
    num_models: usize,
    num_transforms: usize,
}

impl QualityFilterParams {
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        self.net.save(dir)?;
        let meta = FilterMeta {
            threshold: self.threshold,
            input: self.input,
            num_classes: self.num_classes,
            num_models: self.num_models,
            num_transforms: self.num_transforms,
        };
        fs::write(dir.join("filter.json"), serde_json::to_string_pretty(&meta)? + "\n")?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let meta: FilterMeta = serde_json::from_str(&fs::read_to_string(dir.join("filter.json"))?)?;
        let net = ModelParameters::load(dir)?;
        let q = Self {
            net,
            threshold: meta.threshold,
            input: meta.input,
            num_classes: meta.num_classes,
            num_models: meta.num_models,
            num_transforms: meta.num_transforms,
        };
        validate_threshold(q.threshold)?;
        if q.net.architecture().in_channels() != input_channels(q.input, q.num_models, q.num_transforms, q.num_classes) {
            return Err(Error::data("filter metadata disagrees with its network"));
        }
        Ok(q)
    }

    pub fn with_threshold(mut self, threshold: f32) -> Result<Self> {
        validate_threshold(threshold)?;
        self.threshold = threshold;
        Ok(self)
    }
}

fn validate_threshold(t: f32) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::invalid(format!("threshold {t} outside [0,1]")));
    }
    Ok(())
}

fn input_channels(mode: QualityInput, models: usize, transforms: usize, classes: usize) -> usize {
    match mode {
        QualityInput::ModelAveraged => models * classes,
        QualityInput::PerMember => models * transforms * classes,
    }
}

/// Four 3x3 conv-ReLU layers (40, 20, 20, 20 channels) and a 3x3
/// conv-sigmoid output with one channel.
pub fn quality_architecture(in_channels: usize) -> Architecture {
    let widths = [40, 20, 20, 20];
    let mut layers = Vec::with_capacity(5);
    let mut cin = in_channels;
    for w in widths {
        layers.push(LayerSpec {
            in_channels: cin,
            out_channels: w,
            kernel: 3,
            activation: Activation::Relu,
        });
        cin = w;
    }
    layers.push(LayerSpec {
        in_channels: cin,
        out_channels: 1,
        kernel: 3,
        activation: Activation::Sigmoid,
    });
    Architecture {
        name: "quality".into(),
        layers,
    }
}

/// Concatenates the selected ensemble maps channel-wise in member order.
pub fn quality_input(e_out: &EnsembleOutput, mode: QualityInput) -> Tensor {
    let (c, h, w) = (e_out.num_classes(), e_out.height(), e_out.width());
    let parts: Vec<Tensor> = match mode {
        QualityInput::ModelAveraged => e_out.model_means(),
        QualityInput::PerMember => e_out.maps().iter().map(|m| m.tensor().clone()).collect(),
    };
    let mut data = Vec::with_capacity(parts.len() * c * h * w);
    for p in &parts {
        data.extend_from_slice(p.data());
    }
    Tensor::new(vec![parts.len() * c, h, w], data).expect("consistent member shapes")
}

/// 1 where the fused label matches ground truth, 0 where it does not,
/// 255 where ground truth is void.
pub fn build_quality_target(fused: &LabelMask, gt: &LabelMask) -> Result<QualityMask> {
    fused.same_shape(gt)?;
    let data = fused
        .data()
        .iter()
        .zip(gt.data())
        .map(|(&f, &g)| {
            if g == IGNORE {
                UNDEFINED
            } else if f == g {
                KEEP
            } else {
                DISCARD
            }
        })
        .collect();
    QualityMask::new(fused.height(), fused.width(), data)
}

struct QualityExample {
    input: Tensor,
    target: Vec<f32>,
    keep: Vec<bool>,
    weight: usize,
    /// Loss weight of DISCARD pixels; KEEP pixels weigh 1.
    negative_weight: f32,
}

impl Supervised for QualityExample {
    fn input(&self) -> &Tensor {
        &self.input
    }

    fn weight(&self) -> usize {
        self.weight
    }

    fn loss(&self, tape: &mut Tape, output: Var, scale: f32) -> Result<Var> {
        if self.negative_weight == 1.0 {
            return tape.binary_cross_entropy(output, &self.target, &self.keep, scale);
        }
        let split = |positive: bool| -> Vec<bool> {
            self.keep
                .iter()
                .zip(&self.target)
                .map(|(&k, &t)| k && (t == 1.0) == positive)
                .collect()
        };
        let pos = tape.binary_cross_entropy(output, &self.target, &split(true), scale)?;
        let neg = tape.binary_cross_entropy(output, &self.target, &split(false), scale * self.negative_weight)?;
        tape.add(pos, neg)
    }
}

/// Trains the quality network with binary cross-entropy against the
/// correctness targets; [`UNDEFINED`] pixels are excluded from the loss.
pub fn train_quality_filter(
    qset: &[(EnsembleOutput, QualityMask)],
    cfg: &QualityConfig,
    rng: &mut Rng,
) -> Result<(QualityFilterParams, TrainLog)> {
    validate_threshold(cfg.threshold)?;
    let Some((first, _)) = qset.first() else {
        return Err(Error::invalid("quality training set is empty"));
    };
    let (models, transforms, classes) = (first.num_models(), first.num_transforms(), first.num_classes());
    if !(0.0..=1.0).contains(&cfg.balance) {
        return Err(Error::invalid(format!("balance {} outside [0, 1]", cfg.balance)));
    }
    let negative_weight = if cfg.balance > 0.0 {
        let (mut pos, mut neg) = (0usize, 0usize);
        for (_, t) in qset {
            pos += t.data().iter().filter(|&&v| v == KEEP).count();
            neg += t.data().iter().filter(|&&v| v == DISCARD).count();
        }
        if pos > 0 && neg > 0 {
            (pos as f32 / neg as f32).powf(cfg.balance)
        } else {
            1.0
        }
    } else {
        1.0
    };
    let examples = qset
        .iter()
        .map(|(e_out, target)| {
            if (e_out.num_models(), e_out.num_transforms(), e_out.num_classes()) != (models, transforms, classes) {
                return Err(Error::shape(format!(
                    "ensemble output with {}x{} members of {} classes, expected {models}x{transforms} of {classes}",
                    e_out.num_models(),
                    e_out.num_transforms(),
                    e_out.num_classes()
                )));
            }
            target.check_shape(e_out.height(), e_out.width())?;
            let keep: Vec<bool> = target.data().iter().map(|&v| v != UNDEFINED).collect();
            Ok(QualityExample {
                input: quality_input(e_out, cfg.input),
                target: target.data().iter().map(|&v| if v == KEEP { 1.0 } else { 0.0 }).collect(),
                weight: keep.iter().filter(|&&k| k).count(),
                keep,
                negative_weight,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let arch = quality_architecture(input_channels(cfg.input, models, transforms, classes));
    let mut net = ModelParameters::init(arch, rng, false)?;
    let log = nn::fit(&mut net, &examples, &cfg.hyper, rng)?;
    Ok((
        QualityFilterParams {
            net,
            threshold: cfg.threshold,
            input: cfg.input,
            num_classes: classes,
            num_models: models,
            num_transforms: transforms,
        },
        log,
    ))
}

/// Keep-probability map `[H, W]` (clamped into the open unit interval) and
/// its thresholded mask (`p >= threshold` keeps).
pub fn predict_quality(q: &QualityFilterParams, e_out: &EnsembleOutput) -> Result<(Tensor, QualityMask)> {
    let input = quality_input(e_out, q.input);
    let expected = q.net.architecture().in_channels();
    if input.shape()[0] != expected {
        return Err(Error::shape(format!(
            "quality filter expects {expected} input channels, ensemble provides {}",
            input.shape()[0]
        )));
    }
    let (h, w) = (e_out.height(), e_out.width());
    let mut probs = q.net.predict(&input)?.reshape(vec![h, w])?;
    let eps = crate::tensor::ops::PROB_CLAMP;
    probs.data_mut().iter_mut().for_each(|p| *p = p.clamp(eps, 1.0 - eps));
    Ok((probs.clone(), threshold_mask(&probs, q.threshold)?))
}

/// Binarizes a keep-probability map.
pub fn threshold_mask(probs: &Tensor, threshold: f32) -> Result<QualityMask> {
    let &[h, w] = probs.shape() else {
        return Err(Error::shape(format!("probability map must be [H,W], got {:?}", probs.shape())));
    };
    let data = probs
        .data()
        .iter()
        .map(|&p| if p >= threshold { KEEP } else { DISCARD })
        .collect();
    QualityMask::new(h, w, data)
}

/// Max-softmax confidence baseline: keep pixels whose fused mean
/// probability for the winning class is at least `threshold`.
pub fn confidence_filter(mean: &SoftmaxMap, threshold: f32) -> QualityMask {
    let (c, h, w) = (mean.num_classes(), mean.height(), mean.width());
    let plane = h * w;
    let d = mean.tensor().data();
    let data = (0..plane)
        .map(|p| {
            let best = (0..c).map(|ch| d[ch * plane + p]).fold(f32::MIN, f32::max);
            if best >= threshold {
                KEEP
            } else {
                DISCARD
            }
        })
        .collect();
    QualityMask::new(h, w, data).expect("binary values")
}

/// Keeps the auto label where quality is 1; everything else becomes IGNORE.
pub fn apply_filter(auto: &LabelMask, quality: &QualityMask) -> Result<LabelMask> {
    quality.check_shape(auto.height(), auto.width())?;
    let data = auto
        .data()
        .iter()
        .zip(quality.data())
        .map(|(&a, &q)| if q == KEEP { a } else { IGNORE })
        .collect();
    LabelMask::new(auto.height(), auto.width(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ops;

    fn lm(h: usize, w: usize, d: &[u8]) -> LabelMask {
        LabelMask::new(h, w, d.to_vec()).unwrap()
    }

    fn random_output(rng: &mut Rng, models: usize, transforms: usize, c: usize, h: usize, w: usize) -> EnsembleOutput {
        let maps = (0..models * transforms)
            .map(|_| {
                let t = ops::softmax_channels(&Tensor::uniform(&[c, h, w], -2.0, 2.0, rng)).unwrap();
                SoftmaxMap::new(t).unwrap()
            })
            .collect();
        EnsembleOutput::new(maps, models, transforms).unwrap()
    }

    #[test]
    fn quality_mask_values() {
        assert!(QualityMask::new(1, 3, vec![0, 1, 255]).is_ok());
        assert!(QualityMask::new(1, 3, vec![0, 2, 255]).is_err());
        assert!(QualityMask::new(2, 2, vec![0; 3]).is_err());
    }

    #[test]
    fn target_examples() {
        let t = build_quality_target(&lm(2, 2, &[0, 1, 1, 1]), &lm(2, 2, &[0, 0, 1, IGNORE])).unwrap();
        assert_eq!(t.data(), &[1, 0, 1, 255]);
        let same = lm(2, 2, &[3, 1, 0, 2]);
        assert!(build_quality_target(&same, &same).unwrap().data().iter().all(|&v| v == KEEP));
        assert!(build_quality_target(&same, &lm(1, 4, &[0; 4])).is_err());
    }

    #[test]
    fn filter_examples() {
        let auto = lm(2, 2, &[0, 1, 2, 3]);
        assert_eq!(apply_filter(&auto, &QualityMask::filled(2, 2, KEEP)).unwrap(), auto);
        assert!(apply_filter(&auto, &QualityMask::filled(2, 2, DISCARD))
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == IGNORE));
        let q = QualityMask::new(2, 2, vec![1, 0, 255, 1]).unwrap();
        assert_eq!(apply_filter(&auto, &q).unwrap().data(), &[0, IGNORE, IGNORE, 3]);
        assert!(apply_filter(&auto, &QualityMask::filled(1, 4, KEEP)).is_err());
    }

    #[test]
    fn architecture_matches_description() {
        let a = quality_architecture(18);
        let widths: Vec<_> = a.layers.iter().map(|l| l.out_channels).collect();
        assert_eq!(widths, [40, 20, 20, 20, 1]);
        assert!(a.layers[..4].iter().all(|l| l.activation == Activation::Relu && l.kernel == 3));
        assert_eq!(a.layers[4].activation, Activation::Sigmoid);
        assert_eq!(a.in_channels(), 18);
    }

    #[test]
    fn input_modes_channel_counts() {
        let mut rng = Rng::new(1);
        let out = random_output(&mut rng, 3, 6, 4, 5, 5);
        assert_eq!(quality_input(&out, QualityInput::ModelAveraged).shape(), &[12, 5, 5]);
        assert_eq!(quality_input(&out, QualityInput::PerMember).shape(), &[72, 5, 5]);
    }

    #[test]
    fn all_undefined_targets_rejected() {
        let mut rng = Rng::new(2);
        let out = random_output(&mut rng, 2, 1, 3, 16, 16);
        let q = vec![(out, QualityMask::filled(16, 16, UNDEFINED))];
        assert!(matches!(
            train_quality_filter(&q, &QualityConfig::default(), &mut rng),
            Err(Error::Data(_))
        ));
        assert!(train_quality_filter(&[], &QualityConfig::default(), &mut rng).is_err());
    }

    #[test]
    fn prediction_threshold_extremes() {
        let mut rng = Rng::new(3);
        let out = random_output(&mut rng, 2, 1, 3, 16, 16);
        let net = ModelParameters::init(quality_architecture(6), &mut rng, false).unwrap();
        let q = QualityFilterParams {
            net,
            threshold: 0.0,
            input: QualityInput::ModelAveraged,
            num_classes: 3,
            num_models: 2,
            num_transforms: 1,
        };
        let (p, keep_all) = predict_quality(&q, &out).unwrap();
        assert!(p.data().iter().all(|&v| v > 0.0 && v < 1.0));
        assert_eq!(keep_all.kept(), 256);
        let (p2, _) = predict_quality(&q, &out).unwrap();
        assert_eq!(p, p2);
        let q1 = q.clone().with_threshold(1.0).unwrap();
        assert_eq!(predict_quality(&q1, &out).unwrap().1.kept(), 0);

        let wrong = random_output(&mut rng, 3, 1, 3, 16, 16);
        assert!(matches!(predict_quality(&q, &wrong), Err(Error::Shape(_))));
        assert!(q.with_threshold(1.5).is_err());
    }

    #[test]
    fn filter_checkpoint_roundtrip() {
        let mut rng = Rng::new(4);
        let q = QualityFilterParams {
            net: ModelParameters::init(quality_architecture(6), &mut rng, false).unwrap(),
            threshold: 0.4,
            input: QualityInput::ModelAveraged,
            num_classes: 3,
            num_models: 2,
            num_transforms: 6,
        };
        let dir = tempfile::tempdir().unwrap();
        q.save(dir.path()).unwrap();
        assert_eq!(QualityFilterParams::load(dir.path()).unwrap(), q);
    }

    #[test]
    fn balanced_loss_weights_discard_pixels() {
        let pred = Tensor::new(vec![1, 1, 4], vec![0.9, 0.2, 0.6, 0.3]).unwrap();
        let example = |negative_weight| QualityExample {
            input: pred.clone(),
            target: vec![1.0, 0.0, 0.0, 1.0],
            keep: vec![true, true, true, false],
            weight: 3,
            negative_weight,
        };
        let loss = |w: f32| {
            let mut tape = Tape::new();
            let out = tape.param(pred.clone());
            let l = example(w).loss(&mut tape, out, 1.0).unwrap();
            tape.value(l).data()[0] as f64
        };
        let pos = -(0.9f64).ln();
        let neg = -(0.8f64).ln() - (0.4f64).ln();
        assert!((loss(1.0) - (pos + neg)).abs() < 1e-5);
        assert!((loss(0.25) - (pos + 0.25 * neg)).abs() < 1e-5);

        let mut rng = Rng::new(5);
        let out = random_output(&mut rng, 2, 1, 3, 8, 8);
        let q = vec![(out, QualityMask::filled(8, 8, KEEP))];
        let cfg = QualityConfig { balance: 1.5, ..QualityConfig::default() };
        assert!(train_quality_filter(&q, &cfg, &mut rng).is_err());
    }

    #[test]
    fn confidence_baseline() {
        let m = SoftmaxMap::new(Tensor::new(vec![2, 1, 2], vec![0.9, 0.55, 0.1, 0.45]).unwrap()).unwrap();
        assert_eq!(confidence_filter(&m, 0.6).data(), &[KEEP, DISCARD]);
    }
}
