//! Layer stacks, losses and the shared minibatch training loop.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::segmodel::{Image, LabelMask, IGNORE};
use crate::tensor::{sgd_step, Rng, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    Sigmoid,
}

/// One same-padded convolution followed by an activation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub activation: Activation,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub name: String,
    pub layers: Vec<LayerSpec>,
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::invalid("architecture has no layers"));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.kernel % 2 == 0 || l.in_channels == 0 || l.out_channels == 0 {
                return Err(Error::invalid(format!("layer {i}: {l:?} is not a valid conv")));
            }
            if let Some(next) = self.layers.get(i + 1) {
                if next.in_channels != l.out_channels {
                    return Err(Error::invalid(format!(
                        "layer {i} emits {} channels but layer {} takes {}",
                        l.out_channels,
                        i + 1,
                        next.in_channels
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn in_channels(&self) -> usize {
        self.layers[0].in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.layers[self.layers.len() - 1].out_channels
    }
}

/// Weights of a layer stack: one kernel and one bias per layer, in order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParameters {
    arch: Architecture,
    tensors: Vec<(String, Tensor)>,
}

impl ModelParameters {
    /// He-normal kernels (`std = sqrt(2 / fan_in)`), zero biases. With
    /// `zero_head` the last layer's kernel is zero as well.
    pub fn init(arch: Architecture, rng: &mut Rng, zero_head: bool) -> Result<Self> {
        arch.validate()?;
        let last = arch.layers.len() - 1;
        let mut tensors = Vec::with_capacity(2 * arch.layers.len());
        for (i, l) in arch.layers.iter().enumerate() {
            let shape = [l.out_channels, l.in_channels, l.kernel, l.kernel];
            let fan_in = (l.in_channels * l.kernel * l.kernel) as f32;
            let kernel = if zero_head && i == last {
                Tensor::zeros(&shape)
            } else {
                Tensor::randn(&shape, (2.0 / fan_in).sqrt(), rng)
            };
            tensors.push((format!("layer{i}.weight"), kernel));
            tensors.push((format!("layer{i}.bias"), Tensor::zeros(&[l.out_channels])));
        }
        Ok(Self { arch, tensors })
    }

    pub fn from_tensors(arch: Architecture, tensors: Vec<(String, Tensor)>) -> Result<Self> {
        arch.validate()?;
        if tensors.len() != 2 * arch.layers.len() {
            return Err(Error::shape(format!(
                "{} tensors for {} layers",
                tensors.len(),
                arch.layers.len()
            )));
        }
        for (i, l) in arch.layers.iter().enumerate() {
            let k = &tensors[2 * i].1;
            let b = &tensors[2 * i + 1].1;
            if k.shape() != [l.out_channels, l.in_channels, l.kernel, l.kernel]
                || b.shape() != [l.out_channels]
            {
                return Err(Error::shape(format!(
                    "layer {i}: kernel {:?} / bias {:?} do not match {l:?}",
                    k.shape(),
                    b.shape()
                )));
            }
        }
        Ok(Self { arch, tensors })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn named_tensors(&self) -> &[(String, Tensor)] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.tensors.iter_mut().map(|(_, t)| t)
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Records the forward pass on `tape`; returns the output and the
    /// parameter handles in [`Self::named_tensors`] order.
    pub fn forward(&self, tape: &mut Tape, input: Var) -> Result<(Var, Vec<Var>)> {
        let c = tape.value(input).dims3()?.0;
        if c != self.arch.in_channels() {
            return Err(Error::shape(format!(
                "model '{}' takes {} input channels, got {c}",
                self.arch.name,
                self.arch.in_channels()
            )));
        }
        let mut handles = Vec::with_capacity(self.tensors.len());
        let mut x = input;
        for (i, l) in self.arch.layers.iter().enumerate() {
            let k = tape.param(self.tensors[2 * i].1.clone());
            let b = tape.param(self.tensors[2 * i + 1].1.clone());
            handles.push(k);
            handles.push(b);
            x = tape.conv2d(x, k, b, l.kernel / 2)?;
            x = match l.activation {
                Activation::Identity => x,
                Activation::Relu => tape.relu(x),
                Activation::Sigmoid => tape.sigmoid(x),
            };
        }
        Ok((x, handles))
    }

    /// Forward pass without recording gradients.
    pub fn predict(&self, input: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::inference();
        let x = tape.input(input.clone());
        let (out, _) = self.forward(&mut tape, x)?;
        let out = tape.take_value(out);
        if !out.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite output from model '{}'",
                self.arch.name
            )));
        }
        Ok(out)
    }

    /// Writes `arch.json` plus one SEGT file per tensor into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        fs::write(
            dir.join("arch.json"),
            serde_json::to_string_pretty(&self.arch)? + "\n",
        )?;
        for (name, t) in &self.tensors {
            t.save_segt(dir.join(format!("{name}.segt")))?;
        }
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let arch_path = dir.join("arch.json");
        let arch: Architecture = serde_json::from_str(
            &fs::read_to_string(&arch_path)
                .map_err(|e| Error::data(format!("cannot read {}: {e}", arch_path.display())))?,
        )?;
        let mut tensors = Vec::with_capacity(2 * arch.layers.len());
        for i in 0..arch.layers.len() {
            for part in ["weight", "bias"] {
                let name = format!("layer{i}.{part}");
                let t = Tensor::load_segt(dir.join(format!("{name}.segt")))?;
                tensors.push((name, t));
            }
        }
        Self::from_tensors(arch, tensors)
    }
}

/// Mean softmax cross-entropy over pixels whose label is not `ignore`.
/// Zero when every pixel is ignored.
pub fn masked_cross_entropy(logits: &Tensor, labels: &LabelMask, ignore: u8) -> Result<f64> {
    let count = labels.data().iter().filter(|&&l| l != ignore).count();
    let mut tape = Tape::inference();
    let x = tape.input(logits.clone());
    let scale = if count == 0 { 0.0 } else { 1.0 / count as f32 };
    let loss = tape.cross_entropy(x, labels.data(), ignore, None, 1.0)?;
    Ok(tape.value(loss).item() as f64 * scale as f64)
}

/// Records mean masked cross-entropy on `tape`.
pub fn masked_cross_entropy_var(
    tape: &mut Tape,
    logits: Var,
    labels: &LabelMask,
    ignore: u8,
) -> Result<Var> {
    let count = labels.data().iter().filter(|&&l| l != ignore).count();
    let scale = if count == 0 { 0.0 } else { 1.0 / count as f32 };
    tape.cross_entropy(logits, labels.data(), ignore, None, scale)
}

/// Mean binary cross-entropy over elements not flagged in `ignored`.
/// Probabilities are clamped at `1e-7` from either end.
pub fn binary_cross_entropy(pred: &Tensor, target: &Tensor, ignored: Option<&[bool]>) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::shape(format!(
            "prediction {:?} vs target {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let keep: Vec<bool> = match ignored {
        Some(m) if m.len() != pred.numel() => {
            return Err(Error::shape(format!(
                "ignore map has {} entries for {} predictions",
                m.len(),
                pred.numel()
            )))
        }
        Some(m) => m.iter().map(|&i| !i).collect(),
        None => vec![true; pred.numel()],
    };
    let count = keep.iter().filter(|&&k| k).count();
    let mut tape = Tape::inference();
    let p = tape.input(pred.clone());
    let loss = tape.binary_cross_entropy(p, target.data(), &keep, 1.0)?;
    Ok(if count == 0 {
        0.0
    } else {
        tape.value(loss).item() as f64 / count as f64
    })
}

/// `sum log p(y | x; params)` over all non-ignored pixels of `data`.
pub fn conditional_log_likelihood(params: &ModelParameters, data: &[(&Image, &LabelMask)]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::invalid("log-likelihood of an empty data set"));
    }
    let per_image: Vec<f64> = data
        .par_iter()
        .map(|(img, mask)| -> Result<f64> {
            let logits = params.predict(img.tensor())?;
            let mut tape = Tape::inference();
            let x = tape.input(logits);
            let loss = tape.cross_entropy(x, mask.data(), IGNORE, None, 1.0)?;
            Ok(-(tape.value(loss).item() as f64))
        })
        .collect::<Result<_>>()?;
    Ok(per_image.iter().sum())
}

/// Minibatch SGD settings shared by every training phase.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainHyper {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    /// Heavy-ball momentum; 0 gives plain `p <- p - lr * grad`.
    #[serde(default)]
    pub momentum: f32,
    /// When set, run exactly this many updates (reshuffling at every pass
    /// over the data) and ignore `epochs`.
    #[serde(default)]
    pub steps: Option<usize>,
    /// Per-class cross-entropy weights; unused by binary objectives.
    #[serde(default)]
    pub class_weights: Option<Vec<f32>>,
    #[serde(default)]
    pub schedule: LrSchedule,
    /// Rescale each batch gradient to at most this L2 norm.
    #[serde(default)]
    pub clip_norm: Option<f32>,
}

/// Learning-rate schedule over the run's updates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// `lr * (1 + cos(pi * step / total)) / 2`.
    Cosine,
}

impl LrSchedule {
    pub fn rate(self, base: f32, step: usize, total: usize) -> f32 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine => {
                let t = step as f64 / total.max(1) as f64;
                (base as f64 * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())) as f32
            }
        }
    }
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 4,
            learning_rate: 0.05,
            momentum: 0.9,
            steps: None,
            class_weights: None,
            clip_norm: None,
            schedule: LrSchedule::Constant,
        }
    }
}

impl TrainHyper {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(format!(
                "learning rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(format!("momentum {} outside [0,1)", self.momentum)));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::invalid(format!("clip_norm must be positive, got {c}")));
            }
        }
        Ok(())
    }
}

/// Loss trace of one training run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// Supervised-element-weighted mean loss of every update, in order.
    pub step_losses: Vec<f64>,
    pub epochs_started: usize,
}

/// A training example the generic loop can consume.
pub(crate) trait Supervised: Sync {
    fn input(&self) -> &Tensor;
    /// Number of supervised output elements; examples with none are skipped.
    fn weight(&self) -> usize;
    /// Records the loss *sum* over supervised elements times `scale`.
    fn loss(&self, tape: &mut Tape, output: Var, scale: f32) -> Result<Var>;
}

/// Minibatch SGD. Each update averages the loss over every supervised
/// element of the batch, so unsupervised elements never contribute, and
/// examples without any supervised element never enter the schedule.
pub(crate) fn fit<S: Supervised>(
    params: &mut ModelParameters,
    samples: &[S],
    hyper: &TrainHyper,
    rng: &mut Rng,
) -> Result<TrainLog> {
    hyper.validate()?;
    if samples.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let mut order: Vec<usize> = (0..samples.len()).filter(|&i| samples[i].weight() > 0).collect();
    if order.is_empty() {
        return Err(Error::data("no supervised pixels in the training set"));
    }
    let batches_per_epoch = order.len().div_ceil(hyper.batch_size);
    let total_steps = hyper.steps.unwrap_or(hyper.epochs * batches_per_epoch);
    let mut velocity: Vec<Vec<f32>> = params
        .tensors
        .iter()
        .map(|(_, t)| vec![0.0; t.numel()])
        .collect();
    let mut log = TrainLog::default();
    let mut cursor = order.len();
    let mut step = 0;
    while step < total_steps {
        if cursor >= order.len() {
            rng.shuffle(&mut order);
            cursor = 0;
            log.epochs_started += 1;
        }
        let end = (cursor + hyper.batch_size).min(order.len());
        let batch = &order[cursor..end];
        cursor = end;

        let total: usize = batch.iter().map(|&i| samples[i].weight()).sum();
        let scale = 1.0 / total as f32;
        let frozen: &ModelParameters = params;
        let results: Vec<(f64, Vec<Vec<f32>>)> = batch
            .par_iter()
            .map(|&i| sample_gradient(frozen, &samples[i], scale))
            .collect::<Result<_>>()?;

        let mut batch_loss = 0.0;
        let mut sum: Vec<Vec<f32>> = Vec::new();
        for (loss, grads) in results {
            batch_loss += loss;
            if sum.is_empty() {
                sum = grads;
            } else {
                for (s, g) in sum.iter_mut().zip(grads) {
                    s.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
            }
        }
        if !batch_loss.is_finite() || sum.iter().flatten().any(|g| !g.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite loss or gradient at update {step} of '{}'",
                params.arch.name
            )));
        }
        log.step_losses.push(batch_loss);
        if let Some(max) = hyper.clip_norm {
            let norm = sum.iter().flatten().map(|&g| (g as f64) * (g as f64)).sum::<f64>().sqrt();
            if norm > max as f64 {
                let k = (max as f64 / norm) as f32;
                sum.iter_mut().flatten().for_each(|g| *g *= k);
            }
        }

        let lr = hyper.schedule.rate(hyper.learning_rate, step, total_steps);
        if hyper.momentum == 0.0 {
            for ((_, t), g) in params.tensors.iter_mut().zip(sum) {
                t.set_grad(g)?;
            }
            let mut refs: Vec<&mut Tensor> = params.tensors_mut().collect();
            sgd_step(&mut refs, lr)?;
        } else {
            for (((_, t), g), v) in params.tensors.iter_mut().zip(sum).zip(&mut velocity) {
                for ((p, g), v) in t.data_mut().iter_mut().zip(g).zip(v.iter_mut()) {
                    *v = hyper.momentum * *v + g;
                    *p -= lr * *v;
                }
            }
        }
        step += 1;
    }
    for t in params.tensors_mut() {
        t.clear_grad();
    }
    Ok(log)
}

fn sample_gradient<S: Supervised>(
    params: &ModelParameters,
    sample: &S,
    scale: f32,
) -> Result<(f64, Vec<Vec<f32>>)> {
    let mut tape = Tape::new();
    let x = tape.input(sample.input().clone());
    let (out, handles) = params.forward(&mut tape, x)?;
    let loss = sample.loss(&mut tape, out, scale)?;
    let value = tape.value(loss).item() as f64;
    let mut grads = tape.backward(loss)?;
    let per_param = handles
        .iter()
        .zip(&params.tensors)
        .map(|(&h, (_, t))| grads.take(h).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();
    Ok((value, per_param))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(h: usize, w: usize, data: Vec<u8>) -> LabelMask {
        LabelMask::new(h, w, data).unwrap()
    }

    #[test]
    fn cross_entropy_examples() {
        let logits = Tensor::zeros(&[2, 1, 1]);
        let l = masked_cross_entropy(&logits, &mask(1, 1, vec![0]), IGNORE).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-6);

        let all_ignored = masked_cross_entropy(&logits, &mask(1, 1, vec![IGNORE]), IGNORE).unwrap();
        assert_eq!(all_ignored, 0.0);

        let bad = masked_cross_entropy(&logits, &mask(1, 1, vec![2]), IGNORE);
        assert!(matches!(bad, Err(Error::Data(_))));
    }

    #[test]
    fn all_ignored_has_zero_gradient() {
        let mut rng = Rng::new(1);
        let mut tape = Tape::new();
        let x = tape.param(Tensor::uniform(&[3, 2, 2], -1.0, 1.0, &mut rng));
        let m = mask(2, 2, vec![IGNORE; 4]);
        let loss = masked_cross_entropy_var(&mut tape, x, &m, IGNORE).unwrap();
        assert_eq!(tape.value(loss).item(), 0.0);
        let g = tape.backward(loss).unwrap();
        assert!(g.get(x).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ignored_pixel_equals_kept_subset() {
        // Two pixels, second ignored: same loss and same gradient on the kept
        // pixel as a one-pixel problem holding only that pixel.
        let two = Tensor::new(vec![3, 1, 2], vec![0.3, -1.0, 1.2, 2.0, -0.5, 0.7]).unwrap();
        let one = Tensor::new(vec![3, 1, 1], vec![0.3, 1.2, -0.5]).unwrap();
        let l2 = masked_cross_entropy(&two, &mask(1, 2, vec![2, IGNORE]), IGNORE).unwrap();
        let l1 = masked_cross_entropy(&one, &mask(1, 1, vec![2]), IGNORE).unwrap();
        assert!((l1 - l2).abs() < 1e-7);

        let mut tape = Tape::new();
        let x2 = tape.param(two);
        let loss2 = masked_cross_entropy_var(&mut tape, x2, &mask(1, 2, vec![2, IGNORE]), IGNORE).unwrap();
        let g2 = tape.backward(loss2).unwrap().get(x2).unwrap().to_vec();
        let mut tape = Tape::new();
        let x1 = tape.param(one);
        let loss1 = masked_cross_entropy_var(&mut tape, x1, &mask(1, 1, vec![2]), IGNORE).unwrap();
        let g1 = tape.backward(loss1).unwrap().get(x1).unwrap().to_vec();
        assert_eq!([g2[0], g2[2], g2[4]], [g1[0], g1[1], g1[2]]);
        assert_eq!([g2[1], g2[3], g2[5]], [0.0, 0.0, 0.0]);
    }

    #[test]
    fn bce_examples() {
        let p = Tensor::full(&[1], 0.5);
        let t = Tensor::full(&[1], 1.0);
        assert!((binary_cross_entropy(&p, &t, None).unwrap() - std::f64::consts::LN_2).abs() < 1e-7);

        let p = Tensor::full(&[1], 1.0 - 1e-7);
        assert!(binary_cross_entropy(&p, &t, None).unwrap() < 1e-6);

        let p = Tensor::new(vec![3], vec![0.2, 0.9, 0.4]).unwrap();
        let t = Tensor::new(vec![3], vec![0.0, 1.0, 1.0]).unwrap();
        let masked = binary_cross_entropy(&p, &t, Some(&[false, true, false])).unwrap();
        let sub = binary_cross_entropy(
            &Tensor::new(vec![2], vec![0.2, 0.4]).unwrap(),
            &Tensor::new(vec![2], vec![0.0, 1.0]).unwrap(),
            None,
        )
        .unwrap();
        assert!((masked - sub).abs() < 1e-7);

        let bad = Tensor::new(vec![3], vec![0.0, 0.5, 1.0]).unwrap();
        assert!(matches!(binary_cross_entropy(&p, &bad, None), Err(Error::Data(_))));
    }

    #[test]
    fn architecture_validation() {
        let ok = Architecture {
            name: "t".into(),
            layers: vec![
                LayerSpec { in_channels: 3, out_channels: 4, kernel: 3, activation: Activation::Relu },
                LayerSpec { in_channels: 4, out_channels: 2, kernel: 1, activation: Activation::Identity },
            ],
        };
        assert!(ok.validate().is_ok());
        let mut bad = ok.clone();
        bad.layers[1].in_channels = 5;
        assert!(bad.validate().is_err());
        let mut even = ok;
        even.layers[0].kernel = 2;
        assert!(even.validate().is_err());
    }

    #[test]
    fn checkpoint_roundtrip() {
        let arch = Architecture {
            name: "t".into(),
            layers: vec![
                LayerSpec { in_channels: 2, out_channels: 3, kernel: 3, activation: Activation::Relu },
                LayerSpec { in_channels: 3, out_channels: 1, kernel: 3, activation: Activation::Sigmoid },
            ],
        };
        let params = ModelParameters::init(arch, &mut Rng::new(4), false).unwrap();
        let dir = tempfile::tempdir().unwrap();
        params.save(dir.path()).unwrap();
        let back = ModelParameters::load(dir.path()).unwrap();
        assert_eq!(back, params);
    }
}
