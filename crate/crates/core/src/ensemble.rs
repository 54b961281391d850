//! Ensembles built from independently seeded models and test-time input
//! transforms, and the softmax-averaging fusor.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ModelParameters, TrainHyper};
use crate::segmodel::{self, Image, LabelMask, SegNetConfig, SoftmaxMap, MIN_SIDE};
use crate::tensor::{ops, Rng, Tensor};

/// An input transform applied before inference and undone on the output.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transform {
    pub flip: bool,
    pub scale: f32,
}

impl Transform {
    pub const IDENTITY: Transform = Transform {
        flip: false,
        scale: 1.0,
    };

    pub fn is_identity(&self) -> bool {
        !self.flip && self.scale == 1.0
    }

    /// Side length after scaling. Scale 1 keeps `n`; any other scale rounds
    /// `n * scale` to the nearest even integer.
    pub fn scaled_side(&self, n: usize) -> usize {
        if self.scale == 1.0 {
            n
        } else {
            2 * ((n as f64 * self.scale as f64) / 2.0).round() as usize
        }
    }
}

/// `{no flip, flip} x {0.5, 1.0, 1.5}`, flip-major.
pub fn default_transforms() -> Vec<Transform> {
    let mut out = Vec::with_capacity(6);
    for flip in [false, true] {
        for scale in [0.5, 1.0, 1.5] {
            out.push(Transform { flip, scale });
        }
    }
    out
}

/// Softmax maps of every (model, transform) member at the input resolution,
/// ordered model-major.
#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleOutput {
    maps: Vec<SoftmaxMap>,
    num_models: usize,
    num_transforms: usize,
}

impl EnsembleOutput {
    pub fn new(maps: Vec<SoftmaxMap>, num_models: usize, num_transforms: usize) -> Result<Self> {
        if maps.is_empty() {
            return Err(Error::invalid("ensemble output has no members"));
        }
        if maps.len() != num_models * num_transforms {
            return Err(Error::shape(format!(
                "{} maps for {num_models} models x {num_transforms} transforms",
                maps.len()
            )));
        }
        let shape = maps[0].tensor().shape();
        if let Some(m) = maps.iter().find(|m| m.tensor().shape() != shape) {
            return Err(Error::shape(format!(
                "member shapes differ: {:?} vs {:?}",
                shape,
                m.tensor().shape()
            )));
        }
        Ok(Self {
            maps,
            num_models,
            num_transforms,
        })
    }

    pub fn maps(&self) -> &[SoftmaxMap] {
        &self.maps
    }

    pub fn member(&self, model: usize, transform: usize) -> &SoftmaxMap {
        &self.maps[model * self.num_transforms + transform]
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    pub fn num_models(&self) -> usize {
        self.num_models
    }

    pub fn num_transforms(&self) -> usize {
        self.num_transforms
    }

    pub fn num_classes(&self) -> usize {
        self.maps[0].num_classes()
    }

    pub fn height(&self) -> usize {
        self.maps[0].height()
    }

    pub fn width(&self) -> usize {
        self.maps[0].width()
    }

    /// Per-model mean over that model's transforms, `num_models` maps.
    pub fn model_means(&self) -> Vec<Tensor> {
        (0..self.num_models)
            .map(|m| {
                let members = &self.maps[m * self.num_transforms..(m + 1) * self.num_transforms];
                let mut acc = vec![0.0f64; members[0].tensor().numel()];
                for sm in members {
                    for (a, &v) in acc.iter_mut().zip(sm.tensor().data()) {
                        *a += v as f64;
                    }
                }
                let k = members.len() as f64;
                let data = acc.into_iter().map(|v| (v / k) as f32).collect();
                Tensor::new(members[0].tensor().shape().to_vec(), data).expect("same shape")
            })
            .collect()
    }

    /// Stacks the members into one `[k, C, H, W]` tensor.
    pub fn to_stacked(&self) -> Tensor {
        let mut data = Vec::with_capacity(self.maps.len() * self.maps[0].tensor().numel());
        for m in &self.maps {
            data.extend_from_slice(m.tensor().data());
        }
        let mut shape = vec![self.maps.len()];
        shape.extend_from_slice(self.maps[0].tensor().shape());
        Tensor::new(shape, data).expect("consistent member shapes")
    }

    /// Inverse of [`Self::to_stacked`].
    pub fn from_stacked(stacked: &Tensor, num_models: usize, num_transforms: usize) -> Result<Self> {
        let &[k, c, h, w] = stacked.shape() else {
            return Err(Error::shape(format!(
                "stacked ensemble must be [k,C,H,W], got {:?}",
                stacked.shape()
            )));
        };
        let plane = c * h * w;
        let maps = (0..k)
            .map(|i| {
                let t = Tensor::new(vec![c, h, w], stacked.data()[i * plane..(i + 1) * plane].to_vec())?;
                SoftmaxMap::new(t)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(maps, num_models, num_transforms)
    }
}

/// Trains `num_models` networks with seeds `base_seed + i`; each seed drives
/// both initialization and the data reshuffling of its member.
pub fn train_ensemble(
    data: &[(&Image, &LabelMask)],
    num_models: usize,
    net: &SegNetConfig,
    hyper: &TrainHyper,
    base_seed: u64,
) -> Result<Vec<ModelParameters>> {
    if num_models == 0 {
        return Err(Error::invalid("ensemble needs at least one model"));
    }
    (0..num_models)
        .into_par_iter()
        .map(|i| {
            let mut rng = Rng::new(base_seed.wrapping_add(i as u64));
            let params = segmodel::build_segnet_with(net, &mut rng)?;
            segmodel::train_segmodel(params, data, hyper, &mut rng).map(|(p, _)| p)
        })
        .collect()
}

/// Inference under `t`: transform the image, run the network, map the
/// probabilities back to the input grid and renormalize each pixel.
pub fn transformed_infer(params: &ModelParameters, image: &Image, t: Transform) -> Result<SoftmaxMap> {
    if t.is_identity() {
        return segmodel::infer_softmax(params, image);
    }
    if !(t.scale > 0.0 && t.scale.is_finite()) {
        return Err(Error::invalid(format!("scale {} must be positive", t.scale)));
    }
    let (h, w) = (image.height(), image.width());
    let (sh, sw) = (t.scaled_side(h), t.scaled_side(w));
    if sh < MIN_SIDE || sw < MIN_SIDE {
        return Err(Error::shape(format!(
            "scale {} maps {h}x{w} to degenerate {sh}x{sw}",
            t.scale
        )));
    }
    let mut x = image.tensor().clone();
    if t.flip {
        x = ops::flip_horizontal(&x)?;
    }
    if (sh, sw) != (h, w) {
        x = ops::resize_bilinear(&x, sh, sw)?;
    }
    let mut probs = segmodel::infer_softmax_tensor(params, &x)?.into_tensor();
    if (sh, sw) != (h, w) {
        probs = ops::resize_bilinear(&probs, h, w)?;
    }
    if t.flip {
        probs = ops::flip_horizontal(&probs)?;
    }
    Ok(SoftmaxMap::from_softmax(renormalize(probs)))
}

fn renormalize(mut t: Tensor) -> Tensor {
    let (c, h, w) = t.dims3().expect("rank 3");
    let plane = h * w;
    let d = t.data_mut();
    let mut sums = vec![0.0f64; plane];
    for ch in 0..c {
        for (s, &v) in sums.iter_mut().zip(&d[ch * plane..(ch + 1) * plane]) {
            *s += v.max(0.0) as f64;
        }
    }
    for ch in 0..c {
        for (v, &s) in d[ch * plane..(ch + 1) * plane].iter_mut().zip(&sums) {
            *v = if s > 0.0 {
                (v.max(0.0) as f64 / s) as f32
            } else {
                1.0 / c as f32
            };
        }
    }
    t
}

/// Runs every (model, transform) pair on `image`. Members are evaluated in
/// parallel but stored model-major, so the result does not depend on
/// scheduling.
pub fn ensemble_infer(
    members: &[ModelParameters],
    transforms: &[Transform],
    image: &Image,
) -> Result<EnsembleOutput> {
    if members.is_empty() || transforms.is_empty() {
        return Err(Error::invalid("ensemble inference needs models and transforms"));
    }
    let nt = transforms.len();
    let maps = (0..members.len() * nt)
        .into_par_iter()
        .map(|i| transformed_infer(&members[i / nt], image, transforms[i % nt]))
        .collect::<Result<Vec<_>>>()?;
    EnsembleOutput::new(maps, members.len(), nt)
}

/// Softmax averaging: per-pixel argmax of the summed member probabilities
/// (ties to the lowest class), plus the mean map.
pub fn fuse(output: &EnsembleOutput) -> Result<(LabelMask, SoftmaxMap)> {
    if output.is_empty() {
        return Err(Error::invalid("cannot fuse an empty ensemble"));
    }
    let (c, h, w) = (output.num_classes(), output.height(), output.width());
    let plane = h * w;
    let mut sum = vec![0.0f64; c * plane];
    for m in output.maps() {
        for (s, &v) in sum.iter_mut().zip(m.tensor().data()) {
            *s += v as f64;
        }
    }
    let mut labels = vec![0u8; plane];
    for (p, label) in labels.iter_mut().enumerate() {
        let mut best = sum[p];
        for ch in 1..c {
            if sum[ch * plane + p] > best {
                best = sum[ch * plane + p];
                *label = ch as u8;
            }
        }
    }
    let k = output.len() as f64;
    let mean = Tensor::new(vec![c, h, w], sum.iter().map(|&s| (s / k) as f32).collect())?;
    Ok((LabelMask::new(h, w, labels)?, SoftmaxMap::from_softmax(mean)))
}
