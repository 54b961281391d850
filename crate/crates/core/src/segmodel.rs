//! The segmentation network: images, label masks, softmax maps, and the
//! train / infer / argmax operations on them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, Activation, Architecture, LayerSpec, ModelParameters, Supervised, TrainHyper, TrainLog};
use crate::tensor::{ops, Rng, Tape, Tensor, Var};

/// Reserved label value for pixels that carry no supervision.
pub const IGNORE: u8 = 255;

/// Smallest image side the models accept.
pub const MIN_SIDE: usize = 16;

/// A `[C, H, W]` image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image(Tensor);

impl Image {
    pub fn new(tensor: Tensor) -> Result<Self> {
        let (_, h, w) = tensor.dims3()?;
        if h < MIN_SIDE || w < MIN_SIDE {
            return Err(Error::shape(format!("image {h}x{w} is smaller than {MIN_SIDE}x{MIN_SIDE}")));
        }
        if let Some(v) = tensor.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::data(format!("image value {v} outside [0,1]")));
        }
        Ok(Self(tensor))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn channels(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[2]
    }
}

/// Per-pixel class ids, row-major `H x W`; [`IGNORE`] marks void pixels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl LabelMask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape(format!(
                "{} labels for a {height}x{width} mask",
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: u8) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
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

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    /// Fails if any value is neither a class below `num_classes` nor [`IGNORE`].
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        match self.data.iter().find(|&&v| v != IGNORE && v as usize >= num_classes) {
            Some(v) => Err(Error::data(format!(
                "label {v} is not a class in 0..{num_classes} nor IGNORE"
            ))),
            None => Ok(()),
        }
    }

    pub fn labeled_pixels(&self) -> usize {
        self.data.iter().filter(|&&v| v != IGNORE).count()
    }

    pub(crate) fn same_shape(&self, other: &LabelMask) -> Result<()> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(Error::shape(format!(
                "{}x{} mask vs {}x{} mask",
                self.height, self.width, other.height, other.width
            )));
        }
        Ok(())
    }
}

/// `[C, H, W]` per-pixel class probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftmaxMap(Tensor);

impl SoftmaxMap {
    /// Validates non-negativity and per-pixel sums of `1 ± 1e-5`.
    pub fn new(tensor: Tensor) -> Result<Self> {
        let (c, h, w) = tensor.dims3()?;
        let plane = h * w;
        let d = tensor.data();
        if let Some(v) = d.iter().find(|v| !(**v >= 0.0)) {
            return Err(Error::data(format!("probability {v} is negative or NaN")));
        }
        for p in 0..plane {
            let s: f64 = (0..c).map(|ch| d[ch * plane + p] as f64).sum();
            if (s - 1.0).abs() > 1e-5 {
                return Err(Error::data(format!("pixel {p} probabilities sum to {s}")));
            }
        }
        Ok(Self(tensor))
    }

    pub(crate) fn from_softmax(tensor: Tensor) -> Self {
        Self(tensor)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn num_classes(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[2]
    }
}

/// Shape of the plain fully-convolutional segmentation network.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegNetConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub width: usize,
    /// Number of 3x3 conv-ReLU layers before the 1x1 classifier.
    pub depth: usize,
    /// Start the classifier at zero so the untrained net predicts uniformly.
    #[serde(default)]
    pub zero_head: bool,
}

impl Default for SegNetConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            num_classes: 6,
            width: 32,
            depth: 5,
            zero_head: false,
        }
    }
}

impl SegNetConfig {
    pub fn architecture(&self) -> Result<Architecture> {
        if self.num_classes < 2 {
            return Err(Error::invalid(format!(
                "need at least 2 classes, got {}",
                self.num_classes
            )));
        }
        if self.depth == 0 || self.width == 0 {
            return Err(Error::invalid("segnet depth and width must be positive"));
        }
        let mut layers = Vec::with_capacity(self.depth + 1);
        let mut cin = self.in_channels;
        for _ in 0..self.depth {
            layers.push(LayerSpec {
                in_channels: cin,
                out_channels: self.width,
                kernel: 3,
                activation: Activation::Relu,
            });
            cin = self.width;
        }
        layers.push(LayerSpec {
            in_channels: cin,
            out_channels: self.num_classes,
            kernel: 1,
            activation: Activation::Identity,
        });
        Ok(Architecture {
            name: "segnet".into(),
            layers,
        })
    }
}

/// Five 3x3 conv-ReLU layers of `width` channels and a 1x1 classifier,
/// He-initialized from `rng`.
pub fn build_segnet(num_classes: usize, width: usize, rng: &mut Rng) -> Result<ModelParameters> {
    build_segnet_with(
        &SegNetConfig {
            num_classes,
            width,
            ..SegNetConfig::default()
        },
        rng,
    )
}

pub fn build_segnet_with(cfg: &SegNetConfig, rng: &mut Rng) -> Result<ModelParameters> {
    ModelParameters::init(cfg.architecture()?, rng, cfg.zero_head)
}

struct SegExample<'a> {
    image: &'a Image,
    mask: &'a LabelMask,
    weights: Option<&'a [f32]>,
    labeled: usize,
}

impl Supervised for SegExample<'_> {
    fn input(&self) -> &Tensor {
        self.image.tensor()
    }

    fn weight(&self) -> usize {
        self.labeled
    }

    fn loss(&self, tape: &mut Tape, output: Var, scale: f32) -> Result<Var> {
        tape.cross_entropy(output, self.mask.data(), IGNORE, self.weights, scale)
    }
}

/// SGD on masked cross-entropy with a reshuffle per pass driven by `rng`.
/// Pixels labeled [`IGNORE`] contribute neither loss nor gradient.
pub fn train_segmodel(
    mut params: ModelParameters,
    data: &[(&Image, &LabelMask)],
    hyper: &TrainHyper,
    rng: &mut Rng,
) -> Result<(ModelParameters, TrainLog)> {
    if data.is_empty() {
        return Err(Error::invalid("cannot train on an empty data set"));
    }
    let num_classes = params.architecture().out_channels();
    let examples = data
        .iter()
        .map(|&(image, mask)| {
            if (image.height(), image.width()) != (mask.height(), mask.width()) {
                return Err(Error::shape(format!(
                    "{}x{} image with {}x{} mask",
                    image.height(),
                    image.width(),
                    mask.height(),
                    mask.width()
                )));
            }
            mask.validate(num_classes)?;
            Ok(SegExample {
                image,
                mask,
                weights: hyper.class_weights.as_deref(),
                labeled: mask.labeled_pixels(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let log = nn::fit(&mut params, &examples, hyper, rng)?;
    Ok((params, log))
}

/// Per-pixel class posteriors of the network on `image`.
pub fn infer_softmax(params: &ModelParameters, image: &Image) -> Result<SoftmaxMap> {
    infer_softmax_tensor(params, image.tensor())
}

pub(crate) fn infer_softmax_tensor(params: &ModelParameters, input: &Tensor) -> Result<SoftmaxMap> {
    let logits = params.predict(input)?;
    Ok(SoftmaxMap::from_softmax(ops::softmax_channels(&logits)?))
}

/// Per-pixel argmax; ties go to the lowest class index.
pub fn predict_labels(softmax: &SoftmaxMap) -> LabelMask {
    let t = softmax.tensor();
    let (c, h, w) = (softmax.num_classes(), softmax.height(), softmax.width());
    let plane = h * w;
    let d = t.data();
    let mut best = vec![0u8; plane];
    let mut best_val = d[..plane].to_vec();
    for ch in 1..c {
        for p in 0..plane {
            let v = d[ch * plane + p];
            if v > best_val[p] {
                best_val[p] = v;
                best[p] = ch as u8;
            }
        }
    }
    LabelMask {
        height: h,
        width: w,
        data: best,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_image(rng: &mut Rng, h: usize, w: usize) -> Image {
        Image::new(Tensor::uniform(&[3, h, w], 0.0, 1.0, rng)).unwrap()
    }

    #[test]
    fn image_and_mask_validation() {
        assert!(Image::new(Tensor::zeros(&[3, 8, 16])).is_err());
        assert!(Image::new(Tensor::full(&[3, 16, 16], 1.5)).is_err());
        assert!(LabelMask::new(2, 2, vec![0; 3]).is_err());
        let m = LabelMask::new(1, 3, vec![0, 5, IGNORE]).unwrap();
        assert!(m.validate(6).is_ok());
        assert!(m.validate(5).is_err());
    }

    #[test]
    fn build_is_seeded() {
        let a = build_segnet(6, 8, &mut Rng::new(3)).unwrap();
        let b = build_segnet(6, 8, &mut Rng::new(3)).unwrap();
        let c = build_segnet(6, 8, &mut Rng::new(4)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(build_segnet(1, 8, &mut Rng::new(3)).is_err());
        assert_eq!(a.architecture().layers.len(), 6);
    }

    #[test]
    fn output_keeps_spatial_shape() {
        let mut rng = Rng::new(5);
        let params = build_segnet(4, 4, &mut rng).unwrap();
        for _ in 0..5 {
            let h = rng.range_usize(16, 40);
            let w = rng.range_usize(16, 40);
            let img = small_image(&mut rng, h, w);
            let sm = infer_softmax(&params, &img).unwrap();
            assert_eq!(sm.tensor().shape(), &[4, h, w]);
        }
    }

    #[test]
    fn zero_head_is_uniform() {
        let cfg = SegNetConfig {
            num_classes: 4,
            width: 4,
            zero_head: true,
            ..SegNetConfig::default()
        };
        let params = build_segnet_with(&cfg, &mut Rng::new(1)).unwrap();
        let img = small_image(&mut Rng::new(2), 16, 16);
        let sm = infer_softmax(&params, &img).unwrap();
        assert!(sm.tensor().data().iter().all(|&p| (p - 0.25).abs() < 1e-7));
    }

    #[test]
    fn inference_is_deterministic_and_normalized() {
        let params = build_segnet(3, 4, &mut Rng::new(1)).unwrap();
        let img = small_image(&mut Rng::new(2), 16, 20);
        let a = infer_softmax(&params, &img).unwrap();
        let b = infer_softmax(&params, &img).unwrap();
        assert_eq!(a, b);
        assert!(SoftmaxMap::new(a.into_tensor()).is_ok());
        let wrong = Image::new(Tensor::zeros(&[1, 16, 16])).unwrap();
        assert!(matches!(infer_softmax(&params, &wrong), Err(Error::Shape(_))));
    }

    #[test]
    fn argmax_examples() {
        let sm = SoftmaxMap::new(Tensor::new(vec![3, 1, 1], vec![0.2, 0.7, 0.1]).unwrap()).unwrap();
        assert_eq!(predict_labels(&sm).data(), &[1]);
        let tie = SoftmaxMap::new(Tensor::new(vec![2, 1, 1], vec![0.5, 0.5]).unwrap()).unwrap();
        assert_eq!(predict_labels(&tie).data(), &[0]);
    }

    #[test]
    fn clipped_step_is_bounded() {
        let mut rng = Rng::new(7);
        let params = build_segnet(3, 4, &mut rng).unwrap();
        let img = small_image(&mut rng, 16, 16);
        let mask = LabelMask::filled(16, 16, 2);
        let hyper = TrainHyper {
            batch_size: 1,
            learning_rate: 0.5,
            momentum: 0.0,
            steps: Some(1),
            clip_norm: Some(0.01),
            ..TrainHyper::default()
        };
        let (after, _) = train_segmodel(params.clone(), &[(&img, &mask)], &hyper, &mut rng).unwrap();
        let moved: f64 = after
            .named_tensors()
            .iter()
            .zip(params.named_tensors())
            .flat_map(|((_, a), (_, b))| a.data().iter().zip(b.data()).map(|(x, y)| ((x - y) as f64).powi(2)))
            .sum::<f64>()
            .sqrt();
        assert!(moved > 0.0 && moved <= 0.5 * 0.01 * 1.001, "{moved}");
        assert!(TrainHyper { clip_norm: Some(0.0), ..hyper }.validate().is_err());
    }

    #[test]
    fn lr_zero_leaves_parameters_unchanged() {
        let mut rng = Rng::new(6);
        let params = build_segnet(3, 4, &mut rng).unwrap();
        let img = small_image(&mut rng, 16, 16);
        let mask = LabelMask::filled(16, 16, 1);
        let hyper = TrainHyper {
            epochs: 1,
            batch_size: 1,
            learning_rate: 0.0,
            momentum: 0.0,
            ..TrainHyper::default()
        };
        let (after, _) = train_segmodel(params.clone(), &[(&img, &mask)], &hyper, &mut rng).unwrap();
        assert_eq!(after, params);
    }

    #[test]
    fn training_errors() {
        let mut rng = Rng::new(7);
        let params = build_segnet(3, 4, &mut rng).unwrap();
        let hyper = TrainHyper::default();
        assert!(train_segmodel(params.clone(), &[], &hyper, &mut rng).is_err());
        let img = small_image(&mut rng, 16, 16);
        let void = LabelMask::filled(16, 16, IGNORE);
        assert!(matches!(
            train_segmodel(params.clone(), &[(&img, &void)], &hyper, &mut rng),
            Err(Error::Data(_))
        ));
        let bad = LabelMask::filled(16, 16, 3);
        assert!(train_segmodel(params, &[(&img, &bad)], &hyper, &mut rng).is_err());
    }
}
