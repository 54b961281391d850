use super::ops::{self, ConvGeometry, PROB_CLAMP as PROB_EPS};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernels: Var,
        bias: Var,
        geometry: ConvGeometry,
        col: Option<Vec<f32>>,
    },
    Relu(Var),
    Sigmoid(Var),
    SoftmaxChannels(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Sum(Var),
    /// `scale * sum_p w[label_p] * -log softmax(logits)[label_p]`; `probs` caches the softmax.
    CrossEntropy {
        logits: Var,
        labels: Vec<u8>,
        weights: Option<Vec<f32>>,
        ignore: u8,
        scale: f32,
        probs: Tensor,
    },
    /// `scale * sum_i -[t log p + (1-t) log(1-p)]` over unmasked elements.
    BinaryCrossEntropy {
        pred: Var,
        target: Vec<f32>,
        keep: Vec<bool>,
        scale: f32,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records a forward computation so gradients can be pulled back through it.
///
/// A tape lives for one forward/backward pass and is dropped afterwards.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    keep_intermediates: bool,
}

/// Gradients indexed by [`Var`], produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f32]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, var: Var) -> Option<Vec<f32>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            keep_intermediates: true,
        }
    }

    /// A tape for inference only: nothing requires gradients, so convolution
    /// column buffers are not retained.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            keep_intermediates: false,
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant input; no gradient is computed for it.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        let rg = self.keep_intermediates;
        self.push(value, Op::Leaf, rg)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn take_value(&mut self, var: Var) -> Tensor {
        std::mem::replace(&mut self.nodes[var.0].value, Tensor::zeros(&[0]))
    }

    fn rg(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    pub fn conv2d(&mut self, input: Var, kernels: Var, bias: Var, padding: usize) -> Result<Var> {
        let (out, geometry, col) = ops::conv2d_forward(
            self.value(input),
            self.value(kernels),
            self.value(bias),
            padding,
        )?;
        let rg = self.rg(input) || self.rg(kernels) || self.rg(bias);
        let col = if rg { col } else { None };
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                kernels,
                bias,
                geometry,
                col,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = ops::relu(self.value(x));
        let rg = self.rg(x);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = ops::sigmoid(self.value(x));
        let rg = self.rg(x);
        self.push(out, Op::Sigmoid(x), rg)
    }

    pub fn softmax_channels(&mut self, x: Var) -> Result<Var> {
        let out = ops::softmax_channels(self.value(x))?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::SoftmaxChannels(x), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip(a, b, |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip(a, b, |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(format!(
                "elementwise op on {:?} and {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().map(|&v| v as f64).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s as f32), Op::Sum(x), rg)
    }

    /// Softmax cross-entropy of `[C, H, W]` logits against per-pixel labels,
    /// summed over pixels whose label is not `ignore` and multiplied by
    /// `scale`. `weights`, when given, scales each pixel's term by the weight
    /// of its label.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        labels: &[u8],
        ignore: u8,
        weights: Option<&[f32]>,
        scale: f32,
    ) -> Result<Var> {
        let (c, h, w) = self.value(logits).dims3()?;
        if labels.len() != h * w {
            return Err(Error::shape(format!(
                "{} labels for {h}x{w} logits",
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l != ignore && l as usize >= c) {
            return Err(Error::data(format!(
                "label {bad} outside 0..{c} and not the ignore value {ignore}"
            )));
        }
        if let Some(wt) = weights {
            if wt.len() != c {
                return Err(Error::shape(format!("{} class weights for {c} classes", wt.len())));
            }
        }
        let probs = ops::softmax_channels(self.value(logits))?;
        let plane = h * w;
        let mut total = 0.0f64;
        for (p, &l) in labels.iter().enumerate() {
            if l == ignore {
                continue;
            }
            let prob = probs.data()[l as usize * plane + p].max(PROB_EPS);
            let wt = weights.map_or(1.0, |wt| wt[l as usize]) as f64;
            total -= wt * (prob as f64).ln();
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar((total * scale as f64) as f32),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                weights: weights.map(<[f32]>::to_vec),
                ignore,
                scale,
                probs,
            },
            rg,
        ))
    }

    /// Binary cross-entropy of probabilities against `{0,1}` targets, summed
    /// over elements where `keep` is true and multiplied by `scale`.
    /// Probabilities are clamped to `[1e-7, 1 - 1e-7]` inside the logs.
    pub fn binary_cross_entropy(
        &mut self,
        pred: Var,
        target: &[f32],
        keep: &[bool],
        scale: f32,
    ) -> Result<Var> {
        let p = self.value(pred);
        if target.len() != p.numel() || keep.len() != p.numel() {
            return Err(Error::shape(format!(
                "{} predictions, {} targets, {} mask entries",
                p.numel(),
                target.len(),
                keep.len()
            )));
        }
        if let Some(t) = target.iter().find(|&&t| t != 0.0 && t != 1.0) {
            return Err(Error::data(format!("binary target {t} is not 0 or 1")));
        }
        let mut total = 0.0f64;
        for ((&pv, &t), &k) in p.data().iter().zip(target).zip(keep) {
            if k {
                total += bce_term(pv, t);
            }
        }
        let rg = self.rg(pred);
        Ok(self.push(
            Tensor::scalar((total * scale as f64) as f32),
            Op::BinaryCrossEntropy {
                pred,
                target: target.to_vec(),
                keep: keep.to_vec(),
                scale,
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar node. Only nodes that require gradients get one.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar, got {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f32>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.rg(loss) {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::Conv2d {
                    input,
                    kernels,
                    bias,
                    geometry,
                    col,
                } => {
                    let (d_in, d_k, d_b) = ops::conv2d_backward(
                        self.value(*input).data(),
                        col.as_deref(),
                        self.value(*kernels).data(),
                        &g,
                        geometry,
                        self.rg(*input),
                    );
                    if let Some(d_in) = d_in {
                        accumulate(&mut grads, *input, d_in);
                    }
                    if self.rg(*kernels) {
                        accumulate(&mut grads, *kernels, d_k);
                    }
                    if self.rg(*bias) {
                        accumulate(&mut grads, *bias, d_b);
                    }
                }
                Op::Relu(x) => {
                    let d = self
                        .value(*x)
                        .data()
                        .iter()
                        .zip(&g)
                        .map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, *x, d);
                }
                Op::Sigmoid(x) => {
                    let d = node
                        .value
                        .data()
                        .iter()
                        .zip(&g)
                        .map(|(&s, &gv)| gv * s * (1.0 - s))
                        .collect();
                    accumulate(&mut grads, *x, d);
                }
                Op::SoftmaxChannels(x) => {
                    let (c, h, w) = node.value.dims3()?;
                    let plane = h * w;
                    let s = node.value.data();
                    let mut dot = vec![0.0f64; plane];
                    for ch in 0..c {
                        for (p, d) in dot.iter_mut().enumerate() {
                            *d += (g[ch * plane + p] * s[ch * plane + p]) as f64;
                        }
                    }
                    let mut d = vec![0.0f32; c * plane];
                    for ch in 0..c {
                        for p in 0..plane {
                            let i = ch * plane + p;
                            d[i] = s[i] * (g[i] - dot[p] as f32);
                        }
                    }
                    accumulate(&mut grads, *x, d);
                }
                Op::Add(a, b) => {
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if self.rg(*b) {
                        accumulate(&mut grads, *b, g);
                    }
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, g.iter().zip(vb).map(|(x, y)| x * y).collect());
                    }
                    if self.rg(*b) {
                        accumulate(&mut grads, *b, g.iter().zip(va).map(|(x, y)| x * y).collect());
                    }
                }
                Op::Sum(x) => {
                    let n = self.value(*x).numel();
                    accumulate(&mut grads, *x, vec![g[0]; n]);
                }
                Op::CrossEntropy {
                    logits,
                    labels,
                    weights,
                    ignore,
                    scale,
                    probs,
                } => {
                    let (c, h, w) = probs.dims3()?;
                    let plane = h * w;
                    let upstream = g[0] * scale;
                    let mut d = vec![0.0f32; c * plane];
                    for (p, &l) in labels.iter().enumerate() {
                        if l == *ignore {
                            continue;
                        }
                        let wt = weights.as_ref().map_or(1.0, |wt| wt[l as usize]) * upstream;
                        for ch in 0..c {
                            let i = ch * plane + p;
                            let onehot = if ch == l as usize { 1.0 } else { 0.0 };
                            d[i] = wt * (probs.data()[i] - onehot);
                        }
                    }
                    accumulate(&mut grads, *logits, d);
                }
                Op::BinaryCrossEntropy {
                    pred,
                    target,
                    keep,
                    scale,
                } => {
                    let upstream = g[0] * scale;
                    let d = self
                        .value(*pred)
                        .data()
                        .iter()
                        .zip(target)
                        .zip(keep)
                        .map(|((&p, &t), &k)| {
                            if !k {
                                return 0.0;
                            }
                            let pc = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
                            upstream * (pc - t) / (pc * (1.0 - pc))
                        })
                        .collect();
                    accumulate(&mut grads, *pred, d);
                }
            }
        }
        Ok(Gradients { grads })
    }
}

pub(crate) fn bce_term(p: f32, t: f32) -> f64 {
    let pc = p.clamp(PROB_EPS, 1.0 - PROB_EPS) as f64;
    let t = t as f64;
    -(t * pc.ln() + (1.0 - t) * (1.0 - pc).ln())
}

fn accumulate(grads: &mut [Option<Vec<f32>>], var: Var, delta: Vec<f32>) {
    match &mut grads[var.0] {
        Some(g) => g.iter_mut().zip(&delta).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(delta),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::scalar(3.0));
        let p = tape.param(Tensor::scalar(2.0));
        let y = tape.mul(x, p).unwrap();
        let grads = tape.backward(y).unwrap();
        assert!(grads.get(x).is_none());
        assert_eq!(grads.get(p).unwrap(), &[3.0]);
    }

    #[test]
    fn shared_use_accumulates() {
        let mut tape = Tape::new();
        let p = tape.param(Tensor::scalar(3.0));
        let a = tape.add(p, p).unwrap();
        let b = tape.mul(a, p).unwrap(); // 2p^2 -> 4p
        let grads = tape.backward(b).unwrap();
        assert_eq!(grads.get(p).unwrap(), &[12.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let p = tape.param(Tensor::zeros(&[2]));
        assert!(tape.backward(p).is_err());
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        let mut tape = Tape::new();
        let l = tape.param(Tensor::zeros(&[2, 1, 2]));
        assert!(matches!(
            tape.cross_entropy(l, &[0, 2], 255, None, 1.0),
            Err(Error::Data(_))
        ));
        assert!(tape.cross_entropy(l, &[0, 255], 255, None, 1.0).is_ok());
    }
}
