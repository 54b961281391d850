//! Dense `f32` tensors, the convolution/activation kernels built on them,
//! a reverse-mode autodiff tape, the SplitMix64 generator and the SEGT
//! binary format.
//!
//! Layout is row-major throughout. Feature maps are `[C, H, W]`, kernels are
//! `[Cout, Cin, kh, kw]`. The forward convolution lowers the input to a
//! `[Cin*kh*kw, H*W]` column matrix and runs a single GEMM against the
//! kernel matrix; [`ops::conv2d_direct`] is the plain nested-loop version of
//! the same cross-correlation and is what the tests check the GEMM path
//! against.

pub mod ops;
mod rng;
pub mod segt;
mod tape;

pub use rng::Rng;
pub use tape::{Gradients, Tape, Var};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    grad: Option<Vec<f32>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Self {
            shape,
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
            grad: None,
        }
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
            grad: None,
        }
    }

    pub fn scalar(value: f32) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
            grad: None,
        }
    }

    /// Tensor with every entry drawn from `N(0, std²)`.
    pub fn randn(shape: &[usize], std: f32, rng: &mut Rng) -> Self {
        let numel = shape.iter().product();
        let data = (0..numel).map(|_| rng.normal() as f32 * std).collect();
        Self {
            shape: shape.to_vec(),
            data,
            grad: None,
        }
    }

    /// Tensor with entries uniform in `[lo, hi)`.
    pub fn uniform(shape: &[usize], lo: f32, hi: f32, rng: &mut Rng) -> Self {
        let numel = shape.iter().product();
        let data = (0..numel)
            .map(|_| lo + (hi - lo) * rng.next_f32())
            .collect();
        Self {
            shape: shape.to_vec(),
            data,
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f32 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        self.shape = shape;
        self.grad = None;
        Ok(self)
    }

    /// `(C, H, W)` of a rank-3 tensor.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape.as_slice() {
            &[c, h, w] => Ok((c, h, w)),
            other => Err(Error::shape(format!("expected [C,H,W], got {other:?}"))),
        }
    }

    pub fn grad(&self) -> Option<&[f32]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<f32>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(Error::shape(format!(
                "gradient of length {} for tensor {:?}",
                grad.len(),
                self.shape
            )));
        }
        self.grad = Some(grad);
        Ok(())
    }

    /// Adds `delta` into the gradient buffer, creating it if absent.
    pub fn accumulate_grad(&mut self, delta: &[f32]) -> Result<()> {
        if delta.len() != self.data.len() {
            return Err(Error::shape(format!(
                "gradient of length {} for tensor {:?}",
                delta.len(),
                self.shape
            )));
        }
        match &mut self.grad {
            Some(g) => g.iter_mut().zip(delta).for_each(|(g, d)| *g += d),
            None => self.grad = Some(delta.to_vec()),
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = &mut self.grad {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Channel slice `c` of a `[C, H, W]` tensor.
    pub fn channel(&self, c: usize) -> &[f32] {
        let plane = self.shape[1] * self.shape[2];
        &self.data[c * plane..(c + 1) * plane]
    }
}

/// Plain gradient descent: `p <- p - lr * grad`, then zero the gradients.
///
/// Fails without touching anything if any parameter lacks a gradient buffer.
pub fn sgd_step(params: &mut [&mut Tensor], learning_rate: f32) -> Result<()> {
    if !(learning_rate >= 0.0 && learning_rate.is_finite()) {
        return Err(Error::invalid(format!(
            "learning rate must be finite and non-negative, got {learning_rate}"
        )));
    }
    if let Some(i) = params.iter().position(|p| p.grad.is_none()) {
        return Err(Error::invalid(format!(
            "parameter {i} has no gradient; run backward first"
        )));
    }
    for p in params.iter_mut() {
        let grad = p.grad.as_mut().expect("checked above");
        for (v, g) in p.data.iter_mut().zip(grad.iter_mut()) {
            *v -= learning_rate * *g;
            *g = 0.0;
        }
    }
    Ok(())
}
