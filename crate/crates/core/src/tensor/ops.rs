//! Forward kernels and the raw backward pieces the tape reuses.

use super::Tensor;
use crate::error::{Error, Result};

/// Probability floor for log terms and for reported probabilities.
pub(crate) const PROB_CLAMP: f32 = 1e-7;

/// Geometry of a same-stride 2-D cross-correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub(crate) fn new(input: &Tensor, kernels: &Tensor, bias: &Tensor, pad: usize) -> Result<Self> {
        let (cin, h, w) = input.dims3()?;
        let &[cout, kcin, kh, kw] = kernels.shape() else {
            return Err(Error::shape(format!(
                "kernels must be [Cout,Cin,kh,kw], got {:?}",
                kernels.shape()
            )));
        };
        if kcin != cin {
            return Err(Error::shape(format!(
                "input has {cin} channels but kernels expect {kcin}"
            )));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::shape(format!("kernel size {kh}x{kw} must be odd")));
        }
        if bias.shape() != [cout] {
            return Err(Error::shape(format!(
                "bias must be [{cout}], got {:?}",
                bias.shape()
            )));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::shape(format!(
                "{kh}x{kw} kernel does not fit {h}x{w} input with padding {pad}"
            )));
        }
        Ok(Self {
            cin,
            cout,
            h,
            w,
            kh,
            kw,
            pad,
            out_h: h + 2 * pad - kh + 1,
            out_w: w + 2 * pad - kw + 1,
        })
    }

    fn rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.out_h * self.out_w
    }

    /// A 1x1 kernel without padding reads the input directly as its column matrix.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.pad == 0
    }
}

/// `c[m,n] = a[m,k] * b[k,n] + beta * c[m,n]` with arbitrary strides for
/// `a` and `b`; `c` is dense row-major.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_strides: (usize, usize),
    b: &[f32],
    b_strides: (usize, usize),
    c: &mut [f32],
    beta: f32,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n);
    if k > 0 {
        assert!((m - 1) * a_strides.0 + (k - 1) * a_strides.1 < a.len());
        assert!((k - 1) * b_strides.0 + (n - 1) * b_strides.1 < b.len());
    }
    // SAFETY: the asserts above bound every index sgemm touches inside the
    // three slices, and `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Lowers `[Cin, H, W]` to the `[Cin*kh*kw, out_h*out_w]` column matrix.
pub(crate) fn im2col(input: &[f32], g: &ConvGeometry) -> Vec<f32> {
    let n = g.cols();
    let mut col = vec![0.0f32; g.rows() * n];
    for ci in 0..g.cin {
        let plane = &input[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let r = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut col[r * n..(r + 1) * n];
                let (x_lo, x_hi) = valid_range(kx, g.pad, g.w, g.out_w);
                for y in 0..g.out_h {
                    let yy = y + ky;
                    if yy < g.pad || yy - g.pad >= g.h || x_lo >= x_hi {
                        continue;
                    }
                    let src = &plane[(yy - g.pad) * g.w..(yy - g.pad + 1) * g.w];
                    let row = &mut dst[y * g.out_w..(y + 1) * g.out_w];
                    row[x_lo..x_hi].copy_from_slice(&src[x_lo + kx - g.pad..x_hi + kx - g.pad]);
                }
            }
        }
    }
    col
}

/// Scatter-adds a column-matrix gradient back onto `[Cin, H, W]`.
fn col2im(col: &[f32], g: &ConvGeometry, out: &mut [f32]) {
    let n = g.cols();
    for ci in 0..g.cin {
        let plane = &mut out[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let r = (ci * g.kh + ky) * g.kw + kx;
                let src = &col[r * n..(r + 1) * n];
                let (x_lo, x_hi) = valid_range(kx, g.pad, g.w, g.out_w);
                for y in 0..g.out_h {
                    let yy = y + ky;
                    if yy < g.pad || yy - g.pad >= g.h || x_lo >= x_hi {
                        continue;
                    }
                    let dst = &mut plane[(yy - g.pad) * g.w..(yy - g.pad + 1) * g.w];
                    let row = &src[y * g.out_w..(y + 1) * g.out_w];
                    for (d, s) in dst[x_lo + kx - g.pad..x_hi + kx - g.pad]
                        .iter_mut()
                        .zip(&row[x_lo..x_hi])
                    {
                        *d += s;
                    }
                }
            }
        }
    }
}

/// Output columns `x` for which `x + k - pad` lands inside `[0, w)`.
fn valid_range(k: usize, pad: usize, w: usize, out_w: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(k);
    let hi = (w + pad).saturating_sub(k).min(out_w);
    (lo, hi.max(lo))
}

/// Cross-correlation with zero padding. Keeps the im2col matrix so the
/// backward pass can reuse it.
pub(crate) fn conv2d_forward(
    input: &Tensor,
    kernels: &Tensor,
    bias: &Tensor,
    pad: usize,
) -> Result<(Tensor, ConvGeometry, Option<Vec<f32>>)> {
    let g = ConvGeometry::new(input, kernels, bias, pad)?;
    let n = g.cols();
    let mut out = vec![0.0f32; g.cout * n];
    for (co, row) in out.chunks_mut(n).enumerate() {
        row.fill(bias.data()[co]);
    }
    let col = if g.is_pointwise() {
        None
    } else {
        Some(im2col(input.data(), &g))
    };
    let b = col.as_deref().unwrap_or(input.data());
    gemm(
        g.cout,
        g.rows(),
        n,
        kernels.data(),
        (g.rows(), 1),
        b,
        (n, 1),
        &mut out,
        1.0,
    );
    let out = Tensor::new(vec![g.cout, g.out_h, g.out_w], out)?;
    Ok((out, g, col))
}

/// Gradients of a convolution given the upstream gradient `grad_out`.
/// Returns `(d_input, d_kernels, d_bias)`; `d_input` is skipped when not needed.
pub(crate) fn conv2d_backward(
    input: &[f32],
    col: Option<&[f32]>,
    kernels: &[f32],
    grad_out: &[f32],
    g: &ConvGeometry,
    need_input: bool,
) -> (Option<Vec<f32>>, Vec<f32>, Vec<f32>) {
    let n = g.cols();
    let r = g.rows();
    let owned;
    let col = match col {
        Some(c) => c,
        None if g.is_pointwise() => input,
        None => {
            owned = im2col(input, g);
            &owned
        }
    };
    let mut d_kernels = vec![0.0f32; g.cout * r];
    gemm(g.cout, n, r, grad_out, (n, 1), col, (1, n), &mut d_kernels, 0.0);
    let d_bias = grad_out
        .chunks(n)
        .map(|row| row.iter().map(|&v| v as f64).sum::<f64>() as f32)
        .collect();
    let d_input = need_input.then(|| {
        let mut d_col = vec![0.0f32; r * n];
        gemm(r, g.cout, n, kernels, (1, r), grad_out, (n, 1), &mut d_col, 0.0);
        if g.is_pointwise() {
            d_col
        } else {
            let mut d_in = vec![0.0f32; g.cin * g.h * g.w];
            col2im(&d_col, g, &mut d_in);
            d_in
        }
    });
    (d_input, d_kernels, d_bias)
}

/// 2-D cross-correlation, `[Cin,H,W] x [Cout,Cin,kh,kw] + [Cout] -> [Cout,H',W']`
/// with `H' = H + 2*padding - kh + 1`.
pub fn conv2d(input: &Tensor, kernels: &Tensor, bias: &Tensor, padding: usize) -> Result<Tensor> {
    conv2d_forward(input, kernels, bias, padding).map(|(out, _, _)| out)
}

/// Nested-loop reference implementation of [`conv2d`].
pub fn conv2d_direct(
    input: &Tensor,
    kernels: &Tensor,
    bias: &Tensor,
    padding: usize,
) -> Result<Tensor> {
    let g = ConvGeometry::new(input, kernels, bias, padding)?;
    let x = input.data();
    let k = kernels.data();
    let mut out = vec![0.0f32; g.cout * g.out_h * g.out_w];
    for co in 0..g.cout {
        for y in 0..g.out_h {
            for xo in 0..g.out_w {
                let mut acc = bias.data()[co] as f64;
                for ci in 0..g.cin {
                    for ky in 0..g.kh {
                        for kx in 0..g.kw {
                            let yy = y as isize + ky as isize - padding as isize;
                            let xx = xo as isize + kx as isize - padding as isize;
                            if yy < 0 || xx < 0 || yy >= g.h as isize || xx >= g.w as isize {
                                continue;
                            }
                            let xi = x[(ci * g.h + yy as usize) * g.w + xx as usize];
                            let ki = k[((co * g.cin + ci) * g.kh + ky) * g.kw + kx];
                            acc += xi as f64 * ki as f64;
                        }
                    }
                }
                out[(co * g.out_h + y) * g.out_w + xo] = acc as f32;
            }
        }
    }
    Tensor::new(vec![g.cout, g.out_h, g.out_w], out)
}

pub fn relu(x: &Tensor) -> Tensor {
    map(x, |v| v.max(0.0))
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    map(x, sigmoid_scalar)
}

pub(crate) fn sigmoid_scalar(v: f32) -> f32 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn map(x: &Tensor, f: impl Fn(f32) -> f32) -> Tensor {
    let data = x.data().iter().map(|&v| f(v)).collect();
    Tensor::new(x.shape().to_vec(), data).expect("same length")
}

/// Per-pixel softmax over the channel axis of a `[C, H, W]` tensor.
pub fn softmax_channels(x: &Tensor) -> Result<Tensor> {
    let (c, h, w) = x.dims3()?;
    if c == 0 {
        return Err(Error::shape("softmax over zero channels"));
    }
    let plane = h * w;
    let src = x.data();
    let mut max = src[..plane].to_vec();
    for ch in 1..c {
        for (m, &v) in max.iter_mut().zip(&src[ch * plane..(ch + 1) * plane]) {
            *m = m.max(v);
        }
    }
    let mut out = vec![0.0f32; c * plane];
    let mut sum = vec![0.0f64; plane];
    for ch in 0..c {
        let dst = &mut out[ch * plane..(ch + 1) * plane];
        for (((d, &v), &m), s) in dst
            .iter_mut()
            .zip(&src[ch * plane..(ch + 1) * plane])
            .zip(&max)
            .zip(sum.iter_mut())
        {
            *d = (v - m).exp();
            *s += *d as f64;
        }
    }
    for ch in 0..c {
        for (d, &s) in out[ch * plane..(ch + 1) * plane].iter_mut().zip(&sum) {
            *d = (*d as f64 / s) as f32;
        }
    }
    Tensor::new(vec![c, h, w], out)
}

/// Mirrors a `[C, H, W]` tensor along the width axis.
pub fn flip_horizontal(x: &Tensor) -> Result<Tensor> {
    let (c, h, w) = x.dims3()?;
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(w) {
        row.reverse();
    }
    Tensor::new(vec![c, h, w], out)
}

/// Bilinear resampling of every channel of a `[C, H, W]` tensor to
/// `[C, out_h, out_w]`, sampling at pixel centres (half-pixel offset) with
/// edge clamping.
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (c, h, w) = x.dims3()?;
    if out_h == 0 || out_w == 0 || h == 0 || w == 0 {
        return Err(Error::shape(format!(
            "cannot resize {h}x{w} to {out_h}x{out_w}"
        )));
    }
    let taps = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f32)> {
        let scale = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|i| {
                let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
                let i0 = src.floor() as usize;
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, (src - i0 as f64) as f32)
            })
            .collect()
    };
    let ys = taps(h, out_h);
    let xs = taps(w, out_w);
    let src = x.data();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for &(y0, y1, wy) in &ys {
            let r0 = &plane[y0 * w..(y0 + 1) * w];
            let r1 = &plane[y1 * w..(y1 + 1) * w];
            for &(x0, x1, wx) in &xs {
                let top = r0[x0] + (r0[x1] - r0[x0]) * wx;
                let bot = r1[x0] + (r1[x1] - r1[x0]) * wx;
                out.push(top + (bot - top) * wy);
            }
        }
    }
    Tensor::new(vec![c, out_h, out_w], out)
}
