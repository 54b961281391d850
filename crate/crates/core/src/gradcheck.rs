//! Finite-difference checks of every differentiable tape operation.
//!
//! Each case builds a random instance of one operation on a training tape,
//! reduces its output to a scalar with a random projection and compares the
//! tape's gradients against central differences of an independent `f64`
//! implementation of the same operation.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::segmodel::IGNORE;
use crate::tensor::{Rng, Tape, Tensor, Var};

pub const LAYERS: [&str; 9] = [
    "conv2d",
    "relu",
    "sigmoid",
    "softmax_channels",
    "add",
    "mul",
    "sum",
    "cross_entropy",
    "binary_cross_entropy",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckConfig {
    pub cases_per_layer: usize,
    pub epsilon: f64,
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            cases_per_layer: 32,
            epsilon: 1e-3,
            tolerance: 1e-3,
            seed: 0,
        }
    }
}

/// Outcome for one differentiated tensor of one case.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckResult {
    pub layer: String,
    pub case: usize,
    pub tensor: String,
    pub shape: Vec<usize>,
    /// `|analytic - numeric|_2 / max(|analytic|_2, |numeric|_2)`; 0 when
    /// both norms are below 1e-9.
    pub rel_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub config: GradCheckConfig,
    pub results: Vec<GradCheckResult>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }

    /// Worst relative error and number of distinct input-shape signatures
    /// per layer.
    pub fn summary(&self) -> Vec<(String, f64, usize)> {
        LAYERS
            .iter()
            .map(|&l| {
                let rs: Vec<&GradCheckResult> = self.results.iter().filter(|r| r.layer == l).collect();
                let worst = rs.iter().map(|r| r.rel_error).fold(0.0, f64::max);
                let mut signatures: Vec<(usize, Vec<&Vec<usize>>)> = Vec::new();
                for r in &rs {
                    match signatures.iter_mut().find(|(c, _)| *c == r.case) {
                        Some((_, shapes)) => shapes.push(&r.shape),
                        None => signatures.push((r.case, vec![&r.shape])),
                    }
                }
                let mut distinct: Vec<Vec<&Vec<usize>>> = signatures.into_iter().map(|(_, s)| s).collect();
                distinct.sort();
                distinct.dedup();
                (l.to_string(), worst, distinct.len())
            })
            .collect()
    }
}

/// A differentiable case: named inputs plus the reference function.
struct Case {
    inputs: Vec<(&'static str, Vec<usize>, Vec<f32>)>,
    /// Scalar objective in `f64` from (possibly perturbed) inputs.
    reference: Box<dyn Fn(&[Vec<f64>]) -> f64>,
    /// Builds the same objective on a tape from the input leaves.
    build: Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>,
}

fn uniform(rng: &mut Rng, n: usize, lo: f64, hi: f64) -> Vec<f32> {
    (0..n).map(|_| rng.range_f64(lo, hi) as f32).collect()
}

fn away_from_zero(rng: &mut Rng, n: usize) -> Vec<f32> {
    (0..n)
        .map(|_| {
            let m = rng.range_f64(0.05, 1.0);
            (if rng.bernoulli(0.5) { m } else { -m }) as f32
        })
        .collect()
}

fn shape3(rng: &mut Rng) -> Vec<usize> {
    vec![rng.range_usize(1, 4), rng.range_usize(1, 5), rng.range_usize(1, 5)]
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Projects a tape output onto fixed random weights and sums.
fn project(tape: &mut Tape, y: Var, weights: &[f32]) -> Result<Var> {
    let shape = tape.value(y).shape().to_vec();
    let w = tape.input(Tensor::new(shape, weights.to_vec())?);
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

fn dot(a: &[f64], w: &[f32]) -> f64 {
    a.iter().zip(w).map(|(x, &y)| x * y as f64).sum()
}

fn ref_conv(x: &[f64], k: &[f64], b: &[f64], dims: [usize; 6], pad: usize) -> Vec<f64> {
    let [cin, h, w, cout, kh, kw] = dims;
    let (oh, ow) = (h + 2 * pad + 1 - kh, w + 2 * pad + 1 - kw);
    let mut out = vec![0.0; cout * oh * ow];
    for o in 0..cout {
        for y in 0..oh {
            for xx in 0..ow {
                let mut acc = b[o];
                for c in 0..cin {
                    for dy in 0..kh {
                        for dx in 0..kw {
                            let iy = (y + dy) as isize - pad as isize;
                            let ix = (xx + dx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            acc += k[((o * cin + c) * kh + dy) * kw + dx] * x[(c * h + iy as usize) * w + ix as usize];
                        }
                    }
                }
                out[(o * oh + y) * ow + xx] = acc;
            }
        }
    }
    out
}

fn ref_softmax(x: &[f64], c: usize, plane: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for p in 0..plane {
        let m = (0..c).map(|ch| x[ch * plane + p]).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = (0..c).map(|ch| (x[ch * plane + p] - m).exp()).sum();
        for ch in 0..c {
            out[ch * plane + p] = (x[ch * plane + p] - m).exp() / z;
        }
    }
    out
}

fn make_case(layer: &str, rng: &mut Rng) -> Case {
    match layer {
        "conv2d" => {
            let (cin, cout) = (rng.range_usize(1, 3), rng.range_usize(1, 3));
            let kh = [1, 3, 5][rng.below(3)];
            let kw = [1, 3, 5][rng.below(3)];
            let pad = rng.range_usize(0, kh.max(kw) / 2);
            let h = rng.range_usize((kh.saturating_sub(2 * pad)).max(1), 6);
            let w = rng.range_usize((kw.saturating_sub(2 * pad)).max(1), 6);
            let (oh, ow) = (h + 2 * pad + 1 - kh, w + 2 * pad + 1 - kw);
            let weights = uniform(rng, cout * oh * ow, -1.0, 1.0);
            let dims = [cin, h, w, cout, kh, kw];
            let wr = weights.clone();
            Case {
                inputs: vec![
                    ("input", vec![cin, h, w], uniform(rng, cin * h * w, -1.0, 1.0)),
                    ("kernels", vec![cout, cin, kh, kw], uniform(rng, cout * cin * kh * kw, -1.0, 1.0)),
                    ("bias", vec![cout], uniform(rng, cout, -1.0, 1.0)),
                ],
                reference: Box::new(move |v| dot(&ref_conv(&v[0], &v[1], &v[2], dims, pad), &wr)),
                build: Box::new(move |t, v| {
                    let y = t.conv2d(v[0], v[1], v[2], pad)?;
                    project(t, y, &weights)
                }),
            }
        }
        "relu" | "sigmoid" => {
            let shape = shape3(rng);
            let n = numel(&shape);
            let weights = uniform(rng, n, -1.0, 1.0);
            let wr = weights.clone();
            let relu = layer == "relu";
            let x = if relu { away_from_zero(rng, n) } else { uniform(rng, n, -4.0, 4.0) };
            Case {
                inputs: vec![("x", shape, x)],
                reference: Box::new(move |v| {
                    let y: Vec<f64> = v[0]
                        .iter()
                        .map(|&x| if relu { x.max(0.0) } else { 1.0 / (1.0 + (-x).exp()) })
                        .collect();
                    dot(&y, &wr)
                }),
                build: Box::new(move |t, v| {
                    let y = if relu { t.relu(v[0]) } else { t.sigmoid(v[0]) };
                    project(t, y, &weights)
                }),
            }
        }
        "softmax_channels" => {
            let shape = shape3(rng);
            let (c, plane) = (shape[0], shape[1] * shape[2]);
            let weights = uniform(rng, numel(&shape), -1.0, 1.0);
            let wr = weights.clone();
            let x = uniform(rng, numel(&shape), -3.0, 3.0);
            Case {
                inputs: vec![("x", shape, x)],
                reference: Box::new(move |v| dot(&ref_softmax(&v[0], c, plane), &wr)),
                build: Box::new(move |t, v| {
                    let y = t.softmax_channels(v[0])?;
                    project(t, y, &weights)
                }),
            }
        }
        "add" | "mul" => {
            let shape = shape3(rng);
            let n = numel(&shape);
            let weights = uniform(rng, n, -1.0, 1.0);
            let wr = weights.clone();
            let add = layer == "add";
            Case {
                inputs: vec![
                    ("a", shape.clone(), uniform(rng, n, -2.0, 2.0)),
                    ("b", shape, uniform(rng, n, -2.0, 2.0)),
                ],
                reference: Box::new(move |v| {
                    let y: Vec<f64> = v[0]
                        .iter()
                        .zip(&v[1])
                        .map(|(a, b)| if add { a + b } else { a * b })
                        .collect();
                    dot(&y, &wr)
                }),
                build: Box::new(move |t, v| {
                    let y = if add { t.add(v[0], v[1])? } else { t.mul(v[0], v[1])? };
                    project(t, y, &weights)
                }),
            }
        }
        "sum" => {
            let shape = shape3(rng);
            let x = uniform(rng, numel(&shape), -2.0, 2.0);
            Case {
                inputs: vec![("x", shape, x)],
                reference: Box::new(|v| v[0].iter().sum()),
                build: Box::new(|t, v| Ok(t.sum(v[0]))),
            }
        }
        "cross_entropy" => {
            let mut shape = shape3(rng);
            shape[0] = rng.range_usize(2, 5);
            let (c, plane) = (shape[0], shape[1] * shape[2]);
            let mut labels: Vec<u8> = (0..plane)
                .map(|_| if rng.bernoulli(0.2) { IGNORE } else { rng.below(c) as u8 })
                .collect();
            labels[0] = rng.below(c) as u8;
            let weights: Option<Vec<f32>> = rng.bernoulli(0.5).then(|| uniform(rng, c, 0.2, 2.0));
            let scale = rng.range_f64(0.1, 2.0) as f32;
            let x = uniform(rng, numel(&shape), -3.0, 3.0);
            let (lr, wr) = (labels.clone(), weights.clone());
            Case {
                inputs: vec![("logits", shape, x)],
                reference: Box::new(move |v| {
                    let p = ref_softmax(&v[0], c, plane);
                    let mut total = 0.0;
                    for (i, &l) in lr.iter().enumerate() {
                        if l != IGNORE {
                            let wt = wr.as_ref().map_or(1.0, |w| w[l as usize] as f64);
                            total -= wt * p[l as usize * plane + i].ln();
                        }
                    }
                    total * scale as f64
                }),
                build: Box::new(move |t, v| t.cross_entropy(v[0], &labels, IGNORE, weights.as_deref(), scale)),
            }
        }
        "binary_cross_entropy" => {
            let shape = shape3(rng);
            let n = numel(&shape);
            let target: Vec<f32> = (0..n).map(|_| if rng.bernoulli(0.5) { 1.0 } else { 0.0 }).collect();
            let mut keep: Vec<bool> = (0..n).map(|_| rng.bernoulli(0.8)).collect();
            keep[0] = true;
            let scale = rng.range_f64(0.1, 2.0) as f32;
            let x = uniform(rng, n, 0.05, 0.95);
            let (tr, kr) = (target.clone(), keep.clone());
            Case {
                inputs: vec![("pred", shape, x)],
                reference: Box::new(move |v| {
                    let mut total = 0.0;
                    for ((&p, &t), &k) in v[0].iter().zip(&tr).zip(&kr) {
                        if k {
                            total -= t as f64 * p.ln() + (1.0 - t as f64) * (1.0 - p).ln();
                        }
                    }
                    total * scale as f64
                }),
                build: Box::new(move |t, v| t.binary_cross_entropy(v[0], &target, &keep, scale)),
            }
        }
        other => unreachable!("unknown layer {other}"),
    }
}

fn check_case(layer: &str, index: usize, case: &Case, cfg: &GradCheckConfig) -> Result<Vec<GradCheckResult>> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = case
        .inputs
        .iter()
        .map(|(_, shape, data)| Tensor::new(shape.clone(), data.clone()).map(|t| tape.param(t)))
        .collect::<Result<_>>()?;
    let loss = (case.build)(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let base: Vec<Vec<f64>> = case
        .inputs
        .iter()
        .map(|(_, _, d)| d.iter().map(|&v| v as f64).collect())
        .collect();
    let mut out = Vec::new();
    for (i, (name, shape, _)) in case.inputs.iter().enumerate() {
        let analytic: Vec<f64> = grads
            .get(vars[i])
            .map(|g| g.iter().map(|&v| v as f64).collect())
            .unwrap_or_else(|| vec![0.0; base[i].len()]);
        let mut numeric = Vec::with_capacity(base[i].len());
        let mut probe = base.clone();
        for j in 0..base[i].len() {
            probe[i][j] = base[i][j] + cfg.epsilon;
            let up = (case.reference)(&probe);
            probe[i][j] = base[i][j] - cfg.epsilon;
            let down = (case.reference)(&probe);
            probe[i][j] = base[i][j];
            numeric.push((up - down) / (2.0 * cfg.epsilon));
        }
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, n)| a - n).collect();
        let scale = norm(&analytic).max(norm(&numeric));
        let rel_error = if scale < 1e-9 { 0.0 } else { norm(&diff) / scale };
        out.push(GradCheckResult {
            layer: layer.to_string(),
            case: index,
            tensor: name.to_string(),
            shape: shape.clone(),
            rel_error,
            passed: rel_error <= cfg.tolerance,
        });
    }
    Ok(out)
}

/// Runs `cases_per_layer` random cases for every layer in [`LAYERS`].
pub fn run_gradcheck(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut results = Vec::new();
    for (li, layer) in LAYERS.iter().enumerate() {
        let mut rng = Rng::stream(cfg.seed, li as u64);
        for i in 0..cfg.cases_per_layer {
            let case = make_case(layer, &mut rng);
            results.extend(check_case(layer, i, &case, cfg)?);
        }
    }
    Ok(GradCheckReport {
        config: cfg.clone(),
        results,
    })
}
