//! Exact forward pass and evaluation.
//!
//! Sums over a hidden axis (the inputs of every layer after the first) are
//! accumulated in 2^-40 fixed point: each product is rounded on its own and
//! the integer sum is associative, so reordering hidden units reorders the
//! terms without changing a single bit of the result. Sums over raw input
//! features go through the shared matrix multiply, whose per-element order
//! does not depend on the unit's position.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::gemm::{gemm, View};
use super::{Activation, LayerKind, Network};
use crate::data::{Dataset, Samples, Split};
use crate::{Error, Result};

const FIXED_SCALE: f64 = (1u64 << 40) as f64;
const FIXED_UNSCALE: f64 = 1.0 / FIXED_SCALE;

/// Examples processed together; weights are streamed once per tile.
const TILE: usize = 128;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    /// Mean cross-entropy in nats.
    pub loss: f64,
    /// Top-1 error in `[0, 1]`.
    pub error: f64,
}

struct CompiledLayer {
    kind: LayerKind,
    out_dim: usize,
    in_dim: usize,
    in_spatial: (usize, usize),
    out_spatial: (usize, usize),
    /// Row-major weights widened to f64, pre-multiplied by 2^40 when `fixed`.
    weight: Vec<f64>,
    bias: Vec<f64>,
    fixed: bool,
    relu: bool,
}

pub(crate) struct Compiled {
    layers: Vec<CompiledLayer>,
    in_numel: usize,
    classes: usize,
}

impl Compiled {
    pub(crate) fn new(net: &Network) -> Self {
        let layers = net
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let fixed = i > 0;
                let scale = if fixed { FIXED_SCALE } else { 1.0 };
                CompiledLayer {
                    kind: l.kind,
                    out_dim: l.out_dim,
                    in_dim: l.in_dim,
                    in_spatial: l.in_spatial,
                    out_spatial: l.out_spatial(),
                    weight: l.weight.iter().map(|&w| f64::from(w) * scale).collect(),
                    bias: l
                        .bias
                        .as_ref()
                        .map_or_else(|| vec![0.0; l.out_dim], |b| {
                            b.iter().map(|&v| f64::from(v)).collect()
                        }),
                    fixed,
                    relu: l.activation == Activation::Relu,
                }
            })
            .collect();
        Compiled {
            layers,
            in_numel: net.input_numel(),
            classes: net.num_classes,
        }
    }

    /// Forward a tile of examples. `visit(layer, acts)` sees every hidden
    /// layer's post-activations (`n x numel`, row-major).
    fn forward_tile(
        &self,
        x: &[f32],
        n: usize,
        mut visit: impl FnMut(usize, &[f64]),
    ) -> Vec<f64> {
        let mut act: Vec<f64> = x.iter().map(|&v| f64::from(v)).collect();
        let last = self.layers.len() - 1;
        for (li, layer) in self.layers.iter().enumerate() {
            act = match layer.kind {
                LayerKind::Dense => layer.dense(&act, n),
                LayerKind::Conv2d {
                    kernel,
                    stride,
                    padding,
                } => layer.conv(&act, n, kernel, stride, padding),
            };
            if li < last {
                visit(li, &act);
            }
        }
        act
    }
}

impl CompiledLayer {
    /// One hidden-axis unit in fixed point.
    #[inline]
    fn unit(&self, sum_row: &[f64], input: &[f64], bias: f64) -> f64 {
        self.finish(fixed_dot(sum_row, input) as f64 * FIXED_UNSCALE, bias)
    }

    #[inline]
    fn finish(&self, s: f64, bias: f64) -> f64 {
        let z = s + bias;
        if self.relu {
            z.max(0.0)
        } else {
            z
        }
    }

    fn dense(&self, act: &[f64], n: usize) -> Vec<f64> {
        let (out, inp) = (self.out_dim, self.in_dim);
        let mut res = vec![0.0; n * out];
        if !self.fixed {
            gemm(n, inp, out, act, View::rows(inp), &self.weight, View::transposed(inp), 0.0, &mut res, View::rows(out));
            for r in res.chunks_exact_mut(out) {
                for (v, &b) in r.iter_mut().zip(&self.bias) {
                    *v = self.finish(*v, b);
                }
            }
            return res;
        }
        for o in 0..out {
            let row = &self.weight[o * inp..(o + 1) * inp];
            let b = self.bias[o];
            for e in 0..n {
                res[e * out + o] = self.unit(row, &act[e * inp..(e + 1) * inp], b);
            }
        }
        res
    }

    fn conv(&self, act: &[f64], n: usize, k: usize, stride: usize, pad: usize) -> Vec<f64> {
        let (h, w) = self.in_spatial;
        let (oh, ow) = self.out_spatial;
        let p_count = oh * ow;
        let kk = self.in_dim * k * k;
        let in_numel = self.in_dim * h * w;
        let out_numel = self.out_dim * p_count;
        let mut res = vec![0.0; n * out_numel];
        let mut cols = vec![0.0; p_count * kk];
        for e in 0..n {
            im2row(
                &act[e * in_numel..(e + 1) * in_numel],
                self.in_dim,
                (h, w),
                (oh, ow),
                k,
                stride,
                pad,
                &mut cols,
            );
            let dst = &mut res[e * out_numel..(e + 1) * out_numel];
            if !self.fixed {
                let (cv, wv) = (View { rs: 1, cs: p_count }, View::transposed(kk));
                gemm(p_count, kk, self.out_dim, &cols, View::rows(kk), &self.weight, wv, 0.0, dst, cv);
                for (o, plane) in dst.chunks_exact_mut(p_count).enumerate() {
                    for v in plane {
                        *v = self.finish(*v, self.bias[o]);
                    }
                }
                continue;
            }
            for o in 0..self.out_dim {
                let row = &self.weight[o * kk..(o + 1) * kk];
                let b = self.bias[o];
                for p in 0..p_count {
                    dst[o * p_count + p] = self.unit(row, &cols[p * kk..(p + 1) * kk], b);
                }
            }
        }
        res
    }
}

/// Unfold one `C x H x W` input into rows of `(c, ky, kx)` patches, one row
/// per output position. Out-of-bounds taps are zero.
#[allow(clippy::too_many_arguments)]
pub(crate) fn im2row(
    input: &[f64],
    channels: usize,
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
    rows: &mut [f64],
) {
    let kk = channels * k * k;
    for oy in 0..oh {
        for ox in 0..ow {
            let row = &mut rows[(oy * ow + ox) * kk..(oy * ow + ox + 1) * kk];
            let mut idx = 0;
            for c in 0..channels {
                let plane = &input[c * h * w..(c + 1) * h * w];
                for ky in 0..k {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    for kx in 0..k {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        row[idx] = if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w
                        {
                            plane[iy as usize * w + ix as usize]
                        } else {
                            0.0
                        };
                        idx += 1;
                    }
                }
            }
        }
    }
}

/// Order-independent dot product: every product is rounded to a multiple of
/// 2^-40 on its own, then summed with wrapping integer adds (exact whenever
/// the true sum fits in 64 bits).
#[inline]
fn fixed_dot(scaled: &[f64], a: &[f64]) -> i64 {
    let mut acc = 0i64;
    for (w, x) in scaled.iter().zip(a) {
        acc = acc.wrapping_add((w * x) as i64);
    }
    acc
}

fn check_input(net: &Network, x: &[f32]) -> Result<usize> {
    let d = net.input_numel();
    if d == 0 || !x.len().is_multiple_of(d) {
        return Err(Error::ShapeMismatch(format!(
            "input buffer of {} values is not a whole number of {d}-feature examples",
            x.len()
        )));
    }
    Ok(x.len() / d)
}

/// Logits (`n x classes`, row-major) for a batch of flattened examples.
pub fn forward(net: &Network, x: &[f32]) -> Result<Vec<f64>> {
    let n = check_input(net, x)?;
    let c = Compiled::new(net);
    Ok(c.logits(x, n))
}

impl Compiled {
    pub(crate) fn logits(&self, x: &[f32], n: usize) -> Vec<f64> {
        let d = self.in_numel;
        let tiles: Vec<Vec<f64>> = (0..n.div_ceil(TILE))
            .into_par_iter()
            .map(|t| {
                let lo = t * TILE;
                let hi = (lo + TILE).min(n);
                self.forward_tile(&x[lo * d..hi * d], hi - lo, |_, _| {})
            })
            .collect();
        let mut out = Vec::with_capacity(n * self.classes);
        for t in tiles {
            out.extend(t);
        }
        out
    }
}

/// Post-activations of every hidden layer, each `n x numel` row-major.
pub fn hidden_activations(net: &Network, x: &[f32]) -> Result<Vec<Vec<f64>>> {
    let n = check_input(net, x)?;
    let c = Compiled::new(net);
    let mut out = vec![Vec::new(); net.hidden_count()];
    let d = net.input_numel();
    for lo in (0..n).step_by(TILE) {
        let hi = (lo + TILE).min(n);
        c.forward_tile(&x[lo * d..hi * d], hi - lo, |li, acts| {
            out[li].extend_from_slice(acts)
        });
    }
    Ok(out)
}

/// Mean squared post-activation per hidden unit (per channel for
/// convolutions, averaged over spatial positions), for every hidden layer.
pub(crate) fn mean_sq_activations(net: &Network, x: &[f32]) -> Result<Vec<Vec<f64>>> {
    let n = check_input(net, x)?;
    if n == 0 {
        return Err(Error::Empty("sample set"));
    }
    let c = Compiled::new(net);
    let d = net.input_numel();
    let hidden = &net.layers[..net.hidden_count()];
    let mut sums: Vec<Vec<f64>> = hidden.iter().map(|l| vec![0.0; l.out_dim]).collect();
    for lo in (0..n).step_by(TILE) {
        let hi = (lo + TILE).min(n);
        c.forward_tile(&x[lo * d..hi * d], hi - lo, |li, acts| {
            let layer = &hidden[li];
            let sp = layer.out_spatial();
            let per = sp.0 * sp.1;
            let numel = layer.out_numel();
            for ex in acts.chunks_exact(numel) {
                for (u, s) in sums[li].iter_mut().enumerate() {
                    *s += ex[u * per..(u + 1) * per].iter().map(|a| a * a).sum::<f64>();
                }
            }
        });
    }
    for (li, s) in sums.iter_mut().enumerate() {
        let sp = hidden[li].out_spatial();
        let denom = (n * sp.0 * sp.1) as f64;
        for v in s.iter_mut() {
            *v /= denom;
        }
    }
    Ok(sums)
}

/// Numerically stable cross-entropy of one logit row.
pub fn cross_entropy(logits: &[f64], label: usize) -> f64 {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = logits.iter().map(|&z| (z - m).exp()).sum();
    m + s.ln() - logits[label]
}

/// Index of the largest logit; ties go to the lowest class index.
pub fn top1(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &z) in logits.iter().enumerate().skip(1) {
        if z > logits[best] {
            best = i;
        }
    }
    best
}

/// Mean loss and error of a logit matrix. The per-example losses are summed
/// in sorted order, so the result does not depend on example order.
pub fn logits_to_eval(logits: &[f64], labels: &[u32], classes: usize) -> Result<EvalResult> {
    if labels.is_empty() {
        return Err(Error::Empty("split"));
    }
    if logits.len() != labels.len() * classes {
        return Err(Error::ShapeMismatch("logits vs labels".into()));
    }
    let mut losses = Vec::with_capacity(labels.len());
    let mut wrong = 0usize;
    for (row, &y) in logits.chunks_exact(classes).zip(labels) {
        let y = y as usize;
        losses.push(cross_entropy(row, y));
        if top1(row) != y {
            wrong += 1;
        }
    }
    losses.sort_by(f64::total_cmp);
    let n = labels.len() as f64;
    Ok(EvalResult {
        loss: losses.iter().sum::<f64>() / n,
        error: wrong as f64 / n,
    })
}

pub fn evaluate_samples(net: &Network, samples: &Samples) -> Result<EvalResult> {
    if samples.is_empty() {
        return Err(Error::Empty("split"));
    }
    let logits = forward(net, &samples.x)?;
    if logits.len() != samples.len() * net.num_classes {
        return Err(Error::ShapeMismatch("samples vs network input".into()));
    }
    logits_to_eval(&logits, &samples.y, net.num_classes)
}

/// Mean cross-entropy and top-1 error of `net` on one split of `dataset`.
pub fn evaluate(net: &Network, dataset: &Dataset, split: Split) -> Result<EvalResult> {
    if dataset.shape.numel() != net.input_numel() {
        return Err(Error::ShapeMismatch(format!(
            "dataset has {} features, network expects {}",
            dataset.shape.numel(),
            net.input_numel()
        )));
    }
    evaluate_samples(net, dataset.split(split))
}
