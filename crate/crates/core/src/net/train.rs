//! Mini-batch SGD with momentum on a float64 working copy of a network.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::eval::{cross_entropy, im2row};
use super::gemm::{gemm, View};
use super::{Activation, ArchKind, LayerKind, Network};
use crate::data::Dataset;
use crate::seed;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LrSchedule {
    Fixed,
    /// Cosine anneal from `lr` at epoch 0 to zero at `max_epochs`.
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub momentum: f64,
    /// Stop once the epoch-mean training cross-entropy is at or below this.
    /// `+inf` disables early stopping.
    #[serde(with = "crate::serde_f64")]
    pub stop_loss: f64,
    /// Drives minibatch shuffling.
    pub seed: u64,
}

impl TrainConfig {
    /// MLP row of the training table: fixed LR (0.01 on MNIST-like data,
    /// 0.001 otherwise), batch 64, up to 3000 epochs.
    pub fn mlp(mnist_like: bool) -> Self {
        TrainConfig {
            lr: if mnist_like { 0.01 } else { 0.001 },
            lr_schedule: LrSchedule::Fixed,
            batch_size: 64,
            max_epochs: 3000,
            momentum: 0.9,
            stop_loss: 0.01,
            seed: 0,
        }
    }

    /// Shallow-CNN row: cosine LR from 0.02, batch 256, up to 1000 epochs.
    pub fn shallow_cnn() -> Self {
        TrainConfig {
            lr: 0.02,
            lr_schedule: LrSchedule::Cosine,
            batch_size: 256,
            max_epochs: 1000,
            momentum: 0.9,
            stop_loss: 0.01,
            seed: 0,
        }
    }

    pub fn for_arch(arch: ArchKind, mnist_like: bool) -> Self {
        match arch {
            ArchKind::Mlp => Self::mlp(mnist_like),
            ArchKind::ShallowCnn => Self::shallow_cnn(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.lr.is_finite()
            && self.batch_size > 0
            && self.max_epochs > 0
            && (0.0..1.0).contains(&self.momentum)
            && self.stop_loss > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid train config {self:?}")))
        }
    }

    /// Learning rate used throughout `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.lr_schedule {
            LrSchedule::Fixed => self.lr,
            LrSchedule::Cosine => {
                let t = epoch.min(self.max_epochs) as f64 / self.max_epochs as f64;
                self.lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs_run: usize,
    /// Epoch-mean training cross-entropy of the last epoch.
    pub final_loss: f64,
    pub loss_history: Vec<f64>,
    pub reached_stop_loss: bool,
}

#[derive(Clone, Debug)]
struct Params {
    weight: Vec<f64>,
    bias: Option<Vec<f64>>,
}

/// A network with `f64` parameters and an analytic backward pass.
///
/// This is the training path: dense layers run through a blocked `f64`
/// matrix multiply. Its results agree with [`super::forward`] to rounding,
/// but it does not share that pass's permutation-exact accumulation.
#[derive(Clone, Debug)]
pub struct FloatModel {
    template: Network,
    params: Vec<Params>,
}

struct Cache {
    /// Layer inputs: activations for dense layers, im2row patches for convs.
    inputs: Vec<Vec<f64>>,
    preacts: Vec<Vec<f64>>,
}

impl FloatModel {
    pub fn from_network(net: &Network) -> Self {
        let params = net
            .layers
            .iter()
            .map(|l| Params {
                weight: l.weight.iter().map(|&v| f64::from(v)).collect(),
                bias: l
                    .bias
                    .as_ref()
                    .map(|b| b.iter().map(|&v| f64::from(v)).collect()),
            })
            .collect();
        FloatModel {
            template: net.clone(),
            params,
        }
    }

    /// Round the working parameters back to `f32`.
    pub fn to_network(&self) -> Network {
        let mut net = self.template.clone();
        for (l, p) in net.layers.iter_mut().zip(&self.params) {
            l.weight = p.weight.iter().map(|&v| v as f32).collect();
            if let (Some(b), Some(pb)) = (&mut l.bias, &p.bias) {
                *b = pb.iter().map(|&v| v as f32).collect();
            }
        }
        net
    }

    pub fn param_count(&self) -> usize {
        self.params
            .iter()
            .map(|p| p.weight.len() + p.bias.as_ref().map_or(0, Vec::len))
            .sum()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for p in &self.params {
            out.extend_from_slice(&p.weight);
            if let Some(b) = &p.bias {
                out.extend_from_slice(b);
            }
        }
        out
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::ShapeMismatch("flat parameter length".into()));
        }
        let mut k = 0;
        for p in &mut self.params {
            let n = p.weight.len();
            p.weight.copy_from_slice(&flat[k..k + n]);
            k += n;
            if let Some(b) = &mut p.bias {
                let n = b.len();
                b.copy_from_slice(&flat[k..k + n]);
                k += n;
            }
        }
        Ok(())
    }

    fn n_examples(&self, x: &[f32]) -> usize {
        let d = self.template.input_numel();
        assert_eq!(x.len() % d, 0, "input is not a whole number of examples");
        x.len() / d
    }

    pub fn logits(&self, x: &[f32]) -> Vec<f64> {
        let n = self.n_examples(x);
        let mut cache = self.forward(x, n);
        cache.preacts.pop().unwrap_or_default()
    }

    /// Mean cross-entropy over the batch.
    pub fn loss(&self, x: &[f32], y: &[u32]) -> f64 {
        let logits = self.logits(x);
        let c = self.template.num_classes;
        logits
            .chunks_exact(c)
            .zip(y)
            .map(|(row, &t)| cross_entropy(row, t as usize))
            .sum::<f64>()
            / y.len() as f64
    }

    /// Smallest |pre-activation| over all ReLU units and examples.
    pub fn min_abs_preactivation(&self, x: &[f32]) -> f64 {
        let n = self.n_examples(x);
        let cache = self.forward(x, n);
        let hidden = self.template.hidden_count();
        cache.preacts[..hidden]
            .iter()
            .flatten()
            .fold(f64::INFINITY, |m, &z| m.min(z.abs()))
    }

    /// Mean cross-entropy and its gradient, flattened like [`Self::flat_params`].
    pub fn loss_and_grad(&self, x: &[f32], y: &[u32]) -> (f64, Vec<f64>) {
        let (loss, grads) = self.backprop(x, y);
        let mut flat = Vec::with_capacity(self.param_count());
        for g in grads {
            flat.extend(g.weight);
            if let Some(b) = g.bias {
                flat.extend(b);
            }
        }
        (loss, flat)
    }

    fn forward(&self, x: &[f32], n: usize) -> Cache {
        let layers = &self.template.layers;
        let mut inputs = Vec::with_capacity(layers.len());
        let mut preacts = Vec::with_capacity(layers.len());
        let mut act: Vec<f64> = x.iter().map(|&v| f64::from(v)).collect();
        for (layer, p) in layers.iter().zip(&self.params) {
            let z = match layer.kind {
                LayerKind::Dense => {
                    let (o, i) = (layer.out_dim, layer.in_dim);
                    let mut z = vec![0.0; n * o];
                    gemm(
                        n,
                        i,
                        o,
                        &act,
                        View::rows(i),
                        &p.weight,
                        View::transposed(i),
                        0.0,
                        &mut z,
                        View::rows(o),
                    );
                    if let Some(b) = &p.bias {
                        for row in z.chunks_exact_mut(o) {
                            for (v, bb) in row.iter_mut().zip(b) {
                                *v += bb;
                            }
                        }
                    }
                    inputs.push(std::mem::take(&mut act));
                    z
                }
                LayerKind::Conv2d {
                    kernel,
                    stride,
                    padding,
                } => {
                    let (h, w) = layer.in_spatial;
                    let (oh, ow) = layer.out_spatial();
                    let pc = oh * ow;
                    let kk = layer.fan_in();
                    let in_numel = layer.in_dim * h * w;
                    let out_numel = layer.out_dim * pc;
                    let mut cols = vec![0.0; n * pc * kk];
                    let mut z = vec![0.0; n * out_numel];
                    for e in 0..n {
                        let ce = &mut cols[e * pc * kk..(e + 1) * pc * kk];
                        im2row(
                            &act[e * in_numel..(e + 1) * in_numel],
                            layer.in_dim,
                            (h, w),
                            (oh, ow),
                            kernel,
                            stride,
                            padding,
                            ce,
                        );
                        let ze = &mut z[e * out_numel..(e + 1) * out_numel];
                        gemm(
                            layer.out_dim,
                            kk,
                            pc,
                            &p.weight,
                            View::rows(kk),
                            ce,
                            View::transposed(kk),
                            0.0,
                            ze,
                            View::rows(pc),
                        );
                        if let Some(b) = &p.bias {
                            for (o, bb) in b.iter().enumerate() {
                                ze[o * pc..(o + 1) * pc].iter_mut().for_each(|v| *v += bb);
                            }
                        }
                    }
                    inputs.push(cols);
                    z
                }
            };
            act = match layer.activation {
                Activation::Relu => z.iter().map(|&v| v.max(0.0)).collect(),
                Activation::None => z.clone(),
            };
            preacts.push(z);
        }
        Cache { inputs, preacts }
    }

    fn backprop(&self, x: &[f32], y: &[u32]) -> (f64, Vec<Params>) {
        let n = self.n_examples(x);
        assert_eq!(n, y.len(), "labels vs examples");
        let cache = self.forward(x, n);
        let layers = &self.template.layers;
        let classes = self.template.num_classes;
        let logits = cache.preacts.last().expect("at least one layer");

        let mut loss = 0.0;
        let mut dz = vec![0.0; n * classes];
        let inv_n = 1.0 / n as f64;
        for (e, (row, &t)) in logits.chunks_exact(classes).zip(y).enumerate() {
            let t = t as usize;
            loss += cross_entropy(row, t);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = row.iter().map(|&z| (z - m).exp()).sum();
            for (c, &z) in row.iter().enumerate() {
                let p = (z - m).exp() / s;
                dz[e * classes + c] = (p - if c == t { 1.0 } else { 0.0 }) * inv_n;
            }
        }
        loss *= inv_n;

        let mut grads: Vec<Params> = Vec::with_capacity(layers.len());
        for li in (0..layers.len()).rev() {
            let layer = &layers[li];
            let p = &self.params[li];
            let input = &cache.inputs[li];
            let mut g = Params {
                weight: vec![0.0; p.weight.len()],
                bias: p.bias.as_ref().map(|b| vec![0.0; b.len()]),
            };
            let need_dx = li > 0;
            let dx = match layer.kind {
                LayerKind::Dense => {
                    let (o, i) = (layer.out_dim, layer.in_dim);
                    gemm(
                        o,
                        n,
                        i,
                        &dz,
                        View::transposed(o),
                        input,
                        View::rows(i),
                        0.0,
                        &mut g.weight,
                        View::rows(i),
                    );
                    if let Some(gb) = &mut g.bias {
                        for row in dz.chunks_exact(o) {
                            for (a, v) in gb.iter_mut().zip(row) {
                                *a += v;
                            }
                        }
                    }
                    if need_dx {
                        let mut dx = vec![0.0; n * i];
                        gemm(
                            n,
                            o,
                            i,
                            &dz,
                            View::rows(o),
                            &p.weight,
                            View::rows(i),
                            0.0,
                            &mut dx,
                            View::rows(i),
                        );
                        dx
                    } else {
                        Vec::new()
                    }
                }
                LayerKind::Conv2d {
                    kernel,
                    stride,
                    padding,
                } => {
                    let (h, w) = layer.in_spatial;
                    let (oh, ow) = layer.out_spatial();
                    let pc = oh * ow;
                    let kk = layer.fan_in();
                    let in_numel = layer.in_dim * h * w;
                    let out_numel = layer.out_dim * pc;
                    let mut dx = if need_dx { vec![0.0; n * in_numel] } else { Vec::new() };
                    let mut dcols = vec![0.0; pc * kk];
                    for e in 0..n {
                        let dze = &dz[e * out_numel..(e + 1) * out_numel];
                        let ce = &input[e * pc * kk..(e + 1) * pc * kk];
                        gemm(
                            layer.out_dim,
                            pc,
                            kk,
                            dze,
                            View::rows(pc),
                            ce,
                            View::rows(kk),
                            1.0,
                            &mut g.weight,
                            View::rows(kk),
                        );
                        if let Some(gb) = &mut g.bias {
                            for (o, a) in gb.iter_mut().enumerate() {
                                *a += dze[o * pc..(o + 1) * pc].iter().sum::<f64>();
                            }
                        }
                        if need_dx {
                            gemm(
                                pc,
                                layer.out_dim,
                                kk,
                                dze,
                                View::transposed(pc),
                                &p.weight,
                                View::rows(kk),
                                0.0,
                                &mut dcols,
                                View::rows(kk),
                            );
                            row2im(
                                &dcols,
                                layer.in_dim,
                                (h, w),
                                (oh, ow),
                                kernel,
                                stride,
                                padding,
                                &mut dx[e * in_numel..(e + 1) * in_numel],
                            );
                        }
                    }
                    dx
                }
            };
            grads.push(g);
            if need_dx {
                let prev = &layers[li - 1];
                let pre = &cache.preacts[li - 1];
                dz = dx;
                if prev.activation == Activation::Relu {
                    for (d, &z) in dz.iter_mut().zip(pre) {
                        if z <= 0.0 {
                            *d = 0.0;
                        }
                    }
                }
            }
        }
        grads.reverse();
        (loss, grads)
    }

    fn sgd_step(&mut self, grads: &[Params], velocity: &mut [Params], lr: f64, momentum: f64) {
        for ((p, g), v) in self.params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
            for ((w, gw), vw) in p.weight.iter_mut().zip(&g.weight).zip(v.weight.iter_mut()) {
                *vw = momentum * *vw + gw;
                *w -= lr * *vw;
            }
            if let (Some(b), Some(gb), Some(vb)) = (&mut p.bias, &g.bias, &mut v.bias) {
                for ((w, gw), vw) in b.iter_mut().zip(gb).zip(vb.iter_mut()) {
                    *vw = momentum * *vw + gw;
                    *w -= lr * *vw;
                }
            }
        }
    }
}

/// Accumulate patch-row gradients back onto the input map (inverse of im2row).
#[allow(clippy::too_many_arguments)]
fn row2im(
    rows: &[f64],
    channels: usize,
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
    out: &mut [f64],
) {
    let kk = channels * k * k;
    for oy in 0..oh {
        for ox in 0..ow {
            let row = &rows[(oy * ow + ox) * kk..(oy * ow + ox + 1) * kk];
            let mut idx = 0;
            for c in 0..channels {
                for ky in 0..k {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    for kx in 0..k {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                            out[c * h * w + iy as usize * w + ix as usize] += row[idx];
                        }
                        idx += 1;
                    }
                }
            }
        }
    }
}

/// Train with minibatch SGD and momentum on the training split.
///
/// Stops when the epoch-mean training cross-entropy reaches
/// `cfg.stop_loss`, or after `cfg.max_epochs`. Given the network, dataset
/// and config, the result is bit-reproducible.
pub fn train(net: &Network, dataset: &Dataset, cfg: &TrainConfig) -> Result<(Network, TrainReport)> {
    cfg.validate()?;
    net.validate()?;
    let samples = &dataset.train;
    if samples.is_empty() {
        return Err(Error::Empty("training split"));
    }
    let d = net.input_numel();
    if dataset.shape.numel() != d {
        return Err(Error::ShapeMismatch(format!(
            "dataset has {} features, network expects {d}",
            dataset.shape.numel()
        )));
    }
    let n = samples.len();
    let mut model = FloatModel::from_network(net);
    let mut velocity: Vec<Params> = model
        .params
        .iter()
        .map(|p| Params {
            weight: vec![0.0; p.weight.len()],
            bias: p.bias.as_ref().map(|b| vec![0.0; b.len()]),
        })
        .collect();
    let mut rng = seed::rng(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = Vec::new();
    let mut reached = false;
    let mut bx = Vec::with_capacity(cfg.batch_size * d);
    let mut by = Vec::with_capacity(cfg.batch_size);

    for epoch in 0..cfg.max_epochs {
        let lr = cfg.lr_at(epoch);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            bx.clear();
            by.clear();
            for &i in batch {
                bx.extend_from_slice(samples.example(i));
                by.push(samples.y[i]);
            }
            let (loss, grads) = model.backprop(&bx, &by);
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, loss });
            }
            total += loss * batch.len() as f64;
            model.sgd_step(&grads, &mut velocity, lr, cfg.momentum);
        }
        let epoch_loss = total / n as f64;
        history.push(epoch_loss);
        if !epoch_loss.is_finite() || model.flat_params().iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged {
                epoch,
                loss: epoch_loss,
            });
        }
        if cfg.stop_loss.is_finite() && epoch_loss <= cfg.stop_loss {
            reached = true;
            break;
        }
    }
    let trained = model.to_network();
    if trained.validate().is_err() {
        return Err(Error::Diverged {
            epoch: history.len(),
            loss: f64::NAN,
        });
    }
    Ok((
        trained,
        TrainReport {
            epochs_run: history.len(),
            final_loss: *history.last().unwrap_or(&f64::NAN),
            loss_history: history,
            reached_stop_loss: reached,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_blobs;
    use crate::net::{build_mlp, build_shallow_cnn, Shape3};

    #[test]
    fn cosine_schedule_endpoints_and_monotone() {
        let mut cfg = TrainConfig::shallow_cnn();
        cfg.max_epochs = 50;
        assert_eq!(cfg.lr_at(0), cfg.lr);
        assert!(cfg.lr_at(50).abs() < 1e-12);
        for e in 0..50 {
            assert!(cfg.lr_at(e + 1) <= cfg.lr_at(e));
        }
    }

    #[test]
    fn infinite_stop_loss_runs_all_epochs() {
        let ds = synth_blobs(64, 2, 2, 3.0, 1).unwrap();
        let net = build_mlp(1, 4, 2, 2, 1).unwrap();
        let mut cfg = TrainConfig::mlp(true);
        cfg.max_epochs = 7;
        cfg.stop_loss = f64::INFINITY;
        let (_, report) = train(&net, &ds, &cfg).unwrap();
        assert_eq!(report.epochs_run, 7);
        assert!(!report.reached_stop_loss);

        cfg.stop_loss = 10.0;
        let (_, report) = train(&net, &ds, &cfg).unwrap();
        assert_eq!(report.epochs_run, 1);
        assert!(report.reached_stop_loss);
    }

    #[test]
    fn training_is_deterministic() {
        let ds = synth_blobs(128, 3, 3, 2.0, 4).unwrap();
        let net = build_mlp(2, 8, 3, 3, 2).unwrap();
        let mut cfg = TrainConfig::mlp(true);
        cfg.max_epochs = 5;
        cfg.seed = 9;
        let (a, ra) = train(&net, &ds, &cfg).unwrap();
        let (b, rb) = train(&net, &ds, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra, rb);
        cfg.seed = 10;
        let (c, _) = train(&net, &ds, &cfg).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn conv_gradient_matches_finite_differences() {
        let net = build_shallow_cnn(2, 2, Shape3::new(1, 4, 4), 2, 3).unwrap();
        let mut model = FloatModel::from_network(&net);
        let x: Vec<f32> = (0..32).map(|i| ((i * 7 % 13) as f32) / 6.0 - 1.0).collect();
        let y = [0u32, 1];
        let (_, g) = model.loss_and_grad(&x, &y);
        let base = model.flat_params();
        let h = 1e-5;
        for k in 0..base.len() {
            let mut p = base.clone();
            p[k] += h;
            model.set_flat_params(&p).unwrap();
            let up = model.loss(&x, &y);
            p[k] -= 2.0 * h;
            model.set_flat_params(&p).unwrap();
            let down = model.loss(&x, &y);
            let fd = (up - down) / (2.0 * h);
            assert!((fd - g[k]).abs() < 1e-6, "param {k}: fd {fd} vs {}", g[k]);
        }
    }
}
