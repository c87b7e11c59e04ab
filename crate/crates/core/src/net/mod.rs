//! Network architectures, the exact forward pass, training and
//! parameter-space arithmetic.
//!
//! Parameters are stored as `f32`; every accumulation happens in 64-bit
//! arithmetic. Weights are row-major `out x in` for dense layers and
//! `out_ch x in_ch x k x k` for convolutions. Inputs are flattened `CHW`.

mod eval;
mod gemm;
mod train;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::seed;
use crate::{Error, Result};

pub use eval::{
    cross_entropy, evaluate, evaluate_samples, forward, hidden_activations, logits_to_eval, top1,
    EvalResult,
};
pub use train::{train, FloatModel, LrSchedule, TrainConfig, TrainReport};
pub(crate) use eval::mean_sq_activations;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArchKind {
    Mlp,
    ShallowCnn,
}

impl std::fmt::Display for ArchKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ArchKind::Mlp => "mlp",
            ArchKind::ShallowCnn => "shallow-cnn",
        })
    }
}

/// Image-style input shape. Flat feature vectors use `(d, 1, 1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape3 {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape3 {
    pub const fn new(channels: usize, height: usize, width: usize) -> Self {
        Shape3 {
            channels,
            height,
            width,
        }
    }

    pub const fn flat(dim: usize) -> Self {
        Shape3::new(dim, 1, 1)
    }

    pub const fn numel(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub const fn spatial(&self) -> usize {
        self.height * self.width
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LayerKind {
    Dense,
    Conv2d {
        kernel: usize,
        stride: usize,
        padding: usize,
    },
}

/// One affine layer followed by an optional activation.
///
/// For dense layers `out_dim x in_dim` is the weight matrix shape and
/// `in_spatial` is `(1, 1)`. For convolutions `in_dim` is the number of input
/// channels and `in_spatial` the input feature-map size.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub kind: LayerKind,
    pub out_dim: usize,
    pub in_dim: usize,
    pub in_spatial: (usize, usize),
    pub weight: Vec<f32>,
    pub bias: Option<Vec<f32>>,
    pub activation: Activation,
}

impl Layer {
    /// Number of weights feeding one output unit (or one output channel).
    pub fn fan_in(&self) -> usize {
        match self.kind {
            LayerKind::Dense => self.in_dim,
            LayerKind::Conv2d { kernel, .. } => self.in_dim * kernel * kernel,
        }
    }

    pub fn out_spatial(&self) -> (usize, usize) {
        match self.kind {
            LayerKind::Dense => (1, 1),
            LayerKind::Conv2d {
                kernel,
                stride,
                padding,
            } => {
                let (h, w) = self.in_spatial;
                (
                    conv_out(h, kernel, stride, padding),
                    conv_out(w, kernel, stride, padding),
                )
            }
        }
    }

    /// Number of activations this layer produces per example.
    pub fn out_numel(&self) -> usize {
        let (h, w) = self.out_spatial();
        self.out_dim * h * w
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        match self.kind {
            LayerKind::Dense => vec![self.out_dim, self.in_dim],
            LayerKind::Conv2d { kernel, .. } => vec![self.out_dim, self.in_dim, kernel, kernel],
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.as_ref().map_or(0, Vec::len)
    }

    fn same_structure(&self, other: &Layer) -> bool {
        self.kind == other.kind
            && self.out_dim == other.out_dim
            && self.in_dim == other.in_dim
            && self.in_spatial == other.in_spatial
            && self.activation == other.activation
            && self.bias.is_some() == other.bias.is_some()
    }
}

fn conv_out(size: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    let padded = size + 2 * padding;
    if padded < kernel || stride == 0 {
        0
    } else {
        (padded - kernel) / stride + 1
    }
}

/// A feed-forward network: hidden layers with ReLU followed by a linear head.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub arch: ArchKind,
    pub in_shape: Shape3,
    pub num_classes: usize,
    pub init_seed: u64,
    pub layers: Vec<Layer>,
}

impl Network {
    pub fn hidden_count(&self) -> usize {
        self.layers.len().saturating_sub(1)
    }

    /// Units (dense) or channels (conv) of every hidden layer.
    pub fn hidden_widths(&self) -> Vec<usize> {
        self.layers[..self.hidden_count()]
            .iter()
            .map(|l| l.out_dim)
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    pub fn input_numel(&self) -> usize {
        self.in_shape.numel()
    }

    /// Check the structural invariants: compatible consecutive layers,
    /// linear head, consistent buffer sizes and finite parameters.
    pub fn validate(&self) -> Result<()> {
        let Some(last) = self.layers.last() else {
            return Err(Error::InvalidArgument("network has no layers".into()));
        };
        if last.activation != Activation::None {
            return Err(Error::InvalidArgument(
                "final layer must produce logits (no activation)".into(),
            ));
        }
        if last.kind != LayerKind::Dense || last.out_dim != self.num_classes {
            return Err(Error::InvalidArgument(
                "final layer must be dense with one output per class".into(),
            ));
        }
        let mut channels = self.in_shape.channels;
        let mut spatial = (self.in_shape.height, self.in_shape.width);
        for (i, layer) in self.layers.iter().enumerate() {
            let expected_in = match layer.kind {
                LayerKind::Dense => channels * spatial.0 * spatial.1,
                LayerKind::Conv2d { .. } => channels,
            };
            if layer.in_dim != expected_in {
                return Err(Error::ShapeMismatch(format!(
                    "layer {i} expects {} inputs, previous layer produces {expected_in}",
                    layer.in_dim
                )));
            }
            if let LayerKind::Conv2d { .. } = layer.kind {
                if layer.in_spatial != spatial {
                    return Err(Error::ShapeMismatch(format!(
                        "layer {i} input spatial {:?} != {:?}",
                        layer.in_spatial, spatial
                    )));
                }
            }
            let out_sp = layer.out_spatial();
            if out_sp.0 == 0 || out_sp.1 == 0 {
                return Err(Error::ShapeMismatch(format!(
                    "layer {i} has empty spatial output"
                )));
            }
            if layer.weight.len() != layer.weight_shape().iter().product::<usize>() {
                return Err(Error::ShapeMismatch(format!("layer {i} weight buffer size")));
            }
            if let Some(b) = &layer.bias {
                if b.len() != layer.out_dim {
                    return Err(Error::ShapeMismatch(format!("layer {i} bias size")));
                }
            }
            let finite = layer.weight.iter().all(|v| v.is_finite())
                && layer
                    .bias
                    .as_ref()
                    .is_none_or(|b| b.iter().all(|v| v.is_finite()));
            if !finite {
                return Err(Error::InvalidArgument(format!(
                    "layer {i} has non-finite parameters"
                )));
            }
            channels = layer.out_dim;
            spatial = out_sp;
        }
        Ok(())
    }

    /// Same architecture: identical layer structure, input shape and classes.
    pub fn same_arch(&self, other: &Network) -> bool {
        self.arch == other.arch
            && self.in_shape == other.in_shape
            && self.num_classes == other.num_classes
            && self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.same_structure(b))
    }

    pub fn ensure_same_arch(&self, other: &Network) -> Result<()> {
        if self.same_arch(other) {
            Ok(())
        } else {
            Err(Error::ArchMismatch(format!(
                "{} {:?} vs {} {:?}",
                self.arch,
                self.hidden_widths(),
                other.arch,
                other.hidden_widths()
            )))
        }
    }

    /// All parameters in layer order (weights then bias), widened to `f64`.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend(l.weight.iter().map(|&v| f64::from(v)));
            if let Some(b) = &l.bias {
                out.extend(b.iter().map(|&v| f64::from(v)));
            }
        }
        out
    }

    fn zip_params_mut(&mut self, mut f: impl FnMut(usize, &mut f32)) {
        let mut k = 0;
        for l in &mut self.layers {
            for v in l.weight.iter_mut() {
                f(k, v);
                k += 1;
            }
            if let Some(b) = &mut l.bias {
                for v in b.iter_mut() {
                    f(k, v);
                    k += 1;
                }
            }
        }
    }
}

/// Options shared by the architecture builders.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BuildOptions {
    /// Zero-initialised biases on every layer. Off reproduces the bias-free
    /// network `v^T relu(U x)`.
    pub bias: bool,
}

impl Default for BuildOptions {
    fn default() -> Self {
        BuildOptions { bias: true }
    }
}

/// MLP with `depth` hidden ReLU layers of `width` units.
pub fn build_mlp(
    depth: usize,
    width: usize,
    in_dim: usize,
    classes: usize,
    seed: u64,
) -> Result<Network> {
    build_mlp_with(
        depth,
        width,
        Shape3::flat(in_dim),
        classes,
        seed,
        BuildOptions::default(),
    )
}

pub fn build_mlp_with(
    depth: usize,
    width: usize,
    in_shape: Shape3,
    classes: usize,
    seed: u64,
    opts: BuildOptions,
) -> Result<Network> {
    if depth == 0 || width == 0 || in_shape.numel() == 0 || classes == 0 {
        return Err(Error::InvalidArgument(format!(
            "mlp dimensions must be positive (depth {depth}, width {width}, in {}, classes {classes})",
            in_shape.numel()
        )));
    }
    let mut layers = Vec::with_capacity(depth + 1);
    let mut fan = in_shape.numel();
    for _ in 0..depth {
        layers.push(dense_layer(width, fan, Activation::Relu, opts.bias));
        fan = width;
    }
    layers.push(dense_layer(classes, fan, Activation::None, opts.bias));
    let mut net = Network {
        arch: ArchKind::Mlp,
        in_shape,
        num_classes: classes,
        init_seed: seed,
        layers,
    };
    init_uniform(&mut net, seed);
    net.validate()?;
    Ok(net)
}

/// Shallow CNN: `depth` 3x3 stride-1 same-padded conv+ReLU layers with
/// `channels` channels each, no pooling, flattened into a dense head.
pub fn build_shallow_cnn(
    depth: usize,
    channels: usize,
    in_shape: Shape3,
    classes: usize,
    seed: u64,
) -> Result<Network> {
    build_shallow_cnn_with(
        depth,
        channels,
        in_shape,
        classes,
        seed,
        BuildOptions::default(),
    )
}

pub fn build_shallow_cnn_with(
    depth: usize,
    channels: usize,
    in_shape: Shape3,
    classes: usize,
    seed: u64,
    opts: BuildOptions,
) -> Result<Network> {
    if depth == 0 || channels == 0 || classes == 0 || in_shape.channels == 0 {
        return Err(Error::InvalidArgument(
            "cnn dimensions must be positive".into(),
        ));
    }
    if in_shape.height == 0 || in_shape.width == 0 {
        return Err(Error::InvalidArgument(
            "cnn input spatial size must be positive".into(),
        ));
    }
    let kind = LayerKind::Conv2d {
        kernel: 3,
        stride: 1,
        padding: 1,
    };
    let mut layers = Vec::with_capacity(depth + 1);
    let mut in_ch = in_shape.channels;
    let spatial = (in_shape.height, in_shape.width);
    for _ in 0..depth {
        let mut layer = dense_layer(channels, in_ch, Activation::Relu, opts.bias);
        layer.kind = kind;
        layer.in_spatial = spatial;
        layer.weight = vec![0.0; channels * in_ch * 9];
        layers.push(layer);
        in_ch = channels;
    }
    layers.push(dense_layer(
        classes,
        channels * spatial.0 * spatial.1,
        Activation::None,
        opts.bias,
    ));
    let mut net = Network {
        arch: ArchKind::ShallowCnn,
        in_shape,
        num_classes: classes,
        init_seed: seed,
        layers,
    };
    init_uniform(&mut net, seed);
    net.validate()?;
    Ok(net)
}

fn dense_layer(out: usize, inp: usize, activation: Activation, bias: bool) -> Layer {
    Layer {
        kind: LayerKind::Dense,
        out_dim: out,
        in_dim: inp,
        in_spatial: (1, 1),
        weight: vec![0.0; out * inp],
        bias: bias.then(|| vec![0.0; out]),
        activation,
    }
}

/// Weights i.i.d. uniform on `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, biases zero.
fn init_uniform(net: &mut Network, seed: u64) {
    let mut rng = seed::rng(seed);
    for layer in &mut net.layers {
        let bound = 1.0 / (layer.fan_in() as f64).sqrt();
        let mut bound32 = bound as f32;
        if f64::from(bound32) > bound {
            bound32 = f32::from_bits(bound32.to_bits() - 1);
        }
        let b = f64::from(bound32);
        for w in &mut layer.weight {
            let u: f64 = rng.random();
            *w = ((2.0 * u - 1.0) * b) as f32;
        }
    }
}

/// `alpha * net1 + (1 - alpha) * net2`, parameterwise. `alpha = 1` returns
/// `net1` exactly and `alpha = 0` returns `net2` exactly.
pub fn interpolate(net1: &Network, net2: &Network, alpha: f64) -> Result<Network> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!(
            "alpha {alpha} outside [0, 1]"
        )));
    }
    combine2(net1, alpha, net2, 1.0 - alpha)
}

/// `w1 * net1 + w2 * net2` with explicit weights. Used by profiles so that a
/// grid and its mirror image produce bit-identical interpolates.
pub(crate) fn combine2(net1: &Network, w1: f64, net2: &Network, w2: f64) -> Result<Network> {
    net1.ensure_same_arch(net2)?;
    let other = net2.flat_params();
    let mut out = net1.clone();
    out.zip_params_mut(|k, v| {
        *v = (w1 * f64::from(*v) + w2 * other[k]) as f32;
    });
    Ok(out)
}

/// Uniform parameter mean. `average(&[a, b])` equals `interpolate(a, b, 0.5)`.
pub fn average(nets: &[Network]) -> Result<Network> {
    let first = nets.first().ok_or(Error::Empty("network list"))?;
    for n in &nets[1..] {
        first.ensure_same_arch(n)?;
    }
    if nets.len() == 1 {
        return Ok(first.clone());
    }
    if nets.len() == 2 {
        return combine2(&nets[0], 0.5, &nets[1], 0.5);
    }
    let mut sum = first.flat_params();
    for n in &nets[1..] {
        for (s, v) in sum.iter_mut().zip(n.flat_params()) {
            *s += v;
        }
    }
    let k = nets.len() as f64;
    let mut out = first.clone();
    out.zip_params_mut(|i, v| *v = (sum[i] / k) as f32);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mlp_shapes() {
        let net = build_mlp(1, 4, 2, 2, 3).unwrap();
        let shapes: Vec<_> = net.layers.iter().map(Layer::weight_shape).collect();
        assert_eq!(shapes, vec![vec![4, 2], vec![2, 4]]);
        assert_eq!(net.layers[1].activation, Activation::None);
        assert_eq!(net.layers[0].activation, Activation::Relu);
    }

    #[test]
    fn mlp_init_within_bound() {
        let net = build_mlp(1, 1024, 10, 1, 11).unwrap();
        let b = 1.0 / 10f64.sqrt();
        assert!(net.layers[0]
            .weight
            .iter()
            .all(|&w| f64::from(w).abs() <= b));
        let hb = 1.0 / 1024f64.sqrt();
        assert!(net.layers[1]
            .weight
            .iter()
            .all(|&w| f64::from(w).abs() <= hb));
    }

    #[test]
    fn builders_are_deterministic() {
        assert_eq!(build_mlp(2, 8, 3, 2, 5).unwrap(), build_mlp(2, 8, 3, 2, 5).unwrap());
        assert_ne!(build_mlp(2, 8, 3, 2, 5).unwrap(), build_mlp(2, 8, 3, 2, 6).unwrap());
        let s = Shape3::new(1, 8, 8);
        assert_eq!(
            build_shallow_cnn(2, 4, s, 3, 1).unwrap(),
            build_shallow_cnn(2, 4, s, 3, 1).unwrap()
        );
    }

    #[test]
    fn rejects_zero_dims() {
        assert!(build_mlp(0, 4, 2, 2, 0).is_err());
        assert!(build_mlp(1, 0, 2, 2, 0).is_err());
        assert!(build_mlp(1, 4, 0, 2, 0).is_err());
        assert!(build_shallow_cnn(1, 4, Shape3::new(1, 0, 8), 2, 0).is_err());
    }

    #[test]
    fn shallow_cnn_shapes() {
        let net = build_shallow_cnn(2, 16, Shape3::new(1, 8, 8), 10, 9).unwrap();
        let shapes: Vec<_> = net.layers.iter().map(Layer::weight_shape).collect();
        assert_eq!(
            shapes,
            vec![vec![16, 1, 3, 3], vec![16, 16, 3, 3], vec![10, 1024]]
        );
        let one = build_shallow_cnn(1, 16, Shape3::new(1, 8, 8), 10, 9).unwrap();
        assert_eq!(one.layers.len(), 2);
        assert!(matches!(one.layers[0].kind, LayerKind::Conv2d { .. }));
    }

    #[test]
    fn interpolation_endpoints_and_arithmetic() {
        let a = build_mlp(2, 6, 3, 4, 1).unwrap();
        let b = build_mlp(2, 6, 3, 4, 2).unwrap();
        assert_eq!(interpolate(&a, &b, 1.0).unwrap(), a);
        assert_eq!(interpolate(&a, &b, 0.0).unwrap().layers, b.layers);
        assert_eq!(interpolate(&a, &a, 0.37).unwrap(), a);

        let mut x = build_mlp(1, 1, 1, 1, 0).unwrap();
        let mut y = x.clone();
        x.layers[0].weight[0] = 2.0;
        y.layers[0].weight[0] = 4.0;
        assert_eq!(interpolate(&x, &y, 0.5).unwrap().layers[0].weight[0], 3.0);
    }

    #[test]
    fn interpolation_is_parameterwise_linear() {
        let a = build_mlp(1, 5, 3, 2, 1).unwrap();
        let b = build_mlp(1, 5, 3, 2, 2).unwrap();
        let (pa, pb) = (a.flat_params(), b.flat_params());
        for k in 0..=10 {
            let alpha = k as f64 / 10.0;
            let m = interpolate(&a, &b, alpha).unwrap().flat_params();
            for i in 0..m.len() {
                let expect = alpha * pa[i] + (1.0 - alpha) * pb[i];
                assert!((m[i] - expect).abs() <= 1e-7 * (1.0 + expect.abs()));
            }
        }
    }

    #[test]
    fn average_contracts() {
        let a = build_mlp(1, 5, 3, 2, 1).unwrap();
        let b = build_mlp(1, 5, 3, 2, 2).unwrap();
        assert_eq!(average(std::slice::from_ref(&a)).unwrap(), a);
        assert_eq!(
            average(&[a.clone(), b.clone()]).unwrap(),
            interpolate(&a, &b, 0.5).unwrap()
        );
        assert_eq!(average(&[a.clone(), a.clone(), a.clone()]).unwrap(), a);
        assert!(average(&[]).is_err());
        let c = build_mlp(1, 6, 3, 2, 2).unwrap();
        assert!(matches!(average(&[a, c]), Err(Error::ArchMismatch(_))));
    }
}
