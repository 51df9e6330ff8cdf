//! Layer graphs with fake-quantized, variation-injected weight layers, and the
//! model zoo.
//!
//! Every weight layer computes `w -> quantize -> dequantize -> perturb -> MVM`,
//! optionally followed by the self-tuning correction, then the digital bias
//! add. Activations are fake-quantized at the output of layers that request
//! it. The same [`forward`] serves training and deployment.
//!
//! LeNet-5 follows the classic layout: conv 6@5x5 (pad 2), ReLU, max-pool 2,
//! conv 16@5x5, ReLU, max-pool 2, then fully connected 400-120-84-10 with
//! ReLUs. The network input and the logits are not quantized.

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::kernels::ConvGeom;
use crate::quantization::{activation_quant, weight_path, QuantConfig, SteOptions, WeightNoise};
use crate::selftuning::{self, MvmGeom, StState, StType};
use crate::tensor::{Real, Tensor};
use crate::variability::{CellGroup, ChipInstance};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LayerKind {
    Conv2d { in_ch: usize, out_ch: usize, kernel: usize, stride: usize, pad: usize },
    Linear { d_in: usize, d_out: usize },
    Relu,
    Maxpool { k: usize },
    Avgpool { k: usize },
    Flatten,
}

impl LayerKind {
    pub fn has_weights(&self) -> bool {
        matches!(self, LayerKind::Conv2d { .. } | LayerKind::Linear { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    #[serde(flatten)]
    pub kind: LayerKind,
    /// Weight bitwidth; only on weight-bearing layers.
    pub weight_bits: Option<u32>,
    /// Bitwidth of this layer's output activations.
    pub act_bits: Option<u32>,
    pub trainable: bool,
}

impl LayerSpec {
    fn plain(kind: LayerKind) -> Self {
        Self { kind, weight_bits: None, act_bits: None, trainable: kind.has_weights() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub name: String,
    /// `[channels, height, width]`.
    pub input_shape: [usize; 3],
    pub classes: usize,
    pub layers: Vec<LayerSpec>,
}

/// Static shape information for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerShape {
    /// Output shape without the batch axis.
    pub out: Vec<usize>,
    /// `(fan_in, outputs, positions)` for weight layers.
    pub mvm: Option<(usize, usize, usize)>,
}

impl NetworkSpec {
    /// `AxWy` from the first activation and weight bitwidths; `FP` marks a
    /// missing side.
    pub fn label(&self) -> String {
        let a = self.layers.iter().find_map(|l| l.act_bits);
        let w = self.layers.iter().find_map(|l| l.weight_bits);
        let f = |b: Option<u32>| b.map_or("FP".to_string(), |b| b.to_string());
        format!("A{}W{}", f(a), f(w))
    }

    /// Same topology with every weight layer at `w` bits and every quantized
    /// activation at `a` bits.
    pub fn with_bits(mut self, a: Option<u32>, w: Option<u32>) -> Self {
        for l in &mut self.layers {
            if l.kind.has_weights() {
                l.weight_bits = w;
            }
            if l.act_bits.is_some() || (a.is_some() && l.kind == LayerKind::Relu) {
                l.act_bits = a;
            }
        }
        self
    }

    pub fn weight_layers(&self) -> Vec<usize> {
        self.layers.iter().enumerate().filter(|(_, l)| l.kind.has_weights()).map(|(i, _)| i).collect()
    }

    pub fn layer_shapes(&self) -> Result<Vec<LayerShape>> {
        let mut s = self.input_shape.to_vec();
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            let bad = |s: &[usize]| Error::Config(format!("layer {i} ({:?}) cannot take input shape {s:?}", l.kind));
            let mut mvm = None;
            s = match l.kind {
                LayerKind::Conv2d { in_ch, out_ch, kernel, stride, pad } => {
                    if s.len() != 3 || s[0] != in_ch {
                        return Err(bad(&s));
                    }
                    let g = ConvGeom { in_ch, out_ch, kernel, stride, pad };
                    let (oh, ow) = g.out_hw(s[1], s[2]).ok_or_else(|| bad(&s))?;
                    mvm = Some((g.patch_len(), out_ch, oh * ow));
                    vec![out_ch, oh, ow]
                }
                LayerKind::Linear { d_in, d_out } => {
                    if s != [d_in] {
                        return Err(bad(&s));
                    }
                    mvm = Some((d_in, d_out, 1));
                    vec![d_out]
                }
                LayerKind::Relu => s,
                LayerKind::Maxpool { k } | LayerKind::Avgpool { k } => {
                    if s.len() != 3 || k == 0 || s[1] < k || s[2] < k {
                        return Err(bad(&s));
                    }
                    vec![s[0], s[1] / k, s[2] / k]
                }
                LayerKind::Flatten => vec![s.iter().product()],
            };
            out.push(LayerShape { out: s.clone(), mvm });
        }
        Ok(out)
    }

    /// Shapes chain end to end, the output is `[classes]`, and bitwidths sit
    /// only where they are meaningful.
    pub fn validate(&self) -> Result<()> {
        let shapes = self.layer_shapes()?;
        if shapes.last().map(|s| s.out.as_slice()) != Some(&[self.classes][..]) {
            return Err(Error::Config(format!("network output is not [{}]", self.classes)));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.weight_bits.is_some() && !l.kind.has_weights() {
                return Err(Error::Config(format!("layer {i} has weight_bits but no weights")));
            }
            for b in [l.weight_bits, l.act_bits].into_iter().flatten() {
                if b < 2 {
                    return Err(Error::Config(format!("layer {i}: bitwidth {b} < 2")));
                }
            }
        }
        Ok(())
    }
}

fn conv(in_ch: usize, out_ch: usize, kernel: usize, pad: usize) -> LayerSpec {
    LayerSpec::plain(LayerKind::Conv2d { in_ch, out_ch, kernel, stride: 1, pad })
}

fn linear(d_in: usize, d_out: usize) -> LayerSpec {
    LayerSpec::plain(LayerKind::Linear { d_in, d_out })
}

fn relu() -> LayerSpec {
    LayerSpec::plain(LayerKind::Relu)
}

fn pool() -> LayerSpec {
    LayerSpec::plain(LayerKind::Maxpool { k: 2 })
}

fn flatten() -> LayerSpec {
    LayerSpec::plain(LayerKind::Flatten)
}

/// LeNet-5 for 1x28x28 inputs, A2W2.
pub fn build_lenet5() -> NetworkSpec {
    NetworkSpec {
        name: "lenet5".into(),
        input_shape: [1, 28, 28],
        classes: 10,
        layers: vec![
            conv(1, 6, 5, 2),
            relu(),
            pool(),
            conv(6, 16, 5, 0),
            relu(),
            pool(),
            flatten(),
            linear(400, 120),
            relu(),
            linear(120, 84),
            relu(),
            linear(84, 10),
        ],
    }
    .with_bits(Some(2), Some(2))
}

/// Four 3x3 conv layers and two linear layers for 3x32x32 inputs, A4W4.
pub fn build_smallconvnet() -> NetworkSpec {
    NetworkSpec {
        name: "smallconvnet".into(),
        input_shape: [3, 32, 32],
        classes: 10,
        layers: vec![
            conv(3, 32, 3, 1),
            relu(),
            conv(32, 32, 3, 1),
            relu(),
            pool(),
            conv(32, 64, 3, 1),
            relu(),
            conv(64, 64, 3, 1),
            relu(),
            pool(),
            flatten(),
            linear(64 * 8 * 8, 128),
            relu(),
            linear(128, 10),
        ],
    }
    .with_bits(Some(4), Some(4))
}

/// Small net for the 8x8 two-class synthetic images, A4W4.
pub fn build_synthetic() -> NetworkSpec {
    NetworkSpec {
        name: "synthetic".into(),
        input_shape: [1, 8, 8],
        classes: 2,
        layers: vec![conv(1, 4, 3, 1), relu(), pool(), flatten(), linear(64, 16), relu(), linear(16, 2)],
    }
    .with_bits(Some(4), Some(4))
}

pub fn build(name: &str) -> Result<NetworkSpec> {
    match name {
        "lenet5" => Ok(build_lenet5()),
        "smallconvnet" => Ok(build_smallconvnet()),
        "synthetic" => Ok(build_synthetic()),
        other => Err(Error::Config(format!("unknown model {other:?}; expected lenet5, smallconvnet or synthetic"))),
    }
}

/// Weights and biases of the weight layers, in layer order.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<T> {
    pub weight: Vec<Tensor<T>>,
    pub bias: Vec<Tensor<T>>,
}

impl<T: Real> Params<T> {
    /// He-uniform weights (bound `sqrt(6 / fan_in)`), zero biases.
    pub fn init(net: &NetworkSpec, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weight = Vec::new();
        let mut bias = Vec::new();
        for l in &net.layers {
            let (shape, fan_in, out) = match l.kind {
                LayerKind::Conv2d { in_ch, out_ch, kernel, .. } => {
                    (vec![out_ch, in_ch, kernel, kernel], in_ch * kernel * kernel, out_ch)
                }
                LayerKind::Linear { d_in, d_out } => (vec![d_out, d_in], d_in, d_out),
                _ => continue,
            };
            let bound = (6.0 / fan_in as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound);
            let n = shape.iter().product();
            weight.push(Tensor::new(shape, (0..n).map(|_| T::from_f64(dist.sample(&mut rng))).collect())?);
            bias.push(Tensor::zeros([out]));
        }
        Ok(Self { weight, bias })
    }

    pub fn cast<U: Real>(&self) -> Params<U> {
        Params {
            weight: self.weight.iter().map(Tensor::cast).collect(),
            bias: self.bias.iter().map(Tensor::cast).collect(),
        }
    }

    /// Tensors in `[w0, b0, w1, b1, ..]` order.
    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        self.weight.iter().zip(&self.bias).flat_map(|(w, b)| [w, b]).collect()
    }

    pub fn from_tensors(tensors: Vec<Tensor<T>>) -> Result<Self> {
        if !tensors.len().is_multiple_of(2) {
            return Err(Error::Format(format!("expected weight/bias pairs, got {} tensors", tensors.len())));
        }
        let mut weight = Vec::new();
        let mut bias = Vec::new();
        let mut it = tensors.into_iter();
        while let (Some(w), Some(b)) = (it.next(), it.next()) {
            weight.push(w);
            bias.push(b);
        }
        Ok(Self { weight, bias })
    }

    /// Registers every tensor as a leaf.
    pub fn to_graph(&self, g: &mut Graph<T>, trainable: bool) -> ParamNodes {
        ParamNodes {
            weight: self.weight.iter().map(|w| g.leaf(w.clone(), trainable)).collect(),
            bias: self.bias.iter().map(|b| g.leaf(b.clone(), trainable)).collect(),
        }
    }

    /// Shapes agree with `net`.
    pub fn check(&self, net: &NetworkSpec) -> Result<()> {
        let fresh = Params::<T>::init(net, 0)?;
        for (a, b) in self.tensors().into_iter().zip(fresh.tensors()) {
            a.expect_same_shape(b, "params")?;
        }
        if self.weight.len() != fresh.weight.len() || self.bias.len() != fresh.bias.len() {
            return Err(Error::Format("parameter count does not match the network".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ParamNodes {
    pub weight: Vec<NodeId>,
    pub bias: Vec<NodeId>,
}

/// Quantizer configs: one per weight layer (in weight-layer order) and one per
/// layer for its output activations.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct QuantState {
    pub weight: Vec<Option<QuantConfig>>,
    pub act: Vec<Option<QuantConfig>>,
}

impl QuantState {
    pub fn empty(net: &NetworkSpec) -> Self {
        Self { weight: vec![None; net.weight_layers().len()], act: vec![None; net.layers.len()] }
    }
}

/// Which transformations the weight layers apply.
#[derive(Debug, Clone, Copy)]
pub enum Mode<'a> {
    /// Full precision, no variation.
    Clean,
    /// Quantized weights and activations.
    QuantOnly,
    /// Quantized, then perturbed by the chip.
    QuantPerturbed(&'a ChipInstance),
    /// Full-precision weights perturbed by the chip.
    PerturbedOnly(&'a ChipInstance),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeKind {
    Clean,
    QuantOnly,
    QuantPerturbed,
    PerturbedOnly,
}

impl<'a> Mode<'a> {
    pub fn from_kind(kind: ModeKind, chip: Option<&'a ChipInstance>) -> Result<Self> {
        match (kind, chip) {
            (ModeKind::Clean, _) => Ok(Mode::Clean),
            (ModeKind::QuantOnly, _) => Ok(Mode::QuantOnly),
            (ModeKind::QuantPerturbed, Some(c)) => Ok(Mode::QuantPerturbed(c)),
            (ModeKind::PerturbedOnly, Some(c)) => Ok(Mode::PerturbedOnly(c)),
            (ModeKind::QuantPerturbed, None) => Err(Error::MissingChip("quant_perturbed")),
            (ModeKind::PerturbedOnly, None) => Err(Error::MissingChip("perturbed_only")),
        }
    }

    pub fn quantizes(&self) -> bool {
        matches!(self, Mode::QuantOnly | Mode::QuantPerturbed(_))
    }

    pub fn chip(&self) -> Option<&'a ChipInstance> {
        match *self {
            Mode::QuantPerturbed(c) | Mode::PerturbedOnly(c) => Some(c),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardOptions<'a> {
    pub mode: Mode<'a>,
    /// Self-tuning state of the chip in `mode`; ignored without a chip.
    pub st: Option<&'a StState>,
    pub ste: SteOptions,
    pub quantize_activations: bool,
}

impl<'a> ForwardOptions<'a> {
    pub fn new(mode: Mode<'a>) -> Self {
        Self { mode, st: None, ste: SteOptions::default(), quantize_activations: true }
    }

    pub fn with_st(mut self, st: Option<&'a StState>) -> Self {
        self.st = st;
        self
    }
}

/// Builds the forward pass on `g` and returns the logits node. When `probe` is
/// given, the pre-quantization output of every layer with `act_bits` is
/// recorded as `(layer index, node)`.
pub fn forward<T: Real>(
    g: &mut Graph<T>,
    net: &NetworkSpec,
    p: &ParamNodes,
    quant: &QuantState,
    x: NodeId,
    opts: &ForwardOptions<'_>,
    mut probe: Option<&mut Vec<(usize, NodeId)>>,
) -> Result<NodeId> {
    let quantize = opts.mode.quantizes();
    let chip = opts.mode.chip();
    let st = opts.st.filter(|s| chip.is_some() && s.config.st_type != StType::None);
    let mut h = x;
    let mut wi = 0;
    for (li, layer) in net.layers.iter().enumerate() {
        h = match layer.kind {
            LayerKind::Conv2d { .. } | LayerKind::Linear { .. } => {
                let wq = if quantize { quant.weight.get(wi).copied().flatten() } else { None };
                let w = p.weight[wi];
                let len = g.value(w).len();
                let eps = chip.map(|c| c.eps(CellGroup::Weights(wi), len));
                let noise = chip.zip(eps.as_deref()).map(|(c, e)| WeightNoise { model: c.model(), eps: e });
                let wp = weight_path(g, w, wq.as_ref(), noise, opts.ste)?;
                let (y, geom) = match layer.kind {
                    LayerKind::Conv2d { stride, pad, .. } => {
                        let s = g.value(h).shape();
                        let in_hw = (s.get(2).copied().unwrap_or(0), s.get(3).copied().unwrap_or(0));
                        let y = g.conv2d(h, wp.node, stride, pad)?;
                        let ws = g.value(w).shape();
                        let geom = ConvGeom { in_ch: ws[1], out_ch: ws[0], kernel: ws[2], stride, pad };
                        (y, MvmGeom::Conv { geom, in_hw })
                    }
                    _ => {
                        let y = g.linear(h, wp.node)?;
                        (y, MvmGeom::Linear { d_in: g.value(w).shape()[1] })
                    }
                };
                let y = match (st, chip) {
                    (Some(st), Some(chip)) => selftuning::correct_node(g, y, h, st, chip, wi, geom, wp.w_max)?,
                    _ => y,
                };
                let y = g.add_bias(y, p.bias[wi])?;
                wi += 1;
                y
            }
            LayerKind::Relu => g.relu(h)?,
            LayerKind::Maxpool { k } => g.maxpool2d(h, k)?,
            LayerKind::Avgpool { k } => g.avgpool2d(h, k)?,
            LayerKind::Flatten => g.flatten(h)?,
        };
        if layer.act_bits.is_some() {
            if let Some(pr) = probe.as_deref_mut() {
                pr.push((li, h));
            }
            if quantize && opts.quantize_activations {
                if let Some(cfg) = quant.act.get(li).copied().flatten() {
                    h = activation_quant(g, h, &cfg, opts.ste)?;
                }
            }
        }
    }
    Ok(h)
}

/// Forward pass without gradients.
pub fn infer<T: Real>(
    net: &NetworkSpec,
    params: &Params<T>,
    quant: &QuantState,
    x: &Tensor<T>,
    opts: &ForwardOptions<'_>,
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let p = params.to_graph(&mut g, false);
    let xn = g.constant(x.clone());
    let y = forward(&mut g, net, &p, quant, xn, opts, None)?;
    Ok(g.value(y).clone())
}

/// Pre-quantization outputs of every layer with `act_bits`, with activation
/// quantization disabled throughout.
pub fn activation_probe<T: Real>(
    net: &NetworkSpec,
    params: &Params<T>,
    quant: &QuantState,
    x: &Tensor<T>,
    mode: Mode<'_>,
) -> Result<Vec<(usize, Tensor<T>)>> {
    let mut g = Graph::new();
    let p = params.to_graph(&mut g, false);
    let xn = g.constant(x.clone());
    let mut nodes = Vec::new();
    let opts = ForwardOptions { quantize_activations: false, ..ForwardOptions::new(mode) };
    forward(&mut g, net, &p, quant, xn, &opts, Some(&mut nodes))?;
    Ok(nodes.into_iter().map(|(l, n)| (l, g.value(n).clone())).collect())
}

/// Index of the largest logit per row.
pub fn argmax_rows<T: Real>(logits: &Tensor<T>) -> Vec<usize> {
    let c = logits.shape()[1];
    logits
        .data()
        .chunks(c)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}
