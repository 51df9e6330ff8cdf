//! Uniform symmetric fake quantization with straight-through gradients.
//!
//! `x_Q = clip(round(x / scale), -(2^(k-1) - 1), 2^(k-1) - 1)`, `x_D = x_Q * scale`.
//! Rounding is half away from zero, which keeps `q(-x) = -q(x)` exact.

use serde::{Deserialize, Serialize};

use crate::autodiff::{CustomGrad, Graph, NodeId, QuantizedLeaf};
use crate::error::{Error, Result};
use crate::network::{self, Mode, NetworkSpec, Params, QuantState};
use crate::tensor::{Real, Tensor};
use crate::variability::{self, VarianceModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantTarget {
    Weight,
    Activation,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantConfig {
    pub bits: u32,
    pub scale: f64,
    pub target: QuantTarget,
}

/// Largest positive code of a `bits`-wide symmetric quantizer.
pub fn qmax(bits: u32) -> i64 {
    (1i64 << (bits - 1)) - 1
}

fn check_bits(bits: u32) -> Result<()> {
    if !(2..=24).contains(&bits) {
        return Err(Error::Quant(format!("bitwidth must be in 2..=24, got {bits}")));
    }
    Ok(())
}

impl QuantConfig {
    pub fn new(bits: u32, scale: f64, target: QuantTarget) -> Result<Self> {
        check_bits(bits)?;
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::Quant(format!("scale must be finite and > 0, got {scale}")));
        }
        Ok(Self { bits, scale, target })
    }

    pub fn qmax(&self) -> i64 {
        qmax(self.bits)
    }

    #[inline]
    pub fn code(&self, x: f64) -> i64 {
        let q = self.qmax() as f64;
        // f64::round is half-away-from-zero.
        (x / self.scale).round().clamp(-q, q) as i64
    }

    #[inline]
    pub fn dequant(&self, code: i64) -> f64 {
        code as f64 * self.scale
    }

    /// True when `x` lies inside the representable range (no clipping).
    #[inline]
    pub fn in_range(&self, x: f64) -> bool {
        (x / self.scale).abs() <= self.qmax() as f64
    }
}

/// Returns integer codes and dequantized values.
pub fn quantize<T: Real>(x: &Tensor<T>, cfg: &QuantConfig) -> Result<(Vec<i64>, Tensor<T>)> {
    if !x.all_finite() {
        return Err(Error::NonFinite { op: "quantize" });
    }
    let codes: Vec<i64> = x.data().iter().map(|v| cfg.code(v.to_f64())).collect();
    let deq = Tensor::new(x.shape().to_vec(), codes.iter().map(|&c| T::from_f64(cfg.dequant(c))).collect())?;
    Ok((codes, deq))
}

fn sq_error(sorted_abs: &[f64], scale: f64, qmax: f64) -> f64 {
    sorted_abs
        .iter()
        .map(|&a| {
            let d = a - (a / scale).round().min(qmax) * scale;
            d * d
        })
        .sum()
}

const MMSE_GRID: usize = 200;
const MMSE_REFINE_ROUNDS: usize = 3;
const MMSE_REFINE_POINTS: usize = 20;

/// Scale minimizing `||x - dequant(quant(x))||^2`.
///
/// Search: with `s0 = max|x| / qmax`, evaluate a 200-point geometric grid over
/// `[s0/100, 2 s0]` together with the candidates `max|x| / q` for
/// `q = 1..=qmax` (the scales that represent the extreme value exactly). Then
/// run 3 rounds of local refinement, each a 20-point geometric grid around the
/// incumbent spanning one spacing of the previous grid on either side, the
/// spacing ratio shrinking 10x per round. The error is accumulated over the
/// sorted magnitudes, so the result does not depend on element order.
pub fn mmse_scale<T: Real>(x: &Tensor<T>, bits: u32) -> Result<f64> {
    check_bits(bits)?;
    if x.is_empty() {
        return Err(Error::Quant("mmse_scale on an empty tensor".into()));
    }
    if !x.all_finite() {
        return Err(Error::NonFinite { op: "mmse_scale" });
    }
    let mut mag: Vec<f64> = x.data().iter().map(|v| v.to_f64().abs()).collect();
    mag.sort_by(f64::total_cmp);
    let amax = *mag.last().expect("non-empty");
    if amax == 0.0 {
        return Err(Error::Quant("mmse_scale undefined for an all-zero tensor".into()));
    }
    let q = qmax(bits) as f64;
    let s0 = amax / q;
    let (lo, hi) = (s0 * 1e-2, s0 * 2.0);
    let mut ratio = (hi / lo).powf(1.0 / (MMSE_GRID - 1) as f64);

    let mut best = (f64::INFINITY, s0);
    let consider = |s: f64, best: &mut (f64, f64)| {
        let e = sq_error(&mag, s, q);
        if e < best.0 || (e == best.0 && s < best.1) {
            *best = (e, s);
        }
    };
    for i in 0..MMSE_GRID {
        consider(lo * ratio.powi(i as i32), &mut best);
    }
    for code in 1..=qmax(bits) {
        consider(amax / code as f64, &mut best);
    }
    for _ in 0..MMSE_REFINE_ROUNDS {
        let center = best.1;
        let (a, b) = (center / ratio, center * ratio);
        let step = (b / a).powf(1.0 / (MMSE_REFINE_POINTS - 1) as f64);
        for i in 0..MMSE_REFINE_POINTS {
            consider(a * step.powi(i as i32), &mut best);
        }
        ratio = ratio.powf(0.1);
    }
    Ok(best.1)
}

/// Running min/max of activations with exponential momentum.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationState {
    pub min: f64,
    pub max: f64,
    pub momentum: f64,
    pub batches: usize,
}

impl CalibrationState {
    pub fn new(momentum: f64) -> Self {
        Self { min: 0.0, max: 0.0, momentum, batches: 0 }
    }

    pub fn update<T: Real>(&mut self, batch: &[T]) {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for v in batch {
            let v = v.to_f64();
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if batch.is_empty() {
            return;
        }
        if self.batches == 0 {
            (self.min, self.max) = (lo, hi);
        } else {
            let m = self.momentum;
            self.min = m * self.min + (1.0 - m) * lo;
            self.max = m * self.max + (1.0 - m) * hi;
        }
        self.batches += 1;
    }

    /// `max(|min|, |max|) / qmax`.
    pub fn scale(&self, bits: u32) -> Result<f64> {
        check_bits(bits)?;
        if self.batches == 0 {
            return Err(Error::Quant("no calibration batches observed".into()));
        }
        let r = self.min.abs().max(self.max.abs());
        if r == 0.0 {
            return Err(Error::Quant("activation range is identically zero".into()));
        }
        Ok(r / qmax(bits) as f64)
    }
}

pub const CALIBRATION_MOMENTUM: f64 = 0.9;

/// How static activation scales are estimated from calibration batches.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActCalibration {
    /// Running min/max with momentum 0.9.
    #[default]
    MinMax,
    /// MMSE scale of the activations pooled over all batches.
    Mmse,
}

/// Like [`calibrate_activations`], but each scale is the MMSE scale of the
/// layer's activations pooled over `batches`.
pub fn calibrate_activations_mmse<T: Real>(
    net: &NetworkSpec,
    params: &Params<T>,
    quant: &QuantState,
    batches: &[Tensor<T>],
) -> Result<Vec<Option<QuantConfig>>> {
    if batches.is_empty() {
        return Err(Error::Quant("calibration needs at least one batch".into()));
    }
    let mut pooled: Vec<Vec<T>> = vec![Vec::new(); net.layers.len()];
    let mode = if quant.weight.iter().any(Option::is_some) { Mode::QuantOnly } else { Mode::Clean };
    for x in batches {
        for (layer, act) in network::activation_probe(net, params, quant, x, mode)? {
            if net.layers[layer].act_bits.is_some() {
                pooled[layer].extend_from_slice(act.data());
            }
        }
    }
    net.layers
        .iter()
        .zip(pooled)
        .map(|(l, v)| match l.act_bits {
            Some(bits) => {
                let n = v.len();
                let s = mmse_scale(&Tensor::new([n], v)?, bits)?;
                Ok(Some(QuantConfig::new(bits, s, QuantTarget::Activation)?))
            }
            None => Ok(None),
        })
        .collect()
}

/// Activation quantizer configs for every layer of `net` that requests
/// activation quantization, from running min/max over `batches`. The forward
/// pass used here quantizes weights (when configured) but no activations.
pub fn calibrate_activations<T: Real>(
    net: &NetworkSpec,
    params: &Params<T>,
    quant: &QuantState,
    batches: &[Tensor<T>],
) -> Result<Vec<Option<QuantConfig>>> {
    if batches.is_empty() {
        return Err(Error::Quant("calibration needs at least one batch".into()));
    }
    let mut states: Vec<Option<CalibrationState>> =
        net.layers.iter().map(|l| l.act_bits.map(|_| CalibrationState::new(CALIBRATION_MOMENTUM))).collect();
    let mode = if quant.weight.iter().any(Option::is_some) { Mode::QuantOnly } else { Mode::Clean };
    for x in batches {
        for (layer, act) in network::activation_probe(net, params, quant, x, mode)? {
            if let Some(s) = states[layer].as_mut() {
                s.update(act.data());
            }
        }
    }
    net.layers
        .iter()
        .zip(states)
        .map(|(l, s)| match (l.act_bits, s) {
            (Some(bits), Some(s)) => Ok(Some(QuantConfig::new(bits, s.scale(bits)?, QuantTarget::Activation)?)),
            _ => Ok(None),
        })
        .collect()
}

/// Which saturated elements get a zero straight-through gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SteOptions {
    pub mask_weights: bool,
    pub mask_activations: bool,
}

impl Default for SteOptions {
    fn default() -> Self {
        Self { mask_weights: false, mask_activations: true }
    }
}

/// `downstream = upstream * factor`, zeroed where `pass` is false.
///
/// For weights the factor is `1 + d f(eps, x_D) / d x_D` (see
/// [`variability::reparam_grad_factor`]); for activations it is 1.
pub fn ste_rule<T: Real>(upstream: &Tensor<T>, factor: Option<&[T]>, pass: Option<&[bool]>) -> Tensor<T> {
    let mut out = upstream.clone();
    if let Some(f) = factor {
        for (o, &fi) in out.data_mut().iter_mut().zip(f) {
            *o *= fi;
        }
    }
    if let Some(m) = pass {
        for (o, &keep) in out.data_mut().iter_mut().zip(m) {
            if !keep {
                *o = T::ZERO;
            }
        }
    }
    out
}

struct SteGrad<T> {
    factor: Option<Vec<T>>,
    pass: Option<Vec<bool>>,
    name: &'static str,
}

impl<T: Real> CustomGrad<T> for SteGrad<T> {
    fn name(&self) -> &'static str {
        self.name
    }

    fn backward(&self, upstream: &Tensor<T>, _inputs: &[&Tensor<T>]) -> Result<Vec<Option<Tensor<T>>>> {
        Ok(vec![Some(ste_rule(upstream, self.factor.as_deref(), self.pass.as_deref()))])
    }
}

/// Variation to inject on a weight tensor after dequantization.
#[derive(Debug, Clone, Copy)]
pub struct WeightNoise<'a> {
    pub model: VarianceModel,
    pub eps: &'a [f64],
}

/// Output of [`weight_path`].
#[derive(Debug, Clone, Copy)]
pub struct WeightPath {
    pub node: NodeId,
    /// Largest dequantized magnitude, before perturbation.
    pub w_max: f64,
}

/// Builds `w -> quantize -> dequantize -> perturb` as a single node whose
/// gradient is the straight-through rule `upstream * (1 + d f / d x_D)`.
/// Either stage may be absent.
pub fn weight_path<T: Real>(
    g: &mut Graph<T>,
    w: NodeId,
    quant: Option<&QuantConfig>,
    noise: Option<WeightNoise<'_>>,
    ste: SteOptions,
) -> Result<WeightPath> {
    let x = g.value(w);
    let mut pass = None;
    let mut w_max = None;
    let deq: Vec<T> = match quant {
        Some(cfg) => {
            let reference = g.quant_reference(w).unwrap_or(x);
            if !reference.all_finite() {
                return Err(Error::NonFinite { op: "quantize" });
            }
            let mut out: Vec<T> =
                reference.data().iter().map(|v| T::from_f64(cfg.dequant(cfg.code(v.to_f64())))).collect();
            w_max = Some(variability::w_max(&out));
            if g.quant_reference(w).is_some() {
                // Straight-through surrogate used by the gradient checker.
                for ((o, &xi), &ri) in out.iter_mut().zip(x.data()).zip(reference.data()) {
                    *o += xi - ri;
                }
            }
            if ste.mask_weights {
                pass = Some(reference.data().iter().map(|v| cfg.in_range(v.to_f64())).collect());
            }
            out
        }
        None => x.data().to_vec(),
    };
    let w_max = w_max.unwrap_or_else(|| variability::w_max(&deq));
    let (value, factor) = match noise {
        Some(n) => {
            if n.eps.len() != deq.len() {
                return Err(Error::Shape { op: "perturb", lhs: x.shape().to_vec(), rhs: vec![n.eps.len()] });
            }
            let v = variability::perturb(&deq, n.eps, n.model, w_max);
            let f = match n.model {
                VarianceModel::WeightProportional => {
                    Some(n.eps.iter().map(|&e| T::from_f64(variability::reparam_grad_factor(n.model, e))).collect())
                }
                VarianceModel::LayerFixed => None,
            };
            (v, f)
        }
        None => (deq, None),
    };
    let shape = x.shape().to_vec();
    if let Some(cfg) = quant {
        if g.is_leaf(w) {
            g.record_quantized_leaf(QuantizedLeaf { leaf: w, scale: cfg.scale, qmax: cfg.qmax() });
        }
    }
    let name = match (quant.is_some(), noise.is_some()) {
        (true, true) => "fake_quant_perturb",
        (true, false) => "fake_quant_weight",
        (false, true) => "perturb",
        (false, false) => "weight_identity",
    };
    let node = g.custom(&[w], Tensor::new(shape, value)?, Box::new(SteGrad { factor, pass, name }))?;
    Ok(WeightPath { node, w_max })
}

/// Fake-quantizes activations; gradient passes straight through except where
/// the input saturated (when masking is enabled).
pub fn activation_quant<T: Real>(g: &mut Graph<T>, x: NodeId, cfg: &QuantConfig, ste: SteOptions) -> Result<NodeId> {
    let (_, deq) = quantize(g.value(x), cfg)?;
    let pass = ste.mask_activations.then(|| g.value(x).data().iter().map(|v| cfg.in_range(v.to_f64())).collect());
    g.custom(&[x], deq, Box::new(SteGrad { factor: None, pass, name: "fake_quant_activation" }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn q(bits: u32, scale: f64) -> QuantConfig {
        QuantConfig::new(bits, scale, QuantTarget::Weight).unwrap()
    }

    #[test]
    fn examples() {
        let (c, d) = quantize(&Tensor::scalar(0.7), &q(2, 0.5)).unwrap();
        assert_eq!((c[0], d.data()[0]), (1, 0.5));
        let (c, d) = quantize(&Tensor::scalar(-10.0), &q(4, 1.0)).unwrap();
        assert_eq!((c[0], d.data()[0]), (-7, -7.0));
        for cfg in [q(2, 0.1), q(8, 3.0)] {
            let (c, d) = quantize(&Tensor::scalar(0.0), &cfg).unwrap();
            assert_eq!((c[0], d.data()[0]), (0, 0.0));
        }
    }

    #[test]
    fn ties_round_away_from_zero() {
        let cfg = q(4, 1.0);
        assert_eq!(cfg.code(2.5), 3);
        assert_eq!(cfg.code(-2.5), -3);
        assert_eq!(cfg.code(0.5), 1);
    }

    #[test]
    fn rejects_invalid_configs_and_inputs() {
        assert!(QuantConfig::new(1, 1.0, QuantTarget::Weight).is_err());
        assert!(QuantConfig::new(4, 0.0, QuantTarget::Weight).is_err());
        assert!(QuantConfig::new(4, f64::NAN, QuantTarget::Activation).is_err());
        let bad = Tensor::new([2], vec![1.0, f64::NAN]).unwrap();
        assert!(quantize(&bad, &q(4, 1.0)).is_err());
    }

    #[test]
    fn mmse_errors_on_zero_tensor() {
        assert!(mmse_scale(&Tensor::<f64>::zeros([5]), 2).is_err());
    }

    #[test]
    fn mmse_reconstructs_on_grid_data() {
        let x = Tensor::new([6], vec![-0.3, 0.0, 0.3, 0.3, -0.3, 0.0]).unwrap();
        let s = mmse_scale(&x, 2).unwrap();
        let (_, d) = quantize(&x, &q(2, s)).unwrap();
        assert_eq!(d, x);
    }

    #[test]
    fn mmse_single_value_exactly_representable() {
        let x = Tensor::scalar(5.0);
        let s = mmse_scale(&x, 4).unwrap();
        let (c, d) = quantize(&x, &q(4, s)).unwrap();
        assert_eq!(d.data()[0], 5.0, "scale {s}, code {}", c[0]);
        assert!(c[0].abs() <= 7);
    }

    #[test]
    fn calibration_momentum_example() {
        let mut st = CalibrationState::new(0.9);
        st.update(&[0.0, 1.0]);
        st.update(&[0.0, 2.0]);
        assert!((st.max - 1.1).abs() < 1e-12);
    }

    #[test]
    fn calibration_constant_activation() {
        let mut st = CalibrationState::new(0.9);
        for _ in 0..4 {
            st.update(&[0.8f64; 10]);
        }
        assert!((st.scale(2).unwrap() - 0.8).abs() < 1e-15);
        assert!((st.scale(4).unwrap() - 0.8 / 7.0).abs() < 1e-15);
        assert!(CalibrationState::new(0.9).scale(2).is_err());
    }

    #[test]
    fn ste_examples() {
        let up = Tensor::scalar(1.0);
        let f = [variability::reparam_grad_factor(VarianceModel::WeightProportional, 0.2)];
        assert!((ste_rule(&up, Some(&f), None).data()[0] - 1.2).abs() < 1e-15);
        let g = Tensor::scalar(-0.37);
        assert_eq!(ste_rule(&g, None, None), g);
        let act = QuantConfig::new(2, 1.0, QuantTarget::Activation).unwrap();
        let mask = [act.in_range(10.0)];
        assert_eq!(ste_rule(&up, None, Some(&mask)).data()[0], 0.0);
    }

    #[test]
    fn weight_path_gradient_applies_one_plus_eps() {
        let mut g = Graph::<f64>::new();
        let w = g.leaf(Tensor::new([3], vec![0.4, -0.9, 0.05]).unwrap(), true);
        let eps = [0.2, -0.3, 0.5];
        let wp = weight_path(
            &mut g,
            w,
            Some(&q(2, 0.5)),
            Some(WeightNoise { model: VarianceModel::WeightProportional, eps: &eps }),
            SteOptions::default(),
        )
        .unwrap();
        assert_eq!(g.value(wp.node).data(), &[0.5 * 1.2, -0.5 * 0.7, 0.0]);
        assert_eq!(wp.w_max, 0.5);
        let l = g.sum(wp.node).unwrap();
        g.backward(l).unwrap();
        let gr = g.grad(w).unwrap().data();
        for (a, e) in gr.iter().zip(eps) {
            assert!((a - (1.0 + e)).abs() < 1e-15);
        }
    }

    #[test]
    fn layer_fixed_path_uses_dequantized_max() {
        let mut g = Graph::<f64>::new();
        let w = g.leaf(Tensor::new([2], vec![0.0, 1.4]).unwrap(), true);
        let eps = [0.5, 0.5];
        let wp = weight_path(
            &mut g,
            w,
            Some(&q(3, 0.5)),
            Some(WeightNoise { model: VarianceModel::LayerFixed, eps: &eps }),
            SteOptions::default(),
        )
        .unwrap();
        // dequantized [0, 1.5], w_max 1.5
        assert_eq!(g.value(wp.node).data(), &[0.75, 2.25]);
        let l = g.sum(wp.node).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(w).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn activation_quant_masks_saturated_inputs() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::new([3], vec![0.2, 0.7, 10.0]).unwrap(), true);
        let cfg = QuantConfig::new(2, 1.0, QuantTarget::Activation).unwrap();
        let y = activation_quant(&mut g, x, &cfg, SteOptions::default()).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 1.0, 1.0]);
        let l = g.sum(y).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 1.0, 0.0]);
    }
}
