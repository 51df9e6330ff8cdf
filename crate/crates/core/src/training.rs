//! Multi-variation sampling QAVAT and the QAT, VAT and PTQ-VAT baselines.
//!
//! Each optimizer step draws a mini-batch, runs it through `n` independently
//! sampled chip instances, sums the `n` losses and applies one SGD-momentum
//! update with the gradient of that sum. Because the loss is summed, the
//! default step size is `base_lr / n`.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::dataio::{Checkpoint, Dataset, Provenance};
use crate::error::{Error, Result};
use crate::evaluation::accuracy;
use crate::exec::Exec;
use crate::network::{forward, ForwardOptions, Mode, NetworkSpec, Params, QuantState};
use crate::quantization::{
    calibrate_activations, calibrate_activations_mmse, mmse_scale, quantize, ActCalibration, QuantConfig, QuantTarget,
    SteOptions,
};
use crate::rng::mix64;
use crate::tensor::{Precision, Real, Tensor};
use crate::variability::{sample_chip, w_max, ChipDomain, ChipInstance, LayerStats, VariabilityConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pipeline {
    Qavat,
    Qat,
    Vat,
    PtqVat,
}

impl Pipeline {
    pub fn quantized_training(self) -> bool {
        matches!(self, Pipeline::Qavat | Pipeline::Qat)
    }

    fn mode(self, chip: &ChipInstance) -> Mode<'_> {
        match self {
            Pipeline::Qavat => Mode::QuantPerturbed(chip),
            Pipeline::Qat => Mode::QuantOnly,
            Pipeline::Vat | Pipeline::PtqVat => Mode::PerturbedOnly(chip),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub pipeline: Pipeline,
    pub n_samples: usize,
    pub epochs: usize,
    /// Full-precision epochs before quantizer scales are fixed; skipped when
    /// starting from an existing checkpoint.
    pub warmup_epochs: usize,
    /// Step size; `None` means `base_lr / n_samples`.
    pub lr: Option<f64>,
    pub base_lr: f64,
    pub momentum: f64,
    pub lr_decay: f64,
    /// Fractions of `epochs` after which the step size is multiplied by `lr_decay`.
    pub lr_milestones: Vec<f64>,
    pub batch_size: usize,
    pub seed: u64,
    pub variability: VariabilityConfig,
    pub precision: Precision,
    pub ste: SteOptions,
    pub refresh_weight_scales: bool,
    pub calib_batches: usize,
    /// Activation scale estimate for QAT and QAVAT. PTQ-VAT always uses min/max.
    pub act_calibration: ActCalibration,
    /// Chips in the under-variation validation panel (0 disables it).
    pub val_chips: usize,
    /// Validation samples, evenly spaced over the validation split.
    pub val_size: usize,
    /// Return the weights (starting point included) with the best accuracy on
    /// the under-variation validation panel instead of the last epoch.
    #[serde(skip_serializing_if = "std::ops::Not::not")]
    pub keep_best: bool,
    /// Upper bound on the L2 norm of the per-sample mean gradient.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            pipeline: Pipeline::Qavat,
            n_samples: 1,
            epochs: 30,
            warmup_epochs: 2,
            lr: None,
            base_lr: 0.02,
            momentum: 0.9,
            lr_decay: 0.1,
            lr_milestones: vec![0.5, 0.75],
            batch_size: 64,
            seed: 0,
            variability: VariabilityConfig::default(),
            precision: Precision::F32,
            ste: SteOptions::default(),
            refresh_weight_scales: false,
            calib_batches: 10,
            act_calibration: ActCalibration::MinMax,
            val_chips: 20,
            val_size: 1000,
            keep_best: false,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.variability.validate()?;
        if self.n_samples == 0 {
            return Err(Error::Config("n_samples must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        let lr = self.step_size();
        if !(lr.is_finite() && lr > 0.0) {
            return Err(Error::Config(format!("step size must be > 0, got {lr}")));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if self.lr_milestones.iter().any(|m| !(0.0..=1.0).contains(m)) {
            return Err(Error::Config("lr_milestones must be fractions in [0, 1]".into()));
        }
        if self.keep_best && self.val_chips == 0 {
            return Err(Error::Config("keep_best needs val_chips > 0".into()));
        }
        if self.grad_clip.is_some_and(|c| !(c.is_finite() && c > 0.0)) {
            return Err(Error::Config("grad_clip must be > 0".into()));
        }
        Ok(())
    }

    pub fn step_size(&self) -> f64 {
        self.lr.unwrap_or(self.base_lr / self.n_samples.max(1) as f64)
    }

    /// Step size during main-phase epoch `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let passed = self.lr_milestones.iter().filter(|&&m| epoch >= (m * self.epochs as f64).round() as usize).count();
        self.step_size() * self.lr_decay.powi(passed as i32)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Warmup,
    Train,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: Phase,
    pub lr: f64,
    pub loss: f64,
    /// Accuracy without variation, in the deployed precision.
    pub clean_acc: f64,
    /// Mean accuracy over the validation chip panel.
    pub var_acc: Option<f64>,
    pub wall_s: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

/// Deterministic digest of a finished run, stored in checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSummary {
    pub epochs: usize,
    pub steps: usize,
    pub final_loss: f64,
    pub clean_acc: f64,
    pub var_acc: Option<f64>,
}

impl TrainLog {
    fn summary(&self, steps: usize) -> Option<TrainSummary> {
        self.records.last().map(|r| TrainSummary {
            epochs: self.records.len(),
            steps,
            final_loss: r.loss,
            clean_acc: r.clean_acc,
            var_acc: r.var_acc,
        })
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: TrainLog,
}

/// Loss and parameter gradients (in `[w0, b0, w1, b1, ..]` order) of one
/// pass of the batch through `mode`.
pub fn sample_gradient<T: Real>(
    net: &NetworkSpec,
    params: &Params<T>,
    quant: &QuantState,
    x: &Tensor<T>,
    labels: &[usize],
    mode: Mode<'_>,
    ste: SteOptions,
) -> Result<(f64, Vec<Tensor<T>>)> {
    let mut g = Graph::new();
    let p = params.to_graph(&mut g, true);
    let xn = g.constant(x.clone());
    let opts = ForwardOptions { ste, ..ForwardOptions::new(mode) };
    let logits = forward(&mut g, net, &p, quant, xn, &opts, None)?;
    let loss = g.softmax_cross_entropy(logits, labels)?;
    let lv = g.value(loss).data()[0].to_f64();
    g.backward(loss)?;
    let grads = p
        .weight
        .iter()
        .zip(&p.bias)
        .flat_map(|(&w, &b)| [w, b])
        .map(|id| g.take_grad(id).unwrap_or_else(|| Tensor::zeros(g.value(id).shape().to_vec())))
        .collect();
    Ok((lv, grads))
}

/// Sum of the losses and gradients over `chips`, one pass per chip. Passes run
/// under `exec`; the reduction is always in chip order.
#[allow(clippy::too_many_arguments)]
pub fn accumulate_gradients<T: Real>(
    net: &NetworkSpec,
    params: &Params<T>,
    quant: &QuantState,
    x: &Tensor<T>,
    labels: &[usize],
    pipeline: Pipeline,
    chips: &[ChipInstance],
    ste: SteOptions,
    exec: Exec,
) -> Result<(f64, Vec<Tensor<T>>)> {
    accumulate(net, params, quant, x, labels, Some(pipeline), chips, ste, exec)
}

/// `pipeline = None` trains the full-precision model without variation.
#[allow(clippy::too_many_arguments)]
fn accumulate<T: Real>(
    net: &NetworkSpec,
    params: &Params<T>,
    quant: &QuantState,
    x: &Tensor<T>,
    labels: &[usize],
    pipeline: Option<Pipeline>,
    chips: &[ChipInstance],
    ste: SteOptions,
    exec: Exec,
) -> Result<(f64, Vec<Tensor<T>>)> {
    let parts = exec.map(chips.len(), |i| {
        let mode = pipeline.map_or(Mode::Clean, |p| p.mode(&chips[i]));
        sample_gradient(net, params, quant, x, labels, mode, ste)
    });
    let mut loss = 0.0;
    let mut total: Option<Vec<Tensor<T>>> = None;
    for part in parts {
        let (l, g) = part?;
        loss += l;
        match total.as_mut() {
            None => total = Some(g),
            Some(acc) => {
                for (a, gi) in acc.iter_mut().zip(&g) {
                    a.add_assign(gi)?;
                }
            }
        }
    }
    Ok((loss, total.unwrap_or_default()))
}

/// SGD with heavy-ball momentum: `v = mu v + g`, `w -= lr v`.
struct Sgd<T> {
    momentum: T,
    velocity: Vec<Tensor<T>>,
}

impl<T: Real> Sgd<T> {
    fn new(params: &Params<T>, momentum: f64) -> Self {
        Self {
            momentum: T::from_f64(momentum),
            velocity: params.tensors().into_iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect(),
        }
    }

    fn step(&mut self, params: &mut Params<T>, grads: &[Tensor<T>], lr: f64) {
        let lr = T::from_f64(lr);
        let targets = params.weight.iter_mut().zip(params.bias.iter_mut()).flat_map(|(w, b)| [w, b]);
        for ((p, v), g) in targets.zip(&mut self.velocity).zip(grads) {
            for ((pi, vi), &gi) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *vi = self.momentum * *vi + gi;
                *pi -= lr * *vi;
            }
        }
    }
}

/// Rescales `grads` so their joint L2 norm is at most `max_norm`.
fn clip_grad_norm<T: Real>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let norm = grads.iter().flat_map(|g| g.data()).map(|v| v.to_f64() * v.to_f64()).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = T::from_f64(max_norm / norm);
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

fn calibration_batches<T: Real>(data: &Dataset, batches: usize, batch_size: usize) -> Vec<Tensor<T>> {
    (0..batches)
        .map(|b| b * batch_size)
        .take_while(|&start| start < data.len())
        .map(|start| {
            let idx: Vec<usize> = (start..(start + batch_size).min(data.len())).collect();
            data.batch(&idx).0
        })
        .collect()
}

/// MMSE weight scales and min/max activation scales for the bitwidths in `net`.
pub fn quant_state<T: Real>(net: &NetworkSpec, params: &Params<T>, calib: &[Tensor<T>]) -> Result<QuantState> {
    quant_state_with(net, params, calib, ActCalibration::MinMax)
}

pub fn quant_state_with<T: Real>(
    net: &NetworkSpec,
    params: &Params<T>,
    calib: &[Tensor<T>],
    act: ActCalibration,
) -> Result<QuantState> {
    let mut q = QuantState::empty(net);
    for (wi, li) in net.weight_layers().into_iter().enumerate() {
        if let Some(bits) = net.layers[li].weight_bits {
            let s = mmse_scale(&params.weight[wi], bits)?;
            q.weight[wi] = Some(QuantConfig::new(bits, s, QuantTarget::Weight)?);
        }
    }
    if net.layers.iter().any(|l| l.act_bits.is_some()) {
        q.act = match act {
            ActCalibration::MinMax => calibrate_activations(net, params, &q, calib)?,
            ActCalibration::Mmse => calibrate_activations_mmse(net, params, &q, calib)?,
        };
    }
    Ok(q)
}

/// Largest dequantized weight magnitude per weight layer.
pub fn layer_stats<T: Real>(params: &Params<T>, quant: &QuantState) -> Result<LayerStats> {
    let mut out = Vec::with_capacity(params.weight.len());
    for (i, w) in params.weight.iter().enumerate() {
        out.push(match quant.weight.get(i).copied().flatten() {
            Some(cfg) => quantize(w, &cfg)?.1.max_abs().to_f64(),
            None => w_max(w.data()),
        });
    }
    Ok(LayerStats { w_max: out })
}

/// Post-training quantization of a full-precision checkpoint.
pub fn ptq(
    ckpt: &Checkpoint,
    act_bits: Option<u32>,
    weight_bits: Option<u32>,
    calib: &[Tensor<f64>],
) -> Result<Checkpoint> {
    if calib.is_empty() {
        return Err(Error::Quant("post-training quantization needs calibration data".into()));
    }
    let network = ckpt.network.clone().with_bits(act_bits, weight_bits);
    network.validate()?;
    let quant = quant_state(&network, &ckpt.params, calib)?;
    let stats = layer_stats(&ckpt.params, &quant)?;
    Ok(Checkpoint {
        network,
        params: ckpt.params.clone(),
        quant,
        stats,
        provenance: Provenance { parent: Some(ckpt.fingerprint()?), ..ckpt.provenance.clone() },
    })
}

/// Runs `cfg.pipeline`. `init` supplies starting weights (warmup is then
/// skipped); otherwise weights are freshly initialized from `cfg.seed`.
pub fn train(
    net: &NetworkSpec,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    init: Option<&Checkpoint>,
    exec: Exec,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    net.validate()?;
    if train.shape != net.input_shape || train.classes != net.classes {
        return Err(Error::Config(format!(
            "dataset {:?} with {} classes does not fit network input {:?} with {} classes",
            train.shape, train.classes, net.input_shape, net.classes
        )));
    }
    match cfg.precision {
        Precision::F32 => train_impl::<f32>(net, train, val, cfg, init, exec, on_epoch),
        Precision::F64 => train_impl::<f64>(net, train, val, cfg, init, exec, on_epoch),
    }
}

pub fn train_qavat(net: &NetworkSpec, data: &Dataset, val: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let cfg = TrainConfig { pipeline: Pipeline::Qavat, ..cfg.clone() };
    train(net, data, val, &cfg, None, Exec::default(), &mut |_| {})
}

pub fn train_qat(net: &NetworkSpec, data: &Dataset, val: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let cfg = TrainConfig { pipeline: Pipeline::Qat, ..cfg.clone() };
    train(net, data, val, &cfg, None, Exec::default(), &mut |_| {})
}

pub fn train_vat(net: &NetworkSpec, data: &Dataset, val: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let cfg = TrainConfig { pipeline: Pipeline::Vat, ..cfg.clone() };
    train(net, data, val, &cfg, None, Exec::default(), &mut |_| {})
}

struct Epoch {
    phase: Phase,
    pipeline: Option<Pipeline>,
    lr: f64,
}

fn train_impl<T: Real>(
    net: &NetworkSpec,
    data: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    init: Option<&Checkpoint>,
    exec: Exec,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    let mut params: Params<T> = match init {
        Some(c) => {
            c.params.check(net)?;
            c.params.cast()
        }
        None => Params::<f64>::init(net, cfg.seed)?.cast(),
    };
    let val = val.evenly_spaced(cfg.val_size);
    let calib: Vec<Tensor<T>> = calibration_batches(data, cfg.calib_batches.max(1), cfg.batch_size);
    let mut log = TrainLog::default();
    let mut opt = Sgd::new(&params, cfg.momentum);
    let mut quant = QuantState::empty(net);
    let mut step = 0usize;
    let mut epoch_no = 0usize;
    let n = cfg.n_samples;
    let none = VariabilityConfig::none(cfg.variability.model);

    let panel =
        |params: &Params<T>, quant: &QuantState, var: &VariabilityConfig, quantized: bool| -> Result<Option<f64>> {
            if cfg.val_chips == 0 || var.is_zero() {
                return Ok(None);
            }
            let accs = exec.map(cfg.val_chips, |i| -> Result<f64> {
                let chip = sample_chip(var, cfg.seed, ChipDomain::Validation, i as u64);
                let mode = if quantized { Mode::QuantPerturbed(&chip) } else { Mode::PerturbedOnly(&chip) };
                let (c, t) = accuracy(net, params, quant, &val, &ForwardOptions::new(mode), 500)?;
                Ok(c as f64 / t as f64)
            });
            let accs = accs.into_iter().collect::<Result<Vec<_>>>()?;
            Ok(Some(100.0 * accs.iter().sum::<f64>() / accs.len() as f64))
        };

    let mut run_epoch = |params: &mut Params<T>,
                         quant: &QuantState,
                         opt: &mut Sgd<T>,
                         ep: Epoch,
                         var: &VariabilityConfig,
                         samples: usize,
                         log: &mut TrainLog|
     -> Result<()> {
        let t0 = Instant::now();
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix64(cfg.seed ^ mix64(epoch_no as u64 + 1))));
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for idx in order.chunks(cfg.batch_size) {
            let (x, labels) = data.batch::<T>(idx);
            let chips: Vec<ChipInstance> = (0..samples)
                .map(|i| sample_chip(var, cfg.seed, ChipDomain::Training, (step * samples + i) as u64))
                .collect();
            let (loss, mut grads) = accumulate(net, params, quant, &x, &labels, ep.pipeline, &chips, cfg.ste, exec)?;
            if !loss.is_finite() {
                return Err(Error::Divergence { step, loss });
            }
            if let Some(c) = cfg.grad_clip {
                clip_grad_norm(&mut grads, c * samples as f64);
            }
            opt.step(params, &grads, ep.lr);
            loss_sum += loss / samples as f64;
            batches += 1;
            step += 1;
        }
        let quantized = ep.phase == Phase::Train && cfg.pipeline.quantized_training();
        let clean_mode = if quantized { Mode::QuantOnly } else { Mode::Clean };
        let (c, t) = accuracy(net, params, quant, &val, &ForwardOptions::new(clean_mode), 500)?;
        let var_acc = if ep.phase == Phase::Train { panel(params, quant, var, quantized)? } else { None };
        let rec = EpochRecord {
            epoch: epoch_no,
            phase: ep.phase,
            lr: ep.lr,
            loss: loss_sum / batches.max(1) as f64,
            clean_acc: 100.0 * c as f64 / t.max(1) as f64,
            var_acc,
            wall_s: t0.elapsed().as_secs_f64(),
        };
        on_epoch(&rec);
        log.records.push(rec);
        epoch_no += 1;
        Ok(())
    };

    if init.is_none() {
        for _ in 0..cfg.warmup_epochs {
            let ep = Epoch { phase: Phase::Warmup, pipeline: None, lr: cfg.step_size() * n as f64 };
            run_epoch(&mut params, &quant, &mut opt, ep, &none, 1, &mut log)?;
        }
    }
    if cfg.pipeline.quantized_training() {
        quant = quant_state_with(net, &params, &calib, cfg.act_calibration)?;
    }
    let pipeline = cfg.pipeline;
    opt = Sgd::new(&params, cfg.momentum);
    // PTQ-VAT candidates are scored after post-training quantization.
    let score = |params: &Params<T>, epoch_acc: Option<f64>| -> Result<Option<f64>> {
        if pipeline != Pipeline::PtqVat {
            return Ok(epoch_acc);
        }
        match quant_state(net, params, &calib) {
            Err(Error::Quant(_)) => Ok(None),
            Err(e) => Err(e),
            Ok(q) => panel(params, &q, &cfg.variability, true),
        }
    };
    let mut best: Option<(f64, Params<T>, QuantState)> = None;
    if cfg.keep_best {
        let a = panel(&params, &quant, &cfg.variability, pipeline.quantized_training())?;
        best = score(&params, a)?.map(|a| (a, params.clone(), quant.clone()));
    }
    for e in 0..cfg.epochs {
        if e > 0 && cfg.refresh_weight_scales && pipeline.quantized_training() {
            let acts = quant.act.clone();
            quant = quant_state(net, &params, &calib)?;
            quant.act = acts;
        }
        let ep = Epoch { phase: Phase::Train, pipeline: Some(pipeline), lr: cfg.lr_at(e) };
        run_epoch(&mut params, &quant, &mut opt, ep, &cfg.variability, n, &mut log)?;
        if cfg.keep_best {
            let acc = score(&params, log.records.last().and_then(|r| r.var_acc))?;
            if let Some(a) = acc.filter(|a| best.as_ref().is_none_or(|b| *a > b.0)) {
                best = Some((a, params.clone(), quant.clone()));
            }
        }
    }
    if let Some((_, p, q)) = best {
        params = p;
        quant = q;
    }

    let params64: Params<f64> = params.cast();
    let fp_net = net.clone().with_bits(None, None);
    let (network, quant) =
        if pipeline.quantized_training() { (net.clone(), quant) } else { (fp_net.clone(), QuantState::empty(&fp_net)) };
    let stats = layer_stats(&params64, &quant)?;
    let provenance = Provenance {
        train: Some(cfg.clone()),
        summary: log.summary(step),
        parent: init.map(Checkpoint::fingerprint).transpose()?,
    };
    let mut checkpoint = Checkpoint { network, params: params64, quant, stats, provenance };
    if pipeline == Pipeline::PtqVat {
        let calib64: Vec<Tensor<f64>> = calibration_batches(data, cfg.calib_batches.max(1), cfg.batch_size);
        let a = net.layers.iter().find_map(|l| l.act_bits);
        let w = net.layers.iter().find_map(|l| l.weight_bits);
        checkpoint = ptq(&checkpoint, a, w, &calib64)?;
    }
    Ok(TrainOutcome { checkpoint, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{synthetic, Split};
    use crate::network::{build_synthetic, LayerKind, LayerSpec};
    use crate::variability::VarianceModel;

    fn quick_cfg(pipeline: Pipeline) -> TrainConfig {
        TrainConfig {
            pipeline,
            epochs: 2,
            warmup_epochs: 1,
            batch_size: 32,
            base_lr: 0.05,
            val_chips: 2,
            val_size: 64,
            calib_batches: 2,
            precision: Precision::F64,
            ..Default::default()
        }
    }

    #[test]
    fn lr_schedule_steps_down() {
        let c = TrainConfig { epochs: 8, base_lr: 1.0, ..Default::default() };
        assert_eq!(c.lr_at(0), 1.0);
        assert!((c.lr_at(4) - 0.1).abs() < 1e-15);
        assert!((c.lr_at(6) - 0.01).abs() < 1e-15);
        let n5 = TrainConfig { n_samples: 5, base_lr: 1.0, ..Default::default() };
        assert!((n5.step_size() - 0.2).abs() < 1e-15);
    }

    #[test]
    fn grad_clip_rescales_joint_norm() {
        let mut g = vec![Tensor::new([1], vec![3.0f64]).unwrap(), Tensor::new([2], vec![0.0, 4.0]).unwrap()];
        assert_eq!(clip_grad_norm(&mut g, 10.0), 5.0);
        assert_eq!(g[1].data(), &[0.0, 4.0]);
        clip_grad_norm(&mut g, 1.0);
        assert!((g[0].data()[0] - 0.6).abs() < 1e-12 && (g[1].data()[1] - 0.8).abs() < 1e-12);
        let cfg = TrainConfig { grad_clip: Some(0.0), ..TrainConfig::default() };
        assert!(cfg.validate().is_err());
        assert!(!serde_json::to_string(&TrainConfig::default()).unwrap().contains("grad_clip"));
    }

    #[test]
    fn keep_best_returns_best_panel_weights() {
        let net = build_synthetic();
        let data = synthetic(256, 1, Split::Train);
        let val = synthetic(128, 2, Split::Test);
        let var = VariabilityConfig::within_chip(VarianceModel::LayerFixed, 0.5);
        let cfg = TrainConfig {
            pipeline: Pipeline::Vat,
            epochs: 4,
            base_lr: 0.5,
            grad_clip: Some(1.0),
            keep_best: true,
            variability: var,
            ..quick_cfg(Pipeline::Vat)
        };
        let init = Params::<f64>::init(&net, 9).unwrap();
        let ck = Checkpoint {
            network: net.clone(),
            quant: QuantState::empty(&net),
            stats: layer_stats(&init, &QuantState::empty(&net)).unwrap(),
            params: init.clone(),
            provenance: Provenance::default(),
        };
        let out = train(&net, &data, &val, &cfg, Some(&ck), Exec::Serial, &mut |_| {}).unwrap();
        let panel = |p: &Params<f64>| {
            let v = val.evenly_spaced(cfg.val_size);
            let q = QuantState::empty(&net);
            let hits: usize = (0..cfg.val_chips)
                .map(|i| {
                    let chip = sample_chip(&var, cfg.seed, ChipDomain::Validation, i as u64);
                    accuracy(&net, p, &q, &v, &ForwardOptions::new(Mode::PerturbedOnly(&chip)), 500).unwrap().0
                })
                .sum();
            100.0 * hits as f64 / (cfg.val_chips * v.len()) as f64
        };
        let got = panel(&out.checkpoint.params);
        let best = out.log.records.iter().filter_map(|r| r.var_acc).fold(panel(&init), f64::max);
        assert!((got - best).abs() < 1e-9, "{got} vs {best}");
        assert!(TrainConfig { val_chips: 0, ..cfg.clone() }.validate().is_err());

        let qnet = net.clone().with_bits(Some(2), Some(2));
        let cfg = TrainConfig { pipeline: Pipeline::PtqVat, ..cfg };
        let out = train(&qnet, &data, &val, &cfg, Some(&ck), Exec::Serial, &mut |_| {}).unwrap();
        let qpanel = |c: &Checkpoint| {
            let v = val.evenly_spaced(cfg.val_size);
            let hits: usize = (0..cfg.val_chips)
                .map(|i| {
                    let chip = sample_chip(&var, cfg.seed, ChipDomain::Validation, i as u64);
                    let opts = ForwardOptions::new(Mode::QuantPerturbed(&chip));
                    accuracy(&c.network, &c.params, &c.quant, &v, &opts, 500).unwrap().0
                })
                .sum();
            100.0 * hits as f64 / (cfg.val_chips * v.len()) as f64
        };
        let calib: Vec<Tensor<f64>> = calibration_batches(&data, cfg.calib_batches, cfg.batch_size);
        let start = ptq(&ck, Some(2), Some(2), &calib).unwrap();
        assert!(qpanel(&out.checkpoint) >= qpanel(&start));
    }

    #[test]
    fn mmse_activation_scales_fit_no_worse_than_min_max() {
        let net = build_synthetic().with_bits(Some(2), Some(2));
        let params = Params::<f64>::init(&net, 5).unwrap();
        let data = synthetic(64, 3, Split::Train);
        let calib: Vec<Tensor<f64>> = calibration_batches(&data, 2, 32);
        let mm = quant_state_with(&net, &params, &calib, ActCalibration::MinMax).unwrap();
        let ms = quant_state_with(&net, &params, &calib, ActCalibration::Mmse).unwrap();
        assert_eq!(mm.weight, ms.weight);
        let mut acts: Vec<Vec<f64>> = vec![Vec::new(); net.layers.len()];
        for x in &calib {
            for (l, a) in crate::network::activation_probe(&net, &params, &mm, x, Mode::QuantOnly).unwrap() {
                acts[l].extend_from_slice(a.data());
            }
        }
        let mse = |v: &[f64], c: &QuantConfig| {
            let t = Tensor::new([v.len()], v.to_vec()).unwrap();
            let d = quantize(&t, c).unwrap().1;
            v.iter().zip(d.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
        };
        let mut checked = 0;
        for (l, v) in acts.iter().enumerate() {
            if let (Some(a), Some(b)) = (mm.act[l], ms.act[l]) {
                assert!(mse(v, &b) <= mse(v, &a) * (1.0 + 1e-9), "layer {l}");
                checked += 1;
            }
        }
        assert!(checked > 0);
    }

    #[test]
    fn zero_variation_qavat_matches_qat() {
        let net = build_synthetic();
        let (tr, te) = (synthetic(128, 1, Split::Train), synthetic(64, 1, Split::Test));
        let mut cfg = quick_cfg(Pipeline::Qavat);
        cfg.variability = VariabilityConfig::none(VarianceModel::WeightProportional);
        let a = train(&net, &tr, &te, &cfg, None, Exec::Serial, &mut |_| {}).unwrap();
        cfg.pipeline = Pipeline::Qat;
        let b = train(&net, &tr, &te, &cfg, None, Exec::Serial, &mut |_| {}).unwrap();
        assert_eq!(a.checkpoint.params, b.checkpoint.params);
    }

    #[test]
    fn runs_are_reproducible_across_exec_modes() {
        let net = build_synthetic();
        let (tr, te) = (synthetic(96, 2, Split::Train), synthetic(32, 2, Split::Test));
        let mut cfg = quick_cfg(Pipeline::Qavat);
        cfg.n_samples = 3;
        cfg.variability = VariabilityConfig::new(VarianceModel::LayerFixed, 0.3, 0.1).unwrap();
        let a = train(&net, &tr, &te, &cfg, None, Exec::Serial, &mut |_| {}).unwrap();
        let b = train(&net, &tr, &te, &cfg, None, Exec::Parallel, &mut |_| {}).unwrap();
        assert_eq!(a.checkpoint.fingerprint().unwrap(), b.checkpoint.fingerprint().unwrap());
    }

    #[test]
    fn accumulated_gradient_is_sum_of_single_sample_gradients() {
        let net = build_synthetic();
        let params = Params::<f64>::init(&net, 3).unwrap();
        let data = synthetic(16, 4, Split::Train);
        let idx: Vec<usize> = (0..16).collect();
        let (x, labels) = data.batch::<f64>(&idx);
        let quant = quant_state(&net, &params, std::slice::from_ref(&x)).unwrap();
        let var = VariabilityConfig::new(VarianceModel::WeightProportional, 0.4, 0.2).unwrap();
        let chips: Vec<_> = (0..4).map(|i| sample_chip(&var, 9, ChipDomain::Training, i)).collect();
        let (loss, acc) = accumulate_gradients(
            &net,
            &params,
            &quant,
            &x,
            &labels,
            Pipeline::Qavat,
            &chips,
            SteOptions::default(),
            Exec::Parallel,
        )
        .unwrap();
        let mut sum_loss = 0.0;
        let mut sum: Vec<Tensor<f64>> = acc.iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect();
        for c in &chips {
            let (l, g) =
                sample_gradient(&net, &params, &quant, &x, &labels, Mode::QuantPerturbed(c), SteOptions::default())
                    .unwrap();
            sum_loss += l;
            for (s, gi) in sum.iter_mut().zip(&g) {
                s.add_assign(gi).unwrap();
            }
        }
        assert!((loss - sum_loss).abs() <= 1e-10 * sum_loss.abs());
        for (a, s) in acc.iter().zip(&sum) {
            for (p, q) in a.data().iter().zip(s.data()) {
                assert!((p - q).abs() <= 1e-10 * p.abs().max(q.abs()).max(1e-300), "{p} vs {q}");
            }
        }
    }

    #[test]
    fn one_layer_gradient_carries_one_plus_eps() {
        // logits = x W~^T + b with W~ = W_D (1 + eps); dL/dW = (1 + eps) * dL/dW~.
        let net = NetworkSpec {
            name: "one".into(),
            input_shape: [1, 1, 3],
            classes: 2,
            layers: vec![
                LayerSpec { kind: LayerKind::Flatten, weight_bits: None, act_bits: None, trainable: false },
                LayerSpec {
                    kind: LayerKind::Linear { d_in: 3, d_out: 2 },
                    weight_bits: Some(4),
                    act_bits: None,
                    trainable: true,
                },
            ],
        };
        let params = Params {
            weight: vec![Tensor::new([2, 3], vec![0.3, -0.2, 0.5, 0.1, 0.4, -0.6]).unwrap()],
            bias: vec![Tensor::new([2], vec![0.05, -0.05]).unwrap()],
        };
        let mut quant = QuantState::empty(&net);
        let qc = QuantConfig::new(4, 0.1, QuantTarget::Weight).unwrap();
        quant.weight[0] = Some(qc);
        let x = Tensor::new([2, 1, 1, 3], vec![1.0, 2.0, -1.0, 0.5, -0.5, 1.5]).unwrap();
        let labels = [1, 0];
        let var = VariabilityConfig::new(VarianceModel::WeightProportional, 0.3, 0.1).unwrap();
        let chip = sample_chip(&var, 11, ChipDomain::Training, 0);
        let eps = chip.eps(crate::variability::CellGroup::Weights(0), 6);
        let (_, g) =
            sample_gradient(&net, &params, &quant, &x, &labels, Mode::QuantPerturbed(&chip), SteOptions::default())
                .unwrap();

        let wd: Vec<f64> = params.weight[0].data().iter().map(|&w| qc.dequant(qc.code(w))).collect();
        let wt: Vec<f64> = wd.iter().zip(&eps).map(|(w, e)| w * (1.0 + e)).collect();
        let xs = x.data();
        let mut expect = [0.0; 6];
        for s in 0..2 {
            let z: Vec<f64> = (0..2)
                .map(|o| (0..3).map(|j| xs[s * 3 + j] * wt[o * 3 + j]).sum::<f64>() + params.bias[0].data()[o])
                .collect();
            let m = z[0].max(z[1]);
            let den: f64 = z.iter().map(|v| (v - m).exp()).sum();
            for o in 0..2 {
                let dz = ((z[o] - m).exp() / den - f64::from(u8::from(o == labels[s]))) / 2.0;
                for j in 0..3 {
                    expect[o * 3 + j] += dz * xs[s * 3 + j] * (1.0 + eps[o * 3 + j]);
                }
            }
        }
        for (a, e) in g[0].data().iter().zip(expect) {
            assert!((a - e).abs() < 1e-12, "{a} vs {e}");
        }
    }

    #[test]
    fn ptq_requires_calibration_data() {
        let net = build_synthetic();
        let ckpt = Checkpoint {
            network: net.clone(),
            params: Params::init(&net, 0).unwrap(),
            quant: QuantState::empty(&net),
            stats: LayerStats::default(),
            provenance: Provenance::default(),
        };
        assert!(ptq(&ckpt, Some(4), Some(4), &[]).is_err());
    }
}
