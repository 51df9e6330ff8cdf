//! Within-chip / between-chip weight variation.
//!
//! A chip realization is described in reparameterized space: one shared
//! draw `eps_b ~ N(0, sigma_b^2)` plus an iid `eps_w,i ~ N(0, sigma_w^2)` per
//! cell, with `eps_i = eps_b + eps_w,i`. The weight deviation is then
//! `f(eps, w) = eps * w` (weight-proportional) or `f(eps, w) = eps * w_max`
//! (layer-fixed), so gradients never have to flow through the sampler.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{CounterRng, Stream};
use crate::tensor::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceModel {
    /// `sigma(w) = sigma * |w|`, reparameterized as `eps * w`.
    WeightProportional,
    /// `sigma(w) = sigma * |w_max^l|`, reparameterized as `eps * w_max^l`.
    LayerFixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VariabilityConfig {
    pub model: VarianceModel,
    pub sigma_w: f64,
    pub sigma_b: f64,
}

impl Default for VariabilityConfig {
    fn default() -> Self {
        Self::none(VarianceModel::LayerFixed)
    }
}

impl VariabilityConfig {
    pub fn new(model: VarianceModel, sigma_w: f64, sigma_b: f64) -> Result<Self> {
        let cfg = Self { model, sigma_w, sigma_b };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn none(model: VarianceModel) -> Self {
        Self { model, sigma_w: 0.0, sigma_b: 0.0 }
    }

    pub fn within_chip(model: VarianceModel, sigma_w: f64) -> Self {
        Self { model, sigma_w, sigma_b: 0.0 }
    }

    /// Mixed-type variation: equal within- and between-chip standard
    /// deviations with `sigma_w^2 + sigma_b^2 = sigma_tot^2`.
    pub fn mixed(model: VarianceModel, sigma_tot: f64) -> Self {
        let s = sigma_tot / std::f64::consts::SQRT_2;
        Self { model, sigma_w: s, sigma_b: s }
    }

    pub fn sigma_tot(&self) -> f64 {
        self.sigma_w.hypot(self.sigma_b)
    }

    pub fn is_zero(&self) -> bool {
        self.sigma_w == 0.0 && self.sigma_b == 0.0
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("sigma_w", self.sigma_w), ("sigma_b", self.sigma_b)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Identifies the cells a set of draws belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CellGroup {
    /// Weight tensor of the `n`-th weight-bearing layer.
    Weights(usize),
    /// Global tuning module column.
    Gtm,
    /// One layer tuning module column.
    Ltm { layer: usize, column: usize },
    /// Slot reserved for the between-chip draw.
    Between,
}

impl CellGroup {
    fn id(self) -> u32 {
        match self {
            CellGroup::Between => 0,
            CellGroup::Gtm => 1,
            CellGroup::Weights(l) => 0x100 + l as u32,
            CellGroup::Ltm { layer, column } => 0x10_0000 + ((layer as u32) << 10) + column as u32,
        }
    }
}

/// Domain tags so training-time and deployment-time chips never share draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChipDomain {
    Training,
    Validation,
    Deployment,
}

impl ChipDomain {
    fn tag(self) -> u64 {
        match self {
            ChipDomain::Training => 0x7452_4149_4e00,
            ChipDomain::Validation => 0x5641_4c49_4400,
            ChipDomain::Deployment => 0x4445_504c_4f59,
        }
    }
}

/// One sampled hardware realization. Cell draws are generated on demand from
/// `(seed, domain, index, cell group, element)` and are bit-reproducible.
#[derive(Debug, Clone, PartialEq)]
pub struct ChipInstance {
    pub seed: u64,
    pub domain: ChipDomain,
    pub index: u64,
    pub config: VariabilityConfig,
    pub eps_b: f64,
    rng: CounterRng,
}

/// Samples chip `index` of the population defined by `seed` and `domain`.
pub fn sample_chip(cfg: &VariabilityConfig, seed: u64, domain: ChipDomain, index: u64) -> ChipInstance {
    let rng = CounterRng::new(seed, domain.tag());
    let eps_b = if cfg.sigma_b > 0.0 {
        cfg.sigma_b * rng.normal(Stream { major: index, minor: CellGroup::Between.id() }, 0)
    } else {
        0.0
    };
    ChipInstance { seed, domain, index, config: *cfg, eps_b, rng }
}

impl ChipInstance {
    /// Within-chip components `eps_w,i` for `len` cells of `group`.
    pub fn within(&self, group: CellGroup, len: usize) -> Vec<f64> {
        let mut out = vec![0.0; len];
        if self.config.sigma_w > 0.0 {
            self.rng.fill_normal(Stream { major: self.index, minor: group.id() }, &mut out);
            for v in &mut out {
                *v *= self.config.sigma_w;
            }
        }
        out
    }

    /// Total reparameterized variation `eps_i = eps_b + eps_w,i`.
    pub fn eps(&self, group: CellGroup, len: usize) -> Vec<f64> {
        let mut e = self.within(group, len);
        for v in &mut e {
            *v += self.eps_b;
        }
        e
    }

    pub fn model(&self) -> VarianceModel {
        self.config.model
    }
}

/// Largest dequantized weight magnitude per weight layer.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LayerStats {
    pub w_max: Vec<f64>,
}

pub fn w_max<T: Real>(w: &[T]) -> f64 {
    w.iter().fold(0.0f64, |m, v| m.max(v.to_f64().abs()))
}

/// Applies `x~ = x + f(eps, x)` elementwise.
pub fn perturb<T: Real>(x: &[T], eps: &[f64], model: VarianceModel, w_max: f64) -> Vec<T> {
    debug_assert_eq!(x.len(), eps.len());
    match model {
        VarianceModel::WeightProportional => {
            x.iter().zip(eps).map(|(&w, &e)| T::from_f64(w.to_f64() * (1.0 + e))).collect()
        }
        VarianceModel::LayerFixed => x.iter().zip(eps).map(|(&w, &e)| T::from_f64(w.to_f64() + e * w_max)).collect(),
    }
}

/// `1 + d f(eps, x) / d x` with `w_max` held constant.
pub fn reparam_grad_factor(model: VarianceModel, eps: f64) -> f64 {
    match model {
        VarianceModel::WeightProportional => 1.0 + eps,
        VarianceModel::LayerFixed => 1.0,
    }
}

/// Result of the quadratic estimator-bias experiment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimatorStats {
    pub mean: f64,
    pub std_err: f64,
}

/// Per-draw gradient estimates for `L(w, eps) = (w (1 + eps) - t)^2`,
/// `eps ~ N(0, sigma^2)`, computed through the autodiff engine.
///
/// `reparameterized = true` differentiates through `w (1 + eps)`; otherwise the
/// deviation `delta = eps * w` is drawn first and added to `w` as a constant,
/// which ignores the dependence of the deviation's distribution on `w`.
pub fn quadratic_gradient_draws(
    w: f64,
    t: f64,
    sigma: f64,
    n: usize,
    seed: u64,
    reparameterized: bool,
) -> Result<Vec<f64>> {
    use crate::autodiff::Graph;
    use crate::tensor::Tensor;

    let rng = CounterRng::new(seed, 0xB1A5);
    let mut eps = vec![0.0; n];
    rng.fill_normal(Stream { major: 0, minor: 0 }, &mut eps);
    for e in &mut eps {
        *e *= sigma;
    }
    // One leaf element per draw so that each gradient entry is that draw's
    // single-sample estimate.
    let mut g = Graph::<f64>::new();
    let wl = g.leaf(Tensor::full([n], w), true);
    let perturbed = if reparameterized {
        let factor = g.constant(Tensor::new([n], eps.iter().map(|e| 1.0 + e).collect())?);
        g.mul(wl, factor)?
    } else {
        let delta = g.constant(Tensor::new([n], eps.iter().map(|e| e * w).collect())?);
        g.add(wl, delta)?
    };
    let resid = g.add_scalar(perturbed, -t)?;
    let sq = g.square(resid)?;
    let loss = g.sum(sq)?;
    g.backward(loss)?;
    Ok(g.take_grad(wl).expect("trainable leaf").into_data())
}

pub fn mean_and_stderr(xs: &[f64]) -> EstimatorStats {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    EstimatorStats { mean, std_err: (var / n).sqrt() }
}
