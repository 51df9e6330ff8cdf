//! Self-tuning: on-chip measurement of the between-chip deviation and the
//! digital correction applied to every MVM output.
//!
//! The global tuning module (GTM) is one column of `n_gtm` cells holding `w_G`
//! with a fixed input `x_G`. Its output divided by the stored variation-free
//! value `y_0 = n_gtm w_G x_G` estimates `1 + eps_B`. Under the
//! weight-proportional model every MVM output is then divided by
//! `1 + eps_B_hat`. Under the layer-fixed model the deviation is additive,
//! `eps_B W_max sum_j x_j`, so each layer carries layer tuning module (LTM)
//! columns of uniform weight `w_L` that read out `(w_L + eps_B W_max) sum_j x_j`
//! on the live input, and the correction subtracts
//! `eps_B_hat W_max / (w_L + eps_B_hat W_max) * y_LTM` from every component.

use serde::{Deserialize, Serialize};

use crate::autodiff::{CustomGrad, Graph, NodeId};
use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::network::NetworkSpec;
use crate::tensor::{Real, Tensor};
use crate::variability::{self, CellGroup, ChipInstance, VarianceModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StType {
    #[default]
    None,
    /// Divide outputs by the GTM estimate; matches the weight-proportional model.
    GtmOnly,
    /// GTM plus per-layer LTM subtraction; matches the layer-fixed model.
    GtmPlusLtm,
}

impl StType {
    /// The correction that undoes `model`'s between-chip deviation.
    pub fn matching(model: VarianceModel) -> Self {
        match model {
            VarianceModel::WeightProportional => StType::GtmOnly,
            VarianceModel::LayerFixed => StType::GtmPlusLtm,
        }
    }

    /// The correction designed for the other variance model.
    pub fn wrong_for(model: VarianceModel) -> Self {
        match model {
            VarianceModel::WeightProportional => StType::GtmPlusLtm,
            VarianceModel::LayerFixed => StType::GtmOnly,
        }
    }
}

pub const GUARD: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StConfig {
    pub st_type: StType,
    pub n_gtm: usize,
    pub w_g: f64,
    pub x_g: f64,
    pub ltm_columns: usize,
    /// LTM cell weight; `None` uses each layer's `W_max`.
    pub w_l: Option<f64>,
}

impl Default for StConfig {
    fn default() -> Self {
        Self { st_type: StType::None, n_gtm: 1000, w_g: 1.0, x_g: 1.0, ltm_columns: 1, w_l: None }
    }
}

impl StConfig {
    pub fn with_type(st_type: StType) -> Self {
        Self { st_type, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_gtm == 0 {
            return Err(Error::Config("n_gtm must be >= 1".into()));
        }
        if self.st_type == StType::GtmPlusLtm && self.ltm_columns == 0 {
            return Err(Error::Config("ltm_columns must be >= 1 with gtm_plus_ltm".into()));
        }
        for (name, v) in [("w_g", Some(self.w_g)), ("x_g", Some(self.x_g)), ("w_l", self.w_l)] {
            if let Some(v) = v {
                if !(v.is_finite() && v > 0.0) {
                    return Err(Error::Config(format!("{name} must be finite and > 0, got {v}")));
                }
            }
        }
        Ok(())
    }
}

/// `eps_B_hat = y_GTM / y_0 - 1`.
pub fn gtm_measure(chip: &ChipInstance, cfg: &StConfig) -> f64 {
    gtm_readout(chip, cfg).0
}

fn gtm_readout(chip: &ChipInstance, cfg: &StConfig) -> (f64, f64, f64) {
    let eps = chip.eps(CellGroup::Gtm, cfg.n_gtm);
    let y_gtm: f64 = eps.iter().map(|e| (1.0 + e) * cfg.w_g * cfg.x_g).sum();
    let y0 = cfg.n_gtm as f64 * cfg.w_g * cfg.x_g;
    (y_gtm / y0 - 1.0, y_gtm, y0)
}

/// Per-chip self-tuning state, fixed at deployment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StState {
    pub config: StConfig,
    pub eps_hat: f64,
    pub y_gtm: f64,
    pub y0: f64,
}

impl StState {
    /// Reads the GTM once. Fails for chips the weight-proportional correction
    /// cannot recover.
    pub fn deploy(chip: &ChipInstance, cfg: &StConfig) -> Result<Self> {
        cfg.validate()?;
        let (eps_hat, y_gtm, y0) = gtm_readout(chip, cfg);
        if cfg.st_type == StType::GtmOnly && (1.0 + eps_hat).abs() <= GUARD {
            return Err(Error::NonRecoverable(format!("|1 + eps_hat| = {:.3e}", (1.0 + eps_hat).abs())));
        }
        Ok(Self { config: *cfg, eps_hat, y_gtm, y0 })
    }
}

/// `y / (1 + eps_hat)`.
pub fn correct_weight_proportional<T: Real>(y: &mut [T], eps_hat: f64) -> Result<()> {
    let d = 1.0 + eps_hat;
    if d.abs() <= GUARD {
        return Err(Error::NonRecoverable(format!("|1 + eps_hat| = {:.3e}", d.abs())));
    }
    for v in y {
        *v = T::from_f64(v.to_f64() / d);
    }
    Ok(())
}

/// Subtracts `eps_hat W_max / (w_L + eps_hat W_max) * y_LTM` from every
/// component. `y` is `(n, features, positions)` flattened; `y_ltm` holds one
/// reading per `(n, position)`.
pub fn correct_layer_fixed<T: Real>(
    y: &mut [T],
    positions: usize,
    eps_hat: f64,
    w_max: f64,
    y_ltm: &[f64],
    w_l: f64,
) -> Result<()> {
    let den = w_l + eps_hat * w_max;
    if den.abs() <= GUARD * w_l.abs() {
        return Err(Error::NonRecoverable(format!("|w_L + eps_hat W_max| = {:.3e}", den.abs())));
    }
    let r = eps_hat * w_max / den;
    if r == 0.0 {
        return Ok(());
    }
    let n = y_ltm.len() / positions;
    let features = y.len() / (n * positions);
    for (i, v) in y.iter_mut().enumerate() {
        let s = i / (features * positions);
        let p = i % positions;
        *v = T::from_f64(v.to_f64() - r * y_ltm[s * positions + p]);
    }
    Ok(())
}

/// Shape of the MVM an LTM column sits beside.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MvmGeom {
    Linear { d_in: usize },
    Conv { geom: ConvGeom, in_hw: (usize, usize) },
}

impl MvmGeom {
    fn fan_in(&self) -> usize {
        match self {
            MvmGeom::Linear { d_in } => *d_in,
            MvmGeom::Conv { geom, .. } => geom.patch_len(),
        }
    }
}

/// LTM reading for weight layer `layer`, averaged over the configured columns:
/// one value per sample (linear) or per sample and output position (conv).
/// Cells hold `w_L` perturbed by the chip under its variance model.
pub fn ltm_measure<T: Real>(
    x: &Tensor<T>,
    geom: MvmGeom,
    chip: &ChipInstance,
    cfg: &StConfig,
    layer: usize,
    w_max: f64,
) -> Result<Vec<f64>> {
    let m = cfg.ltm_columns.max(1);
    let fan_in = geom.fan_in();
    let w_l = cfg.w_l.unwrap_or(w_max);
    let mut cells = Vec::with_capacity(m * fan_in);
    for column in 0..m {
        let eps = chip.eps(CellGroup::Ltm { layer, column }, fan_in);
        cells.extend(variability::perturb(&vec![w_l; fan_in], &eps, chip.model(), w_max));
    }
    let n = x.shape()[0];
    let (out, positions) = match geom {
        MvmGeom::Linear { d_in } => {
            if x.len() != n * d_in {
                return Err(Error::Shape { op: "ltm_measure", lhs: x.shape().to_vec(), rhs: vec![d_in] });
            }
            let x64: Vec<f64> = x.data().iter().map(|v| v.to_f64()).collect();
            (kernels::linear_forward(&x64, &cells, n, d_in, m), 1)
        }
        MvmGeom::Conv { geom, in_hw } => {
            let (oh, ow) = geom.out_hw(in_hw.0, in_hw.1).ok_or(Error::Shape {
                op: "ltm_measure",
                lhs: x.shape().to_vec(),
                rhs: vec![geom.kernel],
            })?;
            let x64: Vec<f64> = x.data().iter().map(|v| v.to_f64()).collect();
            let cols = kernels::im2col(&x64, n, in_hw.0, in_hw.1, &geom);
            (kernels::conv_from_cols(&cols, &cells, n, m, fan_in, oh * ow), oh * ow)
        }
    };
    // out is (n, m, positions); average the m columns.
    let mut readings = vec![0.0; n * positions];
    for s in 0..n {
        for c in 0..m {
            for p in 0..positions {
                readings[s * positions + p] += out[(s * m + c) * positions + p];
            }
        }
    }
    for r in &mut readings {
        *r /= m as f64;
    }
    Ok(readings)
}

struct ScaleGrad {
    factor: f64,
}

impl<T: Real> CustomGrad<T> for ScaleGrad {
    fn name(&self) -> &'static str {
        "st_correction"
    }

    fn backward(&self, upstream: &Tensor<T>, _: &[&Tensor<T>]) -> Result<Vec<Option<Tensor<T>>>> {
        let f = T::from_f64(self.factor);
        Ok(vec![Some(upstream.map(|v| v * f))])
    }
}

/// Applies the configured correction to the MVM output node `y` computed from
/// input node `x` on weight layer `layer`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn correct_node<T: Real>(
    g: &mut Graph<T>,
    y: NodeId,
    x: NodeId,
    st: &StState,
    chip: &ChipInstance,
    layer: usize,
    geom: MvmGeom,
    w_max: f64,
) -> Result<NodeId> {
    let mut v = g.value(y).clone();
    let factor = match st.config.st_type {
        StType::None => return Ok(y),
        StType::GtmOnly => {
            correct_weight_proportional(v.data_mut(), st.eps_hat)?;
            1.0 / (1.0 + st.eps_hat)
        }
        StType::GtmPlusLtm => {
            let readings = ltm_measure(g.value(x), geom, chip, &st.config, layer, w_max)?;
            let positions = match geom {
                MvmGeom::Linear { .. } => 1,
                MvmGeom::Conv { .. } => v.shape()[2] * v.shape()[3],
            };
            let w_l = st.config.w_l.unwrap_or(w_max);
            correct_layer_fixed(v.data_mut(), positions, st.eps_hat, w_max, &readings, w_l)?;
            1.0
        }
    };
    g.custom(&[y], v, Box::new(ScaleGrad { factor }))
}

/// Hardware cost of the tuning modules.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Overhead {
    /// Extra columns per array over array columns.
    pub area_ratio: f64,
    /// Tuning-module multiply-accumulates per inference over those of the model.
    pub flop_ratio: f64,
    /// Columns occupied by the GTM (once per chip).
    pub gtm_columns: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArrayGeometry {
    pub rows: usize,
    pub cols: usize,
}

impl Default for ArrayGeometry {
    fn default() -> Self {
        Self { rows: 512, cols: 512 }
    }
}

/// Area and compute overhead. The GTM is read once per chip, so it adds no
/// per-inference operations; LTM columns add `columns * fan_in` MACs per
/// output position of every weight layer.
pub fn overhead(cfg: &StConfig, array: ArrayGeometry, net: &NetworkSpec) -> Result<Overhead> {
    let ltm = if cfg.st_type == StType::GtmPlusLtm { cfg.ltm_columns } else { 0 };
    let gtm_columns = if cfg.st_type == StType::None { 0 } else { cfg.n_gtm.div_ceil(array.rows.max(1)) };
    let mut base = 0usize;
    let mut extra = 0usize;
    for l in net.layer_shapes()? {
        if let Some((fan_in, outputs, positions)) = l.mvm {
            base += fan_in * outputs * positions;
            extra += fan_in * ltm * positions;
        }
    }
    Ok(Overhead {
        area_ratio: ltm as f64 / array.cols as f64,
        flop_ratio: if base == 0 { 0.0 } else { extra as f64 / base as f64 },
        gtm_columns,
    })
}
