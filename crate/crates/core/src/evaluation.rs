//! Monte Carlo deployment over a population of sampled chips.
//!
//! Chip `c` of a population is a pure function of `(seed, c)`, so chips are
//! evaluated independently (in parallel when enabled) into preallocated slots
//! and the per-chip results do not depend on scheduling.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataio::{Checkpoint, Dataset};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::network::{argmax_rows, infer, ForwardOptions, Mode, ModeKind, NetworkSpec, Params, QuantState};
use crate::selftuning::{overhead, ArrayGeometry, Overhead, StConfig, StState, StType};
use crate::tensor::{Precision, Real, Tensor};
use crate::variability::{self, sample_chip, ChipDomain, VariabilityConfig, VarianceModel};

pub const FULL_CHIPS: usize = 2000;
pub const QUICK_CHIPS: usize = 200;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub n_chips: usize,
    pub variability: VariabilityConfig,
    pub st: StConfig,
    pub batch_size: usize,
    pub seed: u64,
    /// Evaluate on this many evenly spaced test samples instead of all.
    pub test_subset: Option<usize>,
    pub precision: Precision,
    pub array: ArrayGeometry,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_chips: FULL_CHIPS,
            variability: VariabilityConfig::default(),
            st: StConfig::default(),
            batch_size: 500,
            seed: 0,
            test_subset: None,
            precision: Precision::F32,
            array: ArrayGeometry::default(),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_chips == 0 {
            return Err(Error::Config("n_chips must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        self.variability.validate()?;
        self.st.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Hash of the checkpoint fingerprint, the evaluation config and the mode.
    pub fingerprint: String,
    pub checkpoint: String,
    pub config: EvalConfig,
    pub mode: ModeKind,
    pub test_samples: usize,
    /// Accuracy in percent per chip; `None` for non-recoverable chips.
    pub per_chip: Vec<Option<f64>>,
    /// Statistics over recoverable chips.
    pub mean: f64,
    pub std: f64,
    pub std_err: f64,
    pub min: f64,
    pub max: f64,
    pub non_recoverable: usize,
    /// Mean with non-recoverable chips counted as 0%.
    pub mean_with_failures: f64,
    pub overhead: Option<Overhead>,
    /// Hash of the per-chip results.
    pub results_digest: String,
    #[serde(skip)]
    pub wall_time_s: f64,
}

impl EvalReport {
    /// `chip,accuracy` rows; non-recoverable chips have an empty accuracy.
    pub fn per_chip_csv(&self) -> String {
        let mut s = format!("# fingerprint={}\nchip,accuracy\n", self.fingerprint);
        for (i, a) in self.per_chip.iter().enumerate() {
            match a {
                Some(a) => s.push_str(&format!("{i},{a}\n")),
                None => s.push_str(&format!("{i},\n")),
            }
        }
        s
    }
}

/// Fingerprint of an evaluation before it runs.
pub fn config_fingerprint(checkpoint_fp: &str, cfg: &EvalConfig, mode: ModeKind) -> Result<String> {
    let mut h = Sha256::new();
    h.update(checkpoint_fp.as_bytes());
    h.update(serde_json::to_vec(cfg)?);
    h.update(serde_json::to_vec(&mode)?);
    Ok(hex::encode(h.finalize()))
}

/// Deployment view of a checkpoint: quantized checkpoints are perturbed after
/// quantization, full-precision ones directly.
pub fn deployment_mode(quant: &QuantState) -> ModeKind {
    if quant.weight.iter().any(Option::is_some) {
        ModeKind::QuantPerturbed
    } else {
        ModeKind::PerturbedOnly
    }
}

/// `(correct, total)` over `data`.
pub fn accuracy<T: Real>(
    net: &NetworkSpec,
    params: &Params<T>,
    quant: &QuantState,
    data: &Dataset,
    opts: &ForwardOptions<'_>,
    batch: usize,
) -> Result<(usize, usize)> {
    let mut correct = 0;
    for start in (0..data.len()).step_by(batch.max(1)) {
        let idx: Vec<usize> = (start..(start + batch).min(data.len())).collect();
        let (x, labels) = data.batch::<T>(&idx);
        correct += count_correct(net, params, quant, &x, &labels, opts)?;
    }
    Ok((correct, data.len()))
}

fn count_correct<T: Real>(
    net: &NetworkSpec,
    params: &Params<T>,
    quant: &QuantState,
    x: &Tensor<T>,
    labels: &[usize],
    opts: &ForwardOptions<'_>,
) -> Result<usize> {
    let logits = infer(net, params, quant, x, opts)?;
    Ok(argmax_rows(&logits).iter().zip(labels).filter(|(p, l)| p == l).count())
}

struct Stats {
    mean: f64,
    std: f64,
    min: f64,
    max: f64,
}

fn stats(xs: &[f64]) -> Stats {
    if xs.is_empty() {
        return Stats { mean: f64::NAN, std: f64::NAN, min: f64::NAN, max: f64::NAN };
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 { xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    Stats {
        mean,
        std: var.sqrt(),
        min: xs.iter().copied().fold(f64::INFINITY, f64::min),
        max: xs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    }
}

fn per_chip_accuracy<T: Real>(
    ckpt: &Checkpoint,
    params: &Params<T>,
    batches: &[(Tensor<T>, Vec<usize>)],
    total: usize,
    cfg: &EvalConfig,
    mode: ModeKind,
    c: usize,
) -> Result<Option<f64>> {
    let chip = sample_chip(&cfg.variability, cfg.seed, ChipDomain::Deployment, c as u64);
    let st = if cfg.st.st_type == StType::None {
        None
    } else {
        match StState::deploy(&chip, &cfg.st) {
            Ok(s) => Some(s),
            Err(Error::NonRecoverable(_)) => return Ok(None),
            Err(e) => return Err(e),
        }
    };
    let opts = ForwardOptions::new(Mode::from_kind(mode, Some(&chip))?).with_st(st.as_ref());
    let mut correct = 0;
    for (x, labels) in batches {
        match count_correct(&ckpt.network, params, &ckpt.quant, x, labels, &opts) {
            Ok(k) => correct += k,
            Err(Error::NonRecoverable(_)) => return Ok(None),
            Err(e) => return Err(e),
        }
    }
    Ok(Some(100.0 * correct as f64 / total as f64))
}

/// Mean accuracy over `cfg.n_chips` deployment chips.
pub fn evaluate(ckpt: &Checkpoint, data: &Dataset, cfg: &EvalConfig, exec: Exec) -> Result<EvalReport> {
    match cfg.precision {
        Precision::F32 => evaluate_impl::<f32>(ckpt, data, cfg, exec),
        Precision::F64 => evaluate_impl::<f64>(ckpt, data, cfg, exec),
    }
}

fn evaluate_impl<T: Real>(ckpt: &Checkpoint, data: &Dataset, cfg: &EvalConfig, exec: Exec) -> Result<EvalReport> {
    let t0 = Instant::now();
    cfg.validate()?;
    if data.shape != ckpt.network.input_shape {
        return Err(Error::Config(format!(
            "dataset images {:?} do not fit network input {:?}",
            data.shape, ckpt.network.input_shape
        )));
    }
    let data = match cfg.test_subset {
        Some(n) => data.evenly_spaced(n),
        None => data.clone(),
    };
    let mode = deployment_mode(&ckpt.quant);
    let ckpt_fp = ckpt.fingerprint()?;
    let params: Params<T> = ckpt.params.cast();
    let batches: Vec<(Tensor<T>, Vec<usize>)> = (0..data.len())
        .step_by(cfg.batch_size)
        .map(|s| {
            let idx: Vec<usize> = (s..(s + cfg.batch_size).min(data.len())).collect();
            data.batch(&idx)
        })
        .collect();

    let per_chip = exec
        .map(cfg.n_chips, |c| per_chip_accuracy(ckpt, &params, &batches, data.len(), cfg, mode, c))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;

    let ok: Vec<f64> = per_chip.iter().flatten().copied().collect();
    let s = stats(&ok);
    let mut digest = Sha256::new();
    for a in &per_chip {
        digest.update(a.map_or(u64::MAX, f64::to_bits).to_le_bytes());
    }
    let overhead = match cfg.st.st_type {
        StType::None => None,
        _ => Some(overhead(&cfg.st, cfg.array, &ckpt.network)?),
    };
    Ok(EvalReport {
        fingerprint: config_fingerprint(&ckpt_fp, cfg, mode)?,
        checkpoint: ckpt_fp,
        config: cfg.clone(),
        mode,
        test_samples: data.len(),
        mean: s.mean,
        std: s.std,
        std_err: s.std / (ok.len().max(1) as f64).sqrt(),
        min: s.min,
        max: s.max,
        non_recoverable: per_chip.len() - ok.len(),
        mean_with_failures: ok.iter().sum::<f64>() / per_chip.len() as f64,
        per_chip,
        overhead,
        results_digest: hex::encode(digest.finalize()),
        wall_time_s: t0.elapsed().as_secs_f64(),
    })
}

/// One cell of a scenario table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub column: String,
    pub sigma: f64,
    pub mean: f64,
    pub std_err: f64,
    pub n_chips: usize,
    pub non_recoverable: usize,
    pub fingerprint: String,
}

impl CellSummary {
    fn from_report(column: &str, sigma: f64, r: &EvalReport) -> Self {
        Self {
            column: column.into(),
            sigma,
            mean: r.mean,
            std_err: r.std_err,
            n_chips: r.per_chip.len(),
            non_recoverable: r.non_recoverable,
            fingerprint: r.fingerprint.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioTable {
    pub scenario: u8,
    pub columns: Vec<String>,
    /// `(sigma, cells in column order)`.
    pub rows: Vec<(f64, Vec<CellSummary>)>,
}

impl ScenarioTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("sigma");
        for c in &self.columns {
            s.push_str(&format!(",{c}_mean,{c}_se,{c}_nonrec"));
        }
        s.push('\n');
        for (sigma, cells) in &self.rows {
            s.push_str(&format!("{sigma}"));
            for c in cells {
                s.push_str(&format!(",{:.4},{:.4},{}", c.mean, c.std_err, c.non_recoverable));
            }
            s.push('\n');
        }
        s
    }

    pub fn cell(&self, row: usize, column: &str) -> Option<&CellSummary> {
        self.rows.get(row)?.1.iter().find(|c| c.column == column)
    }
}

/// Per-cell result files, so interrupted sweeps resume where they stopped.
#[derive(Debug, Clone)]
pub struct CellStore {
    dir: PathBuf,
}

impl CellStore {
    pub fn new(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(Self { dir: dir.to_path_buf() })
    }

    fn path(&self, fingerprint: &str) -> PathBuf {
        self.dir.join(format!("{fingerprint}.json"))
    }

    pub fn get(&self, fingerprint: &str) -> Option<CellSummary> {
        let b = std::fs::read(self.path(fingerprint)).ok()?;
        serde_json::from_slice::<CellSummary>(&b).ok().filter(|c| c.fingerprint == fingerprint)
    }

    pub fn put(&self, cell: &CellSummary) -> Result<()> {
        let tmp = self.dir.join(format!("{}.tmp", cell.fingerprint));
        std::fs::write(&tmp, serde_json::to_vec_pretty(cell)?)?;
        std::fs::rename(tmp, self.path(&cell.fingerprint))?;
        Ok(())
    }
}

/// Evaluates one cell, reusing a stored result with the same fingerprint.
pub fn eval_cell(
    ckpt: &Checkpoint,
    data: &Dataset,
    cfg: &EvalConfig,
    column: &str,
    sigma: f64,
    store: Option<&CellStore>,
    exec: Exec,
) -> Result<CellSummary> {
    let fp = config_fingerprint(&ckpt.fingerprint()?, cfg, deployment_mode(&ckpt.quant))?;
    if let Some(hit) = store.and_then(|s| s.get(&fp)) {
        return Ok(CellSummary { column: column.into(), ..hit });
    }
    let cell = CellSummary::from_report(column, sigma, &evaluate(ckpt, data, cfg, exec)?);
    if let Some(s) = store {
        s.put(&cell)?;
    }
    Ok(cell)
}

/// A named model, either one checkpoint shared by every sigma or one per sigma.
pub struct Arm<'a> {
    pub name: String,
    pub checkpoints: Vec<&'a Checkpoint>,
}

impl Arm<'_> {
    fn at(&self, i: usize) -> Result<&Checkpoint> {
        match self.checkpoints.len() {
            1 => Ok(self.checkpoints[0]),
            _ => self
                .checkpoints
                .get(i)
                .copied()
                .ok_or_else(|| Error::Config(format!("arm {} has no checkpoint for sigma #{i}", self.name))),
        }
    }
}

/// Within-chip variation only: one column per arm, one row per `sigma_w`.
pub fn run_scenario1(
    arms: &[Arm<'_>],
    data: &Dataset,
    sigmas: &[f64],
    model: VarianceModel,
    base: &EvalConfig,
    store: Option<&CellStore>,
    exec: Exec,
) -> Result<ScenarioTable> {
    let mut rows = Vec::with_capacity(sigmas.len());
    for (i, &sigma) in sigmas.iter().enumerate() {
        let cfg = EvalConfig {
            variability: VariabilityConfig::within_chip(model, sigma),
            st: StConfig { st_type: StType::None, ..base.st },
            ..base.clone()
        };
        let cells = arms
            .iter()
            .map(|a| eval_cell(a.at(i)?, data, &cfg, &a.name, sigma, store, exec))
            .collect::<Result<Vec<_>>>()?;
        rows.push((sigma, cells));
    }
    Ok(ScenarioTable { scenario: 1, columns: arms.iter().map(|a| a.name.clone()).collect(), rows })
}

pub const COL_WITHIN: &str = "within_only";
pub const COL_QAVAT: &str = "qavat";
pub const COL_ST: &str = "qavat_st";
pub const COL_WRONG_ST: &str = "qavat_wrong_st";

/// Mixed-type variation (`sigma_w = sigma_b = sigma_tot / sqrt 2`): the model
/// under within-chip variation of `sigma_tot`, then under mixed variation
/// without self-tuning, with the matching correction and (optionally) with the
/// correction meant for the other variance model.
#[allow(clippy::too_many_arguments)]
pub fn run_scenario2(
    ckpt: &Checkpoint,
    data: &Dataset,
    sigma_tots: &[f64],
    model: VarianceModel,
    wrong_st: bool,
    base: &EvalConfig,
    store: Option<&CellStore>,
    exec: Exec,
) -> Result<ScenarioTable> {
    let mut columns = vec![COL_WITHIN, COL_QAVAT, COL_ST];
    if wrong_st {
        columns.push(COL_WRONG_ST);
    }
    let mut rows = Vec::with_capacity(sigma_tots.len());
    for &s in sigma_tots {
        let mixed = VariabilityConfig::mixed(model, s);
        let st = |t| StConfig { st_type: t, ..base.st };
        let cfgs = [
            (COL_WITHIN, VariabilityConfig::within_chip(model, s), st(StType::None)),
            (COL_QAVAT, mixed, st(StType::None)),
            (COL_ST, mixed, st(StType::matching(model))),
            (COL_WRONG_ST, mixed, st(StType::wrong_for(model))),
        ];
        let cells = cfgs[..columns.len()]
            .iter()
            .map(|(col, v, st)| {
                let cfg = EvalConfig { variability: *v, st: *st, ..base.clone() };
                eval_cell(ckpt, data, &cfg, col, s, store, exec)
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push((s, cells));
    }
    Ok(ScenarioTable { scenario: 2, columns: columns.into_iter().map(String::from).collect(), rows })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasRow {
    pub estimator: String,
    pub mean: f64,
    pub std_err: f64,
    /// `mean - true gradient`.
    pub bias: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasReport {
    pub w: f64,
    pub t: f64,
    pub sigma: f64,
    pub n: usize,
    pub seed: u64,
    pub rows: Vec<BiasRow>,
}

impl BiasReport {
    pub fn row(&self, estimator: &str) -> Option<&BiasRow> {
        self.rows.iter().find(|r| r.estimator == estimator)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("estimator,mean,std_err,bias\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{},{}\n", r.estimator, r.mean, r.std_err, r.bias));
        }
        s
    }
}

/// Gradient of `E[(w (1 + eps) - t)^2]` estimated from `n` draws with and
/// without reparameterization, against the closed form `2(w - t) + 2 sigma^2 w`.
pub fn bias_demo(w: f64, t: f64, sigma: f64, n: usize, seed: u64) -> Result<BiasReport> {
    if n < 2 {
        return Err(Error::Config("bias demo needs at least 2 draws".into()));
    }
    let truth = 2.0 * (w - t) + 2.0 * sigma * sigma * w;
    let mut rows = Vec::with_capacity(3);
    for (name, rep) in [("naive", false), ("reparameterized", true)] {
        let s = variability::mean_and_stderr(&variability::quadratic_gradient_draws(w, t, sigma, n, seed, rep)?);
        rows.push(BiasRow { estimator: name.into(), mean: s.mean, std_err: s.std_err, bias: s.mean - truth });
    }
    rows.push(BiasRow { estimator: "analytic".into(), mean: truth, std_err: 0.0, bias: 0.0 });
    Ok(BiasReport { w, t, sigma, n, seed, rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stats_of_single_chip() {
        let s = stats(&[87.5]);
        assert_eq!((s.mean, s.std, s.min, s.max), (87.5, 0.0, 87.5, 87.5));
    }

    #[test]
    fn bias_demo_zero_sigma_is_unbiased() {
        let r = bias_demo(1.0, 0.0, 0.0, 1000, 1).unwrap();
        for name in ["naive", "reparameterized"] {
            let row = r.row(name).unwrap();
            assert_eq!(row.bias, 0.0);
            assert_eq!(row.std_err, 0.0);
        }
    }

    #[test]
    fn mixed_split_in_scenario2_configs() {
        let m = VariabilityConfig::mixed(VarianceModel::LayerFixed, 0.5);
        assert!((m.sigma_w.powi(2) + m.sigma_b.powi(2) - 0.25).abs() < 1e-15);
    }
}
