//! Run configuration file (TOML).
//!
//! ```toml
//! schema_version = 1
//! output_dir = "runs/lenet"
//!
//! [model]
//! name = "lenet5"
//!
//! [data]
//! dataset = "mnist"
//! dir = "../data/mnist"
//!
//! [train]
//! pipeline = "qavat"
//! epochs = 4
//! [train.variability]
//! model = "layer_fixed"
//! sigma_w = 0.5
//!
//! [eval]
//! n_chips = 500
//! [eval.variability]
//! sigma_w = 0.5
//! [eval.st]
//! st_type = "gtm_plus_ltm"
//! ```
//!
//! Relative paths are resolved against the directory of the config file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use qavat::dataio::{load_cifar10, load_mnist, synthetic, Dataset, Split};
use qavat::evaluation::EvalConfig;
use qavat::network::{build, NetworkSpec};
use qavat::training::TrainConfig;
use qavat::variability::VarianceModel;
use qavat::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub output_dir: Option<PathBuf>,
    pub model: ModelSection,
    pub data: DataSection,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    pub sweep: Option<SweepSection>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub name: String,
    /// Overrides the default activation bitwidth of every quantized layer.
    pub act_bits: Option<u32>,
    pub weight_bits: Option<u32>,
    /// Starting weights for training (skips warmup).
    pub init_checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Mnist,
    Cifar10,
    Synthetic,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub dataset: DatasetKind,
    pub dir: Option<PathBuf>,
    #[serde(default = "one")]
    pub subset_fraction: f64,
    #[serde(default = "synthetic_train")]
    pub synthetic_train: usize,
    #[serde(default = "synthetic_test")]
    pub synthetic_test: usize,
    #[serde(default)]
    pub synthetic_seed: u64,
}

fn one() -> f64 {
    1.0
}

fn synthetic_train() -> usize {
    512
}

fn synthetic_test() -> usize {
    256
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepArm {
    pub name: String,
    /// One checkpoint per sigma, or a single one used for every sigma.
    pub checkpoints: Vec<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    /// 1: within-chip only, one column per arm; 2: mixed-type variation.
    pub scenario: u8,
    #[serde(default = "sigma_grid")]
    pub sigmas: Vec<f64>,
    #[serde(default = "layer_fixed")]
    pub variance_model: VarianceModel,
    #[serde(default)]
    pub arms: Vec<SweepArm>,
    /// Scenario 2 model.
    pub checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub wrong_st: bool,
}

fn sigma_grid() -> Vec<f64> {
    vec![0.1, 0.2, 0.3, 0.4, 0.5]
}

fn layer_fixed() -> VarianceModel {
    VarianceModel::LayerFixed
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path)?;
        let mut cfg: RunConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve(base);
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.network()?.validate()?;
        self.train.validate()?;
        self.eval.validate()?;
        if self.data.dataset != DatasetKind::Synthetic && self.data.dir.is_none() {
            return Err(Error::Config("data.dir is required for mnist and cifar10".into()));
        }
        if let Some(s) = &self.sweep {
            match s.scenario {
                1 if s.arms.is_empty() => {
                    return Err(Error::Config("scenario 1 needs at least one [[sweep.arms]]".into()))
                }
                1 => {
                    for a in &s.arms {
                        if a.checkpoints.len() != 1 && a.checkpoints.len() != s.sigmas.len() {
                            return Err(Error::Config(format!(
                                "arm {} lists {} checkpoints for {} sigmas",
                                a.name,
                                a.checkpoints.len(),
                                s.sigmas.len()
                            )));
                        }
                    }
                }
                2 if s.checkpoint.is_none() => return Err(Error::Config("scenario 2 needs sweep.checkpoint".into())),
                2 => {}
                n => return Err(Error::Config(format!("unknown scenario {n}; expected 1 or 2"))),
            }
        }
        Ok(())
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        self.output_dir.iter_mut().for_each(fix);
        self.model.init_checkpoint.iter_mut().for_each(fix);
        self.data.dir.iter_mut().for_each(fix);
        if let Some(s) = &mut self.sweep {
            s.checkpoint.iter_mut().for_each(fix);
            s.arms.iter_mut().flat_map(|a| a.checkpoints.iter_mut()).for_each(fix);
        }
    }

    pub fn network(&self) -> Result<NetworkSpec> {
        let net = build(&self.model.name)?;
        let a = self.model.act_bits.or_else(|| net.layers.iter().find_map(|l| l.act_bits));
        let w = self.model.weight_bits.or_else(|| net.layers.iter().find_map(|l| l.weight_bits));
        Ok(net.with_bits(a, w))
    }

    pub fn datasets(&self) -> Result<(Dataset, Dataset)> {
        let d = &self.data;
        match d.dataset {
            DatasetKind::Synthetic => Ok((
                synthetic(d.synthetic_train, d.synthetic_seed, Split::Train),
                synthetic(d.synthetic_test, d.synthetic_seed, Split::Test),
            )),
            DatasetKind::Mnist => load_mnist(d.dir.as_deref().expect("validated")),
            DatasetKind::Cifar10 => load_cifar10(d.dir.as_deref().expect("validated"), d.subset_fraction),
        }
    }
}
