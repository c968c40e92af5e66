//! Experiment configuration: a TOML file layered over a named preset.
//!
//! A file may start with `preset = "desk"` (or `"paper"`); every other key overrides the
//! preset value at the same path. Unknown keys are rejected with their name.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attacks::AttackConfig;
use crate::data::{self, Dataset, Split, SyntheticSpec};
use crate::error::{Error, Result};
use crate::models::{build_model, ArchFamily, Architecture, ModelState};
use crate::normcore::{BranchTag, NormConfig, NormKind, NormMode};
use crate::train::{OptimConfig, Regime, RegimeConfig, TrainPlan};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Full-scale recipe: ResNet-18, 110 epochs, PGD-10 training and evaluation.
    Paper,
    /// Reduced recipe: small CNN, 10k images, 30 epochs, PGD-5 training, PGD-20x3 evaluation.
    Desk,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::Paper => "paper",
            Preset::Desk => "desk",
        }
    }
}

impl std::str::FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Preset::Paper),
            "desk" => Ok(Preset::Desk),
            _ => Err(Error::config(format!("unknown preset `{s}` (expected paper|desk)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub arch: ArchFamily,
    pub width: f64,
    pub norm: NormKind,
    pub mode: NormMode,
    pub group_count: usize,
    pub eps: f64,
    pub momentum: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Cifar10,
    Synthetic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source: DatasetKind,
    /// CIFAR-10 root; falls back to the `DUALNORM_CIFAR10` environment variable.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    /// Training images drawn (seeded) from the split; all when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_subset: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_subset: Option<usize>,
    pub synthetic: SyntheticSpec,
    /// Sizes of the generated splits when `source = "synthetic"`.
    pub synthetic_train: usize,
    pub synthetic_test: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Branches evaluated after training epochs.
    pub deploy: Vec<BranchTag>,
    pub every: usize,
    /// Test samples used by per-epoch evaluation; all when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub limit: Option<usize>,
    pub batch_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub preset: Preset,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub model: ModelConfig,
    pub regime: RegimeConfig,
    pub optim: OptimConfig,
    pub train_attack: AttackConfig,
    pub eval_attack: AttackConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
}

impl ExperimentConfig {
    pub fn preset(preset: Preset) -> Self {
        let eps = 8.0 / 255.0;
        let step = 2.0 / 255.0;
        let norm = NormConfig::default();
        let synthetic = SyntheticSpec::default();
        match preset {
            Preset::Paper => Self {
                preset,
                seed: 0,
                output_dir: PathBuf::from("runs/paper"),
                model: ModelConfig {
                    arch: ArchFamily::Resnet18,
                    width: 1.0,
                    norm: NormKind::Batch,
                    mode: NormMode::Dual,
                    group_count: 32,
                    eps: norm.eps,
                    momentum: norm.momentum,
                },
                regime: RegimeConfig::new(Regime::Hybrid),
                optim: OptimConfig::default(),
                train_attack: AttackConfig::pgd(eps, step, 10),
                eval_attack: AttackConfig::pgd(eps, step, 10),
                data: DataConfig {
                    source: DatasetKind::Cifar10,
                    path: None,
                    train_subset: None,
                    test_subset: None,
                    synthetic,
                    synthetic_train: 10_000,
                    synthetic_test: 1_000,
                },
                eval: EvalConfig {
                    deploy: vec![BranchTag::Clean, BranchTag::Adv],
                    every: 1,
                    limit: None,
                    batch_size: 256,
                },
            },
            Preset::Desk => Self {
                preset,
                seed: 0,
                output_dir: PathBuf::from("runs/desk"),
                model: ModelConfig {
                    arch: ArchFamily::SmallCnn,
                    width: 1.0,
                    norm: NormKind::Batch,
                    mode: NormMode::Dual,
                    group_count: 8,
                    eps: norm.eps,
                    momentum: norm.momentum,
                },
                regime: RegimeConfig::new(Regime::Hybrid),
                optim: OptimConfig::default().with_epochs(30),
                train_attack: AttackConfig::pgd(eps, step, 5),
                eval_attack: AttackConfig::pgd(eps, step, 20).with_restarts(3),
                data: DataConfig {
                    source: DatasetKind::Cifar10,
                    path: None,
                    train_subset: Some(10_000),
                    test_subset: Some(1_000),
                    synthetic,
                    synthetic_train: 10_000,
                    synthetic_test: 1_000,
                },
                eval: EvalConfig {
                    deploy: vec![BranchTag::Clean, BranchTag::Adv],
                    every: 5,
                    limit: Some(500),
                    batch_size: 256,
                },
            },
        }
    }

    /// Parses a TOML document over its preset (`desk` when the file names none).
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let overrides: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Format(e.to_string()))?;
        let preset = match overrides.get("preset") {
            None => Preset::Desk,
            Some(toml::Value::String(s)) => s.parse()?,
            Some(other) => return Err(Error::config(format!("preset must be a string, got {other}"))),
        };
        let mut base = toml::Table::try_from(Self::preset(preset)).map_err(|e| Error::Format(e.to_string()))?;
        merge(&mut base, overrides);
        let cfg: Self = toml::Value::Table(base)
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    /// The fully resolved configuration as TOML, for provenance.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes to TOML")
    }

    pub fn architecture(&self, classes: usize, channels: usize, size: usize) -> Architecture {
        let base = match self.model.arch {
            ArchFamily::SmallCnn => Architecture::small_cnn(classes),
            ArchFamily::Resnet18 => Architecture::resnet18(classes),
        };
        base.with_width(self.model.width).with_input(channels, size)
    }

    pub fn norm_config(&self) -> NormConfig {
        NormConfig {
            kind: self.model.norm,
            mode: self.model.mode,
            eps: self.model.eps,
            momentum: self.model.momentum,
            group_count: self.model.group_count,
        }
    }

    pub fn heads(&self) -> usize {
        self.regime.regime.heads()
    }

    /// Freshly initialised model for data of the given shape, seeded from `seed`.
    pub fn build_model(&self, classes: usize, channels: usize, size: usize) -> Result<ModelState<f32>> {
        build_model(
            self.architecture(classes, channels, size),
            self.norm_config(),
            self.heads(),
            self.seed,
        )
    }

    pub fn train_plan(&self) -> TrainPlan {
        TrainPlan {
            regime: self.regime,
            optim: self.optim.clone(),
            train_attack: self.train_attack,
            eval_attack: self.eval_attack,
            seed: self.seed,
            deploy: self.eval.deploy.clone(),
            eval_limit: self.eval.limit,
            eval_every: self.eval.every,
        }
    }

    /// Loads (or generates) the train and test splits.
    pub fn load_data(&self) -> Result<(Dataset, Dataset)> {
        let d = &self.data;
        match d.source {
            DatasetKind::Synthetic => {
                let train = d.synthetic.generate(d.synthetic_train, self.seed)?;
                let test = d.synthetic.generate(d.synthetic_test, self.seed ^ 0x7e57)?;
                Ok((train, test))
            }
            DatasetKind::Cifar10 => {
                let root = match &d.path {
                    Some(p) => p.clone(),
                    None => std::env::var_os(data::DATA_ENV).map(PathBuf::from).ok_or_else(|| {
                        Error::config(format!("no CIFAR-10 path: set data.path or {}", data::DATA_ENV))
                    })?,
                };
                let train = data::load_cifar10(&root, Split::Train, d.train_subset, self.seed)?;
                let test = data::load_cifar10(&root, Split::Test, d.test_subset, self.seed)?;
                Ok((train, test))
            }
        }
    }

    /// Cross-field checks that no single section can make on its own.
    pub fn validate(&self) -> Result<()> {
        self.optim.validate()?;
        self.train_attack.validate()?;
        self.eval_attack.validate()?;
        self.regime.validate(self.model.norm, self.model.mode, self.heads())?;
        self.norm_config().validate(if self.model.norm == NormKind::Group {
            self.model.group_count
        } else {
            1
        })?;
        if !(self.model.width > 0.0) {
            return Err(Error::config("model.width must be > 0"));
        }
        if self.regime.regime.uses_adversarial() && self.train_attack.is_identity() {
            return Err(Error::config(format!(
                "regime {} trains on adversarial examples but train_attack is a no-op",
                self.regime.regime.name()
            )));
        }
        if self.eval.deploy.is_empty() {
            return Err(Error::config("eval.deploy must name at least one branch"));
        }
        if self.eval.batch_size == 0 {
            return Err(Error::config("eval.batch_size must be > 0"));
        }
        if self.data.source == DatasetKind::Synthetic {
            self.data.synthetic.validate()?;
            if self.data.synthetic_train < 2 || self.data.synthetic_test == 0 {
                return Err(Error::config(
                    "synthetic splits need >= 2 training and >= 1 test images",
                ));
            }
        }
        Ok(())
    }
}

fn merge(base: &mut toml::Table, overrides: toml::Table) {
    for (key, value) in overrides {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
}
