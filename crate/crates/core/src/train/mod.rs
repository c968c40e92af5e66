//! Training regimes, their losses, the optimizer and the evaluation harness.
//!
//! Every regime that sees both branches runs one forward over the concatenation
//! `[clean; adversarial]` with a split branch layout. Shared statistics sets therefore
//! see the mixture of both halves, branch-owned sets see only their own half, and the
//! Cross routing finds the other branch's moments in the same batch.

mod eval;
mod losses;
mod run;
mod sgd;
mod step;

pub use eval::{evaluate, Deployment, EvalResult};
pub use losses::{hybrid_loss, kl_regularizer};
pub use run::{train_loop, write_metrics_csv, EpochMetrics, TrainPlan, METRICS_HEADER};
pub use sgd::Sgd;
pub use step::{train_step, train_step_weighted, StepMetrics};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::normcore::{NormKind, NormMode};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// Clean cross-entropy only.
    Standard,
    /// Adversarial cross-entropy only.
    Madry,
    /// Adversarial cross-entropy, normalized with statistics of the clean batch.
    CrossAt,
    /// `alpha * CE(clean) + (1 - alpha) * CE(adv)`.
    Hybrid,
    /// Hybrid loss under Cross routing.
    CrossHybrid,
    /// Hybrid loss plus `kl_weight * KL(clean || adv)` on the output distributions.
    KlHybrid,
    /// Hybrid loss with a separate classifier head per branch.
    DualLinear,
}

impl Regime {
    pub const ALL: [Regime; 7] = [
        Regime::Standard,
        Regime::Madry,
        Regime::CrossAt,
        Regime::Hybrid,
        Regime::CrossHybrid,
        Regime::KlHybrid,
        Regime::DualLinear,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Regime::Standard => "standard",
            Regime::Madry => "madry",
            Regime::CrossAt => "cross_at",
            Regime::Hybrid => "hybrid",
            Regime::CrossHybrid => "cross_hybrid",
            Regime::KlHybrid => "kl_hybrid",
            Regime::DualLinear => "dual_linear",
        }
    }

    /// Norm modes the regime can train.
    pub fn modes(self) -> &'static [NormMode] {
        match self {
            Regime::Hybrid => &[
                NormMode::Single,
                NormMode::Dual,
                NormMode::DualApOnly,
                NormMode::DualNsOnly,
            ],
            Regime::CrossHybrid => &[NormMode::Cross],
            _ => &[NormMode::Single],
        }
    }

    pub fn heads(self) -> usize {
        if self == Regime::DualLinear {
            2
        } else {
            1
        }
    }

    pub fn uses_adversarial(self) -> bool {
        self != Regime::Standard
    }
}

impl std::str::FromStr for Regime {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Regime::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| Error::config(format!("unknown regime `{s}`")))
    }
}

fn default_alpha() -> f64 {
    0.5
}

fn default_kl_weight() -> f64 {
    1.0
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegimeConfig {
    pub regime: Regime,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Read by [`Regime::KlHybrid`] only.
    #[serde(default = "default_kl_weight")]
    pub kl_weight: f64,
}

impl RegimeConfig {
    pub fn new(regime: Regime) -> Self {
        Self {
            regime,
            alpha: default_alpha(),
            kl_weight: default_kl_weight(),
        }
    }

    /// Checks the weights and the regime's requirements on the model.
    pub fn validate(&self, kind: NormKind, mode: NormMode, heads: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::config(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        if !(self.kl_weight >= 0.0) || !self.kl_weight.is_finite() {
            return Err(Error::config(format!(
                "kl_weight must be finite and >= 0, got {}",
                self.kl_weight
            )));
        }
        let r = self.regime;
        if !r.modes().contains(&mode) {
            return Err(Error::config(format!(
                "regime {} needs norm mode {:?}, got {mode:?}",
                r.name(),
                r.modes()
            )));
        }
        if heads != r.heads() {
            return Err(Error::config(format!(
                "regime {} needs {} head(s), model has {heads}",
                r.name(),
                r.heads()
            )));
        }
        if r == Regime::CrossAt && kind != NormKind::Batch {
            return Err(Error::config(
                "cross_at injects batch statistics and needs batch normalization",
            ));
        }
        Ok(())
    }
}

fn default_decay_epochs() -> Vec<usize> {
    vec![100, 105]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub epochs: usize,
    pub lr: f64,
    pub lr_decay: f64,
    #[serde(default = "default_decay_epochs")]
    pub decay_epochs: Vec<usize>,
    pub weight_decay: f64,
    pub momentum: f64,
    pub batch_size: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            epochs: 110,
            lr: 0.1,
            lr_decay: 0.1,
            decay_epochs: default_decay_epochs(),
            weight_decay: 5e-4,
            momentum: 0.9,
            batch_size: 128,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::config("batch_size must be >= 2 for batch statistics"));
        }
        if self.decay_epochs.iter().any(|&e| e >= self.epochs) {
            return Err(Error::config(format!(
                "decay epochs {:?} must lie below epochs = {}",
                self.decay_epochs, self.epochs
            )));
        }
        if self.decay_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("decay epochs must be strictly increasing"));
        }
        for (name, v) in [
            ("lr", self.lr),
            ("lr_decay", self.lr_decay),
            ("weight_decay", self.weight_decay),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        Ok(())
    }

    /// Learning rate for the 0-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let passed = self.decay_epochs.iter().filter(|&&e| e <= epoch).count();
        self.lr * self.lr_decay.powi(passed as i32)
    }

    /// Sets `epochs`, moving the decay milestones proportionally and dropping any that no longer fit.
    pub fn with_epochs(mut self, epochs: usize) -> Self {
        if self.epochs > 0 && epochs != self.epochs {
            let scale = epochs as f64 / self.epochs as f64;
            let mut d: Vec<usize> = self
                .decay_epochs
                .iter()
                .map(|&e| (e as f64 * scale).round() as usize)
                .filter(|&e| e < epochs)
                .collect();
            d.dedup();
            self.decay_epochs = d;
        }
        self.epochs = epochs;
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_decays_at_milestones() {
        let o = OptimConfig::default();
        o.validate().unwrap();
        assert_eq!(o.lr_at(0), 0.1);
        assert_eq!(o.lr_at(99), 0.1);
        assert!((o.lr_at(100) - 0.01).abs() < 1e-15);
        assert!((o.lr_at(109) - 0.001).abs() < 1e-15);
    }

    #[test]
    fn epoch_override_rescales_milestones() {
        let o = OptimConfig::default().with_epochs(30);
        assert_eq!(o.decay_epochs, vec![27, 29]);
        o.validate().unwrap();
        let z = OptimConfig::default().with_epochs(0);
        assert!(z.decay_epochs.is_empty());
        z.validate().unwrap();
        let bad = OptimConfig {
            epochs: 100,
            ..OptimConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn regime_mode_compatibility() {
        use NormKind::*;
        assert!(RegimeConfig::new(Regime::Hybrid)
            .validate(Batch, NormMode::Dual, 1)
            .is_ok());
        assert!(RegimeConfig::new(Regime::Hybrid)
            .validate(Batch, NormMode::Cross, 1)
            .is_err());
        assert!(RegimeConfig::new(Regime::CrossHybrid)
            .validate(Batch, NormMode::Cross, 1)
            .is_ok());
        assert!(RegimeConfig::new(Regime::DualLinear)
            .validate(Batch, NormMode::Single, 1)
            .is_err());
        assert!(RegimeConfig::new(Regime::DualLinear)
            .validate(Batch, NormMode::Single, 2)
            .is_ok());
        assert!(RegimeConfig::new(Regime::KlHybrid)
            .validate(Batch, NormMode::Dual, 1)
            .is_err());
        assert!(RegimeConfig::new(Regime::CrossAt)
            .validate(Layer, NormMode::Single, 1)
            .is_err());
        let mut c = RegimeConfig::new(Regime::Hybrid);
        c.alpha = 1.5;
        assert!(c.validate(Batch, NormMode::Single, 1).is_err());
        for r in Regime::ALL {
            assert_eq!(r.name().parse::<Regime>().unwrap(), r);
        }
    }
}
