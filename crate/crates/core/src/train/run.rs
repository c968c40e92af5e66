use std::io::Write;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{evaluate, train_step, Deployment, OptimConfig, RegimeConfig, Sgd};
use crate::attacks::AttackConfig;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::models::ModelState;
use crate::normcore::BranchTag;
use crate::tensor::Tensor;

pub const METRICS_HEADER: &str = "epoch,regime,branch,clean_acc,pgd_acc,loss,lr";

/// Everything a training run needs besides the initial model and the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainPlan {
    pub regime: RegimeConfig,
    pub optim: OptimConfig,
    pub train_attack: AttackConfig,
    pub eval_attack: AttackConfig,
    pub seed: u64,
    /// Branches measured after each evaluated epoch.
    pub deploy: Vec<BranchTag>,
    /// Test samples used by per-epoch evaluation (all when `None`).
    pub eval_limit: Option<usize>,
    /// Evaluate every this many epochs; the final epoch is always evaluated. `0` disables.
    pub eval_every: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    /// 1-based.
    pub epoch: usize,
    pub regime: String,
    pub branch: BranchTag,
    pub clean_acc: f64,
    pub pgd_acc: f64,
    /// Mean training loss over the epoch.
    pub loss: f64,
    pub lr: f64,
}

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{:.6},{:.6},{:.6},{}",
            self.epoch,
            self.regime,
            self.branch.name(),
            self.clean_acc,
            self.pgd_acc,
            self.loss,
            self.lr
        )
    }
}

/// Writes `# `-prefixed provenance lines, the header and one row per entry.
pub fn write_metrics_csv<W: Write>(out: &mut W, provenance: &str, rows: &[EpochMetrics]) -> Result<()> {
    for line in provenance.lines() {
        writeln!(out, "# {line}")?;
    }
    writeln!(out, "{METRICS_HEADER}")?;
    for r in rows {
        writeln!(out, "{}", r.csv_row())?;
    }
    Ok(())
}

const SHUFFLE_STREAM: u64 = 0x5eed_0001;
const EVAL_STREAM: u64 = 0x5eed_0002;

/// Trains `model` in place and returns per-epoch metrics. Deterministic given `plan.seed`.
pub fn train_loop(
    model: &mut ModelState<f32>,
    plan: &TrainPlan,
    train: &Dataset,
    test: &Dataset,
) -> Result<Vec<EpochMetrics>> {
    plan.optim.validate()?;
    plan.regime
        .validate(model.norm.kind, model.norm.mode, model.heads.len())?;
    plan.train_attack.validate()?;
    plan.eval_attack.validate()?;
    if train.len() < 2 {
        return Err(Error::precondition("training set needs at least two samples"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed ^ SHUFFLE_STREAM);
    let mut optim = Sgd::new(plan.optim.momentum, plan.optim.weight_decay);
    let eval_set = match plan.eval_limit {
        Some(k) => test.take(k),
        None => test.clone(),
    };
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::new();
    for epoch in 0..plan.optim.epochs {
        let lr = plan.optim.lr_at(epoch);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut steps = 0usize;
        for chunk in order.chunks(plan.optim.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let (x, y) = train.batch(chunk);
            let x: Tensor<f32> = x;
            let m = train_step(
                model,
                &x,
                &y,
                &plan.regime,
                &plan.train_attack,
                &mut optim,
                lr,
                &mut rng,
            )?;
            loss_sum += m.loss;
            steps += 1;
        }
        let loss = loss_sum / steps.max(1) as f64;
        let last = epoch + 1 == plan.optim.epochs;
        let due = plan.eval_every > 0 && ((epoch + 1) % plan.eval_every == 0 || last);
        if due && !eval_set.is_empty() {
            for &branch in &plan.deploy {
                let mut erng =
                    ChaCha8Rng::seed_from_u64(plan.seed ^ EVAL_STREAM ^ ((epoch as u64) << 8) ^ branch.index() as u64);
                let r = evaluate(
                    model,
                    &Deployment::branch(branch),
                    &eval_set,
                    &plan.eval_attack,
                    plan.optim.batch_size,
                    &mut erng,
                )?;
                info!(
                    "epoch {} {} {}: loss {loss:.4} clean {:.4} pgd {:.4}",
                    epoch + 1,
                    plan.regime.regime.name(),
                    branch.name(),
                    r.clean_acc,
                    r.robust_acc
                );
                history.push(EpochMetrics {
                    epoch: epoch + 1,
                    regime: plan.regime.regime.name().into(),
                    branch,
                    clean_acc: r.clean_acc,
                    pgd_acc: r.robust_acc,
                    loss,
                    lr,
                });
            }
        } else {
            info!("epoch {} {}: loss {loss:.4}", epoch + 1, plan.regime.regime.name());
        }
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SyntheticSpec;
    use crate::models::{build_model, Architecture};
    use crate::normcore::{NormConfig, NormKind, NormMode};
    use crate::train::Regime;

    fn plan(epochs: usize) -> TrainPlan {
        TrainPlan {
            regime: RegimeConfig::new(Regime::Hybrid),
            optim: OptimConfig {
                batch_size: 32,
                ..OptimConfig::default().with_epochs(epochs)
            },
            train_attack: AttackConfig::pgd(8.0 / 255.0, 2.0 / 255.0, 1),
            eval_attack: AttackConfig::pgd(8.0 / 255.0, 2.0 / 255.0, 2),
            seed: 5,
            deploy: vec![BranchTag::Clean, BranchTag::Adv],
            eval_limit: Some(32),
            eval_every: 1,
        }
    }

    fn model() -> ModelState<f32> {
        build_model(
            Architecture::small_cnn(10).with_width(0.125).with_input(3, 8),
            NormConfig::new(NormKind::Batch, NormMode::Dual),
            1,
            1,
        )
        .unwrap()
    }

    #[test]
    fn zero_epochs_leave_initialization() {
        let data = SyntheticSpec::default().generate(64, 0).unwrap();
        let mut m = model();
        let h = train_loop(&mut m, &plan(0), &data, &data).unwrap();
        assert!(h.is_empty());
        assert_eq!(m, model());
    }

    #[test]
    fn runs_are_reproducible() {
        let train = SyntheticSpec::default().generate(96, 0).unwrap();
        let test = SyntheticSpec::default().generate(32, 1).unwrap();
        let run = || {
            let mut m = model();
            let h = train_loop(&mut m, &plan(2), &train, &test).unwrap();
            let mut buf = Vec::new();
            write_metrics_csv(&mut buf, "seed = 5", &h).unwrap();
            (m, String::from_utf8(buf).unwrap())
        };
        let (m1, csv1) = run();
        let (m2, csv2) = run();
        assert_eq!(m1, m2);
        assert_eq!(csv1, csv2);
        let lines: Vec<&str> = csv1.lines().collect();
        assert_eq!(lines[0], "# seed = 5");
        assert_eq!(lines[1], METRICS_HEADER);
        assert_eq!(lines.len(), 2 + 4);
        assert!(lines[2].starts_with("1,hybrid,clean,"));
    }
}
