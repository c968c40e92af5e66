use rand::Rng;

use crate::attacks::{self, AttackConfig, AttackTarget};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::models::{HeadSelect, ModelState, Routing};
use crate::normcore::{BranchTag, NormStats, Route};
use crate::tensor::{Real, Tensor};

/// The inference configuration being measured: a branch, optionally with explicit
/// set ids, a fixed head, or injected per-layer statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct Deployment<T> {
    pub branch: BranchTag,
    pub head: HeadSelect,
    pub explicit: Option<Route>,
    pub overrides: Option<Vec<Option<NormStats<T>>>>,
}

impl<T: Real> Deployment<T> {
    pub fn branch(branch: BranchTag) -> Self {
        Self {
            branch,
            head: HeadSelect::Default,
            explicit: None,
            overrides: None,
        }
    }

    pub fn with_head(mut self, head: HeadSelect) -> Self {
        self.head = head;
        self
    }

    pub fn with_explicit(mut self, route: Route) -> Self {
        self.explicit = Some(route);
        self
    }

    pub fn with_overrides(mut self, overrides: Vec<Option<NormStats<T>>>) -> Self {
        self.overrides = Some(overrides);
        self
    }

    pub fn routing(&self) -> Routing<'_, T> {
        Routing {
            overrides: self.overrides.as_deref(),
            explicit: self.explicit,
            ..Routing::eval(self.branch).with_head(self.head)
        }
    }

    pub fn target(&self) -> AttackTarget<'_, T> {
        AttackTarget {
            overrides: self.overrides.as_deref(),
            explicit: self.explicit,
            ..AttackTarget::eval(self.branch).with_head(self.head)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalResult {
    pub clean_acc: f64,
    pub robust_acc: f64,
    pub samples: usize,
}

fn correct(pred: &[usize], labels: &[usize]) -> usize {
    pred.iter().zip(labels).filter(|(p, l)| p == l).count()
}

/// Clean accuracy and accuracy under a white-box attack on the deployed configuration,
/// both with running statistics.
pub fn evaluate<T: Real, R: Rng + ?Sized>(
    model: &ModelState<T>,
    deployment: &Deployment<T>,
    data: &Dataset,
    attack: &AttackConfig,
    batch_size: usize,
    rng: &mut R,
) -> Result<EvalResult> {
    if data.is_empty() {
        return Err(Error::precondition("empty evaluation set"));
    }
    let routing = deployment.routing();
    let target = deployment.target();
    let mut clean_ok = 0;
    let mut robust_ok = 0;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, labels) = data.batch(chunk);
        let x: Tensor<T> = x.cast();
        clean_ok += correct(&model.predict(&x, &routing)?, &labels);
        let adv = attacks::pgd(model, &x, &labels, &target, attack, rng)?;
        robust_ok += correct(&model.predict(&adv, &routing)?, &labels);
    }
    let n = data.len() as f64;
    Ok(EvalResult {
        clean_acc: clean_ok as f64 / n,
        robust_acc: robust_ok as f64 / n,
        samples: data.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SyntheticSpec;
    use crate::models::{build_model, Architecture};
    use crate::normcore::{NormConfig, NormKind, NormMode};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_budget_robust_equals_clean() {
        let data = SyntheticSpec::default().generate(40, 1).unwrap();
        let m = build_model::<f32>(
            Architecture::small_cnn(10).with_width(0.125).with_input(3, 8),
            NormConfig::new(NormKind::Batch, NormMode::Dual),
            1,
            0,
        )
        .unwrap();
        let r = evaluate(
            &m,
            &Deployment::branch(BranchTag::Adv),
            &data,
            &AttackConfig::none(),
            16,
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        assert_eq!(r.clean_acc, r.robust_acc);
        assert_eq!(r.samples, 40);
    }

    #[test]
    fn untrained_model_is_near_chance() {
        let data = SyntheticSpec::default().generate(2000, 2).unwrap();
        let mut accs = Vec::new();
        for seed in 0..3 {
            let m = build_model::<f32>(
                Architecture::small_cnn(10).with_input(3, 8),
                NormConfig::default(),
                1,
                seed,
            )
            .unwrap();
            let r = evaluate(
                &m,
                &Deployment::branch(BranchTag::Clean),
                &data,
                &AttackConfig::none(),
                256,
                &mut ChaCha8Rng::seed_from_u64(0),
            )
            .unwrap();
            accs.push(r.clean_acc);
        }
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        assert!((0.05..=0.15).contains(&mean), "{accs:?}");
    }

    #[test]
    fn explicit_route_matches_branch_route() {
        let data = SyntheticSpec::default().generate(16, 3).unwrap();
        let mut m = build_model::<f32>(
            Architecture::small_cnn(10).with_width(0.125).with_input(3, 8),
            NormConfig::new(NormKind::Batch, NormMode::Dual),
            1,
            0,
        )
        .unwrap();
        m.norms[0].affine[1].beta[0] = 0.3;
        let x: Tensor<f32> = data.images.clone();
        let a = m.logits(&x, &Deployment::branch(BranchTag::Adv).routing()).unwrap();
        let b = m
            .logits(
                &x,
                &Deployment::branch(BranchTag::Clean)
                    .with_explicit(Route { stats: 1, affine: 1 })
                    .routing(),
            )
            .unwrap();
        assert_eq!(a, b);
    }
}
