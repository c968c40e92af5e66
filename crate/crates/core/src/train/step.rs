use rand::Rng;

use super::{Regime, RegimeConfig, Sgd};
use crate::attacks::{self, AttackConfig, AttackTarget};
use crate::error::{Error, Result};
use crate::loss;
use crate::models::{ModelState, Routing};
use crate::normcore::{BranchLayout, BranchTag, NormMode};
use crate::tensor::{Real, Tensor};

/// Losses observed in one step; branch terms are `None` when the regime has no such branch.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepMetrics {
    pub loss: f64,
    pub clean_loss: Option<f64>,
    pub adv_loss: Option<f64>,
    pub kl: Option<f64>,
}

/// One optimizer step of `regime` on a clean batch. See [`train_step_weighted`].
#[allow(clippy::too_many_arguments)]
pub fn train_step<T: Real, R: Rng + ?Sized>(
    model: &mut ModelState<T>,
    clean: &Tensor<T>,
    labels: &[usize],
    regime: &RegimeConfig,
    attack: &AttackConfig,
    optim: &mut Sgd<T>,
    lr: f64,
    rng: &mut R,
) -> Result<StepMetrics> {
    train_step_weighted(model, clean, labels, regime, attack, optim, lr, 1.0, rng)
}

/// [`train_step`] with the adversarial cross-entropy term multiplied by `adv_scale`.
///
/// Adversarial examples are generated against the training forward of the current
/// parameters (batch statistics, no running update). Running statistics move once per
/// step from the training forward's batch moments.
#[allow(clippy::too_many_arguments)]
pub fn train_step_weighted<T: Real, R: Rng + ?Sized>(
    model: &mut ModelState<T>,
    clean: &Tensor<T>,
    labels: &[usize],
    regime: &RegimeConfig,
    attack: &AttackConfig,
    optim: &mut Sgd<T>,
    lr: f64,
    adv_scale: f64,
    rng: &mut R,
) -> Result<StepMetrics> {
    regime.validate(model.norm.kind, model.norm.mode, model.heads.len())?;
    let n = clean.batch();
    if labels.len() != n {
        return Err(Error::precondition(format!("{} labels for {n} samples", labels.len())));
    }
    match regime.regime {
        Regime::Standard => single_branch(model, clean, labels, BranchTag::Clean, 1.0, optim, lr),
        Regime::Madry => {
            let target = AttackTarget::training(BranchTag::Adv);
            let adv = attacks::pgd(model, clean, labels, &target, attack, rng)?;
            single_branch(model, &adv, labels, BranchTag::Adv, adv_scale, optim, lr)
        }
        Regime::CrossAt => cross_at(model, clean, labels, attack, optim, lr, adv_scale, rng),
        Regime::Hybrid | Regime::CrossHybrid | Regime::KlHybrid | Regime::DualLinear => {
            joint(model, clean, labels, regime, attack, optim, lr, adv_scale, rng)
        }
    }
}

fn single_branch<T: Real>(
    model: &mut ModelState<T>,
    x: &Tensor<T>,
    labels: &[usize],
    branch: BranchTag,
    scale: f64,
    optim: &mut Sgd<T>,
    lr: f64,
) -> Result<StepMetrics> {
    let fwd = model.forward(x, &Routing::train(BranchLayout::Uniform(branch)))?;
    let (ce, mut d) = loss::cross_entropy(&fwd.logits, labels)?;
    d = d.map(|v| v * T::c(scale));
    let (grads, _) = model.backward(&fwd.trace, &d, true)?;
    optim.step(model, &grads, lr)?;
    model.commit_running(&fwd.trace)?;
    let mut m = StepMetrics {
        loss: scale * ce,
        ..StepMetrics::default()
    };
    match branch {
        BranchTag::Clean => m.clean_loss = Some(ce),
        BranchTag::Adv => m.adv_loss = Some(ce),
    }
    Ok(m)
}

#[allow(clippy::too_many_arguments)]
fn cross_at<T: Real, R: Rng + ?Sized>(
    model: &mut ModelState<T>,
    clean: &Tensor<T>,
    labels: &[usize],
    attack: &AttackConfig,
    optim: &mut Sgd<T>,
    lr: f64,
    adv_scale: f64,
    rng: &mut R,
) -> Result<StepMetrics> {
    // The clean pass only measures statistics; nothing is back-propagated through it.
    let probe = model.forward(clean, &Routing::train(BranchLayout::Uniform(BranchTag::Clean)))?;
    let captured = probe.trace.captured_stats(0, model.norm.momentum);
    let target = AttackTarget::training(BranchTag::Adv).with_overrides(&captured);
    let adv = attacks::pgd(model, clean, labels, &target, attack, rng)?;
    let routing = Routing::train(BranchLayout::Uniform(BranchTag::Adv)).with_overrides(&captured);
    let fwd = model.forward(&adv, &routing)?;
    let (ce, d) = loss::cross_entropy(&fwd.logits, labels)?;
    let d = d.map(|v| v * T::c(adv_scale));
    let (grads, _) = model.backward(&fwd.trace, &d, true)?;
    optim.step(model, &grads, lr)?;
    model.commit_running(&probe.trace)?;
    Ok(StepMetrics {
        loss: adv_scale * ce,
        adv_loss: Some(ce),
        ..StepMetrics::default()
    })
}

#[allow(clippy::too_many_arguments)]
fn joint<T: Real, R: Rng + ?Sized>(
    model: &mut ModelState<T>,
    clean: &Tensor<T>,
    labels: &[usize],
    regime: &RegimeConfig,
    attack: &AttackConfig,
    optim: &mut Sgd<T>,
    lr: f64,
    adv_scale: f64,
    rng: &mut R,
) -> Result<StepMetrics> {
    let n = clean.batch();
    // The attacked forward matches the training forward: wherever the adversarial rows
    // read statistics that clean rows also shape, the clean batch rides along.
    let needs_companion = matches!(
        model.norm.mode,
        NormMode::Single | NormMode::DualApOnly | NormMode::Cross
    ) && model.norm.has_running_stats();
    let mut target = AttackTarget::training(BranchTag::Adv);
    if needs_companion {
        target = target.with_companion(clean);
    }
    let adv = attacks::pgd(model, clean, labels, &target, attack, rng)?;

    let input = Tensor::concat(&[clean, &adv])?;
    let fwd = model.forward(&input, &Routing::train(BranchLayout::Split { clean: n }))?;
    let lc = fwd.logits.slice_batch(0, n);
    let la = fwd.logits.slice_batch(n, 2 * n);
    let alpha = regime.alpha;
    let (ce_c, dc) = loss::cross_entropy(&lc, labels)?;
    let (ce_a, da) = loss::cross_entropy(&la, labels)?;
    let wa = (1.0 - alpha) * adv_scale;
    let mut dc = dc.map(|v| v * T::c(alpha));
    let mut da = da.map(|v| v * T::c(wa));
    let mut total = alpha * ce_c + wa * ce_a;
    let mut kl = None;
    if regime.regime == Regime::KlHybrid {
        let (k, dp, dq) = loss::kl_divergence(&lc, &la)?;
        let w = T::c(regime.kl_weight);
        dc.add_assign(&dp.map(|v| v * w));
        da.add_assign(&dq.map(|v| v * w));
        total += regime.kl_weight * k;
        kl = Some(k);
    }
    let dlogits = Tensor::concat(&[&dc, &da])?;
    let (grads, _) = model.backward(&fwd.trace, &dlogits, true)?;
    optim.step(model, &grads, lr)?;
    model.commit_running(&fwd.trace)?;
    Ok(StepMetrics {
        loss: total,
        clean_loss: Some(ce_c),
        adv_loss: Some(ce_a),
        kl,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{build_model, Architecture};
    use crate::normcore::{NormConfig, NormKind};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(mode: NormMode, heads: usize) -> (ModelState<f64>, Tensor<f64>, Vec<usize>) {
        let arch = Architecture::small_cnn(4).with_width(0.125).with_input(3, 8);
        let m = build_model(arch, NormConfig::new(NormKind::Batch, mode), heads, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Tensor::from_fn(&[6, 3, 8, 8], |_| rng.random_range(0.0..1.0));
        (m, x, vec![0, 1, 2, 3, 0, 1])
    }

    fn attack() -> AttackConfig {
        AttackConfig::pgd(8.0 / 255.0, 2.0 / 255.0, 2)
    }

    fn bitwise_eq(a: &[f64], b: &[f64]) -> bool {
        a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
    }

    #[test]
    fn zero_lr_keeps_parameters_but_moves_stats() {
        for regime in Regime::ALL {
            let mode = regime.modes()[0];
            let (mut m, x, y) = setup(mode, regime.heads());
            let before = m.clone();
            let mut opt = Sgd::new(0.9, 5e-4);
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            train_step(
                &mut m,
                &x,
                &y,
                &RegimeConfig::new(regime),
                &attack(),
                &mut opt,
                0.0,
                &mut rng,
            )
            .unwrap();
            assert_eq!(m.convs, before.convs, "{regime:?}");
            assert_eq!(m.heads, before.heads);
            for (a, b) in m.norms.iter().zip(&before.norms) {
                assert_eq!(a.affine, b.affine);
                assert_ne!(a.stats, b.stats, "{regime:?}");
            }
        }
    }

    #[test]
    fn cross_at_clean_forward_contributes_no_gradient() {
        let (mut m, x, y) = setup(NormMode::Single, 1);
        let before = m.clone();
        let mut opt = Sgd::new(0.9, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = RegimeConfig::new(Regime::CrossAt);
        train_step_weighted(&mut m, &x, &y, &r, &attack(), &mut opt, 0.1, 0.0, &mut rng).unwrap();
        assert_eq!(m.convs, before.convs);
        assert_eq!(m.heads, before.heads);
        for (a, b) in m.norms.iter().zip(&before.norms) {
            assert_eq!(a.affine, b.affine);
            assert_ne!(a.stats, b.stats);
        }
        // With the adversarial term on, the weights move.
        train_step(&mut m, &x, &y, &r, &attack(), &mut opt, 0.1, &mut rng).unwrap();
        assert_ne!(m.convs, before.convs);
    }

    #[test]
    fn cross_at_running_stats_follow_clean_batch_only() {
        let (mut m, x, y) = setup(NormMode::Single, 1);
        let probe = m
            .forward(&x, &Routing::train(BranchLayout::Uniform(BranchTag::Clean)))
            .unwrap();
        let mut expected = m.clone();
        expected.commit_running(&probe.trace).unwrap();
        let mut opt = Sgd::new(0.9, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        train_step(
            &mut m,
            &x,
            &y,
            &RegimeConfig::new(Regime::CrossAt),
            &attack(),
            &mut opt,
            0.1,
            &mut rng,
        )
        .unwrap();
        for (a, b) in m.norms.iter().zip(&expected.norms) {
            assert_eq!(a.stats, b.stats);
        }
    }

    #[test]
    fn dual_hybrid_statistics_are_isolated() {
        let (mut m, x, y) = setup(NormMode::Dual, 1);
        let before = m.clone();
        let mut opt = Sgd::new(0.9, 5e-4);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        train_step(
            &mut m,
            &x,
            &y,
            &RegimeConfig::new(Regime::Hybrid),
            &attack(),
            &mut opt,
            0.0,
            &mut rng,
        )
        .unwrap();
        // NS_clean after the step equals one running update with clean-only batch moments.
        let clean_only = before
            .forward(&x, &Routing::train(BranchLayout::Uniform(BranchTag::Clean)))
            .unwrap();
        for (layer, (after, moments)) in m.norms.iter().zip(clean_only.trace.batch_moments()).enumerate() {
            let want =
                crate::normcore::update_running(&before.norms[layer].stats[0], &moments[0].mean, &moments[0].var)
                    .unwrap();
            assert!(
                bitwise_eq(&after.stats[0].mean, &want.mean) && bitwise_eq(&after.stats[0].var, &want.var),
                "layer {layer}"
            );
        }
    }

    #[test]
    fn dual_parameter_isolation() {
        let (m, x, y) = setup(NormMode::Dual, 1);
        let fwd = m
            .forward(&x, &Routing::train(BranchLayout::Uniform(BranchTag::Clean)))
            .unwrap();
        let (_, d) = loss::cross_entropy(&fwd.logits, &y).unwrap();
        let (g, _) = m.backward(&fwd.trace, &d, true).unwrap();
        assert!(g.norms.iter().all(|l| l[0].is_some() && l[1].is_none()));
        let fwd = m
            .forward(&x, &Routing::train(BranchLayout::Uniform(BranchTag::Adv)))
            .unwrap();
        let (g, _) = m.backward(&fwd.trace, &d, true).unwrap();
        assert!(g.norms.iter().all(|l| l[0].is_none() && l[1].is_some()));
    }

    #[test]
    fn kl_term_reported_only_for_kl_regime() {
        let (mut m, x, y) = setup(NormMode::Single, 1);
        let mut opt = Sgd::new(0.9, 5e-4);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = train_step(
            &mut m,
            &x,
            &y,
            &RegimeConfig::new(Regime::KlHybrid),
            &attack(),
            &mut opt,
            0.01,
            &mut rng,
        )
        .unwrap();
        let k = s.kl.unwrap();
        assert!(k >= 0.0);
        let want = 0.5 * s.clean_loss.unwrap() + 0.5 * s.adv_loss.unwrap() + k;
        assert!((s.loss - want).abs() < 1e-12);
        let s = train_step(
            &mut m,
            &x,
            &y,
            &RegimeConfig::new(Regime::Hybrid),
            &attack(),
            &mut opt,
            0.01,
            &mut rng,
        )
        .unwrap();
        assert!(s.kl.is_none());
    }

    #[test]
    fn mismatched_mode_rejected() {
        let (mut m, x, y) = setup(NormMode::Dual, 1);
        let mut opt = Sgd::new(0.9, 5e-4);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = train_step(
            &mut m,
            &x,
            &y,
            &RegimeConfig::new(Regime::Madry),
            &attack(),
            &mut opt,
            0.1,
            &mut rng,
        );
        assert!(matches!(r, Err(Error::Config(_))));
    }
}
