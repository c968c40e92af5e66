use log::warn;
use rand::Rng;

use super::{affine_set, stats_set, DataSource, SnapshotLabel, StatsSnapshot};
use crate::attacks::{self, AttackConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::models::{ModelState, Routing};
use crate::normcore::{update_running, BranchLayout, BranchTag, NormStats, Route};
use crate::tensor::{Real, Tensor};
use crate::train::{evaluate, Deployment, EvalResult};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RecalOptions {
    pub max_passes: usize,
    /// Convergence threshold on the largest relative per-channel change between passes.
    pub tol: f64,
    pub batch_size: usize,
    pub momentum: f64,
}

impl Default for RecalOptions {
    fn default() -> Self {
        Self {
            max_passes: 10,
            tol: 1e-3,
            batch_size: 128,
            momentum: 0.1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum RecalStatus {
    Converged,
    /// Pass budget exhausted; the snapshot holds the last estimate.
    NotConverged,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Recalibration {
    pub snapshot: StatsSnapshot,
    pub status: RecalStatus,
    pub passes: usize,
    /// Largest relative change in the final pass (infinite when no pass ran).
    pub last_change: f64,
}

fn relative_change(old: &[NormStats<f64>], new: &[NormStats<f64>]) -> f64 {
    let mut worst = 0.0f64;
    for (a, b) in old.iter().zip(new) {
        for (x, y) in a.mean.iter().chain(&a.var).zip(b.mean.iter().chain(&b.var)) {
            worst = worst.max((y - x).abs() / x.abs().max(1e-6));
        }
    }
    worst
}

/// The dataset as seen by the statistics: clean, attacked against the `ap` branch, or
/// uniformly perturbed at the attack budget.
fn source_images<T: Real, R: Rng + ?Sized>(
    model: &ModelState<T>,
    ap: BranchTag,
    source: DataSource,
    data: &Dataset,
    attack: Option<&AttackConfig>,
    batch_size: usize,
    rng: &mut R,
) -> Result<Tensor<T>> {
    let clean: Tensor<T> = data.images.cast();
    let cfg = match (source, attack) {
        (DataSource::Clean, _) => return Ok(clean),
        (_, Some(cfg)) => cfg,
        (_, None) => {
            return Err(Error::config(format!(
                "data source `{}` needs an attack configuration",
                source.name()
            )))
        }
    };
    cfg.validate()?;
    let deployment = Deployment::<T>::branch(ap);
    let target = deployment.target();
    let mut parts = Vec::new();
    let mut start = 0;
    while start < data.len() {
        let end = (start + batch_size).min(data.len());
        let x = clean.slice_batch(start, end);
        let perturbed = match source {
            DataSource::Adv => attacks::pgd(model, &x, &data.labels[start..end], &target, cfg, rng)?,
            _ => attacks::uniform_noise(&x, cfg.epsilon, rng)?,
        };
        parts.push(perturbed);
        start = end;
    }
    Tensor::concat(&parts.iter().collect::<Vec<_>>())
}

/// Re-estimates every layer's running statistics from scratch on `data` (under `source`)
/// while `ap` provides the affine parameters. Each pass sweeps the data once in a fixed
/// order, folding training-mode batch moments into fresh `(0, 1)` statistics; passes stop
/// once no channel moves by more than `tol` relative. The model is not modified.
pub fn recalibrate<T: Real, R: Rng + ?Sized>(
    model: &ModelState<T>,
    ap: BranchTag,
    source: DataSource,
    data: &Dataset,
    attack: Option<&AttackConfig>,
    opts: &RecalOptions,
    rng: &mut R,
) -> Result<Recalibration> {
    if !model.norm.has_running_stats() {
        return Err(Error::config(format!(
            "{:?} normalization keeps no running statistics to recalibrate",
            model.norm.kind
        )));
    }
    if data.is_empty() {
        return Err(Error::precondition("recalibration needs data"));
    }
    if opts.batch_size < 2 {
        return Err(Error::config("recalibration batch size must be at least 2"));
    }
    let first = &model.norms[0];
    let route = Route {
        stats: stats_set(first, ap),
        affine: affine_set(first, ap),
    };
    let images = source_images(model, ap, source, data, attack, opts.batch_size, rng)?;
    let routing = Routing::train(BranchLayout::Uniform(ap)).with_explicit(route);

    let mut current: Vec<NormStats<T>> = model
        .norms
        .iter()
        .map(|l| NormStats::init(l.channels, opts.momentum))
        .collect();
    let mut passes = 0;
    let mut last_change = f64::INFINITY;
    let mut status = if opts.max_passes == 0 {
        RecalStatus::NotConverged
    } else {
        RecalStatus::Converged
    };
    while passes < opts.max_passes {
        let before = to_f64(&current);
        let mut start = 0;
        while start < images.batch() {
            let end = (start + opts.batch_size).min(images.batch());
            // A trailing single sample has zero batch variance.
            if end - start >= 2 {
                let fwd = model.forward(&images.slice_batch(start, end), &routing)?;
                for (stats, moments) in current.iter_mut().zip(fwd.trace.batch_moments()) {
                    let m = moments
                        .first()
                        .ok_or_else(|| Error::config("training forward captured no batch moments"))?;
                    *stats = update_running(stats, &m.mean, &m.var)?;
                }
            }
            start = end;
        }
        passes += 1;
        last_change = relative_change(&before, &to_f64(&current));
        if last_change < opts.tol {
            break;
        }
        if passes == opts.max_passes {
            status = RecalStatus::NotConverged;
        }
    }
    if status == RecalStatus::NotConverged && opts.max_passes > 0 {
        warn!(
            "recalibration of NS_{}^{} stopped after {passes} passes with relative change {last_change:.2e} (tol {:.0e})",
            source.name(),
            ap.name(),
            opts.tol
        );
    }
    Ok(Recalibration {
        snapshot: StatsSnapshot {
            label: SnapshotLabel { ap, data: source },
            layer_names: model.norm_names.clone(),
            layers: to_f64(&current),
        },
        status,
        passes,
        last_change,
    })
}

fn to_f64<T: Real>(stats: &[NormStats<T>]) -> Vec<NormStats<f64>> {
    stats
        .iter()
        .map(|s| NormStats {
            mean: s.mean.iter().map(|v| v.as_f64()).collect(),
            var: s.var.iter().map(|v| v.as_f64()).collect(),
            momentum: s.momentum.as_f64(),
        })
        .collect()
}

/// Normalization statistics used for a recombined evaluation.
#[derive(Clone, Copy, Debug)]
pub enum NsSource<'a> {
    /// The model's own running set estimated from this branch's samples.
    Stored(BranchTag),
    Snapshot(&'a StatsSnapshot),
}

/// Clean and robust accuracy of the model with normalization statistics `ns` and the
/// affine parameters (and head) of branch `ap`. The attack sees the same pairing.
pub fn recombine_eval<T: Real, R: Rng + ?Sized>(
    model: &ModelState<T>,
    ns: NsSource<'_>,
    ap: BranchTag,
    test: &Dataset,
    attack: &AttackConfig,
    batch_size: usize,
    rng: &mut R,
) -> Result<EvalResult> {
    if !model.norm.has_running_stats() {
        return Err(Error::config("recombination needs a model with running statistics"));
    }
    let first = &model.norms[0];
    let affine = affine_set(first, ap);
    let deployment = match ns {
        NsSource::Stored(tag) => Deployment::branch(ap).with_explicit(Route {
            stats: stats_set(first, tag),
            affine,
        }),
        NsSource::Snapshot(snapshot) => Deployment::branch(ap)
            .with_explicit(Route { stats: 0, affine })
            .with_overrides(snapshot.to_overrides(model)?),
    };
    evaluate(model, &deployment, test, attack, batch_size, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SyntheticSpec;
    use crate::models::{build_model, Architecture};
    use crate::normcore::{NormConfig, NormKind, NormMode};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn small(mode: NormMode, seed: u64) -> ModelState<f32> {
        let arch = Architecture::small_cnn(10).with_width(0.25).with_input(3, 8);
        build_model(arch, NormConfig::new(NormKind::Batch, mode), 1, seed).unwrap()
    }

    fn data(n: usize) -> Dataset {
        SyntheticSpec::default().generate(n, 3).unwrap()
    }

    #[test]
    fn zero_passes_return_initial_statistics() {
        let model = small(NormMode::Dual, 1);
        let r = recalibrate(
            &model,
            BranchTag::Adv,
            DataSource::Clean,
            &data(16),
            None,
            &RecalOptions {
                max_passes: 0,
                ..Default::default()
            },
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        assert_eq!(r.passes, 0);
        assert_eq!(r.status, RecalStatus::NotConverged);
        for (s, l) in r.snapshot.layers.iter().zip(&model.norms) {
            let init = NormStats::<f64>::init(l.channels, 0.1);
            assert_eq!((&s.mean, &s.var), (&init.mean, &init.var));
        }
    }

    #[test]
    fn model_is_untouched_and_result_deterministic() {
        let model = small(NormMode::Dual, 2);
        let before = model.clone();
        let attack = AttackConfig::pgd(8.0 / 255.0, 2.0 / 255.0, 2);
        let run = |seed| {
            recalibrate(
                &model,
                BranchTag::Clean,
                DataSource::Adv,
                &data(24),
                Some(&attack),
                &RecalOptions {
                    max_passes: 3,
                    batch_size: 8,
                    ..Default::default()
                },
                &mut ChaCha8Rng::seed_from_u64(seed),
            )
            .unwrap()
        };
        let a = run(5);
        assert_eq!(model, before);
        assert_eq!(a, run(5));
        assert_eq!(a.snapshot.label.to_string(), "NS_adv^clean");
    }

    #[test]
    fn perturbed_sources_need_an_attack() {
        let model = small(NormMode::Single, 2);
        let err = recalibrate(
            &model,
            BranchTag::Clean,
            DataSource::Noisy,
            &data(8),
            None,
            &RecalOptions::default(),
            &mut ChaCha8Rng::seed_from_u64(0),
        );
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn per_sample_norms_have_nothing_to_recalibrate() {
        let arch = Architecture::small_cnn(10).with_width(0.25).with_input(3, 8);
        let model: ModelState<f32> =
            build_model(arch, NormConfig::new(NormKind::Layer, NormMode::Single), 1, 0).unwrap();
        let err = recalibrate(
            &model,
            BranchTag::Clean,
            DataSource::Clean,
            &data(8),
            None,
            &RecalOptions::default(),
            &mut ChaCha8Rng::seed_from_u64(0),
        );
        assert!(matches!(err, Err(Error::Config(_))));
    }

    /// First conv copies the input channels through its centre tap, so the first norm layer
    /// sees the Gaussian pixels unchanged.
    #[test]
    fn gaussian_input_moments_are_recovered() {
        let mut model: ModelState<f64> = {
            let arch = Architecture::small_cnn(10).with_width(0.25).with_input(3, 8);
            build_model(arch, NormConfig::new(NormKind::Batch, NormMode::Single), 1, 4).unwrap()
        };
        let conv = &mut model.convs[0];
        let (cout, cin, k) = (conv.weight.dim(0), conv.weight.dim(1), conv.weight.dim(2));
        assert!(cout >= cin);
        let w = conv.weight.data_mut();
        w.iter_mut().for_each(|v| *v = 0.0);
        for c in 0..cin {
            w[((c * cin + c) * k + k / 2) * k + k / 2] = 1.0;
        }
        let means = [0.2, -0.5, 1.0];
        let sds = [1.0, 0.5, 2.0];
        let n = 512;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut images = Tensor::<f32>::zeros(&[n, 3, 8, 8]);
        for i in 0..n {
            for c in 0..3 {
                let dist = Normal::new(means[c], sds[c]).unwrap();
                for p in 0..64 {
                    images.data_mut()[(i * 3 + c) * 64 + p] = dist.sample(&mut rng) as f32;
                }
            }
        }
        let set = Dataset::new(images, vec![0; n], 10).unwrap();
        let r = recalibrate(
            &model,
            BranchTag::Clean,
            DataSource::Clean,
            &set,
            None,
            &RecalOptions {
                max_passes: 40,
                batch_size: 64,
                ..Default::default()
            },
            &mut rng,
        )
        .unwrap();
        assert_eq!(r.status, RecalStatus::Converged);
        let layer = &r.snapshot.layers[0];
        // At the fixed point of repeated identical sweeps the estimate is a weighted sum over
        // the distinct batches, weight m (1 - m)^j / (1 - (1 - m)^B) for the j-th most recent.
        let batches = n / 64;
        let decay = 0.9f64.powi(batches as i32);
        let ema = (0..batches)
            .map(|j| (0.1 * 0.9f64.powi(j as i32) / (1.0 - decay)).powi(2))
            .sum::<f64>()
            .sqrt();
        let per_batch = 64.0f64 * 64.0;
        for c in 0..3 {
            let se_mean = sds[c] / per_batch.sqrt() * ema;
            assert!(
                (layer.mean[c] - means[c]).abs() < 3.0 * se_mean,
                "mean {c}: {}",
                layer.mean[c]
            );
            let var = sds[c] * sds[c];
            let se_var = var * (2.0 / per_batch).sqrt() * ema;
            assert!((layer.var[c] - var).abs() < 3.0 * se_var, "var {c}: {}", layer.var[c]);
        }
        for c in 3..layer.mean.len() {
            assert_eq!(layer.mean[c], 0.0);
        }
    }

    #[test]
    fn stored_recombination_matches_default_branch_bitwise() {
        let model = small(NormMode::Dual, 6);
        let test = data(20);
        let attack = AttackConfig::pgd(8.0 / 255.0, 2.0 / 255.0, 2);
        for tag in BranchTag::ALL {
            let base = evaluate(
                &model,
                &Deployment::branch(tag),
                &test,
                &attack,
                10,
                &mut ChaCha8Rng::seed_from_u64(1),
            )
            .unwrap();
            let again = recombine_eval(
                &model,
                NsSource::Stored(tag),
                tag,
                &test,
                &attack,
                10,
                &mut ChaCha8Rng::seed_from_u64(1),
            )
            .unwrap();
            assert_eq!(base, again);
            let snap = StatsSnapshot::stored(&model, tag).unwrap();
            let via = recombine_eval(
                &model,
                NsSource::Snapshot(&snap),
                tag,
                &test,
                &attack,
                10,
                &mut ChaCha8Rng::seed_from_u64(1),
            )
            .unwrap();
            assert_eq!(base, via);
        }
        let x: Tensor<f32> = test.images.cast();
        let snap = StatsSnapshot::stored(&model, BranchTag::Adv).unwrap();
        let overrides = snap.to_overrides(&model).unwrap();
        let a = model.logits(&x, &Routing::eval(BranchTag::Adv)).unwrap();
        let b = model
            .logits(
                &x,
                &Routing::eval(BranchTag::Adv)
                    .with_explicit(Route { stats: 0, affine: 1 })
                    .with_overrides(&overrides),
            )
            .unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn mismatched_snapshot_rejected() {
        let model = small(NormMode::Dual, 6);
        let mut snap = StatsSnapshot::stored(&model, BranchTag::Clean).unwrap();
        snap.layers[1].mean.pop();
        let err = recombine_eval(
            &model,
            NsSource::Snapshot(&snap),
            BranchTag::Adv,
            &data(4),
            &AttackConfig::none(),
            4,
            &mut ChaCha8Rng::seed_from_u64(0),
        );
        assert!(matches!(err, Err(Error::Config(_))));
    }
}
