//! l-infinity PGD (FGSM is the one-step special case) and uniform random noise.

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss;
use crate::models::{HeadSelect, ModelState, Routing};
use crate::normcore::{BranchLayout, BranchTag, NormStats, Route};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThreatNorm {
    Linf,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    /// Budget in pixel units, e.g. `8/255`.
    pub epsilon: f64,
    pub step_size: f64,
    pub steps: usize,
    pub restarts: usize,
    pub random_init: bool,
    #[serde(default = "default_norm")]
    pub norm: ThreatNorm,
}

fn default_norm() -> ThreatNorm {
    ThreatNorm::Linf
}

impl AttackConfig {
    pub fn pgd(epsilon: f64, step_size: f64, steps: usize) -> Self {
        Self {
            epsilon,
            step_size,
            steps,
            restarts: 1,
            random_init: true,
            norm: ThreatNorm::Linf,
        }
    }

    /// One step of size `epsilon` from the clean point.
    pub fn fgsm(epsilon: f64) -> Self {
        Self {
            epsilon,
            step_size: epsilon,
            steps: 1,
            restarts: 1,
            random_init: false,
            norm: ThreatNorm::Linf,
        }
    }

    /// No-op attack.
    pub fn none() -> Self {
        Self::pgd(0.0, 0.0, 0)
    }

    pub fn with_restarts(mut self, restarts: usize) -> Self {
        self.restarts = restarts;
        self
    }

    pub fn with_random_init(mut self, on: bool) -> Self {
        self.random_init = on;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0) || !self.epsilon.is_finite() {
            return Err(Error::config(format!(
                "epsilon must be finite and >= 0, got {}",
                self.epsilon
            )));
        }
        if !(self.step_size >= 0.0) || !self.step_size.is_finite() {
            return Err(Error::config(format!(
                "step_size must be finite and >= 0, got {}",
                self.step_size
            )));
        }
        if self.restarts == 0 {
            return Err(Error::config("restarts must be >= 1"));
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        self.epsilon == 0.0 || self.steps == 0
    }
}

/// The model configuration an attack differentiates through.
#[derive(Clone, Copy, Debug)]
pub struct AttackTarget<'a, T> {
    pub branch: BranchTag,
    pub head: HeadSelect,
    /// `true` normalizes with batch moments of the attacked batch (training-time generation).
    pub train: bool,
    pub overrides: Option<&'a [Option<NormStats<T>>]>,
    pub explicit: Option<Route>,
    /// Clean samples forwarded in front of the adversarial ones, so that batch moments
    /// owned by the clean branch exist. The loss only covers the adversarial samples.
    pub companion: Option<&'a Tensor<T>>,
}

impl<'a, T: Real> AttackTarget<'a, T> {
    /// White-box target for an evaluated deployment (running statistics).
    pub fn eval(branch: BranchTag) -> Self {
        Self {
            branch,
            head: HeadSelect::Default,
            train: false,
            overrides: None,
            explicit: None,
            companion: None,
        }
    }

    pub fn training(branch: BranchTag) -> Self {
        Self {
            train: true,
            ..Self::eval(branch)
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

    pub fn with_overrides(mut self, o: &'a [Option<NormStats<T>>]) -> Self {
        self.overrides = Some(o);
        self
    }

    pub fn with_companion(mut self, clean: &'a Tensor<T>) -> Self {
        self.companion = Some(clean);
        self
    }

    /// Per-sample losses and the gradient of the mean loss w.r.t. `x`.
    pub fn loss_and_grad(
        &self,
        model: &ModelState<T>,
        x: &Tensor<T>,
        labels: &[usize],
    ) -> Result<(Vec<f64>, Tensor<T>)> {
        let (input, layout, offset) = match self.companion {
            Some(c) => {
                if self.branch != BranchTag::Adv {
                    return Err(Error::config("companion batches precede adversarial samples only"));
                }
                (
                    Tensor::concat(&[c, x])?,
                    BranchLayout::Split { clean: c.batch() },
                    c.batch(),
                )
            }
            None => (x.clone(), BranchLayout::Uniform(self.branch), 0),
        };
        let routing = Routing {
            layout,
            train: self.train,
            head: self.head,
            overrides: self.overrides,
            explicit: self.explicit,
        };
        let fwd = model.forward(&input, &routing)?;
        let k = fwd.logits.dim(1);
        let n = x.batch();
        let own = fwd.logits.slice_batch(offset, offset + n);
        let per = loss::per_sample_cross_entropy(&own, labels)?;
        let (_, d_own) = loss::cross_entropy(&own, labels)?;
        let dlogits = if offset == 0 {
            d_own
        } else {
            let mut d = vec![T::zero(); offset * k];
            d.extend_from_slice(d_own.data());
            Tensor::from_vec(fwd.logits.shape(), d)?
        };
        let (_, dx) = model.backward(&fwd.trace, &dlogits, false)?;
        if !dx.all_finite() {
            return Err(Error::numerical("non-finite input gradient during attack"));
        }
        Ok((per, dx.slice_batch(offset, offset + n)))
    }

    pub fn per_sample_loss(&self, model: &ModelState<T>, x: &Tensor<T>, labels: &[usize]) -> Result<Vec<f64>> {
        Ok(self.loss_and_grad(model, x, labels)?.0)
    }
}

/// Anything PGD can ascend: per-sample losses and the input gradient of their mean.
pub trait LossSurface<T: Real> {
    fn loss_and_grad(&self, x: &Tensor<T>, labels: &[usize]) -> Result<(Vec<f64>, Tensor<T>)>;

    fn per_sample_loss(&self, x: &Tensor<T>, labels: &[usize]) -> Result<Vec<f64>> {
        Ok(self.loss_and_grad(x, labels)?.0)
    }
}

/// A model together with the configuration the attack differentiates through.
#[derive(Clone, Copy, Debug)]
pub struct ModelSurface<'a, T> {
    pub model: &'a ModelState<T>,
    pub target: AttackTarget<'a, T>,
}

impl<T: Real> LossSurface<T> for ModelSurface<'_, T> {
    fn loss_and_grad(&self, x: &Tensor<T>, labels: &[usize]) -> Result<(Vec<f64>, Tensor<T>)> {
        self.target.loss_and_grad(self.model, x, labels)
    }
}

fn sign<T: Real>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

fn project<T: Real>(x_adv: &mut [T], x: &[T], eps: T) {
    for (a, &o) in x_adv.iter_mut().zip(x) {
        let lo = (o - eps).max(T::zero());
        let hi = (o + eps).min(T::one());
        *a = a.max(lo).min(hi);
    }
}

fn check_pixels<T: Real>(batch: &Tensor<T>) -> Result<()> {
    if batch.data().iter().any(|v| !(*v >= T::zero() && *v <= T::one())) {
        return Err(Error::precondition("pixels must lie in [0, 1]"));
    }
    Ok(())
}

/// Sign-gradient ascent on the cross-entropy inside the epsilon ball, projecting after
/// every step. With several restarts the per-sample highest-loss restart is kept.
pub fn pgd<T: Real, R: Rng + ?Sized>(
    model: &ModelState<T>,
    batch: &Tensor<T>,
    labels: &[usize],
    target: &AttackTarget<'_, T>,
    cfg: &AttackConfig,
    rng: &mut R,
) -> Result<Tensor<T>> {
    pgd_on(&ModelSurface { model, target: *target }, batch, labels, cfg, rng)
}

/// [`pgd`] against an arbitrary loss surface.
pub fn pgd_on<T: Real, S: LossSurface<T> + ?Sized, R: Rng + ?Sized>(
    surface: &S,
    batch: &Tensor<T>,
    labels: &[usize],
    cfg: &AttackConfig,
    rng: &mut R,
) -> Result<Tensor<T>> {
    cfg.validate()?;
    check_pixels(batch)?;
    if cfg.is_identity() {
        return Ok(batch.clone());
    }
    let eps = T::c(cfg.epsilon);
    let step = T::c(cfg.step_size);
    let n = batch.batch();
    let per_sample = batch.sample_len();
    let init = Uniform::new_inclusive(-cfg.epsilon, cfg.epsilon).map_err(|e| Error::config(e.to_string()))?;

    let mut best: Option<(Tensor<T>, Vec<f64>)> = None;
    for _ in 0..cfg.restarts {
        let mut x_adv = batch.clone();
        if cfg.random_init {
            for v in x_adv.data_mut() {
                *v += T::c(init.sample(rng));
            }
            project(x_adv.data_mut(), batch.data(), eps);
        }
        for _ in 0..cfg.steps {
            let (_, g) = surface.loss_and_grad(&x_adv, labels)?;
            if !g.all_finite() {
                return Err(Error::numerical("non-finite input gradient during attack"));
            }
            for (a, &gv) in x_adv.data_mut().iter_mut().zip(g.data()) {
                *a += step * sign(gv);
            }
            project(x_adv.data_mut(), batch.data(), eps);
        }
        if cfg.restarts == 1 {
            return Ok(x_adv);
        }
        let losses = surface.per_sample_loss(&x_adv, labels)?;
        best = Some(match best {
            None => (x_adv, losses),
            Some((mut bx, mut bl)) => {
                for i in 0..n {
                    if losses[i] > bl[i] {
                        bl[i] = losses[i];
                        bx.data_mut()[i * per_sample..(i + 1) * per_sample].copy_from_slice(x_adv.sample(i));
                    }
                }
                (bx, bl)
            }
        });
    }
    Ok(best.expect("restarts >= 1").0)
}

/// Adds `Uniform(-magnitude, magnitude)` to every pixel and clips to `[0, 1]`.
pub fn uniform_noise<T: Real, R: Rng + ?Sized>(batch: &Tensor<T>, magnitude: f64, rng: &mut R) -> Result<Tensor<T>> {
    check_pixels(batch)?;
    if magnitude == 0.0 {
        return Ok(batch.clone());
    }
    let u = Uniform::new_inclusive(-magnitude, magnitude).map_err(|e| Error::config(e.to_string()))?;
    let mut out = batch.clone();
    for v in out.data_mut() {
        *v = (*v + T::c(u.sample(rng))).max(T::zero()).min(T::one());
    }
    Ok(out)
}
