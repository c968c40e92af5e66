//! Normalization layers with pluggable kind (batch / layer / group / instance) and
//! pluggable branch routing between clean and adversarial inputs.
//!
//! A layer owns one or two sets of normalization statistics (NS: running mean and
//! variance) and one or two sets of affine parameters (AP: `gamma`, `beta`). The
//! [`NormMode`] decides which set each branch reads:
//!
//! | mode         | NS sets | AP sets | clean route | adv route  |
//! |--------------|---------|---------|-------------|------------|
//! | `Single`     | 1       | 1       | (0, 0)      | (0, 0)     |
//! | `Dual`       | 2       | 2       | (C, C)      | (A, A)     |
//! | `Cross`      | 2       | 2       | (A, C)      | (C, A)     |
//! | `DualApOnly` | 1       | 2       | (0, C)      | (0, A)     |
//! | `DualNsOnly` | 2       | 1       | (C, 0)      | (A, 0)     |
//!
//! Layer, group and instance normalization compute per-sample moments and carry no
//! running statistics, so only their AP sets are routed.
//!
//! In training mode a batch-norm layer normalizes with batch moments. A batch may
//! mix branches (see [`BranchLayout`]); the moments behind a statistics set are
//! always computed from the samples of the branch that owns the set. A shared set
//! is owned by every sample, which gives mixture statistics for `Single` and
//! `DualApOnly`. Under `Cross` the adversarial samples are therefore normalized by
//! moments of the clean samples in the same batch and vice versa.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BranchTag {
    Clean,
    Adv,
}

impl BranchTag {
    pub const ALL: [BranchTag; 2] = [BranchTag::Clean, BranchTag::Adv];

    /// Index of this branch's set when a layer holds two sets.
    pub fn index(self) -> usize {
        match self {
            BranchTag::Clean => 0,
            BranchTag::Adv => 1,
        }
    }

    pub fn other(self) -> Self {
        match self {
            BranchTag::Clean => BranchTag::Adv,
            BranchTag::Adv => BranchTag::Clean,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            BranchTag::Clean => "clean",
            BranchTag::Adv => "adv",
        }
    }
}

impl std::str::FromStr for BranchTag {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clean" => Ok(BranchTag::Clean),
            "adv" => Ok(BranchTag::Adv),
            _ => Err(Error::config(format!("unknown branch `{s}` (expected clean|adv)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    Batch,
    Layer,
    Group,
    Instance,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    Single,
    Dual,
    Cross,
    DualApOnly,
    DualNsOnly,
}

impl NormMode {
    pub fn stats_sets(self) -> usize {
        match self {
            NormMode::Single | NormMode::DualApOnly => 1,
            NormMode::Dual | NormMode::Cross | NormMode::DualNsOnly => 2,
        }
    }

    pub fn affine_sets(self) -> usize {
        match self {
            NormMode::Single | NormMode::DualNsOnly => 1,
            NormMode::Dual | NormMode::Cross | NormMode::DualApOnly => 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormConfig {
    pub kind: NormKind,
    pub mode: NormMode,
    pub eps: f64,
    pub momentum: f64,
    /// Only read for [`NormKind::Group`].
    pub group_count: usize,
}

impl Default for NormConfig {
    fn default() -> Self {
        Self {
            kind: NormKind::Batch,
            mode: NormMode::Single,
            eps: DEFAULT_EPS,
            momentum: DEFAULT_MOMENTUM,
            group_count: 1,
        }
    }
}

impl NormConfig {
    pub fn new(kind: NormKind, mode: NormMode) -> Self {
        Self {
            kind,
            mode,
            ..Self::default()
        }
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.group_count = groups;
        self
    }

    pub fn validate(&self, channels: usize) -> Result<()> {
        if !(self.eps > 0.0) {
            return Err(Error::config(format!("eps must be > 0, got {}", self.eps)));
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return Err(Error::config(format!(
                "momentum must lie in [0, 1], got {}",
                self.momentum
            )));
        }
        if self.kind == NormKind::Group && (self.group_count == 0 || !channels.is_multiple_of(self.group_count)) {
            return Err(Error::config(format!(
                "group_count {} does not divide {channels} channels",
                self.group_count
            )));
        }
        Ok(())
    }

    pub fn has_running_stats(&self) -> bool {
        self.kind == NormKind::Batch
    }

    /// Number of normalization groups per sample for per-sample kinds.
    fn groups(&self, channels: usize) -> usize {
        match self.kind {
            NormKind::Layer => 1,
            NormKind::Instance => channels,
            NormKind::Group => self.group_count,
            NormKind::Batch => unreachable!("batch norm has no per-sample groups"),
        }
    }
}

/// Running (or injected) per-channel mean and population variance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub momentum: T,
}

impl<T: Real> NormStats<T> {
    /// Fresh statistics: mean 0, variance 1.
    pub fn init(channels: usize, momentum: f64) -> Self {
        Self {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
            momentum: T::c(momentum),
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    pub fn sigma(&self) -> Vec<T> {
        self.var.iter().map(|v| v.sqrt()).collect()
    }

    fn check(&self, channels: usize) -> Result<()> {
        if self.mean.len() != channels || self.var.len() != channels {
            return Err(Error::Shape(format!(
                "stats hold {}/{} channels, layer has {channels}",
                self.mean.len(),
                self.var.len()
            )));
        }
        if self.var.iter().any(|v| *v < T::zero()) {
            return Err(Error::numerical("negative variance in normalization statistics"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineParams<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

impl<T: Real> AffineParams<T> {
    pub fn init(channels: usize) -> Self {
        Self {
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }
}

/// `r <- (1 - momentum) r + momentum b`, applied to mean and variance.
pub fn update_running<T: Real>(stats: &NormStats<T>, batch_mean: &[T], batch_var: &[T]) -> Result<NormStats<T>> {
    if batch_mean.len() != stats.mean.len() || batch_var.len() != stats.var.len() {
        return Err(Error::precondition(format!(
            "batch moments have {}/{} channels, running stats {}",
            batch_mean.len(),
            batch_var.len(),
            stats.mean.len()
        )));
    }
    if batch_var.iter().any(|v| *v < T::zero() || !v.is_finite()) {
        return Err(Error::numerical("batch variance must be finite and non-negative"));
    }
    let m = stats.momentum;
    let keep = T::one() - m;
    Ok(NormStats {
        mean: stats
            .mean
            .iter()
            .zip(batch_mean)
            .map(|(&r, &b)| keep * r + m * b)
            .collect(),
        var: stats
            .var
            .iter()
            .zip(batch_var)
            .map(|(&r, &b)| keep * r + m * b)
            .collect(),
        momentum: m,
    })
}

/// Which sets a branch reads: indices into [`NormLayerState::stats`] and [`NormLayerState::affine`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Route {
    pub stats: usize,
    pub affine: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormLayerState<T> {
    pub channels: usize,
    pub config: NormConfig,
    /// Indexed by [`BranchTag::index`] when two sets exist; empty for per-sample kinds.
    pub stats: Vec<NormStats<T>>,
    pub affine: Vec<AffineParams<T>>,
}

impl<T: Real> NormLayerState<T> {
    pub fn new(channels: usize, config: NormConfig) -> Result<Self> {
        config.validate(channels)?;
        let n_stats = if config.has_running_stats() {
            config.mode.stats_sets()
        } else {
            0
        };
        Ok(Self {
            channels,
            config,
            stats: (0..n_stats)
                .map(|_| NormStats::init(channels, config.momentum))
                .collect(),
            affine: (0..config.mode.affine_sets())
                .map(|_| AffineParams::init(channels))
                .collect(),
        })
    }

    /// Checks set counts and vector lengths against the configured kind and mode.
    pub fn validate(&self) -> Result<()> {
        self.config.validate(self.channels)?;
        let want_stats = if self.config.has_running_stats() {
            self.config.mode.stats_sets()
        } else {
            0
        };
        if self.stats.len() != want_stats || self.affine.len() != self.config.mode.affine_sets() {
            return Err(Error::config(format!(
                "{:?}/{:?} layer needs {want_stats} NS + {} AP sets, holds {} + {}",
                self.config.kind,
                self.config.mode,
                self.config.mode.affine_sets(),
                self.stats.len(),
                self.affine.len()
            )));
        }
        for s in &self.stats {
            s.check(self.channels)?;
        }
        for a in &self.affine {
            if a.gamma.len() != self.channels || a.beta.len() != self.channels {
                return Err(Error::Shape("affine length differs from channel count".into()));
            }
        }
        Ok(())
    }

    /// Set ids the given branch reads under this layer's mode.
    pub fn select_params(&self, branch: BranchTag) -> Result<Route> {
        let b = branch.index();
        let route = match self.config.mode {
            NormMode::Single => Route { stats: 0, affine: 0 },
            NormMode::Dual => Route { stats: b, affine: b },
            NormMode::Cross => Route {
                stats: branch.other().index(),
                affine: b,
            },
            NormMode::DualApOnly => Route { stats: 0, affine: b },
            NormMode::DualNsOnly => Route { stats: b, affine: 0 },
        };
        if route.affine >= self.affine.len() || (self.config.has_running_stats() && route.stats >= self.stats.len()) {
            return Err(Error::config(format!(
                "{branch:?} branch routes to NS set {} / AP set {}, but layer holds {} / {}",
                route.stats,
                route.affine,
                self.stats.len(),
                self.affine.len()
            )));
        }
        Ok(route)
    }

    /// Branch whose samples produce the batch moments of stats set `set`.
    fn set_owner(&self, set: usize) -> Option<BranchTag> {
        if self.stats.len() <= 1 {
            None
        } else {
            Some(BranchTag::ALL[set])
        }
    }

    /// Applies batch moments captured in a training forward to the routed running sets.
    pub fn commit(&mut self, moments: &[BatchMoments<T>]) -> Result<()> {
        for m in moments {
            let stats = self
                .stats
                .get(m.set)
                .ok_or_else(|| Error::config(format!("no NS set {}", m.set)))?;
            self.stats[m.set] = update_running(stats, &m.mean, &m.var)?;
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        2 * self.channels * self.affine.len()
    }
}

/// How the samples of one forward batch are tagged.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BranchLayout {
    /// Every sample carries the same tag.
    Uniform(BranchTag),
    /// The first `clean` samples are clean, the rest adversarial.
    Split { clean: usize },
}

impl BranchLayout {
    pub fn segments(self, batch: usize) -> Vec<(BranchTag, Range<usize>)> {
        match self {
            BranchLayout::Uniform(tag) => vec![(tag, 0..batch)],
            BranchLayout::Split { clean } => {
                let clean = clean.min(batch);
                let mut v = Vec::with_capacity(2);
                if clean > 0 {
                    v.push((BranchTag::Clean, 0..clean));
                }
                if clean < batch {
                    v.push((BranchTag::Adv, clean..batch));
                }
                v
            }
        }
    }
}

/// Per-forward options for one layer.
#[derive(Clone, Copy, Debug, Default)]
pub struct NormCall<'a, T> {
    pub train: bool,
    /// Replaces batch moments (training) or running moments (evaluation) for every sample.
    pub stats_override: Option<&'a NormStats<T>>,
    /// Bypasses mode routing with explicit set ids.
    pub explicit: Option<Route>,
}

/// Batch moments of one statistics set observed during a training forward.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchMoments<T> {
    pub set: usize,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Real> BatchMoments<T> {
    pub fn as_stats(&self, momentum: f64) -> NormStats<T> {
        NormStats {
            mean: self.mean.clone(),
            var: self.var.clone(),
            momentum: T::c(momentum),
        }
    }
}

#[derive(Clone, Debug)]
struct SegmentRoute {
    range: Range<usize>,
    route: Route,
}

/// Moment coupling for the backward pass.
#[derive(Clone, Debug)]
enum MomentKind {
    /// Fixed moments (running stats or override): `rstd` per segment and channel.
    Fixed { rstd: Vec<Vec<f64>> },
    /// Batch moments: one entry per active stats set.
    Batch { sets: Vec<SetCoupling> },
    /// Per-sample moments over `groups` channel groups: `rstd[n * groups + g]`.
    PerSample { groups: usize, rstd: Vec<f64> },
}

#[derive(Clone, Debug)]
struct SetCoupling {
    owners: Vec<Range<usize>>,
    users: Vec<usize>,
    mean: Vec<f64>,
    rstd: Vec<f64>,
}

/// State kept from a forward pass for [`NormCache::backward`].
#[derive(Clone, Debug)]
pub struct NormCache<T> {
    batch: usize,
    channels: usize,
    spatial: usize,
    xhat: Vec<T>,
    /// Input activations, kept only when batch moments couple samples.
    input: Vec<T>,
    segments: Vec<SegmentRoute>,
    moments: MomentKind,
    /// Batch moments to commit to running stats (BN training without override).
    pub batch_moments: Vec<BatchMoments<T>>,
}

/// Gradients produced by a normalization layer.
#[derive(Clone, Debug)]
pub struct NormGrads<T> {
    pub input: Tensor<T>,
    /// Per AP set; `None` when no sample in the batch read that set.
    pub affine: Vec<Option<AffineParams<T>>>,
}

fn layout_dims<T: Real>(x: &Tensor<T>, channels: usize) -> Result<(usize, usize)> {
    if x.rank() < 2 {
        return Err(Error::Shape(format!(
            "normalization input needs [batch, channels, ...], got {:?}",
            x.shape()
        )));
    }
    let n = x.dim(0);
    if n == 0 {
        return Err(Error::precondition("empty batch"));
    }
    if x.dim(1) != channels {
        return Err(Error::Shape(format!(
            "input has {} channels, layer has {channels}",
            x.dim(1)
        )));
    }
    Ok((n, x.shape()[2..].iter().product()))
}

/// Forward of a batch that belongs to one branch: `(x - mu) / sqrt(var + eps) * gamma + beta`.
pub fn normalize_forward<T: Real>(
    x: &Tensor<T>,
    branch: BranchTag,
    train_mode: bool,
    state: &NormLayerState<T>,
    stats_override: Option<&NormStats<T>>,
) -> Result<Tensor<T>> {
    let call = NormCall {
        train: train_mode,
        stats_override,
        explicit: None,
    };
    Ok(forward(x, BranchLayout::Uniform(branch), call, state)?.0)
}

/// Full forward with mixed-branch layouts; returns output and backward cache.
pub fn forward<T: Real>(
    x: &Tensor<T>,
    layout: BranchLayout,
    call: NormCall<'_, T>,
    state: &NormLayerState<T>,
) -> Result<(Tensor<T>, NormCache<T>)> {
    let c = state.channels;
    let (n, spatial) = layout_dims(x, c)?;
    if !x.all_finite() {
        return Err(Error::numerical("non-finite activation entering normalization"));
    }
    let segments = layout
        .segments(n)
        .into_iter()
        .map(|(tag, range)| {
            let route = match call.explicit {
                Some(r) => {
                    if r.affine >= state.affine.len()
                        || (state.config.has_running_stats() && r.stats >= state.stats.len())
                    {
                        return Err(Error::config(format!(
                            "explicit route {r:?} outside layer sets {} / {}",
                            state.stats.len(),
                            state.affine.len()
                        )));
                    }
                    r
                }
                None => state.select_params(tag)?,
            };
            Ok((tag, SegmentRoute { range, route }))
        })
        .collect::<Result<Vec<_>>>()?;

    let eps = state.config.eps;
    let mut xhat = vec![T::zero(); x.len()];
    let xs = x.data();
    let idx = |i: usize, ch: usize| (i * c + ch) * spatial;

    let (moments, batch_moments) = if state.config.kind == NormKind::Batch {
        if let Some(ov) = call.stats_override {
            ov.check(c)?;
            let rstd: Vec<f64> = ov.var.iter().map(|v| 1.0 / (v.as_f64() + eps).sqrt()).collect();
            for (_, seg) in &segments {
                normalize_fixed(xs, &mut xhat, seg.range.clone(), c, spatial, &ov.mean, &rstd);
            }
            let per_seg = vec![rstd; segments.len()];
            (MomentKind::Fixed { rstd: per_seg }, Vec::new())
        } else if !call.train {
            let mut per_seg = Vec::with_capacity(segments.len());
            for (_, seg) in &segments {
                let st = &state.stats[seg.route.stats];
                let rstd: Vec<f64> = st.var.iter().map(|v| 1.0 / (v.as_f64() + eps).sqrt()).collect();
                normalize_fixed(xs, &mut xhat, seg.range.clone(), c, spatial, &st.mean, &rstd);
                per_seg.push(rstd);
            }
            (MomentKind::Fixed { rstd: per_seg }, Vec::new())
        } else {
            let mut sets: Vec<usize> = segments.iter().map(|(_, s)| s.route.stats).collect();
            sets.sort_unstable();
            sets.dedup();
            let mut couplings = Vec::with_capacity(sets.len());
            let mut committed = Vec::with_capacity(sets.len());
            for set in sets {
                let owners: Vec<Range<usize>> = match state.set_owner(set) {
                    None => segments.iter().map(|(_, s)| s.range.clone()).collect(),
                    Some(owner) => segments
                        .iter()
                        .filter(|(tag, _)| *tag == owner)
                        .map(|(_, s)| s.range.clone())
                        .collect(),
                };
                let count: usize = owners.iter().map(|r| r.len()).sum();
                if count == 0 {
                    return Err(Error::config(format!(
                        "NS set {set} is computed from {:?} samples, none present in this batch; supply a stats override",
                        state.set_owner(set).unwrap_or(BranchTag::Clean)
                    )));
                }
                let m = (count * spatial) as f64;
                let mut mean = vec![0.0f64; c];
                let mut var = vec![0.0f64; c];
                for ch in 0..c {
                    let mut s = 0.0;
                    for r in &owners {
                        for i in r.clone() {
                            s += xs[idx(i, ch)..idx(i, ch) + spatial]
                                .iter()
                                .map(|v| v.as_f64())
                                .sum::<f64>();
                        }
                    }
                    let mu = s / m;
                    let mut q = 0.0;
                    for r in &owners {
                        for i in r.clone() {
                            q += xs[idx(i, ch)..idx(i, ch) + spatial]
                                .iter()
                                .map(|v| {
                                    let d = v.as_f64() - mu;
                                    d * d
                                })
                                .sum::<f64>();
                        }
                    }
                    mean[ch] = mu;
                    var[ch] = q / m;
                }
                let rstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
                let users: Vec<usize> = segments
                    .iter()
                    .enumerate()
                    .filter(|(_, (_, s))| s.route.stats == set)
                    .map(|(k, _)| k)
                    .collect();
                let mean_t: Vec<T> = mean.iter().map(|&v| T::c(v)).collect();
                for &u in &users {
                    normalize_fixed(xs, &mut xhat, segments[u].1.range.clone(), c, spatial, &mean_t, &rstd);
                }
                committed.push(BatchMoments {
                    set,
                    mean: mean_t,
                    var: var.iter().map(|&v| T::c(v)).collect(),
                });
                couplings.push(SetCoupling {
                    owners,
                    users,
                    mean,
                    rstd,
                });
            }
            (MomentKind::Batch { sets: couplings }, committed)
        }
    } else {
        if call.stats_override.is_some() {
            return Err(Error::config(format!(
                "{:?} normalization has no statistics to override",
                state.config.kind
            )));
        }
        let groups = state.config.groups(c);
        let per = c / groups;
        let m = (per * spatial) as f64;
        let mut rstd = vec![0.0; n * groups];
        for i in 0..n {
            for g in 0..groups {
                let lo = idx(i, g * per);
                let hi = lo + per * spatial;
                let block = &xs[lo..hi];
                let mu = block.iter().map(|v| v.as_f64()).sum::<f64>() / m;
                let var = block
                    .iter()
                    .map(|v| {
                        let d = v.as_f64() - mu;
                        d * d
                    })
                    .sum::<f64>()
                    / m;
                let r = 1.0 / (var + eps).sqrt();
                rstd[i * groups + g] = r;
                for (o, v) in xhat[lo..hi].iter_mut().zip(block) {
                    *o = T::c((v.as_f64() - mu) * r);
                }
            }
        }
        (MomentKind::PerSample { groups, rstd }, Vec::new())
    };

    let mut out = vec![T::zero(); x.len()];
    for (_, seg) in &segments {
        let ap = &state.affine[seg.route.affine];
        for i in seg.range.clone() {
            for ch in 0..c {
                let (g, b) = (ap.gamma[ch], ap.beta[ch]);
                let lo = idx(i, ch);
                for (o, &h) in out[lo..lo + spatial].iter_mut().zip(&xhat[lo..lo + spatial]) {
                    *o = h * g + b;
                }
            }
        }
    }

    let input = match moments {
        MomentKind::Batch { .. } => xs.to_vec(),
        _ => Vec::new(),
    };
    let cache = NormCache {
        batch: n,
        channels: c,
        spatial,
        xhat,
        input,
        segments: segments.into_iter().map(|(_, s)| s).collect(),
        moments,
        batch_moments,
    };
    Ok((Tensor::from_vec(x.shape(), out)?, cache))
}

fn normalize_fixed<T: Real>(
    xs: &[T],
    xhat: &mut [T],
    range: Range<usize>,
    c: usize,
    spatial: usize,
    mean: &[T],
    rstd: &[f64],
) {
    for i in range {
        for ch in 0..c {
            let lo = (i * c + ch) * spatial;
            let mu = mean[ch];
            let r = T::c(rstd[ch]);
            for (o, &v) in xhat[lo..lo + spatial].iter_mut().zip(&xs[lo..lo + spatial]) {
                *o = (v - mu) * r;
            }
        }
    }
}

impl<T: Real> NormCache<T> {
    /// Normalized activations before the affine transform.
    pub fn xhat(&self) -> &[T] {
        &self.xhat
    }

    /// Back-propagates `dy` through the layer. `want_params` controls AP gradients.
    pub fn backward(&self, dy: &Tensor<T>, state: &NormLayerState<T>, want_params: bool) -> Result<NormGrads<T>> {
        let (n, c, sp) = (self.batch, self.channels, self.spatial);
        if dy.len() != n * c * sp {
            return Err(Error::Shape(
                "normalization backward: gradient shape differs from forward".into(),
            ));
        }
        let dys = dy.data();
        let idx = |i: usize, ch: usize| (i * c + ch) * sp;

        let mut affine: Vec<Option<AffineParams<T>>> = vec![None; state.affine.len()];
        if want_params {
            for seg in &self.segments {
                let slot = affine[seg.route.affine].get_or_insert_with(|| AffineParams {
                    gamma: vec![T::zero(); c],
                    beta: vec![T::zero(); c],
                });
                for i in seg.range.clone() {
                    for ch in 0..c {
                        let lo = idx(i, ch);
                        let mut dg = 0.0f64;
                        let mut db = 0.0f64;
                        for (g, h) in dys[lo..lo + sp].iter().zip(&self.xhat[lo..lo + sp]) {
                            dg += g.as_f64() * h.as_f64();
                            db += g.as_f64();
                        }
                        slot.gamma[ch] += T::c(dg);
                        slot.beta[ch] += T::c(db);
                    }
                }
            }
        }

        // Gradient w.r.t. xhat.
        let mut gx = vec![0.0f64; dy.len()];
        for seg in &self.segments {
            let ap = &state.affine[seg.route.affine];
            for i in seg.range.clone() {
                for ch in 0..c {
                    let lo = idx(i, ch);
                    let gam = ap.gamma[ch].as_f64();
                    for (o, g) in gx[lo..lo + sp].iter_mut().zip(&dys[lo..lo + sp]) {
                        *o = g.as_f64() * gam;
                    }
                }
            }
        }

        let mut dx = vec![0.0f64; dy.len()];
        match &self.moments {
            MomentKind::Fixed { rstd } => {
                for (seg, r) in self.segments.iter().zip(rstd) {
                    for i in seg.range.clone() {
                        for ch in 0..c {
                            let lo = idx(i, ch);
                            for k in lo..lo + sp {
                                dx[k] = gx[k] * r[ch];
                            }
                        }
                    }
                }
            }
            MomentKind::Batch { sets } => {
                for set in sets {
                    let count: usize = set.owners.iter().map(|r| r.len()).sum();
                    let m = (count * sp) as f64;
                    for ch in 0..c {
                        let r = set.rstd[ch];
                        let mu = set.mean[ch];
                        let mut sum_g = 0.0;
                        let mut sum_gx = 0.0;
                        for &u in &set.users {
                            for i in self.segments[u].range.clone() {
                                let lo = idx(i, ch);
                                for k in lo..lo + sp {
                                    dx[k] += gx[k] * r;
                                    sum_g += gx[k];
                                    sum_gx += gx[k] * self.xhat[k].as_f64();
                                }
                            }
                        }
                        let scale = r / m;
                        for range in &set.owners {
                            for i in range.clone() {
                                let lo = idx(i, ch);
                                for k in lo..lo + sp {
                                    // Under Cross routing an owner sample is normalized by the
                                    // other set, so its deviation is recomputed against this one.
                                    let h = (self.input[k].as_f64() - mu) * r;
                                    dx[k] -= scale * (sum_g + h * sum_gx);
                                }
                            }
                        }
                    }
                }
            }
            MomentKind::PerSample { groups, rstd } => {
                let per = c / groups;
                let m = (per * sp) as f64;
                for i in 0..n {
                    for g in 0..*groups {
                        let lo = idx(i, g * per);
                        let hi = lo + per * sp;
                        let r = rstd[i * groups + g];
                        let sum_g: f64 = gx[lo..hi].iter().sum();
                        let sum_gx: f64 = gx[lo..hi]
                            .iter()
                            .zip(&self.xhat[lo..hi])
                            .map(|(a, b)| a * b.as_f64())
                            .sum();
                        for k in lo..hi {
                            dx[k] = r * (gx[k] - (sum_g + self.xhat[k].as_f64() * sum_gx) / m);
                        }
                    }
                }
            }
        }

        Ok(NormGrads {
            input: Tensor::from_vec(dy.shape(), dx.into_iter().map(T::c).collect())?,
            affine,
        })
    }
}
