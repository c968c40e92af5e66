//! Backbones with injectable normalization layers and one or two classifier heads.

pub mod layers;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss;
use crate::normcore::{
    self, AffineParams, BatchMoments, BranchLayout, BranchTag, NormCache, NormCall, NormConfig, NormLayerState,
    NormStats, Route,
};
use crate::tensor::{Real, Tensor};
use layers::{Conv2d, Linear};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchFamily {
    /// Four conv/norm/relu stages, two max-pools, global pooling, linear head.
    SmallCnn,
    /// CIFAR ResNet-18: 3x3 stem, four stages of two basic blocks, no stem pooling.
    Resnet18,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub family: ArchFamily,
    /// Multiplier on the base stage widths.
    pub width: f64,
    pub classes: usize,
    pub in_channels: usize,
    pub image_size: usize,
}

impl Architecture {
    pub fn small_cnn(classes: usize) -> Self {
        Self {
            family: ArchFamily::SmallCnn,
            width: 1.0,
            classes,
            in_channels: 3,
            image_size: 32,
        }
    }

    pub fn resnet18(classes: usize) -> Self {
        Self {
            family: ArchFamily::Resnet18,
            width: 1.0,
            classes,
            in_channels: 3,
            image_size: 32,
        }
    }

    pub fn with_width(mut self, width: f64) -> Self {
        self.width = width;
        self
    }

    pub fn with_input(mut self, channels: usize, size: usize) -> Self {
        self.in_channels = channels;
        self.image_size = size;
        self
    }

    fn scaled(&self, base: usize) -> usize {
        ((base as f64 * self.width).round() as usize).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.width > 0.0) || self.classes < 2 || self.in_channels == 0 {
            return Err(Error::config(format!("invalid architecture {self:?}")));
        }
        let min = match self.family {
            ArchFamily::SmallCnn => 4,
            ArchFamily::Resnet18 => 8,
        };
        if self.image_size < min {
            return Err(Error::config(format!(
                "{:?} needs images of at least {min}x{min}",
                self.family
            )));
        }
        Ok(())
    }
}

/// Which classifier head produces the logits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadSelect {
    Clean,
    Adv,
    /// Head matching the sample's branch (head 0 when the model has one head).
    Default,
}

#[derive(Clone, Debug, PartialEq)]
enum Node {
    ConvNorm {
        conv: usize,
        norm: usize,
    },
    MaxPool,
    Block {
        conv1: usize,
        norm1: usize,
        conv2: usize,
        norm2: usize,
        shortcut: Option<(usize, usize)>,
    },
}

#[derive(Clone, Debug)]
struct ConvSpec {
    cin: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
}

#[derive(Clone, Debug)]
struct Topology {
    convs: Vec<ConvSpec>,
    norms: Vec<(String, usize)>,
    nodes: Vec<Node>,
    features: usize,
}

fn topology(arch: &Architecture) -> Topology {
    let mut convs = Vec::new();
    let mut norms = Vec::new();
    let mut nodes = Vec::new();
    let mut conv = |cin, cout, k, stride, pad| {
        convs.push(ConvSpec {
            cin,
            cout,
            k,
            stride,
            pad,
        });
        convs.len() - 1
    };
    let mut norm = |name: String, ch| {
        norms.push((name, ch));
        norms.len() - 1
    };
    let features = match arch.family {
        ArchFamily::SmallCnn => {
            let w: Vec<usize> = [32, 64, 64, 128].iter().map(|&b| arch.scaled(b)).collect();
            let mut cin = arch.in_channels;
            for (i, &cout) in w.iter().enumerate() {
                let c = conv(cin, cout, 3, 1, 1);
                let n = norm(format!("conv{}.norm", i + 1), cout);
                nodes.push(Node::ConvNorm { conv: c, norm: n });
                if i % 2 == 1 {
                    nodes.push(Node::MaxPool);
                }
                cin = cout;
            }
            cin
        }
        ArchFamily::Resnet18 => {
            let w: Vec<usize> = [64, 128, 256, 512].iter().map(|&b| arch.scaled(b)).collect();
            let c = conv(arch.in_channels, w[0], 3, 1, 1);
            let n = norm("stem.norm".into(), w[0]);
            nodes.push(Node::ConvNorm { conv: c, norm: n });
            let mut cin = w[0];
            for (s, &cout) in w.iter().enumerate() {
                for b in 0..2 {
                    let stride = if s > 0 && b == 0 { 2 } else { 1 };
                    let prefix = format!("layer{}.{}", s + 1, b);
                    let conv1 = conv(cin, cout, 3, stride, 1);
                    let norm1 = norm(format!("{prefix}.norm1"), cout);
                    let conv2 = conv(cout, cout, 3, 1, 1);
                    let norm2 = norm(format!("{prefix}.norm2"), cout);
                    let shortcut = (stride != 1 || cin != cout).then(|| {
                        let c = conv(cin, cout, 1, stride, 0);
                        (c, norm(format!("{prefix}.shortcut.norm"), cout))
                    });
                    nodes.push(Node::Block {
                        conv1,
                        norm1,
                        conv2,
                        norm2,
                        shortcut,
                    });
                    cin = cout;
                }
            }
            cin
        }
    };
    Topology {
        convs,
        norms,
        nodes,
        features,
    }
}

/// Parameters, normalization state and topology of one network.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState<T> {
    pub arch: Architecture,
    pub norm: NormConfig,
    pub convs: Vec<Conv2d<T>>,
    pub norms: Vec<NormLayerState<T>>,
    pub norm_names: Vec<String>,
    pub heads: Vec<Linear<T>>,
    nodes: Vec<Node>,
}

/// How one forward pass routes samples through norm layers and heads.
#[derive(Clone, Copy, Debug)]
pub struct Routing<'a, T> {
    pub layout: BranchLayout,
    pub train: bool,
    pub head: HeadSelect,
    /// Per norm layer; `Some` replaces that layer's moments for every sample.
    pub overrides: Option<&'a [Option<NormStats<T>>]>,
    /// Explicit NS/AP set ids for every layer (deployment of arbitrary pairs).
    pub explicit: Option<Route>,
}

impl<'a, T> Routing<'a, T> {
    pub fn eval(branch: BranchTag) -> Self {
        Self {
            layout: BranchLayout::Uniform(branch),
            train: false,
            head: HeadSelect::Default,
            overrides: None,
            explicit: None,
        }
    }

    pub fn train(layout: BranchLayout) -> Self {
        Self {
            layout,
            train: true,
            head: HeadSelect::Default,
            overrides: None,
            explicit: None,
        }
    }

    pub fn with_head(mut self, head: HeadSelect) -> Self {
        self.head = head;
        self
    }

    pub fn with_overrides(mut self, overrides: &'a [Option<NormStats<T>>]) -> Self {
        self.overrides = Some(overrides);
        self
    }

    pub fn with_explicit(mut self, route: Route) -> Self {
        self.explicit = Some(route);
        self
    }
}

#[derive(Clone, Debug)]
#[allow(clippy::large_enum_variant)]
enum NodeCache<T> {
    ConvNorm {
        x: Tensor<T>,
        norm: NormCache<T>,
        y: Tensor<T>,
    },
    MaxPool {
        in_shape: Vec<usize>,
        arg: Vec<usize>,
    },
    Block {
        x: Tensor<T>,
        mid: Tensor<T>,
        n1: NormCache<T>,
        n2: NormCache<T>,
        shortcut: Option<NormCache<T>>,
        y: Tensor<T>,
    },
}

/// Intermediate values of a forward pass, consumed by [`ModelState::backward`].
#[derive(Clone, Debug)]
pub struct Trace<T> {
    nodes: Vec<NodeCache<T>>,
    pooled_shape: Vec<usize>,
    features: Tensor<T>,
    /// `(head index, sample range)` per layout segment.
    heads: Vec<(usize, std::ops::Range<usize>)>,
    /// Batch moments per norm layer (empty outside BN training).
    moments: Vec<Vec<BatchMoments<T>>>,
}

impl<T: Real> Trace<T> {
    pub fn batch_moments(&self) -> &[Vec<BatchMoments<T>>] {
        &self.moments
    }

    /// Per-layer statistics of NS set `set` observed in this batch, for injection as overrides.
    pub fn captured_stats(&self, set: usize, momentum: f64) -> Vec<Option<NormStats<T>>> {
        self.moments
            .iter()
            .map(|layer| layer.iter().find(|m| m.set == set).map(|m| m.as_stats(momentum)))
            .collect()
    }

    /// Penultimate features `[batch, features]`.
    pub fn features(&self) -> &Tensor<T> {
        &self.features
    }
}

pub struct Forward<T> {
    pub logits: Tensor<T>,
    pub trace: Trace<T>,
}

/// Gradients mirroring [`ModelState`] parameters. `None` marks parameters the batch never touched.
#[derive(Clone, Debug, PartialEq)]
pub struct Grads<T> {
    pub convs: Vec<Option<Tensor<T>>>,
    pub norms: Vec<Vec<Option<AffineParams<T>>>>,
    pub heads: Vec<Option<Linear<T>>>,
}

fn add_vec<T: Real>(a: &mut [T], b: &[T]) {
    for (x, &y) in a.iter_mut().zip(b) {
        *x += y;
    }
}

impl<T: Real> Grads<T> {
    /// Adds `other` into `self`, keeping `None` only where both are `None`.
    pub fn accumulate(&mut self, other: Grads<T>) {
        for (a, b) in self.convs.iter_mut().zip(other.convs) {
            match (a.as_mut(), b) {
                (Some(a), Some(b)) => a.add_assign(&b),
                (None, Some(b)) => *a = Some(b),
                _ => {}
            }
        }
        for (la, lb) in self.norms.iter_mut().zip(other.norms) {
            for (a, b) in la.iter_mut().zip(lb) {
                match (a.as_mut(), b) {
                    (Some(a), Some(b)) => {
                        add_vec(&mut a.gamma, &b.gamma);
                        add_vec(&mut a.beta, &b.beta);
                    }
                    (None, Some(b)) => *a = Some(b),
                    _ => {}
                }
            }
        }
        for (a, b) in self.heads.iter_mut().zip(other.heads) {
            match (a.as_mut(), b) {
                (Some(a), Some(b)) => {
                    a.weight.add_assign(&b.weight);
                    add_vec(&mut a.bias, &b.bias);
                }
                (None, Some(b)) => *a = Some(b),
                _ => {}
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        for t in self.convs.iter_mut().flatten() {
            t.data_mut().iter_mut().for_each(|v| *v *= s);
        }
        for a in self.norms.iter_mut().flatten().flatten() {
            a.gamma.iter_mut().chain(a.beta.iter_mut()).for_each(|v| *v *= s);
        }
        for h in self.heads.iter_mut().flatten() {
            h.weight
                .data_mut()
                .iter_mut()
                .chain(h.bias.iter_mut())
                .for_each(|v| *v *= s);
        }
    }

    /// Gradient slices in [`ModelState::param_slots_mut`] order.
    pub fn slots(&self) -> Vec<Option<&[T]>> {
        let mut out: Vec<Option<&[T]>> = self.convs.iter().map(|c| c.as_ref().map(|t| t.data())).collect();
        for layer in &self.norms {
            for a in layer {
                out.push(a.as_ref().map(|a| a.gamma.as_slice()));
                out.push(a.as_ref().map(|a| a.beta.as_slice()));
            }
        }
        for h in &self.heads {
            out.push(h.as_ref().map(|h| h.weight.data()));
            out.push(h.as_ref().map(|h| h.bias.as_slice()));
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.convs.iter().flatten().all(|t| t.all_finite())
            && self
                .norms
                .iter()
                .flatten()
                .flatten()
                .all(|a| a.gamma.iter().chain(&a.beta).all(|v| v.is_finite()))
            && self
                .heads
                .iter()
                .flatten()
                .all(|h| h.weight.all_finite() && h.bias.iter().all(|v| v.is_finite()))
    }
}

pub fn build_model<T: Real>(arch: Architecture, norm: NormConfig, heads: usize, seed: u64) -> Result<ModelState<T>> {
    arch.validate()?;
    if !(1..=2).contains(&heads) {
        return Err(Error::config(format!("head count must be 1 or 2, got {heads}")));
    }
    let topo = topology(&arch);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let convs = topo
        .convs
        .iter()
        .map(|s| {
            // He initialization over fan-out.
            let std = (2.0 / (s.cout * s.k * s.k) as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("positive std");
            let shape = [s.cout, s.cin, s.k, s.k];
            let weight = Tensor::from_fn(&shape, |_| T::c(normal.sample(&mut rng)));
            Conv2d {
                weight,
                stride: s.stride,
                pad: s.pad,
            }
        })
        .collect();
    let norms = topo
        .norms
        .iter()
        .map(|(_, ch)| NormLayerState::new(*ch, norm))
        .collect::<Result<Vec<_>>>()?;
    let bound = 1.0 / (topo.features as f64).sqrt();
    let uni = Uniform::new_inclusive(-bound, bound).expect("finite bounds");
    let heads = (0..heads)
        .map(|_| Linear {
            weight: Tensor::from_fn(&[arch.classes, topo.features], |_| T::c(uni.sample(&mut rng))),
            bias: (0..arch.classes).map(|_| T::c(uni.sample(&mut rng))).collect(),
        })
        .collect();
    Ok(ModelState {
        arch,
        norm,
        convs,
        norms,
        norm_names: topo.norms.into_iter().map(|(n, _)| n).collect(),
        heads,
        nodes: topo.nodes,
    })
}

impl<T: Real> ModelState<T> {
    /// Reassembles a model from raw parts, validating shapes against the architecture.
    pub fn from_parts(
        arch: Architecture,
        norm: NormConfig,
        convs: Vec<Conv2d<T>>,
        norms: Vec<NormLayerState<T>>,
        heads: Vec<Linear<T>>,
    ) -> Result<Self> {
        arch.validate()?;
        let topo = topology(&arch);
        if convs.len() != topo.convs.len() || norms.len() != topo.norms.len() {
            return Err(Error::Shape(format!(
                "architecture needs {} convs / {} norms, got {} / {}",
                topo.convs.len(),
                topo.norms.len(),
                convs.len(),
                norms.len()
            )));
        }
        for (c, s) in convs.iter().zip(&topo.convs) {
            if c.weight.shape() != [s.cout, s.cin, s.k, s.k] || c.stride != s.stride || c.pad != s.pad {
                return Err(Error::Shape(format!(
                    "conv weight {:?} does not match topology",
                    c.weight.shape()
                )));
            }
        }
        for (n, (_, ch)) in norms.iter().zip(&topo.norms) {
            if n.channels != *ch || n.config != norm {
                return Err(Error::Shape("norm layer does not match topology/config".into()));
            }
            n.validate()?;
        }
        if !(1..=2).contains(&heads.len())
            || heads
                .iter()
                .any(|h| h.weight.shape() != [arch.classes, topo.features] || h.bias.len() != arch.classes)
        {
            return Err(Error::Shape("classifier heads do not match topology".into()));
        }
        Ok(Self {
            arch,
            norm,
            convs,
            norms,
            norm_names: topo.norms.into_iter().map(|(n, _)| n).collect(),
            heads,
            nodes: topo.nodes,
        })
    }

    pub fn param_count(&self) -> usize {
        self.convs.iter().map(|c| c.weight.len()).sum::<usize>()
            + self.norms.iter().map(|n| n.param_count()).sum::<usize>()
            + self.heads.iter().map(|h| h.weight.len() + h.bias.len()).sum::<usize>()
    }

    /// Every trainable tensor as a flat slice: convs, then per norm layer each AP set's
    /// `gamma` and `beta`, then each head's weight and bias.
    pub fn param_slots_mut(&mut self) -> Vec<&mut [T]> {
        let mut out: Vec<&mut [T]> = self.convs.iter_mut().map(|c| c.weight.data_mut()).collect();
        for layer in &mut self.norms {
            for a in &mut layer.affine {
                out.push(a.gamma.as_mut_slice());
                out.push(a.beta.as_mut_slice());
            }
        }
        for h in &mut self.heads {
            out.push(h.weight.data_mut());
            out.push(h.bias.as_mut_slice());
        }
        out
    }

    pub fn norm_index(&self, name: &str) -> Result<usize> {
        self.norm_names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::config(format!("unknown norm layer `{name}`")))
    }

    pub fn feature_dim(&self) -> usize {
        self.heads[0].in_features()
    }

    fn head_index(&self, select: HeadSelect, branch: BranchTag) -> Result<usize> {
        let idx = match select {
            HeadSelect::Default => {
                if self.heads.len() == 2 {
                    branch.index()
                } else {
                    0
                }
            }
            HeadSelect::Clean => 0,
            HeadSelect::Adv => 1,
        };
        if idx >= self.heads.len() {
            return Err(Error::config(format!(
                "head {select:?} requested but the model has {} head(s)",
                self.heads.len()
            )));
        }
        Ok(idx)
    }

    fn norm_call<'a>(&self, layer: usize, routing: &Routing<'a, T>) -> NormCall<'a, T> {
        NormCall {
            train: routing.train,
            stats_override: routing.overrides.and_then(|o| o.get(layer)).and_then(|o| o.as_ref()),
            explicit: routing.explicit,
        }
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let a = &self.arch;
        if x.rank() != 4 || x.dim(1) != a.in_channels || x.dim(2) != a.image_size || x.dim(3) != a.image_size {
            return Err(Error::Shape(format!(
                "expected [N, {}, {}, {}] images, got {:?}",
                a.in_channels,
                a.image_size,
                a.image_size,
                x.shape()
            )));
        }
        if x.dim(0) == 0 {
            return Err(Error::precondition("empty batch"));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor<T>, routing: &Routing<'_, T>) -> Result<Forward<T>> {
        self.check_input(x)?;
        if let Some(o) = routing.overrides {
            if o.len() != self.norms.len() {
                return Err(Error::config(format!(
                    "{} stats overrides for {} norm layers",
                    o.len(),
                    self.norms.len()
                )));
            }
        }
        let n = x.dim(0);
        let layout = routing.layout;
        let mut moments = vec![Vec::new(); self.norms.len()];
        let mut caches = Vec::with_capacity(self.nodes.len());
        let mut h = x.clone();
        let norm = |idx: usize,
                    input: &Tensor<T>,
                    moments: &mut Vec<Vec<BatchMoments<T>>>|
         -> Result<(Tensor<T>, NormCache<T>)> {
            let (y, mut cache) = normcore::forward(input, layout, self.norm_call(idx, routing), &self.norms[idx])?;
            moments[idx] = std::mem::take(&mut cache.batch_moments);
            Ok((y, cache))
        };
        for node in &self.nodes {
            match node {
                Node::ConvNorm { conv, norm: ni } => {
                    let a = self.convs[*conv].forward(&h)?;
                    let (b, nc) = norm(*ni, &a, &mut moments)?;
                    let y = layers::relu(&b);
                    caches.push(NodeCache::ConvNorm {
                        x: std::mem::replace(&mut h, y.clone()),
                        norm: nc,
                        y,
                    });
                }
                Node::MaxPool => {
                    let (y, arg) = layers::maxpool2(&h)?;
                    caches.push(NodeCache::MaxPool {
                        in_shape: h.shape().to_vec(),
                        arg,
                    });
                    h = y;
                }
                Node::Block {
                    conv1,
                    norm1,
                    conv2,
                    norm2,
                    shortcut,
                } => {
                    let a = self.convs[*conv1].forward(&h)?;
                    let (b, n1) = norm(*norm1, &a, &mut moments)?;
                    let mid = layers::relu(&b);
                    let d = self.convs[*conv2].forward(&mid)?;
                    let (mut e, n2) = norm(*norm2, &d, &mut moments)?;
                    let sc = match shortcut {
                        Some((c, ni)) => {
                            let s = self.convs[*c].forward(&h)?;
                            let (s, cache) = norm(*ni, &s, &mut moments)?;
                            e.add_assign(&s);
                            Some(cache)
                        }
                        None => {
                            e.add_assign(&h);
                            None
                        }
                    };
                    let y = layers::relu(&e);
                    caches.push(NodeCache::Block {
                        x: std::mem::replace(&mut h, y.clone()),
                        mid,
                        n1,
                        n2,
                        shortcut: sc,
                        y,
                    });
                }
            }
        }
        let pooled_shape = h.shape().to_vec();
        let features = layers::global_avg_pool(&h)?;
        let f = features.dim(1);
        let k = self.arch.classes;
        let mut logits = vec![T::zero(); n * k];
        let mut heads = Vec::new();
        for (tag, range) in layout.segments(n) {
            let hi = self.head_index(routing.head, tag)?;
            self.heads[hi].forward_rows(
                &features.data()[range.start * f..range.end * f],
                range.len(),
                &mut logits[range.start * k..range.end * k],
            );
            heads.push((hi, range));
        }
        let logits = Tensor::from_vec(&[n, k], logits)?;
        if !logits.all_finite() {
            return Err(Error::numerical("non-finite logits"));
        }
        Ok(Forward {
            logits,
            trace: Trace {
                nodes: caches,
                pooled_shape,
                features,
                heads,
                moments,
            },
        })
    }

    /// Convenience: logits only.
    pub fn logits(&self, x: &Tensor<T>, routing: &Routing<'_, T>) -> Result<Tensor<T>> {
        Ok(self.forward(x, routing)?.logits)
    }

    /// Back-propagates `dlogits`; returns parameter gradients (if requested) and the input gradient.
    pub fn backward(&self, trace: &Trace<T>, dlogits: &Tensor<T>, want_params: bool) -> Result<(Grads<T>, Tensor<T>)> {
        let n = trace.features.dim(0);
        let f = trace.features.dim(1);
        let k = self.arch.classes;
        if dlogits.shape() != [n, k] {
            return Err(Error::Shape(format!(
                "dlogits {:?}, expected [{n}, {k}]",
                dlogits.shape()
            )));
        }
        let mut grads = Grads {
            convs: vec![None; self.convs.len()],
            norms: self.norms.iter().map(|l| vec![None; l.affine.len()]).collect(),
            heads: vec![None; self.heads.len()],
        };
        let mut dfeat = vec![T::zero(); n * f];
        for (hi, range) in &trace.heads {
            let head = &self.heads[*hi];
            let x = &trace.features.data()[range.start * f..range.end * f];
            let dy = &dlogits.data()[range.start * k..range.end * k];
            let dx = &mut dfeat[range.start * f..range.end * f];
            if want_params {
                let slot = grads.heads[*hi].get_or_insert_with(|| Linear {
                    weight: Tensor::zeros(head.weight.shape()),
                    bias: vec![T::zero(); k],
                });
                let Linear { weight, bias } = slot;
                head.backward_rows(x, dy, range.len(), dx, Some((weight.data_mut(), bias)));
            } else {
                head.backward_rows(x, dy, range.len(), dx, None);
            }
        }
        let dfeat = Tensor::from_vec(&[n, f], dfeat)?;
        let mut g = layers::global_avg_pool_backward(&trace.pooled_shape, &dfeat);

        let put_conv = |grads: &mut Grads<T>, idx: usize, dw: Option<Tensor<T>>| {
            if let Some(dw) = dw {
                match grads.convs[idx].as_mut() {
                    Some(acc) => acc.add_assign(&dw),
                    None => grads.convs[idx] = Some(dw),
                }
            }
        };
        let put_norm = |grads: &mut Grads<T>, idx: usize, aff: Vec<Option<AffineParams<T>>>| {
            for (slot, a) in grads.norms[idx].iter_mut().zip(aff) {
                if let Some(a) = a {
                    match slot.as_mut() {
                        Some(s) => {
                            add_vec(&mut s.gamma, &a.gamma);
                            add_vec(&mut s.beta, &a.beta);
                        }
                        None => *slot = Some(a),
                    }
                }
            }
        };

        for (node, cache) in self.nodes.iter().zip(&trace.nodes).rev() {
            match (node, cache) {
                (Node::ConvNorm { conv, norm }, NodeCache::ConvNorm { x, norm: nc, y }) => {
                    let gb = layers::relu_backward(y, &g);
                    let ng = nc.backward(&gb, &self.norms[*norm], want_params)?;
                    put_norm(&mut grads, *norm, ng.affine);
                    let (dx, dw) = self.convs[*conv].backward(x, &ng.input, want_params)?;
                    put_conv(&mut grads, *conv, dw);
                    g = dx;
                }
                (Node::MaxPool, NodeCache::MaxPool { in_shape, arg }) => {
                    g = layers::maxpool2_backward(in_shape, arg, &g);
                }
                (
                    Node::Block {
                        conv1,
                        norm1,
                        conv2,
                        norm2,
                        shortcut,
                    },
                    NodeCache::Block {
                        x,
                        mid,
                        n1,
                        n2,
                        shortcut: sc_cache,
                        y,
                    },
                ) => {
                    let gsum = layers::relu_backward(y, &g);
                    let ng2 = n2.backward(&gsum, &self.norms[*norm2], want_params)?;
                    put_norm(&mut grads, *norm2, ng2.affine);
                    let (dmid, dw2) = self.convs[*conv2].backward(mid, &ng2.input, want_params)?;
                    put_conv(&mut grads, *conv2, dw2);
                    let gb = layers::relu_backward(mid, &dmid);
                    let ng1 = n1.backward(&gb, &self.norms[*norm1], want_params)?;
                    put_norm(&mut grads, *norm1, ng1.affine);
                    let (mut dx, dw1) = self.convs[*conv1].backward(x, &ng1.input, want_params)?;
                    put_conv(&mut grads, *conv1, dw1);
                    match (shortcut, sc_cache) {
                        (Some((c, ni)), Some(nc)) => {
                            let ng = nc.backward(&gsum, &self.norms[*ni], want_params)?;
                            put_norm(&mut grads, *ni, ng.affine);
                            let (dxs, dws) = self.convs[*c].backward(x, &ng.input, want_params)?;
                            put_conv(&mut grads, *c, dws);
                            dx.add_assign(&dxs);
                        }
                        _ => dx.add_assign(&gsum),
                    }
                    g = dx;
                }
                _ => unreachable!("trace built by this model"),
            }
        }
        Ok((grads, g))
    }

    /// Mean cross-entropy loss and its gradient w.r.t. input pixels.
    pub fn input_gradient(
        &self,
        x: &Tensor<T>,
        labels: &[usize],
        routing: &Routing<'_, T>,
    ) -> Result<(f64, Tensor<T>)> {
        let fwd = self.forward(x, routing)?;
        let (loss, dlogits) = loss::cross_entropy(&fwd.logits, labels)?;
        let (_, dx) = self.backward(&fwd.trace, &dlogits, false)?;
        if !dx.all_finite() {
            return Err(Error::numerical("non-finite input gradient"));
        }
        Ok((loss, dx))
    }

    /// Applies the batch moments of a training forward to the routed running statistics.
    pub fn commit_running(&mut self, trace: &Trace<T>) -> Result<()> {
        for (layer, m) in self.norms.iter_mut().zip(&trace.moments) {
            layer.commit(m)?;
        }
        Ok(())
    }

    /// Predicted class per sample.
    pub fn predict(&self, x: &Tensor<T>, routing: &Routing<'_, T>) -> Result<Vec<usize>> {
        Ok(loss::argmax_rows(&self.logits(x, routing)?))
    }
}

/// Gradient of mean cross-entropy w.r.t. input pixels under `branch` (eval-mode statistics).
pub fn input_gradient<T: Real>(
    model: &ModelState<T>,
    batch: &Tensor<T>,
    labels: &[usize],
    branch: BranchTag,
) -> Result<Tensor<T>> {
    Ok(model.input_gradient(batch, labels, &Routing::eval(branch))?.1)
}
