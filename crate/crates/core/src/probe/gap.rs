use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{affine_set, wasserstein_1d, StatsSnapshot};
use crate::error::{Error, Result};
use crate::models::ModelState;
use crate::normcore::{AffineParams, BranchTag};
use crate::tensor::Real;

pub const GAP_HEADER: &str = "layer_index,layer_name,d_mu,d_sigma,d_gamma,d_beta";
pub const CHANNELS_HEADER: &str = "layer_name,channel,variant,mean,sigma,gamma,beta";

/// Per-layer affine parameters of one AP set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApSnapshot {
    pub label: String,
    pub layer_names: Vec<String>,
    pub layers: Vec<AffineParams<f64>>,
}

pub fn affine_snapshot<T: Real>(model: &ModelState<T>, branch: BranchTag) -> ApSnapshot {
    ApSnapshot {
        label: format!("AP_{}", branch.name()),
        layer_names: model.norm_names.clone(),
        layers: model
            .norms
            .iter()
            .map(|l| {
                let a = &l.affine[affine_set(l, branch)];
                AffineParams {
                    gamma: a.gamma.iter().map(|v| v.as_f64()).collect(),
                    beta: a.beta.iter().map(|v| v.as_f64()).collect(),
                }
            })
            .collect(),
    }
}

/// One side of a layer-wise comparison.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerSet {
    Stats(StatsSnapshot),
    Affine(ApSnapshot),
}

impl LayerSet {
    pub fn label(&self) -> String {
        match self {
            LayerSet::Stats(s) => s.label.to_string(),
            LayerSet::Affine(a) => a.label.clone(),
        }
    }

    fn layer_names(&self) -> &[String] {
        match self {
            LayerSet::Stats(s) => &s.layer_names,
            LayerSet::Affine(a) => &a.layer_names,
        }
    }

    /// The two per-channel vectors of layer `i`: `(mean, sigma)` or `(gamma, beta)`.
    fn vectors(&self, i: usize) -> (Vec<f64>, Vec<f64>) {
        match self {
            LayerSet::Stats(s) => (s.layers[i].mean.clone(), s.layers[i].sigma()),
            LayerSet::Affine(a) => (a.layers[i].gamma.clone(), a.layers[i].beta.clone()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GapEntry {
    pub layer_index: usize,
    pub layer_name: String,
    pub d_mu: Option<f64>,
    pub d_sigma: Option<f64>,
    pub d_gamma: Option<f64>,
    pub d_beta: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GapReport {
    pub left: String,
    pub right: String,
    pub entries: Vec<GapEntry>,
}

impl GapReport {
    /// Fills the empty columns of `self` from `other`, layer by layer.
    pub fn merge(mut self, other: &GapReport) -> Result<Self> {
        if self.entries.len() != other.entries.len() {
            return Err(Error::config("gap reports cover different layers"));
        }
        for (a, b) in self.entries.iter_mut().zip(&other.entries) {
            if a.layer_name != b.layer_name {
                return Err(Error::config(format!("layer {} vs {}", a.layer_name, b.layer_name)));
            }
            a.d_mu = a.d_mu.or(b.d_mu);
            a.d_sigma = a.d_sigma.or(b.d_sigma);
            a.d_gamma = a.d_gamma.or(b.d_gamma);
            a.d_beta = a.d_beta.or(b.d_beta);
        }
        self.left = format!("{} & {}", self.left, other.left);
        self.right = format!("{} & {}", self.right, other.right);
        Ok(self)
    }

    /// Median over layers of one column; `None` if the column is empty.
    pub fn median(&self, column: impl Fn(&GapEntry) -> Option<f64>) -> Option<f64> {
        let mut v: Vec<f64> = self.entries.iter().filter_map(column).collect();
        if v.is_empty() {
            return None;
        }
        v.sort_by(f64::total_cmp);
        let m = v.len() / 2;
        Some(if v.len() % 2 == 1 {
            v[m]
        } else {
            0.5 * (v[m - 1] + v[m])
        })
    }
}

fn check_same_layers(left: &LayerSet, right: &LayerSet) -> Result<()> {
    if left.layer_names() != right.layer_names() {
        return Err(Error::config(format!(
            "{} and {} come from different layer structures",
            left.label(),
            right.label()
        )));
    }
    Ok(())
}

/// Layer-wise 1-Wasserstein distances between the channel values of two statistics sets
/// (filling `d_mu`, `d_sigma`) or two affine sets (filling `d_gamma`, `d_beta`).
pub fn gap_report(left: &LayerSet, right: &LayerSet) -> Result<GapReport> {
    check_same_layers(left, right)?;
    let stats = match (left, right) {
        (LayerSet::Stats(_), LayerSet::Stats(_)) => true,
        (LayerSet::Affine(_), LayerSet::Affine(_)) => false,
        _ => return Err(Error::config("gap between a statistics set and an affine set")),
    };
    let entries = left
        .layer_names()
        .iter()
        .enumerate()
        .map(|(i, name)| {
            let (a1, a2) = left.vectors(i);
            let (b1, b2) = right.vectors(i);
            let d1 = wasserstein_1d(&a1, &b1).map_err(|_| Error::config(format!("channel counts differ at {name}")))?;
            let d2 = wasserstein_1d(&a2, &b2).map_err(|_| Error::config(format!("channel counts differ at {name}")))?;
            let (s, a) = if stats {
                (Some((d1, d2)), None)
            } else {
                (None, Some((d1, d2)))
            };
            Ok(GapEntry {
                layer_index: i,
                layer_name: name.clone(),
                d_mu: s.map(|p| p.0),
                d_sigma: s.map(|p| p.1),
                d_gamma: a.map(|p| p.0),
                d_beta: a.map(|p| p.1),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GapReport {
        left: left.label(),
        right: right.label(),
        entries,
    })
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6e}")).unwrap_or_default()
}

pub fn write_gap_csv<W: Write>(out: &mut W, provenance: &str, report: &GapReport) -> Result<()> {
    for line in provenance.lines() {
        writeln!(out, "# {line}")?;
    }
    writeln!(out, "# left={} right={}", report.left, report.right)?;
    writeln!(out, "{GAP_HEADER}")?;
    for e in &report.entries {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            e.layer_index,
            e.layer_name,
            cell(e.d_mu),
            cell(e.d_sigma),
            cell(e.d_gamma),
            cell(e.d_beta)
        )?;
    }
    Ok(())
}

/// One channel's values under one variant. Statistics variants fill `mean`/`sigma`,
/// affine variants `gamma`/`beta`.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelRow {
    pub layer_name: String,
    pub channel: usize,
    pub variant: String,
    pub mean: Option<f64>,
    pub sigma: Option<f64>,
    pub gamma: Option<f64>,
    pub beta: Option<f64>,
}

/// Values of `k` distinct channels of `layer` (sampled with `seed`, ascending) in every
/// variant, grouped by channel.
pub fn export_channels(variants: &[LayerSet], layer: &str, k: usize, seed: u64) -> Result<Vec<ChannelRow>> {
    let first = variants
        .first()
        .ok_or_else(|| Error::precondition("no variants to export"))?;
    for v in &variants[1..] {
        check_same_layers(first, v)?;
    }
    let li = first
        .layer_names()
        .iter()
        .position(|n| n == layer)
        .ok_or_else(|| Error::config(format!("unknown layer `{layer}`")))?;
    let channels = first.vectors(li).0.len();
    if k > channels {
        return Err(Error::precondition(format!(
            "{k} channels requested, layer `{layer}` has {channels}"
        )));
    }
    let mut picked = rand::seq::index::sample(&mut ChaCha8Rng::seed_from_u64(seed), channels, k).into_vec();
    picked.sort_unstable();
    let mut rows = Vec::with_capacity(k * variants.len());
    for &ch in &picked {
        for v in variants {
            let (a, b) = v.vectors(li);
            if a.len() != channels {
                return Err(Error::config(format!("channel counts differ at {layer}")));
            }
            let (mean, sigma, gamma, beta) = match v {
                LayerSet::Stats(_) => (Some(a[ch]), Some(b[ch]), None, None),
                LayerSet::Affine(_) => (None, None, Some(a[ch]), Some(b[ch])),
            };
            rows.push(ChannelRow {
                layer_name: layer.to_string(),
                channel: ch,
                variant: v.label(),
                mean,
                sigma,
                gamma,
                beta,
            });
        }
    }
    Ok(rows)
}

pub fn write_channels_csv<W: Write>(out: &mut W, provenance: &str, rows: &[ChannelRow]) -> Result<()> {
    for line in provenance.lines() {
        writeln!(out, "# {line}")?;
    }
    writeln!(out, "{CHANNELS_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.layer_name,
            r.channel,
            r.variant,
            cell(r.mean),
            cell(r.sigma),
            cell(r.gamma),
            cell(r.beta)
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{build_model, Architecture};
    use crate::normcore::{NormConfig, NormKind, NormMode};
    use crate::probe::{DataSource, SnapshotLabel};

    fn model() -> ModelState<f32> {
        let arch = Architecture::small_cnn(10).with_width(0.25).with_input(3, 8);
        let mut m: ModelState<f32> = build_model(arch, NormConfig::new(NormKind::Batch, NormMode::Dual), 1, 3).unwrap();
        for (i, l) in m.norms.iter_mut().enumerate() {
            for (c, g) in l.affine[1].gamma.iter_mut().enumerate() {
                *g = 1.0 + 0.1 * (i + c) as f32;
            }
            for v in l.stats[1].var.iter_mut() {
                *v = 4.0;
            }
        }
        m
    }

    #[test]
    fn affine_gap_matches_hand_values() {
        let m = model();
        let clean = LayerSet::Affine(affine_snapshot(&m, BranchTag::Clean));
        let adv = LayerSet::Affine(affine_snapshot(&m, BranchTag::Adv));
        let r = gap_report(&clean, &adv).unwrap();
        assert_eq!(r.entries.len(), m.norms.len());
        for (i, e) in r.entries.iter().enumerate() {
            let c = m.norms[i].channels as f64;
            // mean over channels of 0.1 * (i + c)
            let expect = 0.1 * (i as f64 + (c - 1.0) / 2.0);
            assert!((e.d_gamma.unwrap() - expect).abs() < 1e-5, "layer {i}");
            assert_eq!(e.d_beta, Some(0.0));
            assert_eq!(e.d_mu, None);
        }
    }

    #[test]
    fn stats_gap_and_merge() {
        let m = model();
        let clean = StatsSnapshot::stored(&m, BranchTag::Clean).unwrap();
        let adv = StatsSnapshot::stored(&m, BranchTag::Adv).unwrap();
        assert_eq!(
            adv.label,
            SnapshotLabel {
                ap: BranchTag::Adv,
                data: DataSource::Adv
            }
        );
        let s = gap_report(&LayerSet::Stats(clean.clone()), &LayerSet::Stats(adv.clone())).unwrap();
        assert!(s.entries.iter().all(|e| e.d_mu == Some(0.0) && e.d_sigma == Some(1.0)));
        let a = gap_report(
            &LayerSet::Affine(affine_snapshot(&m, BranchTag::Clean)),
            &LayerSet::Affine(affine_snapshot(&m, BranchTag::Adv)),
        )
        .unwrap();
        let both = s.merge(&a).unwrap();
        assert!(both.entries.iter().all(|e| e.d_gamma.is_some() && e.d_sigma.is_some()));
        assert_eq!(both.median(|e| e.d_sigma), Some(1.0));
        let mut buf = Vec::new();
        write_gap_csv(&mut buf, "run=test", &both).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "# run=test");
        assert_eq!(lines[2], GAP_HEADER);
        assert_eq!(lines.len(), 3 + m.norms.len());
        assert_eq!(lines[3].split(',').count(), 6);
    }

    #[test]
    fn mixed_kinds_and_mismatched_layers_rejected() {
        let m = model();
        let s = LayerSet::Stats(StatsSnapshot::stored(&m, BranchTag::Clean).unwrap());
        let a = LayerSet::Affine(affine_snapshot(&m, BranchTag::Clean));
        assert!(matches!(gap_report(&s, &a), Err(Error::Config(_))));
        let mut short = affine_snapshot(&m, BranchTag::Adv);
        short.layers.pop();
        short.layer_names.pop();
        assert!(matches!(
            gap_report(&a, &LayerSet::Affine(short)),
            Err(Error::Config(_))
        ));
        let mut narrow = affine_snapshot(&m, BranchTag::Adv);
        narrow.layers[0].gamma.pop();
        assert!(matches!(
            gap_report(&a, &LayerSet::Affine(narrow)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn channel_export_is_sorted_distinct_and_seeded() {
        let m = model();
        let variants = vec![
            LayerSet::Stats(StatsSnapshot::stored(&m, BranchTag::Clean).unwrap()),
            LayerSet::Affine(affine_snapshot(&m, BranchTag::Adv)),
        ];
        let layer = m.norm_names[1].clone();
        let rows = export_channels(&variants, &layer, 5, 11).unwrap();
        assert_eq!(rows.len(), 10);
        let chans: Vec<usize> = rows.iter().step_by(2).map(|r| r.channel).collect();
        assert!(chans.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(rows, export_channels(&variants, &layer, 5, 11).unwrap());
        assert_eq!(rows[0].variant, "NS_clean^clean");
        assert_eq!(rows[1].variant, "AP_adv");
        assert!((rows[1].gamma.unwrap() - (1.0 + 0.1 * (1 + rows[1].channel) as f64)).abs() < 1e-6);
        let width = m.norms[1].channels;
        assert!(matches!(
            export_channels(&variants, &layer, width + 1, 0),
            Err(Error::Precondition(_))
        ));
        assert!(matches!(
            export_channels(&variants, "nope", 1, 0),
            Err(Error::Config(_))
        ));
        let all = export_channels(&variants, &layer, width, 0).unwrap();
        assert_eq!(
            all.iter().step_by(2).map(|r| r.channel).collect::<Vec<_>>(),
            (0..width).collect::<Vec<_>>()
        );
    }
}
