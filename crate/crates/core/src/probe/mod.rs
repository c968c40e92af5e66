//! Test-time statistics tooling: re-estimating normalization statistics under a chosen
//! affine set and data source, evaluating arbitrary statistics/affine pairings, and
//! layer-wise distances between branches.

mod gap;
mod recal;

pub use gap::{
    affine_snapshot, export_channels, gap_report, write_channels_csv, write_gap_csv, ApSnapshot, ChannelRow, GapEntry,
    GapReport, LayerSet, CHANNELS_HEADER, GAP_HEADER,
};
pub use recal::{recalibrate, recombine_eval, NsSource, RecalOptions, RecalStatus, Recalibration};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::ModelState;
use crate::normcore::{BranchTag, NormLayerState, NormStats};
use crate::tensor::Real;

/// NS set whose running statistics are estimated from `tag` samples.
pub(crate) fn stats_set<T>(layer: &NormLayerState<T>, tag: BranchTag) -> usize {
    if layer.stats.len() > 1 {
        tag.index()
    } else {
        0
    }
}

/// AP set trained for `tag`.
pub(crate) fn affine_set<T>(layer: &NormLayerState<T>, tag: BranchTag) -> usize {
    if layer.affine.len() > 1 {
        tag.index()
    } else {
        0
    }
}

/// 1-Wasserstein distance between the empirical distributions of two equally sized samples.
pub fn wasserstein_1d(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::precondition(format!(
            "wasserstein_1d on {} vs {} values",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Ok(0.0);
    }
    let mut x = a.to_vec();
    let mut y = b.to_vec();
    x.sort_by(f64::total_cmp);
    y.sort_by(f64::total_cmp);
    Ok(x.iter().zip(&y).map(|(p, q)| (p - q).abs()).sum::<f64>() / x.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Clean,
    Adv,
    Noisy,
}

impl DataSource {
    pub fn name(self) -> &'static str {
        match self {
            DataSource::Clean => "clean",
            DataSource::Adv => "adv",
            DataSource::Noisy => "noisy",
        }
    }
}

impl std::str::FromStr for DataSource {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clean" => Ok(DataSource::Clean),
            "adv" => Ok(DataSource::Adv),
            "noisy" => Ok(DataSource::Noisy),
            _ => Err(Error::config(format!(
                "unknown data source `{s}` (expected clean|adv|noisy)"
            ))),
        }
    }
}

/// Which data produced a statistics set and which affine set was active meanwhile.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SnapshotLabel {
    pub ap: BranchTag,
    pub data: DataSource,
}

impl std::fmt::Display for SnapshotLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "NS_{}^{}", self.data.name(), self.ap.name())
    }
}

/// Per-layer normalization statistics of a whole model under one label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatsSnapshot {
    pub label: SnapshotLabel,
    pub layer_names: Vec<String>,
    pub layers: Vec<NormStats<f64>>,
}

impl StatsSnapshot {
    /// Stored running statistics estimated from `branch` samples, e.g. `NS_adv^adv`.
    pub fn stored<T: Real>(model: &ModelState<T>, branch: BranchTag) -> Result<Self> {
        let layers = model
            .norms
            .iter()
            .map(|l| {
                let s = l
                    .stats
                    .get(stats_set(l, branch))
                    .ok_or_else(|| Error::config("model has no running statistics"))?;
                Ok(NormStats {
                    mean: s.mean.iter().map(|v| v.as_f64()).collect(),
                    var: s.var.iter().map(|v| v.as_f64()).collect(),
                    momentum: s.momentum.as_f64(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let data = match branch {
            BranchTag::Clean => DataSource::Clean,
            BranchTag::Adv => DataSource::Adv,
        };
        Ok(Self {
            label: SnapshotLabel { ap: branch, data },
            layer_names: model.norm_names.clone(),
            layers,
        })
    }

    /// Per-layer overrides in the model's scalar type.
    pub fn to_overrides<T: Real>(&self, model: &ModelState<T>) -> Result<Vec<Option<NormStats<T>>>> {
        self.check_compatible(model)?;
        Ok(self
            .layers
            .iter()
            .map(|s| {
                Some(NormStats {
                    mean: s.mean.iter().map(|&v| T::c(v)).collect(),
                    var: s.var.iter().map(|&v| T::c(v)).collect(),
                    momentum: T::c(s.momentum),
                })
            })
            .collect())
    }

    pub fn check_compatible<T: Real>(&self, model: &ModelState<T>) -> Result<()> {
        if self.layers.len() != model.norms.len() || self.layer_names != model.norm_names {
            return Err(Error::config(format!(
                "snapshot has {} layers, model {}",
                self.layers.len(),
                model.norms.len()
            )));
        }
        for (i, (s, l)) in self.layers.iter().zip(&model.norms).enumerate() {
            if s.channels() != l.channels || s.var.len() != l.channels {
                return Err(Error::config(format!(
                    "snapshot layer {i} has {} channels, model {}",
                    s.channels(),
                    l.channels
                )));
            }
        }
        Ok(())
    }
}
