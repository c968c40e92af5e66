//! Command-line front end: every subcommand writes its artifacts with the resolved
//! configuration echoed at the top.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, CheckpointMeta};
use crate::config::{DatasetKind, ExperimentConfig, Preset};
use crate::error::{Error, Result};
use crate::models::{HeadSelect, ModelState};
use crate::normcore::{BranchTag, Route};
use crate::probe::{
    self, affine_snapshot, export_channels, gap_report, DataSource, LayerSet, RecalOptions, RecalStatus, StatsSnapshot,
};
use crate::train::{evaluate, train_loop, write_metrics_csv, Deployment};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Branch {
    Clean,
    Adv,
}

impl From<Branch> for BranchTag {
    fn from(b: Branch) -> Self {
        match b {
            Branch::Clean => BranchTag::Clean,
            Branch::Adv => BranchTag::Adv,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Source {
    Clean,
    Adv,
    Noisy,
}

impl From<Source> for DataSource {
    fn from(s: Source) -> Self {
        match s {
            Source::Clean => DataSource::Clean,
            Source::Adv => DataSource::Adv,
            Source::Noisy => DataSource::Noisy,
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "dualnorm",
    version,
    about = "Normalization routing experiments for hybrid adversarial training"
)]
pub struct Cli {
    /// TOML experiment configuration layered over its preset.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Preset used when no configuration file is given.
    #[arg(long, global = true, value_parser = ["paper", "desk"])]
    pub preset: Option<String>,
    /// Generate the synthetic dataset instead of reading CIFAR-10.
    #[arg(long, global = true)]
    pub synthetic: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model; writes model.ckpt, metrics.csv and config.toml into the output directory.
    Train(TrainArgs),
    /// Clean and PGD accuracy of a checkpoint under a chosen deployment.
    Eval(EvalArgs),
    /// Re-estimate normalization statistics for an affine set and a data source.
    Recalibrate(RecalArgs),
    /// Layer-wise Wasserstein distances between the two branches' NS and AP sets.
    ProbeGap(GapArgs),
    /// Per-channel values of a sample of channels from one layer.
    ExportChannels(ExportArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (defaults to the configured one).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Deploy a whole branch with its default routing.
    #[arg(long, conflicts_with_all = ["ns", "stats"])]
    pub branch: Option<Branch>,
    /// Stored statistics set to use (requires --ap).
    #[arg(long, requires = "ap", conflicts_with = "stats")]
    pub ns: Option<Branch>,
    /// Statistics file written by `recalibrate` (requires --ap).
    #[arg(long, requires = "ap")]
    pub stats: Option<PathBuf>,
    /// Affine set to use with --ns or --stats.
    #[arg(long, conflicts_with = "branch")]
    pub ap: Option<Branch>,
    /// Classifier head (defaults to the branch's own).
    #[arg(long)]
    pub head: Option<Branch>,
    /// Evaluate on at most this many test images.
    #[arg(long)]
    pub limit: Option<usize>,
    /// Append a CSV row (with provenance header when new) to this file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RecalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub ap: Branch,
    #[arg(long)]
    pub data: Source,
    #[arg(long, default_value_t = 10)]
    pub max_passes: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub tol: f64,
    /// Images drawn from the training split; all when absent.
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GapArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Compare these two statistics files instead of the stored branch statistics.
    #[arg(long, num_args = 2, value_names = ["LEFT", "RIGHT"])]
    pub stats: Option<Vec<PathBuf>>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub layer: String,
    #[arg(long, default_value_t = 8)]
    pub k: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Extra statistics files to include as variants.
    #[arg(long)]
    pub stats: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Statistics file written by `recalibrate`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StatsFile {
    pub config: String,
    pub checkpoint: String,
    pub converged: bool,
    pub passes: usize,
    pub last_change: f64,
    pub snapshot: StatsSnapshot,
}

impl StatsFile {
    pub fn load(path: &Path) -> Result<Self> {
        serde_json::from_slice(&fs::read(path)?).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }
}

impl Cli {
    /// Configuration from `--config`, else the preset, with global flags applied.
    fn base_config(&self) -> Result<ExperimentConfig> {
        let mut cfg = match (&self.config, &self.preset) {
            (Some(path), None) => ExperimentConfig::load(path)?,
            (None, preset) => ExperimentConfig::preset(preset.as_deref().unwrap_or("desk").parse::<Preset>()?),
            (Some(_), Some(_)) => return Err(Error::config("--config and --preset are mutually exclusive")),
        };
        if self.synthetic {
            cfg.data.source = DatasetKind::Synthetic;
        }
        Ok(cfg)
    }

    /// A checkpoint's embedded configuration, unless `--config`/`--preset` overrides it.
    fn checkpoint_config(&self, manifest: &checkpoint::Manifest) -> Result<ExperimentConfig> {
        if self.config.is_some() || self.preset.is_some() || manifest.config.is_empty() {
            return self.base_config();
        }
        let mut cfg = ExperimentConfig::from_toml_str(&manifest.config)?;
        if self.synthetic {
            cfg.data.source = DatasetKind::Synthetic;
        }
        Ok(cfg)
    }
}

fn write_provenance<W: Write>(out: &mut W, cfg: &ExperimentConfig, extra: &[String]) -> Result<()> {
    for line in extra {
        writeln!(out, "# {line}")?;
    }
    for line in cfg.to_toml().lines() {
        writeln!(out, "# {line}")?;
    }
    Ok(())
}

fn create(path: &Path) -> Result<fs::File> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(fs::File::create(path)?)
}

/// Runs one parsed invocation; returns the text printed to stdout.
pub fn run(cli: &Cli) -> Result<String> {
    match &cli.command {
        Command::Train(a) => train(cli, a),
        Command::Eval(a) => eval(cli, a),
        Command::Recalibrate(a) => recalibrate(cli, a),
        Command::ProbeGap(a) => probe_gap(cli, a),
        Command::ExportChannels(a) => export(cli, a),
    }
}

fn train(cli: &Cli, a: &TrainArgs) -> Result<String> {
    let mut cfg = cli.base_config()?;
    if let Some(e) = a.epochs {
        cfg.optim = cfg.optim.with_epochs(e);
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(o) = &a.out {
        cfg.output_dir = o.clone();
    }
    cfg.validate()?;
    let (train_set, test_set) = cfg.load_data()?;
    let (channels, size) = train_set.image_dims();
    let mut model = cfg.build_model(train_set.classes, channels, size)?;
    info!("training {} on {} images", cfg.regime.regime.name(), train_set.len());
    let history = train_loop(&mut model, &cfg.train_plan(), &train_set, &test_set)?;
    fs::create_dir_all(&cfg.output_dir)?;
    let toml = cfg.to_toml();
    fs::write(cfg.output_dir.join("config.toml"), &toml)?;
    let meta = CheckpointMeta {
        config: toml.clone(),
        epoch: cfg.optim.epochs,
        seed: cfg.seed,
    };
    let ckpt = cfg.output_dir.join("model.ckpt");
    checkpoint::save_checkpoint(&ckpt, &model, &meta)?;
    let mut f = create(&cfg.output_dir.join("metrics.csv"))?;
    write_metrics_csv(&mut f, &toml, &history)?;
    let mut out = String::new();
    for r in &history {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out.push_str(&format!("checkpoint {}\n", ckpt.display()));
    Ok(out)
}

fn tag(b: Option<Branch>) -> Option<BranchTag> {
    b.map(BranchTag::from)
}

fn head_select(b: Option<Branch>) -> HeadSelect {
    match b {
        None => HeadSelect::Default,
        Some(Branch::Clean) => HeadSelect::Clean,
        Some(Branch::Adv) => HeadSelect::Adv,
    }
}

fn deployment(model: &ModelState<f32>, a: &EvalArgs) -> Result<(Deployment<f32>, String)> {
    let head = head_select(a.head);
    let first = model
        .norms
        .first()
        .ok_or_else(|| Error::config("model has no normalization layers"))?;
    let pick = |sets: usize, b: BranchTag| if sets > 1 { b.index() } else { 0 };
    if let Some(ap) = tag(a.ap) {
        let affine = pick(first.affine.len(), ap);
        if let Some(ns) = tag(a.ns) {
            if !model.norm.has_running_stats() {
                return Err(Error::config("--ns needs a model with running statistics"));
            }
            let d = Deployment::branch(ap).with_head(head).with_explicit(Route {
                stats: pick(first.stats.len(), ns),
                affine,
            });
            return Ok((d, format!("NS_{}^{},AP_{}", ns.name(), ns.name(), ap.name())));
        }
        if let Some(path) = &a.stats {
            let file = StatsFile::load(path)?;
            let d = Deployment::branch(ap)
                .with_head(head)
                .with_explicit(Route { stats: 0, affine })
                .with_overrides(file.snapshot.to_overrides(model)?);
            return Ok((d, format!("{},AP_{}", file.snapshot.label, ap.name())));
        }
        return Err(Error::config("--ap needs --ns or --stats"));
    }
    let branch = tag(a.branch).unwrap_or(BranchTag::Adv);
    Ok((
        Deployment::branch(branch).with_head(head),
        format!("NS_{}^{},AP_{}", branch.name(), branch.name(), branch.name()),
    ))
}

fn eval(cli: &Cli, a: &EvalArgs) -> Result<String> {
    let (model, manifest) = checkpoint::load_checkpoint(&a.checkpoint)?;
    let cfg = cli.checkpoint_config(&manifest)?;
    let (_, test) = cfg.load_data()?;
    let test = match a.limit {
        Some(n) => test.take(n),
        None => test,
    };
    let (dep, label) = deployment(&model, a)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0003);
    let r = evaluate(&model, &dep, &test, &cfg.eval_attack, cfg.eval.batch_size, &mut rng)?;
    let head = a.head.map(|h| BranchTag::from(h).name()).unwrap_or("default");
    let row = format!("{label},{head},{:.6},{:.6},{}", r.clean_acc, r.robust_acc, r.samples);
    if let Some(path) = &a.out {
        let fresh = !path.exists();
        let mut f = fs::OpenOptions::new().create(true).append(true).open(path)?;
        if fresh {
            write_provenance(&mut f, &cfg, &[format!("checkpoint={}", a.checkpoint.display())])?;
            writeln!(f, "ns,ap,head,clean_acc,pgd_acc,samples")?;
        }
        writeln!(f, "{row}")?;
    }
    Ok(format!("ns,ap,head,clean_acc,pgd_acc,samples\n{row}\n"))
}

fn recalibrate(cli: &Cli, a: &RecalArgs) -> Result<String> {
    let (model, manifest) = checkpoint::load_checkpoint(&a.checkpoint)?;
    let cfg = cli.checkpoint_config(&manifest)?;
    let (train_set, _) = cfg.load_data()?;
    let data = match a.limit {
        Some(n) => train_set.take(n),
        None => train_set,
    };
    let opts = RecalOptions {
        max_passes: a.max_passes,
        tol: a.tol,
        batch_size: cfg.optim.batch_size,
        momentum: cfg.model.momentum,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0004);
    let r = probe::recalibrate(
        &model,
        a.ap.into(),
        a.data.into(),
        &data,
        Some(&cfg.train_attack),
        &opts,
        &mut rng,
    )?;
    let file = StatsFile {
        config: cfg.to_toml(),
        checkpoint: a.checkpoint.display().to_string(),
        converged: r.status == RecalStatus::Converged,
        passes: r.passes,
        last_change: r.last_change,
        snapshot: r.snapshot,
    };
    let json = serde_json::to_vec_pretty(&file).map_err(|e| Error::Format(e.to_string()))?;
    create(&a.out)?.write_all(&json)?;
    Ok(format!(
        "{} passes={} converged={} change={:.3e}\n",
        file.snapshot.label, file.passes, file.converged, file.last_change
    ))
}

fn probe_gap(cli: &Cli, a: &GapArgs) -> Result<String> {
    let (model, manifest) = checkpoint::load_checkpoint(&a.checkpoint)?;
    let cfg = cli.checkpoint_config(&manifest)?;
    let affine = gap_report(
        &LayerSet::Affine(affine_snapshot(&model, BranchTag::Clean)),
        &LayerSet::Affine(affine_snapshot(&model, BranchTag::Adv)),
    )?;
    let stats = match &a.stats {
        Some(files) => {
            let left = StatsFile::load(&files[0])?.snapshot;
            let right = StatsFile::load(&files[1])?.snapshot;
            left.check_compatible(&model)?;
            right.check_compatible(&model)?;
            Some(gap_report(&LayerSet::Stats(left), &LayerSet::Stats(right))?)
        }
        None if model.norm.has_running_stats() => Some(gap_report(
            &LayerSet::Stats(StatsSnapshot::stored(&model, BranchTag::Clean)?),
            &LayerSet::Stats(StatsSnapshot::stored(&model, BranchTag::Adv)?),
        )?),
        None => None,
    };
    let report = match stats {
        Some(s) => s.merge(&affine)?,
        None => affine,
    };
    let mut f = create(&a.out)?;
    write_provenance(&mut f, &cfg, &[format!("checkpoint={}", a.checkpoint.display())])?;
    probe::write_gap_csv(&mut f, "", &report)?;
    let med = |v: Option<f64>| v.map(|x| format!("{x:.4e}")).unwrap_or_else(|| "-".into());
    Ok(format!(
        "{} vs {}: median d_mu {} d_sigma {} d_gamma {} d_beta {}\n",
        report.left,
        report.right,
        med(report.median(|e| e.d_mu)),
        med(report.median(|e| e.d_sigma)),
        med(report.median(|e| e.d_gamma)),
        med(report.median(|e| e.d_beta)),
    ))
}

fn export(cli: &Cli, a: &ExportArgs) -> Result<String> {
    let (model, manifest) = checkpoint::load_checkpoint(&a.checkpoint)?;
    let cfg = cli.checkpoint_config(&manifest)?;
    let mut variants = Vec::new();
    if model.norm.has_running_stats() {
        for b in BranchTag::ALL {
            variants.push(LayerSet::Stats(StatsSnapshot::stored(&model, b)?));
        }
    }
    for path in &a.stats {
        let snap = StatsFile::load(path)?.snapshot;
        snap.check_compatible(&model)?;
        variants.push(LayerSet::Stats(snap));
    }
    for b in BranchTag::ALL {
        variants.push(LayerSet::Affine(affine_snapshot(&model, b)));
    }
    let rows = export_channels(&variants, &a.layer, a.k, a.seed)?;
    let mut f = create(&a.out)?;
    write_provenance(&mut f, &cfg, &[format!("checkpoint={}", a.checkpoint.display())])?;
    probe::write_channels_csv(&mut f, "", &rows)?;
    Ok(format!("{} rows for {} channels of {}\n", rows.len(), a.k, a.layer))
}
