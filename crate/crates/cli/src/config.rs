//! Run configuration: TOML file, CLI overrides, and the persisted resolved
//! form.
//!
//! Precedence per field: CLI flag > config file > built-in default. A
//! top-level `seed` (file or `--seed`) overrides the per-section seeds so a
//! single root seed drives the data, init and batching substreams. The fully
//! resolved config is written next to every run's outputs.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use serde::{Deserialize, Serialize};

use acsdet_core::data::SynthConfig;
use acsdet_core::eval::TdcfParams;
use acsdet_core::model::LossKind;
use acsdet_core::train::{CentroidKind, TrainConfig, UpdateOrder};

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    seed: Option<u64>,
    train: Option<TrainConfig>,
    synth: Option<SynthConfig>,
    tdcf: Option<TdcfParams>,
}

/// Effective configuration of a run; serialized as `[train]`, `[synth]` and
/// `[tdcf]` TOML sections.
#[derive(Debug, Clone, Serialize)]
pub struct ResolvedConfig {
    pub train: TrainConfig,
    pub synth: SynthConfig,
    pub tdcf: TdcfParams,
}

impl ResolvedConfig {
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).context("serializing resolved config")
    }

    pub fn persist(&self, dir: &Path) -> Result<String> {
        let text = self.to_toml()?;
        fs::create_dir_all(dir)
            .with_context(|| format!("creating output directory {}", dir.display()))?;
        fs::write(dir.join("config.toml"), &text).context("writing config.toml")?;
        Ok(text)
    }
}

/// Flags shared by every subcommand that needs configuration.
#[derive(Debug, Clone, Default, Args)]
pub struct ConfigOverrides {
    /// TOML config file with [train], [synth], [tdcf] sections
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Root seed for every randomness substream (data, init, batching)
    #[arg(long)]
    pub seed: Option<u64>,

    /// Training objective: acs-oc, wce or oc-softmax
    #[arg(long)]
    pub loss: Option<LossKind>,

    /// Centroid policy: acs, fixed, trainable or partial-acs
    #[arg(long)]
    pub centroid: Option<String>,

    /// Last epoch in which a partial-acs centroid still updates
    #[arg(long)]
    pub freeze_epoch: Option<u32>,

    #[arg(long)]
    pub learning_rate: Option<f64>,

    #[arg(long)]
    pub weight_decay: Option<f64>,

    #[arg(long)]
    pub batch_size: Option<usize>,

    /// Bonafide samples per batch (the rest are spoof)
    #[arg(long)]
    pub bonafide_per_batch: Option<usize>,

    #[arg(long)]
    pub max_epochs: Option<u32>,

    #[arg(long)]
    pub patience: Option<u32>,

    #[arg(long)]
    pub top_k_average: Option<usize>,

    /// Centroid ordering within a batch: update-then-loss or loss-then-update
    #[arg(long)]
    pub update_order: Option<String>,

    /// Synthetic data: per-frame noise level
    #[arg(long)]
    pub noise_level: Option<f64>,

    /// Synthetic data: frame feature dimension
    #[arg(long)]
    pub frame_dim: Option<usize>,
}

fn parse_centroid(s: &str) -> Result<CentroidKind> {
    match s {
        "acs" => Ok(CentroidKind::Acs),
        "fixed" => Ok(CentroidKind::Fixed),
        "trainable" => Ok(CentroidKind::Trainable),
        "partial-acs" => Ok(CentroidKind::PartialAcs),
        other => anyhow::bail!("unknown centroid policy `{other}`"),
    }
}

fn parse_update_order(s: &str) -> Result<UpdateOrder> {
    match s {
        "update-then-loss" => Ok(UpdateOrder::UpdateThenLoss),
        "loss-then-update" => Ok(UpdateOrder::LossThenUpdate),
        other => anyhow::bail!("unknown update order `{other}`"),
    }
}

pub fn resolve(overrides: &ConfigOverrides) -> Result<ResolvedConfig> {
    let file: FileConfig = match &overrides.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading config file {}", path.display()))?;
            toml::from_str(&text)
                .with_context(|| format!("parsing config file {}", path.display()))?
        }
        None => FileConfig::default(),
    };

    let mut train = file.train.unwrap_or_default();
    let mut synth = file.synth.unwrap_or_default();
    let tdcf = file.tdcf.unwrap_or_default();

    if let Some(seed) = file.seed {
        train.seed = seed;
        synth.seed = seed;
    }
    if let Some(seed) = overrides.seed {
        train.seed = seed;
        synth.seed = seed;
    }
    if let Some(loss) = overrides.loss {
        train.loss = loss;
    }
    if let Some(centroid) = &overrides.centroid {
        train.centroid = parse_centroid(centroid)?;
    }
    if let Some(freeze_epoch) = overrides.freeze_epoch {
        train.freeze_epoch = freeze_epoch;
    }
    if let Some(lr) = overrides.learning_rate {
        train.learning_rate = lr;
    }
    if let Some(wd) = overrides.weight_decay {
        train.weight_decay = wd;
    }
    if let Some(batch_size) = overrides.batch_size {
        train.batch_size = batch_size;
    }
    if let Some(bona) = overrides.bonafide_per_batch {
        train.bonafide_per_batch = bona;
    }
    if let Some(max_epochs) = overrides.max_epochs {
        train.max_epochs = max_epochs;
    }
    if let Some(patience) = overrides.patience {
        train.patience = patience;
    }
    if let Some(k) = overrides.top_k_average {
        train.top_k_average = k;
    }
    if let Some(order) = &overrides.update_order {
        train.update_order = parse_update_order(order)?;
    }
    if let Some(noise) = overrides.noise_level {
        synth.noise_level = noise;
    }
    if let Some(frame_dim) = overrides.frame_dim {
        synth.frame_dim = frame_dim;
    }

    train.validate()?;
    synth.validate()?;
    tdcf.validate()?;
    Ok(ResolvedConfig { train, synth, tdcf })
}

pub fn load_tdcf_params(path: &Path) -> Result<TdcfParams> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading t-DCF params {}", path.display()))?;
    let params: TdcfParams =
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    params.validate()?;
    Ok(params)
}
