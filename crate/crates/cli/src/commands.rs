//! Subcommand implementations.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::Args;

use acsdet_core::data::{
    gen_synthetic, load_split, manifest_path, write_dataset_dir, Dataset, Split,
};
use acsdet_core::eval::{
    compute_eer, dump_embeddings as dump_embeddings_csv, evaluate_records, read_score_file,
    rounded_score, score_dataset, split_scores, write_score_file, ScoreRecord,
};
use acsdet_core::losses::Label;
use acsdet_core::model::{config_hash, Checkpoint, LossKind, Model};
use acsdet_core::train::{train_loop_with, CentroidKind, TrainConfig, TrainHistory, TrainSinks};

use crate::config::{load_tdcf_params, resolve, ConfigOverrides};

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Output directory for features/ and manifest.csv
    #[arg(long, value_name = "DIR")]
    out: PathBuf,

    #[command(flatten)]
    overrides: ConfigOverrides,
}

pub fn gen_data(args: GenDataArgs) -> Result<()> {
    let resolved = resolve(&args.overrides)?;
    let (train, dev, eval) = gen_synthetic(&resolved.synth)?;
    fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    write_dataset_dir(&args.out, &[&train, &dev, &eval])?;
    resolved.persist(&args.out)?;

    for ds in [&train, &dev, &eval] {
        let mut systems: Vec<String> = ds.spoof_system_ids().into_iter().collect();
        systems.sort();
        println!(
            "{}: {} bonafide / {} spoof (systems: {})",
            ds.split,
            ds.bonafide_indices().len(),
            ds.spoof_indices().len(),
            systems.join(", ")
        );
    }
    println!("wrote {}", args.out.display());
    Ok(())
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory (from gen-data) containing manifest.csv
    #[arg(long, value_name = "DIR")]
    data: PathBuf,

    /// Output directory for model, logs and resolved config
    #[arg(long, value_name = "DIR")]
    out: PathBuf,

    /// Also write a per-step centroid trajectory CSV
    #[arg(long)]
    log_centroid: bool,

    #[command(flatten)]
    overrides: ConfigOverrides,
}

fn train_once(
    train_set: &Dataset,
    dev_set: &Dataset,
    config: &TrainConfig,
    trajectory: Option<&mut dyn Write>,
) -> Result<(Model, TrainHistory)> {
    let sinks = TrainSinks {
        centroid_trajectory: trajectory,
    };
    Ok(train_loop_with(train_set, dev_set, config, sinks)?)
}

pub fn train(args: TrainArgs) -> Result<()> {
    let resolved = resolve(&args.overrides)?;
    let manifest = manifest_path(&args.data);
    let train_set = load_split(&manifest, Split::Train)?;
    let dev_set = load_split(&manifest, Split::Dev)?;

    fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    let config_text = resolved.persist(&args.out)?;
    let hash = config_hash(&config_text);

    let mut trajectory_file = if args.log_centroid {
        Some(fs::File::create(args.out.join("centroid_trajectory.csv"))?)
    } else {
        None
    };
    let trajectory = trajectory_file.as_mut().map(|f| f as &mut dyn Write);
    let (model, history) = train_once(&train_set, &dev_set, &resolved.train, trajectory)?;

    let mut log = fs::File::create(args.out.join("train_log.csv"))?;
    history.write_log(&mut log)?;

    Checkpoint::new(model.clone(), hash.clone()).save(&args.out.join("model.json"))?;

    // Raw best-epoch snapshot alongside the averaged model.
    let best = history
        .checkpoints
        .iter()
        .find(|c| c.epoch == history.best_epoch)
        .expect("best epoch exists");
    let mut best_model = model;
    best_model.centroid = best.centroid.clone();
    best_model.set_from_flat(&best.params)?;
    Checkpoint::new(best_model, hash).save(&args.out.join("best_checkpoint.json"))?;

    let last = history.records.last().expect("at least one epoch");
    println!(
        "trained {} epochs (best epoch {}, dev EER {:.2}%)",
        history.records.len(),
        history.best_epoch,
        stopped_best(&history) * 100.0
    );
    println!(
        "final epoch: train loss {:.6}, dev EER {:.2}%, centroid count {}",
        last.train_loss,
        last.dev_eer * 100.0,
        last.centroid_count
    );
    println!("wrote {}", args.out.display());
    Ok(())
}

fn stopped_best(history: &TrainHistory) -> f64 {
    history
        .records
        .iter()
        .find(|r| r.epoch == history.best_epoch)
        .map(|r| r.dev_eer)
        .unwrap_or(f64::NAN)
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Dataset directory containing manifest.csv
    #[arg(long, value_name = "DIR")]
    data: PathBuf,

    /// Model checkpoint (model.json from train)
    #[arg(long, value_name = "FILE")]
    model: PathBuf,

    /// Output directory for the score file
    #[arg(long, value_name = "DIR")]
    out: PathBuf,

    /// Which split to score
    #[arg(long, default_value = "eval")]
    split: Split,

    /// TOML file with tandem-cost parameters; enables min t-DCF
    #[arg(long, value_name = "FILE")]
    tdcf_params: Option<PathBuf>,
}

pub fn eval(args: EvalArgs) -> Result<()> {
    let checkpoint = Checkpoint::load(&args.model)
        .with_context(|| format!("loading model {}", args.model.display()))?;
    let dataset = load_split(&manifest_path(&args.data), args.split)?;

    fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    let records = score_dataset(&checkpoint.model, &dataset)?;
    let score_path = args.out.join(format!("scores_{}.txt", args.split));
    write_score_file(&records, &score_path)?;

    // Metrics come from the file just written, so a re-score of the file
    // reproduces the printed numbers exactly.
    let reread = read_score_file(&score_path)?;
    let keys: BTreeMap<&str, Label> = dataset
        .records
        .iter()
        .map(|u| (u.id.as_str(), u.key))
        .collect();
    let labeled: Vec<ScoreRecord> = reread
        .into_iter()
        .map(|mut r| {
            r.key = keys.get(r.utterance_id.as_str()).copied();
            r
        })
        .collect();
    let tdcf = match &args.tdcf_params {
        Some(path) => Some(load_tdcf_params(path)?),
        None => None,
    };
    let report = evaluate_records(&labeled, tdcf.as_ref())?;

    println!("EER: {:.2}%", report.eer * 100.0);
    if let Some(value) = report.min_tdcf {
        println!("min t-DCF: {value:.4}");
    }
    println!(
        "scored {} trials ({} bonafide, {} spoof) -> {}",
        report.n_bonafide + report.n_spoof,
        report.n_bonafide,
        report.n_spoof,
        score_path.display()
    );
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum AblateAxis {
    Centroid,
    Loss,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// Dataset directory containing manifest.csv
    #[arg(long, value_name = "DIR")]
    data: PathBuf,

    /// Output directory for the summary CSV
    #[arg(long, value_name = "DIR")]
    out: PathBuf,

    /// Which axis to sweep
    #[arg(long, value_enum)]
    axis: AblateAxis,

    /// Number of training seeds per cell (root seed, root seed + 1, ...)
    #[arg(long, default_value_t = 5)]
    seeds: u64,

    #[command(flatten)]
    overrides: ConfigOverrides,
}

pub fn ablate(args: AblateArgs) -> Result<()> {
    if args.seeds == 0 {
        bail!("--seeds must be at least 1");
    }
    let resolved = resolve(&args.overrides)?;
    let manifest = manifest_path(&args.data);
    let train_set = load_split(&manifest, Split::Train)?;
    let dev_set = load_split(&manifest, Split::Dev)?;
    let eval_set = load_split(&manifest, Split::Eval)?;

    fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    resolved.persist(&args.out)?;

    let cells: Vec<(String, TrainConfig)> = match args.axis {
        AblateAxis::Centroid => [
            ("fixed", CentroidKind::Fixed),
            ("trainable", CentroidKind::Trainable),
            ("partial-acs", CentroidKind::PartialAcs),
            ("acs", CentroidKind::Acs),
        ]
        .into_iter()
        .map(|(name, centroid)| {
            let config = TrainConfig {
                centroid,
                loss: LossKind::AcsOc,
                ..resolved.train.clone()
            };
            (name.to_string(), config)
        })
        .collect(),
        AblateAxis::Loss => [
            ("wce", LossKind::Wce),
            ("oc-softmax", LossKind::OcSoftmax),
            ("acs-oc", LossKind::AcsOc),
        ]
        .into_iter()
        .map(|(name, loss)| {
            let config = TrainConfig {
                loss,
                ..resolved.train.clone()
            };
            (name.to_string(), config)
        })
        .collect(),
    };

    let csv_path = args.out.join(match args.axis {
        AblateAxis::Centroid => "ablate_centroid.csv",
        AblateAxis::Loss => "ablate_loss.csv",
    });
    let mut csv = fs::File::create(&csv_path)?;
    writeln!(csv, "name,seeds,mean_eer,std_eer")?;

    for (name, base_config) in cells {
        let mut eers = Vec::with_capacity(args.seeds as usize);
        for s in 0..args.seeds {
            let config = TrainConfig {
                seed: base_config.seed + s,
                ..base_config.clone()
            };
            let eer = run_cell(&train_set, &dev_set, &eval_set, &config)?;
            eers.push(eer);
        }
        let mean = eers.iter().sum::<f64>() / eers.len() as f64;
        let std = if eers.len() > 1 {
            (eers.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (eers.len() - 1) as f64).sqrt()
        } else {
            0.0
        };
        writeln!(csv, "{name},{},{mean},{std}", eers.len())?;
        println!(
            "{name:12} eval EER {:.2}% +/- {:.2}% over {} seeds",
            mean * 100.0,
            std * 100.0,
            eers.len()
        );
    }
    println!("wrote {}", csv_path.display());
    Ok(())
}

/// One train+eval cell; scores are quantized exactly like the score-file
/// writer so the result matches an equivalent `train` + `eval` invocation.
fn run_cell(
    train_set: &Dataset,
    dev_set: &Dataset,
    eval_set: &Dataset,
    config: &TrainConfig,
) -> Result<f64> {
    let (model, _) = train_once(train_set, dev_set, config, None)?;
    let records = score_dataset(&model, eval_set)?;
    let rounded: Vec<ScoreRecord> = records
        .into_iter()
        .map(|mut r| {
            r.score = rounded_score(r.score);
            r
        })
        .collect();
    let (bona, spoof) = split_scores(&rounded)?;
    Ok(compute_eer(&bona, &spoof)?.0)
}

#[derive(Debug, Args)]
pub struct DumpArgs {
    /// Dataset directory containing manifest.csv
    #[arg(long, value_name = "DIR")]
    data: PathBuf,

    /// Model checkpoint (model.json from train)
    #[arg(long, value_name = "FILE")]
    model: PathBuf,

    /// Output CSV path
    #[arg(long, value_name = "FILE")]
    out: PathBuf,

    /// Which split to embed
    #[arg(long, default_value = "eval")]
    split: Split,
}

pub fn dump_embeddings(args: DumpArgs) -> Result<()> {
    let checkpoint = Checkpoint::load(&args.model)
        .with_context(|| format!("loading model {}", args.model.display()))?;
    let dataset = load_split(&manifest_path(&args.data), args.split)?;
    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    dump_embeddings_csv(&checkpoint.model, &dataset, &args.out)?;
    println!("wrote {} embeddings to {}", dataset.len(), args.out.display());
    Ok(())
}
