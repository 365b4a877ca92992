//! Datasets: synthetic generation, protocol ingestion, and the on-disk
//! feature container.
//!
//! The generator draws bonafide utterances from one smooth low-rank latent
//! process and each spoofing system from its own process (shifted mean,
//! different mixing subspace, different temporal correlation). The dev split
//! shares the training systems; the eval split contains only held-out
//! systems, which is the generalization target.
//!
//! Feature container: one file per utterance, an 8-byte header (`T` then `F`
//! as little-endian u32) followed by row-major `T x F` little-endian f32.
//! A CSV manifest (`utt_id,path,key,system_id,split`) ties files to labels.

use std::collections::HashSet;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::Label;
use crate::rng::substream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Eval,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Eval => "eval",
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "eval" => Ok(Split::Eval),
            other => Err(Error::UnknownKind {
                what: "split",
                value: other.to_string(),
            }),
        }
    }
}

/// One utterance: raw `T x F` features plus its label. Bonafide records carry
/// `-` as the system id.
#[derive(Debug, Clone)]
pub struct Utterance {
    pub id: String,
    pub frames: Array2<f64>,
    pub key: Label,
    pub system_id: String,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub split: Split,
    pub records: Vec<Utterance>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn bonafide_indices(&self) -> Vec<usize> {
        self.records
            .iter()
            .enumerate()
            .filter(|(_, u)| u.key == Label::Bonafide)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn spoof_indices(&self) -> Vec<usize> {
        self.records
            .iter()
            .enumerate()
            .filter(|(_, u)| u.key == Label::Spoof)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn spoof_system_ids(&self) -> HashSet<String> {
        self.records
            .iter()
            .filter(|u| u.key == Label::Spoof)
            .map(|u| u.system_id.clone())
            .collect()
    }

    pub fn frame_dim(&self) -> Option<usize> {
        self.records.first().map(|u| u.frames.ncols())
    }
}

/// Parameters of one generating process: where its mean sits, how wide its
/// latent mixing is, and how smooth its latent trajectory is.
/// `direction_seed` labels the random directions the process uses; it is
/// combined with the dataset seed, so two specs with equal fields describe
/// the same distribution within a dataset.
///
/// `bonafide_affinity` is the cosine between this process's mean direction
/// and the bonafide mean direction: spoofing systems imitate genuine speech,
/// so their means point mostly at the bonafide signature with a
/// system-specific artifact residual orthogonal to it. 1.0 reproduces the
/// bonafide direction exactly, 0.0 is an unrelated direction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProcessSpec {
    pub mean_shift: f64,
    pub mixing_scale: f64,
    pub temporal_corr: f64,
    pub direction_seed: u64,
    pub bonafide_affinity: f64,
}

/// One spoofing system: its protocol id plus its generating process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackMode {
    pub system_id: String,
    pub process: ProcessSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub frame_dim: usize,
    pub latent_dim: usize,
    pub frames_min: usize,
    pub frames_max: usize,
    pub n_train_bonafide: usize,
    pub n_train_spoof: usize,
    pub n_dev_bonafide: usize,
    pub n_dev_spoof: usize,
    pub n_eval_bonafide: usize,
    pub n_eval_spoof: usize,
    pub bonafide_process: ProcessSpec,
    pub attack_modes_train: Vec<AttackMode>,
    pub attack_modes_eval_unseen: Vec<AttackMode>,
    pub noise_level: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        let mode =
            |id: &str, shift: f64, mixing: f64, corr: f64, seed: u64, affinity: f64| AttackMode {
                system_id: id.to_string(),
                process: ProcessSpec {
                    mean_shift: shift,
                    mixing_scale: mixing,
                    temporal_corr: corr,
                    direction_seed: seed,
                    bonafide_affinity: affinity,
                },
            };
        Self {
            frame_dim: 20,
            latent_dim: 4,
            frames_min: 20,
            frames_max: 40,
            n_train_bonafide: 200,
            n_train_spoof: 1800,
            n_dev_bonafide: 300,
            n_dev_spoof: 2700,
            n_eval_bonafide: 200,
            n_eval_spoof: 800,
            bonafide_process: ProcessSpec {
                mean_shift: 2.0,
                mixing_scale: 1.0,
                temporal_corr: 0.9,
                direction_seed: 1,
                bonafide_affinity: 1.0,
            },
            attack_modes_train: vec![
                mode("S01", 2.0, 1.2, 0.55, 101, 0.88),
                mode("S02", 2.3, 1.1, 0.7, 102, 0.82),
                mode("S03", 1.8, 1.3, 0.5, 103, 0.9),
            ],
            attack_modes_eval_unseen: vec![
                mode("U01", 2.1, 1.2, 0.6, 201, 0.85),
                mode("U02", 1.9, 1.15, 0.65, 202, 0.87),
            ],
            noise_level: 0.4,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frame_dim == 0 || self.latent_dim == 0 {
            return Err(Error::InvalidConfig("frame and latent dims must be > 0".into()));
        }
        if self.frames_min == 0 || self.frames_min > self.frames_max {
            return Err(Error::InvalidConfig(
                "frame count range must satisfy 1 <= min <= max".into(),
            ));
        }
        for (name, n) in [
            ("train bonafide", self.n_train_bonafide),
            ("train spoof", self.n_train_spoof),
            ("dev bonafide", self.n_dev_bonafide),
            ("dev spoof", self.n_dev_spoof),
            ("eval bonafide", self.n_eval_bonafide),
            ("eval spoof", self.n_eval_spoof),
        ] {
            if n == 0 {
                return Err(Error::InvalidConfig(format!("{name} count must be >= 1")));
            }
        }
        if self.noise_level < 0.0 {
            return Err(Error::InvalidConfig("noise level must be >= 0".into()));
        }
        if self.attack_modes_train.is_empty() || self.attack_modes_eval_unseen.is_empty() {
            return Err(Error::InvalidConfig(
                "need at least one training and one unseen attack mode".into(),
            ));
        }
        let train_ids: HashSet<&str> = self
            .attack_modes_train
            .iter()
            .map(|m| m.system_id.as_str())
            .collect();
        if train_ids.len() != self.attack_modes_train.len() {
            return Err(Error::InvalidConfig("duplicate training system id".into()));
        }
        let unseen_ids: HashSet<&str> = self
            .attack_modes_eval_unseen
            .iter()
            .map(|m| m.system_id.as_str())
            .collect();
        if unseen_ids.len() != self.attack_modes_eval_unseen.len() {
            return Err(Error::InvalidConfig("duplicate unseen system id".into()));
        }
        if !train_ids.is_disjoint(&unseen_ids) {
            return Err(Error::InvalidConfig(
                "train and unseen-eval attack modes must be disjoint".into(),
            ));
        }
        for mode in self
            .attack_modes_train
            .iter()
            .chain(self.attack_modes_eval_unseen.iter())
        {
            if mode.system_id == "-" || mode.system_id.is_empty() {
                return Err(Error::InvalidConfig(
                    "spoof system ids must be non-empty and not `-`".into(),
                ));
            }
        }
        for spec in std::iter::once(&self.bonafide_process)
            .chain(self.attack_modes_train.iter().map(|m| &m.process))
            .chain(self.attack_modes_eval_unseen.iter().map(|m| &m.process))
        {
            if !(-1.0..=1.0).contains(&spec.bonafide_affinity) {
                return Err(Error::InvalidConfig(
                    "bonafide_affinity must lie in [-1, 1]".into(),
                ));
            }
            if !(0.0..1.0).contains(&spec.temporal_corr) {
                return Err(Error::InvalidConfig(
                    "temporal_corr must lie in [0, 1)".into(),
                ));
            }
            if spec.mean_shift < 0.0 || spec.mixing_scale < 0.0 {
                return Err(Error::InvalidConfig(
                    "mean_shift and mixing_scale must be >= 0".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Frozen realization of a process: its mean offset and latent-to-frame
/// mixing matrix.
struct ProcessDirections {
    mean: Array1<f64>,
    mixing: Array2<f64>, // F x k
    temporal_corr: f64,
}

fn unit_direction(config: &SynthConfig, direction_seed: u64) -> Array1<f64> {
    let mut rng = substream(config.seed, &format!("direction/{direction_seed}"));
    let mut dir: Array1<f64> =
        Array1::from_shape_fn(config.frame_dim, |_| StandardNormal.sample(&mut rng));
    let norm = dir.dot(&dir).sqrt();
    if norm > 0.0 {
        dir /= norm;
    } else {
        dir[0] = 1.0;
    }
    dir
}

/// Realizes a process against the bonafide mean direction: the mean points
/// at `affinity * bonafide + sqrt(1 - affinity^2) * residual`, where the
/// residual is the process's own direction orthogonalized against bonafide.
fn realize_process(
    config: &SynthConfig,
    spec: &ProcessSpec,
    bonafide_dir: &Array1<f64>,
) -> ProcessDirections {
    let own = unit_direction(config, spec.direction_seed);
    let affinity = spec.bonafide_affinity.clamp(-1.0, 1.0);
    let mut residual = &own - &(own.dot(bonafide_dir) * bonafide_dir);
    let res_norm = residual.dot(&residual).sqrt();
    let dir = if res_norm > 1e-12 {
        residual /= res_norm;
        affinity * bonafide_dir + &((1.0 - affinity * affinity).sqrt() * &residual)
    } else {
        bonafide_dir.clone()
    };

    let mut rng = substream(config.seed, &format!("mixing/{}", spec.direction_seed));
    let scale = spec.mixing_scale / (config.latent_dim as f64).sqrt();
    let mixing = Array2::from_shape_fn((config.frame_dim, config.latent_dim), |_| {
        let g: f64 = StandardNormal.sample(&mut rng);
        g * scale
    });
    ProcessDirections {
        mean: dir * spec.mean_shift,
        mixing,
        temporal_corr: spec.temporal_corr.clamp(0.0, 0.999),
    }
}

/// One utterance from a realized process. Values are quantized through f32 so
/// in-memory data and the on-disk container agree bit for bit.
fn sample_utterance(
    config: &SynthConfig,
    dirs: &ProcessDirections,
    rng: &mut impl Rng,
) -> Array2<f64> {
    let t = rng.random_range(config.frames_min..=config.frames_max);
    let k = config.latent_dim;
    let rho = dirs.temporal_corr;
    let innovation = (1.0 - rho * rho).sqrt();

    let mut latent: Array1<f64> = Array1::from_shape_fn(k, |_| StandardNormal.sample(rng));
    let mut frames = Array2::zeros((t, config.frame_dim));
    for mut row in frames.outer_iter_mut() {
        let projected = dirs.mixing.dot(&latent);
        for (j, x) in row.iter_mut().enumerate() {
            let noise: f64 = StandardNormal.sample(rng);
            *x = dirs.mean[j] + projected[j] + config.noise_level * noise;
        }
        for z in latent.iter_mut() {
            let w: f64 = StandardNormal.sample(rng);
            *z = rho * *z + innovation * w;
        }
    }
    frames.mapv_into(|x| x as f32 as f64)
}

fn generate_split(
    config: &SynthConfig,
    split: Split,
    n_bonafide: usize,
    n_spoof: usize,
    modes: &[AttackMode],
    id_prefix: &str,
) -> Dataset {
    let mut rng = substream(config.seed, &format!("data/{split}"));
    let bonafide_dir = unit_direction(config, config.bonafide_process.direction_seed);
    let bonafide_dirs = realize_process(config, &config.bonafide_process, &bonafide_dir);
    let mode_dirs: Vec<ProcessDirections> = modes
        .iter()
        .map(|m| realize_process(config, &m.process, &bonafide_dir))
        .collect();

    let mut records = Vec::with_capacity(n_bonafide + n_spoof);
    for i in 0..n_bonafide {
        records.push(Utterance {
            id: format!("{id_prefix}_B{i:06}"),
            frames: sample_utterance(config, &bonafide_dirs, &mut rng),
            key: Label::Bonafide,
            system_id: "-".to_string(),
        });
    }
    for i in 0..n_spoof {
        let m = i % modes.len();
        records.push(Utterance {
            id: format!("{id_prefix}_S{i:06}"),
            frames: sample_utterance(config, &mode_dirs[m], &mut rng),
            key: Label::Spoof,
            system_id: modes[m].system_id.clone(),
        });
    }
    Dataset { split, records }
}

/// Generates the train/dev/eval triple. Dev shares the training attack
/// modes; eval sees only the held-out ones. Deterministic given the config.
pub fn gen_synthetic(config: &SynthConfig) -> Result<(Dataset, Dataset, Dataset)> {
    config.validate()?;
    let train = generate_split(
        config,
        Split::Train,
        config.n_train_bonafide,
        config.n_train_spoof,
        &config.attack_modes_train,
        "SYN_T",
    );
    let dev = generate_split(
        config,
        Split::Dev,
        config.n_dev_bonafide,
        config.n_dev_spoof,
        &config.attack_modes_train,
        "SYN_D",
    );
    let eval = generate_split(
        config,
        Split::Eval,
        config.n_eval_bonafide,
        config.n_eval_spoof,
        &config.attack_modes_eval_unseen,
        "SYN_E",
    );
    Ok((train, dev, eval))
}

/// Truncates or cycle-pads the frame rows to exactly `t_fixed`, mirroring the
/// fixed-duration policy applied before batching.
pub fn fix_length(frames: &Array2<f64>, t_fixed: usize) -> Array2<f64> {
    let t = frames.nrows();
    Array2::from_shape_fn((t_fixed, frames.ncols()), |(i, j)| frames[[i % t, j]])
}

// ---------------------------------------------------------------------------
// Protocol files (ASVspoof LA convention)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProtocolEntry {
    pub speaker_id: String,
    pub utterance_id: String,
    pub system_id: String,
    pub key: Label,
}

/// Parses a whitespace-separated protocol file with rows
/// `speaker_id utterance_id - system_id key`. Blank lines are skipped.
pub fn parse_protocol(path: &Path) -> Result<Vec<ProtocolEntry>> {
    let text = fs::read_to_string(path)?;
    let display = path.display().to_string();
    let mut entries = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 5 {
            return Err(Error::Malformed {
                path: display,
                line: idx + 1,
                message: format!("expected 5 fields, got {}", fields.len()),
            });
        }
        let key = fields[4].parse::<Label>().map_err(|_| Error::Malformed {
            path: display.clone(),
            line: idx + 1,
            message: format!("unknown key token `{}`", fields[4]),
        })?;
        entries.push(ProtocolEntry {
            speaker_id: fields[0].to_string(),
            utterance_id: fields[1].to_string(),
            system_id: fields[3].to_string(),
            key,
        });
    }
    Ok(entries)
}

// ---------------------------------------------------------------------------
// Feature container and manifest
// ---------------------------------------------------------------------------

/// Writes one utterance: `T`,`F` header (u32 LE) then row-major f32 LE data.
pub fn write_feature_file(path: &Path, frames: &Array2<f64>) -> Result<()> {
    let mut buf = Vec::with_capacity(8 + frames.len() * 4);
    buf.extend_from_slice(&(frames.nrows() as u32).to_le_bytes());
    buf.extend_from_slice(&(frames.ncols() as u32).to_le_bytes());
    for &x in frames.iter() {
        buf.extend_from_slice(&(x as f32).to_le_bytes());
    }
    let mut file = fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

pub fn read_feature_file(path: &Path) -> Result<Array2<f64>> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let display = path.display().to_string();
    if bytes.len() < 8 {
        return Err(Error::Malformed {
            path: display,
            line: 0,
            message: "feature file shorter than its header".into(),
        });
    }
    let t = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let f = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let expected = 8 + t * f * 4;
    if bytes.len() != expected {
        return Err(Error::Malformed {
            path: display,
            line: 0,
            message: format!("expected {expected} bytes for {t}x{f}, got {}", bytes.len()),
        });
    }
    let mut values = Vec::with_capacity(t * f);
    for chunk in bytes[8..].chunks_exact(4) {
        values.push(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
    }
    Array2::from_shape_vec((t, f), values).map_err(|e| Error::Malformed {
        path: display,
        line: 0,
        message: e.to_string(),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestRow {
    utt_id: String,
    path: String,
    key: String,
    system_id: String,
    split: String,
}

/// Writes the datasets under `dir`: per-utterance feature files in
/// `features/` plus `manifest.csv` at the top.
pub fn write_dataset_dir(dir: &Path, datasets: &[&Dataset]) -> Result<()> {
    let features = dir.join("features");
    fs::create_dir_all(&features)?;
    let mut writer = csv::Writer::from_path(dir.join("manifest.csv")).map_err(csv_error)?;
    for ds in datasets {
        for utt in &ds.records {
            let rel = format!("features/{}.fea", utt.id);
            write_feature_file(&dir.join(&rel), &utt.frames)?;
            writer
                .serialize(ManifestRow {
                    utt_id: utt.id.clone(),
                    path: rel,
                    key: utt.key.as_str().to_string(),
                    system_id: utt.system_id.clone(),
                    split: ds.split.to_string(),
                })
                .map_err(csv_error)?;
        }
    }
    writer.flush()?;
    Ok(())
}

fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::InvalidConfig(format!("manifest error: {other:?}")),
    }
}

fn read_manifest(manifest: &Path) -> Result<Vec<ManifestRow>> {
    let display = manifest.display().to_string();
    let mut reader = csv::Reader::from_path(manifest).map_err(csv_error)?;
    let mut rows = Vec::new();
    for (idx, row) in reader.deserialize::<ManifestRow>().enumerate() {
        rows.push(row.map_err(|e| Error::Malformed {
            path: display.clone(),
            line: idx + 2, // header is line 1
            message: e.to_string(),
        })?);
    }
    Ok(rows)
}

/// Re-checks manifest-level invariants: unique ids and no training spoof
/// system appearing in eval.
fn check_manifest(manifest: &Path, rows: &[ManifestRow]) -> Result<()> {
    let display = manifest.display().to_string();
    let mut seen = HashSet::new();
    for (idx, row) in rows.iter().enumerate() {
        if !seen.insert(row.utt_id.as_str()) {
            return Err(Error::Malformed {
                path: display,
                line: idx + 2,
                message: format!("duplicate utterance id `{}`", row.utt_id),
            });
        }
    }
    let systems = |split: &str| -> HashSet<&str> {
        rows.iter()
            .filter(|r| r.split == split && r.key == "spoof")
            .map(|r| r.system_id.as_str())
            .collect()
    };
    let train = systems("train");
    let eval = systems("eval");
    if !train.is_disjoint(&eval) {
        let mut shared: Vec<&str> = train.intersection(&eval).copied().collect();
        shared.sort_unstable();
        return Err(Error::InvalidConfig(format!(
            "train and eval share spoof systems: {}",
            shared.join(", ")
        )));
    }
    Ok(())
}

/// Loads one split from a manifest, reading its feature files. Paths are
/// resolved relative to the manifest's directory.
pub fn load_split(manifest: &Path, split: Split) -> Result<Dataset> {
    let rows = read_manifest(manifest)?;
    check_manifest(manifest, &rows)?;
    let base = manifest.parent().unwrap_or_else(|| Path::new("."));
    let display = manifest.display().to_string();

    let wanted: Vec<&ManifestRow> = rows
        .iter()
        .filter(|r| r.split == split.as_str())
        .collect();
    let missing: Vec<String> = wanted
        .iter()
        .filter(|r| !base.join(&r.path).exists())
        .map(|r| r.utt_id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingUtterances(missing));
    }

    let mut records = Vec::with_capacity(wanted.len());
    let mut frame_dim: Option<usize> = None;
    for (idx, row) in wanted.iter().enumerate() {
        let key = row.key.parse::<Label>().map_err(|_| Error::Malformed {
            path: display.clone(),
            line: idx + 2,
            message: format!("unknown key token `{}`", row.key),
        })?;
        let frames = read_feature_file(&base.join(&row.path))?;
        match frame_dim {
            None => frame_dim = Some(frames.ncols()),
            Some(f) if f != frames.ncols() => {
                return Err(Error::ShapeMismatch {
                    context: "feature loading",
                    dimension: "frame dim",
                    expected: f.to_string(),
                    actual: format!("{} in `{}`", frames.ncols(), row.utt_id),
                });
            }
            _ => {}
        }
        records.push(Utterance {
            id: row.utt_id.clone(),
            frames,
            key,
            system_id: row.system_id.clone(),
        });
    }
    Ok(Dataset { split, records })
}

pub fn manifest_path(dir: &Path) -> PathBuf {
    dir.join("manifest.csv")
}
