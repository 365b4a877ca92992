//! Detection metrics and score/embedding files.
//!
//! Score convention everywhere: higher = more bonafide. At a threshold `t`,
//! the miss rate is the fraction of bonafide scores `< t` and the
//! false-acceptance rate is the fraction of spoof scores `>= t`.
//!
//! EER convention (documented so golden files stay stable): candidate
//! thresholds are +/- infinity plus the midpoints of adjacent sorted unique
//! scores, scanned in increasing order. At the first candidate where
//! `FAR - FRR <= 0`, either the rates are exactly equal (that is the EER and
//! its threshold) or the EER is interpolated linearly between this operating
//! point and the previous one: with `d1 = FAR1 - FRR1 > 0` and
//! `d2 = FAR2 - FRR2 < 0`, `lambda = d1 / (d1 - d2)` and
//! `EER = FRR1 + lambda * (FRR2 - FRR1)`. The reported threshold is the
//! candidate whose |FAR - FRR| is smaller, the lower one on ties.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::Label;
use crate::model::Model;

/// One scored trial. `key` is present when the ground truth is known.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRecord {
    pub utterance_id: String,
    pub score: f64,
    pub key: Option<Label>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub eer: f64,
    pub eer_threshold: f64,
    pub min_tdcf: Option<f64>,
    pub n_bonafide: usize,
    pub n_spoof: usize,
}

/// Cost model and fixed ASV operating point for the tandem detection cost.
/// Defaults mirror the ASVspoof 2019 LA cost model with a nominal ASV
/// operating point; real use injects measured ASV error rates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TdcfParams {
    pub prior_target: f64,
    pub prior_nontarget: f64,
    pub prior_spoof: f64,
    pub cost_miss: f64,
    pub cost_fa: f64,
    pub cost_fa_spoof: f64,
    pub p_miss_asv: f64,
    pub p_fa_asv: f64,
    pub p_miss_spoof_asv: f64,
}

impl Default for TdcfParams {
    fn default() -> Self {
        Self {
            prior_target: 0.9405,
            prior_nontarget: 0.0095,
            prior_spoof: 0.05,
            cost_miss: 1.0,
            cost_fa: 10.0,
            cost_fa_spoof: 10.0,
            p_miss_asv: 0.01,
            p_fa_asv: 0.01,
            p_miss_spoof_asv: 0.05,
        }
    }
}

impl TdcfParams {
    pub fn validate(&self) -> Result<()> {
        let prior_sum = self.prior_target + self.prior_nontarget + self.prior_spoof;
        if (prior_sum - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidConfig(format!(
                "tandem-cost priors must sum to 1, got {prior_sum}"
            )));
        }
        if self.prior_target < 0.0 || self.prior_nontarget < 0.0 || self.prior_spoof < 0.0 {
            return Err(Error::InvalidConfig("tandem-cost priors must be >= 0".into()));
        }
        if self.cost_miss <= 0.0 || self.cost_fa <= 0.0 || self.cost_fa_spoof <= 0.0 {
            return Err(Error::InvalidConfig("tandem costs must be > 0".into()));
        }
        for (name, p) in [
            ("p_miss_asv", self.p_miss_asv),
            ("p_fa_asv", self.p_fa_asv),
            ("p_miss_spoof_asv", self.p_miss_spoof_asv),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidConfig(format!("{name} must be in [0, 1]")));
            }
        }
        let (c_miss, c_fa) = self.weights()?;
        debug_assert!(c_miss > 0.0 && c_fa > 0.0);
        Ok(())
    }

    /// The two threshold-dependent weights of the tandem cost: the miss
    /// weight discounts bonafide trials the fixed ASV already rejects, the
    /// false-acceptance weight counts spoof trials the ASV would pass.
    fn weights(&self) -> Result<(f64, f64)> {
        let c_miss = self.prior_target * self.cost_miss * (1.0 - self.p_miss_asv)
            - self.prior_nontarget * self.cost_fa * self.p_fa_asv;
        let c_fa = self.prior_spoof * self.cost_fa_spoof * (1.0 - self.p_miss_spoof_asv);
        if c_miss <= 0.0 || c_fa <= 0.0 {
            return Err(Error::InvalidConfig(
                "tandem-cost weights are non-positive at this ASV operating point".into(),
            ));
        }
        Ok((c_miss, c_fa))
    }
}

fn check_scores(bonafide: &[f64], spoof: &[f64]) -> Result<()> {
    if bonafide.is_empty() {
        return Err(Error::EmptyClass("bonafide"));
    }
    if spoof.is_empty() {
        return Err(Error::EmptyClass("spoof"));
    }
    if !bonafide.iter().chain(spoof.iter()).all(|x| x.is_finite()) {
        return Err(Error::NonFinite("detection scores"));
    }
    Ok(())
}

/// -inf, midpoints of adjacent sorted unique scores, +inf.
fn candidate_thresholds(bonafide: &[f64], spoof: &[f64]) -> Vec<f64> {
    let mut unique: Vec<f64> = bonafide.iter().chain(spoof.iter()).copied().collect();
    unique.sort_unstable_by(f64::total_cmp);
    unique.dedup();
    let mut candidates = Vec::with_capacity(unique.len() + 1);
    candidates.push(f64::NEG_INFINITY);
    for pair in unique.windows(2) {
        candidates.push((pair[0] + pair[1]) / 2.0);
    }
    candidates.push(f64::INFINITY);
    candidates
}

/// (miss rate, false-acceptance rate) at each candidate threshold, computed
/// from sorted copies with binary searches.
fn det_points(bonafide: &[f64], spoof: &[f64], candidates: &[f64]) -> Vec<(f64, f64)> {
    let mut bona = bonafide.to_vec();
    bona.sort_unstable_by(f64::total_cmp);
    let mut sp = spoof.to_vec();
    sp.sort_unstable_by(f64::total_cmp);
    let n_b = bona.len() as f64;
    let n_s = sp.len() as f64;
    candidates
        .iter()
        .map(|&t| {
            let miss = bona.partition_point(|&x| x < t) as f64 / n_b;
            let fa = (sp.len() - sp.partition_point(|&x| x < t)) as f64 / n_s;
            (miss, fa)
        })
        .collect()
}

/// Shared crossing rule. `points` are (FRR, FAR) pairs at increasing
/// thresholds; FAR - FRR starts at +1 and is non-increasing.
fn eer_from_det_points(candidates: &[f64], points: &[(f64, f64)]) -> (f64, f64) {
    for k in 0..points.len() {
        let (frr, far) = points[k];
        let diff = far - frr;
        if diff == 0.0 {
            return (frr, candidates[k]);
        }
        if diff < 0.0 {
            let (frr_prev, far_prev) = points[k - 1];
            let d1 = far_prev - frr_prev;
            let d2 = diff;
            let lambda = d1 / (d1 - d2);
            let eer = frr_prev + lambda * (frr - frr_prev);
            let threshold = if d1 <= -d2 { candidates[k - 1] } else { candidates[k] };
            return (eer, threshold);
        }
    }
    // Unreachable: FAR - FRR is -1 at +infinity.
    (0.5, f64::NAN)
}

/// Equal error rate and its threshold under the documented sweep convention.
pub fn compute_eer(bonafide: &[f64], spoof: &[f64]) -> Result<(f64, f64)> {
    check_scores(bonafide, spoof)?;
    let candidates = candidate_thresholds(bonafide, spoof);
    let points = det_points(bonafide, spoof, &candidates);
    Ok(eer_from_det_points(&candidates, &points))
}

/// Minimum normalized tandem detection cost over all countermeasure
/// thresholds, with the ASV operating point held fixed:
/// `min_t (C_miss_w * FRR(t) + C_fa_w * FAR(t)) / min(C_miss_w, C_fa_w)`.
/// The normalizer is the better of the two default decisions (accept all /
/// reject all), so the value lies in [0, 1].
pub fn min_tdcf(bonafide: &[f64], spoof: &[f64], params: &TdcfParams) -> Result<f64> {
    params.validate()?;
    check_scores(bonafide, spoof)?;
    let (c_miss, c_fa) = params.weights()?;
    let normalizer = c_miss.min(c_fa);
    let candidates = candidate_thresholds(bonafide, spoof);
    let points = det_points(bonafide, spoof, &candidates);
    let min_cost = points
        .iter()
        .map(|&(frr, far)| c_miss * frr + c_fa * far)
        .fold(f64::INFINITY, f64::min);
    Ok(min_cost / normalizer)
}

/// A score quantized exactly as the score-file writer prints it (six decimal
/// places), so in-memory metrics agree with file-derived ones.
pub fn rounded_score(score: f64) -> f64 {
    format!("{score:.6}").parse().expect("formatted float reparses")
}

/// Writes `utterance_id<space>score` lines, scores with six decimals, LF
/// endings. Ids must be unique, non-empty and free of whitespace.
pub fn write_score_file(records: &[ScoreRecord], path: &Path) -> Result<()> {
    let mut seen = HashSet::new();
    let mut out = BufWriter::new(fs::File::create(path)?);
    for record in records {
        if record.utterance_id.is_empty()
            || record.utterance_id.chars().any(|c| c.is_whitespace())
        {
            return Err(Error::InvalidConfig(format!(
                "utterance id `{}` is not writable to a score file",
                record.utterance_id
            )));
        }
        if !seen.insert(record.utterance_id.as_str()) {
            return Err(Error::InvalidConfig(format!(
                "duplicate utterance id `{}` in score records",
                record.utterance_id
            )));
        }
        if !record.score.is_finite() {
            return Err(Error::NonFinite("score record"));
        }
        writeln!(out, "{} {:.6}", record.utterance_id, record.score)?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a score file back; keys are not stored in the file.
pub fn read_score_file(path: &Path) -> Result<Vec<ScoreRecord>> {
    let text = fs::read_to_string(path)?;
    let display = path.display().to_string();
    let mut seen = HashSet::new();
    let mut records = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let mut fields = line.split(' ');
        let (Some(id), Some(score), None) = (fields.next(), fields.next(), fields.next()) else {
            return Err(Error::Malformed {
                path: display,
                line: idx + 1,
                message: "expected `utterance_id score`".into(),
            });
        };
        if id.is_empty() {
            return Err(Error::Malformed {
                path: display,
                line: idx + 1,
                message: "empty utterance id".into(),
            });
        }
        let score: f64 = score.parse().map_err(|_| Error::Malformed {
            path: display.clone(),
            line: idx + 1,
            message: format!("non-numeric score `{score}`"),
        })?;
        if !seen.insert(id.to_string()) {
            return Err(Error::Malformed {
                path: display,
                line: idx + 1,
                message: format!("duplicate utterance id `{id}`"),
            });
        }
        records.push(ScoreRecord {
            utterance_id: id.to_string(),
            score,
            key: None,
        });
    }
    Ok(records)
}

/// Scores every utterance in the dataset with the model's detector.
pub fn score_dataset(model: &Model, dataset: &Dataset) -> Result<Vec<ScoreRecord>> {
    dataset
        .records
        .iter()
        .map(|utt| {
            Ok(ScoreRecord {
                utterance_id: utt.id.clone(),
                score: model.score_utterance(&utt.frames)?,
                key: Some(utt.key),
            })
        })
        .collect()
}

/// Splits labeled records into (bonafide, spoof) score vectors.
pub fn split_scores(records: &[ScoreRecord]) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut bonafide = Vec::new();
    let mut spoof = Vec::new();
    for record in records {
        match record.key {
            Some(Label::Bonafide) => bonafide.push(record.score),
            Some(Label::Spoof) => spoof.push(record.score),
            None => {
                return Err(Error::InvalidConfig(format!(
                    "record `{}` has no key; cannot evaluate",
                    record.utterance_id
                )))
            }
        }
    }
    Ok((bonafide, spoof))
}

/// EER (and optionally min t-DCF) from labeled score records.
pub fn evaluate_records(records: &[ScoreRecord], tdcf: Option<&TdcfParams>) -> Result<EvalReport> {
    let (bonafide, spoof) = split_scores(records)?;
    let (eer, eer_threshold) = compute_eer(&bonafide, &spoof)?;
    let min_tdcf_value = match tdcf {
        Some(params) => Some(min_tdcf(&bonafide, &spoof, params)?),
        None => None,
    };
    Ok(EvalReport {
        eer,
        eer_threshold,
        min_tdcf: min_tdcf_value,
        n_bonafide: bonafide.len(),
        n_spoof: spoof.len(),
    })
}

/// Dumps embeddings as CSV with header `utt_id,key,e0..e{D-1}` for external
/// projection tools.
pub fn dump_embeddings(model: &Model, dataset: &Dataset, path: &Path) -> Result<()> {
    let dim = model.embedding_dim();
    let mut out = BufWriter::new(fs::File::create(path)?);
    let mut header = String::from("utt_id,key");
    for i in 0..dim {
        header.push_str(&format!(",e{i}"));
    }
    writeln!(out, "{header}")?;
    for utt in &dataset.records {
        let embedding = model.embed(&utt.frames)?;
        let mut line = format!("{},{}", utt.id, utt.key);
        for value in embedding.values().iter() {
            line.push_str(&format!(",{value}"));
        }
        writeln!(out, "{line}")?;
    }
    out.flush()?;
    Ok(())
}

/// Per-system EER breakdown, useful when eval mixes several attack systems.
pub fn eer_by_system(records: &[ScoreRecord], dataset: &Dataset) -> Result<BTreeMap<String, f64>> {
    let bonafide: Vec<f64> = records
        .iter()
        .filter(|r| r.key == Some(Label::Bonafide))
        .map(|r| r.score)
        .collect();
    let by_id: BTreeMap<&str, &str> = dataset
        .records
        .iter()
        .map(|u| (u.id.as_str(), u.system_id.as_str()))
        .collect();
    let mut grouped: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for record in records.iter().filter(|r| r.key == Some(Label::Spoof)) {
        if let Some(system) = by_id.get(record.utterance_id.as_str()) {
            grouped.entry(system.to_string()).or_default().push(record.score);
        }
    }
    let mut out = BTreeMap::new();
    for (system, spoof) in grouped {
        let (eer, _) = compute_eer(&bonafide, &spoof)?;
        out.insert(system, eer);
    }
    Ok(out)
}
