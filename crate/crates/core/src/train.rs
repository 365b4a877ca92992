//! End-to-end training: 1:9 batch composition, the per-batch
//! update-centroid / compute-loss / optimizer-step cycle, dev-EER early
//! stopping, and top-k checkpoint weight averaging.

use std::io::Write;
use std::time::Instant;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adam::{adam_step, AdamConfig, AdamMoments};
use crate::asp::{Activation, AspParams, UtteranceEmbedding};
use crate::centroid::{
    write_trajectory_header, write_trajectory_row, BonafideBatchSummary, CentroidPolicy,
    CentroidState, PolicyInput,
};
use crate::data::{fix_length, Dataset};
use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::eval::{compute_eer, score_dataset, split_scores};
use crate::losses::{ClassWeights, Label, OcSoftmaxParams, WceParams};
use crate::model::{LossHead, LossKind, Model};
use crate::rng::{named_seed, substream};

/// Centroid policy selector in configuration; `PartialAcs` takes its freeze
/// epoch from [`TrainConfig::freeze_epoch`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CentroidKind {
    Acs,
    Fixed,
    Trainable,
    PartialAcs,
}

/// Whether the centroid absorbs the batch's bonafide embeddings before or
/// after the loss is computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UpdateOrder {
    UpdateThenLoss,
    LossThenUpdate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub bonafide_per_batch: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub max_epochs: u32,
    pub patience: u32,
    pub top_k_average: usize,
    pub seed: u64,
    pub centroid: CentroidKind,
    pub freeze_epoch: u32,
    pub loss: LossKind,
    pub hidden_dim: usize,
    pub embed_channels: usize,
    pub frames_per_utterance: usize,
    pub update_order: UpdateOrder,
    pub activation: Activation,
    pub class_weights: ClassWeights,
    pub ocsoftmax_margin_bonafide: f64,
    pub ocsoftmax_margin_spoof: f64,
    pub ocsoftmax_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 20,
            bonafide_per_batch: 2,
            learning_rate: 3e-4,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            max_epochs: 100,
            patience: 7,
            top_k_average: 5,
            seed: 7,
            centroid: CentroidKind::Acs,
            freeze_epoch: 5,
            loss: LossKind::AcsOc,
            hidden_dim: 32,
            embed_channels: 16,
            frames_per_utterance: 30,
            update_order: UpdateOrder::UpdateThenLoss,
            activation: Activation::Tanh,
            class_weights: ClassWeights::default(),
            ocsoftmax_margin_bonafide: 0.9,
            ocsoftmax_margin_spoof: 0.2,
            ocsoftmax_scale: 20.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be >= 1".into()));
        }
        if self.bonafide_per_batch >= self.batch_size {
            return Err(Error::InvalidConfig(
                "bonafide_per_batch must be smaller than batch_size".into(),
            ));
        }
        if self.patience == 0 {
            return Err(Error::InvalidConfig("patience must be >= 1".into()));
        }
        if self.top_k_average == 0 {
            return Err(Error::InvalidConfig("top_k_average must be >= 1".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::InvalidConfig("max_epochs must be >= 1".into()));
        }
        if self.hidden_dim == 0 || self.embed_channels == 0 || self.frames_per_utterance == 0 {
            return Err(Error::InvalidConfig(
                "model dimensions must be >= 1".into(),
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig("learning rate must be positive".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::InvalidConfig("weight decay must be >= 0".into()));
        }
        Ok(())
    }

    pub fn centroid_policy(&self) -> CentroidPolicy {
        match self.centroid {
            CentroidKind::Acs => CentroidPolicy::Acs,
            CentroidKind::Fixed => CentroidPolicy::Fixed,
            CentroidKind::Trainable => CentroidPolicy::Trainable,
            CentroidKind::PartialAcs => CentroidPolicy::PartialAcs {
                freeze_epoch: self.freeze_epoch,
            },
        }
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
            weight_decay: self.weight_decay,
        }
    }
}

/// Index batches for one epoch: every batch holds exactly
/// `bonafide_per_batch` bonafide indices followed by
/// `batch_size - bonafide_per_batch` spoof indices. Spoof samples are
/// shuffled and consumed at most once per epoch (the ragged tail is
/// dropped); bonafide samples cycle, reshuffling when exhausted.
pub fn compose_batches(
    dataset: &Dataset,
    config: &TrainConfig,
    epoch_seed: u64,
) -> Result<Vec<Vec<usize>>> {
    config.validate()?;
    let bonafide = dataset.bonafide_indices();
    let spoof = dataset.spoof_indices();
    let spoof_per_batch = config.batch_size - config.bonafide_per_batch;
    if bonafide.len() < config.bonafide_per_batch {
        return Err(Error::InsufficientSamples {
            class: "bonafide",
            needed: config.bonafide_per_batch,
            available: bonafide.len(),
        });
    }
    if spoof.len() < spoof_per_batch {
        return Err(Error::InsufficientSamples {
            class: "spoof",
            needed: spoof_per_batch,
            available: spoof.len(),
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed);
    let mut spoof_order = spoof;
    spoof_order.shuffle(&mut rng);
    let mut bona_pool = bonafide;
    bona_pool.shuffle(&mut rng);
    let mut bona_pos = 0usize;

    let n_batches = spoof_order.len() / spoof_per_batch;
    let mut batches = Vec::with_capacity(n_batches);
    for b in 0..n_batches {
        let mut batch = Vec::with_capacity(config.batch_size);
        for _ in 0..config.bonafide_per_batch {
            if bona_pos == bona_pool.len() {
                bona_pool.shuffle(&mut rng);
                bona_pos = 0;
            }
            batch.push(bona_pool[bona_pos]);
            bona_pos += 1;
        }
        batch.extend_from_slice(&spoof_order[b * spoof_per_batch..(b + 1) * spoof_per_batch]);
        batches.push(batch);
    }
    Ok(batches)
}

/// Stops once the dev EER has not strictly improved for `patience`
/// consecutive epochs.
#[derive(Debug, Clone)]
pub struct EarlyStopper {
    patience: u32,
    best_eer: f64,
    best_epoch: u32,
    since_improvement: u32,
}

impl EarlyStopper {
    pub fn new(patience: u32) -> Self {
        Self {
            patience,
            best_eer: f64::INFINITY,
            best_epoch: 0,
            since_improvement: 0,
        }
    }

    /// Returns true when training should stop after this epoch.
    pub fn observe(&mut self, epoch: u32, dev_eer: f64) -> bool {
        if dev_eer < self.best_eer {
            self.best_eer = dev_eer;
            self.best_epoch = epoch;
            self.since_improvement = 0;
            false
        } else {
            self.since_improvement += 1;
            self.since_improvement >= self.patience
        }
    }

    pub fn best_epoch(&self) -> u32 {
        self.best_epoch
    }

    pub fn best_eer(&self) -> f64 {
        self.best_eer
    }
}

/// Elementwise arithmetic mean of parameter snapshots.
pub fn average_weights(snapshots: &[Array1<f64>]) -> Result<Array1<f64>> {
    let Some(first) = snapshots.first() else {
        return Err(Error::InvalidConfig("cannot average zero checkpoints".into()));
    };
    let mut sum = Array1::zeros(first.len());
    for snapshot in snapshots {
        if snapshot.len() != first.len() {
            return Err(Error::ShapeMismatch {
                context: "weight averaging",
                dimension: "parameter count",
                expected: first.len().to_string(),
                actual: snapshot.len().to_string(),
            });
        }
        sum += snapshot;
    }
    Ok(sum / snapshots.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: u32,
    pub train_loss: f64,
    pub dev_eer: f64,
    pub centroid_count: u64,
    pub wall_time_s: f64,
}

/// Parameter snapshot taken at the end of an epoch.
#[derive(Debug, Clone)]
pub struct CheckpointEntry {
    pub epoch: u32,
    pub dev_eer: f64,
    pub params: Array1<f64>,
    pub centroid: CentroidState,
}

#[derive(Debug, Clone, Default)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
    pub checkpoints: Vec<CheckpointEntry>,
    pub best_epoch: u32,
    pub early_stop_epoch: Option<u32>,
}

impl TrainHistory {
    /// Full training log CSV, wall time included.
    pub fn write_log(&self, out: &mut dyn Write) -> std::io::Result<()> {
        writeln!(out, "epoch,train_loss,dev_eer,centroid_count,wall_time_s")?;
        for r in &self.records {
            writeln!(
                out,
                "{},{},{},{},{:.3}",
                r.epoch, r.train_loss, r.dev_eer, r.centroid_count, r.wall_time_s
            )?;
        }
        Ok(())
    }

    /// The reproducible part of the log: everything except wall time. Two
    /// runs with identical data, config and seed produce identical strings.
    pub fn deterministic_log(&self) -> String {
        let mut out = String::from("epoch,train_loss,dev_eer,centroid_count\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{}\n",
                r.epoch, r.train_loss, r.dev_eer, r.centroid_count
            ));
        }
        out
    }
}

/// Optional per-step outputs of the training loop.
#[derive(Default)]
pub struct TrainSinks<'a> {
    pub centroid_trajectory: Option<&'a mut dyn Write>,
}

pub fn train_loop(
    train_set: &Dataset,
    dev_set: &Dataset,
    config: &TrainConfig,
) -> Result<(Model, TrainHistory)> {
    train_loop_with(train_set, dev_set, config, TrainSinks::default())
}

/// Trains a fresh model. Per batch: (optionally) shift the centroid with the
/// batch's bonafide embeddings, compute the loss and its gradients, take one
/// optimizer step. Per epoch: evaluate the dev EER, snapshot the parameters,
/// and apply the early-stopping rule. The returned model carries the
/// elementwise mean of the top-k snapshots by dev EER and the centroid state
/// from the best epoch.
pub fn train_loop_with(
    train_set: &Dataset,
    dev_set: &Dataset,
    config: &TrainConfig,
    mut sinks: TrainSinks<'_>,
) -> Result<(Model, TrainHistory)> {
    config.validate()?;
    let frame_dim = train_set.frame_dim().ok_or(Error::InsufficientSamples {
        class: "training",
        needed: 1,
        available: 0,
    })?;
    if dev_set.bonafide_indices().is_empty() {
        return Err(Error::EmptyClass("dev bonafide"));
    }
    if dev_set.spoof_indices().is_empty() {
        return Err(Error::EmptyClass("dev spoof"));
    }

    let channels = config.embed_channels;
    let embed_dim = 2 * channels;
    let mut init_rng = substream(config.seed, "init");
    let head = match config.loss {
        LossKind::AcsOc => LossHead::AcsOc,
        LossKind::Wce => LossHead::Wce(WceParams::init(embed_dim, &mut init_rng)),
        LossKind::OcSoftmax => {
            let mut params = OcSoftmaxParams::init(embed_dim, &mut init_rng);
            params.margin_bonafide = config.ocsoftmax_margin_bonafide;
            params.margin_spoof = config.ocsoftmax_margin_spoof;
            params.scale = config.ocsoftmax_scale;
            LossHead::OcSoftmax(params)
        }
    };
    let mut model = Model {
        encoder: EncoderParams::init(frame_dim, config.hidden_dim, channels, &mut init_rng),
        asp: AspParams::init(channels, &mut init_rng, config.activation),
        head,
        centroid: CentroidState::make_policy(config.centroid_policy(), embed_dim, config.seed)?,
        class_weights: config.class_weights,
    };

    let fixed: Vec<Array2<f64>> = train_set
        .records
        .iter()
        .map(|u| fix_length(&u.frames, config.frames_per_utterance))
        .collect();

    let adam_config = config.adam();
    let mut moments = AdamMoments::zeros(model.param_len());
    let mut step: u64 = 0;
    let mut stopper = EarlyStopper::new(config.patience);
    let mut history = TrainHistory::default();

    if let Some(out) = sinks.centroid_trajectory.as_deref_mut() {
        write_trajectory_header(out, embed_dim)?;
    }

    for epoch in 1..=config.max_epochs {
        let epoch_start = Instant::now();
        let batches = compose_batches(
            train_set,
            config,
            named_seed(config.seed, &format!("batch/{epoch}")),
        )?;
        let mut loss_sum = 0.0;

        for (batch_idx, batch) in batches.iter().enumerate() {
            let raws: Vec<&Array2<f64>> = batch.iter().map(|&i| &fixed[i]).collect();
            let labels: Vec<Label> = batch.iter().map(|&i| train_set.records[i].key).collect();

            // The first bonafide representation ever seen becomes the
            // centroid regardless of the update ordering; only the batch
            // contribution is ordered against the loss.
            let mut bona_embeddings = bonafide_embeddings(&model, &raws, &labels)?;
            if !bona_embeddings.is_empty() && !model.centroid.is_initialized() {
                model.centroid.acs_init(&bona_embeddings[0])?;
                bona_embeddings.remove(0);
            }
            match config.update_order {
                UpdateOrder::UpdateThenLoss => {
                    apply_bonafide(&mut model, epoch, &bona_embeddings)?;
                    step_parameters(
                        &mut model, &raws, &labels, &mut moments, &mut step, &adam_config,
                        epoch, batch_idx, &mut loss_sum,
                    )?;
                }
                UpdateOrder::LossThenUpdate => {
                    // The contributed embeddings still come from the
                    // pre-step parameters; only the loss sees the stale
                    // centroid.
                    step_parameters(
                        &mut model, &raws, &labels, &mut moments, &mut step, &adam_config,
                        epoch, batch_idx, &mut loss_sum,
                    )?;
                    apply_bonafide(&mut model, epoch, &bona_embeddings)?;
                }
            }

            if let Some(out) = sinks.centroid_trajectory.as_deref_mut() {
                write_trajectory_row(out, step, &model.centroid)?;
            }
        }

        let train_loss = loss_sum / batches.len() as f64;
        let records = score_dataset(&model, dev_set)?;
        let (bona_scores, spoof_scores) = split_scores(&records)?;
        let (dev_eer, _) = compute_eer(&bona_scores, &spoof_scores)?;

        history.records.push(EpochRecord {
            epoch,
            train_loss,
            dev_eer,
            centroid_count: model.centroid.count(),
            wall_time_s: epoch_start.elapsed().as_secs_f64(),
        });
        history.checkpoints.push(CheckpointEntry {
            epoch,
            dev_eer,
            params: model.flatten(),
            centroid: model.centroid.clone(),
        });

        if stopper.observe(epoch, dev_eer) {
            history.early_stop_epoch = Some(epoch);
            break;
        }
    }

    history.best_epoch = stopper.best_epoch();

    // Top-k by dev EER; on ties the later epoch wins (it has seen more
    // data for the same validation cost).
    let mut ranked: Vec<&CheckpointEntry> = history.checkpoints.iter().collect();
    ranked.sort_by(|a, b| a.dev_eer.total_cmp(&b.dev_eer).then(b.epoch.cmp(&a.epoch)));
    let k = config.top_k_average.min(ranked.len());
    let snapshots: Vec<Array1<f64>> = ranked[..k].iter().map(|c| c.params.clone()).collect();
    let averaged = average_weights(&snapshots)?;

    let best = history
        .checkpoints
        .iter()
        .find(|c| c.epoch == history.best_epoch)
        .expect("best epoch has a checkpoint");
    model.centroid = best.centroid.clone();
    // Under a trainable policy the centroid segment of `averaged` overwrites
    // the vector: it is an optimizer parameter and averages with the rest.
    model.set_from_flat(&averaged)?;

    Ok((model, history))
}

fn bonafide_embeddings(
    model: &Model,
    raws: &[&Array2<f64>],
    labels: &[Label],
) -> Result<Vec<UtteranceEmbedding>> {
    if !matches!(
        model.centroid.policy(),
        CentroidPolicy::Acs | CentroidPolicy::PartialAcs { .. }
    ) {
        return Ok(Vec::new());
    }
    raws.iter()
        .zip(labels.iter())
        .filter(|(_, &label)| label == Label::Bonafide)
        .map(|(raw, _)| model.embed(raw))
        .collect()
}

/// Contributes one batch's bonafide embeddings to an adaptive centroid as a
/// batch summary, through the policy dispatch (which applies the freeze
/// gate). A batch without bonafide samples is a no-op.
fn apply_bonafide(
    model: &mut Model,
    epoch: u32,
    embeddings: &[UtteranceEmbedding],
) -> Result<()> {
    if embeddings.is_empty() {
        return Ok(());
    }
    let refs: Vec<&UtteranceEmbedding> = embeddings.iter().collect();
    let summary = BonafideBatchSummary::from_embeddings(&refs)?;
    model
        .centroid
        .policy_step(epoch, PolicyInput::BonafideBatch(&summary))
}

#[allow(clippy::too_many_arguments)]
fn step_parameters(
    model: &mut Model,
    raws: &[&Array2<f64>],
    labels: &[Label],
    moments: &mut AdamMoments,
    step: &mut u64,
    adam_config: &AdamConfig,
    epoch: u32,
    batch_idx: usize,
    loss_sum: &mut f64,
) -> Result<()> {
    let (loss, grads) = model.batch_gradients(raws, labels)?;
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss {
            epoch,
            batch: batch_idx,
        });
    }
    *loss_sum += loss;
    *step += 1;
    let mut flat = model.flatten();
    adam_step(&mut flat, &grads, moments, *step, adam_config)?;
    model.set_from_flat(&flat)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, SynthConfig};
    use approx::assert_relative_eq;
    use rand::Rng;

    fn tiny_synth() -> SynthConfig {
        SynthConfig {
            n_train_bonafide: 10,
            n_train_spoof: 45,
            n_dev_bonafide: 8,
            n_dev_spoof: 16,
            n_eval_bonafide: 8,
            n_eval_spoof: 16,
            frames_min: 6,
            frames_max: 10,
            ..SynthConfig::default()
        }
    }

    fn tiny_train_config() -> TrainConfig {
        TrainConfig {
            batch_size: 10,
            bonafide_per_batch: 1,
            max_epochs: 2,
            hidden_dim: 6,
            embed_channels: 4,
            frames_per_utterance: 8,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn batches_have_the_exact_composition() {
        let (train, _, _) = gen_synthetic(&tiny_synth()).unwrap();
        let config = TrainConfig {
            batch_size: 5,
            bonafide_per_batch: 2,
            ..TrainConfig::default()
        };
        let batches = compose_batches(&train, &config, 3).unwrap();
        assert_eq!(batches.len(), 45 / 3);
        for batch in &batches {
            assert_eq!(batch.len(), 5);
            let bona = batch
                .iter()
                .filter(|&&i| train.records[i].key == Label::Bonafide)
                .count();
            assert_eq!(bona, 2);
        }
    }

    #[test]
    fn batch_composition_is_deterministic() {
        let (train, _, _) = gen_synthetic(&tiny_synth()).unwrap();
        let config = tiny_train_config();
        assert_eq!(
            compose_batches(&train, &config, 42).unwrap(),
            compose_batches(&train, &config, 42).unwrap()
        );
        assert_ne!(
            compose_batches(&train, &config, 42).unwrap(),
            compose_batches(&train, &config, 43).unwrap()
        );
    }

    #[test]
    fn ragged_spoof_tail_is_dropped() {
        // 36 spoof, 18 per batch -> exactly two batches.
        let synth = SynthConfig {
            n_train_bonafide: 4,
            n_train_spoof: 36,
            ..tiny_synth()
        };
        let (train, _, _) = gen_synthetic(&synth).unwrap();
        let config = TrainConfig::default(); // 20 with 2 bonafide
        let batches = compose_batches(&train, &config, 0).unwrap();
        assert_eq!(batches.len(), 2);
    }

    #[test]
    fn each_spoof_sample_appears_at_most_once_per_epoch() {
        let (train, _, _) = gen_synthetic(&tiny_synth()).unwrap();
        let config = tiny_train_config();
        let batches = compose_batches(&train, &config, 9).unwrap();
        let mut seen = std::collections::HashSet::new();
        for batch in &batches {
            for &i in batch {
                if train.records[i].key == Label::Spoof {
                    assert!(seen.insert(i), "spoof index {i} repeated");
                }
            }
        }
    }

    #[test]
    fn insufficient_samples_name_the_class() {
        let synth = SynthConfig {
            n_train_bonafide: 1,
            n_train_spoof: 45,
            ..tiny_synth()
        };
        let (train, _, _) = gen_synthetic(&synth).unwrap();
        let config = TrainConfig {
            batch_size: 10,
            bonafide_per_batch: 2,
            ..TrainConfig::default()
        };
        match compose_batches(&train, &config, 0) {
            Err(Error::InsufficientSamples { class, .. }) => assert_eq!(class, "bonafide"),
            other => panic!("expected insufficient samples, got {other:?}"),
        }
    }

    #[test]
    fn early_stopper_halts_after_patience_non_improvements() {
        let mut stopper = EarlyStopper::new(7);
        assert!(!stopper.observe(1, 0.25));
        for epoch in 2..=7 {
            assert!(!stopper.observe(epoch, 0.25));
        }
        assert!(stopper.observe(8, 0.25));
        assert_eq!(stopper.best_epoch(), 1);
    }

    #[test]
    fn early_stopper_never_fires_while_improving() {
        let mut stopper = EarlyStopper::new(7);
        for epoch in 1..=100 {
            assert!(!stopper.observe(epoch, 1.0 / epoch as f64));
        }
        assert_eq!(stopper.best_epoch(), 100);
    }

    #[test]
    fn averaging_identical_checkpoints_is_identity() {
        let snapshot = Array1::from_vec(vec![1.0, -2.0, 3.5]);
        let out = average_weights(&[snapshot.clone(), snapshot.clone(), snapshot.clone()]).unwrap();
        assert_eq!(out, snapshot);
    }

    #[test]
    fn averaging_two_checkpoints_is_the_midpoint() {
        let a = Array1::from_vec(vec![0.0, 2.0]);
        let b = Array1::from_vec(vec![1.0, 4.0]);
        assert_eq!(average_weights(&[a, b]).unwrap(), Array1::from_vec(vec![0.5, 3.0]));
    }

    #[test]
    fn averaging_matches_summation_oracle() {
        let mut rng = substream(33, "avg-oracle");
        let snapshots: Vec<Array1<f64>> = (0..5)
            .map(|_| Array1::from_shape_fn(40, |_| rng.random_range(-1.0..1.0)))
            .collect();
        let fast = average_weights(&snapshots).unwrap();
        for i in 0..40 {
            let mut sum = 0.0;
            for s in &snapshots {
                sum += s[i];
            }
            assert!((fast[i] - sum / 5.0).abs() < 1e-12);
        }
    }

    #[test]
    fn averaging_rejects_mismatched_shapes() {
        let a = Array1::zeros(3);
        let b = Array1::zeros(4);
        assert!(average_weights(&[a, b]).is_err());
        assert!(average_weights(&[]).is_err());
    }

    #[test]
    fn train_loop_runs_and_reports_history() {
        let (train, dev, _) = gen_synthetic(&tiny_synth()).unwrap();
        let config = tiny_train_config();
        let (model, history) = train_loop(&train, &dev, &config).unwrap();
        assert_eq!(history.records.len(), 2);
        assert!(history.records[0].epoch == 1 && history.records[1].epoch == 2);
        assert!(model.centroid.is_initialized());
        assert!(model.centroid.count() > 0);
        assert!(history.records.iter().all(|r| r.dev_eer.is_finite()));
    }

    #[test]
    fn train_loop_is_bitwise_deterministic() {
        let (train, dev, _) = gen_synthetic(&tiny_synth()).unwrap();
        let config = tiny_train_config();
        let (model_a, history_a) = train_loop(&train, &dev, &config).unwrap();
        let (model_b, history_b) = train_loop(&train, &dev, &config).unwrap();
        assert_eq!(history_a.deterministic_log(), history_b.deterministic_log());
        assert_eq!(model_a.flatten(), model_b.flatten());
    }

    #[test]
    fn loss_then_update_changes_the_loss_but_not_the_contributions() {
        let (train, dev, _) = gen_synthetic(&tiny_synth()).unwrap();
        let base = tiny_train_config();
        let flipped = TrainConfig {
            update_order: UpdateOrder::LossThenUpdate,
            ..base.clone()
        };
        let (model_a, history_a) = train_loop(&train, &dev, &base).unwrap();
        let (model_b, history_b) = train_loop(&train, &dev, &flipped).unwrap();
        // Same bonafide stream feeds the centroid either way.
        assert_eq!(model_a.centroid.count(), model_b.centroid.count());
        assert_ne!(
            history_a.records[0].train_loss,
            history_b.records[0].train_loss
        );
    }

    /// Replacing every spoof sample while keeping the bonafide stream leaves
    /// the centroid trajectory identical at the first step; divergence can
    /// only enter later through parameter drift.
    #[test]
    fn centroid_depends_only_on_bonafide_at_the_first_step() {
        let synth_a = tiny_synth();
        let mut synth_b = tiny_synth();
        // Different spoof processes entirely, same bonafide stream: spoof
        // draws happen after all bonafide draws inside a split's stream.
        for (i, mode) in synth_b.attack_modes_train.iter_mut().enumerate() {
            mode.process.mean_shift = 3.0 + i as f64;
            mode.process.direction_seed = 900 + i as u64;
        }
        let (train_a, dev, _) = gen_synthetic(&synth_a).unwrap();
        let (train_b, _, _) = gen_synthetic(&synth_b).unwrap();
        assert_eq!(train_a.records[0].frames, train_b.records[0].frames);

        let config = TrainConfig {
            max_epochs: 1,
            ..tiny_train_config()
        };
        let mut traj_a = Vec::new();
        let mut traj_b = Vec::new();
        train_loop_with(
            &train_a,
            &dev,
            &config,
            TrainSinks { centroid_trajectory: Some(&mut traj_a) },
        )
        .unwrap();
        train_loop_with(
            &train_b,
            &dev,
            &config,
            TrainSinks { centroid_trajectory: Some(&mut traj_b) },
        )
        .unwrap();
        let first_row = |buf: &[u8]| String::from_utf8(buf.to_vec()).unwrap().lines().nth(1).unwrap().to_string();
        assert_eq!(first_row(&traj_a), first_row(&traj_b));
    }

    #[test]
    fn partial_acs_count_freezes_after_the_boundary() {
        let (train, dev, _) = gen_synthetic(&tiny_synth()).unwrap();
        let config = TrainConfig {
            centroid: CentroidKind::PartialAcs,
            freeze_epoch: 1,
            max_epochs: 3,
            ..tiny_train_config()
        };
        let (_, history) = train_loop(&train, &dev, &config).unwrap();
        assert_eq!(
            history.records[0].centroid_count,
            history.records[1].centroid_count
        );
        assert_eq!(
            history.records[1].centroid_count,
            history.records[2].centroid_count
        );
    }

    #[test]
    fn fixed_centroid_vector_is_bit_identical_across_the_run() {
        let (train, dev, _) = gen_synthetic(&tiny_synth()).unwrap();
        let config = TrainConfig {
            centroid: CentroidKind::Fixed,
            ..tiny_train_config()
        };
        let initial = CentroidState::make_policy(CentroidPolicy::Fixed, 8, config.seed).unwrap();
        let (model, _) = train_loop(&train, &dev, &config).unwrap();
        assert_eq!(model.centroid.vector(), initial.vector());
    }

    #[test]
    fn trainable_centroid_moves_during_training() {
        let (train, dev, _) = gen_synthetic(&tiny_synth()).unwrap();
        let config = TrainConfig {
            centroid: CentroidKind::Trainable,
            ..tiny_train_config()
        };
        let initial = CentroidState::make_policy(CentroidPolicy::Trainable, 8, config.seed).unwrap();
        let (model, _) = train_loop(&train, &dev, &config).unwrap();
        assert_ne!(model.centroid.vector(), initial.vector());
    }

    #[test]
    fn averaged_model_equals_manual_average_of_top_checkpoints() {
        let (train, dev, _) = gen_synthetic(&tiny_synth()).unwrap();
        let config = TrainConfig {
            max_epochs: 4,
            top_k_average: 2,
            ..tiny_train_config()
        };
        let (model, history) = train_loop(&train, &dev, &config).unwrap();
        let mut ranked: Vec<&CheckpointEntry> = history.checkpoints.iter().collect();
        ranked.sort_by(|a, b| a.dev_eer.total_cmp(&b.dev_eer).then(b.epoch.cmp(&a.epoch)));
        let expected =
            average_weights(&[ranked[0].params.clone(), ranked[1].params.clone()]).unwrap();
        for (a, b) in model.flatten().iter().zip(expected.iter()) {
            assert_relative_eq!(a, b, max_relative = 1e-12, epsilon = 1e-15);
        }
    }
}
