//! The trainable model bundle: encoder, pooling layer, loss head, and the
//! centroid state, with a stable flat-vector view for the optimizer, weight
//! averaging and gradient checking.
//!
//! Flat layout: encoder (w1 row-major, b1, w2, b2), pooling (w, b, v), head
//! parameters (cross-entropy: weight, bias; oc-softmax: direction), then the
//! centroid vector if and only if its policy is trainable.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::asp::{asp_backward, asp_forward, AspParams, FrameFeatureSequence, UtteranceEmbedding};
use crate::centroid::{CentroidPolicy, CentroidState};
use crate::encoder::{encoder_backward, encoder_forward, EncoderParams};
use crate::error::{Error, Result};
use crate::losses::{
    oc_loss, ocsoftmax_loss, ocsoftmax_score, score, wce_loss_with_linear, ClassWeights, Label,
    LabeledBatch, LossOutput, OcSoftmaxParams, WceParams,
};

/// Which training objective the model carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    AcsOc,
    Wce,
    OcSoftmax,
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            LossKind::AcsOc => "acs-oc",
            LossKind::Wce => "wce",
            LossKind::OcSoftmax => "oc-softmax",
        };
        f.write_str(s)
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "acs-oc" => Ok(LossKind::AcsOc),
            "wce" => Ok(LossKind::Wce),
            "oc-softmax" => Ok(LossKind::OcSoftmax),
            other => Err(Error::UnknownKind {
                what: "loss",
                value: other.to_string(),
            }),
        }
    }
}

/// Loss-specific trainable parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LossHead {
    AcsOc,
    Wce(WceParams),
    OcSoftmax(OcSoftmaxParams),
}

impl LossHead {
    pub fn kind(&self) -> LossKind {
        match self {
            LossHead::AcsOc => LossKind::AcsOc,
            LossHead::Wce(_) => LossKind::Wce,
            LossHead::OcSoftmax(_) => LossKind::OcSoftmax,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub encoder: EncoderParams,
    pub asp: AspParams,
    pub head: LossHead,
    pub centroid: CentroidState,
    pub class_weights: ClassWeights,
}

impl Model {
    pub fn embedding_dim(&self) -> usize {
        2 * self.encoder.output_dim()
    }

    fn centroid_is_trainable(&self) -> bool {
        self.centroid.policy() == CentroidPolicy::Trainable
    }

    /// Encoder then pooling, at the utterance's native length.
    pub fn embed(&self, raw: &Array2<f64>) -> Result<UtteranceEmbedding> {
        let seq = encoder_forward(raw, &self.encoder)?;
        asp_forward(&seq, &self.asp)
    }

    /// Detection score for one utterance: cosine to the centroid for the
    /// one-class objective, bonafide-minus-spoof logit for cross entropy,
    /// cosine to the target direction for oc-softmax.
    pub fn score_utterance(&self, raw: &Array2<f64>) -> Result<f64> {
        let embedding = self.embed(raw)?;
        match &self.head {
            LossHead::AcsOc => {
                if !self.centroid.is_initialized() {
                    return Err(Error::CentroidUninitialized);
                }
                score(&embedding, self.centroid.vector())
            }
            LossHead::Wce(params) => {
                let logits = params.logits(&embedding);
                Ok(logits[0] - logits[1])
            }
            LossHead::OcSoftmax(params) => ocsoftmax_score(&embedding, params),
        }
    }

    pub fn param_len(&self) -> usize {
        let enc = &self.encoder;
        let mut len = enc.w1.len() + enc.b1.len() + enc.w2.len() + enc.b2.len();
        len += self.asp.w.len() + self.asp.b.len() + self.asp.v.len();
        len += match &self.head {
            LossHead::AcsOc => 0,
            LossHead::Wce(p) => p.weight.len() + p.bias.len(),
            LossHead::OcSoftmax(p) => p.direction.len(),
        };
        if self.centroid_is_trainable() {
            len += self.centroid.dim();
        }
        len
    }

    /// All trainable parameters as one vector, in the documented layout.
    pub fn flatten(&self) -> Array1<f64> {
        let mut out = Vec::with_capacity(self.param_len());
        out.extend(self.encoder.w1.iter());
        out.extend(self.encoder.b1.iter());
        out.extend(self.encoder.w2.iter());
        out.extend(self.encoder.b2.iter());
        out.extend(self.asp.w.iter());
        out.extend(self.asp.b.iter());
        out.extend(self.asp.v.iter());
        match &self.head {
            LossHead::AcsOc => {}
            LossHead::Wce(p) => {
                out.extend(p.weight.iter());
                out.extend(p.bias.iter());
            }
            LossHead::OcSoftmax(p) => out.extend(p.direction.iter()),
        }
        if self.centroid_is_trainable() {
            out.extend(self.centroid.vector().iter());
        }
        Array1::from_vec(out)
    }

    /// Writes a flat vector back into the structured parameters.
    pub fn set_from_flat(&mut self, flat: &Array1<f64>) -> Result<()> {
        if flat.len() != self.param_len() {
            return Err(Error::ShapeMismatch {
                context: "model parameters",
                dimension: "flat length",
                expected: self.param_len().to_string(),
                actual: flat.len().to_string(),
            });
        }
        let values = flat.as_slice().expect("flat vector is contiguous");
        let mut cursor = 0usize;

        fill2(&mut self.encoder.w1, values, &mut cursor);
        fill1(&mut self.encoder.b1, values, &mut cursor);
        fill2(&mut self.encoder.w2, values, &mut cursor);
        fill1(&mut self.encoder.b2, values, &mut cursor);
        fill2(&mut self.asp.w, values, &mut cursor);
        fill1(&mut self.asp.b, values, &mut cursor);
        fill1(&mut self.asp.v, values, &mut cursor);
        match &mut self.head {
            LossHead::AcsOc => {}
            LossHead::Wce(p) => {
                fill2(&mut p.weight, values, &mut cursor);
                fill1(&mut p.bias, values, &mut cursor);
            }
            LossHead::OcSoftmax(p) => fill1(&mut p.direction, values, &mut cursor),
        }
        if self.centroid_is_trainable() {
            let dim = self.centroid.dim();
            self.centroid
                .set_vector(Array1::from_vec(values[cursor..cursor + dim].to_vec()))?;
            cursor += dim;
        }
        debug_assert_eq!(cursor, values.len());
        Ok(())
    }

    /// Embeds a batch of raw utterances and assembles the labeled batch.
    fn embed_batch(
        &self,
        raws: &[&Array2<f64>],
        labels: &[Label],
    ) -> Result<(Vec<FrameFeatureSequence>, LabeledBatch)> {
        if raws.len() != labels.len() {
            return Err(Error::ShapeMismatch {
                context: "batch",
                dimension: "label count",
                expected: raws.len().to_string(),
                actual: labels.len().to_string(),
            });
        }
        let mut seqs = Vec::with_capacity(raws.len());
        let mut items = Vec::with_capacity(raws.len());
        for (&raw, &label) in raws.iter().zip(labels.iter()) {
            let seq = encoder_forward(raw, &self.encoder)?;
            let embedding = asp_forward(&seq, &self.asp)?;
            items.push((embedding, label));
            seqs.push(seq);
        }
        Ok((seqs, LabeledBatch::new(items)?))
    }

    fn head_loss(&self, batch: &LabeledBatch) -> Result<(LossOutput, HeadGrads)> {
        match &self.head {
            LossHead::AcsOc => {
                if !self.centroid.is_initialized() {
                    return Err(Error::CentroidUninitialized);
                }
                let out = oc_loss(batch, self.centroid.vector(), self.centroid_is_trainable())?;
                Ok((out, HeadGrads::None))
            }
            LossHead::Wce(params) => {
                let out = wce_loss_with_linear(batch, params, self.class_weights)?;
                Ok((out.loss, HeadGrads::Wce(out.weight_grad, out.bias_grad)))
            }
            LossHead::OcSoftmax(params) => {
                let out = ocsoftmax_loss(batch, params)?;
                Ok((out.loss, HeadGrads::OcSoftmax(out.direction_grad)))
            }
        }
    }

    /// Loss for a batch of raw utterances under the current parameters (the
    /// centroid is a constant input here unless trainable, where it is part
    /// of the parameters).
    pub fn batch_loss(&self, raws: &[&Array2<f64>], labels: &[Label]) -> Result<f64> {
        let (_, batch) = self.embed_batch(raws, labels)?;
        Ok(self.head_loss(&batch)?.0.value)
    }

    /// Loss and its gradient in the flat parameter layout.
    pub fn batch_gradients(
        &self,
        raws: &[&Array2<f64>],
        labels: &[Label],
    ) -> Result<(f64, Array1<f64>)> {
        let (seqs, batch) = self.embed_batch(raws, labels)?;
        let (loss, head_grads) = self.head_loss(&batch)?;

        let mut g_enc_w1 = Array2::zeros(self.encoder.w1.dim());
        let mut g_enc_b1 = Array1::zeros(self.encoder.b1.len());
        let mut g_enc_w2 = Array2::zeros(self.encoder.w2.dim());
        let mut g_enc_b2 = Array1::zeros(self.encoder.b2.len());
        let mut g_asp_w = Array2::zeros(self.asp.w.dim());
        let mut g_asp_b = Array1::zeros(self.asp.b.len());
        let mut g_asp_v = Array1::zeros(self.asp.v.len());

        for ((seq, raw), upstream) in seqs
            .iter()
            .zip(raws.iter())
            .zip(loss.embedding_grads.iter())
        {
            let (g_frames, g_asp) = asp_backward(seq, &self.asp, upstream)?;
            let g_enc = encoder_backward(raw, &self.encoder, &g_frames)?;
            g_enc_w1 += &g_enc.w1;
            g_enc_b1 += &g_enc.b1;
            g_enc_w2 += &g_enc.w2;
            g_enc_b2 += &g_enc.b2;
            g_asp_w += &g_asp.w;
            g_asp_b += &g_asp.b;
            g_asp_v += &g_asp.v;
        }

        let mut out = Vec::with_capacity(self.param_len());
        out.extend(g_enc_w1.iter());
        out.extend(g_enc_b1.iter());
        out.extend(g_enc_w2.iter());
        out.extend(g_enc_b2.iter());
        out.extend(g_asp_w.iter());
        out.extend(g_asp_b.iter());
        out.extend(g_asp_v.iter());
        match head_grads {
            HeadGrads::None => {}
            HeadGrads::Wce(w, b) => {
                out.extend(w.iter());
                out.extend(b.iter());
            }
            HeadGrads::OcSoftmax(d) => out.extend(d.iter()),
        }
        if self.centroid_is_trainable() {
            let cg = loss
                .centroid_grad
                .unwrap_or_else(|| Array1::zeros(self.centroid.dim()));
            out.extend(cg.iter());
        }
        Ok((loss.value, Array1::from_vec(out)))
    }
}

enum HeadGrads {
    None,
    Wce(Array2<f64>, Array1<f64>),
    OcSoftmax(Array1<f64>),
}

fn fill1(dst: &mut Array1<f64>, src: &[f64], cursor: &mut usize) {
    for d in dst.iter_mut() {
        *d = src[*cursor];
        *cursor += 1;
    }
}

fn fill2(dst: &mut Array2<f64>, src: &[f64], cursor: &mut usize) {
    for d in dst.iter_mut() {
        *d = src[*cursor];
        *cursor += 1;
    }
}

/// Versioned on-disk snapshot of a model plus the hash of the config that
/// produced it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config_hash: String,
    pub model: Model,
}

pub const CHECKPOINT_VERSION: u32 = 1;

impl Checkpoint {
    pub fn new(model: Model, config_hash: String) -> Self {
        Self {
            format_version: CHECKPOINT_VERSION,
            config_hash,
            model,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self)?;
        fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let checkpoint: Checkpoint = serde_json::from_str(&text)?;
        if checkpoint.format_version != CHECKPOINT_VERSION {
            return Err(Error::InvalidConfig(format!(
                "unsupported checkpoint version {} (expected {})",
                checkpoint.format_version, CHECKPOINT_VERSION
            )));
        }
        Ok(checkpoint)
    }
}

/// Hex SHA-256 of a serialized config, stored in checkpoints to tie them to
/// the run that produced them.
pub fn config_hash(serialized: &str) -> String {
    let digest = Sha256::digest(serialized.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::asp::Activation;
    use crate::centroid::CentroidPolicy;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use tempfile::tempdir;

    fn test_model(loss: LossKind, policy: CentroidPolicy) -> Model {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (f, h, c) = (3, 4, 2);
        let head = match loss {
            LossKind::AcsOc => LossHead::AcsOc,
            LossKind::Wce => LossHead::Wce(WceParams::init(2 * c, &mut rng)),
            LossKind::OcSoftmax => LossHead::OcSoftmax(OcSoftmaxParams::init(2 * c, &mut rng)),
        };
        let mut centroid = CentroidState::make_policy(policy, 2 * c, 9).unwrap();
        if matches!(policy, CentroidPolicy::Acs | CentroidPolicy::PartialAcs { .. }) {
            let first = UtteranceEmbedding::new(Array1::from_shape_fn(2 * c, |i| {
                if i < c {
                    rng.random_range(-1.0..1.0)
                } else {
                    rng.random_range(0.2..1.0)
                }
            }))
            .unwrap();
            centroid.acs_init(&first).unwrap();
        }
        Model {
            encoder: EncoderParams::init(f, h, c, &mut rng),
            asp: AspParams::init(c, &mut rng, Activation::Tanh),
            head,
            centroid,
            class_weights: ClassWeights::default(),
        }
    }

    #[test]
    fn flatten_round_trips() {
        for loss in [LossKind::AcsOc, LossKind::Wce, LossKind::OcSoftmax] {
            for policy in [CentroidPolicy::Acs, CentroidPolicy::Trainable] {
                let mut model = test_model(loss, policy);
                let flat = model.flatten();
                assert_eq!(flat.len(), model.param_len());
                let mut perturbed = flat.clone();
                perturbed += 0.25;
                model.set_from_flat(&perturbed).unwrap();
                assert_eq!(model.flatten(), perturbed);
            }
        }
    }

    #[test]
    fn wrong_flat_length_is_rejected() {
        let mut model = test_model(LossKind::AcsOc, CentroidPolicy::Acs);
        let flat = Array1::zeros(model.param_len() + 1);
        assert!(model.set_from_flat(&flat).is_err());
    }

    #[test]
    fn trainable_centroid_lives_in_the_flat_vector() {
        let fixed = test_model(LossKind::AcsOc, CentroidPolicy::Acs);
        let trainable = test_model(LossKind::AcsOc, CentroidPolicy::Trainable);
        assert_eq!(
            trainable.param_len(),
            fixed.param_len() + trainable.centroid.dim()
        );
    }

    #[test]
    fn checkpoints_round_trip_exactly() {
        let model = test_model(LossKind::Wce, CentroidPolicy::Acs);
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.json");
        let checkpoint = Checkpoint::new(model.clone(), config_hash("cfg"));
        checkpoint.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded.model, model);
        assert_eq!(loaded.config_hash, checkpoint.config_hash);
    }

    #[test]
    fn config_hash_is_stable_and_content_sensitive() {
        assert_eq!(config_hash("abc"), config_hash("abc"));
        assert_ne!(config_hash("abc"), config_hash("abd"));
        assert_eq!(config_hash("abc").len(), 64);
    }

    /// Composite gradient (encoder -> pooling -> loss) against central finite
    /// differences for all three objectives; the trainable-centroid segment
    /// is covered through the flat layout.
    #[test]
    fn composite_gradients_match_finite_differences() {
        let step = 1e-5;
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for (loss, policy) in [
            (LossKind::AcsOc, CentroidPolicy::Acs),
            (LossKind::AcsOc, CentroidPolicy::Trainable),
            (LossKind::Wce, CentroidPolicy::Acs),
            (LossKind::OcSoftmax, CentroidPolicy::Acs),
        ] {
            let model = test_model(loss, policy);
            let t = 4;
            let raws: Vec<Array2<f64>> = (0..4)
                .map(|_| {
                    Array2::from_shape_fn((t, model.encoder.input_dim()), |_| {
                        rng.random_range(-1.0..1.0)
                    })
                })
                .collect();
            let raw_refs: Vec<&Array2<f64>> = raws.iter().collect();
            let labels = vec![Label::Bonafide, Label::Spoof, Label::Spoof, Label::Spoof];

            let (_, grads) = model.batch_gradients(&raw_refs, &labels).unwrap();
            let flat = model.flatten();
            for i in 0..flat.len() {
                let mut plus = model.clone();
                let mut fp = flat.clone();
                fp[i] += step;
                plus.set_from_flat(&fp).unwrap();
                let mut minus = model.clone();
                let mut fm = flat.clone();
                fm[i] -= step;
                minus.set_from_flat(&fm).unwrap();
                let numeric = (plus.batch_loss(&raw_refs, &labels).unwrap()
                    - minus.batch_loss(&raw_refs, &labels).unwrap())
                    / (2.0 * step);
                let denom = grads[i].abs().max(numeric.abs()).max(1e-5);
                assert!(
                    ((grads[i] - numeric) / denom).abs() < 1e-4,
                    "{loss} param {i}: analytic {} vs numeric {}",
                    grads[i],
                    numeric
                );
            }
        }
    }
}
