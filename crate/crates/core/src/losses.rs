//! Training losses and the inference score.
//!
//! The primary loss pulls bonafide embeddings toward the class centroid and
//! pushes spoof embeddings away, measured by cosine similarity:
//! `L = -mean_b cos(r_b, C) + mean_s cos(r_s, C)`. A class absent from the
//! batch contributes nothing. The two baselines are weighted cross entropy
//! over a linear head and OC-Softmax with a trainable direction and two
//! margins.

use std::str::FromStr;

use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::asp::UtteranceEmbedding;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Bonafide,
    Spoof,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Bonafide => "bonafide",
            Label::Spoof => "spoof",
        }
    }
}

impl std::fmt::Display for Label {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bonafide" => Ok(Label::Bonafide),
            "spoof" => Ok(Label::Spoof),
            other => Err(Error::UnknownKind {
                what: "label",
                value: other.to_string(),
            }),
        }
    }
}

/// A mini-batch of labeled utterance embeddings. Zero-norm embeddings are
/// rejected here so every cosine downstream is well defined.
#[derive(Debug, Clone)]
pub struct LabeledBatch {
    items: Vec<(UtteranceEmbedding, Label)>,
    dim: usize,
}

impl LabeledBatch {
    pub fn new(items: Vec<(UtteranceEmbedding, Label)>) -> Result<Self> {
        let Some(first) = items.first() else {
            return Err(Error::EmptyClass("batch"));
        };
        let dim = first.0.dim();
        for (embedding, _) in &items {
            if embedding.dim() != dim {
                return Err(Error::ShapeMismatch {
                    context: "labeled batch",
                    dimension: "embedding length",
                    expected: dim.to_string(),
                    actual: embedding.dim().to_string(),
                });
            }
            let v = embedding.values();
            if v.dot(&v) == 0.0 {
                return Err(Error::ZeroNorm("embedding"));
            }
        }
        Ok(Self { items, dim })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn m_bonafide(&self) -> usize {
        self.items.iter().filter(|(_, l)| *l == Label::Bonafide).count()
    }

    pub fn m_spoof(&self) -> usize {
        self.items.iter().filter(|(_, l)| *l == Label::Spoof).count()
    }

    pub fn iter(&self) -> impl Iterator<Item = &(UtteranceEmbedding, Label)> {
        self.items.iter()
    }
}

/// Loss value with per-embedding gradients (batch order) and, when the
/// centroid is trainable, its gradient.
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub value: f64,
    pub embedding_grads: Vec<Array1<f64>>,
    pub centroid_grad: Option<Array1<f64>>,
}

fn norm(v: &Array1<f64>) -> f64 {
    v.dot(v).sqrt()
}

/// Cosine similarity of an utterance embedding to the centroid; higher means
/// more bonafide. Serves as the detection score at inference time.
pub fn score(embedding: &UtteranceEmbedding, centroid: &Array1<f64>) -> Result<f64> {
    cosine(embedding.values(), centroid.view())
}

fn cosine(r: ndarray::ArrayView1<'_, f64>, c: ndarray::ArrayView1<'_, f64>) -> Result<f64> {
    if r.len() != c.len() {
        return Err(Error::ShapeMismatch {
            context: "cosine",
            dimension: "vector length",
            expected: c.len().to_string(),
            actual: r.len().to_string(),
        });
    }
    let nr = r.dot(&r).sqrt();
    let nc = c.dot(&c).sqrt();
    if nr == 0.0 {
        return Err(Error::ZeroNorm("embedding"));
    }
    if nc == 0.0 {
        return Err(Error::ZeroNorm("centroid"));
    }
    Ok(r.dot(&c) / (nr * nc))
}

/// One-class cosine loss against the centroid.
///
/// With both classes present the value lies in `[-2, 2]`; a class with no
/// members is skipped. Gradients wrt each embedding use
/// `d cos(r, C)/dr = (C/||C|| - cos * r/||r||) / ||r||`; the centroid is held
/// constant unless `centroid_trainable` is set.
pub fn oc_loss(
    batch: &LabeledBatch,
    centroid: &Array1<f64>,
    centroid_trainable: bool,
) -> Result<LossOutput> {
    if centroid.len() != batch.dim() {
        return Err(Error::ShapeMismatch {
            context: "one-class loss",
            dimension: "centroid length",
            expected: batch.dim().to_string(),
            actual: centroid.len().to_string(),
        });
    }
    let nc = norm(centroid);
    if nc == 0.0 {
        return Err(Error::ZeroNorm("centroid"));
    }
    let m_b = batch.m_bonafide() as f64;
    let m_s = batch.m_spoof() as f64;
    let c_hat = centroid / nc;

    let mut value = 0.0;
    let mut embedding_grads = Vec::with_capacity(batch.len());
    let mut centroid_grad = centroid_trainable.then(|| Array1::zeros(centroid.len()));

    for (embedding, label) in batch.iter() {
        let r = embedding.values().to_owned();
        let nr = norm(&r);
        let cos = r.dot(centroid) / (nr * nc);
        let factor = match label {
            Label::Bonafide => -1.0 / m_b,
            Label::Spoof => 1.0 / m_s,
        };
        value += factor * cos;

        let r_hat = &r / nr;
        let grad_r = (&c_hat - &(cos * &r_hat)) / nr;
        embedding_grads.push(factor * grad_r);

        if let Some(cg) = centroid_grad.as_mut() {
            let grad_c = (&r_hat - &(cos * &c_hat)) / nc;
            *cg += &(factor * grad_c);
        }
    }

    Ok(LossOutput {
        value,
        embedding_grads,
        centroid_grad,
    })
}

// ---------------------------------------------------------------------------
// Weighted cross entropy over a linear head
// ---------------------------------------------------------------------------

/// Per-class weights for the cross-entropy baseline. Defaults invert the
/// 1:9 bonafide:spoof batch ratio.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub bonafide: f64,
    pub spoof: f64,
}

impl Default for ClassWeights {
    fn default() -> Self {
        Self {
            bonafide: 0.9,
            spoof: 0.1,
        }
    }
}

impl ClassWeights {
    fn validate(&self) -> Result<()> {
        if self.bonafide <= 0.0 || self.spoof <= 0.0 {
            return Err(Error::InvalidConfig("class weights must be positive".into()));
        }
        Ok(())
    }

    fn for_label(&self, label: Label) -> f64 {
        match label {
            Label::Bonafide => self.bonafide,
            Label::Spoof => self.spoof,
        }
    }
}

/// Linear map from embeddings to 2 logits (row 0 bonafide, row 1 spoof),
/// owned by the cross-entropy baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WceParams {
    pub weight: Array2<f64>, // 2 x D
    pub bias: Array1<f64>,   // 2
}

impl WceParams {
    pub fn init(dim: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (dim as f64).sqrt();
        Self {
            weight: Array2::from_shape_fn((2, dim), |_| rng.random_range(-bound..bound)),
            bias: Array1::zeros(2),
        }
    }

    pub fn logits(&self, embedding: &UtteranceEmbedding) -> Array1<f64> {
        self.weight.dot(&embedding.values()) + &self.bias
    }
}

/// Loss and per-sample logit gradients for weighted cross entropy.
#[derive(Debug, Clone)]
pub struct WceLogitLoss {
    pub value: f64,
    pub logit_grads: Array2<f64>, // N x 2
}

/// Weighted cross entropy over per-sample 2-vector logits (column 0
/// bonafide). The reduction divides by the total sample weight, so equal
/// weights give the plain mean cross entropy.
pub fn wce_loss(
    logits: &Array2<f64>,
    labels: &[Label],
    class_weights: ClassWeights,
) -> Result<WceLogitLoss> {
    class_weights.validate()?;
    if logits.nrows() != labels.len() || logits.ncols() != 2 {
        return Err(Error::ShapeMismatch {
            context: "weighted cross entropy",
            dimension: "logits shape",
            expected: format!("{}x2", labels.len()),
            actual: format!("{}x{}", logits.nrows(), logits.ncols()),
        });
    }
    if labels.is_empty() {
        return Err(Error::EmptyClass("batch"));
    }
    if !logits.iter().all(|x| x.is_finite()) {
        return Err(Error::NonFinite("logits"));
    }

    let weight_sum: f64 = labels.iter().map(|&l| class_weights.for_label(l)).sum();
    let mut value = 0.0;
    let mut logit_grads = Array2::zeros((labels.len(), 2));
    for (i, &label) in labels.iter().enumerate() {
        let l0 = logits[[i, 0]];
        let l1 = logits[[i, 1]];
        let max = l0.max(l1);
        let z = (l0 - max).exp() + (l1 - max).exp();
        let log_z = max + z.ln();
        let target = match label {
            Label::Bonafide => 0,
            Label::Spoof => 1,
        };
        let w = class_weights.for_label(label);
        value += w * (log_z - logits[[i, target]]);
        for k in 0..2 {
            let p = (logits[[i, k]] - log_z).exp();
            let y = if k == target { 1.0 } else { 0.0 };
            logit_grads[[i, k]] = w * (p - y) / weight_sum;
        }
    }

    Ok(WceLogitLoss {
        value: value / weight_sum,
        logit_grads,
    })
}

/// Cross-entropy loss through the linear head, with gradients for the
/// embeddings and the head parameters.
#[derive(Debug, Clone)]
pub struct WceOutput {
    pub loss: LossOutput,
    pub weight_grad: Array2<f64>,
    pub bias_grad: Array1<f64>,
}

pub fn wce_loss_with_linear(
    batch: &LabeledBatch,
    params: &WceParams,
    class_weights: ClassWeights,
) -> Result<WceOutput> {
    if params.weight.ncols() != batch.dim() {
        return Err(Error::ShapeMismatch {
            context: "cross-entropy head",
            dimension: "weight columns",
            expected: batch.dim().to_string(),
            actual: params.weight.ncols().to_string(),
        });
    }
    let mut logits = Array2::zeros((batch.len(), 2));
    let labels: Vec<Label> = batch.iter().map(|(_, l)| *l).collect();
    for (i, (embedding, _)) in batch.iter().enumerate() {
        logits.row_mut(i).assign(&params.logits(embedding));
    }
    let logit_loss = wce_loss(&logits, &labels, class_weights)?;

    let mut weight_grad = Array2::zeros(params.weight.dim());
    let mut bias_grad = Array1::zeros(2);
    let mut embedding_grads = Vec::with_capacity(batch.len());
    for (i, (embedding, _)) in batch.iter().enumerate() {
        let g = logit_loss.logit_grads.row(i);
        embedding_grads.push(params.weight.t().dot(&g));
        for k in 0..2 {
            bias_grad[k] += g[k];
            weight_grad
                .row_mut(k)
                .scaled_add(g[k], &embedding.values());
        }
    }

    Ok(WceOutput {
        loss: LossOutput {
            value: logit_loss.value,
            embedding_grads,
            centroid_grad: None,
        },
        weight_grad,
        bias_grad,
    })
}

// ---------------------------------------------------------------------------
// OC-Softmax baseline
// ---------------------------------------------------------------------------

/// OC-Softmax parameters: trainable target direction, the two margins and
/// the logistic scale. Margin/scale defaults follow the method's source
/// publication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcSoftmaxParams {
    pub direction: Array1<f64>,
    pub margin_bonafide: f64,
    pub margin_spoof: f64,
    pub scale: f64,
}

impl OcSoftmaxParams {
    pub fn init(dim: usize, rng: &mut impl Rng) -> Self {
        let mut direction: Array1<f64> =
            Array1::from_shape_fn(dim, |_| rng.sample(rand_distr::StandardNormal));
        let n = norm(&direction);
        if n > 0.0 {
            direction /= n;
        } else {
            direction[0] = 1.0;
        }
        Self {
            direction,
            margin_bonafide: 0.9,
            margin_spoof: 0.2,
            scale: 20.0,
        }
    }

    fn validate(&self) -> Result<()> {
        if !self.direction.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite("oc-softmax direction"));
        }
        if norm(&self.direction) == 0.0 {
            return Err(Error::ZeroNorm("oc-softmax direction"));
        }
        if !(self.margin_bonafide.is_finite()
            && self.margin_spoof.is_finite()
            && self.scale.is_finite()
            && self.scale > 0.0)
        {
            return Err(Error::InvalidConfig(
                "oc-softmax margins must be finite and scale positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct OcSoftmaxOutput {
    pub loss: LossOutput,
    pub direction_grad: Array1<f64>,
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Softplus-margin one-class loss with an L2-normalized trainable direction:
/// bonafide samples pay `softplus(scale * (m_b - cos))`, spoof samples pay
/// `softplus(scale * (cos - m_s))`, averaged over the batch.
pub fn ocsoftmax_loss(batch: &LabeledBatch, params: &OcSoftmaxParams) -> Result<OcSoftmaxOutput> {
    params.validate()?;
    if params.direction.len() != batch.dim() {
        return Err(Error::ShapeMismatch {
            context: "oc-softmax",
            dimension: "direction length",
            expected: batch.dim().to_string(),
            actual: params.direction.len().to_string(),
        });
    }
    let nw = norm(&params.direction);
    let w_hat = &params.direction / nw;
    let n = batch.len() as f64;

    let mut value = 0.0;
    let mut embedding_grads = Vec::with_capacity(batch.len());
    let mut direction_grad = Array1::zeros(batch.dim());
    for (embedding, label) in batch.iter() {
        let r = embedding.values().to_owned();
        let nr = norm(&r);
        let r_hat = &r / nr;
        let cos = r_hat.dot(&w_hat);
        let (margin, sign) = match label {
            Label::Bonafide => (params.margin_bonafide - cos, -1.0),
            Label::Spoof => (cos - params.margin_spoof, 1.0),
        };
        value += softplus(params.scale * margin) / n;

        // d softplus(a*m)/d cos = a * sigmoid(a*m) * dm/dcos
        let dcos = params.scale * sigmoid(params.scale * margin) * sign / n;
        embedding_grads.push(dcos * &(&w_hat - &(cos * &r_hat)) / nr);
        direction_grad += &(dcos * &(&r_hat - &(cos * &w_hat)) / nw);
    }

    Ok(OcSoftmaxOutput {
        loss: LossOutput {
            value,
            embedding_grads,
            centroid_grad: None,
        },
        direction_grad,
    })
}

/// OC-Softmax detection score: cosine to the normalized target direction.
pub fn ocsoftmax_score(embedding: &UtteranceEmbedding, params: &OcSoftmaxParams) -> Result<f64> {
    cosine(embedding.values(), params.direction.view())
}
