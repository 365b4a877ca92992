//! Bonafide-class centroid maintenance.
//!
//! The adaptive policy keeps the centroid equal to the running arithmetic
//! mean of every bonafide embedding contributed so far: starting from the
//! first encountered bonafide representation, a batch carrying `s` bonafide
//! samples with mean `E` moves the centroid to `(n*C + s*E) / (n + s)`.
//! Batches without bonafide samples never touch it. The other three policies
//! (fixed random, trainable, partially-adaptive-then-frozen) exist for
//! ablation comparisons.

use std::io::Write;
use std::str::FromStr;

use ndarray::Array1;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::asp::UtteranceEmbedding;
use crate::error::{Error, Result};

/// How the centroid vector evolves during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CentroidPolicy {
    /// Running mean of all contributed bonafide embeddings.
    Acs,
    /// Seeded random unit vector, never updated.
    Fixed,
    /// Optimizer parameter updated by the loss gradient.
    Trainable,
    /// Behaves like `Acs` through `freeze_epoch`, frozen afterwards.
    PartialAcs { freeze_epoch: u32 },
}

impl std::fmt::Display for CentroidPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CentroidPolicy::Acs => write!(f, "acs"),
            CentroidPolicy::Fixed => write!(f, "fixed"),
            CentroidPolicy::Trainable => write!(f, "trainable"),
            CentroidPolicy::PartialAcs { freeze_epoch } => write!(f, "partial-acs:{freeze_epoch}"),
        }
    }
}

impl FromStr for CentroidPolicy {
    type Err = Error;

    /// Accepts `acs`, `fixed`, `trainable`, `partial-acs` (freeze epoch 5) or
    /// `partial-acs:<K>`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "acs" => Ok(CentroidPolicy::Acs),
            "fixed" => Ok(CentroidPolicy::Fixed),
            "trainable" => Ok(CentroidPolicy::Trainable),
            "partial-acs" => Ok(CentroidPolicy::PartialAcs { freeze_epoch: 5 }),
            other => {
                if let Some(k) = other.strip_prefix("partial-acs:") {
                    let freeze_epoch = k.parse().map_err(|_| Error::UnknownKind {
                        what: "centroid policy",
                        value: other.to_string(),
                    })?;
                    Ok(CentroidPolicy::PartialAcs { freeze_epoch })
                } else {
                    Err(Error::UnknownKind {
                        what: "centroid policy",
                        value: other.to_string(),
                    })
                }
            }
        }
    }
}

/// Mean embedding of the bonafide samples in one mini-batch, with the count.
#[derive(Debug, Clone, PartialEq)]
pub struct BonafideBatchSummary {
    mean_embedding: Array1<f64>,
    sample_count: u64,
}

impl BonafideBatchSummary {
    pub fn new(mean_embedding: Array1<f64>, sample_count: u64) -> Result<Self> {
        if sample_count == 0 {
            return Err(Error::EmptyBatchSummary);
        }
        if !mean_embedding.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite("bonafide batch mean"));
        }
        Ok(Self {
            mean_embedding,
            sample_count,
        })
    }

    pub fn from_embeddings(embeddings: &[&UtteranceEmbedding]) -> Result<Self> {
        if embeddings.is_empty() {
            return Err(Error::EmptyBatchSummary);
        }
        let dim = embeddings[0].dim();
        let mut mean = Array1::zeros(dim);
        for e in embeddings {
            if e.dim() != dim {
                return Err(Error::ShapeMismatch {
                    context: "bonafide batch summary",
                    dimension: "embedding length",
                    expected: dim.to_string(),
                    actual: e.dim().to_string(),
                });
            }
            mean += &e.values();
        }
        mean /= embeddings.len() as f64;
        Self::new(mean, embeddings.len() as u64)
    }

    pub fn mean_embedding(&self) -> &Array1<f64> {
        &self.mean_embedding
    }

    pub fn sample_count(&self) -> u64 {
        self.sample_count
    }
}

/// Input to [`CentroidState::policy_step`].
pub enum PolicyInput<'a> {
    BonafideBatch(&'a BonafideBatchSummary),
    GradientStep { grad: &'a Array1<f64>, lr: f64 },
}

/// Centroid vector plus the number of bonafide samples that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CentroidState {
    vector: Array1<f64>,
    count: u64,
    policy: CentroidPolicy,
    initialized: bool,
}

impl CentroidState {
    /// Creates a state under `policy`. Adaptive policies start uninitialized;
    /// `Fixed` and `Trainable` draw a seeded unit Gaussian vector and
    /// L2-normalize it.
    pub fn make_policy(policy: CentroidPolicy, dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidConfig("centroid dimension must be > 0".into()));
        }
        match policy {
            CentroidPolicy::Acs | CentroidPolicy::PartialAcs { .. } => Ok(Self {
                vector: Array1::zeros(dim),
                count: 0,
                policy,
                initialized: false,
            }),
            CentroidPolicy::Fixed | CentroidPolicy::Trainable => {
                let mut rng = crate::rng::substream(seed, "centroid-init");
                let mut v: Array1<f64> =
                    Array1::from_shape_fn(dim, |_| StandardNormal.sample(&mut rng));
                let norm = v.dot(&v).sqrt();
                if norm > 0.0 {
                    v /= norm;
                } else {
                    v[0] = 1.0;
                }
                Ok(Self {
                    vector: v,
                    count: 0,
                    policy,
                    initialized: true,
                })
            }
        }
    }

    /// Sets the centroid to the first encountered bonafide representation.
    pub fn acs_init(&mut self, first: &UtteranceEmbedding) -> Result<()> {
        if self.initialized {
            return Err(Error::CentroidAlreadyInitialized);
        }
        if first.dim() != self.vector.len() {
            return Err(Error::ShapeMismatch {
                context: "centroid init",
                dimension: "embedding length",
                expected: self.vector.len().to_string(),
                actual: first.dim().to_string(),
            });
        }
        self.vector = first.values().to_owned();
        self.count = 1;
        self.initialized = true;
        Ok(())
    }

    /// Weighted-average update: `C' = (n*C + s*E) / (n + s)`, `n' = n + s`.
    pub fn acs_update(&mut self, summary: &BonafideBatchSummary) -> Result<()> {
        if !self.initialized {
            return Err(Error::CentroidUninitialized);
        }
        if summary.mean_embedding.len() != self.vector.len() {
            return Err(Error::ShapeMismatch {
                context: "centroid update",
                dimension: "embedding length",
                expected: self.vector.len().to_string(),
                actual: summary.mean_embedding.len().to_string(),
            });
        }
        let n = self.count as f64;
        let s = summary.sample_count as f64;
        self.vector = (n * &self.vector + s * &summary.mean_embedding) / (n + s);
        self.count += summary.sample_count;
        Ok(())
    }

    /// Applies the policy-appropriate action for this step: adaptive policies
    /// consume bonafide batches (gated by `epoch` for the partial variant),
    /// the trainable policy consumes gradient steps, and everything else is a
    /// no-op.
    pub fn policy_step(&mut self, epoch: u32, input: PolicyInput<'_>) -> Result<()> {
        match (self.policy, input) {
            (CentroidPolicy::Acs, PolicyInput::BonafideBatch(summary)) => self.acs_update(summary),
            (CentroidPolicy::PartialAcs { freeze_epoch }, PolicyInput::BonafideBatch(summary)) => {
                if epoch <= freeze_epoch {
                    self.acs_update(summary)
                } else {
                    Ok(())
                }
            }
            (CentroidPolicy::Trainable, PolicyInput::GradientStep { grad, lr }) => {
                if grad.len() != self.vector.len() {
                    return Err(Error::ShapeMismatch {
                        context: "centroid gradient step",
                        dimension: "gradient length",
                        expected: self.vector.len().to_string(),
                        actual: grad.len().to_string(),
                    });
                }
                self.vector -= &(lr * grad);
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// Whether adaptive updates still apply at `epoch` (always false for
    /// `Fixed` and `Trainable`).
    pub fn accepts_bonafide(&self, epoch: u32) -> bool {
        match self.policy {
            CentroidPolicy::Acs => true,
            CentroidPolicy::PartialAcs { freeze_epoch } => epoch <= freeze_epoch,
            CentroidPolicy::Fixed | CentroidPolicy::Trainable => false,
        }
    }

    pub fn vector(&self) -> &Array1<f64> {
        &self.vector
    }

    /// Overwrites the vector; only meaningful under the trainable policy,
    /// where the optimizer owns the values.
    pub fn set_vector(&mut self, vector: Array1<f64>) -> Result<()> {
        if vector.len() != self.vector.len() {
            return Err(Error::ShapeMismatch {
                context: "centroid assignment",
                dimension: "vector length",
                expected: self.vector.len().to_string(),
                actual: vector.len().to_string(),
            });
        }
        self.vector = vector;
        Ok(())
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn policy(&self) -> CentroidPolicy {
        self.policy
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }
}

/// Writes the header for a per-step centroid trajectory CSV.
pub fn write_trajectory_header(out: &mut dyn Write, dim: usize) -> std::io::Result<()> {
    let shown = dim.min(8);
    let mut cols = vec!["step".to_string(), "count".to_string()];
    cols.extend((0..shown).map(|i| format!("c{i}")));
    cols.push("l2_norm".to_string());
    writeln!(out, "{}", cols.join(","))
}

/// Appends one trajectory row: step index, contribution count, the first
/// eight components and the full-vector L2 norm.
pub fn write_trajectory_row(
    out: &mut dyn Write,
    step: u64,
    state: &CentroidState,
) -> std::io::Result<()> {
    let shown = state.dim().min(8);
    let mut fields = vec![step.to_string(), state.count().to_string()];
    fields.extend(state.vector.iter().take(shown).map(|x| x.to_string()));
    fields.push(state.vector.dot(&state.vector).sqrt().to_string());
    writeln!(out, "{}", fields.join(","))
}
