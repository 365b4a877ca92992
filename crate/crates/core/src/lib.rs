//! One-class audio anti-spoofing training toolkit.
//!
//! The pipeline maps per-frame features through a small trainable encoder and
//! an attentive statistics pooling layer into utterance embeddings, maintains
//! a bonafide-class centroid under one of four update policies, and trains
//! against a cosine one-class loss (with weighted cross-entropy and
//! OC-Softmax baselines). Evaluation covers EER and the normalized tandem
//! detection cost (min t-DCF), with ASVspoof-style score and protocol files.
//!
//! Everything is double precision and deterministic given a root seed.

pub mod adam;
pub mod asp;
pub mod centroid;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
