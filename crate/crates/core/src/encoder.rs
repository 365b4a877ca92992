//! Trainable per-frame encoder.
//!
//! A two-layer perceptron applied row-wise to the raw `T x F` feature matrix:
//! `y_t = W2 tanh(W1 x_t + b1) + b2`, producing the `T x C` sequence consumed
//! by the pooling layer. This is the desk-scale stand-in for a pretrained
//! speech front-end.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::asp::FrameFeatureSequence;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub w1: Array2<f64>, // H x F
    pub b1: Array1<f64>, // H
    pub w2: Array2<f64>, // C x H
    pub b2: Array1<f64>, // C
}

impl EncoderParams {
    /// Seeded init: weights uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`,
    /// biases zero.
    pub fn init(input_dim: usize, hidden_dim: usize, output_dim: usize, rng: &mut impl Rng) -> Self {
        let bound1 = 1.0 / (input_dim as f64).sqrt();
        let bound2 = 1.0 / (hidden_dim as f64).sqrt();
        Self {
            w1: Array2::from_shape_fn((hidden_dim, input_dim), |_| {
                rng.random_range(-bound1..bound1)
            }),
            b1: Array1::zeros(hidden_dim),
            w2: Array2::from_shape_fn((output_dim, hidden_dim), |_| {
                rng.random_range(-bound2..bound2)
            }),
            b2: Array1::zeros(output_dim),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.ncols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.w2.nrows()
    }

    fn check_raw(&self, raw: &Array2<f64>) -> Result<()> {
        if raw.ncols() != self.input_dim() {
            return Err(Error::ShapeMismatch {
                context: "encoder",
                dimension: "input feature dim",
                expected: self.input_dim().to_string(),
                actual: raw.ncols().to_string(),
            });
        }
        if raw.nrows() == 0 {
            return Err(Error::EmptySequence);
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct EncoderGrads {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

fn hidden_activations(raw: &Array2<f64>, params: &EncoderParams) -> Array2<f64> {
    let mut pre = raw.dot(&params.w1.t());
    pre += &params.b1;
    pre.mapv_into(f64::tanh)
}

/// Applies the per-frame MLP row-wise.
pub fn encoder_forward(raw: &Array2<f64>, params: &EncoderParams) -> Result<FrameFeatureSequence> {
    params.check_raw(raw)?;
    let hidden = hidden_activations(raw, params);
    let mut out = hidden.dot(&params.w2.t());
    out += &params.b2;
    FrameFeatureSequence::new(out)
}

/// Gradients of `sum_t grad_frames_t . y_t` with respect to the encoder
/// parameters (the raw input is data, not a parameter).
pub fn encoder_backward(
    raw: &Array2<f64>,
    params: &EncoderParams,
    grad_frames: &Array2<f64>,
) -> Result<EncoderGrads> {
    params.check_raw(raw)?;
    if grad_frames.nrows() != raw.nrows() || grad_frames.ncols() != params.output_dim() {
        return Err(Error::ShapeMismatch {
            context: "encoder backward",
            dimension: "frame gradient shape",
            expected: format!("{}x{}", raw.nrows(), params.output_dim()),
            actual: format!("{}x{}", grad_frames.nrows(), grad_frames.ncols()),
        });
    }

    let hidden = hidden_activations(raw, params);
    let g_w2 = grad_frames.t().dot(&hidden);
    let g_b2 = grad_frames.sum_axis(Axis(0));

    let mut g_hidden = grad_frames.dot(&params.w2);
    g_hidden.zip_mut_with(&hidden, |g, &h| *g *= 1.0 - h * h);
    let g_w1 = g_hidden.t().dot(raw);
    let g_b1 = g_hidden.sum_axis(Axis(0));

    Ok(EncoderGrads {
        w1: g_w1,
        b1: g_b1,
        w2: g_w2,
        b2: g_b2,
    })
}
