//! Attentive statistics pooling.
//!
//! Maps a frame-level feature sequence to a fixed utterance embedding: each
//! frame gets a scalar attention score `e_t = v' f(W h_t + b)`, scores are
//! softmax-normalized into weights, and the embedding is the concatenation of
//! the attention-weighted mean and the attention-weighted standard deviation.
//! The backward pass is hand-derived and checked against finite differences.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Stabilizer added under the square root of the weighted variance. The raw
/// variance is clamped at zero first; the gradient of sqrt at zero is
/// unbounded without this.
pub const VARIANCE_EPS: f64 = 1e-9;

/// A `T x C` matrix of per-frame features for one utterance. Row `t` is the
/// frame-level feature at time step `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameFeatureSequence {
    frames: Array2<f64>,
}

impl FrameFeatureSequence {
    pub fn new(frames: Array2<f64>) -> Result<Self> {
        if frames.nrows() == 0 || frames.ncols() == 0 {
            return Err(Error::EmptySequence);
        }
        if !frames.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite("frame features"));
        }
        Ok(Self { frames })
    }

    pub fn frames(&self) -> ArrayView2<'_, f64> {
        self.frames.view()
    }

    pub fn num_frames(&self) -> usize {
        self.frames.nrows()
    }

    pub fn channels(&self) -> usize {
        self.frames.ncols()
    }
}

/// Non-linearity applied inside the attention score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
        }
    }

    /// Derivative expressed through the activated value. Works for both
    /// variants: tanh' = 1 - tanh^2, and for ReLU the output sign carries the
    /// gating information.
    fn grad_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Learnable attention parameters: `W` is `C x C`, `b` and `v` are length `C`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AspParams {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
    pub v: Array1<f64>,
    pub activation: Activation,
}

impl AspParams {
    /// Seeded init: `W` and `v` uniform in `[-1/sqrt(C), 1/sqrt(C)]`, `b` zero.
    pub fn init(channels: usize, rng: &mut impl Rng, activation: Activation) -> Self {
        let bound = 1.0 / (channels as f64).sqrt();
        let w = Array2::from_shape_fn((channels, channels), |_| rng.random_range(-bound..bound));
        let v = Array1::from_shape_fn(channels, |_| rng.random_range(-bound..bound));
        Self {
            w,
            b: Array1::zeros(channels),
            v,
            activation,
        }
    }

    pub fn channels(&self) -> usize {
        self.v.len()
    }

    fn check_seq(&self, seq: &FrameFeatureSequence) -> Result<()> {
        if seq.channels() != self.channels() {
            return Err(Error::ShapeMismatch {
                context: "attentive pooling",
                dimension: "channel count",
                expected: self.channels().to_string(),
                actual: seq.channels().to_string(),
            });
        }
        if self.w.nrows() != self.channels()
            || self.w.ncols() != self.channels()
            || self.b.len() != self.channels()
        {
            return Err(Error::ShapeMismatch {
                context: "attentive pooling",
                dimension: "parameter shape",
                expected: format!("W {0}x{0}, b {0}, v {0}", self.channels()),
                actual: format!(
                    "W {}x{}, b {}, v {}",
                    self.w.nrows(),
                    self.w.ncols(),
                    self.b.len(),
                    self.v.len()
                ),
            });
        }
        Ok(())
    }
}

/// Gradients with the same shapes as [`AspParams`].
#[derive(Debug, Clone)]
pub struct AspGrads {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
    pub v: Array1<f64>,
}

/// Utterance embedding of dimension `D = 2C`: the first `C` entries are the
/// weighted mean, the last `C` the weighted standard deviation (elementwise
/// non-negative).
#[derive(Debug, Clone, PartialEq)]
pub struct UtteranceEmbedding {
    values: Array1<f64>,
}

impl UtteranceEmbedding {
    pub fn new(values: Array1<f64>) -> Result<Self> {
        if values.len() < 2 || values.len() % 2 != 0 {
            return Err(Error::ShapeMismatch {
                context: "utterance embedding",
                dimension: "length",
                expected: "even, >= 2".to_string(),
                actual: values.len().to_string(),
            });
        }
        if !values.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite("utterance embedding"));
        }
        let c = values.len() / 2;
        if values.iter().skip(c).any(|&x| x < 0.0) {
            return Err(Error::InvalidConfig(
                "utterance embedding std block must be non-negative".to_string(),
            ));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> ArrayView1<'_, f64> {
        self.values.view()
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn mean_block(&self) -> ArrayView1<'_, f64> {
        self.values.slice(ndarray::s![..self.dim() / 2])
    }

    pub fn std_block(&self) -> ArrayView1<'_, f64> {
        self.values.slice(ndarray::s![self.dim() / 2..])
    }

    pub fn into_values(self) -> Array1<f64> {
        self.values
    }
}

struct ForwardPass {
    activated: Array2<f64>, // T x C, f(W h_t + b)
    weights: Array1<f64>,   // T, softmax of scores
    mean: Array1<f64>,      // C
    variance: Array1<f64>,  // raw, before clamping
}

fn run_forward(seq: &FrameFeatureSequence, params: &AspParams) -> Result<ForwardPass> {
    let h = seq.frames();
    let mut pre = h.dot(&params.w.t());
    pre += &params.b;
    let activated = pre.mapv(|x| params.activation.apply(x));
    let scores = activated.dot(&params.v);
    let weights = normalize_scores(&scores)?;

    let mean = h.t().dot(&weights);
    let squared = &h * &h;
    let second_moment = squared.t().dot(&weights);
    let variance = &second_moment - &(&mean * &mean);
    Ok(ForwardPass {
        activated,
        weights,
        mean,
        variance,
    })
}

/// Per-frame attention scores `e_t = v' f(W h_t + b)`.
pub fn attention_scores(seq: &FrameFeatureSequence, params: &AspParams) -> Result<Array1<f64>> {
    params.check_seq(seq)?;
    let mut pre = seq.frames().dot(&params.w.t());
    pre += &params.b;
    Ok(pre.mapv(|x| params.activation.apply(x)).dot(&params.v))
}

/// Softmax across time frames, computed with max subtraction.
pub fn normalize_scores(scores: &Array1<f64>) -> Result<Array1<f64>> {
    if scores.is_empty() {
        return Err(Error::EmptySequence);
    }
    if !scores.iter().all(|x| x.is_finite()) {
        return Err(Error::NonFinite("attention scores"));
    }
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exp = scores.mapv(|x| (x - max).exp());
    let sum = exp.sum();
    Ok(exp / sum)
}

/// Pools a frame sequence into the `[weighted mean | weighted std]` embedding.
pub fn asp_forward(seq: &FrameFeatureSequence, params: &AspParams) -> Result<UtteranceEmbedding> {
    params.check_seq(seq)?;
    let pass = run_forward(seq, params)?;
    let std = pass.variance.mapv(|x| (x.max(0.0) + VARIANCE_EPS).sqrt());
    let mut values = Array1::zeros(2 * seq.channels());
    values
        .slice_mut(ndarray::s![..seq.channels()])
        .assign(&pass.mean);
    values
        .slice_mut(ndarray::s![seq.channels()..])
        .assign(&std);
    UtteranceEmbedding::new(values)
}

/// Gradient of `upstream . asp_forward(seq, params)` with respect to the frame
/// sequence and the attention parameters. `upstream` has length `2C`.
pub fn asp_backward(
    seq: &FrameFeatureSequence,
    params: &AspParams,
    upstream: &Array1<f64>,
) -> Result<(Array2<f64>, AspGrads)> {
    params.check_seq(seq)?;
    let c = seq.channels();
    if upstream.len() != 2 * c {
        return Err(Error::ShapeMismatch {
            context: "asp_backward",
            dimension: "upstream length",
            expected: (2 * c).to_string(),
            actual: upstream.len().to_string(),
        });
    }
    if !upstream.iter().all(|x| x.is_finite()) {
        return Err(Error::NonFinite("upstream gradient"));
    }

    let h = seq.frames();
    let pass = run_forward(seq, params)?;
    let g_mean_up = upstream.slice(ndarray::s![..c]);
    let g_std_up = upstream.slice(ndarray::s![c..]);

    // std_c = sqrt(max(var_c, 0) + eps); the clamp zeroes the gradient on the
    // negative branch.
    let std = pass.variance.mapv(|x| (x.max(0.0) + VARIANCE_EPS).sqrt());
    let g_var = Array1::from_shape_fn(c, |i| {
        if pass.variance[i] > 0.0 {
            g_std_up[i] / (2.0 * std[i])
        } else {
            0.0
        }
    });

    // L = g_mean . mean + g_std . std with mean = H' a, m2 = (H*H)' a.
    let g_mean = &g_mean_up.to_owned() - &(2.0 * &pass.mean * &g_var);
    let g_m2 = g_var;

    // Sensitivity of L to each attention weight.
    let squared = &h * &h;
    let d = h.dot(&g_mean) + squared.dot(&g_m2);

    // Softmax backward: de_t = a_t (d_t - sum_tau a_tau d_tau).
    let inner = pass.weights.dot(&d);
    let g_scores = &pass.weights * &(&d - inner);

    // Score path: e_t = v . f(W h_t + b).
    let g_v = pass.activated.t().dot(&g_scores);
    let act_grad = pass
        .activated
        .mapv(|a| params.activation.grad_from_output(a));
    // q_t = de_t * (v ⊙ f'(z_t))
    let mut q = act_grad;
    for (mut row, &gs) in q.outer_iter_mut().zip(g_scores.iter()) {
        row *= &(gs * &params.v);
    }
    let g_b = q.sum_axis(Axis(0));
    let g_w = q.t().dot(&h);

    // Frame gradient: direct statistics path plus the attention path.
    let mut g_frames = q.dot(&params.w);
    for (t, mut row) in g_frames.outer_iter_mut().enumerate() {
        let a_t = pass.weights[t];
        let direct = &g_mean + &(2.0 * &h.row(t).to_owned() * &g_m2);
        row += &(a_t * &direct);
    }

    Ok((
        g_frames,
        AspGrads {
            w: g_w,
            b: g_b,
            v: g_v,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn seq(frames: Array2<f64>) -> FrameFeatureSequence {
        FrameFeatureSequence::new(frames).unwrap()
    }

    fn random_instance(rng: &mut ChaCha8Rng, t: usize, c: usize) -> (FrameFeatureSequence, AspParams) {
        let frames = Array2::from_shape_fn((t, c), |_| rng.random_range(-1.5..1.5));
        let params = AspParams::init(c, rng, Activation::Tanh);
        (seq(frames), params)
    }

    #[test]
    fn zero_parameters_give_zero_scores() {
        let s = seq(array![[0.3, -1.0], [2.0, 0.5], [0.0, 0.1]]);
        let params = AspParams {
            w: Array2::zeros((2, 2)),
            b: Array1::zeros(2),
            v: array![0.7, -0.2],
            activation: Activation::Tanh,
        };
        let e = attention_scores(&s, &params).unwrap();
        assert!(e.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn single_frame_single_channel_score() {
        let s = seq(array![[0.5]]);
        let params = AspParams {
            w: array![[1.0]],
            b: array![0.0],
            v: array![1.0],
            activation: Activation::Tanh,
        };
        let e = attention_scores(&s, &params).unwrap();
        assert_relative_eq!(e[0], 0.46211715726000974, max_relative = 1e-12);
    }

    #[test]
    fn duplicated_frames_score_identically() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (_, params) = random_instance(&mut rng, 1, 3);
        let row = array![0.4, -0.2, 1.1];
        let frames = ndarray::stack![Axis(0), row, array![0.0, 0.0, 0.0], row];
        let e = attention_scores(&seq(frames), &params).unwrap();
        assert_eq!(e[0], e[2]);
    }

    #[test]
    fn shape_mismatch_names_the_dimension() {
        let s = seq(array![[1.0, 2.0, 3.0]]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let params = AspParams::init(2, &mut rng, Activation::Tanh);
        let err = attention_scores(&s, &params).unwrap_err();
        assert!(err.to_string().contains("channel count"));
    }

    #[test]
    fn equal_scores_normalize_to_uniform() {
        let a = normalize_scores(&array![0.3, 0.3, 0.3, 0.3]).unwrap();
        for &x in a.iter() {
            assert_relative_eq!(x, 0.25, max_relative = 1e-15);
        }
    }

    #[test]
    fn normalize_known_values() {
        let a = normalize_scores(&array![0.0, 3.0f64.ln()]).unwrap();
        assert_relative_eq!(a[0], 0.25, max_relative = 1e-14);
        assert_relative_eq!(a[1], 0.75, max_relative = 1e-14);
    }

    #[test]
    fn normalize_rejects_non_finite() {
        assert!(normalize_scores(&array![0.0, f64::NAN]).is_err());
    }

    #[test]
    fn normalize_survives_large_scores() {
        let a = normalize_scores(&array![1e4, 1e4 - 1.0]).unwrap();
        assert!(a.iter().all(|x| x.is_finite()));
        assert_relative_eq!(a.sum(), 1.0, max_relative = 1e-12);
    }

    #[test]
    fn constant_sequence_pools_to_the_frame() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let params = AspParams::init(2, &mut rng, Activation::Tanh);
        let frames = array![[0.7, -0.3], [0.7, -0.3], [0.7, -0.3]];
        let emb = asp_forward(&seq(frames), &params).unwrap();
        assert_relative_eq!(emb.mean_block()[0], 0.7, max_relative = 1e-12);
        assert_relative_eq!(emb.mean_block()[1], -0.3, max_relative = 1e-12);
        for &s in emb.std_block().iter() {
            assert_relative_eq!(s, VARIANCE_EPS.sqrt(), max_relative = 1e-9);
        }
    }

    #[test]
    fn hand_worked_two_frame_pool() {
        // Zero attention parameters force equal weights.
        let params = AspParams {
            w: Array2::zeros((1, 1)),
            b: Array1::zeros(1),
            v: array![1.0],
            activation: Activation::Tanh,
        };
        let emb = asp_forward(&seq(array![[0.0], [2.0]]), &params).unwrap();
        assert_relative_eq!(emb.mean_block()[0], 1.0, max_relative = 1e-15);
        assert_relative_eq!(emb.std_block()[0], (1.0 + VARIANCE_EPS).sqrt(), max_relative = 1e-15);
    }

    #[test]
    fn single_frame_has_zero_std() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (s, params) = random_instance(&mut rng, 1, 3);
        let emb = asp_forward(&s, &params).unwrap();
        for (m, h) in emb.mean_block().iter().zip(s.frames().row(0).iter()) {
            assert_relative_eq!(m, h, max_relative = 1e-12);
        }
        for &x in emb.std_block().iter() {
            assert_relative_eq!(x, VARIANCE_EPS.sqrt(), max_relative = 1e-9);
        }
    }

    #[test]
    fn backward_is_zero_for_zero_upstream() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (s, params) = random_instance(&mut rng, 4, 3);
        let (gf, gp) = asp_backward(&s, &params, &Array1::zeros(6)).unwrap();
        assert!(gf.iter().all(|&x| x == 0.0));
        assert!(gp.w.iter().all(|&x| x == 0.0));
        assert!(gp.b.iter().all(|&x| x == 0.0));
        assert!(gp.v.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn backward_is_linear_in_upstream() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (s, params) = random_instance(&mut rng, 5, 2);
        let upstream = Array1::from_shape_fn(4, |_| rng.random_range(-1.0..1.0));
        let (gf1, gp1) = asp_backward(&s, &params, &upstream).unwrap();
        let (gf2, gp2) = asp_backward(&s, &params, &(2.0 * &upstream)).unwrap();
        for (a, b) in gf1.iter().zip(gf2.iter()) {
            assert_relative_eq!(2.0 * a, *b, max_relative = 1e-12, epsilon = 1e-15);
        }
        for (a, b) in gp1.v.iter().zip(gp2.v.iter()) {
            assert_relative_eq!(2.0 * a, *b, max_relative = 1e-12, epsilon = 1e-15);
        }
    }

    fn scalar_objective(
        frames: &Array2<f64>,
        params: &AspParams,
        upstream: &Array1<f64>,
    ) -> f64 {
        let emb = asp_forward(&seq(frames.clone()), params).unwrap();
        emb.values().dot(upstream)
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let step = 1e-5;
        for case in 0..20 {
            let t = rng.random_range(1..=6);
            let c = rng.random_range(1..=4);
            let activation = if case % 3 == 0 { Activation::Relu } else { Activation::Tanh };
            let frames = Array2::from_shape_fn((t, c), |_| rng.random_range(-1.5..1.5));
            let mut params = AspParams::init(c, &mut rng, activation);
            // Random bias too, so the b-gradient is exercised away from zero.
            params.b = Array1::from_shape_fn(c, |_| rng.random_range(-0.5..0.5));
            let upstream = Array1::from_shape_fn(2 * c, |_| rng.random_range(-1.0..1.0));

            let (gf, gp) = asp_backward(&seq(frames.clone()), &params, &upstream).unwrap();

            let mut check = |analytic: f64, plus: f64, minus: f64| {
                let numeric = (plus - minus) / (2.0 * step);
                let denom = analytic.abs().max(numeric.abs()).max(1e-5);
                assert!(
                    ((analytic - numeric) / denom).abs() < 1e-4,
                    "analytic {analytic} vs numeric {numeric}"
                );
            };

            for i in 0..t {
                for j in 0..c {
                    let mut fp = frames.clone();
                    fp[[i, j]] += step;
                    let mut fm = frames.clone();
                    fm[[i, j]] -= step;
                    check(
                        gf[[i, j]],
                        scalar_objective(&fp, &params, &upstream),
                        scalar_objective(&fm, &params, &upstream),
                    );
                }
            }
            for i in 0..c {
                for j in 0..c {
                    let mut pp = params.clone();
                    pp.w[[i, j]] += step;
                    let mut pm = params.clone();
                    pm.w[[i, j]] -= step;
                    check(
                        gp.w[[i, j]],
                        scalar_objective(&frames, &pp, &upstream),
                        scalar_objective(&frames, &pm, &upstream),
                    );
                }
                let mut pp = params.clone();
                pp.b[i] += step;
                let mut pm = params.clone();
                pm.b[i] -= step;
                check(
                    gp.b[i],
                    scalar_objective(&frames, &pp, &upstream),
                    scalar_objective(&frames, &pm, &upstream),
                );
                let mut pp = params.clone();
                pp.v[i] += step;
                let mut pm = params.clone();
                pm.v[i] -= step;
                check(
                    gp.v[i],
                    scalar_objective(&frames, &pp, &upstream),
                    scalar_objective(&frames, &pm, &upstream),
                );
            }
        }
    }

    #[test]
    fn empty_sequence_rejected() {
        assert!(FrameFeatureSequence::new(Array2::zeros((0, 3))).is_err());
        assert!(FrameFeatureSequence::new(Array2::zeros((3, 0))).is_err());
    }

    #[test]
    fn embedding_rejects_negative_std_block() {
        assert!(UtteranceEmbedding::new(array![1.0, -0.5]).is_err());
        assert!(UtteranceEmbedding::new(array![1.0, 0.5]).is_ok());
    }

    proptest! {
        // Score gaps capped at ~30 nats: beyond that a weight rounds to
        // exactly 1.0 in f64 and the strict bound cannot hold.
        #[test]
        fn weights_sum_to_one_and_lie_in_unit_interval(
            scores in proptest::collection::vec(-15.0f64..15.0, 2..40)
        ) {
            let a = normalize_scores(&Array1::from_vec(scores)).unwrap();
            prop_assert!((a.sum() - 1.0).abs() < 1e-12);
            prop_assert!(a.iter().all(|&x| x > 0.0 && x < 1.0));
        }

        #[test]
        fn softmax_is_shift_invariant(
            scores in proptest::collection::vec(-20.0f64..20.0, 1..20),
            shift in -50.0f64..50.0
        ) {
            let e = Array1::from_vec(scores);
            let a = normalize_scores(&e).unwrap();
            let b = normalize_scores(&(&e + shift)).unwrap();
            for (x, y) in a.iter().zip(b.iter()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn pooling_is_frame_order_invariant(
            seed in 0u64..1000,
            t in 2usize..8,
            c in 1usize..5,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let frames = Array2::from_shape_fn((t, c), |_| rng.random_range(-2.0..2.0));
            let params = AspParams::init(c, &mut rng, Activation::Tanh);
            let fwd = asp_forward(&seq(frames.clone()), &params).unwrap();

            // Reverse the frame order.
            let mut reversed = frames.clone();
            for (i, row) in frames.outer_iter().enumerate() {
                reversed.row_mut(t - 1 - i).assign(&row);
            }
            let fwd_rev = asp_forward(&seq(reversed.clone()), &params).unwrap();
            for (a, b) in fwd.values().iter().zip(fwd_rev.values().iter()) {
                prop_assert!((a - b).abs() < 1e-12);
            }

            // And the attention weights permute along.
            let a = normalize_scores(&attention_scores(&seq(frames), &params).unwrap()).unwrap();
            let b = normalize_scores(&attention_scores(&seq(reversed), &params).unwrap()).unwrap();
            for i in 0..t {
                prop_assert!((a[i] - b[t - 1 - i]).abs() < 1e-12);
            }
        }

        #[test]
        fn std_block_is_non_negative(
            seed in 0u64..1000,
            t in 1usize..10,
            c in 1usize..5,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let frames = Array2::from_shape_fn((t, c), |_| rng.random_range(-3.0..3.0));
            let params = AspParams::init(c, &mut rng, Activation::Tanh);
            let emb = asp_forward(&seq(frames), &params).unwrap();
            prop_assert!(emb.std_block().iter().all(|&x| x >= 0.0));
        }
    }
}
