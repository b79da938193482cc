//! Visual-specific knowledge filtering: the adaptation layer producing f_v,
//! attention pooling over knowledge rows, prompt composition and the text
//! encoding step yielding f_t.

use ndarray::{Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prompt::TokenEmbedding;

/// Numerically stable softmax (max-subtracted).
pub fn softmax(logits: &Array1<f64>) -> Array1<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exp: Array1<f64> = logits.mapv(|z| (z - max).exp());
    let sum = exp.sum();
    exp / sum
}

/// Two fully connected layers with a rectifier in between, mapping raw
/// encoder features into the m-dimensional embedding space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptationLayer {
    /// First layer weights, shape (m_hid, m_enc).
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    /// Second layer weights, shape (m, m_hid).
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

impl AdaptationLayer {
    /// Seeded init: weights ~ N(0, 1/fan_in), biases zero.
    pub fn init(m_enc: usize, m_hid: usize, m: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut sample = |rows: usize, cols: usize| {
            let scale = 1.0 / (cols as f64).sqrt();
            Array2::from_shape_fn((rows, cols), |_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * scale
            })
        };
        AdaptationLayer {
            w1: sample(m_hid, m_enc),
            b1: Array1::zeros(m_hid),
            w2: sample(m, m_hid),
            b2: Array1::zeros(m),
        }
    }

    pub fn input_width(&self) -> usize {
        self.w1.ncols()
    }

    pub fn output_width(&self) -> usize {
        self.w2.nrows()
    }
}

/// Applies the adaptation layer: f_v = W2 rect(W1 x + b1) + b2.
pub fn adapt_visual(raw: &Array1<f64>, layer: &AdaptationLayer) -> Result<Array1<f64>> {
    if raw.len() != layer.input_width() {
        return Err(Error::DimensionMismatch(format!(
            "adaptation input has width {}, layer expects {}",
            raw.len(),
            layer.input_width()
        )));
    }
    let hidden = (layer.w1.dot(raw) + &layer.b1).mapv(|h| h.max(0.0));
    Ok(layer.w2.dot(&hidden) + &layer.b2)
}

/// Linear projection applied to the attention-pooled knowledge vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeFilter {
    /// Projection matrix, shape (m, m).
    pub psi: Array2<f64>,
    pub bias: Array1<f64>,
}

impl KnowledgeFilter {
    /// Identity projection with zero bias: the filter starts as pure
    /// attention pooling and learns a reweighting from there.
    pub fn identity(m: usize) -> Self {
        KnowledgeFilter {
            psi: Array2::eye(m),
            bias: Array1::zeros(m),
        }
    }

    pub fn width(&self) -> usize {
        self.psi.nrows()
    }
}

/// Attention weights of the filter: softmax(f_v . rows^T / sqrt(m)).
pub fn filter_attention(t: &TokenEmbedding, f_v: &Array1<f64>) -> Result<Array1<f64>> {
    let m = t.width();
    if f_v.len() != m {
        return Err(Error::DimensionMismatch(format!(
            "visual feature has width {}, prompt rows have width {m}",
            f_v.len()
        )));
    }
    let logits = t.rows().dot(f_v) / (m as f64).sqrt();
    Ok(softmax(&logits))
}

/// Filters a knowledge prompt against a visual feature: attention-pools the
/// rows with query f_v, then projects the pooled vector.
pub fn filter(t: &TokenEmbedding, f_v: &Array1<f64>, f: &KnowledgeFilter) -> Result<Array1<f64>> {
    if f.width() != t.width() {
        return Err(Error::DimensionMismatch(format!(
            "filter projection is {}x{}, prompt rows have width {}",
            f.psi.nrows(),
            f.psi.ncols(),
            t.width()
        )));
    }
    let weights = filter_attention(t, f_v)?;
    let pooled = t.rows().t().dot(&weights);
    Ok(f.psi.dot(&pooled) + &f.bias)
}

/// The final text-encoder input for one class.
#[derive(Debug, Clone, PartialEq)]
pub struct ComposedPrompt {
    rows: Array2<f64>,
}

impl ComposedPrompt {
    pub fn rows(&self) -> &Array2<f64> {
        &self.rows
    }

    pub fn row_count(&self) -> usize {
        self.rows.nrows()
    }
}

/// Stacks the composed prompt rows in their fixed order: filtered entity
/// vector, filtered description vector, context rows, class embedding.
pub fn compose_prompt(
    ep: &Array1<f64>,
    dp: &Array1<f64>,
    ctx: &Array2<f64>,
    cls: &Array1<f64>,
) -> Result<ComposedPrompt> {
    let m = ep.len();
    if dp.len() != m || ctx.ncols() != m || cls.len() != m {
        return Err(Error::DimensionMismatch(format!(
            "composed prompt widths differ: ep {}, dp {}, ctx {}, cls {}",
            ep.len(),
            dp.len(),
            ctx.ncols(),
            cls.len()
        )));
    }
    let mut rows = Array2::zeros((2 + ctx.nrows() + 1, m));
    rows.index_axis_mut(Axis(0), 0).assign(ep);
    rows.index_axis_mut(Axis(0), 1).assign(dp);
    for (i, ctx_row) in ctx.axis_iter(Axis(0)).enumerate() {
        rows.index_axis_mut(Axis(0), 2 + i).assign(&ctx_row);
    }
    rows.index_axis_mut(Axis(0), 2 + ctx.nrows()).assign(cls);
    Ok(ComposedPrompt { rows })
}

/// Maps a composed prompt to a single text feature (not yet normalized).
pub trait TextEncoder {
    fn encode(&self, rows: &Array2<f64>) -> Result<Array1<f64>>;
}

/// Toy text encoder: the mean of the prompt rows.
///
/// Linear and parameter-free, so the training path can differentiate through
/// it exactly.
pub struct MeanTextEncoder;

impl TextEncoder for MeanTextEncoder {
    fn encode(&self, rows: &Array2<f64>) -> Result<Array1<f64>> {
        Ok(rows
            .mean_axis(Axis(0))
            .expect("prompt has at least one row"))
    }
}

/// Encodes a composed prompt and normalizes the result to unit length.
pub fn encode_text(p: &ComposedPrompt, enc: &dyn TextEncoder) -> Result<Array1<f64>> {
    let raw = enc.encode(p.rows())?;
    let norm = raw.dot(&raw).sqrt();
    if !norm.is_finite() || norm == 0.0 {
        return Err(Error::EncoderFailure(format!(
            "text feature norm is {norm}"
        )));
    }
    Ok(raw / norm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn token(rows: Array2<f64>) -> TokenEmbedding {
        let tags = (0..rows.nrows()).map(|i| format!("row:{i}")).collect();
        TokenEmbedding::new(rows, tags).unwrap()
    }

    #[test]
    fn adapt_visual_zero_weights_give_zero() {
        let layer = AdaptationLayer {
            w1: Array2::zeros((3, 2)),
            b1: Array1::zeros(3),
            w2: Array2::zeros((2, 3)),
            b2: Array1::zeros(2),
        };
        let out = adapt_visual(&array![1.0, -1.0], &layer).unwrap();
        assert_eq!(out, array![0.0, 0.0]);
    }

    #[test]
    fn adapt_visual_matches_hand_arithmetic() {
        let layer = AdaptationLayer {
            w1: array![[2.0]],
            b1: array![0.0],
            w2: array![[3.0]],
            b2: array![1.0],
        };
        let out = adapt_visual(&array![1.0], &layer).unwrap();
        assert_eq!(out, array![7.0]);
    }

    #[test]
    fn rectifier_kills_negative_preactivations() {
        let layer = AdaptationLayer {
            w1: array![[1.0], [1.0]],
            b1: array![0.0, 0.0],
            w2: array![[5.0, 5.0]],
            b2: array![0.25],
        };
        let out = adapt_visual(&array![-3.0], &layer).unwrap();
        assert_eq!(out, array![0.25]);
    }

    #[test]
    fn adapt_visual_checks_width() {
        let layer = AdaptationLayer::init(4, 3, 2, 0);
        let err = adapt_visual(&array![1.0, 2.0], &layer).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch(_)), "got {err:?}");
    }

    #[test]
    fn single_row_prompt_passes_through_projection() {
        let t = token(array![[0.3, -0.7]]);
        let f = KnowledgeFilter::identity(2);
        let out = filter(&t, &array![5.0, 5.0], &f).unwrap();
        assert_eq!(out, array![0.3, -0.7]);
    }

    #[test]
    fn identical_rows_ignore_the_query() {
        let t = token(array![[0.5, 0.1], [0.5, 0.1], [0.5, 0.1]]);
        let f = KnowledgeFilter::identity(2);
        let a = filter(&t, &array![9.0, -4.0], &f).unwrap();
        let b = filter(&t, &array![-2.0, 3.0], &f).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
        for (x, y) in a.iter().zip([0.5, 0.1]) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn orthogonal_query_pools_uniformly() {
        let t = token(array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]);
        let f_v = array![0.0, 0.0, 2.0];
        let weights = filter_attention(&t, &f_v).unwrap();
        assert!((weights[0] - 0.5).abs() < 1e-12);
        assert!((weights[1] - 0.5).abs() < 1e-12);
        let out = filter(&t, &f_v, &KnowledgeFilter::identity(3)).unwrap();
        let mean = array![0.5, 0.5, 0.0];
        for (x, y) in out.iter().zip(mean.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn filter_rejects_width_mismatch() {
        let t = token(array![[1.0, 0.0]]);
        let err = filter(&t, &array![1.0, 0.0, 0.0], &KnowledgeFilter::identity(2)).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch(_)), "got {err:?}");
    }

    #[test]
    fn attention_is_permutation_equivariant() {
        let rows = array![[1.0, 0.0], [0.0, 2.0], [1.0, 1.0]];
        let swapped = array![[1.0, 1.0], [0.0, 2.0], [1.0, 0.0]];
        let f_v = array![0.7, -0.2];
        let f = KnowledgeFilter::identity(2);
        let a = filter(&token(rows), &f_v, &f).unwrap();
        let b = filter(&token(swapped), &f_v, &f).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert!(
                (x - y).abs() < 1e-12,
                "pooled output must not depend on row order"
            );
        }
    }

    #[test]
    fn doubling_width_with_zero_padding_rescales_logits() {
        let rows = array![[1.0, 2.0], [0.5, -1.0]];
        let f_v = array![0.3, 0.9];
        let m = 2;
        let logits_small = rows.dot(&f_v) / (m as f64).sqrt();

        let padded_rows = array![[1.0, 2.0, 0.0, 0.0], [0.5, -1.0, 0.0, 0.0]];
        let padded_f_v = array![0.3, 0.9, 0.0, 0.0];
        let logits_big = padded_rows.dot(&padded_f_v) / (2.0 * m as f64).sqrt();

        let factor = (m as f64 / (2.0 * m as f64)).sqrt();
        for (big, small) in logits_big.iter().zip(logits_small.iter()) {
            assert!((big - small * factor).abs() < 1e-12);
        }

        let got = filter_attention(&token(padded_rows), &padded_f_v).unwrap();
        let expect = softmax(&logits_big);
        for (x, y) in got.iter().zip(expect.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn compose_prompt_orders_rows() {
        let ep = array![1.0, 0.0];
        let dp = array![0.0, 1.0];
        let ctx = array![[2.0, 2.0], [3.0, 3.0]];
        let cls = array![4.0, 4.0];
        let p = compose_prompt(&ep, &dp, &ctx, &cls).unwrap();
        assert_eq!(p.row_count(), 5);
        assert_eq!(p.rows().row(0).to_owned(), ep);
        assert_eq!(p.rows().row(1).to_owned(), dp);
        assert_eq!(p.rows().row(2).to_owned(), array![2.0, 2.0]);
        assert_eq!(p.rows().row(4).to_owned(), cls);

        let shorter = compose_prompt(&ep, &dp, &array![[9.0, 9.0]], &cls).unwrap();
        assert_eq!(shorter.row_count(), 4);

        let swapped = compose_prompt(&dp, &ep, &ctx, &cls).unwrap();
        assert_eq!(swapped.rows().row(0).to_owned(), dp);
        assert_eq!(swapped.rows().row(1).to_owned(), ep);
        assert_eq!(
            swapped.rows().slice(ndarray::s![2.., ..]),
            p.rows().slice(ndarray::s![2.., ..])
        );
    }

    #[test]
    fn encode_text_normalizes_the_mean() {
        let p = compose_prompt(
            &array![1.0, 0.0],
            &array![0.0, 1.0],
            &array![[1.0, 0.0]],
            &array![0.0, 1.0],
        )
        .unwrap();
        let f_t = encode_text(&p, &MeanTextEncoder).unwrap();
        let inv_sqrt2 = 1.0 / 2.0_f64.sqrt();
        assert!((f_t[0] - inv_sqrt2).abs() < 1e-12);
        assert!((f_t[1] - inv_sqrt2).abs() < 1e-12);
    }

    #[test]
    fn encode_text_rejects_zero_prompts() {
        let p = compose_prompt(
            &array![0.0, 0.0],
            &array![0.0, 0.0],
            &array![[0.0, 0.0]],
            &array![0.0, 0.0],
        )
        .unwrap();
        let err = encode_text(&p, &MeanTextEncoder).unwrap_err();
        assert!(matches!(err, Error::EncoderFailure(_)), "got {err:?}");
    }

    proptest! {
        #[test]
        fn attention_weights_form_a_distribution(
            rows in proptest::collection::vec(
                proptest::collection::vec(-5.0..5.0_f64, 4), 1..12),
            query in proptest::collection::vec(-5.0..5.0_f64, 4),
        ) {
            let n = rows.len();
            let flat: Vec<f64> = rows.into_iter().flatten().collect();
            let t = token(Array2::from_shape_vec((n, 4), flat).unwrap());
            let f_v = Array1::from_vec(query);
            let weights = filter_attention(&t, &f_v).unwrap();
            prop_assert!((weights.sum() - 1.0).abs() < 1e-6);
            prop_assert!(weights.iter().all(|&w| (0.0..=1.0).contains(&w)));
        }

        #[test]
        fn unit_norm_contract_holds(
            seed in 0u64..1000,
        ) {
            use rand::Rng;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ep = Array1::from_shape_fn(6, |_| rng.random_range(-1.0..1.0));
            let dp = Array1::from_shape_fn(6, |_| rng.random_range(-1.0..1.0));
            let ctx = Array2::from_shape_fn((2, 6), |_| rng.random_range(-1.0..1.0));
            let cls = Array1::from_shape_fn(6, |_| rng.random_range(-1.0..1.0));
            let p = compose_prompt(&ep, &dp, &ctx, &cls).unwrap();
            let f_t = encode_text(&p, &MeanTextEncoder).unwrap();
            prop_assert!((f_t.dot(&f_t).sqrt() - 1.0).abs() < 1e-6);
        }
    }
}
