//! Loss mathematics: patch-prompt similarity, the category-irrelevant patch
//! set, the entropy regularizer, the discriminant loss and their composition.

use ndarray::{Array1, Array2, Axis};

use crate::error::{Error, Result};
use crate::filter::softmax;

/// Floor applied to probabilities before logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

/// Cosine similarity; zero-norm vectors have cosine 0 with everything.
pub fn cosine(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    let na = a.dot(a).sqrt();
    let nb = b.dot(b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.dot(b) / (na * nb)
}

/// Per-patch class similarity distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    /// J x K matrix; row j is the class distribution of patch j.
    values: Array2<f64>,
    temperature: f64,
}

impl SimilarityMatrix {
    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn patch_count(&self) -> usize {
        self.values.nrows()
    }

    pub fn class_count(&self) -> usize {
        self.values.ncols()
    }
}

fn check_temperature(tau: f64) -> Result<()> {
    if tau.is_nan() || tau <= 0.0 {
        return Err(Error::NonPositiveTemperature(tau));
    }
    Ok(())
}

/// Softmax over classes of the temperature-scaled patch-prompt cosines.
pub fn patch_similarity(
    patch_features: &Array2<f64>,
    text_features: &[Array1<f64>],
    tau: f64,
) -> Result<SimilarityMatrix> {
    check_temperature(tau)?;
    let j = patch_features.nrows();
    let k = text_features.len();
    let mut values = Array2::zeros((j, k));
    for (row, patch) in patch_features.axis_iter(Axis(0)).enumerate() {
        let patch = patch.to_owned();
        let logits = Array1::from_iter(text_features.iter().map(|f_t| cosine(&patch, f_t) / tau));
        values
            .index_axis_mut(Axis(0), row)
            .assign(&softmax(&logits));
    }
    Ok(SimilarityMatrix {
        values,
        temperature: tau,
    })
}

/// Patches whose most similar prompt is not the ground-truth class.
///
/// A tie that includes the ground-truth class counts as relevant: a patch
/// lands in the set only when it strictly prefers a wrong class.
pub fn irrelevant_set(s: &SimilarityMatrix, y: usize) -> Vec<usize> {
    let mut omega = Vec::new();
    for (j, row) in s.values.axis_iter(Axis(0)).enumerate() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if row[y] < max {
            omega.push(j);
        }
    }
    omega
}

/// Negative entropy summed over the irrelevant patches.
pub fn sce_loss(s: &SimilarityMatrix, omega: &[usize]) -> f64 {
    omega
        .iter()
        .map(|&j| {
            s.values
                .row(j)
                .iter()
                .map(|&p| p.max(PROB_FLOOR).ln() * p)
                .sum::<f64>()
        })
        .sum()
}

/// Gradient of one row's negative-entropy term with respect to the row.
pub fn sce_row_grad(row: &Array1<f64>) -> Array1<f64> {
    row.mapv(|p| {
        if p >= PROB_FLOOR {
            p.ln() + 1.0
        } else {
            PROB_FLOOR.ln()
        }
    })
}

/// Class distribution of the whole image against the K class prompts.
pub fn class_probs(
    f_v: &Array1<f64>,
    text_features: &[Array1<f64>],
    tau: f64,
) -> Result<Array1<f64>> {
    check_temperature(tau)?;
    let logits = Array1::from_iter(text_features.iter().map(|f_t| cosine(f_v, f_t) / tau));
    Ok(softmax(&logits))
}

/// Cross-entropy of the class distribution against the true class.
pub fn srd_loss(d: &Array1<f64>, y: usize) -> f64 {
    -d[y].max(PROB_FLOOR).ln()
}

/// Gradient of [`srd_loss`] with respect to d.
pub fn srd_grad_wrt_d(d: &Array1<f64>, y: usize) -> Array1<f64> {
    let mut grad = Array1::zeros(d.len());
    if d[y] >= PROB_FLOOR {
        grad[y] = -1.0 / d[y];
    }
    grad
}

/// The combined objective.
pub fn total_loss(srd: f64, sce: f64, lambda: f64) -> f64 {
    srd + lambda * sce
}

/// Per-sample loss terms and the diagnostics behind them.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub srd: f64,
    pub sce: f64,
    pub total: f64,
    pub omega: Vec<usize>,
    pub class_probs: Array1<f64>,
}

/// Evaluates every loss term for one sample's features.
pub fn loss_breakdown(
    f_v: &Array1<f64>,
    patch_features: &Array2<f64>,
    text_features: &[Array1<f64>],
    y: usize,
    tau: f64,
    lambda: f64,
) -> Result<LossBreakdown> {
    let d = class_probs(f_v, text_features, tau)?;
    let s = patch_similarity(patch_features, text_features, tau)?;
    let omega = irrelevant_set(&s, y);
    let srd = srd_loss(&d, y);
    let sce = sce_loss(&s, &omega);
    Ok(LossBreakdown {
        srd,
        sce,
        total: total_loss(srd, sce, lambda),
        omega,
        class_probs: d,
    })
}
