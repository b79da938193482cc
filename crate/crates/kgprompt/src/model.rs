//! The trainable detector: per-class prompt bundles, the adaptation layer
//! and two knowledge filters, with exact analytic gradients of the training
//! objective.
//!
//! The text path is the linear mean encoder, so every gradient below is
//! exact; the vision backbone is frozen and receives none.

use ndarray::{Array1, Array2, Axis};

use crate::describe::{DescriptionCache, TripleDescription};
use crate::embed::{EmbeddingProvider, HashEmbedder};
use crate::encoder::EncoderOutput;
use crate::error::{Error, Result};
use crate::filter::{softmax, AdaptationLayer, KnowledgeFilter};
use crate::kg::KnowledgeGraph;
use crate::objectives::{
    irrelevant_set, patch_similarity, sce_loss, sce_row_grad, srd_grad_wrt_d, srd_loss, total_loss,
    SimilarityMatrix, PROB_FLOOR,
};
use crate::prompt::{build_bundles, PromptBundle};

const ADAPT_SEED_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

/// Full parameter set of the detector.
///
/// Trainable: per-class contexts, the adaptation layer, both filter
/// projections. Frozen: entity rows, description rows, class embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub bundles: Vec<PromptBundle>,
    pub adapt: AdaptationLayer,
    pub filter_entity: KnowledgeFilter,
    pub filter_description: KnowledgeFilter,
    pub tau: f64,
    pub lambda: f64,
}

impl ModelState {
    /// Builds a fresh model over the graph with seeded initialization.
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        graph: &KnowledgeGraph,
        descriptions: &[TripleDescription],
        table: &dyn EmbeddingProvider,
        context_length: usize,
        m_enc: usize,
        m_hid: usize,
        seed: u64,
        tau: f64,
        lambda: f64,
    ) -> Result<Self> {
        if tau.is_nan() || tau <= 0.0 {
            return Err(Error::NonPositiveTemperature(tau));
        }
        if lambda < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "lambda must be >= 0, got {lambda}"
            )));
        }
        let bundles = build_bundles(graph, descriptions, table, context_length, seed)?;
        let m = table.width();
        Ok(ModelState {
            bundles,
            adapt: AdaptationLayer::init(m_enc, m_hid, m, seed ^ ADAPT_SEED_SALT),
            filter_entity: KnowledgeFilter::identity(m),
            filter_description: KnowledgeFilter::identity(m),
            tau,
            lambda,
        })
    }

    pub fn class_count(&self) -> usize {
        self.bundles.len()
    }

    /// Embedding width m.
    pub fn width(&self) -> usize {
        self.filter_entity.width()
    }

    /// Index of a category name among the model's classes.
    pub fn class_index(&self, category: &str) -> Option<usize> {
        self.bundles.iter().position(|b| b.category == category)
    }
}

/// Model dimensions and loss settings, enough to build a fresh seeded model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelSpec {
    pub embedding_width: usize,
    pub feature_width: usize,
    pub hidden_width: usize,
    pub context_length: usize,
    pub tau: f64,
    pub lambda: f64,
}

impl ModelSpec {
    /// Builds a fresh model over the graph and its description cache.
    pub fn build(
        &self,
        graph: &KnowledgeGraph,
        cache: &DescriptionCache,
        seed: u64,
    ) -> Result<ModelState> {
        let descriptions: Vec<TripleDescription> = graph
            .triples()
            .iter()
            .map(|t| {
                cache.get(&t.key()).ok_or_else(|| {
                    Error::DanglingReference(format!("no description for triple `{}`", t.key()))
                })
            })
            .collect::<Result<_>>()?;
        let table = HashEmbedder::new(self.embedding_width, seed);
        ModelState::init(
            graph,
            &descriptions,
            &table,
            self.context_length,
            self.feature_width,
            self.hidden_width,
            seed,
            self.tau,
            self.lambda,
        )
    }
}

struct AdaptTrace {
    pre: Array1<f64>,
    act: Array1<f64>,
    out: Array1<f64>,
}

fn adapt_forward(layer: &AdaptationLayer, x: &Array1<f64>) -> Result<AdaptTrace> {
    if x.len() != layer.input_width() {
        return Err(Error::DimensionMismatch(format!(
            "adaptation input has width {}, layer expects {}",
            x.len(),
            layer.input_width()
        )));
    }
    let pre = layer.w1.dot(x) + &layer.b1;
    let act = pre.mapv(|h| h.max(0.0));
    let out = layer.w2.dot(&act) + &layer.b2;
    Ok(AdaptTrace { pre, act, out })
}

struct ClassTrace {
    att_entity: Array1<f64>,
    pooled_entity: Array1<f64>,
    att_description: Array1<f64>,
    pooled_description: Array1<f64>,
    mean_norm: f64,
    text_feature: Array1<f64>,
}

/// Everything the backward pass needs from one sample's forward pass.
pub struct ForwardTrace {
    global: AdaptTrace,
    patches: Vec<AdaptTrace>,
    classes: Vec<ClassTrace>,
    /// Unit text features f_t per class.
    pub text_features: Vec<Array1<f64>>,
    /// Class distribution d of the whole image.
    pub class_probs: Array1<f64>,
    /// Patch-class similarity rows s_j.
    pub similarity: SimilarityMatrix,
    /// Category-irrelevant patch indices at the current parameters.
    pub omega: Vec<usize>,
    pub srd: f64,
    pub sce: f64,
    pub total: f64,
}

/// Gradients (or momentum buffers) for every trainable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub contexts: Vec<Array2<f64>>,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub psi_entity: Array2<f64>,
    pub bias_entity: Array1<f64>,
    pub psi_description: Array2<f64>,
    pub bias_description: Array1<f64>,
}

impl ModelGrads {
    pub fn zeros_like(state: &ModelState) -> Self {
        ModelGrads {
            contexts: state
                .bundles
                .iter()
                .map(|b| Array2::zeros(b.context.dim()))
                .collect(),
            w1: Array2::zeros(state.adapt.w1.dim()),
            b1: Array1::zeros(state.adapt.b1.len()),
            w2: Array2::zeros(state.adapt.w2.dim()),
            b2: Array1::zeros(state.adapt.b2.len()),
            psi_entity: Array2::zeros(state.filter_entity.psi.dim()),
            bias_entity: Array1::zeros(state.filter_entity.bias.len()),
            psi_description: Array2::zeros(state.filter_description.psi.dim()),
            bias_description: Array1::zeros(state.filter_description.bias.len()),
        }
    }

    pub fn add_assign(&mut self, other: &ModelGrads) {
        for (a, b) in self.contexts.iter_mut().zip(&other.contexts) {
            *a += b;
        }
        self.w1 += &other.w1;
        self.b1 += &other.b1;
        self.w2 += &other.w2;
        self.b2 += &other.b2;
        self.psi_entity += &other.psi_entity;
        self.bias_entity += &other.bias_entity;
        self.psi_description += &other.psi_description;
        self.bias_description += &other.bias_description;
    }

    pub fn scale(&mut self, factor: f64) {
        for ctx in &mut self.contexts {
            *ctx *= factor;
        }
        self.w1 *= factor;
        self.b1 *= factor;
        self.w2 *= factor;
        self.b2 *= factor;
        self.psi_entity *= factor;
        self.bias_entity *= factor;
        self.psi_description *= factor;
        self.bias_description *= factor;
    }

    pub fn is_finite(&self) -> bool {
        self.contexts
            .iter()
            .all(|c| c.iter().all(|v| v.is_finite()))
            && self.w1.iter().all(|v| v.is_finite())
            && self.b1.iter().all(|v| v.is_finite())
            && self.w2.iter().all(|v| v.is_finite())
            && self.b2.iter().all(|v| v.is_finite())
            && self.psi_entity.iter().all(|v| v.is_finite())
            && self.bias_entity.iter().all(|v| v.is_finite())
            && self.psi_description.iter().all(|v| v.is_finite())
            && self.bias_description.iter().all(|v| v.is_finite())
    }
}

fn softmax_vjp(probs: &Array1<f64>, upstream: &Array1<f64>) -> Array1<f64> {
    let dot = upstream.dot(probs);
    probs * &(upstream - dot)
}

fn cosine_with_trace(a: &Array1<f64>, b_unit: &Array1<f64>) -> (f64, f64) {
    let norm = a.dot(a).sqrt();
    if norm == 0.0 {
        (0.0, 0.0)
    } else {
        (a.dot(b_unit) / norm, norm)
    }
}

impl ModelState {
    fn class_forward(&self, f_v: &Array1<f64>, bundle: &PromptBundle) -> Result<ClassTrace> {
        let m = self.width() as f64;
        let scale = m.sqrt();

        let e_rows = bundle.entity_prompt.rows();
        let att_entity = softmax(&(e_rows.dot(f_v) / scale));
        let pooled_entity = e_rows.t().dot(&att_entity);
        let fe = self.filter_entity.psi.dot(&pooled_entity) + &self.filter_entity.bias;

        let d_rows = bundle.description_prompt.rows();
        let att_description = softmax(&(d_rows.dot(f_v) / scale));
        let pooled_description = d_rows.t().dot(&att_description);
        let fd =
            self.filter_description.psi.dot(&pooled_description) + &self.filter_description.bias;

        let row_count = (2 + bundle.context.nrows() + 1) as f64;
        let mut mean = fe + fd + &bundle.class_embedding;
        mean += &bundle.context.sum_axis(Axis(0));
        mean /= row_count;

        let mean_norm = mean.dot(&mean).sqrt();
        if !mean_norm.is_finite() || mean_norm == 0.0 {
            return Err(Error::EncoderFailure(format!(
                "text feature norm is {mean_norm} for class `{}`",
                bundle.category
            )));
        }
        let text_feature = mean / mean_norm;
        Ok(ClassTrace {
            att_entity,
            pooled_entity,
            att_description,
            pooled_description,
            mean_norm,
            text_feature,
        })
    }

    /// Runs the full forward pass for one sample.
    pub fn forward(&self, features: &EncoderOutput, y: usize) -> Result<ForwardTrace> {
        if y >= self.class_count() {
            return Err(Error::InvalidConfig(format!(
                "label {y} out of range for {} classes",
                self.class_count()
            )));
        }
        let global = adapt_forward(&self.adapt, &features.global)?;
        let patches: Vec<AdaptTrace> = features
            .patches
            .axis_iter(Axis(0))
            .map(|row| adapt_forward(&self.adapt, &row.to_owned()))
            .collect::<Result<_>>()?;

        let classes: Vec<ClassTrace> = self
            .bundles
            .iter()
            .map(|bundle| self.class_forward(&global.out, bundle))
            .collect::<Result<_>>()?;
        let text_features: Vec<Array1<f64>> =
            classes.iter().map(|c| c.text_feature.clone()).collect();

        let logits = Array1::from_iter(
            text_features
                .iter()
                .map(|f_t| cosine_with_trace(&global.out, f_t).0 / self.tau),
        );
        let class_probs = softmax(&logits);

        let mut patch_matrix = Array2::zeros((patches.len(), self.width()));
        for (j, patch) in patches.iter().enumerate() {
            patch_matrix.index_axis_mut(Axis(0), j).assign(&patch.out);
        }
        let similarity = patch_similarity(&patch_matrix, &text_features, self.tau)?;
        let omega = irrelevant_set(&similarity, y);

        let srd = srd_loss(&class_probs, y);
        let sce = sce_loss(&similarity, &omega);
        let total = total_loss(srd, sce, self.lambda);
        if !total.is_finite() {
            return Err(Error::NonFiniteGradient("forward loss".into()));
        }
        Ok(ForwardTrace {
            global,
            patches,
            classes,
            text_features,
            class_probs,
            similarity,
            omega,
            srd,
            sce,
            total,
        })
    }

    /// Total loss with the irrelevant set held fixed.
    ///
    /// This is the function the analytic gradients differentiate: patch
    /// selection is non-differentiable and treated as a constant per step.
    pub fn loss_with_omega(
        &self,
        features: &EncoderOutput,
        y: usize,
        omega: &[usize],
    ) -> Result<f64> {
        let trace = self.forward(features, y)?;
        let srd = trace.srd;
        let sce = sce_loss(&trace.similarity, omega);
        Ok(total_loss(srd, sce, self.lambda))
    }

    /// Analytic gradients of the frozen-omega objective at `trace`.
    pub fn backward(
        &self,
        features: &EncoderOutput,
        y: usize,
        trace: &ForwardTrace,
    ) -> Result<ModelGrads> {
        let mut grads = ModelGrads::zeros_like(self);
        let m_scale = (self.width() as f64).sqrt();
        let k_count = self.class_count();

        let mut g_text: Vec<Array1<f64>> = vec![Array1::zeros(self.width()); k_count];
        let mut g_fv: Array1<f64> = Array1::zeros(self.width());

        let f_v = &trace.global.out;
        let (_, fv_norm) = cosine_with_trace(f_v, &trace.text_features[0]);
        let fv_unit = if fv_norm > 0.0 {
            f_v / fv_norm
        } else {
            Array1::zeros(f_v.len())
        };

        let g_d = srd_grad_wrt_d(&trace.class_probs, y);
        let g_logits = softmax_vjp(&trace.class_probs, &g_d) / self.tau;
        if fv_norm > 0.0 {
            for (k, f_t) in trace.text_features.iter().enumerate() {
                let cos_k = fv_unit.dot(f_t);
                g_fv += &((f_t - &(cos_k * &fv_unit)) * (g_logits[k] / fv_norm));
                g_text[k] += &((&fv_unit - &(cos_k * f_t)) * g_logits[k]);
            }
        }

        let mut g_patch_out: Vec<Option<Array1<f64>>> = vec![None; trace.patches.len()];
        for &j in &trace.omega {
            let s_row = trace.similarity.values().row(j).to_owned();
            let g_row = sce_row_grad(&s_row) * self.lambda;
            let g_logits_j = softmax_vjp(&s_row, &g_row) / self.tau;
            let patch = &trace.patches[j].out;
            let norm_j = patch.dot(patch).sqrt();
            if norm_j == 0.0 {
                continue;
            }
            let patch_unit = patch / norm_j;
            let mut g_pj = Array1::zeros(self.width());
            for (k, f_t) in trace.text_features.iter().enumerate() {
                let cos_jk = patch_unit.dot(f_t);
                g_pj += &((f_t - &(cos_jk * &patch_unit)) * (g_logits_j[k] / norm_j));
                g_text[k] += &((&patch_unit - &(cos_jk * f_t)) * g_logits_j[k]);
            }
            g_patch_out[j] = Some(g_pj);
        }

        for (k, bundle) in self.bundles.iter().enumerate() {
            let class = &trace.classes[k];
            let f_t = &trace.text_features[k];
            let g_ft = &g_text[k];

            let g_mean = (g_ft - &((g_ft.dot(f_t)) * f_t)) / class.mean_norm;
            let row_count = (2 + bundle.context.nrows() + 1) as f64;
            let g_row = g_mean / row_count;

            grads.psi_entity += &outer(&g_row, &class.pooled_entity);
            grads.bias_entity += &g_row;
            let g_pooled_e = self.filter_entity.psi.t().dot(&g_row);
            let e_rows = bundle.entity_prompt.rows();
            let g_att_e = e_rows.dot(&g_pooled_e);
            let g_zatt_e = softmax_vjp(&class.att_entity, &g_att_e);
            g_fv += &(e_rows.t().dot(&g_zatt_e) / m_scale);

            grads.psi_description += &outer(&g_row, &class.pooled_description);
            grads.bias_description += &g_row;
            let g_pooled_d = self.filter_description.psi.t().dot(&g_row);
            let d_rows = bundle.description_prompt.rows();
            let g_att_d = d_rows.dot(&g_pooled_d);
            let g_zatt_d = softmax_vjp(&class.att_description, &g_att_d);
            g_fv += &(d_rows.t().dot(&g_zatt_d) / m_scale);

            for mut ctx_row in grads.contexts[k].axis_iter_mut(Axis(0)) {
                ctx_row += &g_row;
            }
        }

        accumulate_adapt(
            &mut grads,
            &self.adapt,
            &features.global.to_owned(),
            &trace.global,
            &g_fv,
        );
        for (j, g_out) in g_patch_out.iter().enumerate() {
            if let Some(g_out) = g_out {
                let x = features.patches.row(j).to_owned();
                accumulate_adapt(&mut grads, &self.adapt, &x, &trace.patches[j], g_out);
            }
        }

        if !grads.is_finite() {
            return Err(Error::NonFiniteGradient("model backward".into()));
        }
        Ok(grads)
    }

    /// Mean loss terms and gradients over a batch of encoded samples.
    pub fn batch_gradients(
        &self,
        batch: &[(&EncoderOutput, usize)],
    ) -> Result<(ModelGrads, BatchStats)> {
        assert!(!batch.is_empty(), "batch must be non-empty");
        let mut grads = ModelGrads::zeros_like(self);
        let mut stats = BatchStats::default();
        for &(features, y) in batch {
            let trace = self.forward(features, y)?;
            let sample = self.backward(features, y, &trace)?;
            grads.add_assign(&sample);
            stats.srd += trace.srd;
            stats.sce += trace.sce;
            stats.total += trace.total;
        }
        let inv = 1.0 / batch.len() as f64;
        grads.scale(inv);
        stats.srd *= inv;
        stats.sce *= inv;
        stats.total *= inv;
        Ok((grads, stats))
    }

    /// Class distribution for a scored sample.
    pub fn score(&self, features: &EncoderOutput) -> Result<Array1<f64>> {
        let trace = self.forward(features, 0)?;
        Ok(trace.class_probs)
    }
}

/// Mean loss terms of one batch (or epoch).
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct BatchStats {
    pub srd: f64,
    pub sce: f64,
    pub total: f64,
}

fn outer(a: &Array1<f64>, b: &Array1<f64>) -> Array2<f64> {
    let mut out = Array2::zeros((a.len(), b.len()));
    for (i, &ai) in a.iter().enumerate() {
        for (j, &bj) in b.iter().enumerate() {
            out[[i, j]] = ai * bj;
        }
    }
    out
}

fn accumulate_adapt(
    grads: &mut ModelGrads,
    layer: &AdaptationLayer,
    x: &Array1<f64>,
    trace: &AdaptTrace,
    g_out: &Array1<f64>,
) {
    grads.w2 += &outer(g_out, &trace.act);
    grads.b2 += g_out;
    let g_act = layer.w2.t().dot(g_out);
    let g_pre =
        Array1::from_iter(
            g_act
                .iter()
                .zip(trace.pre.iter())
                .map(|(&g, &h)| if h > 0.0 { g } else { 0.0 }),
        );
    grads.w1 += &outer(&g_pre, x);
    grads.b1 += &g_pre;
}

/// Guards against a saturated clamp producing a spurious finite-difference
/// mismatch: true when the sample's probabilities are clear of the floor.
pub fn clear_of_prob_floor(trace: &ForwardTrace) -> bool {
    trace.class_probs.iter().all(|&p| p > PROB_FLOOR * 10.0)
        && trace
            .similarity
            .values()
            .iter()
            .all(|&p| p > PROB_FLOOR * 10.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::HashEmbedder;
    use crate::fixtures::{maskpad_descriptions, maskpad_kg};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_model(seed: u64, tau: f64, lambda: f64) -> ModelState {
        let graph = maskpad_kg();
        let cache = maskpad_descriptions();
        let descriptions: Vec<_> = graph
            .triples()
            .iter()
            .map(|t| cache.get(&t.key()).unwrap())
            .collect();
        let table = HashEmbedder::new(6, seed);
        ModelState::init(&graph, &descriptions, &table, 2, 5, 4, seed, tau, lambda).unwrap()
    }

    fn random_features(seed: u64, j: usize, m_enc: usize) -> EncoderOutput {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let patches = Array2::from_shape_fn((j, m_enc), |_| rng.random_range(-1.0..1.0));
        let global = patches.mean_axis(Axis(0)).unwrap();
        EncoderOutput { global, patches }
    }

    #[test]
    fn forward_produces_consistent_probabilities() {
        let model = tiny_model(3, 0.5, 0.5);
        let features = random_features(10, 4, 5);
        let trace = model.forward(&features, 0).unwrap();
        assert!((trace.class_probs.sum() - 1.0).abs() < 1e-9);
        assert_eq!(trace.text_features.len(), 2);
        for f_t in &trace.text_features {
            assert!((f_t.dot(f_t).sqrt() - 1.0).abs() < 1e-9);
        }
        assert_eq!(trace.total, trace.srd + 0.5 * trace.sce);
    }

    #[test]
    fn forward_rejects_out_of_range_label() {
        let model = tiny_model(3, 0.5, 0.5);
        let features = random_features(10, 4, 5);
        assert!(model.forward(&features, 2).is_err());
    }

    fn flatten_params(state: &ModelState) -> Vec<f64> {
        let mut out = Vec::new();
        for b in &state.bundles {
            out.extend(b.context.iter());
        }
        out.extend(state.adapt.w1.iter());
        out.extend(state.adapt.b1.iter());
        out.extend(state.adapt.w2.iter());
        out.extend(state.adapt.b2.iter());
        out.extend(state.filter_entity.psi.iter());
        out.extend(state.filter_entity.bias.iter());
        out.extend(state.filter_description.psi.iter());
        out.extend(state.filter_description.bias.iter());
        out
    }

    fn write_params(state: &mut ModelState, values: &[f64]) {
        let mut it = values.iter().copied();
        for b in &mut state.bundles {
            for v in b.context.iter_mut() {
                *v = it.next().unwrap();
            }
        }
        for v in state
            .adapt
            .w1
            .iter_mut()
            .chain(state.adapt.b1.iter_mut())
            .chain(state.adapt.w2.iter_mut())
            .chain(state.adapt.b2.iter_mut())
            .chain(state.filter_entity.psi.iter_mut())
            .chain(state.filter_entity.bias.iter_mut())
            .chain(state.filter_description.psi.iter_mut())
            .chain(state.filter_description.bias.iter_mut())
        {
            *v = it.next().unwrap();
        }
        assert!(it.next().is_none());
    }

    fn flatten_grads(grads: &ModelGrads) -> Vec<f64> {
        let mut out = Vec::new();
        for c in &grads.contexts {
            out.extend(c.iter());
        }
        out.extend(grads.w1.iter());
        out.extend(grads.b1.iter());
        out.extend(grads.w2.iter());
        out.extend(grads.b2.iter());
        out.extend(grads.psi_entity.iter());
        out.extend(grads.bias_entity.iter());
        out.extend(grads.psi_description.iter());
        out.extend(grads.bias_description.iter());
        out
    }

    /// Central finite differences of the frozen-omega loss over every
    /// trainable scalar.
    fn finite_difference_grads(
        state: &ModelState,
        features: &EncoderOutput,
        y: usize,
        omega: &[usize],
        step: f64,
    ) -> Vec<f64> {
        let base = flatten_params(state);
        let mut grads = Vec::with_capacity(base.len());
        let mut probe = state.clone();
        for i in 0..base.len() {
            let mut plus = base.clone();
            plus[i] += step;
            write_params(&mut probe, &plus);
            let loss_plus = probe.loss_with_omega(features, y, omega).unwrap();
            let mut minus = base.clone();
            minus[i] -= step;
            write_params(&mut probe, &minus);
            let loss_minus = probe.loss_with_omega(features, y, omega).unwrap();
            grads.push((loss_plus - loss_minus) / (2.0 * step));
        }
        grads
    }

    fn relative_error(a: &[f64], b: &[f64]) -> f64 {
        let diff: f64 = a
            .iter()
            .zip(b)
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            .sqrt();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        diff / na.max(nb).max(1e-8)
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        for seed in 0..5u64 {
            let model = tiny_model(seed, 0.5, 0.5);
            let features = random_features(100 + seed, 4, 5);
            let y = (seed % 2) as usize;
            let trace = model.forward(&features, y).unwrap();
            let analytic = flatten_grads(&model.backward(&features, y, &trace).unwrap());
            let fd = finite_difference_grads(&model, &features, y, &trace.omega, 1e-5);
            let err = relative_error(&analytic, &fd);
            assert!(err <= 1e-4, "seed {seed}: relative error {err}");
        }
    }

    #[test]
    fn gradient_near_zero_at_saturated_minimum() {
        let mut model = tiny_model(1, 1.0, 0.0);
        model.lambda = 0.0;
        let features = random_features(11, 3, 5);
        let y = 0;
        let trace = model.forward(&features, y).unwrap();
        if trace.class_probs[y] > 1.0 - 1e-12 {
            let grads = model.backward(&features, y, &trace).unwrap();
            let norm: f64 = flatten_grads(&grads)
                .iter()
                .map(|g| g * g)
                .sum::<f64>()
                .sqrt();
            assert!(norm < 1e-6);
        }
    }

    #[test]
    fn batch_gradients_average_sample_gradients() {
        let model = tiny_model(2, 0.5, 0.5);
        let fa = random_features(20, 4, 5);
        let fb = random_features(21, 4, 5);
        let (batch, stats) = model.batch_gradients(&[(&fa, 0), (&fb, 1)]).unwrap();

        let ta = model.forward(&fa, 0).unwrap();
        let tb = model.forward(&fb, 1).unwrap();
        let ga = model.backward(&fa, 0, &ta).unwrap();
        let gb = model.backward(&fb, 1, &tb).unwrap();
        let mut expect = ModelGrads::zeros_like(&model);
        expect.add_assign(&ga);
        expect.add_assign(&gb);
        expect.scale(0.5);

        let flat_batch = flatten_grads(&batch);
        let flat_expect = flatten_grads(&expect);
        for (a, b) in flat_batch.iter().zip(flat_expect.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((stats.total - (ta.total + tb.total) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn score_is_deterministic_and_stochastic() {
        let model = tiny_model(5, 0.5, 0.5);
        let features = random_features(30, 4, 5);
        let a = model.score(&features).unwrap();
        let b = model.score(&features).unwrap();
        assert_eq!(a, b);
        assert!((a.sum() - 1.0).abs() < 1e-9);
    }
}
