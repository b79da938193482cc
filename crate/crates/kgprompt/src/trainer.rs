//! The training loop: momentum SGD with weight decay on a cosine learning
//! rate schedule, seeded shuffling, and self-contained model checkpoints.

use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::describe::DescriptionCache;
use crate::embed::HashEmbedder;
use crate::encoder::{EncoderBackend, EncoderOutput};
use crate::error::{Error, Result};
use crate::filter::{AdaptationLayer, KnowledgeFilter};
use crate::kg::{parse_kg, serialize_kg, KnowledgeGraph};
use crate::model::{BatchStats, ModelGrads, ModelSpec, ModelState};

const SHUFFLE_SALT: u64 = 0x5851_f42d_4c95_7f2d;

/// Optimizer settings; the defaults are the reference configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.001,
            momentum: 0.9,
            weight_decay: 0.0005,
            batch_size: 128,
            epochs: 30,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 || !self.learning_rate.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "learning_rate must be positive and finite, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.weight_decay < 0.0 || !self.weight_decay.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "weight_decay must be non-negative and finite, got {}",
                self.weight_decay
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

/// One encoded training example.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub features: EncoderOutput,
    pub label: usize,
}

/// Mean loss terms over one epoch, for the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub srd: f64,
    pub sce: f64,
    pub total: f64,
}

/// Cosine-annealed learning rate at step `t` of `total`.
///
/// Starts at `lr0`, halves at the midpoint, reaches zero at `total`.
pub fn cosine_lr(t: usize, total: usize, lr0: f64) -> f64 {
    assert!(t <= total, "step {t} past schedule end {total}");
    if total == 0 {
        return lr0;
    }
    lr0 * 0.5 * (1.0 + (std::f64::consts::PI * t as f64 / total as f64).cos())
}

/// One momentum-SGD update of a single parameter; returns the new
/// (parameter, velocity) pair.
pub fn sgd_step(
    theta: f64,
    grad: f64,
    velocity: f64,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> (f64, f64) {
    let v = momentum * velocity - lr * (grad + weight_decay * theta);
    (theta + v, v)
}

fn update_tensor<D: ndarray::Dimension>(
    name: &str,
    theta: &mut ndarray::Array<f64, D>,
    grad: &ndarray::Array<f64, D>,
    velocity: &mut ndarray::Array<f64, D>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    for ((t, &g), v) in theta.iter_mut().zip(grad.iter()).zip(velocity.iter_mut()) {
        let (nt, nv) = sgd_step(*t, g, *v, lr, momentum, weight_decay);
        if !nt.is_finite() || !nv.is_finite() {
            return Err(Error::NonFiniteUpdate(name.to_string()));
        }
        *t = nt;
        *v = nv;
    }
    Ok(())
}

/// Applies one optimizer step to every trainable tensor of the model.
pub fn apply_sgd(
    model: &mut ModelState,
    grads: &ModelGrads,
    velocity: &mut ModelGrads,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    for (k, bundle) in model.bundles.iter_mut().enumerate() {
        update_tensor(
            "context",
            &mut bundle.context,
            &grads.contexts[k],
            &mut velocity.contexts[k],
            lr,
            momentum,
            weight_decay,
        )?;
    }
    let a = &mut model.adapt;
    update_tensor(
        "adapt.w1",
        &mut a.w1,
        &grads.w1,
        &mut velocity.w1,
        lr,
        momentum,
        weight_decay,
    )?;
    update_tensor(
        "adapt.b1",
        &mut a.b1,
        &grads.b1,
        &mut velocity.b1,
        lr,
        momentum,
        weight_decay,
    )?;
    update_tensor(
        "adapt.w2",
        &mut a.w2,
        &grads.w2,
        &mut velocity.w2,
        lr,
        momentum,
        weight_decay,
    )?;
    update_tensor(
        "adapt.b2",
        &mut a.b2,
        &grads.b2,
        &mut velocity.b2,
        lr,
        momentum,
        weight_decay,
    )?;
    update_tensor(
        "filter_entity.psi",
        &mut model.filter_entity.psi,
        &grads.psi_entity,
        &mut velocity.psi_entity,
        lr,
        momentum,
        weight_decay,
    )?;
    update_tensor(
        "filter_entity.bias",
        &mut model.filter_entity.bias,
        &grads.bias_entity,
        &mut velocity.bias_entity,
        lr,
        momentum,
        weight_decay,
    )?;
    update_tensor(
        "filter_description.psi",
        &mut model.filter_description.psi,
        &grads.psi_description,
        &mut velocity.psi_description,
        lr,
        momentum,
        weight_decay,
    )?;
    update_tensor(
        "filter_description.bias",
        &mut model.filter_description.bias,
        &grads.bias_description,
        &mut velocity.bias_description,
        lr,
        momentum,
        weight_decay,
    )?;
    Ok(())
}

/// Trains the model in place and returns the per-epoch loss log.
///
/// Zero epochs is a no-op. Shuffling, batching and updates are fully
/// determined by `cfg.seed`.
pub fn fit(
    model: &mut ModelState,
    samples: &[TrainSample],
    cfg: &TrainConfig,
) -> Result<Vec<EpochStats>> {
    cfg.validate()?;
    for (k, bundle) in model.bundles.iter().enumerate() {
        if !samples.iter().any(|s| s.label == k) {
            return Err(Error::EmptyClass(bundle.category.clone()));
        }
    }
    if let Some(bad) = samples.iter().find(|s| s.label >= model.class_count()) {
        return Err(Error::InvalidConfig(format!(
            "label {} out of range for {} classes",
            bad.label,
            model.class_count()
        )));
    }
    if cfg.epochs == 0 {
        return Ok(Vec::new());
    }

    let n = samples.len();
    let batches_per_epoch = n.div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * batches_per_epoch;
    let mut velocity = ModelGrads::zeros_like(model);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ SHUFFLE_SALT);
    let mut order: Vec<usize> = (0..n).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut step = 0;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sums = BatchStats::default();
        for (batch_index, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<(&EncoderOutput, usize)> = chunk
                .iter()
                .map(|&i| (&samples[i].features, samples[i].label))
                .collect();
            let (grads, stats) = model.batch_gradients(&batch)?;
            if !stats.total.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: batch_index,
                });
            }
            let lr = cosine_lr(step, total_steps, cfg.learning_rate);
            apply_sgd(
                model,
                &grads,
                &mut velocity,
                lr,
                cfg.momentum,
                cfg.weight_decay,
            )?;
            step += 1;
            let weight = chunk.len() as f64;
            sums.srd += stats.srd * weight;
            sums.sce += stats.sce * weight;
            sums.total += stats.total * weight;
        }
        let scale = 1.0 / n as f64;
        log.push(EpochStats {
            epoch,
            srd: sums.srd * scale,
            sce: sums.sce * scale,
            total: sums.total * scale,
        });
    }
    Ok(log)
}

/// Current checkpoint schema version.
pub const CHECKPOINT_VERSION: u32 = 1;

/// A self-contained snapshot of a trained model.
///
/// Embeds the graph and description cache it was trained with, so scoring
/// needs no files beyond the checkpoint itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub seed: u64,
    pub embedding_width: usize,
    pub hidden_width: usize,
    pub feature_width: usize,
    pub context_length: usize,
    pub tau: f64,
    pub lambda: f64,
    pub image_size: usize,
    pub backend: EncoderBackend,
    pub train: TrainConfig,
    /// Decision threshold on the genuine-class probability, once calibrated.
    pub threshold: Option<f64>,
    pub graph_json: String,
    pub cache_json: String,
    pub contexts: Vec<Array2<f64>>,
    pub adapt: AdaptationLayer,
    pub filter_entity: KnowledgeFilter,
    pub filter_description: KnowledgeFilter,
}

/// A checkpoint unpacked back into its working parts.
#[derive(Debug)]
pub struct RestoredModel {
    pub graph: KnowledgeGraph,
    pub cache: DescriptionCache,
    pub model: ModelState,
}

impl Checkpoint {
    /// Snapshots a trained model together with its provenance.
    pub fn from_parts(
        model: &ModelState,
        graph: &KnowledgeGraph,
        cache: &DescriptionCache,
        train: &TrainConfig,
        image_size: usize,
        backend: &EncoderBackend,
        threshold: Option<f64>,
    ) -> Self {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            seed: train.seed,
            embedding_width: model.width(),
            hidden_width: model.adapt.w1.nrows(),
            feature_width: model.adapt.input_width(),
            context_length: model.bundles[0].context.nrows(),
            tau: model.tau,
            lambda: model.lambda,
            image_size,
            backend: backend.clone(),
            train: train.clone(),
            threshold,
            graph_json: serialize_kg(graph),
            cache_json: cache.to_json(),
            contexts: model.bundles.iter().map(|b| b.context.clone()).collect(),
            adapt: model.adapt.clone(),
            filter_entity: model.filter_entity.clone(),
            filter_description: model.filter_description.clone(),
        }
    }

    /// The model dimensions this checkpoint was built with.
    pub fn spec(&self) -> ModelSpec {
        ModelSpec {
            embedding_width: self.embedding_width,
            feature_width: self.feature_width,
            hidden_width: self.hidden_width,
            context_length: self.context_length,
            tau: self.tau,
            lambda: self.lambda,
        }
    }

    /// Rebuilds the graph, cache and model the checkpoint describes.
    pub fn restore(&self) -> Result<RestoredModel> {
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::MalformedFile(format!(
                "checkpoint version {} unsupported, expected {CHECKPOINT_VERSION}",
                self.version
            )));
        }
        let graph = parse_kg(self.graph_json.as_bytes())?;
        let cache = DescriptionCache::from_json(&self.cache_json)?;
        let descriptions: Vec<_> = graph
            .triples()
            .iter()
            .map(|t| {
                cache.get(&t.key()).ok_or_else(|| {
                    Error::DanglingReference(format!("no description for triple `{}`", t.key()))
                })
            })
            .collect::<Result<_>>()?;
        let table = HashEmbedder::new(self.embedding_width, self.seed);
        let mut model = ModelState::init(
            &graph,
            &descriptions,
            &table,
            self.context_length,
            self.feature_width,
            self.hidden_width,
            self.seed,
            self.tau,
            self.lambda,
        )?;
        if self.contexts.len() != model.bundles.len() {
            return Err(Error::MalformedFile(format!(
                "checkpoint has {} context matrices for {} classes",
                self.contexts.len(),
                model.bundles.len()
            )));
        }
        for (bundle, ctx) in model.bundles.iter_mut().zip(&self.contexts) {
            if ctx.dim() != bundle.context.dim() {
                return Err(Error::MalformedFile(format!(
                    "context shape {:?} does not match model shape {:?}",
                    ctx.dim(),
                    bundle.context.dim()
                )));
            }
            bundle.context = ctx.clone();
        }
        if self.adapt.input_width() != self.feature_width
            || self.adapt.output_width() != self.embedding_width
            || self.filter_entity.width() != self.embedding_width
            || self.filter_description.width() != self.embedding_width
        {
            return Err(Error::MalformedFile(
                "checkpoint tensor shapes disagree".into(),
            ));
        }
        model.adapt = self.adapt.clone();
        model.filter_entity = self.filter_entity.clone();
        model.filter_description = self.filter_description.clone();
        Ok(RestoredModel {
            graph,
            cache,
            model,
        })
    }

    /// Canonical JSON form: pretty-printed with a trailing newline.
    pub fn to_json(&self) -> String {
        let mut out = serde_json::to_string_pretty(self).expect("checkpoint serializes");
        out.push('\n');
        out
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text)
            .map_err(|e| Error::MalformedFile(format!("checkpoint json: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}
