//! Prompt assembly: per-category entity prompts, description prompts and
//! learnable context matrices.

use ndarray::{Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::describe::TripleDescription;
use crate::embed::{embed_phrase, EmbeddingProvider};
use crate::error::{Error, Result};
use crate::kg::{query_category, KnowledgeGraph};

/// Standard deviation of the Gaussian context initialization.
pub const CONTEXT_INIT_STD: f64 = 0.02;

/// A stack of embedding rows with a tag naming what produced each row.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenEmbedding {
    rows: Array2<f64>,
    unit_meta: Vec<String>,
}

impl TokenEmbedding {
    /// Builds a token embedding from rows and their provenance tags.
    pub fn new(rows: Array2<f64>, unit_meta: Vec<String>) -> Result<Self> {
        if rows.nrows() == 0 || rows.ncols() == 0 {
            return Err(Error::DimensionMismatch(
                "token embedding needs at least one row and one column".into(),
            ));
        }
        if rows.nrows() != unit_meta.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} rows but {} tags",
                rows.nrows(),
                unit_meta.len()
            )));
        }
        Ok(TokenEmbedding { rows, unit_meta })
    }

    pub fn rows(&self) -> &Array2<f64> {
        &self.rows
    }

    pub fn unit_meta(&self) -> &[String] {
        &self.unit_meta
    }

    pub fn row_count(&self) -> usize {
        self.rows.nrows()
    }

    /// Embedding width m.
    pub fn width(&self) -> usize {
        self.rows.ncols()
    }
}

/// Everything prompt-related for one category.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptBundle {
    /// Category name c^k.
    pub category: String,
    /// Entity prompt: class row followed by one row per entity.
    pub entity_prompt: TokenEmbedding,
    /// Description prompt: class row followed by one row per description.
    pub description_prompt: TokenEmbedding,
    /// Learnable context matrix, one row per context token.
    pub context: Array2<f64>,
    /// Frozen embedding of the category name.
    pub class_embedding: Array1<f64>,
}

/// Builds the entity prompt for one category: the class embedding followed by
/// one mean-pooled row per anchored entity, in canonical entity order.
pub fn build_entity_prompt(
    graph: &KnowledgeGraph,
    category: &str,
    table: &dyn EmbeddingProvider,
) -> Result<TokenEmbedding> {
    let (entities, _) = query_category(graph, category)?;
    let mut rows = Vec::with_capacity(entities.len() + 1);
    let mut meta = Vec::with_capacity(entities.len() + 1);
    rows.push(embed_phrase(category, table));
    meta.push(format!("class:{category}"));
    for entity in entities {
        rows.push(embed_phrase(&entity.text, table));
        meta.push(format!("entity:{}", entity.id));
    }
    TokenEmbedding::new(stack_rows(&rows), meta)
}

/// Builds the description prompt for one category: the class embedding
/// followed by one mean-pooled row per description.
pub fn build_description_prompt(
    descriptions: &[TripleDescription],
    category: &str,
    table: &dyn EmbeddingProvider,
) -> Result<TokenEmbedding> {
    for description in descriptions {
        if description.category != category {
            return Err(Error::CategoryMismatch {
                expected: category.to_string(),
                got: description.category.clone(),
            });
        }
    }
    let mut rows = Vec::with_capacity(descriptions.len() + 1);
    let mut meta = Vec::with_capacity(descriptions.len() + 1);
    rows.push(embed_phrase(category, table));
    meta.push(format!("class:{category}"));
    for description in descriptions {
        rows.push(embed_phrase(&description.text, table));
        meta.push(format!("description:{}", description.triple_key));
    }
    TokenEmbedding::new(stack_rows(&rows), meta)
}

fn stack_rows(rows: &[Array1<f64>]) -> Array2<f64> {
    let width = rows[0].len();
    let mut out = Array2::zeros((rows.len(), width));
    for (i, row) in rows.iter().enumerate() {
        out.index_axis_mut(Axis(0), i).assign(row);
    }
    out
}

/// Draws per-class context matrices of shape `l_l x m` from a seeded
/// zero-mean Gaussian with standard deviation [`CONTEXT_INIT_STD`].
pub fn init_context(k: usize, l_l: usize, m: usize, seed: u64) -> Vec<Array2<f64>> {
    assert!(k >= 2, "need at least two classes");
    assert!(l_l >= 1, "context length must be at least 1");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..k)
        .map(|_| {
            Array2::from_shape_fn((l_l, m), |_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * CONTEXT_INIT_STD
            })
        })
        .collect()
}

/// Assembles one [`PromptBundle`] per category, in canonical category order.
///
/// Every category must have a description for each of its triples in
/// `descriptions`; entity and description rows are frozen, contexts are the
/// learnable part.
pub fn build_bundles(
    graph: &KnowledgeGraph,
    descriptions: &[TripleDescription],
    table: &dyn EmbeddingProvider,
    l_l: usize,
    seed: u64,
) -> Result<Vec<PromptBundle>> {
    let contexts = init_context(graph.categories().len(), l_l, table.width(), seed);
    graph
        .categories()
        .iter()
        .zip(contexts)
        .map(|(category, context)| {
            let for_category: Vec<TripleDescription> = descriptions
                .iter()
                .filter(|d| &d.category == category)
                .cloned()
                .collect();
            Ok(PromptBundle {
                category: category.clone(),
                entity_prompt: build_entity_prompt(graph, category, table)?,
                description_prompt: build_description_prompt(&for_category, category, table)?,
                context,
                class_embedding: embed_phrase(category, table),
            })
        })
        .collect()
}
