//! Bundled MaskPAD knowledge graph and its description cache.
//!
//! The graph covers the two presentation classes with 44 entities, 4
//! relations and 42 triples; the cache holds one reviewed description per
//! triple so default runs never need a language model endpoint.

use crate::describe::DescriptionCache;
use crate::kg::{parse_kg, KnowledgeGraph};

/// Canonical JSON of the bundled knowledge graph.
pub const MASKPAD_KG_JSON: &str = include_str!("../fixtures/maskpad_kg.json");

/// Canonical JSON of the bundled description cache.
pub const MASKPAD_DESCRIPTIONS_JSON: &str = include_str!("../fixtures/maskpad_descriptions.json");

/// Parses the bundled knowledge graph.
pub fn maskpad_kg() -> KnowledgeGraph {
    parse_kg(MASKPAD_KG_JSON.as_bytes()).expect("bundled graph is valid")
}

/// Parses the bundled description cache.
pub fn maskpad_descriptions() -> DescriptionCache {
    DescriptionCache::from_json(MASKPAD_DESCRIPTIONS_JSON).expect("bundled cache is valid")
}
