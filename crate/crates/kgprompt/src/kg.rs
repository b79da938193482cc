//! Knowledge graph store: typed entities, relations and triples with a
//! canonical on-disk JSON form.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Knowledge dimension an entity contributes to its category.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dimension {
    CategoryRelatedTerm,
    SymbolicMeaning,
    InherentCharacteristic,
}

/// A node of the graph: a short surface phrase anchored to one category.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entity {
    /// Stable identifier used by triples; a single token without whitespace.
    pub id: String,
    /// Surface phrase of at most eight words, inserted verbatim into prompts.
    pub text: String,
    /// Which knowledge dimension the entity covers.
    pub dimension: Dimension,
    /// Name of the category the entity is anchored to.
    pub category: String,
}

/// A directed edge `head --relation--> tail` between two entity ids.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Triple {
    pub head: String,
    pub relation: String,
    pub tail: String,
}

impl Triple {
    /// Canonical cache key of the triple, `head|relation|tail`.
    pub fn key(&self) -> String {
        format!("{}|{}|{}", self.head, self.relation, self.tail)
    }
}

#[derive(Serialize, Deserialize)]
struct KgFile {
    categories: Vec<String>,
    relations: Vec<String>,
    entities: Vec<Entity>,
    triples: Vec<Triple>,
}

/// Validated, canonically ordered knowledge graph.
///
/// Construction sorts categories and relations lexicographically, entities by
/// id and triples by `(head, relation, tail)`, so two graphs with the same
/// content always serialize to the same bytes.
#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeGraph {
    categories: Vec<String>,
    relations: Vec<String>,
    entities: Vec<Entity>,
    triples: Vec<Triple>,
    by_id: BTreeMap<String, usize>,
}

impl KnowledgeGraph {
    /// Validates and canonicalizes the given parts into a graph.
    pub fn new(
        mut categories: Vec<String>,
        mut relations: Vec<String>,
        mut entities: Vec<Entity>,
        mut triples: Vec<Triple>,
    ) -> Result<Self> {
        categories.sort();
        relations.sort();
        entities.sort_by(|a, b| a.id.cmp(&b.id));
        triples.sort();

        if categories.is_empty() {
            return Err(Error::MalformedFile("graph declares no categories".into()));
        }
        if let Some(dup) = first_adjacent_dup(&categories) {
            return Err(Error::MalformedFile(format!("duplicate category `{dup}`")));
        }
        if let Some(dup) = first_adjacent_dup(&relations) {
            return Err(Error::MalformedFile(format!("duplicate relation `{dup}`")));
        }

        let category_set: BTreeSet<&str> = categories.iter().map(String::as_str).collect();
        let relation_set: BTreeSet<&str> = relations.iter().map(String::as_str).collect();

        let mut by_id = BTreeMap::new();
        for (idx, entity) in entities.iter().enumerate() {
            if entity.id.is_empty()
                || entity.id.contains(char::is_whitespace)
                || entity.id.contains('|')
            {
                return Err(Error::MalformedFile(format!(
                    "entity id `{}` is not a single token",
                    entity.id
                )));
            }
            if entity.text.trim().is_empty() {
                return Err(Error::MalformedFile(format!(
                    "entity `{}` has empty text",
                    entity.id
                )));
            }
            let words = entity.text.split_whitespace().count();
            if words > 8 {
                return Err(Error::MalformedFile(format!(
                    "entity `{}` text has {words} words, limit is 8",
                    entity.id
                )));
            }
            if !category_set.contains(entity.category.as_str()) {
                return Err(Error::MalformedFile(format!(
                    "entity `{}` is anchored to undeclared category `{}`",
                    entity.id, entity.category
                )));
            }
            if by_id.insert(entity.id.clone(), idx).is_some() {
                return Err(Error::MalformedFile(format!(
                    "duplicate entity id `{}`",
                    entity.id
                )));
            }
        }

        for pair in triples.windows(2) {
            if pair[0] == pair[1] {
                return Err(Error::MalformedFile(format!(
                    "duplicate triple `{}`",
                    pair[0].key()
                )));
            }
        }
        for triple in &triples {
            if !by_id.contains_key(&triple.head) {
                return Err(Error::DanglingReference(format!(
                    "triple `{}` names unknown head entity `{}`",
                    triple.key(),
                    triple.head
                )));
            }
            if !by_id.contains_key(&triple.tail) {
                return Err(Error::DanglingReference(format!(
                    "triple `{}` names unknown tail entity `{}`",
                    triple.key(),
                    triple.tail
                )));
            }
            if !relation_set.contains(triple.relation.as_str()) {
                return Err(Error::DanglingReference(format!(
                    "triple `{}` names undeclared relation `{}`",
                    triple.key(),
                    triple.relation
                )));
            }
        }

        for category in &categories {
            if !entities.iter().any(|e| &e.category == category) {
                return Err(Error::EmptyCategory(category.clone()));
            }
        }

        Ok(KnowledgeGraph {
            categories,
            relations,
            entities,
            triples,
            by_id,
        })
    }

    /// Category names in canonical (lexicographic) order.
    ///
    /// The position of a category in this list is its class index everywhere
    /// downstream: prompts, logits and labels all use the same ordering.
    pub fn categories(&self) -> &[String] {
        &self.categories
    }

    /// Relation names in canonical order.
    pub fn relations(&self) -> &[String] {
        &self.relations
    }

    /// All entities, sorted by id.
    pub fn entities(&self) -> &[Entity] {
        &self.entities
    }

    /// All triples, sorted by `(head, relation, tail)`.
    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    /// Looks up an entity by id.
    pub fn entity(&self, id: &str) -> Option<&Entity> {
        self.by_id.get(id).map(|&idx| &self.entities[idx])
    }

    /// Class index of a category in canonical order.
    pub fn category_index(&self, category: &str) -> Option<usize> {
        self.categories.iter().position(|c| c == category)
    }

    /// Resolves the three surface phrases of a triple.
    pub fn triple_surfaces(&self, triple: &Triple) -> Result<(String, String, String)> {
        let head = self
            .entity(&triple.head)
            .ok_or_else(|| Error::DanglingReference(triple.head.clone()))?;
        let tail = self
            .entity(&triple.tail)
            .ok_or_else(|| Error::DanglingReference(triple.tail.clone()))?;
        Ok((
            head.text.clone(),
            triple.relation.replace('_', " "),
            tail.text.clone(),
        ))
    }
}

fn first_adjacent_dup(sorted: &[String]) -> Option<&String> {
    sorted
        .windows(2)
        .find(|pair| pair[0] == pair[1])
        .map(|pair| &pair[0])
}

/// Parses a knowledge graph from its JSON file form.
pub fn parse_kg(bytes: &[u8]) -> Result<KnowledgeGraph> {
    let file: KgFile = serde_json::from_slice(bytes)
        .map_err(|e| Error::MalformedFile(format!("knowledge graph json: {e}")))?;
    KnowledgeGraph::new(file.categories, file.relations, file.entities, file.triples)
}

/// Serializes a graph to its canonical byte form: sorted arrays, two-space
/// indentation, LF line ends and a trailing newline.
pub fn serialize_kg(graph: &KnowledgeGraph) -> String {
    let file = KgFile {
        categories: graph.categories.clone(),
        relations: graph.relations.clone(),
        entities: graph.entities.clone(),
        triples: graph.triples.clone(),
    };
    let mut text = serde_json::to_string_pretty(&file).expect("graph serialization cannot fail");
    text.push('\n');
    text
}

/// Returns the entities anchored to `category` (sorted by id) and the triples
/// whose head or tail is anchored to it (in canonical triple order).
pub fn query_category<'g>(
    graph: &'g KnowledgeGraph,
    category: &str,
) -> Result<(Vec<&'g Entity>, Vec<&'g Triple>)> {
    if graph.category_index(category).is_none() {
        return Err(Error::UnknownCategory(category.to_string()));
    }
    let entities: Vec<&Entity> = graph
        .entities()
        .iter()
        .filter(|e| e.category == category)
        .collect();
    let triples: Vec<&Triple> = graph
        .triples()
        .iter()
        .filter(|t| {
            let head_anchor = graph.entity(&t.head).map(|e| e.category.as_str());
            let tail_anchor = graph.entity(&t.tail).map(|e| e.category.as_str());
            head_anchor == Some(category) || tail_anchor == Some(category)
        })
        .collect();
    Ok((entities, triples))
}

/// A candidate edge surfaced by an external knowledge source.
///
/// Candidates are raw strings for human review; they are never merged into a
/// [`KnowledgeGraph`] automatically.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KgCandidate {
    pub head: String,
    pub relation: String,
    pub tail: String,
}

/// Source of candidate edges for a category.
pub trait KgSource {
    fn fetch(&self, category: &str) -> Result<Vec<KgCandidate>>;
}

/// External knowledge base queried over HTTP.
///
/// Sends `GET {base_url}?q={category}` and expects a JSON body of the form
/// `{"edges": [{"start": "...", "rel": "...", "end": "..."}]}`.
pub struct HttpKgSource {
    base_url: String,
}

impl HttpKgSource {
    pub fn new(base_url: impl Into<String>) -> Self {
        HttpKgSource {
            base_url: base_url.into(),
        }
    }
}

#[derive(Deserialize)]
struct EdgeList {
    edges: Vec<Edge>,
}

#[derive(Deserialize)]
struct Edge {
    start: String,
    rel: String,
    end: String,
}

impl KgSource for HttpKgSource {
    fn fetch(&self, category: &str) -> Result<Vec<KgCandidate>> {
        let mut response = ureq::get(&self.base_url)
            .query("q", category)
            .call()
            .map_err(|e| Error::NetworkError(format!("knowledge source: {e}")))?;
        let body = response
            .body_mut()
            .read_to_string()
            .map_err(|e| Error::NetworkError(format!("knowledge source body: {e}")))?;
        let list: EdgeList = serde_json::from_str(&body)
            .map_err(|e| Error::UnparseableResponse(format!("knowledge source json: {e}")))?;
        Ok(list
            .edges
            .into_iter()
            .map(|e| KgCandidate {
                head: e.start,
                relation: e.rel,
                tail: e.end,
            })
            .collect())
    }
}

/// Fetches candidate edges for one category from an external source.
///
/// The returned candidates are a review worklist; callers decide which become
/// entities and triples. The graph itself is never modified here.
pub fn fetch_subgraph(source: &dyn KgSource, category: &str) -> Result<Vec<KgCandidate>> {
    source.fetch(category)
}
