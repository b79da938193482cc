//! Natural language descriptions of knowledge graph triples, produced by a
//! language model and cached on disk so offline runs never touch the network.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg::{KnowledgeGraph, Triple};

/// Maximum length of a description in whitespace-separated words.
pub const MAX_DESCRIPTION_WORDS: usize = 30;

/// Environment variable holding the optional language model API token.
pub const LLM_TOKEN_ENV: &str = "KGPROMPT_LLM_TOKEN";

/// A cached description of one triple.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TripleDescription {
    /// Canonical key of the described triple, `head|relation|tail`.
    pub triple_key: String,
    /// Category the triple's head entity is anchored to.
    pub category: String,
    /// Description text, at most [`MAX_DESCRIPTION_WORDS`] words.
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct CacheEntry {
    category: String,
    text: String,
}

/// Deterministic triple-key-indexed store of descriptions.
///
/// Serializes as a JSON object sorted by key, so saving an unchanged cache
/// reproduces the input bytes.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DescriptionCache {
    entries: BTreeMap<String, CacheEntry>,
}

impl DescriptionCache {
    pub fn new() -> Self {
        Self::default()
    }

    /// Parses a cache from its JSON text, enforcing the word limit.
    pub fn from_json(text: &str) -> Result<Self> {
        let cache: DescriptionCache = serde_json::from_str(text)
            .map_err(|e| Error::MalformedFile(format!("description cache json: {e}")))?;
        for (key, entry) in &cache.entries {
            let words = entry.text.split_whitespace().count();
            if words == 0 {
                return Err(Error::MalformedFile(format!(
                    "description `{key}` is empty"
                )));
            }
            if words > MAX_DESCRIPTION_WORDS {
                return Err(Error::MalformedFile(format!(
                    "description `{key}` has {words} words, limit is {MAX_DESCRIPTION_WORDS}"
                )));
            }
            if entry.category.is_empty() {
                return Err(Error::MalformedFile(format!(
                    "description `{key}` names no category"
                )));
            }
        }
        Ok(cache)
    }

    /// Serializes to the canonical JSON text (sorted keys, trailing newline).
    pub fn to_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("cache serialization cannot fail");
        text.push('\n');
        text
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, triple_key: &str) -> bool {
        self.entries.contains_key(triple_key)
    }

    pub fn get(&self, triple_key: &str) -> Option<TripleDescription> {
        self.entries.get(triple_key).map(|entry| TripleDescription {
            triple_key: triple_key.to_string(),
            category: entry.category.clone(),
            text: entry.text.clone(),
        })
    }

    pub fn insert(&mut self, description: TripleDescription) {
        self.entries.insert(
            description.triple_key,
            CacheEntry {
                category: description.category,
                text: description.text,
            },
        );
    }

    /// All cached descriptions for one category, in triple-key order.
    pub fn for_category(&self, category: &str) -> Vec<TripleDescription> {
        self.entries
            .iter()
            .filter(|(_, entry)| entry.category == category)
            .map(|(key, entry)| TripleDescription {
                triple_key: key.clone(),
                category: entry.category.clone(),
                text: entry.text.clone(),
            })
            .collect()
    }
}

/// Loads a description cache from disk.
pub fn load_cache(path: &Path) -> Result<DescriptionCache> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    DescriptionCache::from_json(&text)
}

/// Writes a description cache to disk in canonical form.
pub fn save_cache(cache: &DescriptionCache, path: &Path) -> Result<()> {
    std::fs::write(path, cache.to_json()).map_err(|e| Error::io(path, e))
}

/// Renders the fixed analysis question for one triple.
///
/// The wording is part of the cache contract: changing it invalidates every
/// cached description, so it is fixed verbatim here.
pub fn render_question(graph: &KnowledgeGraph, triple: &Triple) -> Result<String> {
    let (head, relation, tail) = graph.triple_surfaces(triple)?;
    Ok(format!(
        "In 3D mask face presentation attack detection, please analyze the sentence \
         {head} {relation} {tail} in 30 words or less."
    ))
}

/// Something that can answer a free-form question with text.
pub trait LanguageModel {
    fn complete(&self, question: &str) -> Result<String>;
}

/// Language model reached over HTTP with a chat-completion-style request.
///
/// Sends `POST {url}` with body `{"messages": [{"role": "user", "content":
/// question}]}` and reads the answer from `choices[0].message.content`,
/// falling back to a top-level `content` string. The optional bearer token is
/// taken from the `KGPROMPT_LLM_TOKEN` environment variable.
pub struct HttpLanguageModel {
    url: String,
    token: Option<String>,
}

impl HttpLanguageModel {
    pub fn new(url: impl Into<String>) -> Self {
        HttpLanguageModel {
            url: url.into(),
            token: std::env::var(LLM_TOKEN_ENV).ok(),
        }
    }
}

impl LanguageModel for HttpLanguageModel {
    fn complete(&self, question: &str) -> Result<String> {
        let body = serde_json::json!({
            "messages": [{"role": "user", "content": question}],
        })
        .to_string();
        let mut request = ureq::post(&self.url).header("Content-Type", "application/json");
        if let Some(token) = &self.token {
            request = request.header("Authorization", &format!("Bearer {token}"));
        }
        let mut response = request
            .send(&body)
            .map_err(|e| Error::NetworkError(format!("language model: {e}")))?;
        let text = response
            .body_mut()
            .read_to_string()
            .map_err(|e| Error::NetworkError(format!("language model body: {e}")))?;
        let value: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| Error::UnparseableResponse(format!("language model json: {e}")))?;
        let content = value["choices"][0]["message"]["content"]
            .as_str()
            .or_else(|| value["content"].as_str())
            .ok_or_else(|| {
                Error::UnparseableResponse("language model response has no content field".into())
            })?;
        if content.trim().is_empty() {
            return Err(Error::EmptyResponse);
        }
        Ok(content.to_string())
    }
}

/// Placeholder model for runs with no endpoint configured; any attempt to
/// query it fails, so fully cached graphs still work offline.
pub struct OfflineLanguageModel;

impl LanguageModel for OfflineLanguageModel {
    fn complete(&self, _question: &str) -> Result<String> {
        Err(Error::NetworkError(
            "no language model endpoint configured".into(),
        ))
    }
}

fn clip_words(text: &str, limit: usize) -> String {
    let words: Vec<&str> = text.split_whitespace().collect();
    if words.len() <= limit {
        text.trim().to_string()
    } else {
        words[..limit].join(" ")
    }
}

/// Returns a description for every triple of the graph, in canonical triple
/// order, consulting the cache before the model.
///
/// Model answers longer than the word limit are clipped, not rejected. New
/// answers are inserted into `cache`, so a subsequent call is fully offline.
/// Cached entries must agree with the graph about the head entity's category.
pub fn generate_descriptions(
    graph: &KnowledgeGraph,
    cache: &mut DescriptionCache,
    model: &dyn LanguageModel,
) -> Result<Vec<TripleDescription>> {
    let mut out = Vec::with_capacity(graph.triples().len());
    for triple in graph.triples() {
        let key = triple.key();
        let head = graph
            .entity(&triple.head)
            .ok_or_else(|| Error::DanglingReference(triple.head.clone()))?;
        if let Some(cached) = cache.get(&key) {
            if cached.category != head.category {
                return Err(Error::CategoryMismatch {
                    expected: head.category.clone(),
                    got: cached.category,
                });
            }
            out.push(cached);
            continue;
        }
        let question = render_question(graph, triple)?;
        let answer = model.complete(&question)?;
        let text = clip_words(&answer, MAX_DESCRIPTION_WORDS);
        if text.is_empty() {
            return Err(Error::EmptyResponse);
        }
        let description = TripleDescription {
            triple_key: key,
            category: head.category.clone(),
            text,
        };
        cache.insert(description.clone());
        out.push(description);
    }
    Ok(out)
}
