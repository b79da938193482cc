//! Deterministic token embeddings for knowledge phrases.

use ndarray::Array1;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Source of per-word embedding vectors of a fixed width.
pub trait EmbeddingProvider {
    /// Embedding width m.
    fn width(&self) -> usize;

    /// Deterministic vector for one word.
    fn embed_word(&self, word: &str) -> Array1<f64>;
}

/// Hash-seeded Gaussian word table.
///
/// Each word maps to a fixed stream position via FNV-1a, so vectors are
/// reproducible across runs and platforms without storing a vocabulary.
pub struct HashEmbedder {
    width: usize,
    seed: u64,
}

impl HashEmbedder {
    pub fn new(width: usize, seed: u64) -> Self {
        assert!(width >= 1, "embedding width must be at least 1");
        HashEmbedder { width, seed }
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash = FNV_OFFSET;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(FNV_PRIME);
    }
    hash
}

impl EmbeddingProvider for HashEmbedder {
    fn width(&self) -> usize {
        self.width
    }

    fn embed_word(&self, word: &str) -> Array1<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(word.as_bytes()) ^ self.seed);
        Array1::from_iter((0..self.width).map(|_| StandardNormal.sample(&mut rng)))
    }
}

/// Embeds a phrase as the mean of its word vectors.
pub fn embed_phrase(text: &str, table: &dyn EmbeddingProvider) -> Array1<f64> {
    let words: Vec<&str> = text.split_whitespace().collect();
    assert!(!words.is_empty(), "cannot embed an empty phrase");
    let mut sum = Array1::zeros(table.width());
    for word in &words {
        sum += &table.embed_word(word);
    }
    sum / words.len() as f64
}
