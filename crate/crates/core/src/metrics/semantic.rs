//! Semantic similarity via pluggable embedding providers.

use crate::error::{Error, Result};

/// Encodes text into a fixed-length vector. Implementations must be
/// deterministic per `provider_id` and thread-safe.
pub trait EmbeddingProvider: Send + Sync {
    fn provider_id(&self) -> &str;
    fn encode(&self, text: &str) -> Result<Vec<f64>>;
}

/// Dependency-free deterministic provider: a signed bag of hashed lowercase
/// whitespace tokens. Captures lexical overlap well enough for directional
/// evaluation; swap in a sentence-embedding provider for semantic fidelity.
#[derive(Debug, Clone)]
pub struct HashEmbeddingProvider {
    dim: usize,
}

impl HashEmbeddingProvider {
    pub fn new(dim: usize) -> Self {
        Self { dim: dim.max(2) }
    }
}

impl Default for HashEmbeddingProvider {
    fn default() -> Self {
        Self::new(256)
    }
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

impl EmbeddingProvider for HashEmbeddingProvider {
    fn provider_id(&self) -> &str {
        "hash-bow-v1"
    }

    fn encode(&self, text: &str) -> Result<Vec<f64>> {
        let mut v = vec![0.0; self.dim];
        for token in text.split_whitespace() {
            let h = fnv1a64(token.to_lowercase().as_bytes());
            let bucket = (h % self.dim as u64) as usize;
            let sign = if (h >> 63) == 0 { 1.0 } else { -1.0 };
            v[bucket] += sign;
        }
        if !text.trim().is_empty() && v.iter().all(|&x| x == 0.0) {
            // Signed collisions cancelled out entirely; nudge one bucket so
            // nonempty text never maps to the zero vector.
            let h = fnv1a64(text.as_bytes());
            v[(h % self.dim as u64) as usize] = 1.0;
        }
        Ok(v)
    }
}

/// Cosine similarity of two vectors; 0 when either is the zero vector.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Scores from the semantic suite. `bert_f1` is only populated by a plugin.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticScores {
    pub cosine: f64,
    pub bert_f1: Option<f64>,
}

/// Embedding-cosine similarity between candidate and reference.
pub fn semantic_scores(
    candidate: &str,
    reference: &str,
    provider: &dyn EmbeddingProvider,
) -> Result<SemanticScores> {
    let a = provider.encode(candidate)?;
    let b = provider.encode(reference)?;
    if a.len() != b.len() {
        return Err(Error::ProviderError(format!(
            "provider {} returned inconsistent dims ({} vs {})",
            provider.provider_id(),
            a.len(),
            b.len()
        )));
    }
    Ok(SemanticScores {
        cosine: cosine(&a, &b),
        bert_f1: None,
    })
}
