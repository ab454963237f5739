//! Prompt-similarity suite: fine-grained metrics for short texts, used to
//! compare recovered or obfuscated prompts against the original.

use crate::error::Result;
use crate::metrics::chars::char_edit_distance;
use crate::metrics::semantic::{cosine, EmbeddingProvider};

/// All four prompt metrics lie in [0, 1], higher = more similar.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptScores {
    pub levenshtein_sim: f64,
    pub lcs_ratio: f64,
    pub jaccard: f64,
    pub cosine: f64,
    /// Set when both inputs were empty and the all-ones convention applied.
    pub both_empty: bool,
}

impl PromptScores {
    /// Mean of the four metrics (the scalar used for directional A/B checks).
    pub fn mean(&self) -> f64 {
        (self.levenshtein_sim + self.lcs_ratio + self.jaccard + self.cosine) / 4.0
    }
}

/// Character-level LCS length.
fn char_lcs_len(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            cur[j] = if a[i - 1] == b[j - 1] {
                prev[j - 1] + 1
            } else {
                prev[j].max(cur[j - 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
        cur.fill(0);
    }
    prev[b.len()]
}

/// `1 - edit_distance / max(len)` over characters.
pub fn levenshtein_sim(a: &str, b: &str) -> f64 {
    let max_len = a.chars().count().max(b.chars().count());
    if max_len == 0 {
        return 1.0;
    }
    1.0 - char_edit_distance(a, b) as f64 / max_len as f64
}

/// `|LCS| / max(len)` over characters.
pub fn lcs_ratio(a: &str, b: &str) -> f64 {
    let max_len = a.chars().count().max(b.chars().count());
    if max_len == 0 {
        return 1.0;
    }
    char_lcs_len(a, b) as f64 / max_len as f64
}

/// Jaccard index over lowercased whitespace-token sets.
pub fn jaccard(a: &str, b: &str) -> f64 {
    use std::collections::BTreeSet;
    let sa: BTreeSet<String> = a.split_whitespace().map(str::to_lowercase).collect();
    let sb: BTreeSet<String> = b.split_whitespace().map(str::to_lowercase).collect();
    if sa.is_empty() && sb.is_empty() {
        return 1.0;
    }
    let inter = sa.intersection(&sb).count() as f64;
    let union = sa.union(&sb).count() as f64;
    inter / union
}

/// The full prompt-similarity suite for one candidate/reference pair.
/// Two empty prompts score 1 everywhere by convention, flagged.
pub fn prompt_scores(
    candidate_prompt: &str,
    reference_prompt: &str,
    provider: &dyn EmbeddingProvider,
) -> Result<PromptScores> {
    if candidate_prompt.is_empty() && reference_prompt.is_empty() {
        return Ok(PromptScores {
            levenshtein_sim: 1.0,
            lcs_ratio: 1.0,
            jaccard: 1.0,
            cosine: 1.0,
            both_empty: true,
        });
    }
    let va = provider.encode(candidate_prompt)?;
    let vb = provider.encode(reference_prompt)?;
    Ok(PromptScores {
        levenshtein_sim: levenshtein_sim(candidate_prompt, reference_prompt),
        lcs_ratio: lcs_ratio(candidate_prompt, reference_prompt),
        jaccard: jaccard(candidate_prompt, reference_prompt),
        cosine: cosine(&va, &vb),
        both_empty: false,
    })
}
