//! Lexical output-similarity metrics: BLEU, ROUGE-L, NIST.
//!
//! Pinned parameterizations (recorded for reproducibility):
//! - BLEU: whitespace tokens, up to 4-grams capped at the shorter text,
//!   epsilon smoothing (0.1 pseudo-count) for zero higher-order matches,
//!   hard zero when no unigram matches at all, brevity penalty
//!   `exp(1 - r/c)` for short candidates, scaled to [0, 100].
//! - ROUGE-L: word-level longest common subsequence, plain F1.
//! - NIST: up to 5-grams, information weights from the reference's own
//!   n-gram statistics, NIST brevity factor.

use std::collections::HashMap;

/// Scores from the lexical suite. `meteor` is only populated when a plugin
/// scorer supplies it.
#[derive(Debug, Clone, PartialEq)]
pub struct LexicalScores {
    pub bleu: f64,
    pub rouge_l: f64,
    pub nist: f64,
    pub meteor: Option<f64>,
}

/// Computes the native lexical metrics for one candidate/reference pair.
/// Empty inputs yield the documented floors (0 everywhere).
pub fn lexical_scores(candidate: &str, reference: &str) -> LexicalScores {
    LexicalScores {
        bleu: bleu(candidate, reference),
        rouge_l: rouge_l(candidate, reference),
        nist: nist(candidate, reference),
        meteor: None,
    }
}

fn words(text: &str) -> Vec<&str> {
    text.split_whitespace().collect()
}

fn ngram_counts<'a>(tokens: &[&'a str], n: usize) -> HashMap<Vec<&'a str>, usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n && n > 0 {
        for win in tokens.windows(n) {
            *counts.entry(win.to_vec()).or_insert(0) += 1;
        }
    }
    counts
}

const BLEU_SMOOTHING_EPS: f64 = 0.1;

/// Sentence BLEU in [0, 100].
pub fn bleu(candidate: &str, reference: &str) -> f64 {
    let cand = words(candidate);
    let refr = words(reference);
    if cand.is_empty() || refr.is_empty() {
        return 0.0;
    }
    let max_order = 4.min(cand.len()).min(refr.len());
    let mut log_sum = 0.0;
    for n in 1..=max_order {
        let cand_counts = ngram_counts(&cand, n);
        let ref_counts = ngram_counts(&refr, n);
        let total: usize = cand_counts.values().sum();
        let matched: usize = cand_counts
            .iter()
            .map(|(g, &c)| c.min(ref_counts.get(g).copied().unwrap_or(0)))
            .sum();
        if n == 1 && matched == 0 {
            return 0.0;
        }
        let p = if matched == 0 {
            BLEU_SMOOTHING_EPS / total as f64
        } else {
            matched as f64 / total as f64
        };
        log_sum += p.ln() / max_order as f64;
    }
    let bp = if cand.len() < refr.len() {
        (1.0 - refr.len() as f64 / cand.len() as f64).exp()
    } else {
        1.0
    };
    100.0 * bp * log_sum.exp()
}

fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut table = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            table[i][j] = if a[i - 1] == b[j - 1] {
                table[i - 1][j - 1] + 1
            } else {
                table[i - 1][j].max(table[i][j - 1])
            };
        }
    }
    table[a.len()][b.len()]
}

/// Word-level LCS F1 in [0, 1].
pub fn rouge_l(candidate: &str, reference: &str) -> f64 {
    let cand = words(candidate);
    let refr = words(reference);
    if cand.is_empty() || refr.is_empty() {
        return 0.0;
    }
    let lcs = lcs_len(&cand, &refr) as f64;
    if lcs == 0.0 {
        return 0.0;
    }
    let p = lcs / cand.len() as f64;
    let r = lcs / refr.len() as f64;
    2.0 * p * r / (p + r)
}

/// NIST brevity exponent: 0.5 at a 2/3 length ratio.
fn nist_beta() -> f64 {
    (0.5f64).ln() / (2.0f64 / 3.0).ln().powi(2)
}

/// Sentence NIST (>= 0) with up to 5-gram information weights drawn from the
/// reference's own statistics.
pub fn nist(candidate: &str, reference: &str) -> f64 {
    let cand = words(candidate);
    let refr = words(reference);
    if cand.is_empty() || refr.is_empty() {
        return 0.0;
    }
    let ref_len = refr.len() as f64;
    let mut ref_counts: Vec<HashMap<Vec<&str>, usize>> = Vec::with_capacity(6);
    for n in 0..=5 {
        ref_counts.push(ngram_counts(&refr, n));
    }
    let info = |gram: &[&str]| -> f64 {
        let n = gram.len();
        let denom = *ref_counts[n].get(gram).unwrap_or(&0) as f64;
        if denom == 0.0 {
            return 0.0;
        }
        let numer = if n == 1 {
            ref_len
        } else {
            *ref_counts[n - 1].get(&gram[..n - 1]).unwrap_or(&0) as f64
        };
        if numer == 0.0 {
            0.0
        } else {
            (numer / denom).log2()
        }
    };

    let mut score = 0.0;
    #[allow(clippy::needless_range_loop)]
    for n in 1..=5.min(cand.len()) {
        let cand_counts = ngram_counts(&cand, n);
        let total: usize = cand_counts.values().sum();
        if total == 0 {
            continue;
        }
        let mut gained = 0.0;
        for (gram, &c) in &cand_counts {
            let matched = c.min(*ref_counts[n].get(gram).unwrap_or(&0));
            if matched > 0 {
                gained += matched as f64 * info(gram);
            }
        }
        score += gained / total as f64;
    }
    let ratio = (cand.len() as f64 / ref_len).min(1.0);
    let brevity = (nist_beta() * ratio.ln().powi(2)).exp();
    score * brevity
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_maximizes_bleu_and_rouge() {
        let text = "the quick brown fox jumps over the lazy dog";
        assert!((bleu(text, text) - 100.0).abs() < 1e-9);
        assert!((rouge_l(text, text) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn disjoint_vocabulary_zeroes_lexical_scores() {
        let c = "alpha beta gamma";
        let r = "delta epsilon zeta";
        assert_eq!(bleu(c, r), 0.0);
        assert_eq!(rouge_l(c, r), 0.0);
        assert_eq!(nist(c, r), 0.0);
    }

    #[test]
    fn empty_inputs_yield_floors() {
        assert_eq!(bleu("", "something"), 0.0);
        assert_eq!(bleu("something", ""), 0.0);
        assert_eq!(rouge_l("", ""), 0.0);
        assert_eq!(nist("", "x"), 0.0);
    }

    #[test]
    fn rouge_matches_dp_oracle() {
        // ("the cat sat", "the cat sat on the mat"): LCS = 3 words,
        // P = 3/3, R = 3/6, F1 = 2*(1*0.5)/1.5 = 2/3.
        let got = rouge_l("the cat sat", "the cat sat on the mat");
        assert!((got - 2.0 / 3.0).abs() < 1e-12);

        // Independent DP oracle over random word sequences.
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(8);
        let vocab = ["a", "b", "c", "d"];
        for _ in 0..50 {
            let c: Vec<&str> = (0..rng.random_range(1..8))
                .map(|_| vocab[rng.random_range(0..4)])
                .collect();
            let r: Vec<&str> = (0..rng.random_range(1..8))
                .map(|_| vocab[rng.random_range(0..4)])
                .collect();
            // Recursive LCS oracle (exponential but tiny inputs).
            fn lcs_rec(a: &[&str], b: &[&str]) -> usize {
                match (a.split_last(), b.split_last()) {
                    (Some((la, ra)), Some((lb, rb))) => {
                        if la == lb {
                            lcs_rec(ra, rb) + 1
                        } else {
                            lcs_rec(ra, b).max(lcs_rec(a, rb))
                        }
                    }
                    _ => 0,
                }
            }
            let l = lcs_rec(&c, &r) as f64;
            let want = if l == 0.0 {
                0.0
            } else {
                let p = l / c.len() as f64;
                let rr = l / r.len() as f64;
                2.0 * p * rr / (p + rr)
            };
            let got = rouge_l(&c.join(" "), &r.join(" "));
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn bleu_brevity_penalizes_short_candidates() {
        let reference = "one two three four five six";
        let full = bleu(reference, reference);
        let short = bleu("one two three", reference);
        assert!(short < full);
        assert!(short > 0.0);
    }

    #[test]
    fn nist_weights_rare_ngrams_higher() {
        // "rare" appears once in the reference; matching it is worth more
        // than matching one of the repeated fillers.
        let reference = "filler filler filler filler rare";
        let hit_rare = nist("rare", reference);
        let hit_common = nist("filler", reference);
        assert!(hit_rare > hit_common);
    }
}
