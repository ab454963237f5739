//! Character-level output-similarity metrics: CharacTER-style shifted edit
//! rate and chrF.

use std::collections::HashMap;

/// Scores from the character-level suite. `character_er` is the only
/// lower-is-better metric in the output suite.
#[derive(Debug, Clone, PartialEq)]
pub struct CharScores {
    pub character_er: f64,
    pub chrf: f64,
}

pub fn char_scores(candidate: &str, reference: &str) -> CharScores {
    CharScores {
        character_er: character_er(candidate, reference),
        chrf: chrf(candidate, reference),
    }
}

/// Character-level Levenshtein distance.
pub fn char_edit_distance(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for i in 1..=a.len() {
        cur[0] = i;
        for j in 1..=b.len() {
            let sub = prev[j - 1] + usize::from(a[i - 1] != b[j - 1]);
            cur[j] = sub.min(prev[j] + 1).min(cur[j - 1] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Shift-aware character edit rate, lower is better, 0 on identical texts.
///
/// Word blocks of the candidate that occur verbatim in the reference may be
/// moved at a cost of one edit each (greedy, only while the move strictly
/// lowers the character edit distance); the remaining character distance is
/// then normalized by the candidate length in characters.
pub fn character_er(candidate: &str, reference: &str) -> f64 {
    if candidate == reference {
        return 0.0;
    }
    if candidate.is_empty() {
        // Nothing to edit from: every reference char is an insertion,
        // normalized by the 1-char floor to keep the value finite.
        return reference.chars().count() as f64;
    }
    let mut hyp: Vec<&str> = candidate.split_whitespace().collect();
    let ref_words: Vec<&str> = reference.split_whitespace().collect();
    let ref_joined = ref_words.join(" ");
    let norm = candidate.chars().count() as f64;

    let mut shifts = 0usize;
    let mut current_ed = char_edit_distance(&hyp.join(" "), &ref_joined);
    // Greedy shift search, bounded by the word count to guarantee
    // termination even in adversarial cases.
    for _ in 0..hyp.len() {
        let mut best: Option<(usize, usize, usize, usize)> = None; // (ed, start, len, dest)
        for start in 0..hyp.len() {
            for len in 1..=(hyp.len() - start) {
                let block = &hyp[start..start + len];
                if !contains_block(&ref_words, block) {
                    continue;
                }
                for dest in 0..=(hyp.len() - len) {
                    if dest == start {
                        continue;
                    }
                    let moved = shift_block(&hyp, start, len, dest);
                    let ed = char_edit_distance(&moved.join(" "), &ref_joined);
                    if ed < current_ed && best.is_none_or(|(b, ..)| ed < b) {
                        best = Some((ed, start, len, dest));
                    }
                }
            }
        }
        match best {
            Some((ed, start, len, dest)) => {
                hyp = shift_block(&hyp, start, len, dest);
                current_ed = ed;
                shifts += 1;
            }
            None => break,
        }
    }
    (shifts as f64 + current_ed as f64) / norm.max(1.0)
}

fn contains_block(haystack: &[&str], needle: &[&str]) -> bool {
    haystack.windows(needle.len()).any(|w| w == needle)
}

fn shift_block<'a>(words: &[&'a str], start: usize, len: usize, dest: usize) -> Vec<&'a str> {
    let mut rest: Vec<&str> = Vec::with_capacity(words.len());
    rest.extend_from_slice(&words[..start]);
    rest.extend_from_slice(&words[start + len..]);
    let mut out: Vec<&str> = Vec::with_capacity(words.len());
    out.extend_from_slice(&rest[..dest]);
    out.extend_from_slice(&words[start..start + len]);
    out.extend_from_slice(&rest[dest..]);
    out
}

const CHRF_MAX_N: usize = 6;
const CHRF_BETA: f64 = 2.0;

/// chrF in [0, 100]: character n-gram F-score, n = 1..=6, beta = 2,
/// whitespace stripped before n-gram extraction.
pub fn chrf(candidate: &str, reference: &str) -> f64 {
    let cand: Vec<char> = candidate.chars().filter(|c| !c.is_whitespace()).collect();
    let refr: Vec<char> = reference.chars().filter(|c| !c.is_whitespace()).collect();
    if cand.is_empty() && refr.is_empty() {
        return 100.0;
    }
    if cand.is_empty() || refr.is_empty() {
        return 0.0;
    }
    let mut f_sum = 0.0;
    let mut orders = 0usize;
    for n in 1..=CHRF_MAX_N {
        let c_counts = char_ngrams(&cand, n);
        let r_counts = char_ngrams(&refr, n);
        let c_total: usize = c_counts.values().sum();
        let r_total: usize = r_counts.values().sum();
        if c_total == 0 && r_total == 0 {
            continue;
        }
        orders += 1;
        if c_total == 0 || r_total == 0 {
            continue; // F contribution 0
        }
        let matched: usize = c_counts
            .iter()
            .map(|(g, &c)| c.min(r_counts.get(g).copied().unwrap_or(0)))
            .sum();
        if matched == 0 {
            continue;
        }
        let p = matched as f64 / c_total as f64;
        let r = matched as f64 / r_total as f64;
        let b2 = CHRF_BETA * CHRF_BETA;
        f_sum += (1.0 + b2) * p * r / (b2 * p + r);
    }
    if orders == 0 {
        0.0
    } else {
        100.0 * f_sum / orders as f64
    }
}

fn char_ngrams(chars: &[char], n: usize) -> HashMap<&[char], usize> {
    let mut counts = HashMap::new();
    if chars.len() >= n {
        for win in chars.windows(n) {
            *counts.entry(win).or_insert(0) += 1;
        }
    }
    counts
}
