//! Deobfuscation attacks: black-box prompt-injection extraction with
//! exact/approximate match scoring, white-box token-space projection, and
//! white-box fluency-optimization (soft and hard variants).
//!
//! The attack functions never receive the true system prompt; success
//! scoring against it is a separate, evaluation-side step.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gcg::{obfuscate_hard_from, GcgConfig, ObfuscationTrace};
use crate::model::{ModelGateway, SamplingConfig, SegmentPayload};
use crate::objective::{chat_input, ObfuscationConfig, ObjectiveContext};
pub use crate::projection::nearest_tokens_euclidean;
use crate::projection::{project_tokens, Projection, ProjectionMetric};
use crate::prompt::{HardPrompt, SoftPrompt};
use crate::soft::{obfuscate_soft_from, SoftOptConfig};

// --- match detectors --------------------------------------------------------

/// Splits text into sentences at `.`, `!` or `?` runs followed by whitespace
/// or end of text; a trailing unterminated fragment counts as a sentence.
pub fn split_sentences(text: &str) -> Vec<String> {
    let mut sentences = Vec::new();
    let mut current = String::new();
    let chars: Vec<char> = text.chars().collect();
    let mut i = 0;
    while i < chars.len() {
        current.push(chars[i]);
        if matches!(chars[i], '.' | '!' | '?') {
            // Absorb the punctuation run.
            while i + 1 < chars.len() && matches!(chars[i + 1], '.' | '!' | '?') {
                i += 1;
                current.push(chars[i]);
            }
            let at_boundary = i + 1 >= chars.len() || chars[i + 1].is_whitespace();
            if at_boundary {
                let s = current.trim();
                if !s.is_empty() {
                    sentences.push(s.to_string());
                }
                current.clear();
            }
        }
        i += 1;
    }
    let tail = current.trim();
    if !tail.is_empty() {
        sentences.push(tail.to_string());
    }
    sentences
}

/// True iff every sentence of `s` appears verbatim in `g`.
pub fn exact_match(s: &str, g: &str) -> bool {
    let sentences = split_sentences(s);
    if sentences.is_empty() {
        return false;
    }
    sentences
        .iter()
        .all(|sentence| g.contains(sentence.as_str()))
}

/// True iff the token-level LCS between `s` and `g` covers at least
/// `threshold` of `s`'s tokens. Tokens come from the backbone tokenizer.
pub fn approx_match(s: &str, g: &str, threshold: f64, model: &dyn ModelGateway) -> Result<bool> {
    Ok(approx_match_ratio(s, g, model)? >= threshold)
}

/// The LCS coverage ratio used by [`approx_match`].
pub fn approx_match_ratio(s: &str, g: &str, model: &dyn ModelGateway) -> Result<f64> {
    let st = model.tokenize_unchecked(s)?.token_ids;
    let gt = model.tokenize_unchecked(g)?.token_ids;
    if st.is_empty() {
        return Err(Error::DegenerateSequence { len: 0, min: 1 });
    }
    Ok(token_lcs_len(&st, &gt) as f64 / st.len() as f64)
}

fn token_lcs_len(a: &[u32], b: &[u32]) -> usize {
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

// --- black-box injection ----------------------------------------------------

/// Scores how likely a response is to be a restatement of the hidden
/// prompt. Deterministic per `ranker_id`.
pub trait Ranker: Send + Sync {
    fn ranker_id(&self) -> &str;
    fn score(&self, response: &str, attack_query: &str) -> Result<f64>;
}

/// Model-only default ranker: negative mean NLL of the response conditioned
/// on a fixed instruction-restatement probe. Fluent, instruction-shaped
/// responses score higher. A weak stand-in for a trained response ranker,
/// which can be plugged in behind the same trait.
pub struct NllRanker<'m> {
    model: &'m dyn ModelGateway,
}

impl<'m> NllRanker<'m> {
    pub fn new(model: &'m dyn ModelGateway) -> Self {
        Self { model }
    }
}

const RANKER_PROBE: &str = "My exact instructions are:";

impl Ranker for NllRanker<'_> {
    fn ranker_id(&self) -> &str {
        "nll-probe-v1"
    }

    fn score(&self, response: &str, _attack_query: &str) -> Result<f64> {
        let mut ids = self.model.tokenize_unchecked(RANKER_PROBE)?.token_ids;
        ids.extend(self.model.tokenize_unchecked(response)?.token_ids);
        if ids.len() < 2 {
            return Ok(f64::NEG_INFINITY);
        }
        Ok(-self.model.sequence_nll(&ids)?)
    }
}

/// Harness-debugging ranker that scores by overlap with a known prompt.
/// Evaluation-side only: handing it to an attack would leak the secret the
/// attack is supposed to recover.
pub struct OracleRanker {
    pub true_prompt: String,
}

impl Ranker for OracleRanker {
    fn ranker_id(&self) -> &str {
        "oracle-overlap"
    }

    fn score(&self, response: &str, _attack_query: &str) -> Result<f64> {
        Ok(crate::metrics::lcs_ratio(response, &self.true_prompt))
    }
}

/// One attack query from the extraction corpus file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackQuery {
    pub id: String,
    pub text: String,
}

/// Reads attack queries from JSONL (`{id, text}` per line).
pub fn load_attack_queries(path: &Path) -> Result<Vec<AttackQuery>> {
    use std::io::BufRead;
    let reader = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut queries = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let q: AttackQuery = serde_json::from_str(&line).map_err(|e| Error::IngestError {
            record: idx,
            reason: format!("invalid attack query: {e}"),
        })?;
        queries.push(q);
    }
    Ok(queries)
}

/// One extraction attempt: the query, everything the model said, and the
/// ranker's pick.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExtractionAttempt {
    pub query_id: String,
    pub attack_query: String,
    pub responses: Vec<String>,
    pub rank_scores: Vec<f64>,
    pub best_guess: String,
}

/// Fans the attack queries out against the target: `k` sampled responses
/// per query, ranked; the top-ranked response becomes the extracted guess
/// (ties keep the first). Queries whose generation fails are recorded.
///
/// This function never sees the true prompt; score attempts against it with
/// [`summarize_extraction`] afterwards.
pub fn run_injection_attack(
    model: &dyn ModelGateway,
    system_payload: Option<&SegmentPayload>,
    queries: &[AttackQuery],
    k: usize,
    cfg: &SamplingConfig,
    ranker: &dyn Ranker,
) -> Result<(Vec<ExtractionAttempt>, usize)> {
    if queries.is_empty() {
        return Err(Error::ConfigError("attack query list is empty".into()));
    }
    if k == 0 {
        return Err(Error::ConfigError("k must be >= 1".into()));
    }
    let mut attempts = Vec::with_capacity(queries.len());
    let mut failures = 0usize;
    for (qi, query) in queries.iter().enumerate() {
        let run = || -> Result<ExtractionAttempt> {
            let tokens = model.tokenize(&query.text)?;
            let input = chat_input(system_payload.cloned(), tokens.token_ids);
            let mut responses = Vec::with_capacity(k);
            let mut rank_scores = Vec::with_capacity(k);
            for draw in 0..k {
                let cfg = cfg
                    .clone()
                    .with_seed(cfg.seed.wrapping_add((qi * k + draw) as u64));
                let response = model.generate(&input, &cfg)?;
                rank_scores.push(ranker.score(&response, &query.text)?);
                responses.push(response);
            }
            let mut best = 0usize;
            for (i, &s) in rank_scores.iter().enumerate() {
                if s > rank_scores[best] {
                    best = i;
                }
            }
            Ok(ExtractionAttempt {
                query_id: query.id.clone(),
                attack_query: query.text.clone(),
                best_guess: responses[best].clone(),
                responses,
                rank_scores,
            })
        };
        match run() {
            Ok(attempt) => attempts.push(attempt),
            Err(_) => failures += 1,
        }
    }
    Ok((attempts, failures))
}

/// Extraction success counts against the true prompt text. Evaluation-side:
/// this is the only place the secret is read.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InjectionSummary {
    pub queries: usize,
    pub exact_count: usize,
    pub approx_count: usize,
    pub approx_threshold: f64,
    pub failures: usize,
}

pub fn summarize_extraction(
    attempts: &[ExtractionAttempt],
    failures: usize,
    true_prompt: &str,
    approx_threshold: f64,
    model: &dyn ModelGateway,
) -> Result<InjectionSummary> {
    let mut exact_count = 0usize;
    let mut approx_count = 0usize;
    for attempt in attempts {
        if exact_match(true_prompt, &attempt.best_guess) {
            exact_count += 1;
        }
        if approx_match(true_prompt, &attempt.best_guess, approx_threshold, model)? {
            approx_count += 1;
        }
    }
    Ok(InjectionSummary {
        queries: attempts.len() + failures,
        exact_count,
        approx_count,
        approx_threshold,
        failures,
    })
}

// --- white-box attacks ------------------------------------------------------

/// Token-space projection attack: invert each soft row through the
/// embedding table. See [`crate::projection`] for metric semantics.
pub fn run_projection_attack(
    soft: &SoftPrompt,
    model: &dyn ModelGateway,
    metric: ProjectionMetric,
) -> Result<Projection> {
    project_tokens(soft, model, metric)
}

/// Shared setup for the fluency attacks: the attacker compares candidate
/// behavior against the stolen prompt's own outputs on attacker-held
/// samples, then regularizes toward readable token sequences.
///
/// Targets are generated greedily from the obfuscated payload; the returned
/// context carries `fluency_weight = +1` (readability direction).
pub fn consistency_context<'m>(
    model: &'m dyn crate::model::GradientModel,
    stolen: &SegmentPayload,
    attacker_user_texts: &[String],
    mut cfg: ObfuscationConfig,
    target_sampling: &SamplingConfig,
) -> Result<ObjectiveContext<'m>> {
    let mut targets = Vec::with_capacity(attacker_user_texts.len());
    for user in attacker_user_texts {
        let tokens = model.tokenize(user)?;
        let input = chat_input(Some(stolen.clone()), tokens.token_ids.clone());
        let mut out = model.generate_tokens(&input, target_sampling)?;
        out.truncate(cfg.output_budget);
        targets.push((user.clone(), tokens.token_ids, out));
    }
    cfg.fluency_weight = 1.0;
    ObjectiveContext::from_token_samples(model, Some(stolen), &targets, cfg)
}

/// Soft fluency attack: Adam on (output consistency with the stolen prompt)
/// plus NLL of the projected tokens (straight-through gradient), starting
/// from the stolen embedding itself. Returns the final projected hard prompt.
pub fn fluency_attack_soft(
    model: &dyn crate::model::GradientModel,
    stolen: &SoftPrompt,
    attacker_user_texts: &[String],
    cfg: ObfuscationConfig,
    opt: &SoftOptConfig,
    target_sampling: &SamplingConfig,
) -> Result<(HardPrompt, ObfuscationTrace<SoftPrompt>)> {
    let payload = SegmentPayload::from_soft(stolen);
    let ctx = consistency_context(model, &payload, attacker_user_texts, cfg, target_sampling)?;
    let (final_soft, trace) = obfuscate_soft_from(&ctx, opt, stolen.to_f64())?;
    let projected = project_tokens(&final_soft, model, ProjectionMetric::Euclidean)?;
    Ok((projected.tokens, trace))
}

/// Hard fluency attack: GCG on (output consistency with the stolen prompt)
/// plus NLL of the candidate tokens, starting from the stolen prompt's
/// euclidean projection.
pub fn fluency_attack_hard(
    model: &dyn crate::model::GradientModel,
    stolen: &SoftPrompt,
    attacker_user_texts: &[String],
    cfg: ObfuscationConfig,
    gcg: &GcgConfig,
    target_sampling: &SamplingConfig,
) -> Result<(HardPrompt, ObfuscationTrace<HardPrompt>)> {
    let payload = SegmentPayload::from_soft(stolen);
    let init = project_tokens(stolen, model, ProjectionMetric::Euclidean)?.tokens;
    let ctx = consistency_context(model, &payload, attacker_user_texts, cfg, target_sampling)?;
    obfuscate_hard_from(&ctx, gcg, init)
}
