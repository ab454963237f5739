//! Output-similarity suite (lexical, character-level, semantic), the
//! prompt-similarity suite, and the blank/obf/original aggregation used for
//! the comparison tables.

pub mod chars;
pub mod lexical;
pub mod promptsim;
pub mod semantic;

pub use chars::{char_scores, character_er, chrf, CharScores};
pub use lexical::{bleu, lexical_scores, nist, rouge_l, LexicalScores};
pub use promptsim::{jaccard, lcs_ratio, levenshtein_sim, prompt_scores, PromptScores};
pub use semantic::{cosine, semantic_scores, EmbeddingProvider, HashEmbeddingProvider};

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelGateway, SamplingConfig, SegmentPayload};
use crate::objective::chat_input;

/// Which direction is better for a metric.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Orientation {
    Higher,
    Lower,
}

impl Orientation {
    pub fn arrow(self) -> &'static str {
        match self {
            Orientation::Higher => "↑",
            Orientation::Lower => "↓",
        }
    }
}

/// A pluggable per-pair output scorer (METEOR, BERTScore, ... live behind
/// this interface; the native six are always present).
pub trait OutputScorer: Send + Sync {
    fn name(&self) -> &str;
    fn orientation(&self) -> Orientation;
    fn score(&self, candidate: &str, reference: &str) -> Result<f64>;
}

/// The eight output metrics of the comparison tables, in display order.
/// METEOR and BERTScore stay N/A unless a plugin provides them.
pub const OUTPUT_METRIC_ORDER: [(&str, Orientation); 8] = [
    ("bleu", Orientation::Higher),
    ("rouge_l", Orientation::Higher),
    ("meteor", Orientation::Higher),
    ("nist", Orientation::Higher),
    ("character_er", Orientation::Lower),
    ("chrf", Orientation::Higher),
    ("bert_f1", Orientation::Higher),
    ("cosine", Orientation::Higher),
];

/// The always-available native output suite plus optional plugins.
pub struct MetricSuite {
    provider: Arc<dyn EmbeddingProvider>,
    plugins: Vec<Box<dyn OutputScorer>>,
}

impl MetricSuite {
    pub fn native(provider: Arc<dyn EmbeddingProvider>) -> Self {
        Self {
            provider,
            plugins: Vec::new(),
        }
    }

    pub fn with_plugin(mut self, plugin: Box<dyn OutputScorer>) -> Self {
        self.plugins.push(plugin);
        self
    }

    pub fn provider(&self) -> &dyn EmbeddingProvider {
        self.provider.as_ref()
    }

    /// All metric values for one candidate/reference pair. Native metrics
    /// are always present; plugin slots stay absent unless installed.
    pub fn score_pair(&self, candidate: &str, reference: &str) -> Result<BTreeMap<String, f64>> {
        let mut out = BTreeMap::new();
        let lex = lexical_scores(candidate, reference);
        out.insert("bleu".into(), lex.bleu);
        out.insert("rouge_l".into(), lex.rouge_l);
        out.insert("nist".into(), lex.nist);
        let ch = char_scores(candidate, reference);
        out.insert("character_er".into(), ch.character_er);
        out.insert("chrf".into(), ch.chrf);
        let sem = semantic_scores(candidate, reference, self.provider.as_ref())?;
        out.insert("cosine".into(), sem.cosine);
        for plugin in &self.plugins {
            out.insert(
                plugin.name().to_string(),
                plugin.score(candidate, reference)?,
            );
        }
        Ok(out)
    }
}

/// Mean per-metric scores for one condition, plus how many samples failed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConditionScores {
    pub per_metric: BTreeMap<String, f64>,
    pub failures: usize,
    pub samples_scored: usize,
}

/// Generates `k` outputs per user text under one system payload, varying the
/// seed per sample and draw (`seed_base + sample_index * k + draw`).
pub fn generate_outputs(
    model: &dyn ModelGateway,
    payload: Option<&SegmentPayload>,
    user_texts: &[String],
    cfg: &SamplingConfig,
    k: usize,
    seed_base: u64,
) -> Result<Vec<Vec<String>>> {
    let mut all = Vec::with_capacity(user_texts.len());
    for (si, user) in user_texts.iter().enumerate() {
        let tokens = model.tokenize(user)?;
        let input = chat_input(payload.cloned(), tokens.token_ids);
        let mut outs = Vec::with_capacity(k);
        for draw in 0..k {
            let cfg = cfg
                .clone()
                .with_seed(seed_base.wrapping_add((si * k + draw) as u64));
            outs.push(model.generate(&input, &cfg)?);
        }
        all.push(outs);
    }
    Ok(all)
}

/// Mean over samples of the mean over all k x k pairwise scores.
/// Samples whose scoring fails are excluded and counted.
pub fn pairwise_mean_scores(
    references: &[Vec<String>],
    candidates: &[Vec<String>],
    suite: &MetricSuite,
) -> Result<ConditionScores> {
    if references.len() != candidates.len() {
        return Err(Error::ConfigError(format!(
            "reference/candidate sample counts differ: {} vs {}",
            references.len(),
            candidates.len()
        )));
    }
    let mut sums: BTreeMap<String, f64> = BTreeMap::new();
    let mut scored = 0usize;
    let mut failures = 0usize;
    for (refs, cands) in references.iter().zip(candidates.iter()) {
        let mut sample_sums: BTreeMap<String, f64> = BTreeMap::new();
        let mut pairs = 0usize;
        let mut failed = false;
        'sample: for r in refs {
            for c in cands {
                match suite.score_pair(c, r) {
                    Ok(scores) => {
                        for (k, v) in scores {
                            *sample_sums.entry(k).or_insert(0.0) += v;
                        }
                        pairs += 1;
                    }
                    Err(_) => {
                        failed = true;
                        break 'sample;
                    }
                }
            }
        }
        if failed || pairs == 0 {
            failures += 1;
            continue;
        }
        scored += 1;
        for (k, v) in sample_sums {
            *sums.entry(k).or_insert(0.0) += v / pairs as f64;
        }
    }
    let per_metric = sums
        .into_iter()
        .map(|(k, v)| (k, v / scored.max(1) as f64))
        .collect();
    Ok(ConditionScores {
        per_metric,
        failures,
        samples_scored: scored,
    })
}

/// Per-test-sample evaluation of one condition against reference outputs:
/// `k` condition outputs per sample, scored pairwise against every
/// reference output.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_condition(
    model: &dyn ModelGateway,
    payload: Option<&SegmentPayload>,
    user_texts: &[String],
    references: &[Vec<String>],
    cfg: &SamplingConfig,
    k: usize,
    seed_base: u64,
    suite: &MetricSuite,
) -> Result<ConditionScores> {
    if k == 0 {
        return Err(Error::ConfigError("k must be >= 1".into()));
    }
    let outputs = generate_outputs(model, payload, user_texts, cfg, k, seed_base)?;
    pairwise_mean_scores(references, &outputs, suite)
}

/// One row of the blank/obf/original comparison table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreRow {
    pub metric: String,
    pub orientation: Orientation,
    pub blank: Option<f64>,
    pub obf: Option<f64>,
    pub original: Option<f64>,
}

/// The blank/obf/original comparison table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreTable {
    pub rows: Vec<ScoreRow>,
}

impl ScoreTable {
    /// Assembles the table in canonical metric order; metrics absent from
    /// all three conditions (uninstalled plugins) still get a row of N/A.
    pub fn from_conditions(
        blank: &ConditionScores,
        obf: &ConditionScores,
        original: &ConditionScores,
    ) -> Self {
        let rows = OUTPUT_METRIC_ORDER
            .iter()
            .map(|(name, orientation)| ScoreRow {
                metric: (*name).to_string(),
                orientation: *orientation,
                blank: blank.per_metric.get(*name).copied(),
                obf: obf.per_metric.get(*name).copied(),
                original: original.per_metric.get(*name).copied(),
            })
            .collect();
        Self { rows }
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "metric,orientation,blank,obf,original")?;
        for row in &self.rows {
            let fmt = |v: Option<f64>| v.map_or("N/A".to_string(), |x| format!("{x:.6}"));
            writeln!(
                f,
                "{},{},{},{},{}",
                row.metric,
                row.orientation.arrow(),
                fmt(row.blank),
                fmt(row.obf),
                fmt(row.original)
            )?;
        }
        Ok(())
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer_pretty(&mut f, self)?;
        f.write_all(b"\n")?;
        Ok(())
    }
}

/// Per-metric best across checkpoint evaluations: max for higher-is-better
/// metrics, min for lower-is-better. Returns (metric -> (checkpoint index,
/// value)).
pub fn per_metric_best(
    checkpoint_scores: &[BTreeMap<String, f64>],
) -> BTreeMap<String, (usize, f64)> {
    let mut best: BTreeMap<String, (usize, f64)> = BTreeMap::new();
    for (idx, scores) in checkpoint_scores.iter().enumerate() {
        for (metric, &value) in scores {
            let orientation = OUTPUT_METRIC_ORDER
                .iter()
                .find(|(n, _)| n == metric)
                .map(|(_, o)| *o)
                .unwrap_or(Orientation::Higher);
            match best.get(metric) {
                None => {
                    best.insert(metric.clone(), (idx, value));
                }
                Some(&(_, cur)) => {
                    let better = match orientation {
                        Orientation::Higher => value > cur,
                        Orientation::Lower => value < cur,
                    };
                    if better {
                        best.insert(metric.clone(), (idx, value));
                    }
                }
            }
        }
    }
    best
}

/// One deployable checkpoint: the argmax over checkpoints of the mean of
/// min-max-normalized metrics (lower-is-better metrics inverted). Returns
/// the checkpoint index.
pub fn select_deployable(checkpoint_scores: &[BTreeMap<String, f64>]) -> Option<usize> {
    if checkpoint_scores.is_empty() {
        return None;
    }
    let metrics: Vec<String> = checkpoint_scores
        .iter()
        .flat_map(|m| m.keys().cloned())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut means = vec![0.0f64; checkpoint_scores.len()];
    let mut counted = vec![0usize; checkpoint_scores.len()];
    for metric in &metrics {
        let values: Vec<Option<f64>> = checkpoint_scores
            .iter()
            .map(|m| m.get(metric).copied())
            .collect();
        let present: Vec<f64> = values.iter().flatten().copied().collect();
        if present.is_empty() {
            continue;
        }
        let lo = present.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = present.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let orientation = OUTPUT_METRIC_ORDER
            .iter()
            .find(|(n, _)| n == metric)
            .map(|(_, o)| *o)
            .unwrap_or(Orientation::Higher);
        for (i, v) in values.iter().enumerate() {
            if let Some(v) = v {
                let norm = if hi > lo { (v - lo) / (hi - lo) } else { 0.5 };
                let norm = match orientation {
                    Orientation::Higher => norm,
                    Orientation::Lower => 1.0 - norm,
                };
                means[i] += norm;
                counted[i] += 1;
            }
        }
    }
    means
        .iter()
        .zip(&counted)
        .map(|(&m, &c)| {
            if c > 0 {
                m / c as f64
            } else {
                f64::NEG_INFINITY
            }
        })
        .enumerate()
        .max_by(|(ia, a), (ib, b)| a.partial_cmp(b).unwrap().then(ib.cmp(ia)))
        .map(|(i, _)| i)
}
