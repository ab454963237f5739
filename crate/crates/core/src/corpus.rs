//! Dataset ingestion, train/test splitting, and generation of the target
//! outputs the obfuscated prompt must reproduce.
//!
//! Targets come from the model itself (the reference prompt's own outputs),
//! so no labeled data is ever needed. Target decoding is greedy by default:
//! a stochastic target would make the collision loss a moving target, and
//! the nucleus config belongs to evaluation-time sampling instead.

use std::collections::BTreeSet;
use std::io::BufRead;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{ModelGateway, SamplingConfig, SegmentPayload};
use crate::objective::chat_input;

/// Declarative field mapping for a JSONL source: which field carries the
/// user input, and an optional context field appended after it (articles or
/// dialogues for summarization-style data).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SourceConfig {
    pub path: PathBuf,
    pub input_field: String,
    #[serde(default)]
    pub context_field: Option<String>,
}

/// One corpus record, optionally carrying its cached target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSample {
    pub user_input: String,
    #[serde(default)]
    pub target_output: Option<String>,
    /// `tokenize(target_output)` pre-truncated to the output budget.
    #[serde(default)]
    pub target_tokens: Option<Vec<u32>>,
}

impl CorpusSample {
    pub fn new(user_input: impl Into<String>) -> Self {
        Self {
            user_input: user_input.into(),
            target_output: None,
            target_tokens: None,
        }
    }
}

/// A seeded disjoint train/test partition.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitCorpus {
    pub train: Vec<CorpusSample>,
    pub test: Vec<CorpusSample>,
    pub seed: u64,
}

/// Reads a JSONL source, mapping each record to one sample in file order.
pub fn load_corpus(source: &SourceConfig) -> Result<Vec<CorpusSample>> {
    let file = std::fs::File::open(&source.path)?;
    let reader = std::io::BufReader::new(file);
    let mut samples = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: serde_json::Value =
            serde_json::from_str(&line).map_err(|e| Error::IngestError {
                record: idx,
                reason: format!("invalid JSON: {e}"),
            })?;
        let input = record
            .get(&source.input_field)
            .and_then(|v| v.as_str())
            .ok_or_else(|| Error::IngestError {
                record: idx,
                reason: format!("missing string field {:?}", source.input_field),
            })?;
        let text = match &source.context_field {
            Some(field) => {
                let ctx = record.get(field).and_then(|v| v.as_str()).ok_or_else(|| {
                    Error::IngestError {
                        record: idx,
                        reason: format!("missing string field {field:?}"),
                    }
                })?;
                format!("{input}\n{ctx}")
            }
            None => input.to_string(),
        };
        samples.push(CorpusSample::new(text));
    }
    Ok(samples)
}

/// Seeded shuffle, then the first `train_n` samples train and the next
/// `test_n` test. Deterministic per seed.
pub fn split(
    samples: &[CorpusSample],
    train_n: usize,
    test_n: usize,
    seed: u64,
) -> Result<SplitCorpus> {
    if train_n + test_n > samples.len() {
        return Err(Error::SplitError(format!(
            "need {train_n} + {test_n} samples, corpus has {}",
            samples.len()
        )));
    }
    use rand::{Rng, SeedableRng};
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
    for i in (1..order.len()).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    let train = order[..train_n]
        .iter()
        .map(|&i| samples[i].clone())
        .collect();
    let test = order[train_n..train_n + test_n]
        .iter()
        .map(|&i| samples[i].clone())
        .collect();
    Ok(SplitCorpus { train, test, seed })
}

/// Content-addressed cache key for one target: everything that determines
/// the output.
fn cache_key(
    model_fingerprint: &str,
    payload_bytes: &[u8],
    user_text: &str,
    seed: u64,
    budget: usize,
) -> String {
    let mut hasher = Sha256::new();
    hasher.update(model_fingerprint.as_bytes());
    hasher.update([0u8]);
    hasher.update(payload_bytes);
    hasher.update([0u8]);
    hasher.update(user_text.as_bytes());
    hasher.update([0u8]);
    hasher.update(seed.to_le_bytes());
    hasher.update((budget as u64).to_le_bytes());
    hex::encode(hasher.finalize())
}

/// Canonical bytes identifying a system payload for caching: the text for
/// hard prompts, the raw f32 rows for soft prompts, empty for blank.
pub fn payload_cache_bytes(model: &dyn ModelGateway, payload: Option<&SegmentPayload>) -> Vec<u8> {
    match payload {
        None => b"blank".to_vec(),
        Some(SegmentPayload::Hard(ids)) => model.detokenize(ids).into_bytes(),
        Some(SegmentPayload::Soft(rows)) => {
            let mut bytes = Vec::with_capacity(rows.len() * 4);
            for v in rows.iter() {
                bytes.extend_from_slice(&(*v as f32).to_le_bytes());
            }
            bytes
        }
    }
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
struct CachedTarget {
    target_output: String,
    target_tokens: Vec<u32>,
}

/// Summary of one target-generation pass.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TargetReport {
    pub generated: usize,
    pub cache_hits: usize,
    pub failures: usize,
}

/// Fills in `target_output` / `target_tokens` for every sample lacking them
/// (or for all samples when `force`), decoding under the given payload and
/// sampling config and truncating targets to `budget` tokens.
///
/// Results are cached on disk keyed by (model fingerprint, payload bytes,
/// user text, seed, budget). Cache writes are only accepted once per key:
/// a later writer with different content is a configuration error.
/// Per-sample generation failures are recorded and skipped.
pub fn generate_targets(
    model: &dyn ModelGateway,
    payload: Option<&SegmentPayload>,
    samples: &mut [CorpusSample],
    cfg: &SamplingConfig,
    budget: usize,
    cache_dir: Option<&Path>,
    force: bool,
) -> Result<TargetReport> {
    cfg.validate()?;
    if let Some(dir) = cache_dir {
        std::fs::create_dir_all(dir)?;
    }
    let payload_bytes = payload_cache_bytes(model, payload);
    let mut report = TargetReport::default();
    for sample in samples.iter_mut() {
        if sample.target_tokens.is_some() && !force {
            continue;
        }
        let key = cache_key(
            model.fingerprint(),
            &payload_bytes,
            &sample.user_input,
            cfg.seed,
            budget,
        );
        let cache_path = cache_dir.map(|d| d.join(format!("{key}.json")));

        // `force` regenerates and verifies against any cached entry instead
        // of trusting it.
        if !force {
            if let Some(path) = &cache_path {
                if path.exists() {
                    let cached: CachedTarget = serde_json::from_reader(std::fs::File::open(path)?)?;
                    sample.target_output = Some(cached.target_output);
                    sample.target_tokens = Some(cached.target_tokens);
                    report.cache_hits += 1;
                    continue;
                }
            }
        }

        let generated = model
            .tokenize(&sample.user_input)
            .map(|toks| chat_input(payload.cloned(), toks.token_ids))
            .and_then(|input| model.generate(&input, cfg))
            .and_then(|text| {
                let tokens = model.tokenize(&text)?;
                Ok((text, tokens.token_ids))
            });
        match generated {
            Ok((text, mut tokens)) => {
                tokens.truncate(budget);
                if let Some(path) = &cache_path {
                    let entry = CachedTarget {
                        target_output: text.clone(),
                        target_tokens: tokens.clone(),
                    };
                    if path.exists() {
                        // First writer wins; any divergence is a real bug.
                        let existing: CachedTarget =
                            serde_json::from_reader(std::fs::File::open(path)?)?;
                        if existing != entry {
                            return Err(Error::CacheConflict { key });
                        }
                    } else {
                        let tmp = path.with_extension("tmp");
                        serde_json::to_writer(std::fs::File::create(&tmp)?, &entry)?;
                        std::fs::rename(&tmp, path)?;
                    }
                }
                sample.target_output = Some(text);
                sample.target_tokens = Some(tokens);
                report.generated += 1;
            }
            Err(_) => {
                report.failures += 1;
            }
        }
    }
    Ok(report)
}

/// Pairs of (user text, target tokens) for samples that have targets, in
/// corpus order; the shape the objective context consumes.
pub fn target_pairs(samples: &[CorpusSample]) -> Vec<(String, Vec<u32>)> {
    samples
        .iter()
        .filter_map(|s| {
            s.target_tokens
                .as_ref()
                .map(|t| (s.user_input.clone(), t.clone()))
        })
        .collect()
}

/// Resolves the cache directory: explicit config wins, then the
/// `PROMPTVEIL_CACHE` environment variable.
pub fn resolve_cache_dir(configured: Option<&Path>) -> Option<PathBuf> {
    configured
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os("PROMPTVEIL_CACHE").map(PathBuf::from))
}

/// Sanity guard used by orchestration: train and test share no sample text.
pub fn assert_disjoint(split: &SplitCorpus) -> Result<()> {
    let train: BTreeSet<&str> = split.train.iter().map(|s| s.user_input.as_str()).collect();
    if let Some(leak) = split
        .test
        .iter()
        .find(|s| train.contains(s.user_input.as_str()))
    {
        return Err(Error::SplitError(format!(
            "test sample also present in train: {:?}",
            leak.user_input.chars().take(40).collect::<String>()
        )));
    }
    Ok(())
}
