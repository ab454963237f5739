//! Experiment orchestration: configuration, the obfuscate / evaluate /
//! attack pipeline, content-addressed manifests, and report emission.
//!
//! Every run writes a manifest of seeds and artifact hashes. The config
//! hash covers the *contents* of referenced input files (model config,
//! template, prompt spec, corpus), never their paths, so replaying the same
//! experiment elsewhere produces the same hash and byte-identical prompt
//! artifacts.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{self, CorpusSample, SourceConfig, TargetReport};
use crate::deobfuscation::{
    fluency_attack_hard, fluency_attack_soft, load_attack_queries, run_injection_attack,
    summarize_extraction, NllRanker,
};
use crate::error::{Error, Result};
use crate::gcg::{obfuscate_hard, GcgConfig};
use crate::metrics::{
    evaluate_condition, generate_outputs, per_metric_best, prompt_scores, select_deployable,
    HashEmbeddingProvider, MetricSuite, ScoreTable,
};
use crate::model::{
    load_backend, Backend, GradientModel, ModelAdapterConfig, ModelGateway, SamplingConfig,
    SegmentPayload,
};
use crate::objective::{ObfuscationConfig, ObjectiveContext};
use crate::projection::{project_tokens, ProjectionMetric};
use crate::prompt::{
    blank_user_text, deserialize_soft, random_hard_init, serialize_soft_stamped, write_hard_prompt,
    HardPrompt, SoftPrompt, SystemPromptSpec,
};
use crate::soft::{obfuscate_soft, SoftOptConfig};

/// Which optimizer produces the obfuscated prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Hard,
    Soft,
}

/// Corpus source plus split parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusSection {
    #[serde(flatten)]
    pub source: SourceConfig,
    pub train_n: usize,
    pub test_n: usize,
    pub split_seed: u64,
}

/// Optimization settings: loop shape plus per-method optimizer knobs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ObfuscationSection {
    pub method: Method,
    #[serde(flatten)]
    pub loop_cfg: ObfuscationConfig,
    pub seed: u64,
    #[serde(default)]
    pub gcg: GcgConfig,
    #[serde(default)]
    pub soft_opt: SoftOptConfig,
}

/// Evaluation settings: the sampling config, outputs per condition (k), and
/// which checkpoints to score.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvaluationSection {
    #[serde(flatten)]
    pub sampling: SamplingConfig,
    pub k_samples: usize,
    /// Score every `checkpoint_stride`-th checkpoint (plus the last).
    #[serde(default = "default_stride")]
    pub checkpoint_stride: usize,
    #[serde(default = "default_embed_dim")]
    pub provider_dim: usize,
    /// Debug flag: regenerate the original column with the reference seed
    /// instead of a fresh one, so it must score perfectly against itself.
    #[serde(default)]
    pub self_check: bool,
}

fn default_stride() -> usize {
    1
}

fn default_embed_dim() -> usize {
    256
}

/// Attack settings; only the fields the chosen attack needs are read.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackSection {
    #[serde(default)]
    pub queries_path: Option<PathBuf>,
    #[serde(default = "default_attack_k")]
    pub k: usize,
    #[serde(default = "default_threshold")]
    pub approx_threshold: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for AttackSection {
    fn default() -> Self {
        Self {
            queries_path: None,
            k: default_attack_k(),
            approx_threshold: default_threshold(),
            seed: 0,
        }
    }
}

fn default_attack_k() -> usize {
    5
}

fn default_threshold() -> f64 {
    0.9
}

/// The resolved experiment description, loaded from a single JSON file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub model: ModelAdapterConfig,
    pub prompt_spec: PathBuf,
    pub corpus: CorpusSection,
    pub obfuscation: ObfuscationSection,
    pub evaluation: EvaluationSection,
    #[serde(default)]
    pub attack: AttackSection,
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| {
            Error::ConfigError(format!("cannot open config {}: {e}", path.display()))
        })?;
        let cfg: ExperimentConfig = serde_json::from_reader(file)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.obfuscation.loop_cfg.validate()?;
        self.evaluation.sampling.validate()?;
        if self.evaluation.k_samples == 0 {
            return Err(Error::ConfigError(
                "evaluation.k_samples must be >= 1".into(),
            ));
        }
        for (name, path) in [
            ("prompt_spec", &self.prompt_spec),
            ("corpus.path", &self.corpus.source.path),
        ] {
            if !path.exists() {
                return Err(Error::ConfigError(format!(
                    "{name} does not exist: {}",
                    path.display()
                )));
            }
        }
        Ok(())
    }

    /// Content hash of the experiment: the config with every referenced
    /// input file replaced by the hash of its contents, and output/cache
    /// locations excluded.
    pub fn config_hash(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Identity<'a> {
            backend_id: &'a str,
            dtype: &'a Option<String>,
            model_file: Option<String>,
            template_file: Option<String>,
            prompt_spec_file: String,
            corpus_file: String,
            input_field: &'a str,
            context_field: &'a Option<String>,
            train_n: usize,
            test_n: usize,
            split_seed: u64,
            obfuscation: &'a ObfuscationSection,
            evaluation: &'a EvaluationSection,
            attack: &'a AttackSection,
        }
        let hash_file =
            |p: &PathBuf| -> Result<String> { Ok(hex::encode(Sha256::digest(std::fs::read(p)?))) };
        let identity = Identity {
            backend_id: &self.model.backend_id,
            dtype: &self.model.dtype,
            model_file: self.model.model_path.as_ref().map(&hash_file).transpose()?,
            template_file: self
                .model
                .template_path
                .as_ref()
                .map(&hash_file)
                .transpose()?,
            prompt_spec_file: hash_file(&self.prompt_spec)?,
            corpus_file: hash_file(&self.corpus.source.path)?,
            input_field: &self.corpus.source.input_field,
            context_field: &self.corpus.source.context_field,
            train_n: self.corpus.train_n,
            test_n: self.corpus.test_n,
            split_seed: self.corpus.split_seed,
            obfuscation: &self.obfuscation,
            evaluation: &self.evaluation,
            attack: &self.attack,
        };
        let bytes = serde_json::to_vec(&identity)?;
        Ok(hex::encode(Sha256::digest(&bytes)))
    }
}

/// Seeds derived from one evaluation seed: reference outputs, condition
/// outputs, and the reseeded-original baseline use disjoint families.
fn eval_seed_families(seed: u64) -> (u64, u64, u64) {
    (seed, seed.wrapping_add(10_000), seed.wrapping_add(20_000))
}

/// Deterministic creation stamp for run artifacts: encodes the run identity
/// in place of wall-clock time so replays are byte-identical.
fn run_stamp(config_hash: &str) -> String {
    format!("run:{}", &config_hash[..16.min(config_hash.len())])
}

fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}

/// Deterministic record of one run: the config hash, every seed, and the
/// hash of every artifact file. Identical manifests imply identical
/// artifacts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub seeds: BTreeMap<String, u64>,
    pub artifacts: BTreeMap<String, String>,
}

impl Manifest {
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer_pretty(&mut f, self)?;
        f.write_all(b"\n")?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_reader(std::fs::File::open(path)?)?)
    }

    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(serde_json::to_vec(self)?)))
    }
}

/// Exclusive per-output-dir lock; released on drop.
struct DirLock {
    path: PathBuf,
}

impl DirLock {
    fn acquire(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(".lock");
        match std::fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
        {
            Ok(_) => Ok(Self { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::ConfigError(
                format!("output dir is locked by another run: {}", path.display()),
            )),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

/// Everything loaded and derived from a config: backend, prompt spec,
/// split corpus with scenario-mapped user texts.
pub struct Workspace {
    pub backend: Backend,
    pub spec: SystemPromptSpec,
    pub system_text: String,
    pub train: Vec<CorpusSample>,
    pub test: Vec<CorpusSample>,
}

impl Workspace {
    pub fn load(cfg: &ExperimentConfig) -> Result<Self> {
        let backend = load_backend(&cfg.model, None)?;
        let spec = SystemPromptSpec::from_json_file(&cfg.prompt_spec)?;
        let (system_text, _) = crate::prompt::assemble_scenario(&spec, "probe")?;
        let samples = corpus::load_corpus(&cfg.corpus.source)?;
        let mut split = corpus::split(
            &samples,
            cfg.corpus.train_n,
            cfg.corpus.test_n,
            cfg.corpus.split_seed,
        )?;
        corpus::assert_disjoint(&split)?;
        // Scenario mapping folds the task into the user text where the
        // scenario demands it; applied once so every later stage sees final
        // user texts.
        for sample in split.train.iter_mut().chain(split.test.iter_mut()) {
            sample.user_input = blank_user_text(&spec, &sample.user_input);
        }
        Ok(Self {
            backend,
            spec,
            system_text,
            train: split.train,
            test: split.test,
        })
    }

    pub fn gateway(&self) -> &dyn ModelGateway {
        self.backend.gateway()
    }

    pub fn gradient(&self) -> Result<&dyn GradientModel> {
        self.backend.gradient().ok_or_else(|| {
            Error::ConfigError("the configured backend does not support gradients".into())
        })
    }

    /// The original (reference) system payload: the prompt-spec text, tokenized.
    pub fn original_payload(&self) -> Result<SegmentPayload> {
        Ok(SegmentPayload::Hard(
            self.gateway().tokenize(&self.system_text)?.token_ids,
        ))
    }

    pub fn test_user_texts(&self) -> Vec<String> {
        self.test.iter().map(|s| s.user_input.clone()).collect()
    }
}

/// Generates (and caches) training targets under the original prompt.
pub fn run_targets(cfg: &ExperimentConfig) -> Result<TargetReport> {
    let mut ws = Workspace::load(cfg)?;
    let payload = ws.original_payload()?;
    let cache = corpus::resolve_cache_dir(cfg.cache_dir.as_deref());
    let sampling = SamplingConfig::greedy(cfg.obfuscation.loop_cfg.output_budget);
    corpus::generate_targets(
        ws.backend.gateway(),
        Some(&payload),
        &mut ws.train,
        &sampling,
        cfg.obfuscation.loop_cfg.output_budget,
        cache.as_deref(),
        false,
    )
}

/// Artifact paths produced by one obfuscation run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ObfuscateOutcome {
    pub output_dir: PathBuf,
    pub prompt_artifact: PathBuf,
    pub trace_path: PathBuf,
    pub manifest_path: PathBuf,
    pub reused_existing: bool,
}

/// Runs the configured optimizer end to end: targets, optimization,
/// artifact + checkpoint + trace + manifest emission. Idempotent per config
/// hash: an output dir already holding a manifest for the same hash is
/// returned as-is.
pub fn run_obfuscate(cfg: &ExperimentConfig) -> Result<ObfuscateOutcome> {
    cfg.validate()?;
    let config_hash = cfg.config_hash()?;
    let out = &cfg.output_dir;
    let manifest_path = out.join("manifest.json");
    let prompt_artifact = match cfg.obfuscation.method {
        Method::Hard => out.join("obf_prompt.json"),
        Method::Soft => out.join("obf_prompt.sobf"),
    };
    let trace_path = out.join("trace.jsonl");

    if manifest_path.exists() {
        let existing = Manifest::read(&manifest_path)?;
        if existing.config_hash == config_hash {
            return Ok(ObfuscateOutcome {
                output_dir: out.clone(),
                prompt_artifact,
                trace_path,
                manifest_path,
                reused_existing: true,
            });
        }
    }

    let _lock = DirLock::acquire(out)?;
    let mut ws = Workspace::load(cfg)?;
    let payload = SegmentPayload::Hard(ws.gateway().tokenize(&ws.system_text)?.token_ids);

    let cache = corpus::resolve_cache_dir(cfg.cache_dir.as_deref());
    let budget = cfg.obfuscation.loop_cfg.output_budget;
    let mut train = std::mem::take(&mut ws.train);
    corpus::generate_targets(
        ws.gateway(),
        Some(&payload),
        &mut train,
        &SamplingConfig::greedy(budget),
        budget,
        cache.as_deref(),
        false,
    )?;
    let pairs = corpus::target_pairs(&train);
    let model = ws.gradient()?;
    if pairs.is_empty() {
        return Err(Error::ConfigError(
            "no training sample produced a target".into(),
        ));
    }
    let ctx = ObjectiveContext::new(
        model,
        Some(&payload),
        &pairs,
        cfg.obfuscation.loop_cfg.clone(),
    )?;

    serde_json::to_writer_pretty(
        std::fs::File::create(out.join("resolved_config.json"))?,
        cfg,
    )?;

    let stamp = run_stamp(&config_hash);
    let mut artifacts: BTreeMap<String, String> = BTreeMap::new();
    match cfg.obfuscation.method {
        Method::Hard => {
            let mut gcg = cfg.obfuscation.gcg.clone();
            gcg.seed = cfg.obfuscation.seed;
            if gcg.forbid.is_empty() {
                gcg.forbid = model.special_token_ids().clone();
            }
            gcg.top_k = gcg.top_k.min(model.vocab_size());
            let (prompt, trace) = obfuscate_hard(&ctx, &gcg)?;
            write_hard_prompt(
                &prompt,
                model,
                &prompt_artifact,
                &out.join("obf_prompt.txt"),
            )?;
            trace.write_steps_jsonl(&trace_path)?;
            let mut ckpt =
                std::io::BufWriter::new(std::fs::File::create(out.join("checkpoints.jsonl"))?);
            for c in &trace.checkpoints {
                serde_json::to_writer(
                    &mut ckpt,
                    &serde_json::json!({"step": c.step, "tokens": c.prompt.token_ids}),
                )?;
                ckpt.write_all(b"\n")?;
            }
            ckpt.flush()?;
            artifacts.insert(
                "obf_prompt.txt".into(),
                sha256_file(&out.join("obf_prompt.txt"))?,
            );
            artifacts.insert(
                "checkpoints.jsonl".into(),
                sha256_file(&out.join("checkpoints.jsonl"))?,
            );
        }
        Method::Soft => {
            let mut opt = cfg.obfuscation.soft_opt.clone();
            opt.seed = cfg.obfuscation.seed;
            let (prompt, trace) = obfuscate_soft(&ctx, &opt)?;
            serialize_soft_stamped(&prompt, &prompt_artifact, &stamp)?;
            trace.write_steps_jsonl(&trace_path)?;
            let ckpt_dir = out.join("checkpoints");
            std::fs::create_dir_all(&ckpt_dir)?;
            for c in &trace.checkpoints {
                let p = ckpt_dir.join(format!("step_{:04}.sobf", c.step));
                serialize_soft_stamped(&c.prompt, &p, &stamp)?;
                artifacts.insert(
                    format!("checkpoints/step_{:04}.sobf", c.step),
                    sha256_file(&p)?,
                );
            }
        }
    }
    artifacts.insert(
        prompt_artifact
            .file_name()
            .unwrap()
            .to_string_lossy()
            .into_owned(),
        sha256_file(&prompt_artifact)?,
    );
    artifacts.insert("trace.jsonl".into(), sha256_file(&trace_path)?);

    let manifest = Manifest {
        config_hash,
        seeds: BTreeMap::from([
            ("split".into(), cfg.corpus.split_seed),
            ("obfuscation".into(), cfg.obfuscation.seed),
            ("evaluation".into(), cfg.evaluation.sampling.seed),
            ("attack".into(), cfg.attack.seed),
        ]),
        artifacts,
    };
    manifest.write(&manifest_path)?;

    Ok(ObfuscateOutcome {
        output_dir: out.clone(),
        prompt_artifact,
        trace_path,
        manifest_path,
        reused_existing: false,
    })
}

/// The obfuscated payload stored in a prompt artifact.
pub fn load_prompt_artifact(
    path: &Path,
    model: &dyn ModelGateway,
    allow_model_mismatch: bool,
) -> Result<SegmentPayload> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("sobf") => {
            let soft = deserialize_soft(path)?;
            match soft.check_model(model) {
                Ok(()) => {}
                Err(e) if allow_model_mismatch => {
                    eprintln!("warning: {e} (continuing as requested)");
                }
                Err(e) => return Err(e),
            }
            Ok(SegmentPayload::from_soft(&soft))
        }
        _ => {
            let ids: Vec<u32> = serde_json::from_reader(std::fs::File::open(path)?)?;
            let prompt = HardPrompt::new(ids);
            prompt.validate(model.vocab_size())?;
            Ok(SegmentPayload::Hard(prompt.token_ids))
        }
    }
}

/// Checkpoint payloads stored next to a prompt artifact, in step order.
fn load_checkpoints(out: &Path, model: &dyn ModelGateway) -> Result<Vec<SegmentPayload>> {
    let hard_path = out.join("checkpoints.jsonl");
    if hard_path.exists() {
        use std::io::BufRead;
        let reader = std::io::BufReader::new(std::fs::File::open(&hard_path)?);
        let mut payloads = Vec::new();
        for line in reader.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let v: serde_json::Value = serde_json::from_str(&line)?;
            let ids: Vec<u32> = serde_json::from_value(v["tokens"].clone())?;
            payloads.push(SegmentPayload::Hard(ids));
        }
        return Ok(payloads);
    }
    let soft_dir = out.join("checkpoints");
    if soft_dir.is_dir() {
        let mut paths: Vec<PathBuf> = std::fs::read_dir(&soft_dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().and_then(|e| e.to_str()) == Some("sobf"))
            .collect();
        paths.sort();
        let mut payloads = Vec::with_capacity(paths.len());
        for p in paths {
            let soft = deserialize_soft(&p)?;
            soft.check_model(model)?;
            payloads.push(SegmentPayload::from_soft(&soft));
        }
        return Ok(payloads);
    }
    Ok(Vec::new())
}

/// Evaluation outcome: the comparison table plus checkpoint selection data.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvaluateOutcome {
    pub table_csv: PathBuf,
    pub table_json: PathBuf,
    pub best_checkpoints: BTreeMap<String, (usize, f64)>,
    pub deployable_checkpoint: Option<usize>,
    /// Set when no checkpoints were found and the final artifact was scored
    /// instead.
    pub checkpoint_fallback: bool,
}

/// Evaluates blank / obfuscated / original conditions on the test split.
///
/// Reference outputs come from the original prompt under the base seed
/// family; the obfuscated condition is scored per checkpoint and the best
/// value per metric reported (max for higher-is-better, min otherwise); the
/// original condition is regenerated under a different seed family.
pub fn run_evaluate(cfg: &ExperimentConfig, artifact: &Path) -> Result<EvaluateOutcome> {
    cfg.validate()?;
    let ws = Workspace::load(cfg)?;
    let model = ws.gateway();
    let suite = MetricSuite::native(Arc::new(HashEmbeddingProvider::new(
        cfg.evaluation.provider_dim,
    )));
    let k = cfg.evaluation.k_samples;
    let sampling = cfg.evaluation.sampling.clone();
    let (seed_ref, seed_cond, mut seed_reseed) = eval_seed_families(sampling.seed);
    if cfg.evaluation.self_check {
        seed_reseed = seed_ref;
    }
    let user_texts = ws.test_user_texts();
    if user_texts.is_empty() {
        return Err(Error::ConfigError("test split is empty".into()));
    }

    let original = ws.original_payload()?;
    let references = generate_outputs(model, Some(&original), &user_texts, &sampling, k, seed_ref)?;

    let blank = evaluate_condition(
        model,
        None,
        &user_texts,
        &references,
        &sampling,
        k,
        seed_cond,
        &suite,
    )?;
    let original_rescored = evaluate_condition(
        model,
        Some(&original),
        &user_texts,
        &references,
        &sampling,
        k,
        seed_reseed,
        &suite,
    )?;

    let out_dir = &cfg.output_dir;
    std::fs::create_dir_all(out_dir)?;
    let mut checkpoints = load_checkpoints(out_dir, model)?;
    let stride = cfg.evaluation.checkpoint_stride.max(1);
    if !checkpoints.is_empty() && stride > 1 {
        let last = checkpoints.len() - 1;
        checkpoints = checkpoints
            .into_iter()
            .enumerate()
            .filter(|(i, _)| i % stride == 0 || *i == last)
            .map(|(_, c)| c)
            .collect();
    }
    let checkpoint_fallback = checkpoints.is_empty();
    if checkpoint_fallback {
        checkpoints.push(load_prompt_artifact(artifact, model, false)?);
    }

    let mut checkpoint_scores = Vec::with_capacity(checkpoints.len());
    for payload in &checkpoints {
        let cond = evaluate_condition(
            model,
            Some(payload),
            &user_texts,
            &references,
            &sampling,
            k,
            seed_cond,
            &suite,
        )?;
        checkpoint_scores.push(cond.per_metric);
    }
    let best = per_metric_best(&checkpoint_scores);
    let deployable = select_deployable(&checkpoint_scores);

    let obf_best = crate::metrics::ConditionScores {
        per_metric: best.iter().map(|(k, (_, v))| (k.clone(), *v)).collect(),
        failures: 0,
        samples_scored: user_texts.len(),
    };
    let table = ScoreTable::from_conditions(&blank, &obf_best, &original_rescored);
    let table_csv = out_dir.join("score_table.csv");
    let table_json = out_dir.join("score_table.json");
    table.write_csv(&table_csv)?;
    table.write_json(&table_json)?;
    serde_json::to_writer_pretty(
        std::fs::File::create(out_dir.join("checkpoint_scores.json"))?,
        &checkpoint_scores,
    )?;
    serde_json::to_writer_pretty(
        std::fs::File::create(out_dir.join("best_checkpoints.json"))?,
        &serde_json::json!({
            "per_metric": best,
            "deployable": deployable,
            "checkpoint_fallback": checkpoint_fallback,
        }),
    )?;

    Ok(EvaluateOutcome {
        table_csv,
        table_json,
        best_checkpoints: best,
        deployable_checkpoint: deployable,
        checkpoint_fallback,
    })
}

/// Which deobfuscation attack to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Inject,
    Project,
    FluencySoft,
    FluencyHard,
}

impl std::str::FromStr for AttackKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "inject" => Ok(Self::Inject),
            "project" => Ok(Self::Project),
            "fluency_soft" => Ok(Self::FluencySoft),
            "fluency_hard" => Ok(Self::FluencyHard),
            other => Err(Error::ConfigError(format!(
                "unknown attack {other:?} (inject, project, fluency_soft, fluency_hard)"
            ))),
        }
    }
}

/// Report emitted by one attack run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackOutcome {
    pub kind: AttackKind,
    pub report_path: PathBuf,
    pub summary: serde_json::Value,
}

fn soft_artifact(artifact: &Path, model: &dyn ModelGateway) -> Result<SoftPrompt> {
    if artifact.extension().and_then(|e| e.to_str()) != Some("sobf") {
        return Err(Error::ConfigError(
            "white-box attacks need a soft prompt artifact (.sobf)".into(),
        ));
    }
    let soft = deserialize_soft(artifact)?;
    soft.check_model(model)?;
    Ok(soft)
}

/// Runs one deobfuscation attack against a prompt artifact and writes its
/// report files. Prompt-similarity scoring against the original text
/// happens here, on the evaluation side; the attacks themselves never see
/// it.
pub fn run_attack(
    cfg: &ExperimentConfig,
    artifact: &Path,
    kind: AttackKind,
) -> Result<AttackOutcome> {
    cfg.validate()?;
    let ws = Workspace::load(cfg)?;
    let model = ws.gateway();
    let out_dir = &cfg.output_dir;
    std::fs::create_dir_all(out_dir)?;
    let provider = HashEmbeddingProvider::new(cfg.evaluation.provider_dim);

    // Equal-length random token baseline for prompt-similarity comparisons.
    let rand_baseline = |len: usize| -> Result<String> {
        let tokens = random_hard_init(len.max(1), model, cfg.attack.seed ^ 0x5eed)?;
        Ok(model.detokenize(&tokens.token_ids))
    };

    match kind {
        AttackKind::Inject => {
            let queries_path = cfg.attack.queries_path.as_ref().ok_or_else(|| {
                Error::ConfigError("attack.queries_path is required for inject".into())
            })?;
            let queries = load_attack_queries(queries_path)?;
            let payload = load_prompt_artifact(artifact, model, false)?;
            let ranker = NllRanker::new(model);
            let sampling = cfg.evaluation.sampling.clone().with_seed(cfg.attack.seed);
            let (attempts, failures) = run_injection_attack(
                model,
                Some(&payload),
                &queries,
                cfg.attack.k,
                &sampling,
                &ranker,
            )?;
            let summary = summarize_extraction(
                &attempts,
                failures,
                &ws.system_text,
                cfg.attack.approx_threshold,
                model,
            )?;

            let attempts_path = out_dir.join("attack_inject_attempts.jsonl");
            let mut f = std::io::BufWriter::new(std::fs::File::create(&attempts_path)?);
            for a in &attempts {
                serde_json::to_writer(&mut f, a)?;
                f.write_all(b"\n")?;
            }
            f.flush()?;
            let report_path = out_dir.join("attack_inject_summary.csv");
            let mut f = std::fs::File::create(&report_path)?;
            writeln!(f, "style,exact_count,approx_count")?;
            writeln!(
                f,
                "{},{},{}",
                ws.spec.style.replace(',', ";"),
                summary.exact_count,
                summary.approx_count
            )?;
            Ok(AttackOutcome {
                kind,
                report_path,
                summary: serde_json::to_value(&summary)?,
            })
        }
        AttackKind::Project => {
            let soft = soft_artifact(artifact, model)?;
            let rand_text = rand_baseline(soft.len())?;
            let rand_scores = prompt_scores(&rand_text, &ws.system_text, &provider)?;
            let mut recovered = serde_json::Map::new();
            let mut projected = Vec::new();
            for (name, metric) in [
                ("euclidean", ProjectionMetric::Euclidean),
                ("cosine", ProjectionMetric::Cosine),
            ] {
                let proj = project_tokens(&soft, model, metric)?;
                let text = model.detokenize(&proj.tokens.token_ids);
                let scores = prompt_scores(&text, &ws.system_text, &provider)?;
                recovered.insert(name.to_string(), serde_json::Value::String(text));
                projected.push(scores);
            }
            let pick = |s: &crate::metrics::PromptScores, name: &str| match name {
                "levenshtein_sim" => s.levenshtein_sim,
                "lcs_ratio" => s.lcs_ratio,
                "jaccard" => s.jaccard,
                _ => s.cosine,
            };
            let mut rows = Vec::new();
            for metric_name in ["levenshtein_sim", "lcs_ratio", "jaccard", "cosine"] {
                rows.push(serde_json::json!({
                    "metric": metric_name,
                    "rand": pick(&rand_scores, metric_name),
                    "euclidean": pick(&projected[0], metric_name),
                    "cosine": pick(&projected[1], metric_name),
                }));
            }
            let report_path = out_dir.join("attack_project.csv");
            let mut f = std::fs::File::create(&report_path)?;
            writeln!(f, "metric,rand,euclidean_proj,cosine_proj")?;
            for r in &rows {
                writeln!(
                    f,
                    "{},{:.6},{:.6},{:.6}",
                    r["metric"].as_str().unwrap(),
                    r["rand"].as_f64().unwrap(),
                    r["euclidean"].as_f64().unwrap(),
                    r["cosine"].as_f64().unwrap()
                )?;
            }
            let summary = serde_json::json!({"rows": rows, "recovered": recovered});
            serde_json::to_writer_pretty(
                std::fs::File::create(out_dir.join("attack_project.json"))?,
                &summary,
            )?;
            Ok(AttackOutcome {
                kind,
                report_path,
                summary,
            })
        }
        AttackKind::FluencySoft | AttackKind::FluencyHard => {
            let gradient = ws.gradient()?;
            let soft = soft_artifact(artifact, gradient)?;
            // Attacker-held samples: the test split, unseen by the defender.
            let attacker_texts = ws.test_user_texts();
            if attacker_texts.is_empty() {
                return Err(Error::ConfigError("test split is empty".into()));
            }
            let mut loop_cfg = cfg.obfuscation.loop_cfg.clone();
            loop_cfg.init_len = soft.len();
            let target_sampling = SamplingConfig::greedy(loop_cfg.output_budget);

            let (recovered, label) = match kind {
                AttackKind::FluencySoft => {
                    let mut opt = cfg.obfuscation.soft_opt.clone();
                    opt.seed = cfg.attack.seed;
                    let (tokens, _trace) = fluency_attack_soft(
                        gradient,
                        &soft,
                        &attacker_texts,
                        loop_cfg,
                        &opt,
                        &target_sampling,
                    )?;
                    (tokens, "fluency_soft")
                }
                _ => {
                    let mut gcg = cfg.obfuscation.gcg.clone();
                    gcg.seed = cfg.attack.seed;
                    if gcg.forbid.is_empty() {
                        gcg.forbid = gradient.special_token_ids().clone();
                    }
                    gcg.top_k = gcg.top_k.min(gradient.vocab_size());
                    let (tokens, _trace) = fluency_attack_hard(
                        gradient,
                        &soft,
                        &attacker_texts,
                        loop_cfg,
                        &gcg,
                        &target_sampling,
                    )?;
                    (tokens, "fluency_hard")
                }
            };
            let text = model.detokenize(&recovered.token_ids);
            let deobf_scores = prompt_scores(&text, &ws.system_text, &provider)?;
            let rand_text = rand_baseline(recovered.len())?;
            let rand_scores = prompt_scores(&rand_text, &ws.system_text, &provider)?;

            let report_path = out_dir.join(format!("attack_{label}.csv"));
            let mut f = std::fs::File::create(&report_path)?;
            writeln!(f, "metric,rand,deobf")?;
            for (name, r, d) in [
                (
                    "levenshtein_sim",
                    rand_scores.levenshtein_sim,
                    deobf_scores.levenshtein_sim,
                ),
                ("lcs_ratio", rand_scores.lcs_ratio, deobf_scores.lcs_ratio),
                ("jaccard", rand_scores.jaccard, deobf_scores.jaccard),
                ("cosine", rand_scores.cosine, deobf_scores.cosine),
            ] {
                writeln!(f, "{name},{r:.6},{d:.6}")?;
            }
            let summary = serde_json::json!({
                "recovered_text": text,
                "rand_mean": rand_scores.mean(),
                "deobf_mean": deobf_scores.mean(),
            });
            serde_json::to_writer_pretty(
                std::fs::File::create(out_dir.join(format!("attack_{label}.json")))?,
                &summary,
            )?;
            Ok(AttackOutcome {
                kind,
                report_path,
                summary,
            })
        }
    }
}

/// Renders the stored tables of a run directory as text.
pub fn run_report(output_dir: &Path) -> Result<String> {
    let mut report = String::new();
    let table_json = output_dir.join("score_table.json");
    if table_json.exists() {
        let table: ScoreTable = serde_json::from_reader(std::fs::File::open(&table_json)?)?;
        report.push_str("output similarity (blank | obf | original)\n");
        for row in &table.rows {
            let fmt = |v: Option<f64>| v.map_or("   N/A  ".to_string(), |x| format!("{x:8.4}"));
            report.push_str(&format!(
                "  {:14} {}  {} | {} | {}\n",
                row.metric,
                row.orientation.arrow(),
                fmt(row.blank),
                fmt(row.obf),
                fmt(row.original)
            ));
        }
    }
    for name in [
        "attack_inject_summary.csv",
        "attack_project.csv",
        "attack_fluency_soft.csv",
        "attack_fluency_hard.csv",
    ] {
        let path = output_dir.join(name);
        if path.exists() {
            report.push_str(&format!("\n{name}\n"));
            for line in std::fs::read_to_string(&path)?.lines() {
                report.push_str(&format!("  {line}\n"));
            }
        }
    }
    if report.is_empty() {
        report.push_str("no reportable artifacts found\n");
    }
    Ok(report)
}
