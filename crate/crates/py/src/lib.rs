//! Python bindings: the tiny backend, both obfuscators, projection, match
//! detectors, similarity metrics, and SOBF file I/O.

use std::collections::BTreeMap;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use promptveil::deobfuscation;
use promptveil::gcg::{obfuscate_hard, GcgConfig};
use promptveil::metrics;
use promptveil::model::{
    ChatTemplate, ModelGateway, SamplingConfig, SegmentPayload, TinyConfig, TinyTransformer,
};
use promptveil::objective::{chat_input, ObfuscationConfig, ObjectiveContext};
use promptveil::projection::{project_rows, ProjectionMetric};
use promptveil::prompt::{deserialize_soft, serialize_soft, HardPrompt, SoftPrompt};
use promptveil::soft::{obfuscate_soft, SoftOptConfig};

fn to_py_err(e: promptveil::Error) -> PyErr {
    if e.exit_code() == 2 {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

fn rows_to_vec(rows: &ndarray::Array2<f32>) -> Vec<Vec<f32>> {
    rows.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn vec_to_rows(rows: Vec<Vec<f64>>) -> PyResult<ndarray::Array2<f64>> {
    let t = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != d) {
        return Err(PyValueError::new_err("ragged row matrix"));
    }
    ndarray::Array2::from_shape_vec((t, d), rows.into_iter().flatten().collect())
        .map_err(|e| PyValueError::new_err(e.to_string()))
}

/// The in-repo seeded transformer backend.
#[pyclass(name = "TinyModel")]
struct PyTinyModel {
    inner: TinyTransformer,
}

#[pymethods]
impl PyTinyModel {
    #[new]
    #[pyo3(signature = (vocab_size=256, embed_dim=24, n_layers=2, seed=0, max_context=512, emb_scale=0.5))]
    fn new(
        vocab_size: usize,
        embed_dim: usize,
        n_layers: usize,
        seed: u64,
        max_context: usize,
        emb_scale: f64,
    ) -> PyResult<Self> {
        let inner = TinyTransformer::new(
            TinyConfig {
                vocab_size,
                embed_dim,
                n_layers,
                max_context,
                emb_scale,
                seed,
            },
            ChatTemplate::default_tiny(),
        )
        .map_err(to_py_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.inner.vocab_size()
    }

    #[getter]
    fn embed_dim(&self) -> usize {
        self.inner.embed_dim()
    }

    #[getter]
    fn fingerprint(&self) -> String {
        self.inner.fingerprint().to_string()
    }

    fn tokenize(&self, text: &str) -> PyResult<Vec<u32>> {
        Ok(self.inner.tokenize(text).map_err(to_py_err)?.token_ids)
    }

    fn detokenize(&self, tokens: Vec<u32>) -> String {
        self.inner.detokenize(&tokens)
    }

    fn embed(&self, tokens: Vec<u32>) -> PyResult<Vec<Vec<f32>>> {
        let soft = self
            .inner
            .embed(&HardPrompt::new(tokens))
            .map_err(to_py_err)?;
        Ok(rows_to_vec(&soft.rows))
    }

    #[pyo3(signature = (user, system=None, soft_system=None, max_new_tokens=32, seed=0, top_p=0.95, temperature=0.7, greedy=false))]
    #[allow(clippy::too_many_arguments)]
    fn generate(
        &self,
        user: &str,
        system: Option<&str>,
        soft_system: Option<Vec<Vec<f64>>>,
        max_new_tokens: usize,
        seed: u64,
        top_p: f64,
        temperature: f64,
        greedy: bool,
    ) -> PyResult<String> {
        let payload = match (system, soft_system) {
            (Some(_), Some(_)) => {
                return Err(PyValueError::new_err(
                    "pass either system or soft_system, not both",
                ))
            }
            (Some(text), None) => Some(SegmentPayload::Hard(
                self.inner.tokenize(text).map_err(to_py_err)?.token_ids,
            )),
            (None, Some(rows)) => Some(SegmentPayload::Soft(vec_to_rows(rows)?)),
            (None, None) => None,
        };
        let user_tokens = self.inner.tokenize(user).map_err(to_py_err)?.token_ids;
        let input = chat_input(payload, user_tokens);
        let cfg = SamplingConfig {
            top_p,
            temperature,
            max_new_tokens,
            seed,
            greedy,
        };
        self.inner.generate(&input, &cfg).map_err(to_py_err)
    }

    fn sequence_nll(&self, tokens: Vec<u32>) -> PyResult<f64> {
        self.inner.sequence_nll(&tokens).map_err(to_py_err)
    }
}

fn build_context<'m>(
    model: &'m TinyTransformer,
    system_text: &str,
    user_texts: Vec<String>,
    cfg: ObfuscationConfig,
) -> PyResult<ObjectiveContext<'m>> {
    let payload = SegmentPayload::Hard(model.tokenize(system_text).map_err(to_py_err)?.token_ids);
    let sampling = SamplingConfig::greedy(cfg.output_budget);
    let mut targets = Vec::with_capacity(user_texts.len());
    for user in &user_texts {
        let tokens = model.tokenize(user).map_err(to_py_err)?.token_ids;
        let input = chat_input(Some(payload.clone()), tokens);
        let mut out = model
            .generate_tokens(&input, &sampling)
            .map_err(to_py_err)?;
        out.truncate(cfg.output_budget);
        targets.push((user.clone(), out));
    }
    ObjectiveContext::new(model, Some(&payload), &targets, cfg).map_err(to_py_err)
}

/// Soft-prompt obfuscation of `system_text` against greedy targets on
/// `user_texts`. Returns `(rows, per_step_totals)`.
#[pyfunction]
#[pyo3(signature = (model, system_text, user_texts, iterations=10, output_budget=15, window=5, init_len=10, seed=0, learning_rate=0.01))]
#[allow(clippy::too_many_arguments)]
fn obfuscate_soft_prompt(
    model: &PyTinyModel,
    system_text: &str,
    user_texts: Vec<String>,
    iterations: usize,
    output_budget: usize,
    window: usize,
    init_len: usize,
    seed: u64,
    learning_rate: f64,
) -> PyResult<(Vec<Vec<f32>>, Vec<f64>)> {
    let cfg = ObfuscationConfig {
        iterations,
        output_budget,
        window,
        init_len,
        ..Default::default()
    };
    let ctx = build_context(&model.inner, system_text, user_texts, cfg)?;
    let opt = SoftOptConfig {
        learning_rate,
        seed,
        ..Default::default()
    };
    let (prompt, trace) = obfuscate_soft(&ctx, &opt).map_err(to_py_err)?;
    let losses = trace.steps.iter().map(|s| s.loss.total).collect();
    Ok((rows_to_vec(&prompt.rows), losses))
}

/// Hard-prompt obfuscation. Returns `(token_ids, text, per_step_totals)`.
#[pyfunction]
#[pyo3(signature = (model, system_text, user_texts, iterations=10, output_budget=15, window=5, init_len=10, seed=0, top_k=64, num_candidates=32, fluency_weight=0.0))]
#[allow(clippy::too_many_arguments)]
fn obfuscate_hard_prompt(
    model: &PyTinyModel,
    system_text: &str,
    user_texts: Vec<String>,
    iterations: usize,
    output_budget: usize,
    window: usize,
    init_len: usize,
    seed: u64,
    top_k: usize,
    num_candidates: usize,
    fluency_weight: f64,
) -> PyResult<(Vec<u32>, String, Vec<f64>)> {
    let cfg = ObfuscationConfig {
        iterations,
        output_budget,
        window,
        init_len,
        fluency_weight,
        ..Default::default()
    };
    let ctx = build_context(&model.inner, system_text, user_texts, cfg)?;
    let gcg = GcgConfig {
        top_k: top_k.min(model.inner.vocab_size()),
        num_candidates,
        forbid: model.inner.special_token_ids().clone(),
        seed,
    };
    let (prompt, trace) = obfuscate_hard(&ctx, &gcg).map_err(to_py_err)?;
    let losses = trace.steps.iter().map(|s| s.loss.total).collect();
    let text = model.inner.detokenize(&prompt.token_ids);
    Ok((prompt.token_ids, text, losses))
}

/// Nearest-token projection of embedding rows; `metric` is `"euclidean"`
/// or `"cosine"`.
#[pyfunction]
#[pyo3(signature = (model, rows, metric="euclidean"))]
fn project_tokens(model: &PyTinyModel, rows: Vec<Vec<f64>>, metric: &str) -> PyResult<Vec<u32>> {
    let metric = match metric {
        "euclidean" => ProjectionMetric::Euclidean,
        "cosine" => ProjectionMetric::Cosine,
        other => return Err(PyValueError::new_err(format!("unknown metric {other:?}"))),
    };
    let rows = vec_to_rows(rows)?;
    let proj = project_rows(&rows.view(), &model.inner, metric).map_err(to_py_err)?;
    Ok(proj.tokens.token_ids)
}

/// Sentence-level exact-match extraction detector.
#[pyfunction]
fn exact_match(true_prompt: &str, guess: &str) -> bool {
    deobfuscation::exact_match(true_prompt, guess)
}

/// Token-LCS approximate-match extraction detector (byte tokenizer).
#[pyfunction]
#[pyo3(signature = (model, true_prompt, guess, threshold=0.9))]
fn approx_match(
    model: &PyTinyModel,
    true_prompt: &str,
    guess: &str,
    threshold: f64,
) -> PyResult<bool> {
    deobfuscation::approx_match(true_prompt, guess, threshold, &model.inner).map_err(to_py_err)
}

/// The six native output metrics for one candidate/reference pair.
#[pyfunction]
fn output_scores(candidate: &str, reference: &str) -> BTreeMap<String, f64> {
    let lex = metrics::lexical_scores(candidate, reference);
    let ch = metrics::char_scores(candidate, reference);
    let provider = metrics::HashEmbeddingProvider::default();
    let sem = metrics::semantic_scores(candidate, reference, &provider)
        .expect("hash provider cannot fail");
    BTreeMap::from([
        ("bleu".to_string(), lex.bleu),
        ("rouge_l".to_string(), lex.rouge_l),
        ("nist".to_string(), lex.nist),
        ("character_er".to_string(), ch.character_er),
        ("chrf".to_string(), ch.chrf),
        ("cosine".to_string(), sem.cosine),
    ])
}

/// The four prompt-similarity metrics for one candidate/reference pair.
#[pyfunction]
fn prompt_similarity(candidate: &str, reference: &str) -> PyResult<BTreeMap<String, f64>> {
    let provider = metrics::HashEmbeddingProvider::default();
    let s = metrics::prompt_scores(candidate, reference, &provider).map_err(to_py_err)?;
    Ok(BTreeMap::from([
        ("levenshtein_sim".to_string(), s.levenshtein_sim),
        ("lcs_ratio".to_string(), s.lcs_ratio),
        ("jaccard".to_string(), s.jaccard),
        ("cosine".to_string(), s.cosine),
    ]))
}

/// Writes a soft prompt to a SOBF file.
#[pyfunction]
fn write_sobf(path: &str, rows: Vec<Vec<f64>>, fingerprint: &str) -> PyResult<()> {
    let rows = vec_to_rows(rows)?.mapv(|v| v as f32);
    let soft = SoftPrompt::new(rows, fingerprint).map_err(to_py_err)?;
    serialize_soft(&soft, std::path::Path::new(path)).map_err(to_py_err)
}

/// Reads a SOBF file; returns `(rows, fingerprint)`.
#[pyfunction]
fn read_sobf(path: &str) -> PyResult<(Vec<Vec<f32>>, String)> {
    let soft = deserialize_soft(std::path::Path::new(path)).map_err(to_py_err)?;
    Ok((rows_to_vec(&soft.rows), soft.model_fingerprint))
}

#[pymodule]
fn promptveil_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTinyModel>()?;
    m.add_function(wrap_pyfunction!(obfuscate_soft_prompt, m)?)?;
    m.add_function(wrap_pyfunction!(obfuscate_hard_prompt, m)?)?;
    m.add_function(wrap_pyfunction!(project_tokens, m)?)?;
    m.add_function(wrap_pyfunction!(exact_match, m)?)?;
    m.add_function(wrap_pyfunction!(approx_match, m)?)?;
    m.add_function(wrap_pyfunction!(output_scores, m)?)?;
    m.add_function(wrap_pyfunction!(prompt_similarity, m)?)?;
    m.add_function(wrap_pyfunction!(write_sobf, m)?)?;
    m.add_function(wrap_pyfunction!(read_sobf, m)?)?;
    Ok(())
}
