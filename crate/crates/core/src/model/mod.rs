//! Model gateway: a uniform interface to a causal language model exposing
//! tokenization, the token-embedding lookup, forward passes from embedding
//! inputs, seeded generation, and sequence NLL scoring.
//!
//! The gateway is an interface. Desk-scale work runs on the in-repo
//! [`TinyTransformer`] backend (2 layers, small dims, seeded weights);
//! production adapters can wrap external runtimes behind the same trait.

mod adapter;
mod assemble;
mod echo;
mod sampling;
mod template;
mod tiny;

pub use adapter::{load_backend, Backend, ModelAdapterConfig};
pub use assemble::{assemble_chat, lower_input, AssembledInput, Lowered, Segment, SegmentPayload};
pub use echo::EchoModel;
pub use sampling::{greedy_pick, nucleus_pick, SamplingConfig};
pub use template::{ChatTemplate, Role, RoleDelims};
pub use tiny::{LayerParams, TinyConfig, TinyTransformer};

use std::collections::BTreeSet;

use ndarray::{Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::numeric::log_softmax;
use crate::prompt::{HardPrompt, SoftPrompt};

/// Uniform interface to a causal language model.
///
/// All operations are pure given (model weights, seed); a gateway is safe to
/// share across threads.
pub trait ModelGateway: Send + Sync {
    fn vocab_size(&self) -> usize;
    fn embed_dim(&self) -> usize;
    fn max_context(&self) -> usize;
    /// The token-embedding lookup table, `vocab_size x d`.
    fn embedding_table(&self) -> ArrayView2<'_, f32>;
    /// Ids excluded from random initialization and candidate substitution.
    fn special_token_ids(&self) -> &BTreeSet<u32>;
    /// End-of-turn id that stops generation, if the backend has one.
    fn eot_token_id(&self) -> Option<u32>;
    fn template(&self) -> &ChatTemplate;
    /// Hash binding artifacts to this model's embedding table.
    fn fingerprint(&self) -> &str;

    /// Tokenizes text, rejecting raw template-delimiter collisions.
    fn tokenize(&self, text: &str) -> Result<HardPrompt>;
    /// Tokenizes without the collision check (template strings themselves,
    /// attack-side scoring of arbitrary model output).
    fn tokenize_unchecked(&self, text: &str) -> Result<HardPrompt>;
    fn detokenize(&self, tokens: &[u32]) -> String;

    /// Token-embedding lookup: row i of the result is the table row for
    /// `tokens[i]`. Exact, since soft prompts store the table's own f32 rows.
    fn embed(&self, tokens: &HardPrompt) -> Result<SoftPrompt> {
        tokens.validate(self.vocab_size())?;
        let d = self.embed_dim();
        let table = self.embedding_table();
        let mut rows = Array2::<f32>::zeros((tokens.len().max(1), d));
        for (i, &id) in tokens.token_ids.iter().enumerate() {
            rows.row_mut(i).assign(&table.row(id as usize));
        }
        if tokens.is_empty() {
            rows = Array2::zeros((0, d));
        }
        Ok(SoftPrompt {
            rows,
            model_fingerprint: self.fingerprint().to_string(),
        })
    }

    /// Teacher-forced next-token logits: row j is the distribution after
    /// consuming `input` plus `teacher[..j]`.
    fn forward_logits(&self, input: &AssembledInput, teacher: &[u32]) -> Result<Array2<f64>>;

    /// Samples a continuation, stopping at the end-of-turn token or after
    /// `max_new_tokens`. Same seed and input give identical output.
    fn generate_tokens(&self, input: &AssembledInput, cfg: &SamplingConfig) -> Result<Vec<u32>>;

    fn generate(&self, input: &AssembledInput, cfg: &SamplingConfig) -> Result<String> {
        Ok(self.detokenize(&self.generate_tokens(input, cfg)?))
    }

    /// Mean negative log-likelihood per predicted token of a raw sequence.
    fn sequence_nll(&self, tokens: &[u32]) -> Result<f64>;
}

/// A gateway that additionally exposes raw row-level forward and
/// vector-Jacobian products, enabling gradient-based optimization.
pub trait GradientModel: ModelGateway {
    /// Logits at every position for a raw matrix of embedding rows.
    fn forward_rows(&self, rows: ArrayView2<'_, f64>) -> Result<Array2<f64>>;

    /// Given upstream gradients on every logits row, returns the gradient
    /// with respect to every input embedding row.
    fn rows_vjp(
        &self,
        rows: ArrayView2<'_, f64>,
        dlogits: ArrayView2<'_, f64>,
    ) -> Result<Array2<f64>>;
}

/// Exact f64 widening of the embedding rows for a hard token sequence.
pub fn embed_ids(model: &dyn ModelGateway, ids: &[u32]) -> Result<Array2<f64>> {
    let table = model.embedding_table();
    let d = model.embed_dim();
    let mut rows = Array2::<f64>::zeros((ids.len(), d));
    for (i, &id) in ids.iter().enumerate() {
        if id as usize >= model.vocab_size() {
            return Err(Error::InvalidToken {
                id,
                vocab_size: model.vocab_size(),
            });
        }
        for (j, &v) in table.row(id as usize).iter().enumerate() {
            rows[[i, j]] = f64::from(v);
        }
    }
    Ok(rows)
}

/// The full teacher-forced row matrix for `input` + `teacher`. The final
/// teacher token is an output only, so its row is never fed forward.
pub struct TeacherRows {
    pub rows: Array2<f64>,
    /// Number of leading rows that came from the assembled input.
    pub input_len: usize,
    /// Row range of the system segment payload within `rows`.
    pub system_payload_span: Option<std::ops::Range<usize>>,
}

pub fn teacher_rows(
    model: &dyn ModelGateway,
    input: &AssembledInput,
    teacher: &[u32],
) -> Result<TeacherRows> {
    if teacher.is_empty() {
        return Err(Error::DegenerateSequence { len: 0, min: 1 });
    }
    let lowered = lower_input(model, input)?;
    let n_in = lowered.len();
    if n_in == 0 {
        return Err(Error::DegenerateSequence { len: 0, min: 1 });
    }
    let teacher_emb = embed_ids(model, &teacher[..teacher.len() - 1])?;
    let total = n_in + teacher.len() - 1;
    if total > model.max_context() {
        return Err(Error::ContextOverflow {
            needed: total,
            max: model.max_context(),
        });
    }
    let mut rows = Array2::<f64>::zeros((total, model.embed_dim()));
    rows.slice_mut(ndarray::s![..n_in, ..])
        .assign(&lowered.rows);
    if teacher.len() > 1 {
        rows.slice_mut(ndarray::s![n_in.., ..]).assign(&teacher_emb);
    }
    Ok(TeacherRows {
        rows,
        input_len: n_in,
        system_payload_span: lowered.system_payload_span,
    })
}

/// Teacher-forced logits for a gradient backend, built from its row-level
/// forward.
pub fn teacher_forced_logits(
    model: &dyn GradientModel,
    input: &AssembledInput,
    teacher: &[u32],
) -> Result<Array2<f64>> {
    let forced = teacher_rows(model, input, teacher)?;
    let logits = model.forward_rows(forced.rows.view())?;
    Ok(logits
        .slice(ndarray::s![forced.input_len - 1.., ..])
        .to_owned())
}

/// Autoregressive generation for a gradient backend.
pub fn generate_rows(
    model: &dyn GradientModel,
    input: &AssembledInput,
    cfg: &SamplingConfig,
) -> Result<Vec<u32>> {
    cfg.validate()?;
    let lowered = lower_input(model, input)?;
    if lowered.is_empty() {
        return Err(Error::DegenerateSequence { len: 0, min: 1 });
    }
    if lowered.len() + cfg.max_new_tokens > model.max_context() {
        return Err(Error::ContextOverflow {
            needed: lowered.len() + cfg.max_new_tokens,
            max: model.max_context(),
        });
    }
    let d = model.embed_dim();
    let mut rows = lowered.rows;
    let mut out = Vec::new();
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    for _ in 0..cfg.max_new_tokens {
        let logits = model.forward_rows(rows.view())?;
        let last = logits.row(logits.nrows() - 1);
        let next = if cfg.greedy {
            greedy_pick(last)
        } else {
            let u: f64 = rng.random();
            nucleus_pick(last, cfg.top_p, cfg.temperature, u)
        };
        if Some(next) == model.eot_token_id() {
            break;
        }
        out.push(next);
        let emb = embed_ids(model, &[next])?;
        let mut grown = Array2::<f64>::zeros((rows.nrows() + 1, d));
        grown
            .slice_mut(ndarray::s![..rows.nrows(), ..])
            .assign(&rows);
        grown
            .row_mut(rows.nrows())
            .assign(&emb.index_axis(Axis(0), 0));
        rows = grown;
    }
    Ok(out)
}

/// Mean NLL of a raw token sequence for a gradient backend.
pub fn sequence_nll_rows(model: &dyn GradientModel, tokens: &[u32]) -> Result<f64> {
    if tokens.len() < 2 {
        return Err(Error::DegenerateSequence {
            len: tokens.len(),
            min: 2,
        });
    }
    let rows = embed_ids(model, &tokens[..tokens.len() - 1])?;
    let logits = model.forward_rows(rows.view())?;
    let mut total = 0.0;
    for (j, &target) in tokens.iter().enumerate().skip(1) {
        let row: Vec<f64> = logits.row(j - 1).to_vec();
        let lp = log_softmax(&row);
        total -= lp[target as usize];
    }
    Ok(total / (tokens.len() - 1) as f64)
}
