//! Hard-prompt obfuscation: the windowed loop with greedy coordinate
//! gradient token substitution.
//!
//! Each iteration linearizes the window loss through the one-hot token
//! relaxation, proposes single-token substitutions from the most negative
//! gradient entries, evaluates every candidate, and keeps the best. The
//! incumbent prompt is always in the candidate pool, so the accepted loss is
//! non-increasing within a window.

use std::collections::BTreeSet;

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{embed_ids, GradientModel};
use crate::numeric::{log_softmax, softmax};
use crate::objective::{LossBreakdown, ObjectiveContext, Window};
use crate::prompt::{random_hard_init, HardPrompt};

/// Candidate-proposal settings for the coordinate search.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GcgConfig {
    /// Candidate tokens per position, taken from the most negative gradient
    /// entries.
    pub top_k: usize,
    /// Single-substitution candidates sampled per step.
    pub num_candidates: usize,
    /// Token ids never proposed (special tokens).
    #[serde(default)]
    pub forbid: BTreeSet<u32>,
    pub seed: u64,
}

impl Default for GcgConfig {
    fn default() -> Self {
        Self {
            top_k: 256,
            num_candidates: 128,
            forbid: BTreeSet::new(),
            seed: 0,
        }
    }
}

impl GcgConfig {
    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if self.top_k == 0 || self.top_k > vocab_size {
            return Err(Error::ConfigError(format!(
                "top_k must be in [1, {vocab_size}], got {}",
                self.top_k
            )));
        }
        if self.num_candidates == 0 {
            return Err(Error::ConfigError("num_candidates must be >= 1".into()));
        }
        Ok(())
    }
}

/// One optimizer step record; serializes flat as
/// `{window, iter, position, old_token, new_token, ce, kl, fluency, total}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceStep {
    pub window: usize,
    #[serde(rename = "iter")]
    pub iteration: usize,
    /// Substitution applied this step; `None` when the incumbent was kept.
    pub position: Option<usize>,
    pub old_token: Option<u32>,
    pub new_token: Option<u32>,
    #[serde(flatten)]
    pub loss: LossBreakdown,
}

/// A checkpoint taken after one optimizer step.
#[derive(Debug, Clone)]
pub struct Checkpoint<C> {
    pub step: usize,
    pub window: usize,
    pub iteration: usize,
    pub prompt: C,
}

/// Full optimization record: per-step losses plus per-step prompt snapshots.
#[derive(Debug, Clone)]
pub struct ObfuscationTrace<C> {
    pub steps: Vec<TraceStep>,
    pub checkpoints: Vec<Checkpoint<C>>,
}

impl<C> Default for ObfuscationTrace<C> {
    fn default() -> Self {
        Self {
            steps: Vec::new(),
            checkpoints: Vec::new(),
        }
    }
}

impl<C> ObfuscationTrace<C> {
    /// Serializes the step records as JSONL, one step per line.
    pub fn write_steps_jsonl(&self, path: &std::path::Path) -> Result<()> {
        use std::io::Write;
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for step in &self.steps {
            serde_json::to_writer(&mut f, step)?;
            f.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Lifts embedding-row gradients to one-hot coordinates:
/// `G[i][v] = <row_grads[i], table[v]>`.
pub fn onehot_gradients(row_grads: &Array2<f64>, table: ArrayView2<'_, f32>) -> Array2<f64> {
    let (t, d) = (row_grads.nrows(), row_grads.ncols());
    let vocab = table.nrows();
    let mut out = Array2::<f64>::zeros((t, vocab));
    for i in 0..t {
        for v in 0..vocab {
            let mut acc = 0.0;
            for j in 0..d {
                acc += row_grads[[i, j]] * f64::from(table[[v, j]]);
            }
            out[[i, v]] = acc;
        }
    }
    out
}

/// Gradient of the window loss (plus the weighted fluency NLL when enabled)
/// with respect to the one-hot token encoding of `prompt`.
///
/// Entry `(i, v)` linearizes the effect of substituting token `v` at
/// position `i`.
pub fn token_gradients(
    ctx: &ObjectiveContext<'_>,
    prompt: &HardPrompt,
    window: Window,
    subset: &[usize],
) -> Result<Array2<f64>> {
    let model = ctx.model();
    let payload = crate::model::SegmentPayload::Hard(prompt.token_ids.clone());
    let row_grads = ctx.payload_window_gradient(&payload, window, subset)?;
    let mut grads = onehot_gradients(&row_grads, model.embedding_table());

    let weight = ctx.config().fluency_weight;
    if weight != 0.0 && prompt.len() >= 2 {
        add_nll_onehot_gradient(model, prompt, weight, &mut grads)?;
    }
    if !grads.iter().all(|v| v.is_finite()) {
        return Err(Error::NumericError("non-finite token gradients".into()));
    }
    Ok(grads)
}

/// Adds the one-hot-relaxed gradient of `weight * mean-NLL(prompt)`.
///
/// The NLL is linear in the one-hot targets (`-sum_j <onehot(x_j), logp_j>`)
/// and differentiable through the embedding rows, so both paths contribute.
fn add_nll_onehot_gradient(
    model: &dyn GradientModel,
    prompt: &HardPrompt,
    weight: f64,
    grads: &mut Array2<f64>,
) -> Result<()> {
    let t = prompt.len();
    let ids = &prompt.token_ids;
    let norm = 1.0 / (t - 1) as f64;
    let rows = embed_ids(model, &ids[..t - 1])?;
    let logits = model.forward_rows(rows.view())?;

    // Target-selection path.
    for i in 1..t {
        let lp = log_softmax(&logits.row(i - 1).to_vec());
        for (v, &l) in lp.iter().enumerate() {
            grads[[i, v]] += weight * (-l * norm);
        }
    }

    // Embedding path.
    let mut dlogits = Array2::<f64>::zeros(logits.raw_dim());
    for j in 1..t {
        let probs = softmax(&logits.row(j - 1).to_vec());
        for (v, &p) in probs.iter().enumerate() {
            let onehot = if v == ids[j] as usize { 1.0 } else { 0.0 };
            dlogits[[j - 1, v]] = (p - onehot) * norm;
        }
    }
    let drows = model.rows_vjp(rows.view(), dlogits.view())?;
    let table = model.embedding_table();
    let lifted = onehot_gradients(&drows, table);
    for i in 0..t - 1 {
        for v in 0..table.nrows() {
            grads[[i, v]] += weight * lifted[[i, v]];
        }
    }
    Ok(())
}

/// Samples `num_candidates` single-token substitutions. Each candidate picks
/// a uniform random position and one of the `top_k` most-negative-gradient
/// tokens there (forbidden ids removed). Duplicates are allowed.
pub fn propose_candidates(
    grad_matrix: &Array2<f64>,
    prompt: &HardPrompt,
    cfg: &GcgConfig,
    rng: &mut ChaCha12Rng,
) -> Result<Vec<HardPrompt>> {
    let t = prompt.len();
    if grad_matrix.nrows() != t {
        return Err(Error::NumericError(format!(
            "gradient matrix has {} rows for a prompt of length {t}",
            grad_matrix.nrows()
        )));
    }
    let vocab = grad_matrix.ncols();
    let allowed: Vec<u32> = (0..vocab as u32)
        .filter(|id| !cfg.forbid.contains(id))
        .collect();
    if allowed.is_empty() {
        return Err(Error::NoCandidates);
    }

    // Per position: the top_k allowed ids by ascending gradient, id ascending
    // on ties.
    let shortlist: Vec<Vec<u32>> = (0..t)
        .map(|i| {
            let mut ids = allowed.clone();
            ids.sort_by(|&a, &b| {
                grad_matrix[[i, a as usize]]
                    .partial_cmp(&grad_matrix[[i, b as usize]])
                    .unwrap()
                    .then(a.cmp(&b))
            });
            ids.truncate(cfg.top_k);
            ids
        })
        .collect();

    let mut candidates = Vec::with_capacity(cfg.num_candidates);
    for _ in 0..cfg.num_candidates {
        let pos = rng.random_range(0..t);
        let token = shortlist[pos][rng.random_range(0..shortlist[pos].len())];
        let mut ids = prompt.token_ids.clone();
        ids[pos] = token;
        candidates.push(HardPrompt::new(ids));
    }
    Ok(candidates)
}

/// Evaluates the incumbent plus all candidates and returns the lowest-total
/// prompt. The incumbent sits at pool index 0 and ties resolve to the lowest
/// pool index, so the accepted loss never increases.
pub fn gcg_step<F>(
    prompt: &HardPrompt,
    candidates: &[HardPrompt],
    loss_fn: F,
) -> Result<(HardPrompt, LossBreakdown)>
where
    F: Fn(&HardPrompt) -> Result<LossBreakdown> + Sync,
{
    if candidates.is_empty() {
        return Err(Error::NoCandidates);
    }
    let pool: Vec<&HardPrompt> = std::iter::once(prompt).chain(candidates.iter()).collect();
    let losses: Vec<LossBreakdown> = pool
        .par_iter()
        .map(|p| loss_fn(p))
        .collect::<Result<Vec<_>>>()?;
    let mut best = 0usize;
    for (i, loss) in losses.iter().enumerate() {
        if loss.total < losses[best].total {
            best = i;
        }
    }
    Ok((pool[best].clone(), losses[best]))
}

/// Runs the full windowed loop: `M = ceil(N/W)` windows of `K` iterations,
/// one coordinate substitution accepted per iteration, every iteration
/// checkpointed. The sample subset (when `batch_users` is set) is fixed per
/// window so accepted totals stay comparable within it.
pub fn obfuscate_hard(
    ctx: &ObjectiveContext<'_>,
    gcg: &GcgConfig,
) -> Result<(HardPrompt, ObfuscationTrace<HardPrompt>)> {
    let model = ctx.model();
    let init = random_hard_init(ctx.config().init_len, model, gcg.seed)?;
    obfuscate_hard_from(ctx, gcg, init)
}

/// As [`obfuscate_hard`] but starting from a given prompt (used by the
/// fluency deobfuscation attack, which starts from a projection).
pub fn obfuscate_hard_from(
    ctx: &ObjectiveContext<'_>,
    gcg: &GcgConfig,
    init: HardPrompt,
) -> Result<(HardPrompt, ObfuscationTrace<HardPrompt>)> {
    let model = ctx.model();
    let cfg = ctx.config().clone();
    cfg.validate()?;
    gcg.validate(model.vocab_size())?;

    let mut rng = ChaCha12Rng::seed_from_u64(gcg.seed.wrapping_add(0x9E37_79B9_7F4A_7C15));
    let mut prompt = init;
    let mut trace = ObfuscationTrace::default();
    let mut step = 0usize;
    for m in 0..cfg.num_windows() {
        let window = cfg.window_range(m);
        let subset = subset_for_window(ctx.samples().len(), cfg.batch_users, m, gcg.seed);
        for k in 0..cfg.iterations {
            let grads = token_gradients(ctx, &prompt, window, &subset)?;
            let candidates = propose_candidates(&grads, &prompt, gcg, &mut rng)?;
            let (best, loss) = gcg_step(&prompt, &candidates, |p| {
                ctx.window_loss_subset(
                    &crate::model::SegmentPayload::Hard(p.token_ids.clone()),
                    window,
                    &subset,
                )
            })?;
            let change = prompt
                .token_ids
                .iter()
                .zip(best.token_ids.iter())
                .position(|(a, b)| a != b);
            trace.steps.push(TraceStep {
                window: m,
                iteration: k,
                position: change,
                old_token: change.map(|i| prompt.token_ids[i]),
                new_token: change.map(|i| best.token_ids[i]),
                loss,
            });
            prompt = best;
            trace.checkpoints.push(Checkpoint {
                step,
                window: m,
                iteration: k,
                prompt: prompt.clone(),
            });
            step += 1;
        }
    }
    Ok((prompt, trace))
}

/// Deterministic per-window sample subset: a seeded shuffle of the sample
/// indices, rotated by window index. Full batch when `batch` is `None` or
/// covers everything.
pub fn subset_for_window(
    n_samples: usize,
    batch: Option<usize>,
    window_index: usize,
    seed: u64,
) -> Vec<usize> {
    match batch {
        Some(b) if b < n_samples => {
            let mut order: Vec<usize> = (0..n_samples).collect();
            let mut rng = ChaCha12Rng::seed_from_u64(seed.wrapping_add(0x5851_F42D_4C95_7F2D));
            for i in (1..order.len()).rev() {
                order.swap(i, rng.random_range(0..=i));
            }
            (0..b)
                .map(|j| order[(window_index * b + j) % n_samples])
                .collect()
        }
        _ => (0..n_samples).collect(),
    }
}
