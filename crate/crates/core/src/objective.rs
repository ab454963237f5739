//! The collision loss: per-token cross-entropy plus KL divergence between a
//! reference prompt's and a candidate prompt's next-token behavior, windowed
//! over output positions, with an optional sequence-NLL fluency term.
//!
//! CE is teacher-forced on fixed target tokens (the cached greedy outputs of
//! the reference prompt); KL is forward, `KL(P_reference || P_candidate)`,
//! so the candidate is penalized for missing reference mass. Losses are
//! indexed by output position relative to the assistant-response start, so
//! differing system-prompt lengths never misalign positions.

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{teacher_rows, AssembledInput, GradientModel, ModelGateway, SegmentPayload};
use crate::numeric::log_softmax;
use crate::prompt::HardPrompt;

/// Optimization-loop shape shared by the hard and soft optimizers.
///
/// `iterations` (K) steps are run per window; the output budget of
/// `output_budget` (N) teacher-forced positions is covered by
/// `ceil(N / W)` windows of size `window` (W).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ObfuscationConfig {
    pub iterations: usize,
    pub output_budget: usize,
    pub window: usize,
    pub init_len: usize,
    /// Weight of the sequence-NLL term in the total: -1 pushes hard prompts
    /// toward unreadability, +1 is the deobfuscation readability direction,
    /// 0 disables the term.
    #[serde(default)]
    pub fluency_weight: f64,
    /// Number of user samples per loss evaluation; `None` uses all.
    #[serde(default)]
    pub batch_users: Option<usize>,
}

impl Default for ObfuscationConfig {
    fn default() -> Self {
        Self {
            iterations: 10,
            output_budget: 15,
            window: 5,
            init_len: 10,
            fluency_weight: 0.0,
            batch_users: None,
        }
    }
}

impl ObfuscationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::ConfigError("iterations (K) must be >= 1".into()));
        }
        if self.window == 0 || self.window > self.output_budget {
            return Err(Error::ConfigError(format!(
                "window (W = {}) must satisfy 1 <= W <= N = {}",
                self.window, self.output_budget
            )));
        }
        if self.init_len == 0 {
            return Err(Error::ConfigError("init_len must be >= 1".into()));
        }
        Ok(())
    }

    /// Number of windows, `M = ceil(N / W)`.
    pub fn num_windows(&self) -> usize {
        self.output_budget.div_ceil(self.window)
    }

    /// The m-th window as a 0-indexed half-open position range, clipped to N.
    pub fn window_range(&self, m: usize) -> Window {
        let start = m * self.window;
        Window {
            start,
            end: (start + self.window).min(self.output_budget),
        }
    }

    pub fn windows(&self) -> Vec<Window> {
        (0..self.num_windows())
            .map(|m| self.window_range(m))
            .collect()
    }
}

/// Half-open range of output positions (0-indexed relative to the
/// assistant-response start).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub start: usize,
    pub end: usize,
}

/// One loss evaluation split into its components.
/// `total = ce + kl + fluency_weight * fluency`.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub kl: f64,
    pub fluency: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn compose(ce: f64, kl: f64, fluency: f64, fluency_weight: f64) -> Self {
        Self {
            ce,
            kl,
            fluency,
            total: ce + kl + fluency_weight * fluency,
        }
    }
}

/// Per-token loss between one reference and one candidate logits row.
///
/// Returns `(ce, kl)` with `ce = -log softmax(candidate)[target]` and
/// `kl = KL(softmax(reference) || softmax(candidate))`, both computed in
/// log space.
pub fn token_loss(
    ref_logits: ArrayView1<'_, f64>,
    obf_logits: ArrayView1<'_, f64>,
    target_id: u32,
) -> Result<(f64, f64)> {
    if !ref_logits.iter().all(|v| v.is_finite()) || !obf_logits.iter().all(|v| v.is_finite()) {
        return Err(Error::NumericError(
            "non-finite logits in token_loss".into(),
        ));
    }
    let ref_lp = log_softmax(&ref_logits.to_vec());
    let obf_lp = log_softmax(&obf_logits.to_vec());
    Ok(token_loss_from_log_probs(&ref_lp, &obf_lp, target_id))
}

fn token_loss_from_log_probs(ref_lp: &[f64], obf_lp: &[f64], target_id: u32) -> (f64, f64) {
    let ce = -obf_lp[target_id as usize];
    let kl: f64 = ref_lp
        .iter()
        .zip(obf_lp.iter())
        .map(|(&r, &o)| {
            let p = r.exp();
            if p > 0.0 {
                p * (r - o)
            } else {
                0.0
            }
        })
        .sum();
    (ce, kl)
}

/// Mean sequence NLL of a token prompt under the model. The caller chooses
/// the sign via `fluency_weight`: -1 rewards unreadable prompts, +1 rewards
/// readable ones.
pub fn fluency_nll(model: &dyn ModelGateway, prompt: &HardPrompt) -> Result<f64> {
    model.sequence_nll(&prompt.token_ids)
}

/// Standard templated chat layout from an optional system payload and
/// pre-tokenized user input.
pub fn chat_input(system: Option<SegmentPayload>, user_tokens: Vec<u32>) -> AssembledInput {
    use crate::model::{Role, Segment};
    let mut segments = Vec::with_capacity(3);
    if let Some(payload) = system {
        segments.push(Segment {
            role: Role::System,
            payload,
        });
    }
    segments.push(Segment {
        role: Role::User,
        payload: SegmentPayload::Hard(user_tokens),
    });
    segments.push(Segment {
        role: Role::Assistant,
        payload: SegmentPayload::Hard(vec![]),
    });
    AssembledInput {
        segments,
        templated: true,
    }
}

/// One optimization sample: a user input (kept in token form), its fixed
/// target tokens, and the precomputed reference log-probabilities at each
/// target position.
pub struct PreparedSample {
    pub user_text: String,
    pub user_tokens: Vec<u32>,
    pub target: Vec<u32>,
    ref_log_probs: Array2<f64>,
}

/// Shared state for evaluating the collision loss of candidate payloads
/// against a fixed reference prompt over a fixed sample set.
///
/// The reference side is forwarded once at construction; candidate
/// evaluations only pay for their own forward passes. Per-sample losses are
/// reduced in a fixed order so totals are reproducible under parallel use.
pub struct ObjectiveContext<'m> {
    model: &'m dyn GradientModel,
    samples: Vec<PreparedSample>,
    cfg: ObfuscationConfig,
    ce_weight: f64,
    kl_weight: f64,
}

impl<'m> ObjectiveContext<'m> {
    /// Prepares the context: forwards the reference input once per sample
    /// and caches log-probabilities over the full output budget.
    ///
    /// `targets` pairs each user text with its target tokens (already
    /// truncated to the output budget by the corpus stage).
    pub fn new(
        model: &'m dyn GradientModel,
        reference: Option<&SegmentPayload>,
        targets: &[(String, Vec<u32>)],
        cfg: ObfuscationConfig,
    ) -> Result<Self> {
        let token_targets: Vec<(String, Vec<u32>, Vec<u32>)> = targets
            .iter()
            .map(|(text, target)| {
                Ok((
                    text.clone(),
                    model.tokenize(text)?.token_ids,
                    target.clone(),
                ))
            })
            .collect::<Result<_>>()?;
        Self::from_token_samples(model, reference, &token_targets, cfg)
    }

    /// As [`Self::new`] with pre-tokenized user inputs, for token-level
    /// experiments on models without a text tokenizer.
    pub fn from_token_samples(
        model: &'m dyn GradientModel,
        reference: Option<&SegmentPayload>,
        targets: &[(String, Vec<u32>, Vec<u32>)],
        cfg: ObfuscationConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut prepared = Vec::with_capacity(targets.len());
        for (user_text, user_tokens, target) in targets {
            let target: Vec<u32> = target.iter().copied().take(cfg.output_budget).collect();
            let mut sample = PreparedSample {
                user_text: user_text.clone(),
                user_tokens: user_tokens.clone(),
                target,
                ref_log_probs: Array2::zeros((0, model.vocab_size())),
            };
            if !sample.target.is_empty() {
                let input = chat_input(reference.cloned(), sample.user_tokens.clone());
                let logits = model.forward_logits(&input, &sample.target)?;
                let mut lp = Array2::zeros(logits.raw_dim());
                for (i, row) in logits.rows().into_iter().enumerate() {
                    let l = log_softmax(&row.to_vec());
                    for (j, v) in l.into_iter().enumerate() {
                        lp[[i, j]] = v;
                    }
                }
                sample.ref_log_probs = lp;
            }
            prepared.push(sample);
        }
        Ok(Self {
            model,
            samples: prepared,
            cfg,
            ce_weight: 1.0,
            kl_weight: 1.0,
        })
    }

    /// Overrides the CE/KL weighting (both default to 1).
    pub fn with_weights(mut self, ce_weight: f64, kl_weight: f64) -> Self {
        self.ce_weight = ce_weight;
        self.kl_weight = kl_weight;
        self
    }

    pub fn model(&self) -> &'m dyn GradientModel {
        self.model
    }

    pub fn config(&self) -> &ObfuscationConfig {
        &self.cfg
    }

    pub fn samples(&self) -> &[PreparedSample] {
        &self.samples
    }

    fn all_indices(&self) -> Vec<usize> {
        (0..self.samples.len()).collect()
    }

    fn candidate_input(&self, payload: &SegmentPayload, sample: &PreparedSample) -> AssembledInput {
        chat_input(Some(payload.clone()), sample.user_tokens.clone())
    }

    /// Positions of `window` covered by a sample's target.
    fn covered(&self, sample: &PreparedSample, window: Window) -> Option<Window> {
        let end = window.end.min(sample.target.len());
        (window.start < end).then_some(Window {
            start: window.start,
            end,
        })
    }

    /// CE+KL of a candidate payload over one window, summed across samples
    /// and positions. Fluency is composed per the config's weight: the NLL
    /// of the payload tokens for hard candidates, or of the
    /// nearest-embedding projection for soft candidates.
    pub fn window_loss(&self, payload: &SegmentPayload, window: Window) -> Result<LossBreakdown> {
        self.window_loss_subset(payload, window, &self.all_indices())
    }

    /// As [`Self::window_loss`] over an explicit sample subset.
    pub fn window_loss_subset(
        &self,
        payload: &SegmentPayload,
        window: Window,
        subset: &[usize],
    ) -> Result<LossBreakdown> {
        let (ce, kl) = self.window_ce_kl(payload, window, subset)?;
        let fluency = if self.cfg.fluency_weight != 0.0 {
            self.payload_fluency(payload)?
        } else {
            0.0
        };
        Ok(LossBreakdown::compose(
            ce,
            kl,
            fluency,
            self.cfg.fluency_weight,
        ))
    }

    /// Sequence NLL of a payload's token form: the tokens themselves for a
    /// hard payload, the nearest-row projection for a soft one.
    pub fn payload_fluency(&self, payload: &SegmentPayload) -> Result<f64> {
        let tokens = match payload {
            SegmentPayload::Hard(ids) => ids.clone(),
            SegmentPayload::Soft(rows) => {
                crate::projection::nearest_tokens_euclidean(self.model, &rows.view())?
            }
        };
        fluency_nll(self.model, &HardPrompt::new(tokens))
    }

    fn window_ce_kl(
        &self,
        payload: &SegmentPayload,
        window: Window,
        subset: &[usize],
    ) -> Result<(f64, f64)> {
        let mut any = false;
        let mut ce_total = 0.0;
        let mut kl_total = 0.0;
        for &si in subset {
            let sample = &self.samples[si];
            let Some(covered) = self.covered(sample, window) else {
                continue;
            };
            any = true;
            let input = self.candidate_input(payload, sample);
            let teacher = &sample.target[..covered.end];
            let logits = self.model.forward_logits(&input, teacher)?;
            for p in covered.start..covered.end {
                let obf_lp = log_softmax(&logits.row(p).to_vec());
                let ref_lp: Vec<f64> = sample.ref_log_probs.row(p).to_vec();
                let (ce, kl) = token_loss_from_log_probs(&ref_lp, &obf_lp, sample.target[p]);
                if !ce.is_finite() || !kl.is_finite() {
                    return Err(Error::NumericError(format!(
                        "non-finite loss at sample {si}, position {p}"
                    )));
                }
                ce_total += self.ce_weight * ce;
                kl_total += self.kl_weight * kl;
            }
        }
        if !any {
            return Err(Error::EmptyWindow {
                start: window.start + 1,
                end: window.end,
            });
        }
        Ok((ce_total, kl_total))
    }

    /// Gradient of the window CE+KL with respect to the system payload's
    /// embedding rows (`t x d`), summed over the subset in a fixed order.
    /// Fluency terms are *not* included; the optimizers add their own.
    pub fn payload_window_gradient(
        &self,
        payload: &SegmentPayload,
        window: Window,
        subset: &[usize],
    ) -> Result<Array2<f64>> {
        let t = payload.len();
        let d = self.model.embed_dim();
        let mut grad = Array2::<f64>::zeros((t, d));
        let mut any = false;
        for &si in subset {
            let sample = &self.samples[si];
            let Some(covered) = self.covered(sample, window) else {
                continue;
            };
            any = true;
            let input = self.candidate_input(payload, sample);
            let teacher = &sample.target[..covered.end];
            let forced = teacher_rows(self.model, &input, teacher)?;
            let span = forced
                .system_payload_span
                .clone()
                .ok_or_else(|| Error::NumericError("candidate input lost its payload".into()))?;
            let logits = self.model.forward_rows(forced.rows.view())?;
            let mut dlogits = Array2::<f64>::zeros(logits.raw_dim());
            for p in covered.start..covered.end {
                let row_idx = forced.input_len - 1 + p;
                let probs: Vec<f64> = log_softmax(&logits.row(row_idx).to_vec())
                    .iter()
                    .map(|v| v.exp())
                    .collect();
                let target = sample.target[p] as usize;
                for v in 0..probs.len() {
                    let p_ref = sample.ref_log_probs[[p, v]].exp();
                    let onehot = if v == target { 1.0 } else { 0.0 };
                    let ce_g = self.ce_weight * (probs[v] - onehot);
                    let kl_g = self.kl_weight * (probs[v] - p_ref);
                    dlogits[[row_idx, v]] = ce_g + kl_g;
                }
            }
            let drows = self.model.rows_vjp(forced.rows.view(), dlogits.view())?;
            grad += &drows.slice(ndarray::s![span.start..span.end, ..]);
        }
        if !any {
            return Err(Error::EmptyWindow {
                start: window.start + 1,
                end: window.end,
            });
        }
        Ok(grad)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{assemble_chat, TinyTransformer};
    use ndarray::array;

    #[test]
    fn identical_rows_have_zero_kl() {
        let row = array![0.3, -1.2, 4.0, 0.0];
        let (_, kl) = token_loss(row.view(), row.view(), 2).unwrap();
        assert_eq!(kl, 0.0);
    }

    #[test]
    fn uniform_candidate_ce_is_ln_vocab() {
        let refr = array![1.0, 2.0, 3.0, 4.0];
        let unif = ndarray::Array1::<f64>::zeros(256);
        let refr256 = ndarray::Array1::<f64>::zeros(256);
        let _ = refr;
        for target in [0u32, 100, 255] {
            let (ce, _) = token_loss(refr256.view(), unif.view(), target).unwrap();
            assert!((ce - (256f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn token_loss_matches_dense_oracle() {
        // Brute-force softmax/KL on random 8-logit rows.
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(11);
        for _ in 0..50 {
            let a: Vec<f64> = (0..8).map(|_| rng.random_range(-4.0..4.0)).collect();
            let b: Vec<f64> = (0..8).map(|_| rng.random_range(-4.0..4.0)).collect();
            let target = rng.random_range(0..8u32);

            let ea: Vec<f64> = a.iter().map(|v| v.exp()).collect();
            let eb: Vec<f64> = b.iter().map(|v| v.exp()).collect();
            let za: f64 = ea.iter().sum();
            let zb: f64 = eb.iter().sum();
            let pa: Vec<f64> = ea.iter().map(|v| v / za).collect();
            let pb: Vec<f64> = eb.iter().map(|v| v / zb).collect();
            let ce_oracle = -pb[target as usize].ln();
            let kl_oracle: f64 = pa.iter().zip(&pb).map(|(&p, &q)| p * (p / q).ln()).sum();

            let (ce, kl) = token_loss(
                ndarray::Array1::from(a.clone()).view(),
                ndarray::Array1::from(b.clone()).view(),
                target,
            )
            .unwrap();
            assert!((ce - ce_oracle).abs() / ce_oracle.abs().max(1e-12) < 1e-6);
            assert!((kl - kl_oracle).abs() / kl_oracle.abs().max(1e-9) < 1e-6);
        }
    }

    #[test]
    fn kl_is_nonnegative() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(5);
        for _ in 0..200 {
            let a: Vec<f64> = (0..16).map(|_| rng.random_range(-6.0..6.0)).collect();
            let b: Vec<f64> = (0..16).map(|_| rng.random_range(-6.0..6.0)).collect();
            let (_, kl) = token_loss(
                ndarray::Array1::from(a).view(),
                ndarray::Array1::from(b).view(),
                0,
            )
            .unwrap();
            assert!(kl >= -1e-9);
        }
    }

    #[test]
    fn non_finite_logits_error() {
        let bad = array![f64::NAN, 0.0];
        let ok = array![0.0, 0.0];
        assert!(matches!(
            token_loss(bad.view(), ok.view(), 0).unwrap_err(),
            Error::NumericError(_)
        ));
    }

    fn small_ctx(model: &TinyTransformer) -> ObjectiveContext<'_> {
        let sys = SegmentPayload::Hard(model.tokenize("be brief").unwrap().token_ids);
        let targets = vec![
            (
                "first question".to_string(),
                model.tokenize("abcd").unwrap().token_ids,
            ),
            (
                "second question".to_string(),
                model.tokenize("wxyz").unwrap().token_ids,
            ),
        ];
        ObjectiveContext::new(
            model,
            Some(&sys),
            &targets,
            ObfuscationConfig {
                output_budget: 4,
                window: 2,
                ..Default::default()
            },
        )
        .unwrap()
    }

    #[test]
    fn identical_payload_gives_zero_kl_everywhere() {
        let m = TinyTransformer::text_fixture(12, 2, 21).unwrap();
        let ctx = small_ctx(&m);
        let sys = SegmentPayload::Hard(m.tokenize("be brief").unwrap().token_ids);
        for w in ctx.config().windows() {
            let loss = ctx.window_loss(&sys, w).unwrap();
            assert!(loss.kl.abs() < 1e-9, "kl = {} in window {w:?}", loss.kl);
        }
    }

    #[test]
    fn degenerate_window_equals_token_loss() {
        let m = TinyTransformer::text_fixture(12, 2, 22).unwrap();
        let model: &dyn GradientModel = &m;
        let sys = SegmentPayload::Hard(m.tokenize("ref sys").unwrap().token_ids);
        let target = m.tokenize("ok").unwrap().token_ids;
        let targets = vec![("only user".to_string(), target.clone())];
        let ctx = ObjectiveContext::new(
            model,
            Some(&sys),
            &targets,
            ObfuscationConfig {
                output_budget: 1,
                window: 1,
                init_len: 2,
                ..Default::default()
            },
        )
        .unwrap();

        let cand = SegmentPayload::Hard(m.tokenize("xx").unwrap().token_ids);
        let got = ctx.window_loss(&cand, Window { start: 0, end: 1 }).unwrap();

        let ref_input = assemble_chat(&m, Some(sys.clone()), "only user").unwrap();
        let ref_logits = m.forward_logits(&ref_input, &target[..1]).unwrap();
        let cand_input = assemble_chat(&m, Some(cand.clone()), "only user").unwrap();
        let cand_logits = m.forward_logits(&cand_input, &target[..1]).unwrap();
        let (ce, kl) = token_loss(ref_logits.row(0), cand_logits.row(0), target[0]).unwrap();
        assert!((got.ce - ce).abs() < 1e-12);
        assert!((got.kl - kl).abs() < 1e-12);
    }

    #[test]
    fn window_loss_decomposes_into_token_losses() {
        let m = TinyTransformer::text_fixture(12, 2, 23).unwrap();
        let ctx = small_ctx(&m);
        let cand = SegmentPayload::Hard(m.tokenize("zz").unwrap().token_ids);
        let w = Window { start: 0, end: 2 };
        let got = ctx.window_loss(&cand, w).unwrap();

        // Independent decomposition: 2 samples x 2 positions of token_loss.
        let sys = SegmentPayload::Hard(m.tokenize("be brief").unwrap().token_ids);
        let mut ce_sum = 0.0;
        let mut kl_sum = 0.0;
        for sample in ctx.samples() {
            let ri = assemble_chat(&m, Some(sys.clone()), &sample.user_text).unwrap();
            let rl = m.forward_logits(&ri, &sample.target[..2]).unwrap();
            let ci = assemble_chat(&m, Some(cand.clone()), &sample.user_text).unwrap();
            let cl = m.forward_logits(&ci, &sample.target[..2]).unwrap();
            for p in 0..2 {
                let (ce, kl) = token_loss(rl.row(p), cl.row(p), sample.target[p]).unwrap();
                ce_sum += ce;
                kl_sum += kl;
            }
        }
        assert!((got.ce - ce_sum).abs() < 1e-9);
        assert!((got.kl - kl_sum).abs() < 1e-9);
    }

    #[test]
    fn windows_cover_budget_and_empty_window_errors() {
        let cfg = ObfuscationConfig {
            output_budget: 15,
            window: 5,
            ..Default::default()
        };
        assert_eq!(cfg.num_windows(), 3);
        assert_eq!(cfg.window_range(2), Window { start: 10, end: 15 });

        let uneven = ObfuscationConfig {
            output_budget: 7,
            window: 3,
            ..Default::default()
        };
        assert_eq!(uneven.num_windows(), 3);
        assert_eq!(uneven.window_range(2), Window { start: 6, end: 7 });

        let m = TinyTransformer::text_fixture(12, 2, 24).unwrap();
        let ctx = small_ctx(&m); // targets of length 4
        let cand = SegmentPayload::Hard(m.tokenize("zz").unwrap().token_ids);
        let err = ctx
            .window_loss(&cand, Window { start: 10, end: 12 })
            .unwrap_err();
        assert!(matches!(err, Error::EmptyWindow { .. }));
    }

    #[test]
    fn fluency_composition_sign_and_disable() {
        // Frozen ce/kl, three prompts ranked by NLL: composed totals preserve
        // the ranking for weight +1 and invert it for weight -1.
        let nlls = [0.5, 1.0, 2.0];
        let composed_pos: Vec<f64> = nlls
            .iter()
            .map(|&f| LossBreakdown::compose(1.0, 0.5, f, 1.0).total)
            .collect();
        assert!(composed_pos[0] < composed_pos[1] && composed_pos[1] < composed_pos[2]);
        let composed_neg: Vec<f64> = nlls
            .iter()
            .map(|&f| LossBreakdown::compose(1.0, 0.5, f, -1.0).total)
            .collect();
        assert!(composed_neg[0] > composed_neg[1] && composed_neg[1] > composed_neg[2]);
        let disabled = LossBreakdown::compose(1.0, 0.5, 123.0, 0.0);
        assert_eq!(disabled.total, 1.5);
    }
}
