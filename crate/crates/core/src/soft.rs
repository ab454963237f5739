//! Soft-prompt obfuscation: the gradient-descent variant of the windowed
//! loop, optimizing a `t x d` embedding matrix with Adam.
//!
//! Optimizer state resets at window boundaries; moments estimated on one
//! window's objective slice do not carry into the next.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gcg::{Checkpoint, ObfuscationTrace, TraceStep};
use crate::model::{embed_ids, GradientModel, SegmentPayload};
use crate::numeric::softmax;
use crate::objective::{ObjectiveContext, Window};
use crate::projection::nearest_tokens_euclidean;
use crate::prompt::{random_hard_init, SoftPrompt};

/// Adam hyperparameters for the soft path.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SoftOptConfig {
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
}

impl Default for SoftOptConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
        }
    }
}

impl SoftOptConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate.is_nan() || self.learning_rate < 0.0 {
            return Err(Error::ConfigError("learning_rate must be >= 0".into()));
        }
        for (name, b) in [("beta1", self.adam_beta1), ("beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::ConfigError(format!(
                    "{name} must be in [0, 1), got {b}"
                )));
            }
        }
        if self.adam_eps.is_nan() || self.adam_eps <= 0.0 {
            return Err(Error::ConfigError("adam_eps must be > 0".into()));
        }
        Ok(())
    }
}

/// Standard bias-corrected Adam over a matrix parameter.
struct Adam {
    m: Array2<f64>,
    v: Array2<f64>,
    t: u64,
    cfg: SoftOptConfig,
}

impl Adam {
    fn new(shape: (usize, usize), cfg: SoftOptConfig) -> Self {
        Self {
            m: Array2::zeros(shape),
            v: Array2::zeros(shape),
            t: 0,
            cfg,
        }
    }

    fn step(&mut self, params: &mut Array2<f64>, grad: &Array2<f64>) {
        self.t += 1;
        let b1 = self.cfg.adam_beta1;
        let b2 = self.cfg.adam_beta2;
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        ndarray::Zip::from(params)
            .and(&mut self.m)
            .and(&mut self.v)
            .and(grad)
            .for_each(|p, m, v, &g| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *p -= self.cfg.learning_rate * mhat / (vhat.sqrt() + self.cfg.adam_eps);
            });
    }
}

/// Exact gradient of the window CE+KL with respect to every entry of the
/// soft payload, plus the straight-through NLL term when the config enables
/// fluency: the projected tokens run the NLL forward and their embedding-row
/// gradients pass through the (piecewise-constant) projection unchanged.
pub fn soft_gradient(
    ctx: &ObjectiveContext<'_>,
    rows: &Array2<f64>,
    window: Window,
    subset: &[usize],
) -> Result<Array2<f64>> {
    let payload = SegmentPayload::Soft(rows.clone());
    let mut grad = ctx.payload_window_gradient(&payload, window, subset)?;
    let weight = ctx.config().fluency_weight;
    if weight != 0.0 && rows.nrows() >= 2 {
        let (_, nll_grad) = straight_through_nll_gradient(ctx.model(), rows)?;
        grad.scaled_add(weight, &nll_grad);
    }
    if !grad.iter().all(|v| v.is_finite()) {
        return Err(Error::NumericError("non-finite soft gradient".into()));
    }
    Ok(grad)
}

/// Mean NLL of the euclidean projection of `rows`, and its straight-through
/// gradient with respect to `rows`.
pub fn straight_through_nll_gradient(
    model: &dyn GradientModel,
    rows: &Array2<f64>,
) -> Result<(f64, Array2<f64>)> {
    let tokens = nearest_tokens_euclidean(model, &rows.view())?;
    let t = tokens.len();
    if t < 2 {
        return Err(Error::DegenerateSequence { len: t, min: 2 });
    }
    let emb = embed_ids(model, &tokens[..t - 1])?;
    let logits = model.forward_rows(emb.view())?;
    let norm = 1.0 / (t - 1) as f64;
    let mut nll = 0.0;
    let mut dlogits = Array2::<f64>::zeros(logits.raw_dim());
    for j in 1..t {
        let probs = softmax(&logits.row(j - 1).to_vec());
        nll -= probs[tokens[j] as usize].ln();
        for (v, &p) in probs.iter().enumerate() {
            let onehot = if v == tokens[j] as usize { 1.0 } else { 0.0 };
            dlogits[[j - 1, v]] = (p - onehot) * norm;
        }
    }
    let partial = model.rows_vjp(emb.view(), dlogits.view())?;
    let mut grad = Array2::<f64>::zeros((t, rows.ncols()));
    grad.slice_mut(ndarray::s![..t - 1, ..]).assign(&partial);
    Ok((nll * norm, grad))
}

/// Runs the windowed Adam loop from a random hard initialization embedded
/// through the model's table.
pub fn obfuscate_soft(
    ctx: &ObjectiveContext<'_>,
    opt: &SoftOptConfig,
) -> Result<(SoftPrompt, ObfuscationTrace<SoftPrompt>)> {
    let model = ctx.model();
    let init_tokens = random_hard_init(ctx.config().init_len, model, opt.seed)?;
    let init = model.embed(&init_tokens)?.to_f64();
    obfuscate_soft_from(ctx, opt, init)
}

/// As [`obfuscate_soft`] but from an explicit starting matrix (the fluency
/// attack starts from the stolen soft prompt itself).
pub fn obfuscate_soft_from(
    ctx: &ObjectiveContext<'_>,
    opt: &SoftOptConfig,
    init: Array2<f64>,
) -> Result<(SoftPrompt, ObfuscationTrace<SoftPrompt>)> {
    let model = ctx.model();
    let cfg = ctx.config().clone();
    cfg.validate()?;
    opt.validate()?;
    if init.ncols() != model.embed_dim() {
        return Err(Error::NumericError(format!(
            "init dim {} != model embed dim {}",
            init.ncols(),
            model.embed_dim()
        )));
    }

    let mut rows = init;
    let mut trace = ObfuscationTrace::default();
    let mut step = 0usize;
    for m in 0..cfg.num_windows() {
        let window = cfg.window_range(m);
        let subset =
            crate::gcg::subset_for_window(ctx.samples().len(), cfg.batch_users, m, opt.seed);
        let mut adam = Adam::new((rows.nrows(), rows.ncols()), opt.clone());
        for k in 0..cfg.iterations {
            let grad = soft_gradient(ctx, &rows, window, &subset)?;
            adam.step(&mut rows, &grad);
            if !rows.iter().all(|v| v.is_finite()) {
                return Err(Error::NumericError(
                    "non-finite soft prompt after step".into(),
                ));
            }
            let payload = SegmentPayload::Soft(rows.clone());
            let loss = ctx.window_loss_subset(&payload, window, &subset)?;
            trace.steps.push(TraceStep {
                window: m,
                iteration: k,
                position: None,
                old_token: None,
                new_token: None,
                loss,
            });
            trace.checkpoints.push(Checkpoint {
                step,
                window: m,
                iteration: k,
                prompt: SoftPrompt::from_f64(&rows, model.fingerprint())?,
            });
            step += 1;
        }
    }
    let final_prompt = SoftPrompt::from_f64(&rows, model.fingerprint())?;
    Ok((final_prompt, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{assemble_chat, ModelGateway, SamplingConfig, TinyTransformer};
    use crate::objective::ObfuscationConfig;
    use crate::prompt::HardPrompt;

    fn text_ctx(model: &TinyTransformer, cfg: ObfuscationConfig) -> ObjectiveContext<'_> {
        let sys = SegmentPayload::Hard(model.tokenize("be terse").unwrap().token_ids);
        let targets = vec![
            (
                "first".to_string(),
                model.tokenize("abcd").unwrap().token_ids,
            ),
            (
                "second".to_string(),
                model.tokenize("wxyz").unwrap().token_ids,
            ),
        ];
        ObjectiveContext::new(model, Some(&sys), &targets, cfg).unwrap()
    }

    #[test]
    fn zero_learning_rate_is_identity() {
        let m = TinyTransformer::text_fixture(12, 2, 50).unwrap();
        let cfg = ObfuscationConfig {
            iterations: 3,
            output_budget: 4,
            window: 2,
            init_len: 4,
            ..Default::default()
        };
        let ctx = text_ctx(&m, cfg);
        let opt = SoftOptConfig {
            learning_rate: 0.0,
            seed: 9,
            ..Default::default()
        };
        let (final_prompt, trace) = obfuscate_soft(&ctx, &opt).unwrap();

        let init_tokens = random_hard_init(4, &m, 9).unwrap();
        let init = m.embed(&init_tokens).unwrap();
        assert_eq!(final_prompt.rows, init.rows);
        assert_eq!(trace.steps.len(), 6);
    }

    #[test]
    fn step_count_matches_windows_times_iterations() {
        let m = TinyTransformer::text_fixture(12, 2, 51).unwrap();
        let cfg = ObfuscationConfig {
            iterations: 10,
            output_budget: 15,
            window: 5,
            init_len: 4,
            ..Default::default()
        };
        let sys = SegmentPayload::Hard(m.tokenize("be terse").unwrap().token_ids);
        let targets = vec![(
            "query".to_string(),
            m.tokenize("one two three four").unwrap().token_ids,
        )];
        let ctx = ObjectiveContext::new(&m, Some(&sys), &targets, cfg).unwrap();
        let (final_prompt, trace) = obfuscate_soft(
            &ctx,
            &SoftOptConfig {
                seed: 3,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(trace.steps.len(), 30);
        assert_eq!(final_prompt.model_fingerprint, m.fingerprint());
        assert!(final_prompt.rows.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn loss_decreases_on_training_window() {
        let m = TinyTransformer::text_fixture(16, 2, 52).unwrap();
        for seed in [1u64, 2, 3] {
            let cfg = ObfuscationConfig {
                iterations: 8,
                output_budget: 4,
                window: 4,
                init_len: 4,
                ..Default::default()
            };
            let ctx = text_ctx(&m, cfg);
            let opt = SoftOptConfig {
                seed,
                ..Default::default()
            };

            let init_tokens = random_hard_init(4, &m, seed).unwrap();
            let init_rows = m.embed(&init_tokens).unwrap().to_f64();
            let w = Window { start: 0, end: 4 };
            let initial = ctx
                .window_loss(&SegmentPayload::Soft(init_rows.clone()), w)
                .unwrap()
                .total;
            let (final_prompt, _) = obfuscate_soft_from(&ctx, &opt, init_rows).unwrap();
            let final_loss = ctx
                .window_loss(&SegmentPayload::Soft(final_prompt.to_f64()), w)
                .unwrap()
                .total;
            assert!(
                final_loss < initial,
                "seed {seed}: loss did not improve ({initial} -> {final_loss})"
            );
        }
    }

    #[test]
    fn training_loss_improves_for_nearly_all_seeds() {
        // 16 train samples, 20 seeds: the final train loss must fall below
        // the initial one in >= 95% of seeds (i.e. at least 19).
        use crate::model::{ChatTemplate, TinyConfig};
        use rand::{Rng, SeedableRng};
        let m = TinyTransformer::new(
            TinyConfig {
                vocab_size: 64,
                embed_dim: 12,
                n_layers: 2,
                max_context: 128,
                seed: 0x5EED,
                ..Default::default()
            },
            ChatTemplate::empty(),
        )
        .unwrap();
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(0xBEEF);
        let sys: Vec<u32> = (0..6).map(|_| rng.random_range(0..64u32)).collect();
        let targets: Vec<(String, Vec<u32>, Vec<u32>)> = (0..16)
            .map(|i| {
                let user: Vec<u32> = (0..2).map(|_| rng.random_range(0..64u32)).collect();
                let tgt: Vec<u32> = (0..4).map(|_| rng.random_range(0..64u32)).collect();
                (format!("t{i}"), user, tgt)
            })
            .collect();
        let cfg = ObfuscationConfig {
            iterations: 5,
            output_budget: 4,
            window: 4,
            init_len: 4,
            ..Default::default()
        };
        let ctx = ObjectiveContext::from_token_samples(
            &m,
            Some(&SegmentPayload::Hard(sys)),
            &targets,
            cfg,
        )
        .unwrap();
        let w = Window { start: 0, end: 4 };
        let mut improved = 0usize;
        for seed in 0..20u64 {
            let init = m
                .embed(&random_hard_init(4, &m, seed).unwrap())
                .unwrap()
                .to_f64();
            let initial = ctx
                .window_loss(&SegmentPayload::Soft(init.clone()), w)
                .unwrap()
                .total;
            let (final_prompt, _) = obfuscate_soft_from(
                &ctx,
                &SoftOptConfig {
                    seed,
                    ..Default::default()
                },
                init,
            )
            .unwrap();
            let final_loss = ctx
                .window_loss(&SegmentPayload::Soft(final_prompt.to_f64()), w)
                .unwrap()
                .total;
            if final_loss < initial {
                improved += 1;
            }
        }
        assert!(improved >= 19, "loss improved in only {improved}/20 seeds");
    }

    #[test]
    fn gradients_respect_causality() {
        // Upstream gradients placed only on rows before the soft span must
        // produce a zero gradient at the span: outputs never attend forward.
        use crate::model::GradientModel;
        let m = TinyTransformer::text_fixture(12, 2, 55).unwrap();
        let rows = m
            .embed(&HardPrompt::new(vec![1, 2, 3, 4, 5, 6]))
            .unwrap()
            .to_f64();
        let mut dlogits = Array2::<f64>::zeros((6, 256));
        dlogits[[0, 3]] = 1.0;
        dlogits[[1, 8]] = -0.5;
        let drows = m.rows_vjp(rows.view(), dlogits.view()).unwrap();
        for i in 2..6 {
            assert!(
                drows.row(i).iter().all(|&v| v == 0.0),
                "row {i} received gradient from earlier outputs"
            );
        }
        assert!(drows.row(0).iter().any(|&v| v != 0.0));
    }

    #[test]
    fn stationary_at_reference_embedding() {
        // Starting exactly at embed(original) with greedy targets: the KL
        // gradient is zero and Adam steps must not push total loss up by
        // more than 1e-6.
        let m = TinyTransformer::text_fixture(16, 2, 53).unwrap();
        let sys_tokens = m.tokenize("answer briefly").unwrap();
        let sys = SegmentPayload::Hard(sys_tokens.token_ids.clone());

        // Greedy targets generated by the reference prompt itself.
        let mut targets = Vec::new();
        for user in ["question one", "question two"] {
            let input = assemble_chat(&m, Some(sys.clone()), user).unwrap();
            let out = m
                .generate_tokens(&input, &SamplingConfig::greedy(4))
                .unwrap();
            targets.push((user.to_string(), out));
        }
        let cfg = ObfuscationConfig {
            iterations: 5,
            output_budget: 4,
            window: 4,
            init_len: sys_tokens.len(),
            ..Default::default()
        };
        let ctx = ObjectiveContext::new(&m, Some(&sys), &targets, cfg).unwrap();

        let init = m.embed(&sys_tokens).unwrap().to_f64();
        let w = Window { start: 0, end: 4 };

        // KL part of the gradient is the zero matrix at the identity.
        let kl_only = ObjectiveContext::new(
            &m,
            Some(&sys),
            &targets,
            ObfuscationConfig {
                iterations: 5,
                output_budget: 4,
                window: 4,
                init_len: sys_tokens.len(),
                ..Default::default()
            },
        )
        .unwrap()
        .with_weights(0.0, 1.0);
        let g = soft_gradient(&kl_only, &init, w, &[0, 1]).unwrap();
        let max_abs = g.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
        assert!(
            max_abs < 1e-9,
            "KL gradient at identity should vanish, max {max_abs}"
        );

        let initial = ctx
            .window_loss(&SegmentPayload::Soft(init.clone()), w)
            .unwrap()
            .total;
        let (final_prompt, _) = obfuscate_soft_from(&ctx, &SoftOptConfig::default(), init).unwrap();
        let final_loss = ctx
            .window_loss(&SegmentPayload::Soft(final_prompt.to_f64()), w)
            .unwrap()
            .total;
        assert!(
            final_loss <= initial + 1e-6,
            "stationarity violated: {initial} -> {final_loss}"
        );
    }

    #[test]
    fn adam_with_zero_gradient_is_fixed_point() {
        let mut adam = Adam::new((2, 3), SoftOptConfig::default());
        let mut params = Array2::from_elem((2, 3), 1.5);
        let before = params.clone();
        adam.step(&mut params, &Array2::zeros((2, 3)));
        adam.step(&mut params, &Array2::zeros((2, 3)));
        assert_eq!(params, before);
    }

    #[test]
    fn fluency_gradient_shapes_and_projection_identity() {
        let m = TinyTransformer::text_fixture(12, 2, 54).unwrap();
        let tokens = HardPrompt::new(vec![30, 40, 50, 60]);
        let rows = m.embed(&tokens).unwrap().to_f64();
        let (nll, grad) = straight_through_nll_gradient(&m, &rows).unwrap();
        let direct = m.sequence_nll(&tokens.token_ids).unwrap();
        assert!((nll - direct).abs() < 1e-9);
        assert_eq!(grad.shape(), &[4, 12]);
        assert!(grad.row(3).iter().all(|&v| v == 0.0));
    }
}
