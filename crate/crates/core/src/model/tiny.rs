//! In-repo causal transformer backend with seeded random weights.
//!
//! Architecture (everything computed in f64):
//!
//! ```text
//! h = tok_rows + pos_emb[..n]
//! repeat n_layers times:
//!   a = layernorm(h; g1, b1)
//!   h = h + softmax(mask(a Wq (a Wk)^T / sqrt(d))) (a Wv) Wo
//!   m = layernorm(h; g2, b2)
//!   h = h + gelu(m W1 + c1) W2 + c2
//! logits = layernorm(h; gf, bf) Wout + bout
//! ```
//!
//! Attention is single-head with a strict causal mask. The tokenizer is
//! byte-level: ids 0..=244 are the raw UTF-8 bytes (the remaining byte values
//! never occur in valid UTF-8), and for a 256-entry vocabulary ids 245..=255
//! are reserved as special tokens with 255 acting as end-of-turn.
//!
//! The embedding table is stored in f32, so [`ModelGateway::embed`] is exact
//! and lowering a hard prompt through the table reproduces the forward pass
//! on the equivalent soft prompt bit for bit.

use std::collections::BTreeSet;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::template::ChatTemplate;
use crate::model::{
    generate_rows, sequence_nll_rows, teacher_forced_logits, AssembledInput, GradientModel,
    ModelGateway, SamplingConfig,
};
use crate::prompt::HardPrompt;

/// Byte values at and above this are reserved for special tokens.
pub const BYTE_TOKEN_LIMIT: u32 = 245;
/// End-of-turn special id (only present when the vocabulary is 256 wide).
pub const EOT_TOKEN: u32 = 255;

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Dimensions and seed of a [`TinyTransformer`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TinyConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub n_layers: usize,
    #[serde(default = "default_max_context")]
    pub max_context: usize,
    /// Half-width of the uniform token-embedding init. Smaller values put
    /// vocabulary rows closer together, making the model smoother across
    /// single-token substitutions.
    #[serde(default = "default_emb_scale")]
    pub emb_scale: f64,
    pub seed: u64,
}

fn default_max_context() -> usize {
    512
}

fn default_emb_scale() -> f64 {
    0.5
}

impl Default for TinyConfig {
    fn default() -> Self {
        Self {
            vocab_size: 256,
            embed_dim: 24,
            n_layers: 2,
            max_context: 512,
            emb_scale: default_emb_scale(),
            seed: 0,
        }
    }
}

impl TinyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 || self.vocab_size > 256 {
            return Err(Error::ConfigError(format!(
                "vocab_size must be in [2, 256], got {}",
                self.vocab_size
            )));
        }
        if self.embed_dim < 2 {
            return Err(Error::ConfigError("embed_dim must be >= 2".into()));
        }
        if self.n_layers == 0 {
            return Err(Error::ConfigError("n_layers must be >= 1".into()));
        }
        if self.max_context < 4 {
            return Err(Error::ConfigError("max_context must be >= 4".into()));
        }
        Ok(())
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let cfg: TinyConfig = serde_json::from_reader(std::fs::File::open(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// One transformer block's parameters, exposed read-only for reference
/// implementations and bindings.
#[derive(Debug, Clone)]
pub struct LayerParams {
    pub ln1_g: Array1<f64>,
    pub ln1_b: Array1<f64>,
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub wo: Array2<f64>,
    pub ln2_g: Array1<f64>,
    pub ln2_b: Array1<f64>,
    pub w1: Array2<f64>,
    pub c1: Array1<f64>,
    pub w2: Array2<f64>,
    pub c2: Array1<f64>,
}

/// Seeded random-weight causal transformer used as the desk-scale backend.
#[derive(Debug, Clone)]
pub struct TinyTransformer {
    cfg: TinyConfig,
    table_f32: Array2<f32>,
    pos_emb: Array2<f64>,
    layers: Vec<LayerParams>,
    lnf_g: Array1<f64>,
    lnf_b: Array1<f64>,
    w_out: Array2<f64>,
    b_out: Array1<f64>,
    template: ChatTemplate,
    specials: BTreeSet<u32>,
    eot: Option<u32>,
    fingerprint: String,
}

fn uniform_matrix(rng: &mut ChaCha12Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-scale..scale))
}

impl TinyTransformer {
    pub fn new(cfg: TinyConfig, template: ChatTemplate) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.embed_dim;
        let v = cfg.vocab_size;
        let hidden = 4 * d;
        let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);

        // The table is rounded through f32 so hard-token lowering and soft
        // prompts built from it are bit-identical.
        let table_f32 = uniform_matrix(&mut rng, v, d, cfg.emb_scale).mapv(|x| x as f32);
        let pos_emb = uniform_matrix(&mut rng, cfg.max_context, d, 0.1);

        let attn_scale = (3.0 / d as f64).sqrt();
        let w1_scale = (6.0 / (d + hidden) as f64).sqrt();
        let layers = (0..cfg.n_layers)
            .map(|_| LayerParams {
                ln1_g: Array1::ones(d),
                ln1_b: Array1::zeros(d),
                wq: uniform_matrix(&mut rng, d, d, attn_scale),
                wk: uniform_matrix(&mut rng, d, d, attn_scale),
                wv: uniform_matrix(&mut rng, d, d, attn_scale),
                wo: uniform_matrix(&mut rng, d, d, attn_scale),
                ln2_g: Array1::ones(d),
                ln2_b: Array1::zeros(d),
                w1: uniform_matrix(&mut rng, d, hidden, w1_scale),
                c1: Array1::zeros(hidden),
                w2: uniform_matrix(&mut rng, hidden, d, w1_scale),
                c2: Array1::zeros(d),
            })
            .collect();

        let w_out = uniform_matrix(&mut rng, d, v, (6.0 / (d + v) as f64).sqrt());
        let b_out = Array1::zeros(v);

        let (specials, eot) = if v == 256 {
            ((BYTE_TOKEN_LIMIT..=EOT_TOKEN).collect(), Some(EOT_TOKEN))
        } else {
            (BTreeSet::new(), None)
        };

        let mut hasher = Sha256::new();
        hasher.update((v as u64).to_le_bytes());
        hasher.update((d as u64).to_le_bytes());
        for x in table_f32.iter() {
            hasher.update(x.to_le_bytes());
        }
        let fingerprint = hex::encode(hasher.finalize());

        Ok(Self {
            cfg,
            table_f32,
            pos_emb,
            layers,
            lnf_g: Array1::ones(d),
            lnf_b: Array1::zeros(d),
            w_out,
            b_out,
            template,
            specials,
            eot,
            fingerprint,
        })
    }

    /// A 256-vocabulary model able to tokenize text, with the default template.
    pub fn text_fixture(embed_dim: usize, n_layers: usize, seed: u64) -> Result<Self> {
        Self::new(
            TinyConfig {
                vocab_size: 256,
                embed_dim,
                n_layers,
                seed,
                ..Default::default()
            },
            ChatTemplate::default_tiny(),
        )
    }

    pub fn config(&self) -> &TinyConfig {
        &self.cfg
    }

    /// Positional embedding rows.
    pub fn pos_embedding(&self) -> ndarray::ArrayView2<'_, f64> {
        self.pos_emb.view()
    }

    /// Per-block parameters in layer order.
    pub fn layer_params(&self) -> &[LayerParams] {
        &self.layers
    }

    /// Final layernorm gain/bias.
    pub fn final_ln(&self) -> (ndarray::ArrayView1<'_, f64>, ndarray::ArrayView1<'_, f64>) {
        (self.lnf_g.view(), self.lnf_b.view())
    }

    /// Output projection and bias.
    pub fn output_head(&self) -> (ndarray::ArrayView2<'_, f64>, ndarray::ArrayView1<'_, f64>) {
        (self.w_out.view(), self.b_out.view())
    }

    fn byte_limit(&self) -> u32 {
        (self.cfg.vocab_size as u32).min(BYTE_TOKEN_LIMIT)
    }

    fn check_collision(&self, text: &str) -> Result<()> {
        for delim in self.template.delimiter_strings() {
            if text.contains(delim) {
                return Err(Error::TemplateCollision {
                    delimiter: delim.to_string(),
                });
            }
        }
        Ok(())
    }

    fn encode_bytes(&self, text: &str) -> Result<HardPrompt> {
        let limit = self.byte_limit();
        let mut ids = Vec::with_capacity(text.len());
        for b in text.bytes() {
            let id = u32::from(b);
            if id >= limit {
                return Err(Error::InvalidToken {
                    id,
                    vocab_size: self.cfg.vocab_size,
                });
            }
            ids.push(id);
        }
        Ok(HardPrompt::new(ids))
    }

    fn forward_cached(&self, rows: ArrayView2<'_, f64>) -> Result<(Array2<f64>, ForwardCache)> {
        let n = rows.nrows();
        let d = self.cfg.embed_dim;
        if rows.ncols() != d {
            return Err(Error::NumericError(format!(
                "input rows have dim {}, model expects {d}",
                rows.ncols()
            )));
        }
        if n > self.cfg.max_context {
            return Err(Error::ContextOverflow {
                needed: n,
                max: self.cfg.max_context,
            });
        }
        if n == 0 {
            return Ok((
                Array2::zeros((0, self.cfg.vocab_size)),
                ForwardCache {
                    layers: Vec::new(),
                    lnf: LnCache::empty(d),
                },
            ));
        }

        let mut h = rows.to_owned();
        h += &self.pos_emb.slice(ndarray::s![..n, ..]);

        let scale = 1.0 / (d as f64).sqrt();
        let mut layer_caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (a, ln1) = layer_norm(&h, &layer.ln1_g, &layer.ln1_b);
            let q = a.dot(&layer.wq);
            let k = a.dot(&layer.wk);
            let v = a.dot(&layer.wv);
            let mut scores = q.dot(&k.t());
            scores *= scale;
            let attn_w = causal_softmax(&scores);
            let ctx = attn_w.dot(&v);
            h += &ctx.dot(&layer.wo);

            let (m, ln2) = layer_norm(&h, &layer.ln2_g, &layer.ln2_b);
            let mut u1 = m.dot(&layer.w1);
            u1 += &layer.c1;
            let act = u1.mapv(gelu);
            let mut mlp = act.dot(&layer.w2);
            mlp += &layer.c2;
            h += &mlp;

            layer_caches.push(LayerCache {
                ln1,
                q,
                k,
                v,
                attn_w,
                ln2,
                u1,
            });
        }

        let (hf, lnf) = layer_norm(&h, &self.lnf_g, &self.lnf_b);
        let mut logits = hf.dot(&self.w_out);
        logits += &self.b_out;
        if !logits.iter().all(|x| x.is_finite()) {
            return Err(Error::NumericError(
                "non-finite logits in forward pass".into(),
            ));
        }
        Ok((
            logits,
            ForwardCache {
                layers: layer_caches,
                lnf,
            },
        ))
    }
}

impl ModelGateway for TinyTransformer {
    fn vocab_size(&self) -> usize {
        self.cfg.vocab_size
    }

    fn embed_dim(&self) -> usize {
        self.cfg.embed_dim
    }

    fn max_context(&self) -> usize {
        self.cfg.max_context
    }

    fn embedding_table(&self) -> ArrayView2<'_, f32> {
        self.table_f32.view()
    }

    fn special_token_ids(&self) -> &BTreeSet<u32> {
        &self.specials
    }

    fn eot_token_id(&self) -> Option<u32> {
        self.eot
    }

    fn template(&self) -> &ChatTemplate {
        &self.template
    }

    fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    fn tokenize(&self, text: &str) -> Result<HardPrompt> {
        self.check_collision(text)?;
        self.encode_bytes(text)
    }

    fn tokenize_unchecked(&self, text: &str) -> Result<HardPrompt> {
        self.encode_bytes(text)
    }

    fn detokenize(&self, tokens: &[u32]) -> String {
        let limit = self.byte_limit();
        let bytes: Vec<u8> = tokens
            .iter()
            .filter(|&&id| id < limit)
            .map(|&id| id as u8)
            .collect();
        String::from_utf8_lossy(&bytes).into_owned()
    }

    fn forward_logits(&self, input: &AssembledInput, teacher: &[u32]) -> Result<Array2<f64>> {
        teacher_forced_logits(self, input, teacher)
    }

    fn generate_tokens(&self, input: &AssembledInput, cfg: &SamplingConfig) -> Result<Vec<u32>> {
        generate_rows(self, input, cfg)
    }

    fn sequence_nll(&self, tokens: &[u32]) -> Result<f64> {
        sequence_nll_rows(self, tokens)
    }
}

impl GradientModel for TinyTransformer {
    fn forward_rows(&self, rows: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        Ok(self.forward_cached(rows)?.0)
    }

    fn rows_vjp(
        &self,
        rows: ArrayView2<'_, f64>,
        dlogits: ArrayView2<'_, f64>,
    ) -> Result<Array2<f64>> {
        let n = rows.nrows();
        let d = self.cfg.embed_dim;
        if dlogits.nrows() != n || dlogits.ncols() != self.cfg.vocab_size {
            return Err(Error::NumericError(format!(
                "dlogits shape ({}, {}) does not match ({n}, {})",
                dlogits.nrows(),
                dlogits.ncols(),
                self.cfg.vocab_size
            )));
        }
        if n == 0 {
            return Ok(Array2::zeros((0, d)));
        }
        let (_, cache) = self.forward_cached(rows)?;

        let scale = 1.0 / (d as f64).sqrt();
        let dhf = dlogits.dot(&self.w_out.t());
        let mut dh = layer_norm_vjp(&dhf, &self.lnf_g, &cache.lnf);

        for (layer, lc) in self.layers.iter().zip(cache.layers.iter()).rev() {
            // MLP block.
            let dg = dh.dot(&layer.w2.t());
            let du1 = &dg * &lc.u1.mapv(gelu_prime);
            let dm = du1.dot(&layer.w1.t());
            dh += &layer_norm_vjp(&dm, &layer.ln2_g, &lc.ln2);

            // Attention block.
            let dctx = dh.dot(&layer.wo.t());
            let da_w = dctx.dot(&lc.v.t());
            let dv = lc.attn_w.t().dot(&dctx);
            let ds = softmax_vjp(&da_w, &lc.attn_w);
            let dq = ds.dot(&lc.k).mapv(|x| x * scale);
            let dk = ds.t().dot(&lc.q).mapv(|x| x * scale);
            let da = dq.dot(&layer.wq.t()) + dk.dot(&layer.wk.t()) + dv.dot(&layer.wv.t());
            dh += &layer_norm_vjp(&da, &layer.ln1_g, &lc.ln1);
        }

        if !dh.iter().all(|x| x.is_finite()) {
            return Err(Error::NumericError(
                "non-finite gradient in backward pass".into(),
            ));
        }
        Ok(dh)
    }
}

// --- forward/backward primitives -------------------------------------------

struct LnCache {
    xhat: Array2<f64>,
    inv_sigma: Vec<f64>,
}

impl LnCache {
    fn empty(d: usize) -> Self {
        Self {
            xhat: Array2::zeros((0, d)),
            inv_sigma: Vec::new(),
        }
    }
}

struct LayerCache {
    ln1: LnCache,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    attn_w: Array2<f64>,
    ln2: LnCache,
    u1: Array2<f64>,
}

struct ForwardCache {
    layers: Vec<LayerCache>,
    lnf: LnCache,
}

fn layer_norm(x: &Array2<f64>, gamma: &Array1<f64>, beta: &Array1<f64>) -> (Array2<f64>, LnCache) {
    let (n, d) = (x.nrows(), x.ncols());
    let mut y = Array2::zeros((n, d));
    let mut xhat = Array2::zeros((n, d));
    let mut inv_sigma = Vec::with_capacity(n);
    for i in 0..n {
        let row = x.row(i);
        let mu = row.sum() / d as f64;
        let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + LN_EPS).sqrt();
        inv_sigma.push(is);
        for j in 0..d {
            let xh = (row[j] - mu) * is;
            xhat[[i, j]] = xh;
            y[[i, j]] = gamma[j] * xh + beta[j];
        }
    }
    (y, LnCache { xhat, inv_sigma })
}

fn layer_norm_vjp(dy: &Array2<f64>, gamma: &Array1<f64>, cache: &LnCache) -> Array2<f64> {
    let (n, d) = (dy.nrows(), dy.ncols());
    let mut dx = Array2::zeros((n, d));
    for i in 0..n {
        let mut mean_dg = 0.0;
        let mut mean_dg_xhat = 0.0;
        for j in 0..d {
            let dg = dy[[i, j]] * gamma[j];
            mean_dg += dg;
            mean_dg_xhat += dg * cache.xhat[[i, j]];
        }
        mean_dg /= d as f64;
        mean_dg_xhat /= d as f64;
        let is = cache.inv_sigma[i];
        for j in 0..d {
            let dg = dy[[i, j]] * gamma[j];
            dx[[i, j]] = is * (dg - mean_dg - cache.xhat[[i, j]] * mean_dg_xhat);
        }
    }
    dx
}

/// Row-wise softmax over the causal lower triangle; masked entries are 0.
fn causal_softmax(scores: &Array2<f64>) -> Array2<f64> {
    let n = scores.nrows();
    let mut out = Array2::zeros((n, n));
    for i in 0..n {
        let mut max = f64::NEG_INFINITY;
        for j in 0..=i {
            max = max.max(scores[[i, j]]);
        }
        let mut z = 0.0;
        for j in 0..=i {
            let e = (scores[[i, j]] - max).exp();
            out[[i, j]] = e;
            z += e;
        }
        for j in 0..=i {
            out[[i, j]] /= z;
        }
    }
    out
}

/// Softmax VJP per row: `a * (da - sum(da * a))`. Masked entries carry
/// `a = 0` and therefore stay zero.
fn softmax_vjp(da: &Array2<f64>, a: &Array2<f64>) -> Array2<f64> {
    let (n, m) = (da.nrows(), da.ncols());
    let mut ds = Array2::zeros((n, m));
    for i in 0..n {
        let dot: f64 = (0..m).map(|j| da[[i, j]] * a[[i, j]]).sum();
        for j in 0..m {
            ds[[i, j]] = a[[i, j]] * (da[[i, j]] - dot);
        }
    }
    ds
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_prime(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}
