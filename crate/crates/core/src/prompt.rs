//! Prompt value types, scenario assembly, random initialization, and
//! bit-exact soft-prompt persistence (the SOBF file format).

use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelGateway;

/// A prompt in token space: an ordered sequence of vocabulary ids.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct HardPrompt {
    pub token_ids: Vec<u32>,
}

impl HardPrompt {
    pub fn new(token_ids: Vec<u32>) -> Self {
        Self { token_ids }
    }

    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    /// Checks every id against the given vocabulary size.
    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        for &id in &self.token_ids {
            if id as usize >= vocab_size {
                return Err(Error::InvalidToken { id, vocab_size });
            }
        }
        Ok(())
    }
}

impl From<Vec<u32>> for HardPrompt {
    fn from(token_ids: Vec<u32>) -> Self {
        Self { token_ids }
    }
}

/// A prompt in embedding space: a `t x d` matrix of f32 rows, bound to the
/// embedding table it was created for via `model_fingerprint`.
///
/// Rows are stored in f32 to match the on-disk SOBF payload exactly, so a
/// serialize/deserialize round trip is bitwise lossless. Computation inside
/// the model runs in f64; f32 -> f64 widening is exact.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftPrompt {
    pub rows: Array2<f32>,
    pub model_fingerprint: String,
}

impl SoftPrompt {
    pub fn new(rows: Array2<f32>, model_fingerprint: impl Into<String>) -> Result<Self> {
        if rows.nrows() == 0 {
            return Err(Error::InvalidSpec(
                "soft prompt must have t >= 1 rows".into(),
            ));
        }
        if !rows.iter().all(|v| v.is_finite()) {
            return Err(Error::NumericError(
                "soft prompt contains non-finite entries".into(),
            ));
        }
        Ok(Self {
            rows,
            model_fingerprint: model_fingerprint.into(),
        })
    }

    /// Number of virtual tokens (t).
    pub fn len(&self) -> usize {
        self.rows.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.nrows() == 0
    }

    /// Embedding dimension (d).
    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }

    /// Exact widening to the f64 matrix used by model forward passes.
    pub fn to_f64(&self) -> Array2<f64> {
        self.rows.mapv(f64::from)
    }

    /// Rounds an f64 working matrix down to the persisted f32 form.
    pub fn from_f64(rows: &Array2<f64>, model_fingerprint: impl Into<String>) -> Result<Self> {
        Self::new(rows.mapv(|v| v as f32), model_fingerprint)
    }

    /// Verifies that this prompt was created for the given model's embedding
    /// table. Mismatches are recoverable (callers may override) but unsafe to
    /// ignore: a soft prompt only has meaning under its own table.
    pub fn check_model(&self, model: &dyn ModelGateway) -> Result<()> {
        if self.model_fingerprint != model.fingerprint() {
            return Err(Error::ModelMismatch {
                artifact: self.model_fingerprint.clone(),
                model: model.fingerprint().to_string(),
            });
        }
        Ok(())
    }
}

/// Where the task and style sentences sit in the assembled prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    /// Task and style both go into the system prompt.
    Full,
    /// Only the style stays in the system prompt; the task prefixes the user query.
    Style,
    /// Only the task goes into the system prompt; the style is dropped.
    Task,
}

/// A confidential system prompt described as task text plus style text.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SystemPromptSpec {
    pub task: String,
    pub style: String,
    pub scenario: Scenario,
}

impl SystemPromptSpec {
    pub fn validate(&self) -> Result<()> {
        let need_task = matches!(self.scenario, Scenario::Full | Scenario::Task);
        let need_style = matches!(self.scenario, Scenario::Full | Scenario::Style);
        if need_task && self.task.trim().is_empty() {
            return Err(Error::InvalidSpec(format!(
                "scenario {:?} requires a nonempty task",
                self.scenario
            )));
        }
        if need_style && self.style.trim().is_empty() {
            return Err(Error::InvalidSpec(format!(
                "scenario {:?} requires a nonempty style",
                self.scenario
            )));
        }
        Ok(())
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let spec: SystemPromptSpec = serde_json::from_reader(std::fs::File::open(path)?)?;
        spec.validate()?;
        Ok(spec)
    }
}

/// Joiner used when concatenating task and style texts (and task + query in
/// the Style scenario). A single space keeps sentence boundaries intact.
const JOINER: &str = " ";

fn join(a: &str, b: &str) -> String {
    if a.is_empty() {
        b.to_string()
    } else if b.is_empty() {
        a.to_string()
    } else {
        format!("{a}{JOINER}{b}")
    }
}

/// Splits a prompt spec and a user query into (system text, user text)
/// according to the scenario.
pub fn assemble_scenario(spec: &SystemPromptSpec, user_query: &str) -> Result<(String, String)> {
    spec.validate()?;
    Ok(match spec.scenario {
        Scenario::Full => (join(&spec.task, &spec.style), user_query.to_string()),
        Scenario::Style => (spec.style.clone(), join(&spec.task, user_query)),
        Scenario::Task => (spec.task.clone(), user_query.to_string()),
    })
}

/// The user text for the blank baseline: same scenario mapping, no system payload.
pub fn blank_user_text(spec: &SystemPromptSpec, user_query: &str) -> String {
    match spec.scenario {
        Scenario::Style => join(&spec.task, user_query),
        Scenario::Full | Scenario::Task => user_query.to_string(),
    }
}

/// Draws `length` token ids uniformly from the vocabulary minus the model's
/// special tokens. Deterministic per seed.
pub fn random_hard_init(length: usize, model: &dyn ModelGateway, seed: u64) -> Result<HardPrompt> {
    if length == 0 {
        return Err(Error::InvalidSpec("init length must be >= 1".into()));
    }
    if length > model.max_context() {
        return Err(Error::ContextOverflow {
            needed: length,
            max: model.max_context(),
        });
    }
    let allowed: Vec<u32> = (0..model.vocab_size() as u32)
        .filter(|id| !model.special_token_ids().contains(id))
        .collect();
    if allowed.is_empty() {
        return Err(Error::NoCandidates);
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let ids = (0..length)
        .map(|_| allowed[rng.random_range(0..allowed.len())])
        .collect();
    Ok(HardPrompt::new(ids))
}

// --- SOBF persistence ------------------------------------------------------
//
// Layout: magic "SOBF", version byte 0x01, one JSON metadata line terminated
// by '\n', then t*d little-endian f32 values in row-major order.

const SOBF_MAGIC: &[u8; 4] = b"SOBF";
const SOBF_VERSION: u8 = 0x01;

#[derive(Debug, Serialize, Deserialize)]
struct SobfHeader {
    t: usize,
    d: usize,
    dtype: String,
    endianness: String,
    model_fingerprint: String,
    created_utc: String,
}

fn utc_now_string() -> String {
    // Seconds since the Unix epoch, rendered in UTC. Kept dependency-free.
    let secs = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    format!("unix:{secs}")
}

/// Writes a soft prompt in the SOBF format. The payload is bit-exact: the
/// f32 entries are stored verbatim, little-endian, row-major.
pub fn serialize_soft(p: &SoftPrompt, path: &Path) -> Result<()> {
    let bytes = serialize_soft_bytes(p)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

/// As [`serialize_soft`] with an explicit creation stamp, for runs that
/// need byte-identical artifacts across machines (the stamp then encodes
/// run provenance instead of wall-clock time).
pub fn serialize_soft_stamped(p: &SoftPrompt, path: &Path, stamp: &str) -> Result<()> {
    std::fs::write(path, encode_sobf(p, stamp)?)?;
    Ok(())
}

/// SOBF encoding as an in-memory byte vector.
pub fn serialize_soft_bytes(p: &SoftPrompt) -> Result<Vec<u8>> {
    encode_sobf(p, &utc_now_string())
}

fn encode_sobf(p: &SoftPrompt, stamp: &str) -> Result<Vec<u8>> {
    let header = SobfHeader {
        t: p.len(),
        d: p.dim(),
        dtype: "f32".into(),
        endianness: "little".into(),
        model_fingerprint: p.model_fingerprint.clone(),
        created_utc: stamp.to_string(),
    };
    let mut out = Vec::with_capacity(5 + 128 + p.len() * p.dim() * 4);
    out.extend_from_slice(SOBF_MAGIC);
    out.push(SOBF_VERSION);
    serde_json::to_writer(&mut out, &header)?;
    out.push(b'\n');
    for v in p.rows.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Reads a SOBF file, validating magic, version, declared dtype/endianness,
/// and dimensions. Fingerprint checking against a model is a separate step
/// ([`SoftPrompt::check_model`]) so callers can decide whether a mismatch is
/// fatal.
pub fn deserialize_soft(path: &Path) -> Result<SoftPrompt> {
    deserialize_soft_bytes(&std::fs::read(path)?)
}

/// SOBF decoding from an in-memory byte slice.
pub fn deserialize_soft_bytes(bytes: &[u8]) -> Result<SoftPrompt> {
    let mut cursor = std::io::Cursor::new(bytes);
    let mut magic = [0u8; 4];
    cursor
        .read_exact(&mut magic)
        .map_err(|_| Error::FormatError("file too short for SOBF magic".into()))?;
    if &magic != SOBF_MAGIC {
        return Err(Error::FormatError(format!(
            "bad magic {magic:?}, expected \"SOBF\""
        )));
    }
    let mut version = [0u8; 1];
    cursor
        .read_exact(&mut version)
        .map_err(|_| Error::FormatError("file too short for SOBF version".into()))?;
    if version[0] != SOBF_VERSION {
        return Err(Error::FormatError(format!(
            "unsupported SOBF version {}",
            version[0]
        )));
    }
    let rest = &bytes[cursor.position() as usize..];
    let newline = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::FormatError("missing metadata line terminator".into()))?;
    let header: SobfHeader = serde_json::from_slice(&rest[..newline])
        .map_err(|e| Error::FormatError(format!("metadata line is not valid JSON: {e}")))?;
    if header.dtype != "f32" {
        return Err(Error::FormatError(format!(
            "unsupported dtype {:?}",
            header.dtype
        )));
    }
    if header.endianness != "little" {
        return Err(Error::FormatError(format!(
            "unsupported endianness {:?}",
            header.endianness
        )));
    }
    let payload = &rest[newline + 1..];
    let expected = header.t * header.d * 4;
    if payload.len() != expected {
        return Err(Error::FormatError(format!(
            "payload length {} != t*d*4 = {expected}",
            payload.len()
        )));
    }
    let mut values = Vec::with_capacity(header.t * header.d);
    for chunk in payload.chunks_exact(4) {
        values.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
    }
    let rows = Array2::from_shape_vec((header.t, header.d), values)
        .map_err(|e| Error::FormatError(format!("shape error: {e}")))?;
    SoftPrompt::new(rows, header.model_fingerprint)
}

/// Writes a hard prompt as both a JSON token-id list and its detokenized text.
pub fn write_hard_prompt(
    prompt: &HardPrompt,
    model: &dyn ModelGateway,
    json_path: &Path,
    text_path: &Path,
) -> Result<()> {
    let mut f = std::fs::File::create(json_path)?;
    serde_json::to_writer(&mut f, &prompt.token_ids)?;
    f.write_all(b"\n")?;
    std::fs::write(text_path, model.detokenize(&prompt.token_ids))?;
    Ok(())
}
