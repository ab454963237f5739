//! Rule-based gateway for harness debugging: it parrots its hard system
//! text back on any query and emits uniform logits everywhere else.

use std::collections::BTreeSet;

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::template::ChatTemplate;
use crate::model::{AssembledInput, ModelGateway, SamplingConfig, SegmentPayload};
use crate::prompt::HardPrompt;

use super::tiny::BYTE_TOKEN_LIMIT;

/// What the echo backend says when it has no system text to reveal (blank
/// or soft-prompt condition).
pub const ECHO_NO_TEXT_RESPONSE: &str = "There is nothing readable to repeat.";

/// Deterministic echo backend. `generate` returns the detokenized hard
/// system payload verbatim; a soft or absent system payload yields a fixed
/// refusal string, since no readable text exists to leak. Logits are uniform,
/// so `sequence_nll` is exactly `ln(vocab_size)` for every sequence.
#[derive(Debug, Clone)]
pub struct EchoModel {
    table: Array2<f32>,
    specials: BTreeSet<u32>,
    template: ChatTemplate,
    fingerprint: String,
}

impl EchoModel {
    pub fn new(embed_dim: usize, seed: u64, template: ChatTemplate) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let table =
            Array2::from_shape_fn((256, embed_dim), |_| rng.random_range(-0.5..0.5f64) as f32);
        let mut hasher = Sha256::new();
        hasher.update(256u64.to_le_bytes());
        hasher.update((embed_dim as u64).to_le_bytes());
        for x in table.iter() {
            hasher.update(x.to_le_bytes());
        }
        Self {
            table,
            specials: (BYTE_TOKEN_LIMIT..=255).collect(),
            template,
            fingerprint: hex::encode(hasher.finalize()),
        }
    }
}

impl Default for EchoModel {
    fn default() -> Self {
        Self::new(8, 0, ChatTemplate::default_tiny())
    }
}

impl ModelGateway for EchoModel {
    fn vocab_size(&self) -> usize {
        256
    }

    fn embed_dim(&self) -> usize {
        self.table.ncols()
    }

    fn max_context(&self) -> usize {
        4096
    }

    fn embedding_table(&self) -> ArrayView2<'_, f32> {
        self.table.view()
    }

    fn special_token_ids(&self) -> &BTreeSet<u32> {
        &self.specials
    }

    fn eot_token_id(&self) -> Option<u32> {
        Some(255)
    }

    fn template(&self) -> &ChatTemplate {
        &self.template
    }

    fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    fn tokenize(&self, text: &str) -> Result<HardPrompt> {
        for delim in self.template.delimiter_strings() {
            if text.contains(delim) {
                return Err(Error::TemplateCollision {
                    delimiter: delim.to_string(),
                });
            }
        }
        self.tokenize_unchecked(text)
    }

    fn tokenize_unchecked(&self, text: &str) -> Result<HardPrompt> {
        Ok(HardPrompt::new(text.bytes().map(u32::from).collect()))
    }

    fn detokenize(&self, tokens: &[u32]) -> String {
        let bytes: Vec<u8> = tokens
            .iter()
            .filter(|&&id| id < BYTE_TOKEN_LIMIT)
            .map(|&id| id as u8)
            .collect();
        String::from_utf8_lossy(&bytes).into_owned()
    }

    fn forward_logits(&self, _input: &AssembledInput, teacher: &[u32]) -> Result<Array2<f64>> {
        if teacher.is_empty() {
            return Err(Error::DegenerateSequence { len: 0, min: 1 });
        }
        Ok(Array2::zeros((teacher.len(), 256)))
    }

    fn generate_tokens(&self, input: &AssembledInput, cfg: &SamplingConfig) -> Result<Vec<u32>> {
        cfg.validate()?;
        let text = match input.system_payload() {
            Some(SegmentPayload::Hard(ids)) if !ids.is_empty() => self.detokenize(ids),
            _ => ECHO_NO_TEXT_RESPONSE.to_string(),
        };
        let mut ids = self.tokenize_unchecked(&text)?.token_ids;
        ids.truncate(cfg.max_new_tokens);
        Ok(ids)
    }

    fn sequence_nll(&self, tokens: &[u32]) -> Result<f64> {
        if tokens.len() < 2 {
            return Err(Error::DegenerateSequence {
                len: tokens.len(),
                min: 2,
            });
        }
        Ok((256f64).ln())
    }
}
