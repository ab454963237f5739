//! Chat input assembly: ordered role segments carrying hard tokens or soft
//! embedding rows, and the lowering step that turns them into one embedding
//! matrix for the forward pass.

use std::ops::Range;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::model::template::Role;
use crate::model::ModelGateway;
use crate::prompt::{HardPrompt, SoftPrompt};

/// Payload carried by one chat segment: discrete token ids or embedding rows
/// that bypass the token-embedding layer.
#[derive(Debug, Clone)]
pub enum SegmentPayload {
    Hard(Vec<u32>),
    Soft(Array2<f64>),
}

impl SegmentPayload {
    pub fn len(&self) -> usize {
        match self {
            SegmentPayload::Hard(ids) => ids.len(),
            SegmentPayload::Soft(rows) => rows.nrows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn from_soft(p: &SoftPrompt) -> Self {
        SegmentPayload::Soft(p.to_f64())
    }
}

impl From<HardPrompt> for SegmentPayload {
    fn from(p: HardPrompt) -> Self {
        SegmentPayload::Hard(p.token_ids)
    }
}

#[derive(Debug, Clone)]
pub struct Segment {
    pub role: Role,
    pub payload: SegmentPayload,
}

/// An ordered sequence of role segments ready for lowering.
///
/// `templated` inputs wrap each segment in the model's role delimiters;
/// raw inputs concatenate payloads verbatim (used for token-level
/// experiments where no chat structure is wanted).
#[derive(Debug, Clone)]
pub struct AssembledInput {
    pub segments: Vec<Segment>,
    pub templated: bool,
}

impl AssembledInput {
    /// Builds the standard chat layout: optional system segment, one user
    /// segment, then the assistant header ready for generation. An absent
    /// system payload is the blank-baseline condition.
    pub fn chat(system: Option<SegmentPayload>, user_text: &str) -> Result<AssembledChatBuilder> {
        if user_text.is_empty() {
            return Err(Error::InvalidSpec("user text must be nonempty".into()));
        }
        Ok(AssembledChatBuilder {
            system,
            user_text: user_text.to_string(),
        })
    }

    /// Raw, template-free segments.
    pub fn raw(segments: Vec<Segment>) -> Self {
        Self {
            segments,
            templated: false,
        }
    }

    pub fn system_payload(&self) -> Option<&SegmentPayload> {
        self.segments
            .iter()
            .find(|s| s.role == Role::System)
            .map(|s| &s.payload)
    }

    /// Chat-shape invariant for templated inputs: at most one system
    /// segment and exactly one user segment. Raw inputs are unconstrained.
    pub fn validate_chat_shape(&self) -> Result<()> {
        if !self.templated {
            return Ok(());
        }
        let systems = self
            .segments
            .iter()
            .filter(|s| s.role == Role::System)
            .count();
        let users = self
            .segments
            .iter()
            .filter(|s| s.role == Role::User)
            .count();
        if systems > 1 {
            return Err(Error::InvalidSpec(format!(
                "chat input has {systems} system segments, at most 1 allowed"
            )));
        }
        if users != 1 {
            return Err(Error::InvalidSpec(format!(
                "chat input has {users} user segments, exactly 1 required"
            )));
        }
        Ok(())
    }
}

/// Intermediate chat layout; finalized against a model (whose tokenizer is
/// needed for the user text).
pub struct AssembledChatBuilder {
    system: Option<SegmentPayload>,
    user_text: String,
}

impl AssembledChatBuilder {
    pub fn build(self, model: &dyn ModelGateway) -> Result<AssembledInput> {
        let mut segments = Vec::with_capacity(3);
        if let Some(payload) = self.system {
            segments.push(Segment {
                role: Role::System,
                payload,
            });
        }
        let user = model.tokenize(&self.user_text)?;
        segments.push(Segment {
            role: Role::User,
            payload: user.into(),
        });
        segments.push(Segment {
            role: Role::Assistant,
            payload: SegmentPayload::Hard(vec![]),
        });
        Ok(AssembledInput {
            segments,
            templated: true,
        })
    }
}

/// Convenience wrapper matching the common call shape: optional system
/// payload plus user text, against a concrete model.
pub fn assemble_chat(
    model: &dyn ModelGateway,
    system: Option<SegmentPayload>,
    user_text: &str,
) -> Result<AssembledInput> {
    AssembledInput::chat(system, user_text)?.build(model)
}

/// The lowered form of an assembled input: one embedding-row matrix plus the
/// row span occupied by the system payload (the part optimizers act on).
#[derive(Debug, Clone)]
pub struct Lowered {
    /// `n x d` embedding rows, template and payload segments concatenated.
    pub rows: Array2<f64>,
    /// Row range of the system segment payload, if present.
    pub system_payload_span: Option<Range<usize>>,
    /// For rows that came from hard tokens, the originating id.
    pub hard_ids: Vec<Option<u32>>,
}

impl Lowered {
    pub fn len(&self) -> usize {
        self.rows.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.nrows() == 0
    }
}

/// Lowers an assembled input against a model: tokenizes template delimiters,
/// embeds hard payloads, splices soft payloads verbatim.
pub fn lower_input(model: &dyn ModelGateway, input: &AssembledInput) -> Result<Lowered> {
    input.validate_chat_shape()?;
    let d = model.embed_dim();
    let mut rows: Vec<f64> = Vec::new();
    let mut hard_ids: Vec<Option<u32>> = Vec::new();
    let mut system_payload_span = None;

    let push_hard =
        |ids: &[u32], rows: &mut Vec<f64>, hard_ids: &mut Vec<Option<u32>>| -> Result<()> {
            let table = model.embedding_table();
            for &id in ids {
                if id as usize >= model.vocab_size() {
                    return Err(Error::InvalidToken {
                        id,
                        vocab_size: model.vocab_size(),
                    });
                }
                rows.extend(table.row(id as usize).iter().map(|&v| f64::from(v)));
                hard_ids.push(Some(id));
            }
            Ok(())
        };

    for segment in &input.segments {
        if input.templated {
            let prefix = model.tokenize_unchecked(&model.template().delims(segment.role).prefix)?;
            push_hard(&prefix.token_ids, &mut rows, &mut hard_ids)?;
        }
        let start = hard_ids.len();
        match &segment.payload {
            SegmentPayload::Hard(ids) => push_hard(ids, &mut rows, &mut hard_ids)?,
            SegmentPayload::Soft(mat) => {
                if mat.ncols() != d {
                    return Err(Error::NumericError(format!(
                        "soft payload dim {} != model embed dim {d}",
                        mat.ncols()
                    )));
                }
                rows.extend(mat.iter().copied());
                hard_ids.extend(std::iter::repeat_n(None, mat.nrows()));
            }
        }
        if segment.role == Role::System && system_payload_span.is_none() {
            system_payload_span = Some(start..hard_ids.len());
        }
        // The assistant suffix is what the model itself produces, so only the
        // prefix is lowered for that role.
        if input.templated && segment.role != Role::Assistant {
            let suffix = model.tokenize_unchecked(&model.template().delims(segment.role).suffix)?;
            push_hard(&suffix.token_ids, &mut rows, &mut hard_ids)?;
        }
    }

    let n = hard_ids.len();
    let rows = Array2::from_shape_vec((n, d), rows)
        .map_err(|e| Error::NumericError(format!("lowering shape error: {e}")))?;
    Ok(Lowered {
        rows,
        system_payload_span,
        hard_ids,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chat_requires_nonempty_user() {
        assert!(AssembledInput::chat(None, "").is_err());
    }

    #[test]
    fn chat_shape_rejects_duplicate_roles() {
        let seg = |role| Segment {
            role,
            payload: SegmentPayload::Hard(vec![1]),
        };
        let two_systems = AssembledInput {
            segments: vec![seg(Role::System), seg(Role::System), seg(Role::User)],
            templated: true,
        };
        assert!(two_systems.validate_chat_shape().is_err());

        let no_user = AssembledInput {
            segments: vec![seg(Role::System)],
            templated: true,
        };
        assert!(no_user.validate_chat_shape().is_err());

        // Raw inputs are free-form.
        let raw = AssembledInput::raw(vec![seg(Role::System), seg(Role::System)]);
        assert!(raw.validate_chat_shape().is_ok());
    }
}
