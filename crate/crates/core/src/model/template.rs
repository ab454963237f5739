//! Chat template: role delimiters as data, loaded from JSON.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;

/// Conversation roles recognized by the prompt assembler.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

/// Prefix/suffix strings wrapped around one role's payload.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoleDelims {
    pub prefix: String,
    pub suffix: String,
}

/// Role-delimiter strings for the three chat roles. Templates are plain data
/// so non-default formats work without code changes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatTemplate {
    pub system: RoleDelims,
    pub user: RoleDelims,
    pub assistant: RoleDelims,
}

impl ChatTemplate {
    pub fn delims(&self, role: Role) -> &RoleDelims {
        match role {
            Role::System => &self.system,
            Role::User => &self.user,
            Role::Assistant => &self.assistant,
        }
    }

    /// All nonempty delimiter strings, used for collision checks.
    pub fn delimiter_strings(&self) -> Vec<&str> {
        [&self.system, &self.user, &self.assistant]
            .into_iter()
            .flat_map(|d| [d.prefix.as_str(), d.suffix.as_str()])
            .filter(|s| !s.is_empty())
            .collect()
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        Ok(serde_json::from_reader(std::fs::File::open(path)?)?)
    }

    /// Template used by the in-repo backends.
    pub fn default_tiny() -> Self {
        Self {
            system: RoleDelims {
                prefix: "<|system|>\n".into(),
                suffix: "<|end|>\n".into(),
            },
            user: RoleDelims {
                prefix: "<|user|>\n".into(),
                suffix: "<|end|>\n".into(),
            },
            assistant: RoleDelims {
                prefix: "<|assistant|>\n".into(),
                suffix: String::new(),
            },
        }
    }

    /// A template with no delimiters at all, for raw token-level experiments.
    pub fn empty() -> Self {
        Self {
            system: RoleDelims::default(),
            user: RoleDelims::default(),
            assistant: RoleDelims::default(),
        }
    }
}
