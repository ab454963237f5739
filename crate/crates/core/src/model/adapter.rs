//! Model adapter configuration: JSON descriptors that select and build a
//! backend.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::template::ChatTemplate;
use crate::model::{EchoModel, GradientModel, ModelGateway, TinyConfig, TinyTransformer};

/// Adapter descriptor: `{backend_id, model_path, template_path, dtype}`.
///
/// `model_path` points at backend-specific parameters (for `tiny`, a
/// [`TinyConfig`] JSON file). `template_path` points at a [`ChatTemplate`]
/// JSON file; when absent the default template is used. `dtype` is accepted
/// for forward compatibility; the in-repo backends always compute in f64.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelAdapterConfig {
    pub backend_id: String,
    #[serde(default)]
    pub model_path: Option<PathBuf>,
    #[serde(default)]
    pub template_path: Option<PathBuf>,
    #[serde(default)]
    pub dtype: Option<String>,
}

impl ModelAdapterConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let cfg: ModelAdapterConfig = serde_json::from_reader(std::fs::File::open(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        match self.backend_id.as_str() {
            "tiny" | "echo" => {}
            other => {
                return Err(Error::ConfigError(format!(
                    "unknown backend_id {other:?} (available: tiny, echo)"
                )))
            }
        }
        if let Some(dtype) = &self.dtype {
            if dtype != "f32" && dtype != "f64" {
                return Err(Error::ConfigError(format!(
                    "unsupported dtype {dtype:?} (accepted: f32, f64)"
                )));
            }
        }
        Ok(())
    }
}

/// A constructed backend. Only gradient-capable backends can run the
/// optimizers; every backend can serve evaluation and black-box attacks.
#[allow(clippy::large_enum_variant)]
pub enum Backend {
    Tiny(TinyTransformer),
    Echo(EchoModel),
}

impl Backend {
    pub fn gateway(&self) -> &dyn ModelGateway {
        match self {
            Backend::Tiny(m) => m,
            Backend::Echo(m) => m,
        }
    }

    pub fn gradient(&self) -> Option<&dyn GradientModel> {
        match self {
            Backend::Tiny(m) => Some(m),
            Backend::Echo(_) => None,
        }
    }
}

/// Builds a backend from an adapter config, resolving relative paths against
/// `base_dir` when given.
pub fn load_backend(cfg: &ModelAdapterConfig, base_dir: Option<&Path>) -> Result<Backend> {
    cfg.validate()?;
    let resolve = |p: &PathBuf| -> PathBuf {
        if p.is_relative() {
            if let Some(base) = base_dir {
                return base.join(p);
            }
        }
        p.clone()
    };
    let template = match &cfg.template_path {
        Some(p) => ChatTemplate::from_json_file(&resolve(p))?,
        None => ChatTemplate::default_tiny(),
    };
    match cfg.backend_id.as_str() {
        "tiny" => {
            let tiny_cfg = match &cfg.model_path {
                Some(p) => TinyConfig::from_json_file(&resolve(p))?,
                None => TinyConfig::default(),
            };
            Ok(Backend::Tiny(TinyTransformer::new(tiny_cfg, template)?))
        }
        "echo" => Ok(Backend::Echo(EchoModel::new(8, 0, template))),
        _ => unreachable!("validated above"),
    }
}
