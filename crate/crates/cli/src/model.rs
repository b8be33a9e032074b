use crate::error::{CliError, CliResult};
use serde::{Deserialize, Serialize};
use std::path::PathBuf;
use xplain_core::gateway::{ModelHandle, RemoteConfig, MODEL_URL_ENV};
use xplain_core::nnet::load_checkpoint;

/// Where predictions come from: `native:<checkpoint>`, `remote:<url>`, a bare
/// checkpoint path or a bare http(s) URL.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "backend", rename_all = "snake_case")]
pub enum ModelSource {
    Native { checkpoint: PathBuf },
    Remote { url: String },
}

impl ModelSource {
    pub fn parse(spec: &str) -> CliResult<Self> {
        let spec = spec.trim();
        if let Some(path) = spec.strip_prefix("native:") {
            return Ok(Self::native(path));
        }
        if let Some(url) = spec.strip_prefix("remote:") {
            return Self::remote(url);
        }
        if spec.starts_with("http://") || spec.starts_with("https://") {
            return Self::remote(spec);
        }
        if spec.is_empty() {
            return Err(CliError::config("empty model spec"));
        }
        Ok(Self::native(spec))
    }

    fn native(path: &str) -> Self {
        let path = PathBuf::from(path);
        let checkpoint = std::path::absolute(&path).unwrap_or(path);
        Self::Native { checkpoint }
    }

    fn remote(url: &str) -> CliResult<Self> {
        if !(url.starts_with("http://") || url.starts_with("https://")) {
            return Err(CliError::config(format!(
                "remote model URL must be http(s), got {url:?}"
            )));
        }
        Ok(Self::Remote {
            url: url.trim_end_matches('/').to_string(),
        })
    }

    /// The `--model` value, or the model URL environment variable when the
    /// flag is absent.
    pub fn resolve(flag: Option<&str>) -> CliResult<Self> {
        match flag {
            Some(spec) => Self::parse(spec),
            None => match std::env::var(MODEL_URL_ENV) {
                Ok(url) if !url.trim().is_empty() => Self::remote(url.trim()),
                _ => Err(CliError::config(format!(
                    "no --model given and {MODEL_URL_ENV} is not set"
                ))),
            },
        }
    }

    pub fn is_remote(&self) -> bool {
        matches!(self, Self::Remote { .. })
    }

    pub fn open(&self) -> CliResult<ModelHandle> {
        match self {
            Self::Native { checkpoint } => {
                if !checkpoint.is_file() {
                    return Err(CliError::data(format!(
                        "checkpoint {} does not exist",
                        checkpoint.display()
                    )));
                }
                let ckpt = load_checkpoint(checkpoint).map_err(|e| {
                    CliError::data(format!(
                        "cannot load checkpoint {}: {e}",
                        checkpoint.display()
                    ))
                })?;
                Ok(ModelHandle::native(ckpt.network, ckpt.class_names)?)
            }
            Self::Remote { url } => Ok(ModelHandle::remote(RemoteConfig::new(url.clone()))?),
        }
    }
}

impl std::fmt::Display for ModelSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Native { checkpoint } => write!(f, "native:{}", checkpoint.display()),
            Self::Remote { url } => write!(f, "remote:{url}"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_forms() {
        assert!(matches!(
            ModelSource::parse("native:m.xck").unwrap(),
            ModelSource::Native { .. }
        ));
        assert!(matches!(
            ModelSource::parse("m.xck").unwrap(),
            ModelSource::Native { .. }
        ));
        assert_eq!(
            ModelSource::parse("remote:http://h:1/").unwrap(),
            ModelSource::Remote {
                url: "http://h:1".into()
            }
        );
        assert!(ModelSource::parse("http://h:1").unwrap().is_remote());
        assert!(ModelSource::parse("remote:ftp://x").is_err());
        assert!(ModelSource::parse("").is_err());
    }
}
