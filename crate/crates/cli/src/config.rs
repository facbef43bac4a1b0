//! Run configuration file: model, encoder and training settings plus the
//! artifact paths the service loads.

use std::path::{Path, PathBuf};

use anyhow::Context;
use medconsult_core::decoder::ModelConfig;
use medconsult_core::encoder::{EncoderConfig, MlmConfig};
use medconsult_core::service::{EngineConfig, ServiceConfig};
use medconsult_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub vocab: Option<PathBuf>,
    pub encoder: Option<PathBuf>,
    pub kb: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub paths: Paths,
    pub model: ModelConfig,
    pub encoder: EncoderConfig,
    pub mlm: MlmConfig,
    pub train: TrainConfig,
    pub engine: EngineConfig,
    pub service: ServiceConfig,
}

impl RunConfig {
    /// Parses a TOML file; relative paths are taken from the file's
    /// directory.
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let body = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut c: RunConfig = toml::from_str(&body).with_context(|| format!("parsing {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut c.paths.vocab, &mut c.paths.encoder, &mut c.paths.kb, &mut c.service.journal]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        c.train.validate()?;
        Ok(c)
    }

    pub fn load_or_default(path: Option<&Path>) -> anyhow::Result<Self> {
        match path {
            Some(p) => Self::load(p),
            None => Ok(Self::default()),
        }
    }
}
