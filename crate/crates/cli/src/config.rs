use std::path::{Path, PathBuf};

use graphalign::align::AlignConfig;
use graphalign::encoder::EncoderDims;
use graphalign::pretrain::PretrainConfig;
use graphalign::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSection {
    pub layers: usize,
    pub hidden_dim: usize,
    /// Node feature width; taken from the data when absent.
    pub input_dim: Option<usize>,
}

impl Default for EncoderSection {
    fn default() -> Self {
        EncoderSection {
            layers: 3,
            hidden_dim: 768,
            input_dim: None,
        }
    }
}

impl EncoderSection {
    pub fn dims(&self, data_input_dim: usize) -> Result<EncoderDims> {
        if let Some(d) = self.input_dim {
            if d != data_input_dim {
                return Err(Error::InvalidParameter(format!(
                    "encoder.input_dim is {d} but the data has {data_input_dim}-wide features"
                )));
            }
        }
        let dims = EncoderDims {
            input_dim: data_input_dim,
            hidden_dim: self.hidden_dim,
            layers: self.layers,
        };
        dims.validate()?;
        Ok(dims)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    pub data: Option<PathBuf>,
    pub encoder: Option<PathBuf>,
    pub projector: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub metrics: Option<PathBuf>,
    pub losses: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub encoder: EncoderSection,
    pub pretrain: PretrainConfig,
    pub align: AlignConfig,
    pub paths: PathsSection,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })?;
        Ok(cfg)
    }

    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(RunConfig::default()), RunConfig::load)
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoder.layers == 0 || self.encoder.hidden_dim == 0 {
            return Err(Error::InvalidParameter(
                "encoder layers and hidden_dim must be positive".into(),
            ));
        }
        self.pretrain.validate()?;
        self.align.validate()
    }
}

/// Picks the flag, then the config entry, else reports the missing option.
pub fn resolve_path(
    flag: Option<PathBuf>,
    file: &mut Option<PathBuf>,
    name: &str,
) -> std::result::Result<PathBuf, String> {
    if let Some(p) = flag {
        *file = Some(p);
    }
    file.clone()
        .ok_or_else(|| format!("the argument '--{name} <PATH>' is required (or set paths.{name} in the config)"))
}
