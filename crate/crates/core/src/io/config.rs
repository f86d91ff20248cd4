//! Run config documents (TOML, or JSON by extension).

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::harness::RunConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConfigFormat {
    Toml,
    Json,
}

impl ConfigFormat {
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("json") => ConfigFormat::Json,
            _ => ConfigFormat::Toml,
        }
    }
}

/// Parse, validate and materialize a config document. Unknown keys are
/// rejected.
pub fn parse_config(text: &str, format: ConfigFormat) -> Result<RunConfig> {
    let mut config: RunConfig = match format {
        ConfigFormat::Toml => toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?,
        ConfigFormat::Json => serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?,
    };
    config.materialize();
    config.validate()?;
    Ok(config)
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    parse_config(&text, ConfigFormat::from_path(path))
}

/// Single-line JSON echo with every default filled in.
pub fn echo(config: &RunConfig) -> String {
    serde_json::to_string(config).expect("run config serializes")
}

/// SHA-256 of the echo, hex encoded.
pub fn config_hash(config: &RunConfig) -> String {
    hex::encode(Sha256::digest(echo(config).as_bytes()))
}
