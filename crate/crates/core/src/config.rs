//! Flat `key=value` configuration files.
//!
//! One entry per line; blank lines and lines starting with `#` are ignored.
//! Keys are unique. Command-line flags override file values.

use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key=value`, found `{text}`")]
    Syntax { line: usize, text: String },
    #[error("line {line}: duplicate key `{key}`")]
    Duplicate { line: usize, key: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Config = BTreeMap<String, String>;

pub fn parse_kv(text: &str) -> Result<Config, ConfigError> {
    let mut out = Config::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
            line: i + 1,
            text: raw.to_string(),
        })?;
        let key = k.trim();
        if key.is_empty() {
            return Err(ConfigError::Syntax {
                line: i + 1,
                text: raw.to_string(),
            });
        }
        if out.insert(key.to_string(), v.trim().to_string()).is_some() {
            return Err(ConfigError::Duplicate {
                line: i + 1,
                key: key.to_string(),
            });
        }
    }
    Ok(out)
}

pub fn load_kv(path: &Path) -> Result<Config, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_kv(&text)
}

/// Canonical text form: sorted `key=value` lines.
pub fn to_kv(cfg: &Config) -> String {
    cfg.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

/// First 16 hex digits of the SHA-256 of the canonical form.
pub fn config_hash(cfg: &Config) -> String {
    let digest = Sha256::digest(to_kv(cfg).as_bytes());
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// Stable per-item seed derived from the invocation's root seed, so results
/// for one item never depend on which other items are processed.
pub fn derive_seed(root: u64, tag: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update(tag.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("32-byte digest"))
}
