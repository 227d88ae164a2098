//! Per-invocation state: the merged configuration (file values overridden
//! by flags), the root seed, and helpers for reports and artifact sidecars.

use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use lesion_core::augment::AugmentSpec;
use lesion_core::config::{config_hash, load_kv, Config};
use serde_json::{json, Map, Value};

/// Config keys with this prefix are augmentation overrides.
const AUGMENT_PREFIX: &str = "augment.";
/// Where results go does not change what is computed, so these keys stay
/// out of the config hash.
const OUTPUT_KEYS: [&str; 3] = ["out", "masks_out", "attribute_scores"];

pub struct Ctx {
    command: &'static str,
    cfg: Config,
    hash: String,
}

impl Ctx {
    /// `flags` lists every key the command understands together with the
    /// value given on the command line, if any. Config-file keys outside
    /// that list (other than `seed` and `augment.*`) are rejected.
    pub fn new(command: &'static str, config: Option<&Path>, flags: Vec<(&'static str, Option<String>)>) -> Result<Self> {
        let mut cfg = match config {
            Some(p) => load_kv(p)?,
            None => Config::new(),
        };
        for key in cfg.keys() {
            let known = key == "seed" || key.starts_with(AUGMENT_PREFIX) || flags.iter().any(|(k, _)| k == key);
            if !known {
                bail!("config key `{key}` is not used by `{command}`");
            }
        }
        for (key, value) in flags {
            if let Some(v) = value {
                cfg.insert(key.to_string(), v);
            }
        }
        let mut hashed = cfg.clone();
        hashed.retain(|k, _| !OUTPUT_KEYS.contains(&k.as_str()));
        hashed.insert("command".into(), command.into());
        let hash = config_hash(&hashed);
        Ok(Self { command, cfg, hash })
    }

    pub fn seed(&self) -> Result<u64> {
        self.get("seed", 0)
    }

    pub fn hash(&self) -> &str {
        &self.hash
    }

    pub fn opt<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        self.cfg
            .get(key)
            .map(|v| v.parse::<T>().map_err(|e| anyhow!("invalid value `{v}` for `{key}`: {e}")))
            .transpose()
    }

    pub fn get<T: FromStr>(&self, key: &str, default: T) -> Result<T>
    where
        T::Err: Display,
    {
        Ok(self.opt(key)?.unwrap_or(default))
    }

    pub fn req<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: Display,
    {
        self.opt(key)?
            .ok_or_else(|| anyhow!("missing required `--{}`", key.replace('_', "-")))
    }

    pub fn path(&self, key: &str) -> Result<PathBuf> {
        self.req(key)
    }

    /// Comma-separated list value; empty when absent.
    pub fn list(&self, key: &str) -> Vec<String> {
        self.cfg
            .get(key)
            .map(|v| v.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect())
            .unwrap_or_default()
    }

    /// `base` with any `augment.*` overrides applied.
    pub fn augment_spec(&self, base: AugmentSpec) -> Result<AugmentSpec> {
        let overrides: Config = self
            .cfg
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(AUGMENT_PREFIX).map(|k| (k.to_string(), v.clone())))
            .collect();
        Ok(base.with_kv(&overrides)?)
    }

    fn provenance(&self) -> Map<String, Value> {
        let mut m = Map::new();
        m.insert("command".into(), json!(self.command));
        m.insert("seed".into(), json!(self.seed().unwrap_or_default()));
        m.insert("config_hash".into(), json!(self.hash));
        m
    }

    /// Prints the one-line JSON report for this invocation.
    pub fn report(&self, fields: Value) {
        let mut out = self.provenance();
        if let Value::Object(extra) = fields {
            out.extend(extra);
        }
        println!("{}", Value::Object(out));
    }

    /// Writes `<artifact>.meta.json` (or `<dir>/run.meta.json` for an output
    /// directory) recording the seed, config hash and full configuration.
    pub fn sidecar(&self, artifact: &Path, extra: Value) -> Result<()> {
        let path = if artifact.is_dir() {
            artifact.join("run.meta.json")
        } else {
            let mut name = artifact.as_os_str().to_owned();
            name.push(".meta.json");
            PathBuf::from(name)
        };
        let mut out = self.provenance();
        out.insert("config".into(), json!(self.cfg));
        out.insert("artifact".into(), json!(artifact.file_name().map(|n| n.to_string_lossy())));
        if let Value::Object(extra) = extra {
            out.extend(extra);
        }
        let text = serde_json::to_string_pretty(&Value::Object(out))?;
        fs::write(&path, text + "\n").with_context(|| format!("writing {}", path.display()))
    }
}
