use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use mois_core::inference::PostprocConfig;
use serde::{Deserialize, Serialize};

use crate::error::ConfigError;

pub const ENV_PREFIX: &str = "MOIS_";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub listen: SocketAddr,
    /// Identifier clients pass as `model_id`.
    pub model_id: String,
    pub model_checkpoint: PathBuf,
    pub session_ttl_secs: u64,
    pub max_sessions: usize,
    /// Volumes and session snapshots are persisted here when non-empty.
    pub snapshot_dir: PathBuf,
    pub max_upload_bytes: usize,
    pub postproc: PostprocConfig,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            listen: SocketAddr::from(([127, 0, 0, 1], 8080)),
            model_id: "default".into(),
            model_checkpoint: PathBuf::from("model.ckpt"),
            session_ttl_secs: 3600,
            max_sessions: 64,
            snapshot_dir: PathBuf::new(),
            max_upload_bytes: 512 << 20,
            postproc: PostprocConfig::default(),
        }
    }
}

impl ServiceConfig {
    /// Parses TOML, then applies `MOIS_*` overrides from `env`.
    ///
    /// `MOIS_SESSION_TTL_SECS=60` sets `session_ttl_secs`; nested keys use a
    /// double underscore, e.g. `MOIS_POSTPROC__V_THRESH_MM3`. Values are read
    /// as TOML literals and fall back to plain strings.
    pub fn from_toml_with_env<I>(text: &str, env: I) -> Result<Self, ConfigError>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        let mut table: toml::Table = toml::from_str(text)?;
        let defaults = toml::Table::try_from(Self::default()).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        merge_missing(&mut table, &defaults);
        for (key, raw) in env {
            let Some(rest) = key.strip_prefix(ENV_PREFIX) else { continue };
            let path: Vec<String> = rest.split("__").map(|s| s.to_ascii_lowercase()).collect();
            set_path(&mut table, &path, parse_literal(&raw)).map_err(|_| ConfigError::Env(key.clone()))?;
        }
        let cfg: Self = table.try_into()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| ConfigError::Read(p.to_path_buf(), e))?,
            None => String::new(),
        };
        Self::from_toml_with_env(&text, std::env::vars())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.max_sessions == 0 {
            return Err(ConfigError::Invalid("max_sessions must be positive".into()));
        }
        if self.session_ttl_secs == 0 {
            return Err(ConfigError::Invalid("session_ttl_secs must be positive".into()));
        }
        if self.model_id.is_empty() {
            return Err(ConfigError::Invalid("model_id must not be empty".into()));
        }
        Ok(())
    }

    pub fn persistence(&self) -> Option<&Path> {
        (!self.snapshot_dir.as_os_str().is_empty()).then_some(self.snapshot_dir.as_path())
    }
}

fn merge_missing(into: &mut toml::Table, defaults: &toml::Table) {
    for (k, v) in defaults {
        match (into.get_mut(k), v) {
            (Some(toml::Value::Table(t)), toml::Value::Table(d)) => merge_missing(t, d),
            (Some(_), _) => {}
            (None, _) => {
                into.insert(k.clone(), v.clone());
            }
        }
    }
}

fn parse_literal(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_path(table: &mut toml::Table, path: &[String], value: toml::Value) -> Result<(), ()> {
    match path {
        [] => Err(()),
        [last] => {
            // Keep strings as strings when the existing key is a string ("8080" stays text).
            let value = match (table.get(last), value) {
                (Some(toml::Value::String(_)), v) if !v.is_str() => toml::Value::String(v.to_string()),
                (_, v) => v,
            };
            table.insert(last.clone(), value);
            Ok(())
        }
        [head, rest @ ..] => match table.entry(head.clone()).or_insert_with(|| toml::Value::Table(Default::default())) {
            toml::Value::Table(t) => set_path(t, rest, value),
            _ => Err(()),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn defaults_from_empty_file() {
        assert_eq!(ServiceConfig::from_toml_with_env("", env(&[])).unwrap(), ServiceConfig::default());
    }

    #[test]
    fn env_overrides_file() {
        let text = "max_sessions = 3\nmodel_checkpoint = \"a.ckpt\"\n";
        let cfg = ServiceConfig::from_toml_with_env(
            text,
            env(&[
                ("MOIS_MAX_SESSIONS", "5"),
                ("MOIS_LISTEN", "0.0.0.0:9000"),
                ("MOIS_POSTPROC__V_THRESH_MM3", "0"),
                ("MOIS_POSTPROC__MERGE", "instance_only"),
                ("MOIS_MODEL_ID", "42"),
                ("OTHER", "x"),
            ]),
        )
        .unwrap();
        assert_eq!(cfg.max_sessions, 5);
        assert_eq!(cfg.listen.port(), 9000);
        assert_eq!(cfg.model_checkpoint, PathBuf::from("a.ckpt"));
        assert_eq!(cfg.postproc.v_thresh_mm3, 0.0);
        assert_eq!(cfg.postproc.merge, mois_core::inference::Merge::InstanceOnly);
        assert_eq!(cfg.model_id, "42");
    }

    #[test]
    fn rejects_unknown_and_invalid() {
        assert!(ServiceConfig::from_toml_with_env("", env(&[("MOIS_NOPE", "1")])).is_err());
        assert!(ServiceConfig::from_toml_with_env("max_sessions = 0", env(&[])).is_err());
    }
}
