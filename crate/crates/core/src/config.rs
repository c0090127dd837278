//! Service configuration: a TOML file with `MERGE_*` environment overrides.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::realization::{Budget, Engine, EngineOptions, DEFAULT_MAX_HOPS};

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub listen: String,
    pub agents: usize,
    pub lease_ttl_ms: u64,
    pub retry_cap: u32,
    /// Append-only store journal; in-memory when absent.
    pub journal: Option<PathBuf>,
    pub engine: Engine,
    pub max_hops: usize,
    /// Map each experiment link onto exactly one resource link.
    pub single_hop: bool,
    pub seed: u64,
    pub budget_nodes: u64,
    pub budget_ms: u64,
    /// How long an idle agent sleeps before looking again.
    pub agent_idle_ms: u64,
}

impl Default for Config {
    fn default() -> Self {
        let budget = Budget::default();
        Config {
            listen: "127.0.0.1:4747".into(),
            agents: 4,
            lease_ttl_ms: 10_000,
            retry_cap: 25,
            journal: None,
            engine: Engine::Greedy,
            max_hops: DEFAULT_MAX_HOPS,
            single_hop: false,
            seed: 0,
            budget_nodes: budget.max_nodes_expanded,
            budget_ms: budget.max_ms,
            agent_idle_ms: 20,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("parsing config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("{var}: {message}")]
    Env { var: String, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

fn parse_env<T: std::str::FromStr>(var: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::Env {
        var: var.into(),
        message: e.to_string(),
    })
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Config, ConfigError> {
        let c: Config = toml::from_str(text)?;
        c.check()?;
        Ok(c)
    }

    /// Reads `path` if given, then applies the process environment.
    pub fn load(path: Option<&Path>) -> Result<Config, ConfigError> {
        let mut c = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|source| ConfigError::Read {
                    path: p.to_path_buf(),
                    source,
                })?;
                toml::from_str(&text)?
            }
            None => Config::default(),
        };
        c.apply_env(std::env::vars())?;
        c.check()?;
        Ok(c)
    }

    /// Applies `MERGE_<FIELD>` overrides, e.g. `MERGE_LISTEN`, `MERGE_AGENTS`.
    pub fn apply_env(&mut self, vars: impl IntoIterator<Item = (String, String)>) -> Result<(), ConfigError> {
        for (k, v) in vars {
            let Some(field) = k.strip_prefix("MERGE_") else {
                continue;
            };
            match field {
                "LISTEN" => self.listen = v,
                "AGENTS" => self.agents = parse_env(&k, &v)?,
                "LEASE_TTL_MS" => self.lease_ttl_ms = parse_env(&k, &v)?,
                "RETRY_CAP" => self.retry_cap = parse_env(&k, &v)?,
                "JOURNAL" => self.journal = Some(v.into()),
                "ENGINE" => self.engine = parse_env(&k, &v)?,
                "MAX_HOPS" => self.max_hops = parse_env(&k, &v)?,
                "SINGLE_HOP" => self.single_hop = parse_env(&k, &v)?,
                "SEED" => self.seed = parse_env(&k, &v)?,
                "BUDGET_NODES" => self.budget_nodes = parse_env(&k, &v)?,
                "BUDGET_MS" => self.budget_ms = parse_env(&k, &v)?,
                "AGENT_IDLE_MS" => self.agent_idle_ms = parse_env(&k, &v)?,
                // Other MERGE_ variables (such as the CLI's address) are not ours.
                _ => {}
            }
        }
        Ok(())
    }

    fn check(&self) -> Result<(), ConfigError> {
        if self.max_hops == 0 || self.max_hops > crate::realization::path::HOP_LIMIT {
            return Err(ConfigError::Invalid(format!(
                "max_hops must be in 1..={}",
                crate::realization::path::HOP_LIMIT
            )));
        }
        if self.lease_ttl_ms == 0 {
            return Err(ConfigError::Invalid("lease_ttl_ms must be positive".into()));
        }
        Ok(())
    }

    pub fn engine_options(&self) -> EngineOptions {
        EngineOptions {
            max_hops: if self.single_hop { 1 } else { self.max_hops },
            seed: self.seed,
        }
    }

    pub fn budget(&self) -> Budget {
        Budget {
            max_nodes_expanded: self.budget_nodes,
            max_ms: self.budget_ms,
        }
    }
}
