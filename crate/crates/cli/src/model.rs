//! `--model` specifications and provider construction.

use std::path::PathBuf;
use std::str::FromStr;
use std::time::Duration;

use anyhow::{anyhow, bail, Result};

use maskflow_core::bridge::{BridgeConfig, BridgeProvider, Launch};
use maskflow_core::oracle::{task_profile, NoiseProfile, NoisyOracle, ScriptedTask};
use maskflow_core::{DecodeConfig, PredictionProvider};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ModelSpec {
    /// Scripted oracle over a suite file; `index` picks the task.
    Oracle { path: PathBuf, index: Option<usize> },
    /// Child process speaking the bridge protocol on stdin/stdout.
    Bridge(String),
    /// Bridge server listening at `host:port`.
    Tcp(String),
}

/// Split `PATH#INDEX` into its parts. A suffix that is not an index stays
/// part of the path.
pub fn split_index(s: &str) -> (PathBuf, Option<usize>) {
    match s.rsplit_once('#') {
        Some((path, idx)) if !path.is_empty() => match idx.parse() {
            Ok(i) => (PathBuf::from(path), Some(i)),
            Err(_) => (PathBuf::from(s), None),
        },
        _ => (PathBuf::from(s), None),
    }
}

impl FromStr for ModelSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let (kind, rest) = s.split_once(':').ok_or_else(|| {
            format!("expected oracle:PATH[#INDEX], bridge:CMD or tcp:ADDR, got '{s}'")
        })?;
        if rest.is_empty() {
            return Err(format!("empty {kind} target"));
        }
        match kind {
            "oracle" => {
                let (path, index) = split_index(rest);
                Ok(ModelSpec::Oracle { path, index })
            }
            "bridge" => Ok(ModelSpec::Bridge(rest.to_string())),
            "tcp" => Ok(ModelSpec::Tcp(rest.to_string())),
            other => Err(format!(
                "unknown model kind '{other}' (oracle, bridge, tcp)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BridgeOpts {
    pub timeout: Duration,
    pub retries: u32,
}

impl ModelSpec {
    pub fn is_oracle(&self) -> bool {
        matches!(self, ModelSpec::Oracle { .. })
    }

    /// Provider for suite task `index`. Oracle providers are seeded per task
    /// exactly as in sweeps, so single runs reproduce sweep cells.
    pub fn provider(
        &self,
        task: &ScriptedTask,
        index: usize,
        cfg: &DecodeConfig,
        noise: &NoiseProfile,
        bridge: BridgeOpts,
    ) -> Result<Box<dyn PredictionProvider>> {
        let launch = match self {
            ModelSpec::Oracle { .. } => {
                let profile = task_profile(noise, cfg.seed, index);
                return Ok(Box::new(NoisyOracle::new(task.clone(), profile)));
            }
            ModelSpec::Bridge(cmd) => Launch::Command(cmd.clone()),
            ModelSpec::Tcp(addr) => Launch::Tcp(addr.clone()),
        };
        let provider = BridgeProvider::connect(BridgeConfig {
            launch,
            request_timeout: bridge.timeout,
            max_retries: bridge.retries,
        })?;
        Ok(Box::new(provider))
    }
}

pub fn pick_task(tasks: &[ScriptedTask], index: usize) -> Result<&ScriptedTask> {
    if tasks.is_empty() {
        bail!("task suite is empty");
    }
    tasks.get(index).ok_or_else(|| {
        anyhow!(
            "task index {index} out of range (suite has {} tasks)",
            tasks.len()
        )
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_model_specs() {
        assert_eq!(
            "oracle:tasks.json#3".parse::<ModelSpec>().unwrap(),
            ModelSpec::Oracle {
                path: "tasks.json".into(),
                index: Some(3)
            }
        );
        assert_eq!(
            "oracle:dir/a#b.json".parse::<ModelSpec>().unwrap(),
            ModelSpec::Oracle {
                path: "dir/a#b.json".into(),
                index: None
            }
        );
        assert_eq!(
            "bridge:./server --flag x".parse::<ModelSpec>().unwrap(),
            ModelSpec::Bridge("./server --flag x".into())
        );
        assert_eq!(
            "tcp:127.0.0.1:9000".parse::<ModelSpec>().unwrap(),
            ModelSpec::Tcp("127.0.0.1:9000".into())
        );
        assert!("gpu:x".parse::<ModelSpec>().is_err());
        assert!("oracle:".parse::<ModelSpec>().is_err());
        assert!("tasks.json".parse::<ModelSpec>().is_err());
    }
}
