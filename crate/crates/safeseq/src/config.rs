//! Global JSON configuration: defaults, partial overrides and exhaustive validation.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use safeseq_core::envs::{BehaviorPolicySpec, EnvSpec};
use safeseq_core::eval::EvalProtocol;
use safeseq_core::policy::PolicyConfig;
use safeseq_core::trainer::{TrainConfig, Variant};
use safeseq_core::trajectory::TrajectoryDataset;

use crate::checkpoint::Precision;

/// Architecture knobs that do not depend on the dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyHyper {
    pub context_len: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub embed_dim: usize,
    pub dropout: f64,
}

impl Default for PolicyHyper {
    fn default() -> Self {
        let p = PolicyConfig::new(1, 1);
        Self { context_len: p.context_len, n_layers: p.n_layers, n_heads: p.n_heads, embed_dim: p.embed_dim, dropout: p.dropout }
    }
}

impl PolicyHyper {
    pub fn desk() -> Self {
        Self { n_layers: 2, n_heads: 2, embed_dim: 32, ..Self::default() }
    }

    pub fn resolve(&self, ds: &TrajectoryDataset) -> PolicyConfig {
        PolicyConfig {
            context_len: self.context_len,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            embed_dim: self.embed_dim,
            dropout: self.dropout,
            ..PolicyConfig::new(ds.state_dim(), ds.action_dim())
        }
        .fit_dataset(ds)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub dataset: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GlobalConfig {
    pub seed: u64,
    pub precision: Precision,
    pub paths: Paths,
    pub env: EnvSpec,
    pub behavior: BehaviorPolicySpec,
    pub episodes: usize,
    pub policy: PolicyHyper,
    pub train: TrainConfig,
    pub eval: EvalProtocol,
}

impl Default for GlobalConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            precision: Precision::F32,
            paths: Paths::default(),
            env: EnvSpec::default(),
            behavior: BehaviorPolicySpec::default(),
            episodes: 500,
            policy: PolicyHyper::default(),
            train: TrainConfig::new(Variant::Rcdt),
            eval: EvalProtocol::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Full-scale hyperparameters.
    #[default]
    Paper,
    /// Small model and short schedule for CPU runs.
    Desk,
}

impl GlobalConfig {
    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Paper => Self::default(),
            Preset::Desk => Self { policy: PolicyHyper::desk(), train: TrainConfig::desk(Variant::Rcdt), eval: EvalProtocol::desk(), ..Self::default() },
        }
    }

    /// Every problem across all sections.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut check = |section: &str, r: safeseq_core::Result<()>| {
            if let Err(e) = r {
                let msg = match e {
                    safeseq_core::Error::InvalidArgument(m) => m,
                    other => other.to_string(),
                };
                out.extend(msg.split("; ").map(|m| format!("{section}: {m}")));
            }
        };
        check("env", self.env.validate());
        check("behavior", self.behavior.validate());
        check("train", self.train.validate());
        check("eval", self.eval.validate());
        check("policy", PolicyConfig { context_len: self.policy.context_len, n_layers: self.policy.n_layers, n_heads: self.policy.n_heads, embed_dim: self.policy.embed_dim, dropout: self.policy.dropout, ..PolicyConfig::new(1, 1) }.validate());
        if self.episodes == 0 {
            out.push("episodes: must be >= 1".into());
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("{} config violation(s): {}", .0.len(), .0.join(" | "))]
pub struct ConfigError(pub Vec<String>);

/// Collects keys present in `user` but absent from `base`; tagged enums whose tag changes are replaced wholesale.
fn merge(base: &mut Value, user: &Value, path: &str, unknown: &mut Vec<String>) {
    match (base, user) {
        (Value::Object(b), Value::Object(u)) => {
            let tag_changed = matches!((b.get("kind"), u.get("kind")), (Some(x), Some(y)) if x != y);
            if tag_changed {
                *b = u.clone();
                return;
            }
            for (k, v) in u {
                let p = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match b.get_mut(k) {
                    Some(slot) => merge(slot, v, &p, unknown),
                    None => unknown.push(format!("{p}: unknown key")),
                }
            }
        }
        (slot, v) => *slot = v.clone(),
    }
}

fn section<T: DeserializeOwned>(map: &Map<String, Value>, key: &str, errors: &mut Vec<String>) -> Option<T> {
    match serde_json::from_value(map.get(key).cloned().unwrap_or(Value::Null)) {
        Ok(v) => Some(v),
        Err(e) => {
            errors.push(format!("{key}: {e}"));
            None
        }
    }
}

/// Applies a JSON override onto `base`, reporting every unknown key, type error and
/// validation failure together.
pub fn resolve(base: &GlobalConfig, user: &Value) -> Result<GlobalConfig, ConfigError> {
    let mut merged = serde_json::to_value(base).expect("config serializes");
    let mut errors = Vec::new();
    if !user.is_object() && !user.is_null() {
        return Err(ConfigError(vec!["config root must be a JSON object".into()]));
    }
    if user.is_object() {
        merge(&mut merged, user, "", &mut errors);
    }
    let map = merged.as_object().expect("object");
    let e = &mut errors;
    let parsed = (
        section(map, "seed", e),
        section(map, "precision", e),
        section(map, "paths", e),
        section(map, "env", e),
        section(map, "behavior", e),
        section(map, "episodes", e),
        section(map, "policy", e),
        section(map, "train", e),
        section(map, "eval", e),
    );
    let cfg = match parsed {
        (Some(seed), Some(precision), Some(paths), Some(env), Some(behavior), Some(episodes), Some(policy), Some(train), Some(eval)) => {
            GlobalConfig { seed, precision, paths, env, behavior, episodes, policy, train, eval }
        }
        _ => return Err(ConfigError(errors)),
    };
    errors.extend(cfg.violations());
    if errors.is_empty() {
        Ok(cfg)
    } else {
        Err(ConfigError(errors))
    }
}

pub fn load(base: &GlobalConfig, path: &Path) -> Result<GlobalConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError(vec![format!("{}: {e}", path.display())]))?;
    let user: Value = serde_json::from_str(&text).map_err(|e| ConfigError(vec![format!("{}: {e}", path.display())]))?;
    resolve(base, &user)
}
