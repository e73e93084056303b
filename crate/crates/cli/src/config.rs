//! Layered run configuration: built-in profile defaults, then a TOML file,
//! then `HYPERPLANES_*` environment variables, then command-line flags.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::Value;

use hyperplanes::io::SyntheticSpec;
use hyperplanes::meta::{AblationAxis, Split, TrainConfig};
use hyperplanes::par::ExecPolicy;

use crate::error::CliError;

pub const ENV_PREFIX: &str = "HYPERPLANES_";
pub const DEFAULT_PROFILE: &str = "desk";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateConfig {
    pub axis: AblationAxis,
    /// Empty means the axis defaults.
    pub settings: Vec<String>,
    pub seeds: Vec<u64>,
    /// Training steps per run; `train.steps` when unset.
    pub steps: Option<u64>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        AblateConfig {
            axis: AblationAxis::UpdateMask,
            settings: Vec::new(),
            seeds: vec![0, 1, 2, 3, 4],
            steps: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    pub profile: String,
    /// Dataset root (written by gen-synthetic, read by everything else).
    pub data: PathBuf,
    pub run_dir: PathBuf,
    /// Checkpoint to read; for `train`, a checkpoint to resume from.
    pub checkpoint: Option<PathBuf>,
    pub threads: Option<usize>,
    /// Single-threaded, bit-reproducible execution.
    pub deterministic: bool,
    pub ft_iters: Vec<usize>,
    /// Query views per object; `train.eval_views` when unset.
    pub views: Option<usize>,
    pub split: Split,
    /// Objects to render; empty means every object of the split.
    pub objects: Vec<String>,
    pub train: TrainConfig,
    pub synthetic: SyntheticSpec,
    pub ablate: AblateConfig,
}

impl Default for CliConfig {
    fn default() -> Self {
        CliConfig::for_profile(DEFAULT_PROFILE).expect("default profile exists")
    }
}

impl CliConfig {
    pub fn for_profile(profile: &str) -> Result<Self, CliError> {
        Ok(CliConfig {
            profile: profile.to_string(),
            data: PathBuf::from("data"),
            run_dir: PathBuf::from("runs/latest"),
            checkpoint: None,
            threads: None,
            deterministic: false,
            ft_iters: vec![0, 10, 100],
            views: None,
            split: Split::Test,
            objects: Vec::new(),
            train: TrainConfig::profile(profile).map_err(|e| CliError::Usage(e.to_string()))?,
            synthetic: SyntheticSpec::default(),
            ablate: AblateConfig::default(),
        })
    }

    pub fn views(&self) -> usize {
        self.views.unwrap_or(self.train.eval_views)
    }

    /// Checkpoint to read, defaulting to the run directory's latest.
    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint
            .clone()
            .unwrap_or_else(|| self.run_dir.join(crate::commands::LATEST_CHECKPOINT))
    }

    pub fn policy(&self) -> ExecPolicy {
        if self.deterministic {
            ExecPolicy::Sequential
        } else {
            self.train.policy
        }
    }
}

/// Recursively overlays `top` onto `base`; tables merge, everything else is
/// replaced.
pub fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Table(b), Value::Table(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Inserts `value` at a dotted key path, creating tables on the way.
pub fn set_path(root: &mut Value, path: &str, value: Value) -> Result<(), CliError> {
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(CliError::Usage(format!("malformed key {path:?}")));
    }
    let mut node = root;
    for key in &keys[..keys.len() - 1] {
        let table = node
            .as_table_mut()
            .ok_or_else(|| CliError::Usage(format!("{path}: {key} is not a table")))?;
        node = table
            .entry(key.to_string())
            .or_insert_with(|| Value::Table(Default::default()));
    }
    let table = node
        .as_table_mut()
        .ok_or_else(|| CliError::Usage(format!("{path}: parent is not a table")))?;
    table.insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}

/// A TOML literal when it parses as one (`3`, `true`, `[0, 10]`, `"x"`),
/// otherwise the raw string.
pub fn parse_scalar(raw: &str) -> Value {
    let wrapped = format!("v = {raw}");
    match wrapped.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| Value::String(raw.to_string())),
        Err(_) => Value::String(raw.to_string()),
    }
}

/// `HYPERPLANES_TRAIN__STEPS=100` becomes `train.steps = 100`: the prefix is
/// dropped, `__` separates levels, and keys are lowercased.
pub fn env_layer<I>(vars: I) -> Result<Value, CliError>
where
    I: IntoIterator<Item = (String, String)>,
{
    let mut layer = Value::Table(Default::default());
    let vars: BTreeMap<String, String> = vars.into_iter().collect();
    for (name, raw) in vars {
        let Some(rest) = name.strip_prefix(ENV_PREFIX) else {
            continue;
        };
        if rest == "LOG" {
            continue;
        }
        let path = rest.to_lowercase().replace("__", ".");
        set_path(&mut layer, &path, parse_scalar(&raw))?;
    }
    Ok(layer)
}

pub fn file_layer(path: &Path) -> Result<Value, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        CliError::Core(hyperplanes::Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    })?;
    let table: toml::Table = text.parse().map_err(|e: toml::de::Error| {
        CliError::Core(hyperplanes::Error::Format {
            path: path.to_path_buf(),
            field: e
                .span()
                .map_or("toml".into(), |s| format!("bytes {}..{}", s.start, s.end)),
            message: e.message().to_string(),
        })
    })?;
    Ok(Value::Table(table))
}

fn profile_of(layer: &Value) -> Option<String> {
    layer.get("profile").and_then(Value::as_str).map(str::to_string)
}

/// Resolves the three override layers over the defaults of the selected
/// profile. The profile itself is chosen with the same precedence.
pub fn resolve(file: Option<Value>, env: Value, cli: Value) -> Result<CliConfig, CliError> {
    let profile = profile_of(&cli)
        .or_else(|| profile_of(&env))
        .or_else(|| file.as_ref().and_then(profile_of))
        .unwrap_or_else(|| DEFAULT_PROFILE.to_string());
    let defaults = CliConfig::for_profile(&profile)?;
    let mut merged = Value::try_from(&defaults).map_err(|e| CliError::Usage(e.to_string()))?;
    for layer in file.into_iter().chain([env, cli]) {
        merge(&mut merged, layer);
    }
    let cfg: CliConfig = merged
        .try_into()
        .map_err(|e: toml::de::Error| CliError::Usage(format!("invalid configuration: {}", e.message())))?;
    cfg.train
        .validate()
        .map_err(|e| CliError::Usage(format!("invalid configuration: {e}")))?;
    Ok(cfg)
}
