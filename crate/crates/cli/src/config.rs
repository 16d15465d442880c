//! Experiment configuration: JSON file plus dotted-path `--set` overrides.

use std::path::{Path, PathBuf};

use awlab_core::data::SynthSpec;
use awlab_core::law::{LawConfig, LawTrainConfig};
use awlab_core::order::{OrderConfig, SegTrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub synth: SynthSpec,
    /// Number of synthetic samples when no directories are given.
    pub count: usize,
    pub images_dir: Option<PathBuf>,
    pub masks_dir: Option<PathBuf>,
    pub center_crop: bool,
    /// Seed of the stable 80/20 train/validation split.
    pub split_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            synth: SynthSpec::default(),
            count: 60,
            images_dir: None,
            masks_dir: None,
            center_crop: false,
            split_seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepSection {
    /// Dotted config path varied across runs, e.g. "order.attn_stages".
    pub axis: String,
    pub variants: Vec<Value>,
    /// Optional labels, parallel to `variants`.
    pub labels: Vec<String>,
    pub seeds: Vec<u64>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self { axis: String::new(), variants: Vec::new(), labels: Vec::new(), seeds: vec![0] }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Must agree with the subcommand when present in the file.
    pub mode: Option<String>,
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
    pub data: DataConfig,
    pub order: OrderConfig,
    pub seg_train: SegTrainConfig,
    pub law: LawConfig,
    pub law_train: LawTrainConfig,
    /// Square input size for FLOP profiling.
    pub profile_input: usize,
    /// Binarization threshold for metrics and exports.
    pub threshold: f64,
    pub checkpoint: Option<PathBuf>,
    pub sweep: SweepSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            mode: None,
            seed: 0,
            out_dir: None,
            data: DataConfig::default(),
            order: OrderConfig::default(),
            seg_train: SegTrainConfig::default(),
            law: LawConfig::default(),
            law_train: LawTrainConfig::default(),
            profile_input: 256,
            threshold: 0.5,
            checkpoint: None,
            sweep: SweepSection::default(),
        }
    }
}

#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "config error: {}", self.0)
    }
}

/// Set `value` at a dotted `path` inside `root`, creating objects on the way.
pub fn set_path(root: &mut Value, path: &str, value: Value) -> Result<(), ConfigError> {
    if path.is_empty() {
        return Err(ConfigError("empty override path".into()));
    }
    let mut cur = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if !cur.is_object() {
            return Err(ConfigError(format!("cannot descend into non-object at '{part}' in '{path}'")));
        }
        let map = cur.as_object_mut().unwrap();
        if i + 1 == parts.len() {
            map.insert((*part).to_string(), value);
            return Ok(());
        }
        cur = map.entry((*part).to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!()
}

/// `key=value` with the value parsed as JSON, falling back to a string.
pub fn parse_override(s: &str) -> Result<(String, Value), ConfigError> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| ConfigError(format!("override '{s}' is not key=value")))?;
    let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((k.to_string(), value))
}

/// Load the config file (optional), apply overrides, deserialize, validate.
pub fn load(
    file: Option<&Path>,
    sets: &[String],
    mode: &str,
) -> Result<ExperimentConfig, ConfigError> {
    let mut root = match file {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
            serde_json::from_str::<Value>(&text)
                .map_err(|e| ConfigError(format!("{}:{}:{}: {e}", path.display(), e.line(), e.column())))?
        }
        None => Value::Object(Default::default()),
    };
    if !root.is_object() {
        return Err(ConfigError("top-level config must be a JSON object".into()));
    }
    for s in sets {
        let (k, v) = parse_override(s)?;
        set_path(&mut root, &k, v)?;
    }
    let cfg: ExperimentConfig =
        serde_json::from_value(root).map_err(|e| ConfigError(e.to_string()))?;
    if let Some(m) = &cfg.mode {
        // an empty expected mode skips the check (used by `sweep`, whose
        // config names the underlying training mode)
        if !mode.is_empty() && m != mode {
            return Err(ConfigError(format!("config mode '{m}' does not match subcommand '{mode}'")));
        }
    }
    cfg.order.validate().map_err(|e| ConfigError(e.to_string()))?;
    cfg.law.validate().map_err(|e| ConfigError(e.to_string()))?;
    if cfg.data.images_dir.is_some() != cfg.data.masks_dir.is_some() {
        return Err(ConfigError("images_dir and masks_dir must be given together".into()));
    }
    if cfg.data.images_dir.is_none() {
        cfg.data.synth.validate().map_err(|e| ConfigError(e.to_string()))?;
    }
    if !(0.0..=1.0).contains(&cfg.threshold) {
        return Err(ConfigError(format!("threshold {} outside [0,1]", cfg.threshold)));
    }
    Ok(cfg)
}

/// Run directory: explicit flag, then config, then `$AWLAB_OUT/<mode>`,
/// then `./runs/<mode>`.
pub fn resolve_out_dir(flag: Option<PathBuf>, cfg: &ExperimentConfig, mode: &str) -> PathBuf {
    flag.or_else(|| cfg.out_dir.clone()).unwrap_or_else(|| {
        let root = std::env::var("AWLAB_OUT").unwrap_or_else(|_| "runs".into());
        Path::new(&root).join(mode)
    })
}
