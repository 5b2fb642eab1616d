//! Experiment configuration: one JSON file plus command-line overrides.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use lapaction::augment::AugmentationSpec;
use lapaction::dataset::{ActionLabel, ClipParams};
use lapaction::frames::FrameGeometry;
use lapaction::network::{BackboneConfig, HeadConfig, HeadKind};
use lapaction::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

/// A configuration problem, located by its dotted field path.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub field: String,
    pub message: String,
}

impl ConfigError {
    pub fn new(field: impl Into<String>, message: impl Into<String>) -> ConfigError {
        ConfigError {
            field: field.into(),
            message: message.into(),
        }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.field.is_empty() {
            write!(f, "{}", self.message)
        } else {
            write!(f, "{}: {}", self.field, self.message)
        }
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    /// Manifest files; relative paths resolve against the config file.
    pub manifests: Vec<PathBuf>,
    pub train_videos: Vec<String>,
    pub test_videos: Vec<String>,
    #[serde(default = "default_validation_fraction")]
    pub validation_fraction: f64,
    #[serde(default)]
    pub clip: ClipParams,
    #[serde(default)]
    pub frame_geometry: FrameGeometry,
}

fn default_validation_fraction() -> f64 {
    0.2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSection {
    pub sequence_length: usize,
    /// Decode training clips once and keep them in memory.
    pub cache_frames: bool,
}

impl Default for SamplerSection {
    fn default() -> Self {
        SamplerSection {
            sequence_length: 20,
            cache_frames: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkSection {
    pub backbone: BackboneConfig,
    /// One trained model family per entry.
    pub heads: Vec<HeadConfig>,
}

impl Default for NetworkSection {
    fn default() -> Self {
        NetworkSection {
            backbone: BackboneConfig::default(),
            heads: HeadKind::ALL.into_iter().map(HeadConfig::with_kind).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluatorSection {
    pub window_len: usize,
    pub stride: usize,
    /// Videos for `infer`; empty means the test videos.
    pub infer_videos: Vec<String>,
}

impl Default for EvaluatorSection {
    fn default() -> Self {
        EvaluatorSection {
            window_len: 50,
            stride: 25,
            infer_videos: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportSection {
    /// `metrics.csv` files or directories holding one; empty means this
    /// run's own evaluate output.
    pub inputs: Vec<PathBuf>,
}

fn default_actions() -> Vec<ActionLabel> {
    ActionLabel::TARGETS.to_vec()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    #[serde(default = "default_actions")]
    pub actions: Vec<ActionLabel>,
    pub dataset_model: DatasetSection,
    #[serde(default)]
    pub augment: AugmentationSpec,
    #[serde(default)]
    pub sampler: SamplerSection,
    #[serde(default)]
    pub network: NetworkSection,
    #[serde(default)]
    pub trainer: TrainConfig,
    #[serde(default)]
    pub evaluator: EvaluatorSection,
    #[serde(default)]
    pub report: ReportSection,
}

/// Command-line adjustments applied on top of the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    /// `dotted.path=value` pairs; values parse as JSON, else as strings.
    pub set: Vec<String>,
    pub actions: Option<String>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

fn set_path(root: &mut Value, path: &str, value: Value) -> Result<(), ConfigError> {
    let err = |msg: &str| ConfigError::new(path, msg);
    let parts: Vec<&str> = path.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(err("empty path segment in override"));
    }
    let mut node = root;
    for (i, part) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        node = match node {
            Value::Object(map) => {
                if last {
                    map.insert(part.to_string(), value);
                    return Ok(());
                }
                map.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()))
            }
            Value::Array(items) => {
                let index: usize = part.parse().map_err(|_| err("array segment must be an index"))?;
                let len = items.len();
                let slot = items
                    .get_mut(index)
                    .ok_or_else(|| err(&format!("index {index} out of range for array of {len}")))?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            _ => return Err(err("cannot descend into a scalar")),
        };
    }
    unreachable!("loop returns on the last segment")
}

fn parse_override(raw: &str) -> Result<(String, Value), ConfigError> {
    let (key, value) = raw
        .split_once('=')
        .ok_or_else(|| ConfigError::new("--set", format!("expected key=value, got `{raw}`")))?;
    let value = serde_json::from_str(value).unwrap_or_else(|_| Value::String(value.to_string()));
    Ok((key.trim().to_string(), value))
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Read, override, deserialize and resolve paths; no filesystem checks.
pub fn load(path: &Path, overrides: &Overrides) -> Result<ExperimentConfig, ConfigError> {
    let text = fs::read_to_string(path)
        .map_err(|e| ConfigError::new("", format!("cannot read config {}: {e}", path.display())))?;
    let mut value: Value = serde_json::from_str(&text)
        .map_err(|e| ConfigError::new("", format!("config {} is not valid JSON: {e}", path.display())))?;
    if !value.is_object() {
        return Err(ConfigError::new("", "config must be a JSON object"));
    }
    for raw in &overrides.set {
        let (key, v) = parse_override(raw)?;
        set_path(&mut value, &key, v)?;
    }
    if let Some(seed) = overrides.seed {
        set_path(&mut value, "seed", Value::from(seed))?;
    }
    if let Some(actions) = &overrides.actions {
        let list: Vec<Value> = actions
            .split(',')
            .map(|a| Value::String(a.trim().to_string()))
            .filter(|v| v.as_str() != Some(""))
            .collect();
        set_path(&mut value, "actions", Value::Array(list))?;
    }
    let cwd = std::env::current_dir().unwrap_or_default();
    if let Some(out) = &overrides.out {
        let out = resolve(&cwd, out);
        set_path(&mut value, "output_dir", Value::String(out.to_string_lossy().into_owned()))?;
    }

    let mut config: ExperimentConfig = serde_path_to_error::deserialize(value).map_err(|e| {
        let field = e.path().to_string();
        let field = if field == "." { String::new() } else { field };
        ConfigError::new(field, e.into_inner().to_string())
    })?;

    let base = resolve(&cwd, path.parent().unwrap_or(Path::new("")));
    config.output_dir = resolve(&base, &config.output_dir);
    for m in &mut config.dataset_model.manifests {
        *m = resolve(&base, m);
    }
    for p in &mut config.report.inputs {
        *p = resolve(&base, p);
    }
    Ok(config)
}

impl ExperimentConfig {
    /// Checks that need no filesystem access.
    pub fn check(&self) -> Result<(), ConfigError> {
        if self.actions.is_empty() {
            return Err(ConfigError::new("actions", "at least one action is required"));
        }
        let mut seen = BTreeSet::new();
        for (i, a) in self.actions.iter().enumerate() {
            if !a.is_target() {
                return Err(ConfigError::new(format!("actions[{i}]"), "`other` is not a target action"));
            }
            if !seen.insert(a) {
                return Err(ConfigError::new(format!("actions[{i}]"), format!("duplicate action {a}")));
            }
        }
        let ds = &self.dataset_model;
        if ds.manifests.is_empty() {
            return Err(ConfigError::new("dataset_model.manifests", "at least one manifest is required"));
        }
        if ds.train_videos.is_empty() {
            return Err(ConfigError::new("dataset_model.train_videos", "at least one training video is required"));
        }
        let train: BTreeSet<&String> = ds.train_videos.iter().collect();
        if let Some(v) = ds.test_videos.iter().find(|v| train.contains(v)) {
            return Err(ConfigError::new(
                "dataset_model.test_videos",
                format!("video {v} is also a training video"),
            ));
        }
        if !(ds.validation_fraction > 0.0 && ds.validation_fraction < 0.5) {
            return Err(ConfigError::new(
                "dataset_model.validation_fraction",
                format!("must be in (0, 0.5), got {}", ds.validation_fraction),
            ));
        }
        ds.clip
            .validate()
            .map_err(|e| ConfigError::new("dataset_model.clip", e.to_string()))?;
        if ds.frame_geometry.width == 0 || ds.frame_geometry.height == 0 {
            return Err(ConfigError::new("dataset_model.frame_geometry", "width and height must be > 0"));
        }
        self.augment
            .validate()
            .map_err(|e| ConfigError::new("augment", e.to_string()))?;
        let s = self.sampler.sequence_length;
        if s == 0 || s > ds.clip.min_clip_frames {
            return Err(ConfigError::new(
                "sampler.sequence_length",
                format!("must be in [1, {}] (the minimum clip length), got {s}", ds.clip.min_clip_frames),
            ));
        }
        self.network
            .backbone
            .validate()
            .map_err(|e| ConfigError::new("network.backbone", e.to_string()))?;
        if self.network.heads.is_empty() {
            return Err(ConfigError::new("network.heads", "the head grid must not be empty"));
        }
        let mut kinds = BTreeSet::new();
        for (i, h) in self.network.heads.iter().enumerate() {
            h.validate().map_err(|e| ConfigError::new(format!("network.heads[{i}]"), e.to_string()))?;
            if !kinds.insert(h.kind) {
                return Err(ConfigError::new(
                    format!("network.heads[{i}].kind"),
                    format!("head {} appears twice in the grid", h.kind),
                ));
            }
        }
        self.trainer
            .validate()
            .map_err(|e| ConfigError::new("trainer", e.to_string()))?;
        let ev = &self.evaluator;
        if ev.window_len == 0 || ev.stride == 0 {
            return Err(ConfigError::new("evaluator", "window_len and stride must be >= 1"));
        }
        if ev.window_len < s {
            return Err(ConfigError::new(
                "evaluator.window_len",
                format!("must be at least sampler.sequence_length ({s})"),
            ));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn dotted_overrides_create_and_replace() {
        let mut v = json!({"trainer": {"batch_size": 8}, "network": {"heads": [{"kind": "lstm"}]}});
        set_path(&mut v, "trainer.batch_size", json!(4)).unwrap();
        set_path(&mut v, "evaluator.stride", json!(10)).unwrap();
        set_path(&mut v, "network.heads.0.kind", json!("gru")).unwrap();
        assert_eq!(v["trainer"]["batch_size"], 4);
        assert_eq!(v["evaluator"]["stride"], 10);
        assert_eq!(v["network"]["heads"][0]["kind"], "gru");
        assert!(set_path(&mut v, "network.heads.3.kind", json!("gru")).is_err());
        assert!(set_path(&mut v, "trainer.batch_size.x", json!(1)).is_err());
    }

    #[test]
    fn override_values_parse_as_json_or_string() {
        assert_eq!(parse_override("a.b=4").unwrap(), ("a.b".into(), json!(4)));
        assert_eq!(parse_override("a=[1,2]").unwrap(), ("a".into(), json!([1, 2])));
        assert_eq!(parse_override("kind=lstm").unwrap(), ("kind".into(), json!("lstm")));
        assert!(parse_override("novalue").is_err());
    }
}
