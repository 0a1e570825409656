//! Declarative experiment configuration, its validation and its digest.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use rna_core::data::synthetic::OutlierFamily;
use rna_core::data::ImageShape;
use rna_core::evaluation::EvalConfig;
use rna_core::losses::{LossConfig, OodTerm};
use rna_core::model::ModelConfig;
use rna_core::nn::{BackboneConfig, BnConfig};
use rna_core::optim::OptimConfig;
use rna_core::scoring::Scorer;
use rna_core::training::TrainConfig;

pub const SCHEMA_VERSION: u32 = 1;

/// A validation failure at a dotted field path.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub path: String,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.path.is_empty() {
            write!(f, "{}", self.message)
        } else {
            write!(f, "{}: {}", self.path, self.message)
        }
    }
}

impl std::error::Error for ConfigError {}

fn err(path: &str, message: impl Into<String>) -> ConfigError {
    ConfigError {
        path: path.into(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub run_id: String,
    /// Parent of the run directory. Not part of the digest.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub dataset: DatasetSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub optim: OptimConfig,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub eval: EvalSection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    /// Synthetic gratings with procedural outlier families.
    Toy,
    /// `root/train/<class>/*.png`, `root/test/<class>/*.png`, `root/aux/*.png`,
    /// `root/ood/<name>/*.png`.
    Directory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSection {
    pub source: Source,
    /// Required for `toy`; checked against the class folders for `directory`.
    #[serde(default)]
    pub num_classes: Option<usize>,
    pub max_count: usize,
    pub imbalance_ratio: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub toy: ToySection,
    #[serde(default)]
    pub directory: Option<DirectorySection>,
    #[serde(default)]
    pub aux: AuxSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToySection {
    pub shape: ImageShape,
    pub noise: f64,
    pub test_per_class: usize,
    pub test_size: usize,
    pub aux_families: Vec<OutlierFamily>,
    pub test_families: Vec<OutlierFamily>,
}

impl Default for ToySection {
    fn default() -> Self {
        let t = rna_core::data::synthetic::ToySpec::default();
        Self {
            shape: t.shape,
            noise: t.noise,
            test_per_class: t.test_per_class,
            test_size: t.test_size,
            aux_families: t.aux_families,
            test_families: t.test_families,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectorySection {
    pub root: PathBuf,
    /// Images are resized to this shape; 1 channel means grayscale.
    pub shape: ImageShape,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuxKind {
    /// The source's own outliers (toy families or `root/aux`).
    Source,
    /// Random crops of ID training images.
    Augmented,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AuxSection {
    pub kind: AuxKind,
    /// Number of auxiliary images; 0 keeps every available image for `source`.
    pub size: usize,
    pub crop_fraction: (f64, f64),
    pub seed: u64,
}

impl Default for AuxSection {
    fn default() -> Self {
        Self {
            kind: AuxKind::Source,
            size: 2000,
            crop_fraction: (0.05, 0.25),
            seed: 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dtype {
    #[default]
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSection {
    pub backbone: BackboneConfig,
    pub head_hidden: Option<usize>,
    pub projection_dim: Option<usize>,
    pub classifier_bias: bool,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    /// Unset means off for runs with an OOD term and on for plain baselines.
    pub bn_affine: Option<bool>,
    pub init_seed: u64,
    pub dtype: Dtype,
}

impl Default for ModelSection {
    fn default() -> Self {
        let bn = BnConfig::default();
        Self {
            backbone: BackboneConfig::small_cnn(),
            head_hidden: None,
            projection_dim: None,
            classifier_bias: false,
            bn_momentum: bn.momentum,
            bn_eps: bn.eps,
            bn_affine: None,
            init_seed: 0,
            dtype: Dtype::F32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    pub batch_id: usize,
    pub batch_ood: usize,
    pub shuffle_seed: u64,
    pub ood_seed: u64,
    pub probe_size: usize,
    pub record_steps: bool,
    /// Write a checkpoint every this many epochs; the last epoch is always saved.
    pub checkpoint_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            batch_id: t.batch_id,
            batch_ood: t.batch_ood,
            shuffle_seed: t.shuffle_seed,
            ood_seed: t.ood_seed,
            probe_size: t.probe_size,
            record_steps: t.record_steps,
            checkpoint_every: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupRule {
    #[default]
    Terciles,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    pub scorers: Vec<Scorer>,
    pub energy_temperature: f64,
    pub ece_bins: usize,
    pub group_rule: GroupRule,
    /// Restrict evaluation to these OOD test sets; unknown names are skipped with a warning.
    pub ood_tests: Option<Vec<String>>,
}

impl Default for EvalSection {
    fn default() -> Self {
        let e = EvalConfig::default();
        Self {
            scorers: e.scorers,
            energy_temperature: e.energy_temperature,
            ece_bins: e.ece_bins,
            group_rule: GroupRule::Terciles,
            ood_tests: None,
        }
    }
}

fn schema_error(path: String, e: impl fmt::Display) -> ConfigError {
    // toml and serde messages carry their own location suffix; keep the first line
    let msg = e.to_string();
    let msg = msg.lines().find(|l| !l.trim().is_empty()).unwrap_or("").trim().to_string();
    err(if path == "." { "" } else { &path }, msg)
}

impl ExperimentConfig {
    /// Parses TOML, rejecting unknown keys, then validates.
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let value: toml::Value = toml::from_str(text).map_err(|e| err("", format!("invalid TOML: {}", e.message())))?;
        Self::from_value(serde_json::to_value(value).map_err(|e| err("", e.to_string()))?)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| err("", format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Builds from a JSON value tree (the form sweeps edit).
    pub fn from_value(value: Value) -> Result<Self, ConfigError> {
        if let Some(v) = value.get("schema_version") {
            if v.as_u64() != Some(SCHEMA_VERSION as u64) {
                return Err(err("schema_version", format!("unsupported version {v}, expected {SCHEMA_VERSION}")));
            }
        }
        let mut unknown = Vec::new();
        let mut record = |p: serde_ignored::Path<'_>| unknown.push(p.to_string());
        let de = serde_ignored::Deserializer::new(value, &mut record);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| schema_error(e.path().to_string(), e.inner()))?;
        if let Some(p) = unknown.first() {
            return Err(err(p, "unknown field"));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes to TOML")
    }

    /// SHA-256 over the canonical (sorted-key) JSON form, without `output_dir`.
    pub fn digest(&self) -> String {
        let mut v = self.to_value();
        if let Value::Object(m) = &mut v {
            m.remove("output_dir");
        }
        let canonical = serde_json::to_string(&v).expect("value serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(err("schema_version", format!("expected {SCHEMA_VERSION}")));
        }
        if self.run_id.is_empty() || !self.run_id.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c)) {
            return Err(err("run_id", "must be non-empty and use only letters, digits, '-', '_' or '.'"));
        }
        self.validate_dataset()?;
        let m = &self.model;
        self.model_config(ImageShape::new(1, 1, 1), 2)
            .validate()
            .map_err(|e| err("model", e))?;
        if !(m.bn_momentum > 0.0 && m.bn_momentum < 1.0) {
            return Err(err("model.bn_momentum", "must lie in (0, 1)"));
        }
        self.loss.validate().map_err(|e| err("loss", e))?;
        self.optim.validate().map_err(|e| err("optim", e))?;
        let t = &self.train;
        if t.batch_id == 0 {
            return Err(err("train.batch_id", "must be positive"));
        }
        if t.checkpoint_every == 0 {
            return Err(err("train.checkpoint_every", "must be at least 1"));
        }
        if self.loss.ood_term.consumes_ood() {
            if self.dataset.aux.kind == AuxKind::None {
                return Err(err(
                    "loss.ood_term",
                    format!(
                        "{:?} needs auxiliary OOD data but dataset.aux.kind is \"none\"",
                        self.loss.ood_term.name()
                    ),
                ));
            }
            if t.batch_ood == 0 {
                return Err(err("train.batch_ood", "must be positive when the OOD term reads OOD rows"));
            }
        }
        if t.batch_ood > 0 && self.dataset.aux.kind == AuxKind::None {
            return Err(err("train.batch_ood", "OOD rows requested but dataset.aux.kind is \"none\""));
        }
        self.eval_config().validate().map_err(|e| err("eval", e))?;
        Ok(())
    }

    fn validate_dataset(&self) -> Result<(), ConfigError> {
        let d = &self.dataset;
        if d.max_count == 0 {
            return Err(err("dataset.max_count", "must be at least 1"));
        }
        if !(d.imbalance_ratio >= 1.0) || !d.imbalance_ratio.is_finite() {
            return Err(err("dataset.imbalance_ratio", "must be a finite value >= 1"));
        }
        match d.source {
            Source::Toy => {
                match d.num_classes {
                    Some(c) if c >= 3 => {}
                    Some(_) => return Err(err("dataset.num_classes", "must be at least 3")),
                    None => return Err(err("dataset.num_classes", "required for the toy source")),
                }
                let t = &d.toy;
                if t.shape.numel() == 0 {
                    return Err(err("dataset.toy.shape", "has a zero dimension"));
                }
                if t.test_per_class == 0 {
                    return Err(err("dataset.toy.test_per_class", "must be at least 1"));
                }
                if t.test_families.is_empty() || t.test_size == 0 {
                    return Err(err("dataset.toy.test_families", "at least one non-empty OOD test set is required"));
                }
                if d.aux.kind == AuxKind::Source && t.aux_families.is_empty() {
                    return Err(err("dataset.toy.aux_families", "empty while dataset.aux.kind is \"source\""));
                }
                if let Some(f) = t.test_families.iter().find(|f| t.aux_families.contains(f)) {
                    return Err(err(
                        "dataset.toy.test_families",
                        format!("{} is also an auxiliary family; OOD train and test sets must be disjoint", f.name()),
                    ));
                }
            }
            Source::Directory => {
                let Some(dir) = &d.directory else {
                    return Err(err("dataset.directory", "required for the directory source"));
                };
                if dir.shape.numel() == 0 || !(dir.shape.channels == 1 || dir.shape.channels == 3) {
                    return Err(err("dataset.directory.shape", "needs 1 or 3 channels and non-zero size"));
                }
            }
        }
        let (lo, hi) = d.aux.crop_fraction;
        if d.aux.kind == AuxKind::Augmented && !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(err("dataset.aux.crop_fraction", "must satisfy 0 < lo <= hi <= 1"));
        }
        if d.aux.kind == AuxKind::Augmented && d.aux.size == 0 {
            return Err(err("dataset.aux.size", "must be positive for augmented auxiliary data"));
        }
        Ok(())
    }

    /// BN affine setting after applying the baseline/RNA default.
    pub fn bn_affine(&self) -> bool {
        self.model
            .bn_affine
            .unwrap_or(self.loss.ood_term == OodTerm::None)
    }

    pub fn model_config(&self, input: ImageShape, num_classes: usize) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            input,
            num_classes,
            backbone: m.backbone.clone(),
            head_hidden: m.head_hidden,
            projection_dim: m.projection_dim,
            classifier_bias: m.classifier_bias,
            bn: BnConfig {
                momentum: m.bn_momentum,
                eps: m.bn_eps,
                affine: self.bn_affine(),
            },
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            loss: self.loss.clone(),
            optim: self.optim.clone(),
            batch_id: t.batch_id,
            batch_ood: t.batch_ood,
            shuffle_seed: t.shuffle_seed,
            ood_seed: t.ood_seed,
            probe_size: t.probe_size,
            record_steps: t.record_steps,
        }
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            scorers: self.eval.scorers.clone(),
            energy_temperature: self.eval.energy_temperature,
            ece_bins: self.eval.ece_bins,
            ..EvalConfig::default()
        }
    }
}

/// Sets a dotted key in a JSON tree, creating intermediate tables.
pub fn set_path(root: &mut Value, path: &str, value: Value) -> Result<(), ConfigError> {
    let mut cur = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let Value::Object(map) = cur else {
            return Err(err(&parts[..i].join("."), "is not a table"));
        };
        if i + 1 == parts.len() {
            map.insert(part.to_string(), value);
            return Ok(());
        }
        cur = map.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("split yields at least one part")
}
