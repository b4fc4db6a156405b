//! TOML experiment configuration. See `docs/config.md` for the schema.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::data::SyntheticSpec;
use super::{HarnessError, Result};
use crate::attacks::GradInvConfig;
use crate::compressors::TopKScope;
use crate::distsim::Aggregation;
use crate::model::Activation;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
    #[serde(default)]
    pub attack: GradInvConfig,
    #[serde(default)]
    pub mia: MiaConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Synthetic,
    MnistIdx,
    Cifar10Bin,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    /// Label used in report tables; defaults to the kind and final shape.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub images: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub files: Vec<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub downsample: Option<[usize; 2]>,
    #[serde(default)]
    pub grayscale: bool,
    /// Keep only the first `limit` examples after loading.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub limit: Option<usize>,
    #[serde(default)]
    pub synthetic: SyntheticSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Mlp,
    Conv8x8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            kind: ModelKind::Mlp,
            hidden: vec![32],
            activation: Activation::Tanh,
        }
    }
}

/// Simulator settings for the runs whose gradients are attacked.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub workers: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub power_iterations: usize,
    pub aggregation: Aggregation,
    pub topk_scope: TopKScope,
    /// Step budget for the `train` subcommand.
    pub steps: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            workers: 10,
            batch_size: 1,
            learning_rate: 0.1,
            power_iterations: 1,
            aggregation: Aggregation::FactorSpace,
            topk_scope: TopKScope::Global,
            steps: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub ranks: Vec<usize>,
    pub identity: bool,
    pub powersgd: bool,
    pub topk: bool,
    pub samples: usize,
    pub tap_step: usize,
    pub save_artifacts: bool,
    pub gradinv: bool,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            ranks: vec![1, 2, 4, 30, 50],
            identity: true,
            powersgd: true,
            topk: true,
            samples: 10,
            tap_step: 0,
            save_artifacts: true,
            gradinv: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MiaConfig {
    pub enabled: bool,
    pub members: usize,
    pub nonmembers: usize,
    pub workers: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub steps: usize,
    pub aggregation: Aggregation,
}

impl Default for MiaConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            members: 100,
            nonmembers: 100,
            workers: 4,
            batch_size: 5,
            learning_rate: 0.2,
            steps: 1500,
            aggregation: Aggregation::DecompressThenMean,
        }
    }
}

/// 1-based line of `offset` in `source`.
fn line_of(source: &str, offset: usize) -> usize {
    source[..offset.min(source.len())].matches('\n').count() + 1
}

/// Dotted key path of the assignment at `offset`, from the nearest table
/// header above it and the key on that line.
fn path_at(source: &str, offset: usize) -> String {
    let line = line_of(source, offset);
    let mut section = String::new();
    let mut key = String::new();
    for (i, text) in source.lines().enumerate().take(line) {
        let t = text.trim();
        if t.starts_with('[') {
            section = t.trim_matches(|c| c == '[' || c == ']').trim().to_string();
            key.clear();
        } else if i + 1 == line {
            if let Some((k, _)) = t.split_once('=') {
                key = k.trim().to_string();
            }
        }
    }
    match (section.is_empty(), key.is_empty()) {
        (true, _) => key,
        (false, true) => section,
        (false, false) => format!("{section}.{key}"),
    }
}

/// Line of the assignment to dotted `path`, if present in `source`.
fn locate(source: &str, path: &str) -> Option<usize> {
    let (section, key) = match path.rsplit_once('.') {
        Some((s, k)) => (s, k),
        None => ("", path),
    };
    let key = key.split('[').next().unwrap_or(key);
    let mut current = String::new();
    for (i, text) in source.lines().enumerate() {
        let t = text.trim();
        if t.starts_with('[') {
            current = t.trim_matches(|c| c == '[' || c == ']').trim().to_string();
        } else if current == section {
            if let Some((k, _)) = t.split_once('=') {
                if k.trim() == key {
                    return Some(i + 1);
                }
            }
        }
    }
    None
}

impl Config {
    pub fn load(path: &Path) -> Result<Self> {
        let source = std::fs::read_to_string(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                HarnessError::MissingConfig {
                    path: path.display().to_string(),
                }
            } else {
                HarnessError::Io {
                    path: path.display().to_string(),
                    source: e,
                }
            }
        })?;
        let mut cfg = Self::parse(&source, &path.display().to_string())?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }

    /// Parses and validates a config document. `origin` names it in errors.
    pub fn parse(source: &str, origin: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(source).map_err(|e| {
            let offset = e.span().map_or(0, |s| s.start);
            HarnessError::Config {
                origin: origin.to_string(),
                line: line_of(source, offset),
                path: path_at(source, offset),
                message: e.message().to_string(),
            }
        })?;
        cfg.validate().map_err(|e| match e {
            HarnessError::Invalid { path, message, .. } => HarnessError::Config {
                origin: origin.to_string(),
                line: locate(source, &path).unwrap_or(0),
                path,
                message,
            },
            other => other,
        })?;
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(p) = self.dataset.images.as_mut() {
            fix(p);
        }
        if let Some(p) = self.dataset.labels.as_mut() {
            fix(p);
        }
        self.dataset.files.iter_mut().for_each(fix);
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |path: &str, message: String| {
            Err(HarnessError::Invalid {
                path: path.to_string(),
                line: None,
                message,
            })
        };
        let d = &self.dataset;
        match d.kind {
            DatasetKind::MnistIdx if d.images.is_none() || d.labels.is_none() => {
                let missing = if d.images.is_none() {
                    "images"
                } else {
                    "labels"
                };
                return bad(
                    &format!("dataset.{missing}"),
                    "mnist_idx needs both `images` and `labels`".into(),
                );
            }
            DatasetKind::Cifar10Bin if d.files.is_empty() => {
                return bad(
                    "dataset.files",
                    "cifar10_bin needs at least one batch file".into(),
                );
            }
            _ => {}
        }
        if d.kind == DatasetKind::Synthetic {
            d.synthetic.validate()?;
        }
        if let Some([h, w]) = d.downsample {
            if h == 0 || w == 0 {
                return bad("dataset.downsample", "dimensions must be positive".into());
            }
        }
        if self.model.hidden.contains(&0) {
            return bad("model.hidden", "layer widths must be positive".into());
        }
        let t = &self.training;
        if t.workers == 0 {
            return bad("training.workers", "must be at least 1".into());
        }
        if t.batch_size == 0 {
            return bad("training.batch_size", "must be at least 1".into());
        }
        if !(t.learning_rate > 0.0 && t.learning_rate.is_finite()) {
            return bad("training.learning_rate", "must be positive".into());
        }
        if t.power_iterations == 0 {
            return bad("training.power_iterations", "must be at least 1".into());
        }
        let s = &self.sweep;
        if s.gradinv && t.batch_size != 1 {
            return bad(
                "training.batch_size",
                "gradient inversion reconstructs a single example; use 1".into(),
            );
        }
        if let Some(i) = s.ranks.iter().position(|&r| r == 0) {
            return bad(
                &format!("sweep.ranks[{i}]"),
                "ranks must be at least 1".into(),
            );
        }
        if s.samples == 0 {
            return bad("sweep.samples", "must be at least 1".into());
        }
        let a = &self.attack;
        if a.restarts == 0 {
            return bad("attack.restarts", "must be at least 1".into());
        }
        if !(a.step_size > 0.0 && a.step_size.is_finite()) {
            return bad("attack.step_size", "must be positive".into());
        }
        if !(a.tv_weight >= 0.0 && a.tv_weight.is_finite()) {
            return bad("attack.tv_weight", "must be non-negative".into());
        }
        let m = &self.mia;
        if m.enabled {
            if m.members == 0 || m.nonmembers == 0 {
                let f = if m.members == 0 {
                    "members"
                } else {
                    "nonmembers"
                };
                return bad(&format!("mia.{f}"), "must be at least 1".into());
            }
            if m.workers == 0 || m.workers > m.members {
                return bad("mia.workers", "must be between 1 and mia.members".into());
            }
            if m.batch_size == 0 {
                return bad("mia.batch_size", "must be at least 1".into());
            }
            if !(m.learning_rate > 0.0 && m.learning_rate.is_finite()) {
                return bad("mia.learning_rate", "must be positive".into());
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }
}
