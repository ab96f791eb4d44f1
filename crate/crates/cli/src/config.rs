//! Experiment configuration: JSON in, strict about unknown keys, with
//! dotted-path `--set` overrides applied before deserialization.

use anyhow::{bail, Context};
use promptprune::hypernet::{Ablation, CellInit};
use promptprune::pipeline::{OptimConfig, Schedule, Stage1Config, Stage2Config};
use promptprune::prompt::{Placement, PromptMode};
use serde::{Deserialize, Serialize};
use std::path::PathBuf;

/// Resource profile. Desk keeps datasets at a few thousand images so a run
/// finishes on one CPU; full uses whatever the dataset provides.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    Desk,
    Full,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PromptSection {
    pub mode: PromptMode,
    pub size: usize,
    pub placement: Placement,
}

impl Default for PromptSection {
    fn default() -> Self {
        Self { mode: PromptMode::Additive, size: 4, placement: Placement::TopLeft }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HypernetSection {
    pub hidden_size: usize,
    pub ablation: Ablation,
    pub cell_init: CellInit,
}

impl Default for HypernetSection {
    fn default() -> Self {
        Self { hidden_size: 64, ablation: Ablation::Full, cell_init: CellInit::Learned }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub optim: OptimConfig,
}

impl Default for PretrainSection {
    fn default() -> Self {
        Self { epochs: 40, batch_size: 128, optim: OptimConfig::sgd(0.02, 5e-4, Schedule::Cosine) }
    }
}

/// One experiment: a task, an architecture, a method, and the sweep of
/// sparsities and seeds to run it over.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// `synthetic-a` / `synthetic-b` / `synthetic-source` (procedural),
    /// `cifar10` / `cifar100` (binary archives under `dataset_root`), or
    /// `folder` (class subdirectories under `dataset_root/train|test`).
    pub task: String,
    pub dataset_root: Option<PathBuf>,
    pub arch: String,
    pub profile: Profile,
    pub sparsity: Vec<f32>,
    pub allocation: String,
    /// `pass` (learned masks), `group_l1` or `random` (baseline masks with
    /// the same prompt-tuning budget).
    pub method: String,
    pub prompt: PromptSection,
    pub hypernet: HypernetSection,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    pub pretrain: PretrainSection,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    /// Checkpoint directory of a pretrained source model; when absent one
    /// is trained (and cached) from the pretrain section.
    pub source_model: Option<PathBuf>,
    /// Per-class sample overrides for synthetic tasks and desk subsampling.
    pub train_per_class: Option<usize>,
    pub test_per_class: Option<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            task: "synthetic-a".into(),
            dataset_root: None,
            arch: "resnet18-tiny".into(),
            profile: Profile::Desk,
            sparsity: vec![0.3],
            allocation: "uniform".into(),
            method: "pass".into(),
            prompt: PromptSection::default(),
            hypernet: HypernetSection::default(),
            stage1: Stage1Config { epochs: 10, ..Stage1Config::defaults(0) },
            stage2: Stage2Config { epochs: 20, ..Stage2Config::generic(0) },
            pretrain: PretrainSection::default(),
            seeds: vec![0],
            out_dir: PathBuf::from("out"),
            source_model: None,
            train_per_class: None,
            test_per_class: None,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> anyhow::Result<()> {
        if self.sparsity.is_empty() {
            bail!("`sparsity` must list at least one value");
        }
        for &s in &self.sparsity {
            if !(s > 0.0 && s < 1.0) {
                bail!("sparsity {s} outside the open interval (0, 1)");
            }
        }
        if self.seeds.is_empty() {
            bail!("`seeds` must list at least one seed");
        }
        self.allocation
            .parse::<promptprune::netgraph::Allocation>()
            .map_err(|e| anyhow::anyhow!(e))?;
        if !matches!(self.method.as_str(), "pass" | "group_l1" | "random") {
            bail!("unknown method `{}` (expected pass, group_l1 or random)", self.method);
        }
        if self.hypernet.hidden_size == 0 {
            bail!("hypernet hidden_size must be positive");
        }
        match self.task.as_str() {
            "synthetic-a" | "synthetic-b" | "synthetic-source" => {}
            "cifar10" | "cifar100" | "folder" => {
                if self.dataset_root.is_none() {
                    bail!("task `{}` requires `dataset_root`", self.task);
                }
            }
            other => bail!(
                "unknown task `{other}` (expected synthetic-a, synthetic-b, \
                 synthetic-source, cifar10, cifar100 or folder)"
            ),
        }
        self.stage1.validate().map_err(|e| anyhow::anyhow!(e))?;
        self.stage2.validate().map_err(|e| anyhow::anyhow!(e))?;
        self.pretrain.optim.validate().map_err(|e| anyhow::anyhow!(e))?;
        if self.pretrain.batch_size == 0 {
            bail!("pretrain batch size must be positive");
        }
        Ok(())
    }

    pub fn to_value(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serialization cannot fail")
    }
}

/// Read the config file, apply `--set key=value` overrides (dotted paths,
/// values parsed as JSON where possible), then deserialize strictly.
pub fn load_config(path: &std::path::Path, sets: &[String]) -> anyhow::Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read config {}", path.display()))?;
    let mut value: serde_json::Value = serde_json::from_str(&text)
        .with_context(|| format!("{} is not valid JSON", path.display()))?;
    for s in sets {
        apply_set(&mut value, s)?;
    }
    let cfg: ExperimentConfig = serde_json::from_value(value)
        .with_context(|| format!("invalid configuration in {}", path.display()))?;
    cfg.validate()?;
    Ok(cfg)
}

fn apply_set(value: &mut serde_json::Value, assignment: &str) -> anyhow::Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .with_context(|| format!("--set `{assignment}` is not of the form key=value"))?;
    let parsed: serde_json::Value = serde_json::from_str(raw)
        .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
    let mut cursor = value;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if !cursor.is_object() {
            bail!("--set `{assignment}`: `{}` is not an object", parts[..i].join("."));
        }
        let map = cursor.as_object_mut().unwrap();
        if i + 1 == parts.len() {
            map.insert(part.to_string(), parsed);
            return Ok(());
        }
        cursor = map
            .entry(part.to_string())
            .or_insert_with(|| serde_json::Value::Object(Default::default()));
    }
    unreachable!("loop always returns on the last segment")
}
