//! Run configuration: a line-based `key = value` format with bracketed
//! sections. Unknown keys are errors; every key has a default, so an empty
//! file is a valid classification run. The resolved configuration is
//! rendered back out verbatim-reproducibly for the audit trail.

use std::fmt;

use crate::model::{self, ModelConfig, ModelError, NormMode, Task};
use crate::synth::DatasetSpec;
use crate::training::OptimizerKind;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub task: Task,
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainSection,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataSection {
    pub classes: usize,
    /// Clouds per class (classification) or scenes (segmentation).
    pub samples: usize,
    pub points: usize,
    pub noise: f64,
    pub seed: u64,
    pub val_fraction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSection {
    pub preset: String,
    pub norm: NormMode,
    /// 0 keeps the preset's head count.
    pub heads: usize,
    pub lcp: bool,
    /// 0 keeps each block's neighbor count; otherwise applied to every block.
    pub k: usize,
    /// 0 keeps the preset's block count.
    pub blocks: usize,
    /// 0 keeps the preset's attention layers; otherwise the total per block.
    pub layers: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSection {
    pub optimizer: OptimizerKind,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch: usize,
    pub clip_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ConfigError {
    Syntax { line: usize, text: String },
    UnknownSection { line: usize, name: String },
    UnknownKey { line: usize, key: String },
    BadValue { line: usize, key: String, value: String },
    Model(String),
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigError::Syntax { line, text } => write!(f, "line {line}: cannot parse '{text}'"),
            ConfigError::UnknownSection { line, name } => {
                write!(f, "line {line}: unknown section [{name}]")
            }
            ConfigError::UnknownKey { line, key } => write!(f, "line {line}: unknown key '{key}'"),
            ConfigError::BadValue { line, key, value } => {
                write!(f, "line {line}: bad value '{value}' for '{key}'")
            }
            ConfigError::Model(msg) => write!(f, "{msg}"),
        }
    }
}

impl std::error::Error for ConfigError {}

impl From<ModelError> for ConfigError {
    fn from(e: ModelError) -> Self {
        ConfigError::Model(e.to_string())
    }
}

/// Defaults for the given task; the documented baseline every key falls
/// back to.
pub fn default_run_config(task: Task) -> RunConfig {
    match task {
        Task::Segmentation => RunConfig {
            seed: 0,
            task,
            data: DataSection {
                classes: 4,
                samples: 80,
                points: 4096,
                noise: 0.0,
                seed: 7,
                val_fraction: 0.2,
            },
            model: ModelSection {
                preset: "desk-seg".to_string(),
                norm: NormMode::Post,
                heads: 0,
                lcp: true,
                k: 0,
                blocks: 0,
                layers: 0,
            },
            train: TrainSection {
                optimizer: OptimizerKind::AdamW,
                epochs: 25,
                lr: 0.001,
                weight_decay: 1e-4,
                momentum: 0.9,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
                batch: 4,
                clip_norm: 10.0,
            },
        },
        _ => RunConfig {
            seed: 0,
            task: Task::Classification,
            data: DataSection {
                classes: 4,
                samples: 125,
                points: 512,
                noise: 0.0,
                seed: 7,
                val_fraction: 0.2,
            },
            model: ModelSection {
                preset: "desk-cls".to_string(),
                norm: NormMode::Post,
                heads: 0,
                lcp: true,
                k: 0,
                blocks: 0,
                layers: 0,
            },
            train: TrainSection {
                optimizer: OptimizerKind::SgdMomentum,
                epochs: 60,
                lr: 0.0008,
                weight_decay: 1e-4,
                momentum: 0.9,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
                batch: 16,
                clip_norm: 10.0,
            },
        },
    }
}

fn parse_task(s: &str) -> Option<Task> {
    match s {
        "classification" => Some(Task::Classification),
        "segmentation" => Some(Task::Segmentation),
        _ => None,
    }
}

fn task_name(t: Task) -> &'static str {
    match t {
        Task::Classification => "classification",
        Task::Segmentation => "segmentation",
        Task::DetectionBackbone => "detection-backbone",
    }
}

/// Parses the config text. Values not present take the task's defaults, so
/// the task key is read in a first pass.
pub fn parse_config(text: &str) -> Result<RunConfig, ConfigError> {
    let entries = tokenize(text)?;
    let mut task = Task::Classification;
    for e in &entries {
        if e.section == "run" && e.key == "task" {
            task = parse_task(&e.value).ok_or_else(|| ConfigError::BadValue {
                line: e.line,
                key: "task".into(),
                value: e.value.clone(),
            })?;
        }
    }
    let mut cfg = default_run_config(task);

    for e in &entries {
        let bad = || ConfigError::BadValue {
            line: e.line,
            key: e.key.clone(),
            value: e.value.clone(),
        };
        let unknown = || ConfigError::UnknownKey {
            line: e.line,
            key: format!("{}.{}", e.section, e.key),
        };
        match (e.section.as_str(), e.key.as_str()) {
            ("run", "seed") => cfg.seed = e.value.parse().map_err(|_| bad())?,
            ("run", "task") => {} // handled in the first pass
            ("data", "classes") => cfg.data.classes = e.value.parse().map_err(|_| bad())?,
            ("data", "samples") => cfg.data.samples = e.value.parse().map_err(|_| bad())?,
            ("data", "points") => cfg.data.points = e.value.parse().map_err(|_| bad())?,
            ("data", "noise") => cfg.data.noise = e.value.parse().map_err(|_| bad())?,
            ("data", "seed") => cfg.data.seed = e.value.parse().map_err(|_| bad())?,
            ("data", "val_fraction") => {
                cfg.data.val_fraction = e.value.parse().map_err(|_| bad())?
            }
            ("model", "preset") => cfg.model.preset = e.value.clone(),
            ("model", "norm") => {
                cfg.model.norm = match e.value.as_str() {
                    "post" => NormMode::Post,
                    "none" => NormMode::None,
                    _ => return Err(bad()),
                }
            }
            ("model", "heads") => cfg.model.heads = e.value.parse().map_err(|_| bad())?,
            ("model", "lcp") => {
                cfg.model.lcp = match e.value.as_str() {
                    "on" => true,
                    "off" => false,
                    _ => return Err(bad()),
                }
            }
            ("model", "k") => cfg.model.k = e.value.parse().map_err(|_| bad())?,
            ("model", "blocks") => cfg.model.blocks = e.value.parse().map_err(|_| bad())?,
            ("model", "layers") => cfg.model.layers = e.value.parse().map_err(|_| bad())?,
            ("train", "optimizer") => {
                cfg.train.optimizer = match e.value.as_str() {
                    "sgd" => OptimizerKind::SgdMomentum,
                    "adamw" => OptimizerKind::AdamW,
                    _ => return Err(bad()),
                }
            }
            ("train", "epochs") => cfg.train.epochs = e.value.parse().map_err(|_| bad())?,
            ("train", "lr") => cfg.train.lr = e.value.parse().map_err(|_| bad())?,
            ("train", "weight_decay") => {
                cfg.train.weight_decay = e.value.parse().map_err(|_| bad())?
            }
            ("train", "momentum") => cfg.train.momentum = e.value.parse().map_err(|_| bad())?,
            ("train", "beta1") => cfg.train.beta1 = e.value.parse().map_err(|_| bad())?,
            ("train", "beta2") => cfg.train.beta2 = e.value.parse().map_err(|_| bad())?,
            ("train", "eps") => cfg.train.eps = e.value.parse().map_err(|_| bad())?,
            ("train", "batch") => cfg.train.batch = e.value.parse().map_err(|_| bad())?,
            ("train", "clip_norm") => cfg.train.clip_norm = e.value.parse().map_err(|_| bad())?,
            _ => return Err(unknown()),
        }
    }
    Ok(cfg)
}

struct Entry {
    section: String,
    key: String,
    value: String,
    line: usize,
}

fn tokenize(text: &str) -> Result<Vec<Entry>, ConfigError> {
    let mut section = String::new();
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        if let Some(name) = trimmed.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
            let name = name.trim();
            if !["run", "data", "model", "train"].contains(&name) {
                return Err(ConfigError::UnknownSection {
                    line,
                    name: name.to_string(),
                });
            }
            section = name.to_string();
            continue;
        }
        let Some((key, value)) = trimmed.split_once('=') else {
            return Err(ConfigError::Syntax {
                line,
                text: trimmed.to_string(),
            });
        };
        if section.is_empty() {
            return Err(ConfigError::Syntax {
                line,
                text: trimmed.to_string(),
            });
        }
        out.push(Entry {
            section: section.clone(),
            key: key.trim().to_string(),
            value: value.trim().to_string(),
            line,
        });
    }
    Ok(out)
}

/// Renders a config deterministically; `parse_config(render_config(c)) == c`.
pub fn render_config(cfg: &RunConfig) -> String {
    let norm = match cfg.model.norm {
        NormMode::Post => "post",
        NormMode::None => "none",
    };
    let optimizer = match cfg.train.optimizer {
        OptimizerKind::SgdMomentum => "sgd",
        OptimizerKind::AdamW => "adamw",
    };
    format!(
        "[run]\n\
         seed = {}\n\
         task = {}\n\
         \n\
         [data]\n\
         classes = {}\n\
         samples = {}\n\
         points = {}\n\
         noise = {}\n\
         seed = {}\n\
         val_fraction = {}\n\
         \n\
         [model]\n\
         preset = {}\n\
         norm = {}\n\
         heads = {}\n\
         lcp = {}\n\
         k = {}\n\
         blocks = {}\n\
         layers = {}\n\
         \n\
         [train]\n\
         optimizer = {}\n\
         epochs = {}\n\
         lr = {}\n\
         weight_decay = {}\n\
         momentum = {}\n\
         beta1 = {}\n\
         beta2 = {}\n\
         eps = {}\n\
         batch = {}\n\
         clip_norm = {}\n",
        cfg.seed,
        task_name(cfg.task),
        cfg.data.classes,
        cfg.data.samples,
        cfg.data.points,
        cfg.data.noise,
        cfg.data.seed,
        cfg.data.val_fraction,
        cfg.model.preset,
        norm,
        cfg.model.heads,
        if cfg.model.lcp { "on" } else { "off" },
        cfg.model.k,
        cfg.model.blocks,
        cfg.model.layers,
        optimizer,
        cfg.train.epochs,
        cfg.train.lr,
        cfg.train.weight_decay,
        cfg.train.momentum,
        cfg.train.beta1,
        cfg.train.beta2,
        cfg.train.eps,
        cfg.train.batch,
        cfg.train.clip_norm,
    )
}

impl RunConfig {
    pub fn dataset_spec(&self) -> DatasetSpec {
        DatasetSpec {
            task: self.task,
            classes: self.data.classes,
            samples: self.data.samples,
            points: self.data.points,
            noise: self.data.noise,
            seed: self.data.seed,
        }
    }

    /// Builds the model from the preset and applies the section overrides.
    pub fn resolved_model(&self) -> Result<ModelConfig, ConfigError> {
        let mut cfg = model::preset(&self.model.preset, self.data.classes)?;
        if cfg.task != self.task {
            return Err(ConfigError::Model(format!(
                "preset '{}' is a {} architecture but the run task is {}",
                self.model.preset,
                task_name(cfg.task),
                task_name(self.task)
            )));
        }
        cfg.input_points = self.data.points;
        cfg.norm = self.model.norm;
        cfg.lcp_enabled = self.model.lcp;
        if self.model.heads > 0 {
            cfg.heads = self.model.heads;
        }
        if self.model.blocks > 0 {
            apply_block_count(&mut cfg, self.model.blocks);
        }
        if self.model.k > 0 {
            for b in cfg.blocks.iter_mut() {
                b.neighbors = self.model.k;
            }
        }
        if self.model.layers > 0 {
            let before = self.model.layers.div_ceil(2);
            let after = self.model.layers - before;
            for b in cfg.blocks.iter_mut() {
                b.attention_layers_before = before;
                b.attention_layers_after = after;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Truncates or extends the block stack to `n` blocks, preserving widths
/// chainage and the segmentation mirror.
fn apply_block_count(cfg: &mut ModelConfig, n: usize) {
    while cfg.blocks.len() > n {
        cfg.blocks.pop();
        if !cfg.upsample_widths.is_empty() {
            cfg.upsample_widths.remove(0);
        }
    }
    while cfg.blocks.len() < n {
        let last = cfg.blocks.last().unwrap().clone();
        let mut next = last.clone();
        next.in_width = last.out_width;
        next.out_width = last.out_width;
        next.out_points = (last.out_points / 2).max(1);
        cfg.blocks.push(next);
        if !cfg.upsample_widths.is_empty() {
            let first = cfg.upsample_widths[0];
            cfg.upsample_widths.insert(0, first);
        }
    }
}
