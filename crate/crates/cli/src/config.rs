//! Run configuration documents.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use scl_core::backbones::{BackboneConfig, ExtractorConfig};
use scl_core::evaluation::EvalOptions;
use scl_core::models::{ArchId, HeadConfig, ModelConfig};
use scl_core::seq2seq::SeqConfig;
use scl_core::synthgen::SynthConfig;
use scl_core::training::TrainConfig;
use scl_core::SclError;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const SCHEMA_VERSION: u32 = 1;

/// Where a task's demonstrations come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    /// Rendered on demand (or from the cache) by the synthetic generator.
    Synth(SynthConfig),
    /// A task directory or its `dataset.json`.
    Manifest(PathBuf),
}

impl DatasetSource {
    /// Stable key of a synthetic dataset, used for cache directories.
    pub fn cache_key(config: &SynthConfig) -> Result<String> {
        let text = serde_json::to_string(config)?;
        let digest = Sha256::digest(text.as_bytes());
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }
}

/// Model options shared by every architecture of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelOptions {
    pub backbone: BackboneConfig,
    pub head: HeadConfig,
    pub extractor: Option<ExtractorConfig>,
    pub seq: SeqConfig,
}

impl Default for ModelOptions {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            backbone: m.backbone,
            head: m.head,
            extractor: m.extractor,
            seq: m.seq,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub measure_time: bool,
    pub timing_reps: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        let o = EvalOptions::default();
        Self {
            measure_time: o.measure_time,
            timing_reps: o.timing_reps,
        }
    }
}

impl EvalSection {
    pub fn options(&self) -> EvalOptions {
        EvalOptions {
            measure_time: self.measure_time,
            timing_reps: self.timing_reps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationSection {
    pub counts: Vec<usize>,
    pub seeds: Vec<u64>,
}

impl Default for AblationSection {
    fn default() -> Self {
        Self {
            counts: (1..=10).collect(),
            seeds: (0..5).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompareSection {
    pub archs: Vec<ArchId>,
    /// Seeds per architecture; empty means the run seed only.
    pub seeds: Vec<u64>,
}

impl Default for CompareSection {
    fn default() -> Self {
        Self {
            archs: ArchId::ALL.to_vec(),
            seeds: Vec::new(),
        }
    }
}

/// The complete description of an experiment. Every command reads the
/// sections it needs and ignores the rest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub schema_version: u32,
    /// Seed of model initialization and training; overrides `train.seed`.
    pub seed: Option<u64>,
    /// One entry per task.
    pub datasets: Vec<DatasetSource>,
    pub arch: ArchId,
    pub model: ModelOptions,
    pub train: TrainConfig,
    pub eval: EvalSection,
    pub ablation: AblationSection,
    pub compare: CompareSection,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: None,
            datasets: vec![DatasetSource::Synth(SynthConfig::default())],
            arch: ArchId::Fcn,
            model: ModelOptions::default(),
            train: TrainConfig::default(),
            eval: EvalSection::default(),
            ablation: AblationSection::default(),
            compare: CompareSection::default(),
            output_dir: PathBuf::from("runs"),
        }
    }
}

/// A run file written by `train`; its `run_config` can be fed back in.
#[derive(Deserialize)]
struct Embedded {
    run_config: RunConfig,
}

impl RunConfig {
    /// Parses a config document, or the config embedded in a `run.json`,
    /// resolving relative manifest paths against the document's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let value: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| SclError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = if value.get("run_config").is_some() {
            serde_json::from_value::<Embedded>(value).map(|e| e.run_config)
        } else {
            serde_json::from_value::<RunConfig>(value)
        }
        .map_err(|e| SclError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for d in &mut cfg.datasets {
            if let DatasetSource::Manifest(p) = d {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            bail!(SclError::Config(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.datasets.is_empty() {
            bail!(SclError::Config("`datasets` lists no tasks".into()));
        }
        for d in &self.datasets {
            if let DatasetSource::Synth(s) = d {
                s.validate()?;
            }
        }
        self.model.backbone.validate()?;
        self.train.validate()?;
        if self.eval.timing_reps == 0 {
            bail!(SclError::Config("eval.timing_reps must be positive".into()));
        }
        if self.compare.archs.is_empty() {
            bail!(SclError::Config("compare.archs is empty".into()));
        }
        Ok(())
    }

    /// The seed that governs model initialization and training.
    pub fn run_seed(&self) -> u64 {
        self.seed.unwrap_or(self.train.seed)
    }

    pub fn model_config(&self, arch: ArchId, seed: u64) -> ModelConfig {
        ModelConfig {
            arch,
            backbone: self.model.backbone.clone(),
            head: self.model.head.clone(),
            extractor: self.model.extractor.clone(),
            seq: self.model.seq.clone(),
            seed,
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            ..self.train.clone()
        }
    }

    /// Copy with the seed pinned, as recorded next to run outputs.
    pub fn resolved(&self, seed: u64, arch: ArchId) -> Self {
        Self {
            seed: Some(seed),
            arch,
            train: self.train_config(seed),
            ..self.clone()
        }
    }
}
