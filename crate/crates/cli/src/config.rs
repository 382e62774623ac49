//! Run configuration: a TOML file, overridden by flags, with built-in
//! defaults when no file is given. The fully resolved form is written to
//! every run directory so the run can be repeated with `--config`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use ubna_core::adapt::{AdaptationSchedule, DEFAULT_BATCH_SIZE, DEFAULT_ETA0, DEFAULT_STEPS};
use ubna_core::datagen::DatasetSpec;
use ubna_core::eval::ClassSubset;
use ubna_core::pretrain::{ClassWeighting, PretrainConfig};
use ubna_core::{AdaptNormalization, Architecture, Method};

use crate::UsageError;

pub const RESOLVED_NAME: &str = "config.resolved.toml";

/// Side length of the built-in synthetic images.
const DEFAULT_SIDE: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum ProtocolKind {
    Offline,
    Online,
    Fewshot,
    Sequential,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    /// Normalize each test batch with its own statistics.
    Zhang,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub hidden: Vec<usize>,
    pub input_bn: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { hidden: vec![16, 16], input_bn: true }
    }
}

impl ModelSection {
    pub fn architecture(&self, input_channels: usize, classes: usize) -> Architecture {
        Architecture { input_channels, hidden: self.hidden.clone(), classes, input_bn: self.input_bn }
    }
}

/// Pre-training settings; the seed is the run seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSection {
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub bn_momentum: f64,
    #[serde(default)]
    pub class_weighting: ClassWeighting,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_weights: Option<Vec<f64>>,
}

impl Default for PretrainSection {
    fn default() -> Self {
        let d = PretrainConfig::default();
        Self {
            steps: d.steps,
            learning_rate: d.learning_rate,
            batch_size: d.batch_size,
            bn_momentum: d.bn_momentum,
            class_weighting: d.class_weighting,
            class_weights: d.class_weights,
        }
    }
}

impl PretrainSection {
    pub fn with_seed(&self, seed: u64) -> PretrainConfig {
        PretrainConfig {
            steps: self.steps,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            bn_momentum: self.bn_momentum,
            class_weighting: self.class_weighting,
            class_weights: self.class_weights.clone(),
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptSection {
    pub method: Method,
    pub protocol: ProtocolKind,
    pub eta0: f64,
    /// Omitted means the method's default.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha_batch: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha_layer: Option<f64>,
    pub steps: usize,
    pub batch_size: usize,
    #[serde(default = "one")]
    pub first_step_index: usize,
    #[serde(default)]
    pub normalize_with: AdaptNormalization,
    /// Seconds between frames of the online stream.
    #[serde(default = "default_frame_period")]
    pub frame_period: f64,
    /// Target images of the few-shot batch; empty means the first
    /// `batch_size` images.
    #[serde(default)]
    pub fewshot_ids: Vec<usize>,
}

fn one() -> usize {
    1
}

fn default_frame_period() -> f64 {
    1.0 / 17.0
}

impl Default for AdaptSection {
    fn default() -> Self {
        Self {
            method: Method::Ubna,
            protocol: ProtocolKind::Offline,
            eta0: DEFAULT_ETA0,
            alpha_batch: None,
            alpha_layer: None,
            steps: DEFAULT_STEPS,
            batch_size: DEFAULT_BATCH_SIZE,
            first_step_index: 1,
            normalize_with: AdaptNormalization::default(),
            frame_period: default_frame_period(),
            fewshot_ids: Vec::new(),
        }
    }
}

impl AdaptSection {
    /// The momentum schedule of a schedule-based method with the given
    /// decay factors.
    pub fn schedule_with(&self, alpha_batch: f64, alpha_layer: f64) -> anyhow::Result<AdaptationSchedule> {
        let mut s = AdaptationSchedule::new(self.eta0, alpha_batch, alpha_layer, self.steps)
            .map_err(|e| UsageError(e.to_string()))?;
        s.first_step_index = self.first_step_index;
        s.normalize_with = self.normalize_with;
        s.validate().map_err(|e| UsageError(e.to_string()))?;
        Ok(s)
    }

    pub fn schedule(&self) -> anyhow::Result<Option<AdaptationSchedule>> {
        match (self.alpha_batch, self.alpha_layer) {
            (Some(ab), Some(al)) => self.schedule_with(ab, al).map(Some),
            _ => Ok(None),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    /// Comma-separated class ids the mean runs over; all classes if absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classes: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline: Option<Baseline>,
}

impl EvalSection {
    pub fn subset(&self, classes: usize) -> anyhow::Result<ClassSubset> {
        Ok(match &self.classes {
            Some(text) => ClassSubset::parse(text, classes).map_err(|e| UsageError(e.to_string()))?,
            None => ClassSubset::all(classes),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    #[serde(default)]
    pub alpha_batch: Vec<f64>,
    #[serde(default)]
    pub alpha_layer: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub pretrain: PretrainSection,
    #[serde(default)]
    pub adapt: AdaptSection,
    #[serde(default)]
    pub evaluation: EvalSection,
    #[serde(default)]
    pub sweep: SweepSection,
    /// Labeled source domain for pre-training.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<DatasetSpec>,
    /// Unlabeled adaptation set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<DatasetSpec>,
    /// Labeled held-out evaluation set.
    #[serde(default, skip_serializing_if = "Option::is_none", rename = "eval")]
    pub eval_set: Option<DatasetSpec>,
    /// Domains of a sequential adaptation, in order.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub segments: Vec<DatasetSpec>,
}

impl RunConfig {
    /// Built-in defaults: source, target and held-out sets derived from
    /// the run seed.
    pub fn builtin(seed: u64) -> Self {
        let small = |spec: DatasetSpec| DatasetSpec { height: DEFAULT_SIDE, width: DEFAULT_SIDE, ..spec };
        let source = small(DatasetSpec::default_source(seed, 200));
        let target = small(DatasetSpec { labeled: false, ..DatasetSpec::default_target(seed.wrapping_add(1), 300) });
        let eval = small(DatasetSpec::default_target(seed.wrapping_add(2), 40));
        Self {
            seed,
            out: PathBuf::from("ubna-run"),
            checkpoint: None,
            model: ModelSection::default(),
            pretrain: PretrainSection::default(),
            adapt: AdaptSection::default(),
            evaluation: EvalSection::default(),
            sweep: SweepSection::default(),
            segments: vec![target.clone(), source.clone()],
            source: Some(source),
            target: Some(target),
            eval_set: Some(eval),
        }
    }

    pub fn from_toml_str(text: &str) -> anyhow::Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| UsageError(format!("config: {e}")))?;
        for spec in cfg.source.iter().chain(&cfg.target).chain(&cfg.eval_set).chain(&cfg.segments) {
            spec.validate().map_err(|e| UsageError(format!("config: {e}")))?;
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| UsageError(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Fills in the method's default decay factors.
    pub fn resolve_alphas(&mut self) {
        if let Some((ab, al)) = self.adapt.method.default_alphas() {
            self.adapt.alpha_batch.get_or_insert(ab);
            self.adapt.alpha_layer.get_or_insert(al);
        }
    }

    pub fn require_source(&self) -> anyhow::Result<&DatasetSpec> {
        self.source.as_ref().ok_or_else(|| UsageError("no [source] dataset configured".into()).into())
    }

    pub fn require_target(&self) -> anyhow::Result<&DatasetSpec> {
        self.target.as_ref().ok_or_else(|| UsageError("no [target] dataset configured".into()).into())
    }

    pub fn require_eval(&self) -> anyhow::Result<&DatasetSpec> {
        self.eval_set.as_ref().ok_or_else(|| UsageError("no [eval] dataset configured".into()).into())
    }

    pub fn require_checkpoint(&self) -> anyhow::Result<&Path> {
        self.checkpoint.as_deref().ok_or_else(|| UsageError("no --checkpoint given".into()).into())
    }

    /// Writes the resolved configuration into the run directory.
    pub fn echo(&self) -> anyhow::Result<PathBuf> {
        std::fs::create_dir_all(&self.out)?;
        let path = self.out.join(RESOLVED_NAME);
        std::fs::write(&path, self.to_toml_string())?;
        Ok(path)
    }
}
