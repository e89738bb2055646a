//! Experiment configuration files (TOML).

use std::path::{Path, PathBuf};

use gfss::data::{load_dataset, DatasetBundle, EvalMode, SyntheticParams};
use gfss::loss::LossWeights;
use gfss::model::{FreezePolicy, NetworkConfig};
use gfss::train::{NovelPixels, PipelineConfig, Regularizer, StageConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const SCHEMA_VERSION: u32 = 1;

/// Fine-tuning variants. See [`Method::plan`] for what each one trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Vanilla,
    ObjdetFt,
    TripletFt,
    TripletAll,
    TripBaseFtLast,
    Cosine,
}

/// Freeze policy and regularizer placement of a method.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MethodPlan {
    pub stage1_regularizer: Regularizer,
    pub stage2_regularizer: Regularizer,
    pub stage2_freeze: FreezePolicy,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Vanilla,
        Method::ObjdetFt,
        Method::TripletFt,
        Method::TripletAll,
        Method::TripBaseFtLast,
        Method::Cosine,
    ];

    /// | method              | base training | fine-tuning | trainable in fine-tuning |
    /// |---------------------|---------------|-------------|--------------------------|
    /// | `vanilla`           | none          | none        | classifier               |
    /// | `objdet_ft`         | none          | none        | final conv               |
    /// | `triplet_ft`        | none          | triplet     | classifier               |
    /// | `triplet_all`       | triplet       | triplet     | classifier               |
    /// | `trip_base_ft_last` | triplet       | none        | final conv               |
    /// | `cosine`            | none          | cosine      | classifier               |
    pub fn plan(self) -> MethodPlan {
        use Regularizer::{Cosine, None as Plain, Triplet};
        let (s1, s2, freeze) = match self {
            Method::Vanilla => (Plain, Plain, FreezePolicy::FreezeBackbone),
            Method::ObjdetFt => (Plain, Plain, FreezePolicy::FreezeAllButLast),
            Method::TripletFt => (Plain, Triplet, FreezePolicy::FreezeBackbone),
            Method::TripletAll => (Triplet, Triplet, FreezePolicy::FreezeBackbone),
            Method::TripBaseFtLast => (Triplet, Plain, FreezePolicy::FreezeAllButLast),
            Method::Cosine => (Plain, Cosine, FreezePolicy::FreezeBackbone),
        };
        MethodPlan {
            stage1_regularizer: s1,
            stage2_regularizer: s2,
            stage2_freeze: freeze,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::Vanilla => "vanilla",
            Method::ObjdetFt => "objdet_ft",
            Method::TripletFt => "triplet_ft",
            Method::TripletAll => "triplet_all",
            Method::TripBaseFtLast => "trip_base_ft_last",
            Method::Cosine => "cosine",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetRef {
    Synthetic {
        #[serde(default = "default_classes")]
        num_classes: usize,
        #[serde(default = "default_images")]
        images: usize,
        #[serde(default = "default_side")]
        height: usize,
        #[serde(default = "default_side")]
        width: usize,
        #[serde(default)]
        seed: u64,
        #[serde(default = "default_folds")]
        num_folds: usize,
    },
    /// A directory in the paired-PNG layout with a `manifest.json`.
    Path { path: PathBuf },
}

fn default_classes() -> usize {
    8
}
fn default_images() -> usize {
    160
}
fn default_side() -> usize {
    64
}
fn default_folds() -> usize {
    4
}

/// Optional overrides of a stage's hyperparameters.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSection {
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub lr_decay: Option<f64>,
    pub momentum: Option<f64>,
    pub eval_every: Option<usize>,
}

impl StageSection {
    fn apply(&self, mut cfg: StageConfig) -> StageConfig {
        cfg.epochs = self.epochs.unwrap_or(cfg.epochs);
        cfg.batch_size = self.batch_size.unwrap_or(cfg.batch_size);
        cfg.lr = self.lr.unwrap_or(cfg.lr);
        cfg.lr_decay = self.lr_decay.unwrap_or(cfg.lr_decay);
        cfg.momentum = self.momentum.unwrap_or(cfg.momentum);
        cfg.eval_every = self.eval_every.unwrap_or(cfg.eval_every);
        cfg
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSection {
    pub backbone_channels: Option<Vec<usize>>,
    pub classifier_hidden: Option<usize>,
    pub pooling_scales: Option<Vec<usize>>,
    pub aux_tap: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    #[serde(default = "default_eval_mode")]
    pub mode: EvalMode,
    #[serde(default = "default_eval_batch")]
    pub batch_size: usize,
    /// Subsample size of the confidence analysis; omitted to skip it.
    pub confidence_cap: Option<usize>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            mode: default_eval_mode(),
            batch_size: default_eval_batch(),
            confidence_cap: None,
        }
    }
}

fn default_eval_mode() -> EvalMode {
    EvalMode::Generalized
}
fn default_eval_batch() -> usize {
    16
}
fn default_output() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub method: Method,
    pub dataset: DatasetRef,
    pub folds: Vec<usize>,
    pub shots: Vec<usize>,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub ratio_shift: i32,
    #[serde(default)]
    pub novel_pixels: NovelPixels,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub network: NetworkSection,
    #[serde(default)]
    pub stage1: StageSection,
    #[serde(default)]
    pub stage2: StageSection,
    #[serde(default)]
    pub weights: LossWeights,
    #[serde(default)]
    pub eval: EvalSection,
}

/// 1-based line of the first `key =` assignment or `[key]` header in `text`.
fn line_of(text: &str, key: &str) -> Option<usize> {
    let header = format!("[{key}]");
    text.lines()
        .position(|l| {
            let t = l.trim_start();
            t.starts_with(&header)
                || t.strip_prefix(key)
                    .is_some_and(|rest| rest.trim_start().starts_with('='))
        })
        .map(|i| i + 1)
}

impl ExperimentConfig {
    /// Parses and validates `text`; errors name the file and line.
    pub fn parse(text: &str, origin: &str) -> Result<Self, CliError> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| {
            let line = e
                .span()
                .map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1)
                .unwrap_or(1);
            CliError::Config(format!("{origin}:{line}: {}", e.message()))
        })?;
        cfg.validate().map_err(|(key, msg)| {
            let line = line_of(text, key).map_or(String::new(), |l| format!("{l}:"));
            CliError::Config(format!("{origin}:{line} {msg}"))
        })?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CliError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text, &path.display().to_string())
    }

    fn validate(&self) -> Result<(), (&'static str, String)> {
        if self.schema_version != SCHEMA_VERSION {
            return Err((
                "schema_version",
                format!(
                    "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                    self.schema_version
                ),
            ));
        }
        if self.folds.is_empty() {
            return Err(("folds", "at least one fold is required".into()));
        }
        if self.shots.is_empty() || self.shots.contains(&0) {
            return Err(("shots", "shots must be a non-empty list of positive counts".into()));
        }
        if self.seeds.is_empty() {
            return Err(("seeds", "at least one seed is required".into()));
        }
        let pipeline = self.pipeline_config((64, 64));
        pipeline.stage1.validate().map_err(|e| ("stage1", e.to_string()))?;
        pipeline.stage2.validate().map_err(|e| ("stage2", e.to_string()))?;
        if self.eval.batch_size == 0 {
            return Err(("batch_size", "eval batch_size must be at least 1".into()));
        }
        Ok(())
    }

    /// Pipeline settings for images of `size`.
    pub fn pipeline_config(&self, size: (usize, usize)) -> PipelineConfig {
        let plan = self.method.plan();
        let mut stage1 = self.stage1.apply(StageConfig::base());
        stage1.regularizer = plan.stage1_regularizer;
        stage1.weights = self.weights;
        let mut stage2 = self.stage2.apply(StageConfig::finetune());
        stage2.regularizer = plan.stage2_regularizer;
        stage2.freeze = plan.stage2_freeze;
        stage2.weights = self.weights;

        let mut network = NetworkConfig {
            input_size: size,
            ..NetworkConfig::default()
        };
        let n = &self.network;
        if let Some(v) = &n.backbone_channels {
            network.backbone_channels = v.clone();
        }
        if let Some(v) = n.classifier_hidden {
            network.classifier_hidden = v;
        }
        if let Some(v) = &n.pooling_scales {
            network.pooling_scales = v.clone();
        }
        if let Some(v) = n.aux_tap {
            network.aux_tap = v;
        }
        PipelineConfig {
            network,
            stage1,
            stage2,
            folds: self.folds.clone(),
            shots: self.shots.clone(),
            seeds: self.seeds.clone(),
            ratio_shift: self.ratio_shift,
            eval_mode: self.eval.mode,
            novel_pixels: self.novel_pixels,
            eval_batch_size: self.eval.batch_size,
            confidence_cap: self.eval.confidence_cap,
        }
    }

    /// Output root: `GFSS_OUTPUT_ROOT` when set, else `output_dir`.
    pub fn output_root(&self) -> PathBuf {
        std::env::var_os(crate::OUTPUT_ROOT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| self.output_dir.clone())
    }
}

impl DatasetRef {
    pub fn load(&self) -> gfss::Result<DatasetBundle> {
        match self {
            DatasetRef::Synthetic {
                num_classes,
                images,
                height,
                width,
                seed,
                num_folds,
            } => {
                let mut p = SyntheticParams::new(*num_classes, *images, (*height, *width), *seed);
                p.num_folds = *num_folds;
                p.generate()
            }
            DatasetRef::Path { path } => load_dataset(path),
        }
    }
}
