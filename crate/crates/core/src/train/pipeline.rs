//! Fold, seed and shot loops around the two stages, with a reusable base
//! training cache.

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{train_stage1, train_stage2_with, ClassMapping, NovelPixels, Provenance, StageConfig, TrainRecord};
use crate::data::{make_fold, sample_episode, ClassShots, DatasetBundle, EvalMode, FoldSpec};
use crate::error::{Error, Result};
use crate::eval::{confidence_analysis, evaluate, EvalReport};
use crate::loss::Stage;
use crate::model::{build_network, load_checkpoint, save_checkpoint, Network, NetworkConfig};
use crate::seed::derive_seed;

/// Everything a pipeline run needs besides the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// `num_outputs` is overwritten per fold.
    pub network: NetworkConfig,
    pub stage1: StageConfig,
    pub stage2: StageConfig,
    pub folds: Vec<usize>,
    pub shots: Vec<usize>,
    pub seeds: Vec<u64>,
    pub ratio_shift: i32,
    /// Scoring used for model selection and the final report.
    pub eval_mode: EvalMode,
    pub novel_pixels: NovelPixels,
    pub eval_batch_size: usize,
    /// Subsample size for the confidence analysis; `None` skips it.
    pub confidence_cap: Option<usize>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            network: NetworkConfig::default(),
            stage1: StageConfig::base(),
            stage2: StageConfig::finetune(),
            folds: vec![0],
            shots: vec![1],
            seeds: vec![0],
            ratio_shift: 0,
            eval_mode: EvalMode::Generalized,
            novel_pixels: NovelPixels::Background,
            eval_batch_size: 16,
            confidence_cap: None,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.folds.is_empty() || self.shots.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config("need at least one fold, shot count and seed".into()));
        }
        if self.shots.contains(&0) {
            return Err(Error::Config("shot counts must be at least 1".into()));
        }
        if self.stage1.stage != Stage::Base || self.stage2.stage != Stage::FineTune {
            return Err(Error::Config(
                "stage1 must be a base config and stage2 a fine-tuning config".into(),
            ));
        }
        if self.eval_batch_size == 0 {
            return Err(Error::Config("eval_batch_size must be at least 1".into()));
        }
        self.stage1.validate()?;
        self.stage2.validate()
    }
}

/// Result of one (fold, seed, shots) run.
#[derive(Debug)]
pub struct RunResult {
    pub fold: FoldSpec,
    pub shots: usize,
    pub seed: u64,
    /// Report of the selected fine-tuned network.
    pub report: EvalReport,
    pub stage1: TrainRecord,
    pub stage2: TrainRecord,
    pub network: Network,
    pub output_classes: Vec<usize>,
    pub selections: Vec<ClassShots>,
    /// Checksum of the base-trained network this run started from.
    pub stage1_checksum: String,
}

#[derive(Debug, Default)]
pub struct PipelineOutput {
    pub runs: Vec<RunResult>,
}

/// Content hash of a dataset: its constants and every training sample.
pub fn dataset_fingerprint(dataset: &DatasetBundle) -> Result<String> {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(&dataset.spec)?);
    for s in &dataset.train {
        h.update(s.id.as_bytes());
        for d in s.image.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        for x in s.image.iter() {
            h.update(x.to_le_bytes());
        }
        h.update(s.labels.iter().copied().collect::<Vec<u8>>());
    }
    Ok(hex::encode(h.finalize()))
}

struct CacheEntry {
    network: Network,
    record: TrainRecord,
}

/// Base-trained networks keyed by everything that determines them.
///
/// Entries live in memory and, when a directory is set, on disk as a
/// checkpoint plus a JSON record.
#[derive(Default)]
pub struct Stage1Cache {
    dir: Option<PathBuf>,
    entries: BTreeMap<String, CacheEntry>,
}

#[derive(Serialize)]
struct CacheKey<'a> {
    dataset: &'a str,
    fold: &'a FoldSpec,
    seed: u64,
    stage1: &'a StageConfig,
    network: &'a NetworkConfig,
    novel_pixels: NovelPixels,
}

impl Stage1Cache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn with_dir(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir)?;
        Ok(Self {
            dir: Some(dir),
            entries: BTreeMap::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn key(k: &CacheKey<'_>) -> Result<String> {
        Ok(hex::encode(Sha256::digest(serde_json::to_vec(k)?)))
    }

    fn lookup(&mut self, key: &str, config: &NetworkConfig) -> Result<Option<(Network, TrainRecord)>> {
        if let Some(e) = self.entries.get(key) {
            return Ok(Some((e.network.try_clone()?, e.record.clone().cached())));
        }
        let Some(dir) = &self.dir else { return Ok(None) };
        let (ckpt, rec) = (dir.join(format!("{key}.safetensors")), dir.join(format!("{key}.json")));
        if !(ckpt.exists() && rec.exists()) {
            return Ok(None);
        }
        let network = load_checkpoint(&ckpt, Some(config))?.network;
        let record: TrainRecord = serde_json::from_slice(&std::fs::read(&rec)?)?;
        self.entries.insert(
            key.to_string(),
            CacheEntry {
                network: network.try_clone()?,
                record: record.clone(),
            },
        );
        Ok(Some((network, record.cached())))
    }

    fn store(&mut self, key: &str, network: &Network, record: &TrainRecord, outputs: &[usize]) -> Result<()> {
        if let Some(dir) = &self.dir {
            save_checkpoint(dir.join(format!("{key}.safetensors")), network, Some(outputs))?;
            std::fs::write(dir.join(format!("{key}.json")), serde_json::to_vec_pretty(record)?)?;
        }
        self.entries.insert(
            key.to_string(),
            CacheEntry {
                network: network.try_clone()?,
                record: record.clone(),
            },
        );
        Ok(())
    }
}

/// Runs base training, head expansion, episode sampling, fine-tuning and
/// evaluation for every fold, seed and shot count.
///
/// Base training depends only on (dataset, fold, seed, configs), so all shot
/// counts of a fold and seed start from the same network.
pub fn run_pipeline(
    dataset: &DatasetBundle,
    config: &PipelineConfig,
    cache: &mut Stage1Cache,
) -> Result<PipelineOutput> {
    config.validate()?;
    let ignore = dataset.spec.ignore_value;
    let fingerprint = dataset_fingerprint(dataset)?;
    let mut out = PipelineOutput::default();
    for &fold_index in &config.folds {
        let fold = make_fold(&dataset.spec, fold_index, config.ratio_shift)?;
        let map1 = ClassMapping::stage1(&fold, ignore, config.novel_pixels);
        let map2 = ClassMapping::stage2(&fold, ignore);
        let mut net_cfg = config.network.clone();
        net_cfg.num_outputs = map1.num_outputs();
        for &seed in &config.seeds {
            let stage1_cfg = StageConfig {
                seed: derive_seed(seed, "stage1"),
                ..config.stage1.clone()
            };
            let key = Stage1Cache::key(&CacheKey {
                dataset: &fingerprint,
                fold: &fold,
                seed,
                stage1: &stage1_cfg,
                network: &net_cfg,
                novel_pixels: config.novel_pixels,
            })?;
            let (base_net, stage1_record) = match cache.lookup(&key, &net_cfg)? {
                Some(hit) => hit,
                None => {
                    let net = build_network(&net_cfg, derive_seed(seed, "init"))?;
                    let (net, record) = train_stage1(net, &dataset.train, &map1, &stage1_cfg)?;
                    cache.store(&key, &net, &record, map1.output_classes())?;
                    (net, record)
                }
            };
            let stage1_checksum = base_net.checksum()?;

            for &shots in &config.shots {
                let episode = sample_episode(
                    &dataset.train,
                    &dataset.val,
                    &fold,
                    ignore,
                    shots,
                    derive_seed(seed, &format!("episode/{shots}")),
                )?;
                let network = base_net.expand_classifier_outputs(
                    map1.num_outputs(),
                    map2.num_outputs(),
                    derive_seed(seed, "expand"),
                )?;
                let stage2_cfg = StageConfig {
                    seed: derive_seed(seed, &format!("stage2/{shots}")),
                    ..config.stage2.clone()
                };
                let outputs = map2.output_classes().to_vec();
                let mut evaluator = |net: &Network| {
                    evaluate(
                        net,
                        &episode.eval_set,
                        &fold,
                        &outputs,
                        config.eval_mode,
                        shots,
                        ignore,
                        config.eval_batch_size,
                    )
                };
                let (network, stage2_record) =
                    train_stage2_with(network, &episode, &fold, ignore, &stage2_cfg, &mut evaluator)?;
                let best_epoch = stage2_record.best.as_ref().map(|b| b.epoch);
                let mut report = stage2_record
                    .evaluations
                    .iter()
                    .find(|s| Some(s.epoch) == best_epoch)
                    .map(|s| s.report.clone())
                    .ok_or_else(|| Error::Eval("fine-tuning produced no evaluation".into()))?;
                if let Some(cap) = config.confidence_cap {
                    report.confidence_stats = Some(confidence_analysis(
                        &network,
                        &episode.eval_set,
                        &fold,
                        &outputs,
                        ignore,
                        cap,
                        derive_seed(seed, "confidence"),
                        config.eval_batch_size,
                    )?);
                }
                out.runs.push(RunResult {
                    fold: fold.clone(),
                    shots,
                    seed,
                    report,
                    stage1: stage1_record.clone(),
                    stage2: stage2_record,
                    network,
                    output_classes: outputs,
                    selections: episode.selections,
                    stage1_checksum: stage1_checksum.clone(),
                });
            }
        }
    }
    Ok(out)
}

impl RunResult {
    pub fn stage1_was_cached(&self) -> bool {
        self.stage1.provenance == Provenance::Cached
    }
}
