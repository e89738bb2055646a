//! Two-stage training: base training on the base classes, then K-shot
//! fine-tuning on base and novel classes with frozen layers and
//! best-total-mIoU model selection.

mod pipeline;
mod record;

pub use pipeline::{dataset_fingerprint, run_pipeline, PipelineConfig, PipelineOutput, RunResult, Stage1Cache};
pub use record::{BestSnapshot, EpochRecord, EvalSnapshot, Provenance, TrainRecord};

use std::collections::BTreeMap;

use candle_core::{Device, Tensor};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::data::{Episode, EvalMode, FoldSpec, SegmentationSample};
use crate::error::{domain, Error, Result};
use crate::eval::{evaluate, EvalReport};
use crate::loss::{
    cosine_term, flatten_features, masked_cross_entropy, sample_triplets, scalar, triplet_term, LabelBatch,
    LossWeights, Stage,
};
use crate::model::{images_to_tensor, FreezePolicy, Mode, Network};
use crate::optim::{Sgd, SgdConfig};
use crate::seed;

/// Scores a network snapshot during fine-tuning.
pub type Evaluator<'a> = dyn FnMut(&Network) -> Result<EvalReport> + 'a;

/// Feature-space regularizer added to the main loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Regularizer {
    #[default]
    None,
    Triplet,
    Cosine,
}

/// Hyperparameters of one training stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub stage: Stage,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Decoupled weight decay applied every step.
    pub lr_decay: f64,
    pub momentum: f64,
    pub freeze: FreezePolicy,
    pub regularizer: Regularizer,
    pub weights: LossWeights,
    /// Epochs between validation evaluations (fine-tuning only).
    pub eval_every: usize,
    pub seed: u64,
}

impl StageConfig {
    /// Base training: 50 epochs, nothing frozen.
    pub fn base() -> Self {
        Self {
            stage: Stage::Base,
            epochs: 50,
            batch_size: 16,
            lr: 0.01,
            lr_decay: 1e-5,
            momentum: 0.9,
            freeze: FreezePolicy::None,
            regularizer: Regularizer::None,
            weights: LossWeights::default(),
            eval_every: 10,
            seed: 0,
        }
    }

    /// Fine-tuning: 1000 epochs with a frozen backbone.
    pub fn finetune() -> Self {
        Self {
            stage: Stage::FineTune,
            epochs: 1000,
            freeze: FreezePolicy::FreezeBackbone,
            ..Self::base()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be at least 1".into()));
        }
        if !(self.lr_decay.is_finite() && self.lr_decay >= 0.0) {
            return Err(Error::Config("lr_decay must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must lie in [0, 1)".into()));
        }
        self.weights.validate().map_err(|e| Error::Config(e.to_string()))
    }

    fn sgd(&self) -> SgdConfig {
        SgdConfig {
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.lr_decay,
        }
    }
}

/// What base training does with novel-class pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NovelPixels {
    #[default]
    Background,
    Ignore,
}

/// Dataset class to output index translation.
///
/// Base training outputs are `[background, sorted C_b without background]`;
/// fine-tuning appends the sorted novel classes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassMapping {
    output_classes: Vec<usize>,
    table: Vec<Option<u32>>,
    ignore: u8,
}

impl ClassMapping {
    pub fn stage1(fold: &FoldSpec, ignore: u8, novel: NovelPixels) -> Self {
        let mut m = Self::from_outputs(base_outputs(fold), ignore);
        for &c in &fold.novel_classes {
            m.table[c] = Some(match novel {
                NovelPixels::Background => 0,
                NovelPixels::Ignore => ignore as u32,
            });
        }
        m
    }

    pub fn stage2(fold: &FoldSpec, ignore: u8) -> Self {
        let mut outputs = base_outputs(fold);
        outputs.extend(&fold.novel_classes);
        Self::from_outputs(outputs, ignore)
    }

    fn from_outputs(output_classes: Vec<usize>, ignore: u8) -> Self {
        let mut table = vec![None; 256];
        for (k, &c) in output_classes.iter().enumerate() {
            table[c] = Some(k as u32);
        }
        table[ignore as usize] = Some(ignore as u32);
        Self {
            output_classes,
            table,
            ignore,
        }
    }

    /// Dataset class of each output channel.
    pub fn output_classes(&self) -> &[usize] {
        &self.output_classes
    }

    pub fn num_outputs(&self) -> usize {
        self.output_classes.len()
    }

    pub fn ignore(&self) -> u8 {
        self.ignore
    }

    /// Output-index labels for a dataset label grid.
    pub fn encode(&self, labels: &Array2<u8>) -> Result<Vec<u32>> {
        labels
            .iter()
            .map(|&v| self.table[v as usize].ok_or_else(|| domain(format!("label {v} is not a class of this fold"))))
            .collect()
    }
}

fn base_outputs(fold: &FoldSpec) -> Vec<usize> {
    let mut out = vec![0];
    out.extend(fold.base_classes.iter().copied().filter(|&c| c != 0));
    out
}

/// Images and encoded labels of a training set.
struct Prepared {
    images: Tensor,
    labels: Vec<u32>,
    n: usize,
    h: usize,
    w: usize,
    ignore: u32,
}

impl Prepared {
    fn new(samples: &[SegmentationSample], mapping: &ClassMapping) -> Result<Self> {
        let images = images_to_tensor(samples)?;
        let (n, _, h, w) = images.dims4()?;
        let mut labels = Vec::with_capacity(n * h * w);
        for s in samples {
            labels.extend(mapping.encode(&s.labels)?);
        }
        Ok(Self {
            images,
            labels,
            n,
            h,
            w,
            ignore: mapping.ignore() as u32,
        })
    }

    fn labels(&self, idx: &[usize]) -> Result<LabelBatch> {
        let plane = self.h * self.w;
        let mut data = Vec::with_capacity(idx.len() * plane);
        for &i in idx {
            data.extend_from_slice(&self.labels[i * plane..(i + 1) * plane]);
        }
        LabelBatch::new(data, idx.len(), self.h, self.w, self.ignore)
    }
}

fn select(t: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let ids: Vec<u32> = idx.iter().map(|&i| i as u32).collect();
    let ids = Tensor::from_vec(ids, idx.len(), &Device::Cpu)?;
    Ok(t.index_select(&ids, 0)?)
}

/// Activations that stay fixed under the freeze policy, computed once.
enum FrozenCache {
    None,
    Backbone(Tensor),
    Penultimate(Tensor),
}

impl FrozenCache {
    fn build(net: &Network, data: &Prepared, policy: FreezePolicy, batch: usize) -> Result<Self> {
        if matches!(policy, FreezePolicy::None) {
            return Ok(Self::None);
        }
        let mut feats = Vec::new();
        for start in (0..data.n).step_by(batch) {
            let idx: Vec<usize> = (start..(start + batch).min(data.n)).collect();
            let x = select(&data.images, &idx)?;
            let f = net.backbone(&x, Mode::Eval)?.features;
            feats.push(match policy {
                FreezePolicy::FreezeAllButLast => net.classifier(&f, (data.h, data.w), Mode::Eval)?.0,
                _ => f,
            });
        }
        let all = Tensor::cat(&feats, 0)?.detach();
        Ok(match policy {
            FreezePolicy::FreezeAllButLast => Self::Penultimate(all),
            _ => Self::Backbone(all),
        })
    }
}

struct StepOutput {
    logits: Tensor,
    penultimate: Tensor,
    aux: Option<Tensor>,
}

fn forward_step(
    net: &Network,
    data: &Prepared,
    cache: &FrozenCache,
    idx: &[usize],
    policy: FreezePolicy,
) -> Result<StepOutput> {
    let mode = Mode::Train(policy);
    let size = (data.h, data.w);
    Ok(match cache {
        FrozenCache::None => {
            let out = net.forward(&select(&data.images, idx)?, mode)?;
            StepOutput {
                logits: out.logits,
                penultimate: out.penultimate,
                aux: out.aux_logits,
            }
        }
        FrozenCache::Backbone(f) => {
            let (penultimate, logits) = net.classifier(&select(f, idx)?, size, mode)?;
            StepOutput {
                logits,
                penultimate,
                aux: None,
            }
        }
        FrozenCache::Penultimate(p) => {
            let penultimate = select(p, idx)?;
            StepOutput {
                logits: net.final_logits(&penultimate, size)?,
                penultimate,
                aux: None,
            }
        }
    })
}

/// Runs the epochs of one stage. `evaluator` is called on the schedule of
/// `config.eval_every` and after the last epoch; the best snapshot by total
/// mIoU (first one wins ties) is restored at the end.
fn run_stage(
    net: &Network,
    data: &Prepared,
    config: &StageConfig,
    mut evaluator: Option<&mut Evaluator<'_>>,
) -> Result<TrainRecord> {
    config.validate()?;
    if data.n == 0 {
        return Err(domain("empty training set"));
    }
    let policy = config.freeze;
    let trainable: Vec<_> = net.apply_freeze(policy).into_iter().map(|(_, v)| v).collect();
    let mut opt = Sgd::new(trainable, config.sgd())?;
    let cache = FrozenCache::build(net, data, policy, config.batch_size)?;
    let use_aux = config.stage == Stage::Base && config.weights.lambda_aux > 0.0;
    let classes: Vec<u32> = (0..net.num_outputs() as u32).collect();

    let mut order_rng = seed::rng(config.seed, "order");
    let mut reg_rng = seed::rng(config.seed, "regularizer");
    let mut order: Vec<usize> = (0..data.n).collect();
    let mut record = TrainRecord::new(config.stage);
    let mut best: Option<(f64, BTreeMap<String, Tensor>)> = None;

    for epoch in 1..=config.epochs {
        order.shuffle(&mut order_rng);
        let mut sums: BTreeMap<String, f64> = BTreeMap::new();
        let mut steps = 0usize;
        for (step, idx) in order.chunks(config.batch_size).enumerate() {
            let out = forward_step(net, data, &cache, idx, policy)?;
            let labels = data.labels(idx)?;
            let main = masked_cross_entropy(&out.logits, &labels)?;
            let mut parts = vec![("main", main.clone())];
            let mut total = main;
            if let (true, Some(aux)) = (use_aux, &out.aux) {
                let aux = masked_cross_entropy(aux, &labels)?;
                total = (total + (&aux * config.weights.lambda_aux)?)?;
                parts.push(("aux", aux));
            }
            if config.regularizer != Regularizer::None {
                let set = sample_triplets(
                    &out.penultimate,
                    &labels,
                    &classes,
                    config.weights.tau,
                    reg_rng.next_u64(),
                )?;
                let feats = flatten_features(&out.penultimate)?;
                let (name, term) = match config.regularizer {
                    Regularizer::Triplet => ("triplet", triplet_term(&feats, &set, config.weights.margin)?),
                    _ => ("cosine", cosine_term(&feats, &set)?),
                };
                total = (total + (&term * config.weights.lambda_triplet(config.stage))?)?;
                parts.push((name, term));
            }
            let mut values = BTreeMap::new();
            for (name, t) in &parts {
                values.insert(name.to_string(), scalar(t)?);
            }
            let total_v = scalar(&total)?;
            values.insert("total".into(), total_v);
            if !values.values().all(|v| v.is_finite()) {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    components: values,
                });
            }
            opt.backward_step(&total)?;
            for (k, v) in values {
                *sums.entry(k).or_default() += v;
            }
            steps += 1;
        }
        let mut components: BTreeMap<String, f64> = sums.into_iter().map(|(k, v)| (k, v / steps as f64)).collect();
        let loss = components.remove("total").unwrap_or_default();
        record.epochs.push(EpochRecord {
            epoch,
            loss,
            components,
            lr: config.lr,
        });

        if let Some(eval) = evaluator.as_deref_mut() {
            if epoch % config.eval_every == 0 || epoch == config.epochs {
                let report = eval(net)?;
                let total = report.total_miou;
                record.evaluations.push(EvalSnapshot { epoch, report });
                if best.as_ref().is_none_or(|(b, _)| total > *b) {
                    best = Some((total, net.state()?));
                    record.best = Some(BestSnapshot {
                        epoch,
                        total_miou: total,
                        checkpoint: None,
                    });
                }
            }
        }
    }
    if let Some((_, state)) = best {
        net.load_state(&state)?;
    }
    Ok(record)
}

/// Base training on `samples` with labels translated by `mapping`.
pub fn train_stage1(
    network: Network,
    samples: &[SegmentationSample],
    mapping: &ClassMapping,
    config: &StageConfig,
) -> Result<(Network, TrainRecord)> {
    if config.stage != Stage::Base {
        return Err(Error::Config("train_stage1 needs a base-stage config".into()));
    }
    if network.num_outputs() != mapping.num_outputs() {
        return Err(domain(format!(
            "network has {} outputs, base classes need {}",
            network.num_outputs(),
            mapping.num_outputs()
        )));
    }
    let data = Prepared::new(samples, mapping)?;
    let record = run_stage(&network, &data, config, None)?;
    Ok((network, record))
}

/// Fine-tuning on the episode support set, evaluating on the episode
/// evaluation set in generalized mode.
pub fn train_stage2(
    network: Network,
    episode: &Episode,
    fold: &FoldSpec,
    ignore: u8,
    config: &StageConfig,
) -> Result<(Network, TrainRecord)> {
    let mapping = ClassMapping::stage2(fold, ignore);
    let outputs = mapping.output_classes().to_vec();
    let batch = config.batch_size;
    let mut eval = |net: &Network| {
        evaluate(
            net,
            &episode.eval_set,
            fold,
            &outputs,
            EvalMode::Generalized,
            episode.shots,
            ignore,
            batch,
        )
    };
    train_stage2_with(network, episode, fold, ignore, config, &mut eval)
}

/// Fine-tuning with a caller-supplied evaluator.
pub fn train_stage2_with(
    network: Network,
    episode: &Episode,
    fold: &FoldSpec,
    ignore: u8,
    config: &StageConfig,
    evaluator: &mut Evaluator<'_>,
) -> Result<(Network, TrainRecord)> {
    if config.stage != Stage::FineTune {
        return Err(Error::Config("train_stage2 needs a fine-tuning config".into()));
    }
    if episode.support.is_empty() {
        return Err(domain("episode has an empty support set"));
    }
    let mapping = ClassMapping::stage2(fold, ignore);
    if network.num_outputs() != mapping.num_outputs() {
        return Err(domain(format!(
            "network has {} outputs, fold needs {}",
            network.num_outputs(),
            mapping.num_outputs()
        )));
    }
    let data = Prepared::new(&episode.support, &mapping)?;
    let record = run_stage(&network, &data, config, Some(evaluator))?;
    Ok((network, record))
}
