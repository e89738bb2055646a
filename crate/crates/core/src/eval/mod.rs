//! Generalized evaluation: per-class IoU, base / novel / total mIoU,
//! cross-fold averaging, confidence analysis and shot-saturation tables.

mod confidence;
mod summary;

pub use confidence::{confidence_analysis, confidence_from_scores, write_confidence_csv, ConfidenceStats, Quartiles};
pub use summary::{
    cross_fold_average, gfs_seg_reference, saturation_summary, CrossFoldSummary, FoldRow, ReferenceDataset,
    ReferenceRow, SaturationRow, SaturationTable,
};

use std::collections::BTreeMap;

use candle_core::Tensor;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::{remap_label_grid, EvalMode, FoldSpec, SegmentationSample};
use crate::error::{domain, Error, Result};
use crate::loss::argmax_classes;
use crate::model::{images_to_tensor, Mode, Network};

/// Per-class true-positive, false-positive and false-negative pixel counts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionAccumulator {
    pub tp: Vec<u64>,
    pub fp: Vec<u64>,
    pub fn_: Vec<u64>,
}

impl ConfusionAccumulator {
    /// Counts for class indices `0..num_classes`.
    pub fn new(num_classes: usize) -> Self {
        Self {
            tp: vec![0; num_classes],
            fp: vec![0; num_classes],
            fn_: vec![0; num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.tp.len()
    }

    /// Adds one prediction / ground-truth pair. Pixels whose ground truth is
    /// `ignore` are skipped.
    pub fn accumulate(&mut self, pred: &Array2<u8>, gt: &Array2<u8>, ignore: u8) -> Result<()> {
        if pred.dim() != gt.dim() {
            return Err(domain(format!(
                "prediction {:?} and ground truth {:?} differ in shape",
                pred.dim(),
                gt.dim()
            )));
        }
        let n = self.num_classes();
        for (&p, &g) in pred.iter().zip(gt) {
            if g == ignore {
                continue;
            }
            let (p, g) = (p as usize, g as usize);
            if p >= n || g >= n {
                return Err(domain(format!("class index {} outside 0..{n}", p.max(g))));
            }
            if p == g {
                self.tp[g] += 1;
            } else {
                self.fp[p] += 1;
                self.fn_[g] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionAccumulator) -> Result<()> {
        if other.num_classes() != self.num_classes() {
            return Err(domain("cannot merge accumulators of different sizes"));
        }
        for c in 0..self.num_classes() {
            self.tp[c] += other.tp[c];
            self.fp[c] += other.fp[c];
            self.fn_[c] += other.fn_[c];
        }
        Ok(())
    }

    /// `TP / (TP + FP + FN)`, or `None` when the denominator is zero.
    pub fn iou(&self, class: usize) -> Option<f64> {
        let denom = self.tp.get(class)? + self.fp[class] + self.fn_[class];
        (denom > 0).then(|| self.tp[class] as f64 / denom as f64)
    }
}

/// Metrics of one evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// IoU per evaluated class; `None` when the class is absent from both
    /// prediction and ground truth.
    pub per_class_iou: BTreeMap<usize, Option<f64>>,
    pub base_miou: Option<f64>,
    pub novel_miou: Option<f64>,
    pub total_miou: f64,
    pub fold_index: usize,
    pub shots: usize,
    pub mode: EvalMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence_stats: Option<ConfidenceStats>,
}

impl EvalReport {
    pub fn base(&self) -> f64 {
        self.base_miou.unwrap_or(f64::NAN)
    }

    pub fn novel(&self) -> f64 {
        self.novel_miou.unwrap_or(f64::NAN)
    }
}

/// Base and novel class sets scored by `mode`. Novel-only evaluation scores
/// background alongside the novel classes.
pub fn scored_classes(fold: &FoldSpec, mode: EvalMode) -> (Vec<usize>, Vec<usize>) {
    match mode {
        EvalMode::Generalized => (fold.base_classes.clone(), fold.novel_classes.clone()),
        EvalMode::NovelOnly => (vec![0], fold.novel_classes.clone()),
    }
}

fn mean_defined(ious: &BTreeMap<usize, Option<f64>>, classes: &[usize]) -> Option<f64> {
    let vals: Vec<f64> = classes.iter().filter_map(|c| ious.get(c).copied().flatten()).collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

/// Turns counts into a report. Means skip undefined classes; total mIoU is
/// the mean over the union of base and novel classes.
pub fn finalize(acc: &ConfusionAccumulator, fold: &FoldSpec, mode: EvalMode, shots: usize) -> Result<EvalReport> {
    let (base, novel) = scored_classes(fold, mode);
    let mut all: Vec<usize> = base.iter().chain(&novel).copied().collect();
    all.sort_unstable();
    let per_class_iou: BTreeMap<usize, Option<f64>> = all.iter().map(|&c| (c, acc.iou(c))).collect();
    let total_miou =
        mean_defined(&per_class_iou, &all).ok_or_else(|| Error::Eval("every evaluated class is undefined".into()))?;
    Ok(EvalReport {
        base_miou: mean_defined(&per_class_iou, &base),
        novel_miou: mean_defined(&per_class_iou, &novel),
        per_class_iou,
        total_miou,
        fold_index: fold.fold_index,
        shots,
        mode,
        confidence_stats: None,
    })
}

/// Predicted label maps in dataset class space. `output_classes[k]` is the
/// dataset class of output channel `k`.
pub fn predict(
    network: &Network,
    samples: &[SegmentationSample],
    output_classes: &[usize],
    batch_size: usize,
) -> Result<Vec<Array2<u8>>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let logits = eval_logits(network, chunk)?;
        let (n, _, h, w) = logits.dims4()?;
        let (am, _) = argmax_classes(&logits)?;
        for i in 0..n {
            let grid: Vec<u8> = am[i * h * w..(i + 1) * h * w]
                .iter()
                .map(|&k| output_classes[k as usize] as u8)
                .collect();
            out.push(Array2::from_shape_vec((h, w), grid).map_err(|e| domain(e.to_string()))?);
        }
    }
    Ok(out)
}

pub(crate) fn eval_logits(network: &Network, chunk: &[SegmentationSample]) -> Result<Tensor> {
    let x = images_to_tensor(chunk)?;
    Ok(network.forward(&x, Mode::Eval)?.logits)
}

/// Evaluates `network` on `samples` under `mode`.
///
/// In novel-only mode both predictions and ground truth pass through the
/// novel-only remapping, so base predictions count as background.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    network: &Network,
    samples: &[SegmentationSample],
    fold: &FoldSpec,
    output_classes: &[usize],
    mode: EvalMode,
    shots: usize,
    ignore: u8,
    batch_size: usize,
) -> Result<EvalReport> {
    if output_classes.len() != network.num_outputs() {
        return Err(domain(format!(
            "{} output classes for a network with {} outputs",
            output_classes.len(),
            network.num_outputs()
        )));
    }
    let num = fold.all_classes().into_iter().max().unwrap_or(0) + 1;
    let mut acc = ConfusionAccumulator::new(num);
    let preds = predict(network, samples, output_classes, batch_size)?;
    for (pred, sample) in preds.iter().zip(samples) {
        let pred = remap_label_grid(pred, fold, mode, ignore);
        let gt = remap_label_grid(&sample.labels, fold, mode, ignore);
        acc.accumulate(&pred, &gt, ignore)?;
    }
    finalize(&acc, fold, mode, shots)
}
