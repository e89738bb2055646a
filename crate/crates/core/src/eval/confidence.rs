//! Softmax confidence of correct novel-class predictions.

use std::io::Write;
use std::path::Path;

use candle_core::DType;
use rand::seq::index;
use serde::{Deserialize, Serialize};

use super::eval_logits;
use crate::data::{FoldSpec, SegmentationSample};
use crate::error::{domain, Result};
use crate::model::Network;
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quartiles {
    pub mean: f64,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceStats {
    /// Scores kept after subsampling.
    pub n: usize,
    /// Correct novel pixels before subsampling.
    pub population: usize,
    /// Undefined when `n == 0`.
    pub summary: Option<Quartiles>,
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Subsamples `scores` to at most `cap` entries without replacement and
/// summarizes them.
pub fn confidence_from_scores(scores: &[f64], cap: usize, seed: u64) -> ConfidenceStats {
    let population = scores.len();
    let mut kept: Vec<f64> = if population > cap {
        let mut rng = seed::rng(seed, "confidence");
        let mut idx = index::sample(&mut rng, population, cap).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| scores[i]).collect()
    } else {
        scores.to_vec()
    };
    kept.sort_by(f64::total_cmp);
    let summary = (!kept.is_empty()).then(|| Quartiles {
        mean: kept.iter().sum::<f64>() / kept.len() as f64,
        min: kept[0],
        q1: quantile(&kept, 0.25),
        median: quantile(&kept, 0.5),
        q3: quantile(&kept, 0.75),
        max: kept[kept.len() - 1],
    });
    ConfidenceStats {
        n: kept.len(),
        population,
        summary,
    }
}

/// Collects the softmax probability of the predicted class at every pixel
/// where the prediction is correct and the true class is novel.
#[allow(clippy::too_many_arguments)]
pub fn confidence_analysis(
    network: &Network,
    eval_set: &[SegmentationSample],
    fold: &FoldSpec,
    output_classes: &[usize],
    ignore: u8,
    sample_cap: usize,
    seed: u64,
    batch_size: usize,
) -> Result<ConfidenceStats> {
    if output_classes.len() != network.num_outputs() {
        return Err(domain("output class list does not match the network"));
    }
    let mut scores = Vec::new();
    for chunk in eval_set.chunks(batch_size.max(1)) {
        let logits = eval_logits(network, chunk)?;
        let (n, _, h, w) = logits.dims4()?;
        let probs = candle_core::Tensor::exp(&crate::loss::log_softmax(&logits, 1)?)?;
        let best = probs.max(1)?.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        let (am, _) = crate::loss::argmax_classes(&logits)?;
        for (i, sample) in chunk.iter().enumerate().take(n) {
            for (p, &gt) in sample.labels.iter().enumerate().take(h * w) {
                let k = i * h * w + p;
                let pred = output_classes[am[k] as usize];
                if gt != ignore && pred == gt as usize && fold.is_novel(pred) {
                    scores.push(best[k]);
                }
            }
        }
    }
    Ok(confidence_from_scores(&scores, sample_cap, seed))
}

/// Writes one row of plot data: `n,population,mean,min,q1,median,q3,max`.
pub fn write_confidence_csv(path: impl AsRef<Path>, label: &str, stats: &ConfidenceStats) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "label,n,population,mean,min,q1,median,q3,max")?;
    match &stats.summary {
        Some(q) => writeln!(
            f,
            "{label},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            stats.n, stats.population, q.mean, q.min, q.q1, q.median, q.q3, q.max
        )?,
        None => writeln!(f, "{label},0,{},,,,,,", stats.population)?,
    }
    Ok(())
}
