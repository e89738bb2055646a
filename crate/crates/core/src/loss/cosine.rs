//! Cosine-similarity contrastive regularizer, a baseline alternative to the
//! triplet loss. It reuses the triplet sampler: (anchor, positive) pairs are
//! same-class pairs and (anchor, negative) pairs are cross-class pairs.
//!
//! `loss = mean(1 - cos(a, p)) + mean(max(0, cos(a, n)))`

use candle_core::Tensor;

use super::triplet::{index_rows, row_norm, sample_triplets};
use super::{LabelBatch, TripletSet};
use crate::error::Result;

/// Row-wise cosine similarity; rows with a zero norm have similarity 0.
fn row_cosine(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let dot = (a * b)?.sum(1)?;
    let denom = (row_norm(a)? * row_norm(b)?)?;
    let zero = denom.le(0.0)?.to_dtype(denom.dtype())?;
    Ok((dot / (denom + zero)?)?)
}

pub fn cosine_term(features: &Tensor, set: &TripletSet) -> Result<Tensor> {
    if set.is_empty() {
        return Ok((features.sum_all()? * 0.0)?);
    }
    let a = index_rows(features, set.iter().map(|t| t.anchor as u32).collect())?;
    let p = index_rows(features, set.iter().map(|t| t.positive as u32).collect())?;
    let n = index_rows(features, set.iter().map(|t| t.negative as u32).collect())?;
    let same = (1.0 - row_cosine(&a, &p)?)?.mean_all()?;
    let cross = row_cosine(&a, &n)?;
    let active = cross.gt(0.0)?.to_dtype(cross.dtype())?;
    let cross = (cross * active)?.mean_all()?;
    Ok((same + cross)?)
}

/// Samples pairs from `labels` at the resolution of `penultimate` and
/// evaluates [`cosine_term`].
pub fn cosine_contrastive_loss(
    penultimate: &Tensor,
    labels: &LabelBatch,
    classes: &[u32],
    tau: usize,
    seed: u64,
) -> Result<Tensor> {
    let set = sample_triplets(penultimate, labels, classes, tau, seed)?;
    cosine_term(&super::flatten_features(penultimate)?, &set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::{scalar, ClassTriplets, Triplet};
    use candle_core::Device;

    fn one(anchor: usize, positive: usize, negative: usize) -> TripletSet {
        TripletSet {
            tau: 1,
            classes: vec![ClassTriplets {
                class: 0,
                triplets: vec![Triplet {
                    anchor,
                    positive,
                    negative,
                }],
            }],
        }
    }

    #[test]
    fn optimum_is_zero() {
        let f = Tensor::from_vec(vec![1.0f64, 0.0, 2.0, 0.0, 0.0, 3.0], (3, 2), &Device::Cpu).unwrap();
        assert_eq!(scalar(&cosine_term(&f, &one(0, 1, 2)).unwrap()).unwrap(), 0.0);
    }

    #[test]
    fn anti_aligned_pair_costs_two() {
        let f = Tensor::from_vec(vec![1.0f64, 0.0, -1.0, 0.0, 0.0, 1.0], (3, 2), &Device::Cpu).unwrap();
        assert!((scalar(&cosine_term(&f, &one(0, 1, 2)).unwrap()).unwrap() - 2.0).abs() < 1e-12);
    }
}
