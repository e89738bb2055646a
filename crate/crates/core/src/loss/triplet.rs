//! Triplet sampling on penultimate features and the hinge triplet loss.
//!
//! Feature locations are addressed by their index in the flattened
//! `(batch, y, x)` grid of the penultimate map. Labels reach that resolution
//! by nearest-neighbour downsampling.

use candle_core::Tensor;
use rand::seq::index;
use rand::seq::SliceRandom;

use super::LabelBatch;
use crate::error::{domain, Result};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassTriplets {
    pub class: u32,
    pub triplets: Vec<Triplet>,
}

/// Sampled triplets, grouped by class.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TripletSet {
    pub tau: usize,
    pub classes: Vec<ClassTriplets>,
}

impl TripletSet {
    pub fn len(&self) -> usize {
        self.classes.iter().map(|c| c.triplets.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = &Triplet> {
        self.classes.iter().flat_map(|c| c.triplets.iter())
    }
}

/// Nearest-neighbour downsampling: feature cell `(y, x)` takes the label of
/// the full-resolution pixel `(floor((y + 0.5) * H / h), floor((x + 0.5) * W / w))`.
pub fn downsample_labels_nearest(labels: &LabelBatch, height: usize, width: usize) -> LabelBatch {
    let mut data = Vec::with_capacity(labels.batch * height * width);
    let row = |y: usize| (((y as f64 + 0.5) * labels.height as f64 / height as f64) as usize).min(labels.height - 1);
    let col = |x: usize| (((x as f64 + 0.5) * labels.width as f64 / width as f64) as usize).min(labels.width - 1);
    for b in 0..labels.batch {
        for y in 0..height {
            let src = row(y);
            for x in 0..width {
                data.push(labels.data[(b * labels.height + src) * labels.width + col(x)]);
            }
        }
    }
    LabelBatch {
        data,
        batch: labels.batch,
        height,
        width,
        ignore: labels.ignore,
    }
}

/// Samples up to `tau` triplets for every class in `classes`.
///
/// `labels` must already be at feature resolution. For class `c` the positive
/// pool holds the locations labeled `c`; the negative pool holds every other
/// non-ignore location. Anchors and positives are disjoint draws from the
/// positive pool, so a class yields `min(tau, |pos| / 2, |neg|)` triplets.
/// Classes with fewer than two positive locations or no negative location
/// are skipped.
pub fn build_triplet_set(labels: &LabelBatch, classes: &[u32], tau: usize, seed: u64) -> TripletSet {
    let mut rng = seed::rng(seed, "triplets");
    let mut out = Vec::new();
    for &class in classes {
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        for (i, &v) in labels.data.iter().enumerate() {
            if v == class {
                pos.push(i);
            } else if v != labels.ignore {
                neg.push(i);
            }
        }
        if pos.len() < 2 || neg.is_empty() {
            continue;
        }
        let m = tau.min(pos.len() / 2).min(neg.len());
        let drawn = index::sample(&mut rng, pos.len(), 2 * m).into_vec();
        let anchors = &drawn[..m];
        let mut positives: Vec<usize> = drawn[m..].to_vec();
        let mut negatives = index::sample(&mut rng, neg.len(), m).into_vec();
        positives.shuffle(&mut rng);
        negatives.shuffle(&mut rng);
        let triplets = anchors
            .iter()
            .zip(&positives)
            .zip(&negatives)
            .map(|((&a, &p), &n)| Triplet {
                anchor: pos[a],
                positive: pos[p],
                negative: neg[n],
            })
            .collect();
        out.push(ClassTriplets { class, triplets });
    }
    TripletSet { tau, classes: out }
}

/// Downsamples full-resolution `labels` to the spatial size of `penultimate`
/// (`B x D x h x w`) and samples triplets there.
pub fn sample_triplets(
    penultimate: &Tensor,
    labels: &LabelBatch,
    classes: &[u32],
    tau: usize,
    seed: u64,
) -> Result<TripletSet> {
    let (b, _, h, w) = penultimate.dims4()?;
    if b != labels.batch {
        return Err(domain(format!("feature batch {b} != label batch {}", labels.batch)));
    }
    let small = downsample_labels_nearest(labels, h, w);
    Ok(build_triplet_set(&small, classes, tau, seed))
}

/// `B x D x h x w` features as a `(B*h*w) x D` matrix whose row order matches
/// the triplet indices.
pub fn flatten_features(penultimate: &Tensor) -> Result<Tensor> {
    let (b, d, h, w) = penultimate.dims4()?;
    Ok(penultimate.permute((0, 2, 3, 1))?.reshape((b * h * w, d))?)
}

/// Euclidean distance.
pub fn triplet_distance(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(domain(format!("dimension mismatch: {} vs {}", x.len(), y.len())));
    }
    Ok(x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
}

/// `max(0, d(a, p) - d(a, n) + margin)`.
pub fn triplet_loss(anchor: &[f64], positive: &[f64], negative: &[f64], margin: f64) -> Result<f64> {
    let ap = triplet_distance(anchor, positive)?;
    let an = triplet_distance(anchor, negative)?;
    Ok((ap - an + margin).max(0.0))
}

/// Row-wise Euclidean norm of `x` with a zero-safe gradient: rows with an
/// exactly zero norm get value 0 and gradient 0.
pub(crate) fn row_norm(x: &Tensor) -> Result<Tensor> {
    let sq = x.sqr()?.sum(1)?;
    let zero = sq.le(0.0)?.to_dtype(sq.dtype())?;
    Ok(((sq + &zero)?.sqrt()? - zero)?)
}

pub(crate) fn index_rows(features: &Tensor, rows: Vec<u32>) -> Result<Tensor> {
    let n = rows.len();
    let idx = Tensor::from_vec(rows, n, features.device())?;
    Ok(features.index_select(&idx, 0)?)
}

/// Mean hinge triplet loss over every triplet in `set`.
///
/// `features` is the `(N, D)` matrix from [`flatten_features`]. The hinge has
/// zero subgradient at its kink. An empty set yields zero.
pub fn triplet_term(features: &Tensor, set: &TripletSet, margin: f64) -> Result<Tensor> {
    if set.is_empty() {
        return Ok((features.sum_all()? * 0.0)?);
    }
    let a = index_rows(features, set.iter().map(|t| t.anchor as u32).collect())?;
    let p = index_rows(features, set.iter().map(|t| t.positive as u32).collect())?;
    let n = index_rows(features, set.iter().map(|t| t.negative as u32).collect())?;
    let d_ap = row_norm(&(&a - &p)?)?;
    let d_an = row_norm(&(&a - &n)?)?;
    let x = ((d_ap - d_an)? + margin)?;
    let active = x.gt(0.0)?.to_dtype(x.dtype())?;
    Ok((x * active)?.mean_all()?)
}
