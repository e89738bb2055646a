//! Training objectives.
//!
//! All losses are built from differentiable tensor operations and work in
//! any float dtype; the network trains in `f32` while gradient checks run in
//! `f64`.

mod cosine;
mod triplet;

pub use cosine::{cosine_contrastive_loss, cosine_term};
pub use triplet::{
    build_triplet_set, downsample_labels_nearest, flatten_features, sample_triplets, triplet_distance, triplet_loss,
    triplet_term, ClassTriplets, Triplet, TripletSet,
};

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};

/// Loss weights and triplet sampling constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_aux: f64,
    pub lambda_triplet_base: f64,
    pub lambda_triplet_ft: f64,
    /// Triplet margin.
    pub margin: f64,
    /// Per-class cap on sampled triplets.
    pub tau: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_aux: 0.4,
            lambda_triplet_base: 0.5,
            lambda_triplet_ft: 1.0,
            margin: 1.0,
            tau: 50,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let finite_nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if !(finite_nonneg(self.lambda_aux)
            && finite_nonneg(self.lambda_triplet_base)
            && finite_nonneg(self.lambda_triplet_ft))
        {
            return Err(domain("loss weights must be finite and non-negative"));
        }
        if !(self.margin.is_finite() && self.margin > 0.0) {
            return Err(domain("triplet margin must be positive"));
        }
        if self.tau == 0 {
            return Err(domain("tau must be at least 1"));
        }
        Ok(())
    }

    pub fn lambda_triplet(&self, stage: Stage) -> f64 {
        match stage {
            Stage::Base => self.lambda_triplet_base,
            Stage::FineTune => self.lambda_triplet_ft,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Base,
    #[serde(alias = "finetune")]
    FineTune,
}

/// A batch of label grids in output-index space.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelBatch {
    /// Row-major `batch x height x width`.
    pub data: Vec<u32>,
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub ignore: u32,
}

impl LabelBatch {
    pub fn new(data: Vec<u32>, batch: usize, height: usize, width: usize, ignore: u32) -> Result<Self> {
        if data.len() != batch * height * width {
            return Err(domain(format!(
                "label buffer has {} entries, expected {batch}x{height}x{width}",
                data.len()
            )));
        }
        Ok(Self {
            data,
            batch,
            height,
            width,
            ignore,
        })
    }

    pub fn valid_count(&self) -> usize {
        self.data.iter().filter(|&&v| v != self.ignore).count()
    }
}

/// Numerically stable log-softmax along `dim`.
pub fn log_softmax(x: &Tensor, dim: usize) -> Result<Tensor> {
    let max = x.max_keepdim(dim)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(dim)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

/// Mean negative log-likelihood of the true class over non-ignore pixels.
///
/// `logits` is `B x C x H x W`. Ignore pixels contribute neither value nor
/// gradient; a batch with no valid pixel yields zero.
pub fn masked_cross_entropy(logits: &Tensor, labels: &LabelBatch) -> Result<Tensor> {
    let (b, c, h, w) = logits.dims4()?;
    if (b, h, w) != (labels.batch, labels.height, labels.width) {
        return Err(domain(format!(
            "logits {b}x{c}x{h}x{w} do not match labels {}x{}x{}",
            labels.batch, labels.height, labels.width
        )));
    }
    let mut idx = Vec::with_capacity(labels.data.len());
    let mut mask = Vec::with_capacity(labels.data.len());
    for &v in &labels.data {
        if v == labels.ignore {
            idx.push(0u32);
            mask.push(0f32);
        } else if (v as usize) >= c {
            return Err(domain(format!("label {v} outside the {c} logit channels")));
        } else {
            idx.push(v);
            mask.push(1.0);
        }
    }
    let count = labels.valid_count();
    let dev = logits.device();
    let idx = Tensor::from_vec(idx, (b, 1, h, w), dev)?;
    let mask = Tensor::from_vec(mask, (b, 1, h, w), dev)?.to_dtype(logits.dtype())?;
    let picked = log_softmax(logits, 1)?.gather(&idx, 1)?;
    let total = (picked * mask)?.sum_all()?;
    Ok((total * (-1.0 / count.max(1) as f64))?)
}

/// `main + lambda_aux * aux`.
pub fn stage1_loss(main: &Tensor, aux: &Tensor, weights: &LossWeights) -> Result<Tensor> {
    Ok((main + (aux * weights.lambda_aux)?)?)
}

/// Fine-tuning uses the main term only.
pub fn stage2_loss(main: &Tensor) -> Tensor {
    main.clone()
}

/// Composite objective with a regularization term.
///
/// Base training adds `lambda_aux * aux + lambda_triplet_base * reg`;
/// fine-tuning adds `lambda_triplet_ft * reg` and rejects an auxiliary term.
pub fn stage_loss_with_triplet(
    main: &Tensor,
    aux: Option<&Tensor>,
    triplet: &Tensor,
    weights: &LossWeights,
    stage: Stage,
) -> Result<Tensor> {
    let reg = (triplet * weights.lambda_triplet(stage))?;
    match (stage, aux) {
        (Stage::Base, Some(aux)) => Ok((stage1_loss(main, aux, weights)? + reg)?),
        (Stage::Base, None) => Ok((main + reg)?),
        (Stage::FineTune, None) => Ok((stage2_loss(main) + reg)?),
        (Stage::FineTune, Some(_)) => Err(domain("fine-tuning loss must not include an auxiliary term")),
    }
}

pub(crate) fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Row-wise argmax with ties resolved to the lowest index, over the class
/// axis of a `B x C x H x W` buffer.
pub(crate) fn argmax_classes(logits: &Tensor) -> Result<(Vec<u32>, usize)> {
    let (b, c, h, w) = logits.dims4()?;
    let v: Vec<f32> = logits.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
    let plane = h * w;
    let mut out = vec![0u32; b * plane];
    for bi in 0..b {
        for p in 0..plane {
            let mut best = 0usize;
            let mut best_v = v[bi * c * plane + p];
            for k in 1..c {
                let x = v[(bi * c + k) * plane + p];
                if x > best_v {
                    best = k;
                    best_v = x;
                }
            }
            out[bi * plane + p] = best as u32;
        }
    }
    Ok((out, c))
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn t(v: f64) -> Tensor {
        Tensor::new(v, &Device::Cpu).unwrap()
    }

    #[test]
    fn defaults() {
        let w = LossWeights::default();
        assert_eq!(
            (w.lambda_aux, w.lambda_triplet_base, w.lambda_triplet_ft),
            (0.4, 0.5, 1.0)
        );
        assert_eq!((w.margin, w.tau), (1.0, 50));
        assert!(w.validate().is_ok());
        assert!(LossWeights { margin: 0.0, ..w }.validate().is_err());
    }

    #[test]
    fn composites() {
        let w = LossWeights::default();
        let v = scalar(&stage1_loss(&t(1.0), &t(0.5), &w).unwrap()).unwrap();
        assert!((v - 1.2).abs() < 1e-12);
        let w0 = LossWeights { lambda_aux: 0.0, ..w };
        assert_eq!(scalar(&stage1_loss(&t(1.0), &t(0.5), &w0).unwrap()).unwrap(), 1.0);
        assert_eq!(scalar(&stage2_loss(&t(0.7))).unwrap(), 0.7);

        let b = stage_loss_with_triplet(&t(1.0), Some(&t(0.5)), &t(0.2), &w, Stage::Base).unwrap();
        assert!((scalar(&b).unwrap() - 1.3).abs() < 1e-12);
        let f = stage_loss_with_triplet(&t(1.0), None, &t(0.2), &w, Stage::FineTune).unwrap();
        assert!((scalar(&f).unwrap() - 1.2).abs() < 1e-12);
        assert!(stage_loss_with_triplet(&t(1.0), Some(&t(0.5)), &t(0.2), &w, Stage::FineTune).is_err());

        let z = LossWeights {
            lambda_triplet_base: 0.0,
            lambda_triplet_ft: 0.0,
            ..w
        };
        let b0 = stage_loss_with_triplet(&t(1.0), Some(&t(0.5)), &t(0.2), &z, Stage::Base).unwrap();
        assert_eq!(
            scalar(&b0).unwrap(),
            scalar(&stage1_loss(&t(1.0), &t(0.5), &z).unwrap()).unwrap()
        );
        let f0 = stage_loss_with_triplet(&t(1.0), None, &t(0.2), &z, Stage::FineTune).unwrap();
        assert_eq!(scalar(&f0).unwrap(), 1.0);
    }

    #[test]
    fn uniform_logits_give_log_c() {
        let logits = Tensor::zeros((2, 5, 3, 3), DType::F64, &Device::Cpu).unwrap();
        let labels = LabelBatch::new((0..18).map(|i| i % 5).collect(), 2, 3, 3, 255).unwrap();
        let v = scalar(&masked_cross_entropy(&logits, &labels).unwrap()).unwrap();
        assert!((v - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn dominant_true_class_gives_zero() {
        let mut data = vec![0f64; 3 * 4];
        for p in 0..4 {
            data[4 + p] = 1e4; // class 1 everywhere
        }
        let logits = Tensor::from_vec(data, (1, 3, 2, 2), &Device::Cpu).unwrap();
        let labels = LabelBatch::new(vec![1; 4], 1, 2, 2, 255).unwrap();
        let v = scalar(&masked_cross_entropy(&logits, &labels).unwrap()).unwrap();
        assert!(v.abs() < 1e-12);
    }

    #[test]
    fn all_ignore_is_zero_with_zero_gradient() {
        let logits = candle_core::Var::from_vec(vec![0.3f64; 2 * 3 * 2 * 2], (2, 3, 2, 2), &Device::Cpu).unwrap();
        let labels = LabelBatch::new(vec![255; 8], 2, 2, 2, 255).unwrap();
        let loss = masked_cross_entropy(logits.as_tensor(), &labels).unwrap();
        assert_eq!(scalar(&loss).unwrap(), 0.0);
        let g = loss.backward().unwrap();
        let grad: Vec<f64> = g.get(&logits).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert!(grad.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn out_of_range_label() {
        let logits = Tensor::zeros((1, 3, 1, 2), DType::F32, &Device::Cpu).unwrap();
        let labels = LabelBatch::new(vec![1, 3], 1, 1, 2, 255).unwrap();
        assert!(masked_cross_entropy(&logits, &labels).is_err());
    }

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        let logits = Tensor::from_vec(vec![1f32, 2.0, 1.0, 2.0, 0.5, 0.0], (1, 3, 1, 2), &Device::Cpu).unwrap();
        let (am, c) = argmax_classes(&logits).unwrap();
        assert_eq!(c, 3);
        assert_eq!(am, vec![0, 0]);
    }
}
