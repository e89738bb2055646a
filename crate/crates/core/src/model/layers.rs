//! Building blocks expressed with differentiable tensor primitives.
//!
//! Spatial resampling (bilinear upsampling, adaptive average pooling) is
//! written as a pair of small dense matrices applied along each spatial axis,
//! which keeps every operation on the autograd path.

use candle_core::{DType, Device, Tensor, Var};

use crate::error::Result;

pub(crate) const BN_EPS: f64 = 1e-5;
pub(crate) const BN_MOMENTUM: f64 = 0.1;

/// Row-stochastic `out x in` matrix for bilinear resampling along one axis,
/// with half-pixel centers (`align_corners = false`).
pub fn bilinear_matrix(input: usize, output: usize) -> Vec<f32> {
    let mut m = vec![0f32; output * input];
    let scale = input as f64 / output as f64;
    for o in 0..output {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(input - 1);
        let i1 = (i0 + 1).min(input - 1);
        let frac = (src - i0 as f64) as f32;
        m[o * input + i0] += 1.0 - frac;
        m[o * input + i1] += frac;
    }
    m
}

/// `out x in` matrix averaging the adaptive pooling bin of each output cell.
pub fn adaptive_pool_matrix(input: usize, output: usize) -> Vec<f32> {
    let mut m = vec![0f32; output * input];
    for o in 0..output {
        let start = o * input / output;
        let end = ((o + 1) * input).div_ceil(output);
        let weight = 1.0 / (end - start) as f32;
        for i in start..end {
            m[o * input + i] = weight;
        }
    }
    m
}

/// Applies `rows (H x h)` and `cols (W x w)` to the last two axes of `x`.
pub(crate) fn resample(x: &Tensor, rows: &[f32], cols: &[f32], out: (usize, usize)) -> Result<Tensor> {
    let (h, w) = x.dims4().map(|(_, _, h, w)| (h, w))?;
    let dev = x.device();
    let ry = Tensor::from_slice(rows, (out.0, h), dev)?.to_dtype(x.dtype())?;
    let rx = Tensor::from_slice(cols, (out.1, w), dev)?.to_dtype(x.dtype())?.t()?;
    let y = x.broadcast_matmul(&rx)?;
    Ok(ry.broadcast_matmul(&y)?)
}

pub(crate) fn upsample_bilinear(x: &Tensor, out: (usize, usize)) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if (h, w) == out {
        return Ok(x.clone());
    }
    resample(x, &bilinear_matrix(h, out.0), &bilinear_matrix(w, out.1), out)
}

pub(crate) fn adaptive_avg_pool(x: &Tensor, out: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    resample(
        x,
        &adaptive_pool_matrix(h, out),
        &adaptive_pool_matrix(w, out),
        (out, out),
    )
}

/// Batch normalization over `(batch, height, width)`.
///
/// In training mode batch statistics are used and the running buffers are
/// updated in place; otherwise the running buffers are used.
pub(crate) fn batch_norm(
    x: &Tensor,
    gamma: &Var,
    beta: &Var,
    running_mean: &Var,
    running_var: &Var,
    train: bool,
) -> Result<Tensor> {
    let c = gamma.dim(0)?;
    let (mean, var) = if train {
        let (b, _, h, w) = x.dims4()?;
        let mean = x.mean_keepdim((0, 2, 3))?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim((0, 2, 3))?;
        let n = (b * h * w) as f64;
        let unbiased = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
        let new_mean =
            ((running_mean.as_tensor().detach() * (1.0 - BN_MOMENTUM))? + (mean.detach().reshape(c)? * BN_MOMENTUM)?)?;
        let new_var = ((running_var.as_tensor().detach() * (1.0 - BN_MOMENTUM))?
            + (var.detach().reshape(c)? * (BN_MOMENTUM * unbiased))?)?;
        running_mean.set(&new_mean)?;
        running_var.set(&new_var)?;
        (mean, var)
    } else {
        (
            running_mean.as_detached_tensor().reshape((1, c, 1, 1))?,
            running_var.as_detached_tensor().reshape((1, c, 1, 1))?,
        )
    };
    let xhat = x.broadcast_sub(&mean)?.broadcast_div(&(var + BN_EPS)?.sqrt()?)?;
    let y = xhat
        .broadcast_mul(&gamma.as_tensor().reshape((1, c, 1, 1))?)?
        .broadcast_add(&beta.as_tensor().reshape((1, c, 1, 1))?)?;
    Ok(y)
}

pub(crate) fn zeros_var(n: usize) -> Result<Var> {
    Ok(Var::zeros(n, DType::F32, &Device::Cpu)?)
}

pub(crate) fn ones_var(n: usize) -> Result<Var> {
    Ok(Var::ones(n, DType::F32, &Device::Cpu)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bilinear_rows_sum_to_one() {
        for (i, o) in [(8, 64), (4, 8), (1, 5), (8, 8), (7, 3)] {
            let m = bilinear_matrix(i, o);
            for r in 0..o {
                let s: f32 = m[r * i..(r + 1) * i].iter().sum();
                assert!((s - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn bilinear_matches_half_pixel_convention() {
        // 2 -> 4: output centers map to -0.25, 0.25, 0.75, 1.25 (clamped)
        let m = bilinear_matrix(2, 4);
        assert_eq!(&m[0..2], &[1.0, 0.0]);
        assert_eq!(&m[2..4], &[0.75, 0.25]);
        assert_eq!(&m[4..6], &[0.25, 0.75]);
        assert_eq!(&m[6..8], &[0.0, 1.0]);
    }

    #[test]
    fn adaptive_pool_bins() {
        let m = adaptive_pool_matrix(8, 2);
        assert_eq!(&m[0..8], &[0.25, 0.25, 0.25, 0.25, 0.0, 0.0, 0.0, 0.0]);
        let m = adaptive_pool_matrix(5, 3);
        // bins [0,2), [1,4), [3,5)
        assert_eq!(&m[0..5], &[0.5, 0.5, 0.0, 0.0, 0.0]);
        assert!((m[5 + 1] - 1.0 / 3.0).abs() < 1e-7 && m[5] == 0.0);
        assert_eq!(&m[10..15], &[0.0, 0.0, 0.0, 0.5, 0.5]);
    }

    #[test]
    fn upsample_constant_stays_constant() {
        let x = Tensor::full(2.5f32, (1, 2, 4, 4), &Device::Cpu).unwrap();
        let y = upsample_bilinear(&x, (16, 12)).unwrap();
        assert_eq!(y.dims(), &[1, 2, 16, 12]);
        let v: Vec<f32> = y.flatten_all().unwrap().to_vec1().unwrap();
        assert!(v.iter().all(|&a| (a - 2.5).abs() < 1e-6));
    }
}
