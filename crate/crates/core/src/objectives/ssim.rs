//! Differentiable SSIM and multi-scale SSIM on `B × C × H × W` tensors.
//!
//! Local statistics use an 11-tap Gaussian window (σ = 1.5) applied
//! separably over the valid region only, so no padding enters the
//! statistics.

use candle_core::Tensor;

use crate::error::{Error, Result};

pub const WINDOW: usize = 11;
pub const SIGMA: f64 = 1.5;
pub const C1: f64 = 0.01 * 0.01;
pub const C2: f64 = 0.03 * 0.03;
pub const MS_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

/// Normalized 1D Gaussian taps.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let center = (size as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - center;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let sum: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / sum).collect()
}

fn filter_axis(x: &Tensor, taps: &[f64], dim: usize) -> Result<Tensor> {
    let len = x.dim(dim)? + 1 - taps.len();
    let mut acc = (x.narrow(dim, 0, len)? * taps[0])?;
    for (k, &t) in taps.iter().enumerate().skip(1) {
        acc = (acc + (x.narrow(dim, k, len)? * t)?)?;
    }
    Ok(acc)
}

fn blur(x: &Tensor, taps: &[f64]) -> Result<Tensor> {
    filter_axis(&filter_axis(x, taps, 3)?, taps, 2)
}

/// Spatial means of the SSIM and contrast-structure maps, each `B × C`.
pub fn ssim_and_cs(x: &Tensor, y: &Tensor) -> Result<(Tensor, Tensor)> {
    if x.dims() != y.dims() {
        return Err(Error::Input(format!(
            "ssim shape mismatch {:?} vs {:?}",
            x.dims(),
            y.dims()
        )));
    }
    let (_, _, h, w) = x.dims4()?;
    if h < WINDOW || w < WINDOW {
        return Err(Error::Input(format!(
            "image {h}x{w} is smaller than the {WINDOW}x{WINDOW} SSIM window"
        )));
    }
    let taps = gaussian_taps(WINDOW, SIGMA);
    let mu_x = blur(x, &taps)?;
    let mu_y = blur(y, &taps)?;
    let mu_xx = mu_x.sqr()?;
    let mu_yy = mu_y.sqr()?;
    let mu_xy = (&mu_x * &mu_y)?;
    let s_xx = (blur(&x.sqr()?, &taps)? - &mu_xx)?;
    let s_yy = (blur(&y.sqr()?, &taps)? - &mu_yy)?;
    let s_xy = (blur(&(x * y)?, &taps)? - &mu_xy)?;

    let cs_map = (((s_xy * 2.0)? + C2)? / ((s_xx + s_yy)? + C2)?)?;
    let l_map = (((mu_xy * 2.0)? + C1)? / ((mu_xx + mu_yy)? + C1)?)?;
    let ssim_map = (l_map * &cs_map)?;
    Ok((ssim_map.mean(3)?.mean(2)?, cs_map.mean(3)?.mean(2)?))
}

/// Number of dyadic scales whose window still fits, capped at 5.
pub fn feasible_scales(h: usize, w: usize) -> usize {
    let mut scales = 0;
    let (mut h, mut w) = (h, w);
    while scales < MS_WEIGHTS.len() && h >= WINDOW && w >= WINDOW {
        scales += 1;
        h /= 2;
        w /= 2;
    }
    scales
}

/// Weights for `scales` levels, renormalized to sum to one.
pub fn scale_weights(scales: usize) -> Vec<f64> {
    let w = &MS_WEIGHTS[..scales];
    let sum: f64 = w.iter().sum();
    w.iter().map(|v| v / sum).collect()
}

/// Mean MS-SSIM over batch and channels, as a scalar tensor.
///
/// Uses as many of the five scales as the image size allows; negative
/// per-scale terms are clamped to a small positive floor before the
/// fractional powers.
pub fn ms_ssim(x: &Tensor, y: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    let scales = feasible_scales(h, w);
    if scales == 0 {
        return Err(Error::Input(format!(
            "image {h}x{w} is smaller than the {WINDOW}x{WINDOW} SSIM window"
        )));
    }
    let weights = scale_weights(scales);
    let mut x = x.clone();
    let mut y = y.clone();
    let mut acc: Option<Tensor> = None;
    for (j, &wj) in weights.iter().enumerate() {
        let (ssim, cs) = ssim_and_cs(&x, &y)?;
        let term = if j + 1 == scales { ssim } else { cs };
        let term = term.maximum(1e-8)?.powf(wj)?;
        acc = Some(match acc {
            Some(a) => (a * term)?,
            None => term,
        });
        if j + 1 < scales {
            x = x.avg_pool2d(2)?;
            y = y.avg_pool2d(2)?;
        }
    }
    Ok(acc.expect("at least one scale").mean_all()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn taps_are_normalized_and_symmetric() {
        let t = gaussian_taps(WINDOW, SIGMA);
        assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        for i in 0..WINDOW {
            assert_eq!(t[i], t[WINDOW - 1 - i]);
        }
    }

    #[test]
    fn scale_count_follows_size() {
        assert_eq!(feasible_scales(176, 176), 5);
        assert_eq!(feasible_scales(256, 256), 5);
        assert_eq!(feasible_scales(128, 128), 4);
        assert_eq!(feasible_scales(16, 16), 1);
        assert_eq!(feasible_scales(10, 64), 0);
        let w = scale_weights(4);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn constant_pair_matches_closed_form() {
        let (a, b) = (0.3f64, 0.4f64);
        let x = Tensor::full(a, (1, 3, 16, 16), &Device::Cpu).unwrap();
        let y = Tensor::full(b, (1, 3, 16, 16), &Device::Cpu).unwrap();
        let got = ms_ssim(&x, &y).unwrap().to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap();
        let want = (2.0 * a * b + C1) / (a * a + b * b + C1);
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }

    #[test]
    fn too_small_is_an_error() {
        let x = Tensor::zeros((1, 3, 8, 32), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(ms_ssim(&x, &x), Err(Error::Input(_))));
    }
}
