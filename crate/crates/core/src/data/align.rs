//! Geometric alignment of a blurry/sharp pair.
//!
//! Keypoints are matched between the two views, a homography mapping
//! blurry-frame pixels to sharp-frame pixels is fitted with RANSAC, the
//! sharp image is resampled into the blurry frame, and both are cropped to
//! the largest axis-aligned rectangle where the warped sharp image is
//! defined. The blurry image itself is never resampled.

use log::warn;
use nalgebra::{DMatrix, Matrix3, Vector3};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::sift::{detect_and_describe, match_descriptors};
use crate::error::{Error, Result};
use crate::image::ImageTensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignConfig {
    pub ratio: f32,
    pub ransac_threshold: f64,
    pub ransac_iterations: usize,
    pub min_inliers: usize,
    /// Mean inlier error above which the result is flagged low-confidence.
    pub confidence_threshold: f64,
    pub seed: u64,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            ratio: 0.75,
            ransac_threshold: 3.0,
            ransac_iterations: 2000,
            min_inliers: 4,
            confidence_threshold: 1.0,
            seed: 0,
        }
    }
}

/// Axis-aligned rectangle in blurry-frame pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropWindow {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl CropWindow {
    pub fn area(&self) -> usize {
        self.height * self.width
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentResult {
    /// Row-major, maps blurry-frame `(x, y, 1)` to sharp-frame coordinates;
    /// `h[2][2] == 1`.
    pub homography: [[f64; 3]; 3],
    pub inlier_count: usize,
    pub match_count: usize,
    pub mean_reprojection_error: f64,
    /// Crop in the blurry frame; the warped sharp image shares it.
    pub crop_window: CropWindow,
    pub low_confidence: bool,
}

pub fn to_matrix(h: &[[f64; 3]; 3]) -> Matrix3<f64> {
    Matrix3::from_fn(|r, c| h[r][c])
}

pub fn from_matrix(m: &Matrix3<f64>) -> [[f64; 3]; 3] {
    let s = m[(2, 2)];
    std::array::from_fn(|r| std::array::from_fn(|c| m[(r, c)] / s))
}

/// Applies `h` to `(x, y)`; `None` if the point maps to infinity.
pub fn project(h: &Matrix3<f64>, x: f64, y: f64) -> Option<(f64, f64)> {
    let v = h * Vector3::new(x, y, 1.0);
    (v.z.abs() > 1e-12).then(|| (v.x / v.z, v.y / v.z))
}

/// Similarity transform moving the points' centroid to the origin with mean
/// distance √2 (conditioning for the DLT).
fn normalizer(pts: &[(f64, f64)]) -> Matrix3<f64> {
    let n = pts.len() as f64;
    let (cx, cy) = pts.iter().fold((0.0, 0.0), |a, p| (a.0 + p.0 / n, a.1 + p.1 / n));
    let mean_d = pts.iter().map(|p| ((p.0 - cx).powi(2) + (p.1 - cy).powi(2)).sqrt()).sum::<f64>() / n;
    let s = if mean_d > 1e-12 { std::f64::consts::SQRT_2 / mean_d } else { 1.0 };
    Matrix3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0)
}

/// Direct linear transform: least-squares `h` with `dst ~ h · src`.
pub fn fit_homography(src: &[(f64, f64)], dst: &[(f64, f64)]) -> Option<Matrix3<f64>> {
    if src.len() < 4 || src.len() != dst.len() {
        return None;
    }
    let ts = normalizer(src);
    let td = normalizer(dst);
    let rows = 2 * src.len();
    // Pad to at least 9 rows so the SVD yields a full 9×9 V.
    let mut a = DMatrix::<f64>::zeros(rows.max(9), 9);
    for (i, (s, d)) in src.iter().zip(dst).enumerate() {
        let p = ts * Vector3::new(s.0, s.1, 1.0);
        let q = td * Vector3::new(d.0, d.1, 1.0);
        let (x, y, u, v) = (p.x / p.z, p.y / p.z, q.x / q.z, q.y / q.z);
        let r0 = [-x, -y, -1.0, 0.0, 0.0, 0.0, u * x, u * y, u];
        let r1 = [0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v];
        for c in 0..9 {
            a[(2 * i, c)] = r0[c];
            a[(2 * i + 1, c)] = r1[c];
        }
    }
    let svd = a.svd(false, true);
    let vt = svd.v_t?;
    let (min_idx, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))?;
    let h = vt.row(min_idx);
    let hn = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8]);
    let full = td.try_inverse()? * hn * ts;
    if full[(2, 2)].abs() < 1e-12 || full.iter().any(|v| !v.is_finite()) {
        return None;
    }
    Some(full / full[(2, 2)])
}

fn transfer_error(h: &Matrix3<f64>, s: (f64, f64), d: (f64, f64)) -> f64 {
    match project(h, s.0, s.1) {
        Some((x, y)) => ((x - d.0).powi(2) + (y - d.1).powi(2)).sqrt(),
        None => f64::INFINITY,
    }
}

/// RANSAC homography; returns the refit model and its inlier indices.
pub fn ransac_homography(
    src: &[(f64, f64)],
    dst: &[(f64, f64)],
    cfg: &AlignConfig,
) -> Option<(Matrix3<f64>, Vec<usize>)> {
    let n = src.len();
    if n < 4 {
        return None;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let inliers_of = |h: &Matrix3<f64>| -> Vec<usize> {
        (0..n).filter(|&i| transfer_error(h, src[i], dst[i]) < cfg.ransac_threshold).collect()
    };
    let mut best: Vec<usize> = Vec::new();
    let mut iterations = cfg.ransac_iterations;
    let mut it = 0;
    while it < iterations {
        it += 1;
        let idx = sample(&mut rng, n, 4).into_vec();
        let s: Vec<_> = idx.iter().map(|&i| src[i]).collect();
        let d: Vec<_> = idx.iter().map(|&i| dst[i]).collect();
        let Some(h) = fit_homography(&s, &d) else { continue };
        let inl = inliers_of(&h);
        if inl.len() > best.len() {
            best = inl;
            // Adaptive stop at 99.9% confidence of an all-inlier sample.
            let w = best.len() as f64 / n as f64;
            let p_fail = 1.0 - w.powi(4);
            if p_fail <= 1e-12 {
                iterations = it;
            } else {
                let need = ((1e-3f64).ln() / p_fail.ln()).ceil();
                iterations = iterations.min(need.max(1.0) as usize);
            }
        }
    }
    if best.len() < cfg.min_inliers {
        return None;
    }
    // Refit on inliers until the set stops changing.
    let mut h = None;
    for _ in 0..5 {
        let s: Vec<_> = best.iter().map(|&i| src[i]).collect();
        let d: Vec<_> = best.iter().map(|&i| dst[i]).collect();
        let fit = fit_homography(&s, &d)?;
        let inl = inliers_of(&fit);
        h = Some(fit);
        if inl == best || inl.len() < cfg.min_inliers {
            break;
        }
        best = inl;
    }
    Some((h?, best))
}

/// Bilinear sample; `None` outside `[0, w−1] × [0, h−1]`.
fn sample_bilinear(img: &ImageTensor, c: usize, x: f64, y: f64) -> Option<f32> {
    let (_, h, w) = img.dims();
    const TOL: f64 = 1e-6;
    if x < -TOL || y < -TOL || x > (w - 1) as f64 + TOL || y > (h - 1) as f64 + TOL {
        return None;
    }
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let top = img.get(c, y0, x0) as f64 * (1.0 - fx) + img.get(c, y0, x1) as f64 * fx;
    let bot = img.get(c, y1, x0) as f64 * (1.0 - fx) + img.get(c, y1, x1) as f64 * fx;
    Some((top * (1.0 - fy) + bot * fy) as f32)
}

/// Resamples `src` into an `out_h × out_w` frame where output pixel `p`
/// takes `src(h · p)`; also returns the validity mask.
pub fn warp_into(src: &ImageTensor, h: &Matrix3<f64>, out_h: usize, out_w: usize) -> (ImageTensor, Vec<bool>) {
    let ch = src.channels();
    let mut out = ImageTensor::filled(ch, out_h, out_w, 0.0);
    let mut valid = vec![false; out_h * out_w];
    for y in 0..out_h {
        for x in 0..out_w {
            let Some((sx, sy)) = project(h, x as f64, y as f64) else { continue };
            if sample_bilinear(src, 0, sx, sy).is_none() {
                continue;
            }
            valid[y * out_w + x] = true;
            for c in 0..ch {
                out.set(c, y, x, sample_bilinear(src, c, sx, sy).unwrap_or(0.0));
            }
        }
    }
    (out, valid)
}

/// Largest all-true axis-aligned rectangle in a row-major mask.
pub fn largest_valid_rect(mask: &[bool], h: usize, w: usize) -> Option<CropWindow> {
    let mut heights = vec![0usize; w];
    let mut best: Option<CropWindow> = None;
    for y in 0..h {
        for x in 0..w {
            heights[x] = if mask[y * w + x] { heights[x] + 1 } else { 0 };
        }
        // Largest rectangle in the histogram via a monotone stack.
        let mut stack: Vec<usize> = Vec::new();
        for x in 0..=w {
            let cur = if x < w { heights[x] } else { 0 };
            while let Some(&top) = stack.last() {
                if heights[top] < cur {
                    break;
                }
                stack.pop();
                let height = heights[top];
                let left = stack.last().map_or(0, |&l| l + 1);
                let width = x - left;
                if height > 0 && best.is_none_or(|b| height * width > b.area()) {
                    best = Some(CropWindow { top: y + 1 - height, left, height, width });
                }
            }
            stack.push(x);
        }
    }
    best
}

/// Aligns `sharp` to `blurry`; returns `(blurry_crop, sharp_warped_crop, result)`.
pub fn align_pair(
    blurry: &ImageTensor,
    sharp: &ImageTensor,
    cfg: &AlignConfig,
) -> Result<(ImageTensor, ImageTensor, AlignmentResult)> {
    let (_, bh, bw) = blurry.dims();
    let (_, sh, sw) = sharp.dims();
    let kb = detect_and_describe(&blurry.to_gray(), bw, bh);
    let ks = detect_and_describe(&sharp.to_gray(), sw, sh);
    let matches = match_descriptors(&kb, &ks, cfg.ratio);
    if matches.len() < cfg.min_inliers {
        return Err(Error::Alignment(format!(
            "only {} confident matches ({} / {} keypoints); need at least {}",
            matches.len(),
            kb.len(),
            ks.len(),
            cfg.min_inliers
        )));
    }
    let src: Vec<_> = matches.iter().map(|&(i, _)| (kb[i].x, kb[i].y)).collect();
    let dst: Vec<_> = matches.iter().map(|&(_, j)| (ks[j].x, ks[j].y)).collect();
    let (h, inliers) = ransac_homography(&src, &dst, cfg).ok_or_else(|| {
        Error::Alignment(format!("RANSAC found no homography with >= {} inliers", cfg.min_inliers))
    })?;
    let mean_err = inliers.iter().map(|&i| transfer_error(&h, src[i], dst[i])).sum::<f64>() / inliers.len() as f64;

    let (warped, valid) = warp_into(sharp, &h, bh, bw);
    let crop = largest_valid_rect(&valid, bh, bw)
        .ok_or_else(|| Error::Alignment("warped sharp image does not overlap the blurry frame".into()))?;
    let low_confidence = mean_err > cfg.confidence_threshold;
    if low_confidence {
        warn!("low-confidence alignment: mean inlier reprojection error {mean_err:.3} px");
    }
    let result = AlignmentResult {
        homography: from_matrix(&h),
        inlier_count: inliers.len(),
        match_count: matches.len(),
        mean_reprojection_error: mean_err,
        crop_window: crop,
        low_confidence,
    };
    let b = blurry.crop(crop.top, crop.left, crop.height, crop.width)?;
    let s = warped.crop(crop.top, crop.left, crop.height, crop.width)?;
    Ok((b, s, result))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dlt_recovers_exact_homography() {
        let h = Matrix3::new(1.02, 0.05, 3.0, -0.04, 0.98, -7.0, 1e-4, -2e-4, 1.0);
        let src: Vec<_> = [(0.0, 0.0), (100.0, 0.0), (0.0, 80.0), (100.0, 80.0), (40.0, 30.0), (70.0, 10.0)]
            .to_vec();
        let dst: Vec<_> = src.iter().map(|&(x, y)| project(&h, x, y).unwrap()).collect();
        let fit = fit_homography(&src, &dst).unwrap();
        for (a, b) in fit.iter().zip(h.iter()) {
            assert!((a - b).abs() < 1e-8, "{fit} vs {h}");
        }
    }

    #[test]
    fn ransac_rejects_outliers() {
        let h = Matrix3::new(1.0, 0.0, 12.0, 0.0, 1.0, -5.0, 0.0, 0.0, 1.0);
        let mut src = Vec::new();
        let mut dst = Vec::new();
        for i in 0..40 {
            let p = ((i * 37 % 97) as f64, (i * 53 % 89) as f64);
            src.push(p);
            dst.push(project(&h, p.0, p.1).unwrap());
        }
        for i in 0..15 {
            src.push((i as f64 * 3.0, 50.0));
            dst.push((90.0 - i as f64 * 5.0, i as f64 * 7.0));
        }
        let (fit, inl) = ransac_homography(&src, &dst, &AlignConfig::default()).unwrap();
        assert!(inl.len() >= 40);
        assert!((fit[(0, 2)] - 12.0).abs() < 1e-6 && (fit[(1, 2)] + 5.0).abs() < 1e-6);
    }

    #[test]
    fn largest_rect_in_mask() {
        #[rustfmt::skip]
        let mask = [
            0, 1, 1, 0, 0,
            1, 1, 1, 1, 0,
            1, 1, 1, 1, 1,
            0, 1, 1, 1, 1,
        ].map(|v| v == 1);
        let r = largest_valid_rect(&mask, 4, 5).unwrap();
        assert_eq!(r.area(), 9);
        assert_eq!(r, CropWindow { top: 1, left: 1, height: 3, width: 3 });
        assert!(largest_valid_rect(&[false; 4], 2, 2).is_none());
    }

    #[test]
    fn identity_warp_is_full_frame() {
        let img = ImageTensor::from_fn(3, 10, 12, |c, y, x| (c + y + x) as f32 / 30.0);
        let (out, valid) = warp_into(&img, &Matrix3::identity(), 10, 12);
        assert_eq!(out, img);
        assert!(valid.iter().all(|v| *v));
    }
}
