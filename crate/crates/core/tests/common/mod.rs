//! Shared fixtures for integration tests.
#![allow(dead_code)]

use darkdeblur::ImageTensor;
use nalgebra::Matrix3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Smooth gradient overlaid with random rectangles and discs.
pub fn textured_image(seed: u64, h: usize, w: usize) -> ImageTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = ImageTensor::from_fn(3, h, w, |c, y, x| {
        0.2 + 0.3 * (x as f32 / w as f32) * (c as f32 + 1.0) / 3.0 + 0.2 * (y as f32 / h as f32)
    });
    for _ in 0..80 {
        let color: [f32; 3] = std::array::from_fn(|_| rng.random::<f32>());
        let cx = rng.random_range(0.0..w as f64);
        let cy = rng.random_range(0.0..h as f64);
        let r = rng.random_range(3.0..(w.min(h) as f64 / 8.0));
        let disc = rng.random::<bool>();
        let y0 = (cy - r).max(0.0) as usize;
        let y1 = ((cy + r) as usize).min(h - 1);
        let x0 = (cx - r).max(0.0) as usize;
        let x1 = ((cx + r) as usize).min(w - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let inside = !disc || ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)) <= r * r;
                if inside {
                    for (c, v) in color.iter().enumerate() {
                        img.set(c, y, x, *v);
                    }
                }
            }
        }
    }
    // Light 3×3 box smoothing removes hard aliasing.
    let src = img.clone();
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                let mut n = 0.0;
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let (yy, xx) = (y as i64 + dy, x as i64 + dx);
                        if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                            acc += src.get(c, yy as usize, xx as usize);
                            n += 1.0;
                        }
                    }
                }
                img.set(c, y, x, acc / n);
            }
        }
    }
    img
}

/// Random similarity about the image center: rotation ≤ `max_deg`, scale
/// within `1 ± max_scale`, translation ≤ `max_shift` px per axis.
pub fn random_homography(rng: &mut ChaCha8Rng, h: usize, w: usize, max_deg: f64, max_scale: f64, max_shift: f64) -> Matrix3<f64> {
    let theta = rng.random_range(-max_deg..=max_deg).to_radians();
    let s = 1.0 + rng.random_range(-max_scale..=max_scale);
    let tx = rng.random_range(-max_shift..=max_shift);
    let ty = rng.random_range(-max_shift..=max_shift);
    let (cx, cy) = ((w - 1) as f64 / 2.0, (h - 1) as f64 / 2.0);
    let (sn, cs) = theta.sin_cos();
    let to_origin = Matrix3::new(1.0, 0.0, -cx, 0.0, 1.0, -cy, 0.0, 0.0, 1.0);
    let back = Matrix3::new(1.0, 0.0, cx + tx, 0.0, 1.0, cy + ty, 0.0, 0.0, 1.0);
    let rs = Matrix3::new(s * cs, -s * sn, 0.0, s * sn, s * cs, 0.0, 0.0, 0.0, 1.0);
    back * rs * to_origin
}
