//! Synthetic camera-shake blur: `blurry = kernel ∗ sharp + noise`.
//!
//! Randomness always flows through an explicit [`ChaCha8Rng`], so a seed
//! fixes trajectories, kernels and noise on every platform.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{reflect_signed, ImageTensor};

pub const MIN_KERNEL: usize = 3;
pub const MAX_KERNEL: usize = 65;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub canvas_size: usize,
    pub traj_samples: usize,
    pub impulse_prob: f64,
    pub inertia: f64,
    pub max_anxiety: f64,
    /// Speed (px per sample) of the initial velocity, in a random direction.
    pub initial_speed: f64,
    pub noise_sigma_range: [f64; 2],
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        let canvas_size = 31;
        Self {
            canvas_size,
            traj_samples: 250,
            impulse_prob: 0.005,
            inertia: 0.7,
            max_anxiety: 0.005 * canvas_size as f64,
            initial_speed: 1.0,
            noise_sigma_range: [0.0, 0.02],
            seed: 0,
        }
    }
}

impl SynthConfig {
    /// Point trajectory and no noise: synthesis becomes the identity.
    pub fn degenerate() -> Self {
        Self {
            impulse_prob: 0.0,
            max_anxiety: 0.0,
            initial_speed: 0.0,
            noise_sigma_range: [0.0, 0.0],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.canvas_size % 2 == 0 || !(MIN_KERNEL..=MAX_KERNEL).contains(&self.canvas_size) {
            return bad(format!(
                "canvas_size must be odd and in [{MIN_KERNEL}, {MAX_KERNEL}], got {}",
                self.canvas_size
            ));
        }
        if self.traj_samples < 2 {
            return bad(format!("traj_samples must be at least 2, got {}", self.traj_samples));
        }
        for (name, p) in [("impulse_prob", self.impulse_prob), ("inertia", self.inertia)] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} must be in [0, 1], got {p}"));
            }
        }
        if !(self.max_anxiety >= 0.0 && self.max_anxiety.is_finite()) {
            return bad(format!("max_anxiety must be finite and >= 0, got {}", self.max_anxiety));
        }
        if !(self.initial_speed >= 0.0 && self.initial_speed.is_finite()) {
            return bad(format!("initial_speed must be finite and >= 0, got {}", self.initial_speed));
        }
        let [lo, hi] = self.noise_sigma_range;
        if !(lo >= 0.0 && lo <= hi && hi.is_finite()) {
            return bad(format!("noise_sigma_range must satisfy 0 <= min <= max, got [{lo}, {hi}]"));
        }
        Ok(())
    }
}

/// Camera path in pixel units, relative to the kernel center.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionTrajectory {
    positions: Vec<[f64; 2]>,
}

impl MotionTrajectory {
    pub fn new(positions: Vec<[f64; 2]>) -> Result<Self> {
        if positions.len() < 2 {
            return Err(Error::Input(format!("trajectory needs >= 2 samples, got {}", positions.len())));
        }
        if positions.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Input("trajectory has non-finite coordinates".into()));
        }
        Ok(Self { positions })
    }

    /// Positions as `[x, y]`.
    pub fn positions(&self) -> &[[f64; 2]] {
        &self.positions
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Extent `max − min` along x and y.
    pub fn span(&self) -> [f64; 2] {
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for p in &self.positions {
            for a in 0..2 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        [hi[0] - lo[0], hi[1] - lo[1]]
    }
}

/// First-order Markov walk, recentered on the origin and shrunk to fit the
/// canvas.
///
/// Each step: `v ← inertia·v + N(0, max_anxiety²)`; with probability
/// `impulse_prob` the velocity is reversed and kicked in a random
/// direction.
pub fn sample_trajectory(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<MotionTrajectory> {
    cfg.validate()?;
    let phi = rng.random_range(0.0..std::f64::consts::TAU);
    let mut v = [cfg.initial_speed * phi.cos(), cfg.initial_speed * phi.sin()];
    let mut p = [0.0f64; 2];
    let mut positions = Vec::with_capacity(cfg.traj_samples);
    positions.push(p);
    // Normal::new only fails for negative or NaN std, excluded by validate().
    let jitter = Normal::new(0.0, cfg.max_anxiety).expect("validated std");
    for _ in 1..cfg.traj_samples {
        for a in &mut v {
            *a = cfg.inertia * *a + jitter.sample(rng);
        }
        if rng.random::<f64>() < cfg.impulse_prob {
            let theta = rng.random_range(0.0..std::f64::consts::TAU);
            let kick = 10.0 * cfg.max_anxiety;
            v = [-v[0] + kick * theta.cos(), -v[1] + kick * theta.sin()];
        }
        p = [p[0] + v[0], p[1] + v[1]];
        positions.push(p);
    }
    fit_to_canvas(&mut positions, cfg.canvas_size);
    MotionTrajectory::new(positions)
}

fn fit_to_canvas(positions: &mut [[f64; 2]], canvas: usize) {
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for p in positions.iter() {
        for a in 0..2 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let center = [(lo[0] + hi[0]) / 2.0, (lo[1] + hi[1]) / 2.0];
    let span = (hi[0] - lo[0]).max(hi[1] - lo[1]);
    let room = (canvas - 1) as f64;
    let scale = if span > room { room / span } else { 1.0 };
    // Rounding can land a rescaled extreme a hair past the edge.
    let half = room / 2.0;
    for p in positions.iter_mut() {
        for a in 0..2 {
            p[a] = ((p[a] - center[a]) * scale).clamp(-half, half);
        }
    }
}

/// Normalized, non-negative `size × size` point-spread function.
#[derive(Clone, Debug, PartialEq)]
pub struct BlurKernel {
    size: usize,
    weights: Vec<f64>,
}

impl BlurKernel {
    pub fn new(size: usize, weights: Vec<f64>) -> Result<Self> {
        if size % 2 == 0 || !(MIN_KERNEL..=MAX_KERNEL).contains(&size) {
            return Err(Error::Input(format!("kernel size must be odd in [3, 65], got {size}")));
        }
        if weights.len() != size * size {
            return Err(Error::Input(format!("kernel of size {size} needs {} weights", size * size)));
        }
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::Input("kernel weights must be finite and >= 0".into()));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Input(format!("kernel weights sum to {sum}, expected 1")));
        }
        Ok(Self { size, weights })
    }

    pub fn delta(size: usize) -> Result<Self> {
        let mut w = vec![0.0; size * size];
        w[size * size / 2] = 1.0;
        Self::new(size, w)
    }

    pub fn uniform(size: usize) -> Result<Self> {
        Self::new(size, vec![1.0 / (size * size) as f64; size * size])
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.weights[row * self.size + col]
    }

    pub fn sum(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// Strips all-zero border rings while keeping the center fixed.
    pub fn trimmed(&self) -> Self {
        let n = self.size;
        let mut margin = 0;
        while n - 2 * (margin + 1) >= MIN_KERNEL {
            let m = margin;
            let ring_empty = (0..n).all(|i| {
                self.get(m, i) == 0.0 && self.get(n - 1 - m, i) == 0.0 && self.get(i, m) == 0.0 && self.get(i, n - 1 - m) == 0.0
            });
            if !ring_empty {
                break;
            }
            margin += 1;
        }
        let k = n - 2 * margin;
        let weights = (0..k)
            .flat_map(|r| (0..k).map(move |c| (r, c)))
            .map(|(r, c)| self.get(r + margin, c + margin))
            .collect();
        Self { size: k, weights }
    }

    /// Grayscale rendering scaled so the peak is white.
    pub fn to_image(&self) -> ImageTensor {
        let peak = self.weights.iter().cloned().fold(0.0, f64::max).max(f64::MIN_POSITIVE);
        ImageTensor::from_fn(1, self.size, self.size, |_, y, x| (self.get(y, x) / peak) as f32)
    }
}

/// Bilinear splat of every trajectory sample onto a `size × size` grid,
/// normalized to unit mass.
pub fn rasterize_kernel(traj: &MotionTrajectory, size: usize) -> Result<BlurKernel> {
    if size % 2 == 0 || !(MIN_KERNEL..=MAX_KERNEL).contains(&size) {
        return Err(Error::Input(format!("kernel size must be odd in [3, 65], got {size}")));
    }
    let c = ((size - 1) / 2) as f64;
    let max = (size - 1) as f64;
    let mut w = vec![0.0f64; size * size];
    for &[px, py] in traj.positions() {
        let (x, y) = (px + c, py + c);
        if !(0.0..=max).contains(&x) || !(0.0..=max).contains(&y) {
            return Err(Error::Internal(format!(
                "trajectory sample ({px:.3}, {py:.3}) falls outside the {size}x{size} canvas"
            )));
        }
        let (x0, y0) = (x.floor(), y.floor());
        let (fx, fy) = (x - x0, y - y0);
        let (x0, y0) = (x0 as usize, y0 as usize);
        let (x1, y1) = ((x0 + 1).min(size - 1), (y0 + 1).min(size - 1));
        w[y0 * size + x0] += (1.0 - fx) * (1.0 - fy);
        w[y0 * size + x1] += fx * (1.0 - fy);
        w[y1 * size + x0] += (1.0 - fx) * fy;
        w[y1 * size + x1] += fx * fy;
    }
    let total: f64 = w.iter().sum();
    for v in &mut w {
        *v /= total;
    }
    BlurKernel::new(size, w)
}

/// Per-channel convolution with mirror-reflected borders:
/// `out(y, x) = Σ k(i, j) · img(y − i + r, x − j + r)`.
pub fn apply_blur(sharp: &ImageTensor, kernel: &BlurKernel) -> Result<ImageTensor> {
    let (ch, h, w) = sharp.dims();
    let k = kernel.size();
    if k > h || k > w {
        return Err(Error::Input(format!("kernel {k}x{k} is larger than the {h}x{w} image")));
    }
    let r = (k / 2) as isize;
    let taps: Vec<(isize, isize, f64)> = (0..k)
        .flat_map(|i| (0..k).map(move |j| (i, j)))
        .filter_map(|(i, j)| {
            let wt = kernel.get(i, j);
            (wt != 0.0).then_some((r - i as isize, r - j as isize, wt))
        })
        .collect();
    let mut out = ImageTensor::filled(ch, h, w, 0.0);
    for c in 0..ch {
        let src = sharp.plane(c);
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0f64;
                for &(dy, dx, wt) in &taps {
                    let sy = reflect_signed(y as isize + dy, h);
                    let sx = reflect_signed(x as isize + dx, w);
                    acc += wt * src[sy * w + sx] as f64;
                }
                out.set(c, y, x, acc as f32);
            }
        }
    }
    Ok(out.clamp01())
}

/// Adds i.i.d. `N(0, sigma²)` noise and clamps to `[0, 1]`.
pub fn add_noise(img: &ImageTensor, sigma: f64, rng: &mut ChaCha8Rng) -> Result<ImageTensor> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::Input(format!("noise sigma must be finite and >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(img.clone());
    }
    let normal = Normal::new(0.0, sigma).expect("validated std");
    let mut out = img.clone();
    for v in out.data_mut() {
        *v = (*v as f64 + normal.sample(rng)) as f32;
    }
    Ok(out.clamp01())
}

#[derive(Clone, Debug)]
pub struct SynthPair {
    pub blurry: ImageTensor,
    pub sharp: ImageTensor,
    pub kernel: BlurKernel,
    pub sigma: f64,
}

/// Full forward model: trajectory → kernel → blur → noise.
pub fn synthesize_pair(sharp: &ImageTensor, cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<SynthPair> {
    let traj = sample_trajectory(cfg, rng)?;
    let kernel = rasterize_kernel(&traj, cfg.canvas_size)?.trimmed();
    let blurred = apply_blur(sharp, &kernel)?;
    let [lo, hi] = cfg.noise_sigma_range;
    let sigma = if hi > lo { rng.random_range(lo..hi) } else { lo };
    let blurry = add_noise(&blurred, sigma, rng)?;
    Ok(SynthPair { blurry, sharp: sharp.clone(), kernel, sigma })
}

/// Independent per-item seed derived from a master seed (SplitMix64 mix).
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut z = master ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn rng_for(master: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, index))
}
