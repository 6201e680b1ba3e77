//! Full-reference quality metrics and the benchmark runner.

pub mod color;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::Device;
use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::data::DatasetManifest;
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::train::{checkpoint, DTYPE};
use color::{ciede2000, srgb_to_lab};

/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

/// `10·log10(1 / MSE)` over all channels, capped at [`PSNR_CAP`].
pub fn psnr(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    a.check_same_shape(b, "psnr")?;
    let widen = |img: &ImageTensor| img.data().iter().map(|&v| v as f64).collect::<Vec<_>>();
    psnr_values(&widen(a), &widen(b))
}

/// [`psnr`] on raw double-precision samples.
pub fn psnr_values(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Input(format!("psnr: {} vs {} samples", a.len(), b.len())));
    }
    let mse = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut w: [f64; SSIM_WINDOW] =
        std::array::from_fn(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp());
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Separable Gaussian filter keeping only positions where the window fits.
fn filter_valid(src: &[f64], h: usize, w: usize, taps: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = taps.iter().enumerate().map(|(k, t)| t * src[y * w + x + k]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps.iter().enumerate().map(|(k, t)| t * rows[(y + k) * ow + x]).sum();
        }
    }
    out
}

/// Mean local SSIM with an 11×11 Gaussian window (σ = 1.5) over the region
/// where the window fits, population statistics, per channel then averaged.
pub fn ssim(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    a.check_same_shape(b, "ssim")?;
    let (c, h, w) = a.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Input(format!("ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}")));
    }
    let taps = gaussian_window();
    let mut total = 0.0;
    for ch in 0..c {
        let x: Vec<f64> = a.plane(ch).iter().map(|&v| v as f64).collect();
        let y: Vec<f64> = b.plane(ch).iter().map(|&v| v as f64).collect();
        let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<f64>>();
        let mx = filter_valid(&x, h, w, &taps);
        let my = filter_valid(&y, h, w, &taps);
        let mxx = filter_valid(&prod(&x, &x), h, w, &taps);
        let myy = filter_valid(&prod(&y, &y), h, w, &taps);
        let mxy = filter_valid(&prod(&x, &y), h, w, &taps);
        let n = mx.len();
        let mut acc = 0.0;
        for i in 0..n {
            let (ux, uy) = (mx[i], my[i]);
            let vx = mxx[i] - ux * ux;
            let vy = myy[i] - uy * uy;
            let vxy = mxy[i] - ux * uy;
            acc += (2.0 * ux * uy + C1) * (2.0 * vxy + C2) / ((ux * ux + uy * uy + C1) * (vx + vy + C2));
        }
        total += acc / n as f64;
    }
    Ok(total / c as f64)
}

/// Mean per-pixel CIEDE2000 difference of two sRGB images.
pub fn delta_e(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    a.check_same_shape(b, "delta_e")?;
    let (c, h, w) = a.dims();
    if c != 3 {
        return Err(Error::Input(format!("delta_e needs 3-channel sRGB images, got {c} channels")));
    }
    let pixel = |img: &ImageTensor, i: usize| -> [f64; 3] {
        std::array::from_fn(|ch| img.data()[ch * h * w + i].clamp(0.0, 1.0) as f64)
    };
    let sum: f64 = (0..h * w).map(|i| ciede2000(srgb_to_lab(pixel(a, i)), srgb_to_lab(pixel(b, i)))).sum();
    Ok(sum / (h * w) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub image_id: String,
    pub psnr: f64,
    pub ssim: f64,
    pub delta_e: f64,
}

impl MetricRecord {
    pub fn score(image_id: impl Into<String>, output: &ImageTensor, reference: &ImageTensor) -> Result<Self> {
        Ok(Self {
            image_id: image_id.into(),
            psnr: psnr(output, reference)?,
            ssim: ssim(output, reference)?,
            delta_e: delta_e(output, reference)?,
        })
    }
}

/// An entry that could not be scored; excluded from the means.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub image_id: String,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceScore {
    pub dataset: String,
    pub psnr: f64,
    pub ssim: Option<f64>,
    pub delta_e: Option<f64>,
}

/// Literature scores of the full-scale model, kept for context; desk-scale
/// runs are not expected to reach them.
pub fn reference_scores() -> Vec<ReferenceScore> {
    vec![
        ReferenceScore { dataset: "ExDark (synthesized blur)".into(), psnr: 34.56, ssim: Some(0.9146), delta_e: Some(1.78) },
        ReferenceScore { dataset: "DarkShake".into(), psnr: 25.39, ssim: None, delta_e: None },
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub method: String,
    pub delta_e_formula: String,
    pub ssim_window: String,
    pub records: Vec<MetricRecord>,
    pub failures: Vec<FailureRecord>,
    /// Means over scored records; absent when nothing could be scored.
    pub mean_psnr: Option<f64>,
    pub mean_ssim: Option<f64>,
    pub mean_delta_e: Option<f64>,
    pub reference_scores: Vec<ReferenceScore>,
}

impl EvalReport {
    /// Sorts records by id and fills in the means.
    pub fn new(dataset: &str, method: &str, mut records: Vec<MetricRecord>, mut failures: Vec<FailureRecord>) -> Self {
        records.sort_by(|a, b| a.image_id.cmp(&b.image_id));
        failures.sort_by(|a, b| a.image_id.cmp(&b.image_id));
        let mean = |f: fn(&MetricRecord) -> f64| {
            (!records.is_empty()).then(|| records.iter().map(f).sum::<f64>() / records.len() as f64)
        };
        Self {
            dataset: dataset.into(),
            method: method.into(),
            delta_e_formula: "CIEDE2000 (sRGB, D65)".into(),
            ssim_window: format!("gaussian {SSIM_WINDOW}x{SSIM_WINDOW}, sigma {SSIM_SIGMA}, per channel"),
            mean_psnr: mean(|r| r.psnr),
            mean_ssim: mean(|r| r.ssim),
            mean_delta_e: mean(|r| r.delta_e),
            records,
            failures,
            reference_scores: reference_scores(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Method × dataset table with PSNR↑ / SSIM↑ / DeltaE↓ columns.
    pub fn to_markdown(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "| Method | Dataset | PSNR↑ | SSIM↑ | DeltaE↓ |");
        let _ = writeln!(s, "|---|---|---|---|---|");
        let opt = |v: Option<f64>, p: usize| v.map_or("–".to_string(), |v| format!("{v:.p$}"));
        let _ = writeln!(
            s,
            "| {} | {} | {} | {} | {} |",
            self.method,
            self.dataset,
            opt(self.mean_psnr, 2),
            opt(self.mean_ssim, 4),
            opt(self.mean_delta_e, 2)
        );
        let _ = writeln!(s, "\nScored {} image(s); {} failure(s).", self.records.len(), self.failures.len());
        for f in &self.failures {
            let _ = writeln!(s, "- FAILED {}: {}", f.image_id, f.reason);
        }
        let _ = writeln!(s, "\nReference (full-scale training, not a desk target):\n");
        let _ = writeln!(s, "| Dataset | PSNR↑ | SSIM↑ | DeltaE↓ |");
        let _ = writeln!(s, "|---|---|---|---|");
        for r in &self.reference_scores {
            let _ = writeln!(s, "| {} | {:.2} | {} | {} |", r.dataset, r.psnr, opt(r.ssim, 4), opt(r.delta_e, 2));
        }
        s
    }

    /// Writes the JSON report to `path` and the table next to it (`.md`).
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_json()? + "\n").map_err(|e| Error::io(path, e))?;
        let md = path.with_extension("md");
        fs::write(&md, self.to_markdown()).map_err(|e| Error::io(&md, e))
    }
}

/// What produces the deblurred images being scored.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum EvalTarget {
    /// Run the generator stored in a training checkpoint.
    Checkpoint(PathBuf),
    /// Pre-deblurred outputs named like the blurry inputs.
    OutputsDir(PathBuf),
    /// Score the blurry inputs themselves (the do-nothing baseline).
    Identity,
}

impl EvalTarget {
    fn method_name(&self) -> String {
        let name = |p: &Path| p.file_name().map_or_else(|| p.display().to_string(), |n| n.to_string_lossy().into_owned());
        match self {
            Self::Checkpoint(p) => format!("checkpoint {}", name(p)),
            Self::OutputsDir(p) => format!("outputs {}", name(p)),
            Self::Identity => "identity".into(),
        }
    }
}

fn image_id(path: &Path) -> String {
    path.file_name().map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into_owned())
}

/// Scores every manifest pair. Entries whose images are missing or
/// unreadable become failure rows; model outputs are quantized to 8 bits so
/// checkpoint and outputs-directory evaluation agree.
pub fn evaluate(target: &EvalTarget, manifest: &DatasetManifest, dataset: &str, device: &Device) -> Result<EvalReport> {
    let generator = match target {
        EvalTarget::Checkpoint(path) => Some(checkpoint::load(path, device)?.generator),
        _ => None,
    };
    if let EvalTarget::OutputsDir(dir) = target {
        if !dir.is_dir() {
            return Err(Error::Input(format!("outputs directory {} does not exist", dir.display())));
        }
    }
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for entry in &manifest.entries {
        let id = image_id(&entry.blurry);
        let scored = (|| -> Result<MetricRecord> {
            let sharp = ImageTensor::load(&entry.sharp)?;
            let output = match target {
                EvalTarget::OutputsDir(dir) => {
                    // Inference writes PNG, so non-PNG inputs have a renamed output.
                    let exact = dir.join(&id);
                    let path = if exact.is_file() { exact } else { dir.join(Path::new(&id).with_extension("png")) };
                    ImageTensor::load(&path)?
                }
                EvalTarget::Identity => ImageTensor::load(&entry.blurry)?,
                EvalTarget::Checkpoint(_) => {
                    let g = generator.as_ref().expect("checkpoint loaded");
                    g.infer(&ImageTensor::load(&entry.blurry)?, DTYPE, device)?.quantize_u8()
                }
            };
            MetricRecord::score(id.clone(), &output, &sharp)
        })();
        match scored {
            Ok(r) => {
                info!("{id}: psnr {:.3} ssim {:.4} delta_e {:.3}", r.psnr, r.ssim, r.delta_e);
                records.push(r);
            }
            Err(e) if e.is_user_error() => {
                warn!("{id}: not scored: {e}");
                failures.push(FailureRecord { image_id: id, reason: e.to_string() });
            }
            Err(e) => return Err(e),
        }
    }
    Ok(EvalReport::new(dataset, &target.method_name(), records, failures))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hash(c: u64, y: u64, x: u64, s: u64) -> u64 {
        ((x * 7919 + y * 104_729 + c * 1_299_709 + s * 15_485_863) * 2_654_435_761) % (1 << 32)
    }

    /// Integer-defined pair, reproducible bit-for-bit in other languages.
    fn hashed_pair(s: u64, h: usize, w: usize) -> (ImageTensor, ImageTensor) {
        let va = |c: usize, y: usize, x: usize| {
            (x as u64 * 3 + y as u64 * 5 + c as u64 * 20 + (hash(c as u64, y as u64, x as u64, s) >> 8) % 64) % 256
        };
        let vb = |c: usize, y: usize, x: usize| {
            let d = (hash(c as u64, y as u64, x as u64, s + 100) >> 8) % 61;
            (va(c, y, x) as i64 + d as i64 - 30).clamp(0, 255) as u64
        };
        (
            ImageTensor::from_fn(3, h, w, |c, y, x| (va(c, y, x) as f64 / 255.0) as f32),
            ImageTensor::from_fn(3, h, w, |c, y, x| (vb(c, y, x) as f64 / 255.0) as f32),
        )
    }

    #[test]
    fn psnr_analytic_cases() {
        let a = ImageTensor::filled(3, 8, 8, 0.5);
        let b = ImageTensor::filled(3, 8, 8, 0.6);
        // f32 0.5 and 0.6 differ by 0.100000024; the oracle uses the stored values.
        let d = 0.6f32 as f64 - 0.5f32 as f64;
        assert!((psnr(&a, &b).unwrap() - 10.0 * (1.0 / (d * d)).log10()).abs() < 1e-9);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-5);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        assert!(psnr(&a, &ImageTensor::filled(3, 8, 9, 0.5)).is_err());
    }

    #[test]
    fn psnr_exact_twenty_db() {
        let a = vec![0.5; 300];
        let b = vec![0.6; 300];
        assert!((psnr_values(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        // One unit error in 100 samples: MSE 0.01 through the image path.
        let z = ImageTensor::filled(1, 10, 10, 0.0);
        let mut one = z.clone();
        one.set(0, 3, 7, 1.0);
        assert_eq!(psnr(&z, &one).unwrap(), 20.0);
        assert!(psnr_values(&a, &a[..2]).is_err());
    }

    #[test]
    fn psnr_matches_brute_force_mse() {
        let (a, b) = hashed_pair(9, 13, 17);
        let mut sum = 0.0;
        for c in 0..3 {
            for y in 0..13 {
                for x in 0..17 {
                    sum += (a.get(c, y, x) as f64 - b.get(c, y, x) as f64).powi(2);
                }
            }
        }
        let want = 10.0 * (1.0 / (sum / (3.0 * 13.0 * 17.0))).log10();
        assert!((psnr(&a, &b).unwrap() - want).abs() < 1e-9);
        assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
    }

    #[test]
    fn ssim_identity_and_constant_images() {
        let (a, _) = hashed_pair(1, 20, 20);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        let (p, q) = (0.3f32 as f64, 0.4f32 as f64);
        let want = (2.0 * p * q + C1) / (p * p + q * q + C1);
        let got = ssim(&ImageTensor::filled(3, 16, 16, 0.3), &ImageTensor::filled(3, 16, 16, 0.4)).unwrap();
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        assert!(ssim(&a.crop(0, 0, 10, 20).unwrap(), &a.crop(0, 0, 10, 20).unwrap()).is_err());
    }

    #[test]
    fn ssim_matches_reference_implementation() {
        // Values from scikit-image's structural_similarity with
        // gaussian_weights, sigma 1.5, population covariance, data_range 1.
        let cases = [
            (0, 32, 40, 0.8062800528074572),
            (1, 24, 24, 0.7392055181172125),
            (2, 48, 33, 0.8358565717588481),
            (3, 11, 17, 0.7147305689297411),
            (4, 64, 64, 0.8153826959951483),
        ];
        for (s, h, w, want) in cases {
            let (a, b) = hashed_pair(s, h, w);
            let got = ssim(&a, &b).unwrap();
            assert!((got - want).abs() < 1e-4, "pair {s}: {got} vs {want}");
            assert!((ssim(&b, &a).unwrap() - got).abs() < 1e-9);
        }
    }

    #[test]
    fn delta_e_identity_white_black_and_symmetry() {
        let (a, b) = hashed_pair(5, 12, 12);
        assert_eq!(delta_e(&a, &a).unwrap(), 0.0);
        let white = ImageTensor::filled(3, 2, 2, 1.0);
        let black = ImageTensor::filled(3, 2, 2, 0.0);
        assert!((delta_e(&white, &black).unwrap() - 100.0).abs() < 1e-4);
        assert!((delta_e(&a, &b).unwrap() - delta_e(&b, &a).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn degradation_is_monotone() {
        let base = ImageTensor::from_fn(3, 24, 24, |c, y, x| 0.3 + 0.4 * ((c * 7 + y * 3 + x * 5) % 17) as f32 / 17.0);
        let sign = |c: usize, y: usize, x: usize| if hash(c as u64, y as u64, x as u64, 77) & 1 == 0 { 1.0 } else { -1.0 };
        let mut last: Option<(f64, f64)> = None;
        for delta in [0.01f32, 0.05, 0.1] {
            let noisy = ImageTensor::from_fn(3, 24, 24, |c, y, x| base.get(c, y, x) + delta * sign(c, y, x));
            let p = psnr(&noisy, &base).unwrap();
            let d = delta_e(&noisy, &base).unwrap();
            if let Some((lp, ld)) = last {
                assert!(p < lp && d > ld, "delta {delta}: psnr {p} (prev {lp}), delta_e {d} (prev {ld})");
            }
            last = Some((p, d));
        }
    }

    #[test]
    fn report_means_and_ordering() {
        let rec = |id: &str, p: f64| MetricRecord { image_id: id.into(), psnr: p, ssim: p / 100.0, delta_e: p / 10.0 };
        let r = EvalReport::new(
            "d",
            "m",
            vec![rec("b.png", 30.0), rec("a.png", 20.0), rec("c.png", 31.0)],
            vec![FailureRecord { image_id: "z.png".into(), reason: "missing".into() }],
        );
        assert_eq!(r.records.iter().map(|r| r.image_id.as_str()).collect::<Vec<_>>(), ["a.png", "b.png", "c.png"]);
        assert!((r.mean_psnr.unwrap() - 27.0).abs() < 1e-9);
        assert!((r.mean_ssim.unwrap() - 0.27).abs() < 1e-9);
        assert!((r.mean_delta_e.unwrap() - 2.7).abs() < 1e-9);
        assert_eq!(EvalReport::new("d", "m", vec![], vec![]).mean_psnr, None);
        let back: EvalReport = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        assert_eq!(back, r);
        let md = r.to_markdown();
        assert!(md.contains("| m | d | 27.00 | 0.2700 | 2.70 |") && md.contains("FAILED z.png"));
    }
}
