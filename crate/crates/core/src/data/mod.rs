//! Training and evaluation data: patches, pair manifests, the seeded
//! training stream, and keypoint-based pair alignment.

pub mod align;
pub mod sift;

use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use log::warn;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::blur::{rng_for, synthesize_pair, SynthConfig};
use crate::error::{Error, Result};
use crate::image::{list_images, ImageTensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchSpec {
    pub size: usize,
    pub stride: usize,
}

impl Default for PatchSpec {
    fn default() -> Self {
        Self { size: 128, stride: 128 }
    }
}

impl PatchSpec {
    pub fn new(size: usize, stride: usize) -> Result<Self> {
        let s = Self { size, stride };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.size == 0 || self.stride == 0 {
            return Err(Error::Config(format!(
                "patch size and stride must be positive, got {}/{}",
                self.size, self.stride
            )));
        }
        Ok(())
    }

    /// Top-left corners of the row-major patch grid; partial patches dropped.
    pub fn grid(&self, height: usize, width: usize) -> Vec<(usize, usize)> {
        if height < self.size || width < self.size {
            return Vec::new();
        }
        let rows = (height - self.size) / self.stride + 1;
        let cols = (width - self.size) / self.stride + 1;
        (0..rows)
            .flat_map(|r| (0..cols).map(move |c| (r * self.stride, c * self.stride)))
            .collect()
    }
}

pub fn extract_patches(img: &ImageTensor, spec: &PatchSpec) -> Result<Vec<ImageTensor>> {
    spec.validate()?;
    spec.grid(img.height(), img.width())
        .into_iter()
        .map(|(t, l)| img.crop(t, l, spec.size, spec.size))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub blurry: PathBuf,
    pub sharp: PathBuf,
}

/// Paired-image list; on disk one `blurry<TAB>sharp` record per line, with
/// optional `# split: …` / `# source: …` header comments. Relative paths
/// resolve against the manifest's directory.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub split: String,
    pub source: String,
}

impl DatasetManifest {
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut m = DatasetManifest::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim_end_matches('\r');
            if line.trim().is_empty() {
                continue;
            }
            if let Some(comment) = line.trim_start().strip_prefix('#') {
                if let Some((k, v)) = comment.split_once(':') {
                    match k.trim() {
                        "split" => m.split = v.trim().to_string(),
                        "source" => m.source = v.trim().to_string(),
                        _ => {}
                    }
                }
                continue;
            }
            let mut cols = line.split('\t');
            let (Some(b), Some(s), None) = (cols.next(), cols.next(), cols.next()) else {
                return Err(Error::Input(format!(
                    "manifest line {}: expected `blurry<TAB>sharp`, got {line:?}",
                    lineno + 1
                )));
            };
            let resolve = |p: &str| {
                let p = PathBuf::from(p.trim());
                if p.is_absolute() {
                    p
                } else {
                    base.join(p)
                }
            };
            m.entries.push(ManifestEntry { blurry: resolve(b), sharp: resolve(s) });
        }
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        if !self.split.is_empty() {
            out.push_str(&format!("# split: {}\n", self.split));
        }
        if !self.source.is_empty() {
            out.push_str(&format!("# source: {}\n", self.source));
        }
        for e in &self.entries {
            out.push_str(&format!("{}\t{}\n", e.blurry.display(), e.sharp.display()));
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    /// Pairs `blur/<name>` with `sharp/<name>` under `root`.
    pub fn from_pair_dirs(root: &Path) -> Result<Self> {
        let blur_dir = root.join("blur");
        let sharp_dir = root.join("sharp");
        let mut entries = Vec::new();
        for b in list_images(&blur_dir)? {
            let name = b.file_name().expect("listed files have names");
            let s = sharp_dir.join(name);
            if s.is_file() {
                entries.push(ManifestEntry { blurry: b, sharp: s });
            } else {
                warn!("no sharp counterpart for {}; skipped", b.display());
            }
        }
        Ok(Self { entries, split: String::new(), source: root.display().to_string() })
    }

    /// Checks that all referenced files exist.
    pub fn verify(&self) -> Result<()> {
        for e in &self.entries {
            for p in [&e.blurry, &e.sharp] {
                if !p.is_file() {
                    return Err(Error::Input(format!("manifest references missing file {}", p.display())));
                }
            }
        }
        Ok(())
    }
}

/// Where training pairs come from.
#[derive(Clone, Debug)]
pub enum DataSource {
    /// Sharp images on disk; blur synthesized per epoch.
    SharpDir(PathBuf),
    /// Real or pre-synthesized pairs listed in a manifest.
    Manifest(PathBuf),
    /// Sharp images in memory; blur synthesized per epoch.
    SharpImages(Vec<ImageTensor>),
    /// Fixed in-memory pairs `(blurry, sharp)`.
    Pairs(Vec<(ImageTensor, ImageTensor)>),
}

/// One training batch; both sides are `N × 3 × S × S` once stacked.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub blurry: Vec<ImageTensor>,
    pub sharp: Vec<ImageTensor>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.blurry.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blurry.is_empty()
    }

    pub fn to_tensors(&self, dtype: DType, device: &Device) -> Result<(Tensor, Tensor)> {
        Ok((ImageTensor::stack(&self.blurry, dtype, device)?, ImageTensor::stack(&self.sharp, dtype, device)?))
    }
}

enum Sources {
    Synth(Vec<ImageTensor>),
    Fixed(Vec<(ImageTensor, ImageTensor)>),
}

/// Seeded, epoch-structured patch stream.
///
/// Batch `step` is a pure function of `(seed, step)`: epoch `e` reshuffles
/// all patches with a generator seeded from `(seed, e)`, and synthesized
/// sources draw a fresh kernel and noise per source image and epoch.
pub struct TrainingStream {
    sources: Sources,
    patch: PatchSpec,
    synth: SynthConfig,
    seed: u64,
    batch_size: usize,
    /// `(source index, top, left)` for every patch of an epoch, unshuffled.
    patches: Vec<(usize, usize, usize)>,
    cache: Option<(u64, Vec<(ImageTensor, ImageTensor)>, Vec<usize>)>,
}

fn load_or_skip(path: &Path) -> Option<ImageTensor> {
    match ImageTensor::load(path) {
        Ok(img) => Some(img),
        Err(e) => {
            warn!("skipping unreadable image {}: {e}", path.display());
            None
        }
    }
}

impl TrainingStream {
    pub fn new(
        source: DataSource,
        patch: PatchSpec,
        synth: SynthConfig,
        batch_size: usize,
        seed: u64,
    ) -> Result<Self> {
        patch.validate()?;
        synth.validate()?;
        if batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        let sources = match source {
            DataSource::SharpDir(dir) => Sources::Synth(list_images(&dir)?.iter().filter_map(|p| load_or_skip(p)).collect()),
            DataSource::SharpImages(v) => Sources::Synth(v),
            DataSource::Manifest(path) => {
                let m = DatasetManifest::load(&path)?;
                let mut pairs = Vec::new();
                for e in &m.entries {
                    let (Some(b), Some(s)) = (load_or_skip(&e.blurry), load_or_skip(&e.sharp)) else { continue };
                    if !b.same_shape(&s) {
                        warn!("skipping pair {} / {}: size mismatch", e.blurry.display(), e.sharp.display());
                        continue;
                    }
                    pairs.push((b, s));
                }
                Sources::Fixed(pairs)
            }
            DataSource::Pairs(pairs) => {
                for (b, s) in &pairs {
                    b.check_same_shape(s, "training pair")?;
                }
                Sources::Fixed(pairs)
            }
        };
        let dims: Vec<(usize, usize)> = match &sources {
            Sources::Synth(v) => v.iter().map(|i| (i.height(), i.width())).collect(),
            Sources::Fixed(v) => v.iter().map(|(b, _)| (b.height(), b.width())).collect(),
        };
        let patches: Vec<_> = dims
            .iter()
            .enumerate()
            .flat_map(|(i, &(h, w))| patch.grid(h, w).into_iter().map(move |(t, l)| (i, t, l)))
            .collect();
        if patches.is_empty() {
            return Err(Error::Config(format!(
                "dataset yields no {0}x{0} patches (no readable images of sufficient size)",
                patch.size
            )));
        }
        Ok(Self { sources, patch, synth, seed, batch_size, patches, cache: None })
    }

    pub fn num_patches(&self) -> usize {
        self.patches.len()
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.patches.len().div_ceil(self.batch_size)
    }

    fn prepare_epoch(&mut self, epoch: u64) -> Result<()> {
        if matches!(&self.cache, Some((e, _, _)) if *e == epoch) {
            return Ok(());
        }
        let epoch_seed = crate::blur::derive_seed(self.seed, epoch);
        let pairs = match &self.sources {
            Sources::Fixed(p) => p.clone(),
            Sources::Synth(imgs) => imgs
                .iter()
                .enumerate()
                .map(|(i, img)| {
                    let pair = synthesize_pair(img, &self.synth, &mut rng_for(epoch_seed, i as u64))?;
                    Ok((pair.blurry, pair.sharp))
                })
                .collect::<Result<Vec<_>>>()?,
        };
        let mut order: Vec<usize> = (0..self.patches.len()).collect();
        order.shuffle(&mut rng_for(epoch_seed, u64::MAX));
        self.cache = Some((epoch, pairs, order));
        Ok(())
    }

    /// Batch at a global step; the final batch of each epoch may be short.
    pub fn batch_at(&mut self, step: u64) -> Result<Batch> {
        let per_epoch = self.batches_per_epoch() as u64;
        let (epoch, index) = (step / per_epoch, (step % per_epoch) as usize);
        self.prepare_epoch(epoch)?;
        let (_, pairs, order) = self.cache.as_ref().expect("epoch prepared");
        let start = index * self.batch_size;
        let end = (start + self.batch_size).min(order.len());
        let mut batch = Batch { blurry: Vec::new(), sharp: Vec::new() };
        let s = self.patch.size;
        for &k in &order[start..end] {
            let (src, t, l) = self.patches[k];
            let (b, sh) = &pairs[src];
            batch.blurry.push(b.crop(t, l, s, s)?);
            batch.sharp.push(sh.crop(t, l, s, s)?);
        }
        Ok(batch)
    }
}
