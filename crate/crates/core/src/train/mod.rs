//! Adversarial training loop, configuration and checkpoints.

pub mod adam;
pub mod checkpoint;

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{DType, Device};
use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::blur::{derive_seed, SynthConfig};
use crate::data::{Batch, DataSource, PatchSpec, TrainingStream};
use crate::error::{Error, Result};
use crate::model::{Ablation, Discriminator, DiscriminatorConfig, Generator, GeneratorConfig, ParamStore, SIZE_MULTIPLE};
use crate::objectives::{
    discriminator_loss, reconstruction_loss, scalar, total_loss, ExtractorSpec, FeatureExtractor, LossBreakdown,
    LossWeights,
};
pub use adam::{Adam, AdamConfig};
pub use checkpoint::{latest_checkpoint, CHECKPOINT_FORMAT};

/// Every field has a default, so a TOML file need only list overrides.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub total_steps: u64,
    pub ablation: Ablation,
    pub seed: u64,
    pub checkpoint_every: u64,
    pub log_every: u64,
    pub patch_size: usize,
    /// Optional global gradient-norm clip; off by default.
    pub clip_norm: Option<f64>,
    pub extractor: ExtractorSpec,
    pub weights: LossWeights,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub synth: SynthConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            batch_size: 16,
            total_steps: 100_000,
            ablation: Ablation::Full,
            seed: 0,
            checkpoint_every: 1000,
            log_every: 100,
            patch_size: 128,
            clip_norm: None,
            extractor: ExtractorSpec::default(),
            weights: LossWeights::default(),
            generator: GeneratorConfig::default(),
            discriminator: DiscriminatorConfig::default(),
            synth: SynthConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Narrow networks and a random-feature perceptual extractor, sized for
    /// CPU runs without pretrained weights.
    pub fn desk() -> Self {
        Self {
            generator: GeneratorConfig::desk(),
            discriminator: DiscriminatorConfig::desk(),
            extractor: ExtractorSpec::Random { seed: 0 },
            checkpoint_every: 100,
            log_every: 10,
            ..Self::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(format!("invalid training config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("training config is always representable as TOML")
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, beta1: self.beta1, beta2: self.beta2, eps: self.eps }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        for (n, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{n} must be in [0, 1), got {b}"));
            }
        }
        if !(self.eps > 0.0) {
            return bad(format!("eps must be positive, got {}", self.eps));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.checkpoint_every == 0 || self.log_every == 0 {
            return bad("checkpoint_every and log_every must be positive".into());
        }
        if self.patch_size == 0 || self.patch_size % SIZE_MULTIPLE != 0 {
            return bad(format!("patch_size must be a positive multiple of {SIZE_MULTIPLE}, got {}", self.patch_size));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return bad(format!("clip_norm must be positive, got {c}"));
            }
        }
        self.weights.validate()?;
        self.generator.validate()?;
        self.discriminator.validate()?;
        self.synth.validate()
    }
}

/// Everything needed to continue training bit-exactly.
///
/// The data stream is a pure function of `(config.seed, step)`, so the
/// step counter doubles as the stream's RNG position.
pub struct TrainState {
    pub config: TrainConfig,
    pub step: u64,
    pub gen_store: ParamStore,
    pub generator: Generator,
    pub adam_g: Adam,
    /// Present only for the multi-term (adversarial) variant.
    pub adversary: Option<Adversary>,
}

pub struct Adversary {
    pub store: ParamStore,
    pub discriminator: Discriminator,
    pub adam: Adam,
}

pub const DTYPE: DType = DType::F32;

impl TrainState {
    pub fn new(config: TrainConfig, device: &Device) -> Result<Self> {
        config.validate()?;
        let mut gen_store = ParamStore::new(derive_seed(config.seed, 1), DTYPE, device);
        let generator = Generator::new(&mut gen_store.root(), &config.generator, config.ablation)?;
        let adam_g = Adam::new(config.adam(), &gen_store)?;
        let adversary = if config.ablation.multi_term() {
            let mut store = ParamStore::new(derive_seed(config.seed, 2), DTYPE, device);
            let discriminator = Discriminator::new(&mut store.root(), &config.discriminator)?;
            let adam = Adam::new(config.adam(), &store)?;
            Some(Adversary { store, discriminator, adam })
        } else {
            None
        };
        Ok(Self { config, step: 0, gen_store, generator, adam_g, adversary })
    }

    pub fn device(&self) -> &Device {
        self.gen_store.device()
    }
}

/// Per-step diagnostics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: u64,
    pub losses: LossBreakdown,
    pub d_loss: Option<f64>,
    pub gen_grad_norm: f64,
}

fn nonfinite(step: u64, what: &str, detail: String) -> Error {
    Error::Integrity(format!("non-finite {what} at step {step}: {detail}"))
}

/// One discriminator update (real vs detached fake) followed by one
/// generator update. Variants without the multi-term objective skip the
/// discriminator and train on the reconstruction loss alone.
pub fn train_step(state: &mut TrainState, extractor: &dyn FeatureExtractor, batch: &Batch) -> Result<StepReport> {
    let step = state.step + 1;
    let (blurry, sharp) = batch.to_tensors(DTYPE, state.device())?;
    let clip = state.config.clip_norm;
    let weights = state.config.weights;

    let (losses, total, d_loss) = match &mut state.adversary {
        Some(adv) => {
            let fake = state.generator.forward(&blurry)?.detach();
            let d_real = adv.discriminator.forward(&sharp, &blurry, true)?;
            let d_fake = adv.discriminator.forward(&fake, &blurry, true)?;
            let d_loss_t = discriminator_loss(&d_real, &d_fake)?;
            let d_loss = scalar(&d_loss_t)?;
            if !d_loss.is_finite() {
                return Err(nonfinite(step, "discriminator loss", format!("{d_loss}")));
            }
            let d_grads = d_loss_t.backward()?;
            adv.adam.step(&adv.store, &d_grads, clip)?;

            let out = state.generator.forward(&blurry)?;
            let d_fake = adv.discriminator.forward(&out, &blurry, true)?;
            let terms = total_loss(&out, &sharp, Some(&d_fake), extractor, &weights)?;
            (terms.breakdown, terms.total, Some(d_loss))
        }
        None => {
            let out = state.generator.forward(&blurry)?;
            let l1 = reconstruction_loss(&out, &sharp)?;
            let v = scalar(&l1)?;
            let b = LossBreakdown { reconstruction: v, total: v, ..LossBreakdown::default() };
            (b, l1, None)
        }
    };
    if !losses.is_finite() {
        return Err(nonfinite(step, "generator loss", format!("{losses:?}")));
    }
    let grads = total.backward()?;
    let gen_grad_norm = Adam::grad_norm(&state.gen_store, &grads)?;
    if !gen_grad_norm.is_finite() {
        return Err(nonfinite(step, "generator gradient", format!("norm {gen_grad_norm}")));
    }
    state.adam_g.step(&state.gen_store, &grads, clip)?;
    state.step = step;
    Ok(StepReport { step, losses, d_loss, gen_grad_norm })
}

/// One training-log record (JSON lines).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub lr: f64,
    pub l_r: f64,
    pub l_s: f64,
    pub l_f: f64,
    pub l_g: f64,
    pub total: f64,
    pub d_loss: Option<f64>,
    /// Seconds since the start of this process's run.
    pub elapsed_s: f64,
}

impl LogRecord {
    fn new(report: &StepReport, lr: f64, elapsed_s: f64) -> Self {
        let l = &report.losses;
        Self {
            step: report.step,
            lr,
            l_r: l.reconstruction,
            l_s: l.structure,
            l_f: l.perceptual,
            l_g: l.adversarial,
            total: l.total,
            d_loss: report.d_loss,
            elapsed_s,
        }
    }
}

pub const LOG_FILE: &str = "train_log.jsonl";
pub const CHECKPOINT_DIR: &str = "checkpoints";

pub fn read_log(path: &Path) -> Result<Vec<LogRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Output directory for checkpoints and the log.
    pub out_dir: PathBuf,
    /// Continue from this checkpoint instead of initializing.
    pub resume: Option<PathBuf>,
}

/// Runs (or resumes) training up to `cfg.total_steps`.
///
/// A checkpoint is written at step 0 of a fresh run, every
/// `checkpoint_every` steps, and at the end. On resume the configuration
/// stored in the checkpoint is used, except `total_steps`, which comes
/// from `cfg`; log records past the checkpoint's step are dropped so the
/// log matches an uninterrupted run.
pub fn train(cfg: &TrainConfig, source: DataSource, opts: &TrainOptions, device: &Device) -> Result<TrainState> {
    cfg.validate()?;
    let ckpt_dir = opts.out_dir.join(CHECKPOINT_DIR);
    fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;
    let log_path = opts.out_dir.join(LOG_FILE);

    let mut state = match &opts.resume {
        Some(path) => {
            let mut s = checkpoint::load(path, device)?;
            s.config.total_steps = cfg.total_steps;
            info!("resumed from {} at step {}", path.display(), s.step);
            truncate_log(&log_path, s.step)?;
            s
        }
        None => {
            if log_path.exists() {
                fs::remove_file(&log_path).map_err(|e| Error::io(&log_path, e))?;
            }
            TrainState::new(cfg.clone(), device)?
        }
    };
    let c = state.config.clone();
    let extractor = if c.ablation.multi_term() {
        c.extractor.build(DTYPE, device)?
    } else {
        Box::new(crate::objectives::IdentityFeatures)
    };
    let patch = PatchSpec::new(c.patch_size, c.patch_size)?;
    let mut stream = TrainingStream::new(source, patch, c.synth.clone(), c.batch_size, c.seed)?;
    info!(
        "training {} for {} steps on {} patches ({} per epoch batches)",
        c.ablation,
        c.total_steps,
        stream.num_patches(),
        stream.batches_per_epoch()
    );

    if state.step == 0 {
        checkpoint::save(&state, &checkpoint::path_for(&ckpt_dir, 0))?;
    }
    let mut log = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let start = Instant::now();
    while state.step < c.total_steps {
        let batch = stream.batch_at(state.step)?;
        let report = match train_step(&mut state, extractor.as_ref(), &batch) {
            Ok(r) => r,
            Err(e @ Error::Integrity(_)) => {
                dump_batch(&opts.out_dir, state.step + 1, &batch);
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        if report.step % c.log_every == 0 || report.step == c.total_steps {
            let rec = LogRecord::new(&report, c.lr, start.elapsed().as_secs_f64());
            writeln!(log, "{}", serde_json::to_string(&rec)?).map_err(|e| Error::io(&log_path, e))?;
            info!(
                "step {} total {:.5} L_R {:.5} L_S {:.5} L_F {:.5} L_G {:.5} D {:?}",
                rec.step, rec.total, rec.l_r, rec.l_s, rec.l_f, rec.l_g, rec.d_loss
            );
        }
        if report.step % c.checkpoint_every == 0 || report.step == c.total_steps {
            checkpoint::save(&state, &checkpoint::path_for(&ckpt_dir, report.step))?;
        }
    }
    Ok(state)
}

fn truncate_log(path: &Path, step: u64) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let kept: Vec<String> = fs::read_to_string(path)
        .map_err(|e| Error::io(path, e))?
        .lines()
        .filter(|l| serde_json::from_str::<LogRecord>(l).is_ok_and(|r| r.step <= step))
        .map(|l| format!("{l}\n"))
        .collect();
    fs::write(path, kept.concat()).map_err(|e| Error::io(path, e))
}

/// Saves the offending batch for post-mortem inspection; best effort.
fn dump_batch(out_dir: &Path, step: u64, batch: &Batch) {
    let dir = out_dir.join(format!("nonfinite_step{step:08}"));
    if fs::create_dir_all(&dir).is_err() {
        return;
    }
    for (i, (b, s)) in batch.blurry.iter().zip(&batch.sharp).enumerate() {
        for (tag, img) in [("blurry", b), ("sharp", s)] {
            if let Err(e) = img.clone().clamp01().save(&dir.join(format!("{i:03}_{tag}.png"))) {
                warn!("could not dump batch item {i}: {e}");
            }
        }
    }
    warn!("non-finite values at step {step}; batch written to {}", dir.display());
}
