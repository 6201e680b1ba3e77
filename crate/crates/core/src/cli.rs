//! Command-line entry point: `synthesize`, `align`, `train`, `infer`, `evaluate`.
//!
//! Exit codes: 0 success, 1 user error (bad flags, unreadable inputs),
//! 2 internal failure. The compute device comes from `DARKDEBLUR_DEVICE`
//! (`cpu`, `cuda[:N]`, `metal[:N]`; default `cpu`).

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::Device;
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{error, info, warn};
use serde::Serialize;

use crate::blur::{rng_for, synthesize_pair, SynthConfig};
use crate::data::align::{align_pair, AlignConfig, AlignmentResult};
use crate::data::{DataSource, DatasetManifest, ManifestEntry};
use crate::error::{Error, Result};
use crate::image::{list_images, ImageTensor};
use crate::metrics::{evaluate, EvalTarget};
use crate::model::Ablation;
use crate::objectives::ExtractorSpec;
use crate::train::{checkpoint, latest_checkpoint, train, TrainConfig, TrainOptions, CHECKPOINT_DIR, DTYPE};

pub const DEVICE_ENV: &str = "DARKDEBLUR_DEVICE";
pub const MANIFEST_FILE: &str = "manifest.tsv";
pub const ALIGN_LOG: &str = "alignment.jsonl";

#[derive(Parser, Debug)]
#[command(name = "darkdeblur", version, about = "Low-light motion deblurring toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Blur sharp images with random camera-shake kernels.
    Synthesize(SynthesizeArgs),
    /// Register sharp images onto their blurry counterparts.
    Align(AlignArgs),
    /// Train a generator (and discriminator for the full variant).
    Train(TrainArgs),
    /// Deblur one image or a directory of images.
    Infer(InferArgs),
    /// Score deblurred images against sharp references.
    Evaluate(EvaluateArgs),
}

#[derive(Args, Debug)]
pub struct SynthesizeArgs {
    /// Directory of sharp images (or a single image).
    #[arg(long)]
    pub sharp: PathBuf,
    /// Output root; receives `blur/`, `sharp/` and a manifest.
    #[arg(long)]
    pub out: PathBuf,
    /// TOML file with blur-synthesis settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Also write each kernel as a grayscale image under `kernels/`.
    #[arg(long)]
    pub save_kernels: bool,
}

#[derive(Args, Debug)]
pub struct AlignArgs {
    /// Blurry image or directory.
    #[arg(long)]
    pub blurry: PathBuf,
    /// Sharp image or directory (matched to blurry images by file name).
    #[arg(long)]
    pub sharp: PathBuf,
    /// Output root; receives aligned `blur/`, `sharp/`, a manifest and a diagnostics log.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Lowe ratio for descriptor matching.
    #[arg(long)]
    pub ratio: Option<f32>,
    /// RANSAC inlier threshold in pixels.
    #[arg(long)]
    pub ransac_threshold: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// Full-width networks and default hyperparameters (needs VGG19 weights).
    Standard,
    /// Narrow networks and random perceptual features for CPU runs.
    Desk,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// TOML training configuration; unspecified fields take the standard defaults.
    #[arg(long, conflicts_with = "preset")]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Preset::Standard)]
    pub preset: Preset,
    /// Sharp-image directory (blur synthesized on the fly), a directory with
    /// `blur/` and `sharp/` subdirectories, or a manifest file.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub ablation: Option<Ablation>,
    /// Total number of training steps.
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Perceptual feature extractor: identity, random[:seed] or vgg19:<path>.
    #[arg(long)]
    pub extractor: Option<ExtractorSpec>,
    /// Checkpoint to continue from, or `auto` for the latest one in `--out`.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long, default_value = "runs/train")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct InferArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Image file or directory.
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
#[command(group(clap::ArgGroup::new("target").required(true).args(["ckpt", "outputs_dir", "identity"])))]
pub struct EvaluateArgs {
    /// Run the generator from this checkpoint.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// Score pre-deblurred images named like the blurry inputs.
    #[arg(long)]
    pub outputs_dir: Option<PathBuf>,
    /// Score the blurry inputs themselves (baseline).
    #[arg(long)]
    pub identity: bool,
    /// Manifest file, or a directory with `blur/` and `sharp/` subdirectories.
    #[arg(long)]
    pub manifest: PathBuf,
    /// JSON report path; a Markdown table is written next to it.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Dataset label for the report (defaults to the manifest's source).
    #[arg(long)]
    pub dataset: Option<String>,
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match std::panic::catch_unwind(|| dispatch(cli.command)) {
        Ok(Ok(())) => 0,
        Ok(Err(e)) => {
            error!("{e}");
            eprintln!("error: {e}");
            if e.is_user_error() {
                1
            } else {
                2
            }
        }
        Err(_) => {
            eprintln!("error: internal failure (panic)");
            2
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Synthesize(a) => synthesize_cmd(&a),
        Command::Align(a) => align_cmd(&a),
        Command::Train(a) => train_cmd(&a),
        Command::Infer(a) => infer_cmd(&a),
        Command::Evaluate(a) => evaluate_cmd(&a),
    }
}

/// Device named by `DARKDEBLUR_DEVICE`.
pub fn device_from_env() -> Result<Device> {
    let spec = std::env::var(DEVICE_ENV).unwrap_or_else(|_| "cpu".into());
    let (kind, ordinal) = match spec.split_once(':') {
        Some((k, n)) => {
            let n = n.parse().map_err(|_| Error::Config(format!("bad device ordinal in {DEVICE_ENV}={spec:?}")))?;
            (k.to_string(), n)
        }
        None => (spec.clone(), 0),
    };
    let unavailable = |e: candle_core::Error| Error::Config(format!("device {spec:?} unavailable: {e}"));
    match kind.as_str() {
        "cpu" => Ok(Device::Cpu),
        "cuda" => Device::new_cuda(ordinal).map_err(unavailable),
        "metal" => Device::new_metal(ordinal).map_err(unavailable),
        _ => Err(Error::Config(format!("unknown device {spec:?} in {DEVICE_ENV}; expected cpu, cuda[:N] or metal[:N]"))),
    }
}

fn print_config(command: &str, cfg: &impl Serialize) {
    match toml::to_string(cfg) {
        Ok(text) => {
            println!("# resolved {command} configuration\n{text}");
            info!("resolved {command} configuration:\n{text}");
        }
        Err(e) => warn!("could not render {command} configuration: {e}"),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Image files under `path`, or `path` itself when it is a file.
fn collect_images(path: &Path) -> Result<Vec<PathBuf>> {
    if path.is_dir() {
        list_images(path)
    } else if path.is_file() {
        Ok(vec![path.to_path_buf()])
    } else {
        Err(Error::Input(format!("{} does not exist", path.display())))
    }
}

/// PNG name for an output derived from `input` (JPEG inputs become PNG).
fn png_name(input: &Path) -> PathBuf {
    let name = PathBuf::from(input.file_name().unwrap_or_default());
    if name.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
        name
    } else {
        name.with_extension("png")
    }
}

fn relative_manifest(names: &[PathBuf], source: &str) -> DatasetManifest {
    DatasetManifest {
        entries: names
            .iter()
            .map(|n| ManifestEntry { blurry: Path::new("blur").join(n), sharp: Path::new("sharp").join(n) })
            .collect(),
        split: String::new(),
        source: source.into(),
    }
}

#[derive(Serialize)]
struct SynthesizeResolved<'a> {
    sharp: &'a Path,
    out: &'a Path,
    save_kernels: bool,
    synth: &'a SynthConfig,
}

fn synthesize_cmd(a: &SynthesizeArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => SynthConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    print_config("synthesize", &SynthesizeResolved { sharp: &a.sharp, out: &a.out, save_kernels: a.save_kernels, synth: &cfg });

    let inputs = collect_images(&a.sharp)?;
    if inputs.is_empty() {
        return Err(Error::Input(format!("no images found in {}", a.sharp.display())));
    }
    let (blur_dir, sharp_dir, kernel_dir) = (a.out.join("blur"), a.out.join("sharp"), a.out.join("kernels"));
    create_dir(&blur_dir)?;
    create_dir(&sharp_dir)?;
    if a.save_kernels {
        create_dir(&kernel_dir)?;
    }
    let mut names = Vec::new();
    for (i, path) in inputs.iter().enumerate() {
        let img = match ImageTensor::load(path) {
            Ok(img) => img,
            Err(e) => {
                warn!("skipping {}: {e}", path.display());
                continue;
            }
        };
        // Seeded by position so each image's blur is independent of the others.
        let pair = synthesize_pair(&img, &cfg, &mut rng_for(cfg.seed, i as u64))?;
        let name = png_name(path);
        pair.blurry.save(&blur_dir.join(&name))?;
        pair.sharp.save(&sharp_dir.join(&name))?;
        if a.save_kernels {
            pair.kernel.trimmed().to_image().save(&kernel_dir.join(&name))?;
        }
        info!("{}: kernel {}x{}, noise sigma {:.4}", name.display(), pair.kernel.size(), pair.kernel.size(), pair.sigma);
        names.push(name);
    }
    if names.is_empty() {
        return Err(Error::Input(format!("no readable images in {}", a.sharp.display())));
    }
    relative_manifest(&names, "synthesized").save(&a.out.join(MANIFEST_FILE))?;
    println!("wrote {} pair(s) to {}", names.len(), a.out.display());
    Ok(())
}

#[derive(Serialize)]
struct AlignRecord<'a> {
    image_id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    result: Option<&'a AlignmentResult>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

#[derive(Serialize)]
struct AlignResolved<'a> {
    blurry: &'a Path,
    sharp: &'a Path,
    out: &'a Path,
    align: &'a AlignConfig,
}

fn align_cmd(a: &AlignArgs) -> Result<()> {
    let mut cfg = AlignConfig::default();
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(r) = a.ratio {
        cfg.ratio = r;
    }
    if let Some(t) = a.ransac_threshold {
        cfg.ransac_threshold = t;
    }
    print_config("align", &AlignResolved { blurry: &a.blurry, sharp: &a.sharp, out: &a.out, align: &cfg });

    let pairs: Vec<(PathBuf, PathBuf)> = match (a.blurry.is_dir(), a.sharp.is_dir()) {
        (true, true) => list_images(&a.blurry)?
            .into_iter()
            .filter_map(|b| {
                let s = a.sharp.join(b.file_name()?);
                if s.is_file() {
                    Some((b, s))
                } else {
                    warn!("no sharp counterpart for {}; skipped", b.display());
                    None
                }
            })
            .collect(),
        (false, false) if a.blurry.is_file() && a.sharp.is_file() => vec![(a.blurry.clone(), a.sharp.clone())],
        _ => return Err(Error::Input("--blurry and --sharp must both be files or both be directories".into())),
    };
    if pairs.is_empty() {
        return Err(Error::Input("no image pairs to align".into()));
    }
    create_dir(&a.out.join("blur"))?;
    create_dir(&a.out.join("sharp"))?;
    let mut log = String::new();
    let mut names = Vec::new();
    for (b, s) in &pairs {
        let name = png_name(b);
        let id = name.display().to_string();
        let outcome = ImageTensor::load(b)
            .and_then(|bi| Ok((bi, ImageTensor::load(s)?)))
            .and_then(|(bi, si)| align_pair(&bi, &si, &cfg));
        let record = match &outcome {
            Ok((bc, sc, res)) => {
                bc.save(&a.out.join("blur").join(&name))?;
                sc.save(&a.out.join("sharp").join(&name))?;
                if res.low_confidence {
                    warn!("{id}: low-confidence alignment (mean error {:.3} px)", res.mean_reprojection_error);
                }
                info!(
                    "{id}: {} inliers / {} matches, mean error {:.3} px",
                    res.inlier_count, res.match_count, res.mean_reprojection_error
                );
                names.push(name.clone());
                AlignRecord { image_id: id, result: Some(res), error: None }
            }
            Err(e) if e.is_user_error() => {
                warn!("{id}: {e}");
                AlignRecord { image_id: id, result: None, error: Some(e.to_string()) }
            }
            Err(e) => return Err(Error::Internal(format!("{id}: {e}"))),
        };
        log.push_str(&serde_json::to_string(&record)?);
        log.push('\n');
    }
    let log_path = a.out.join(ALIGN_LOG);
    fs::write(&log_path, log).map_err(|e| Error::io(&log_path, e))?;
    if names.is_empty() {
        return Err(Error::Alignment(format!("no pair could be aligned; see {}", log_path.display())));
    }
    relative_manifest(&names, "aligned").save(&a.out.join(MANIFEST_FILE))?;
    println!("aligned {} of {} pair(s) into {}", names.len(), pairs.len(), a.out.display());
    Ok(())
}

fn train_cmd(a: &TrainArgs) -> Result<()> {
    let mut cfg = match (&a.config, a.preset) {
        (Some(p), _) => TrainConfig::load(p)?,
        (None, Preset::Standard) => TrainConfig::default(),
        (None, Preset::Desk) => TrainConfig::desk(),
    };
    if let Some(v) = a.ablation {
        cfg.ablation = v;
    }
    if let Some(v) = a.steps {
        cfg.total_steps = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.lr {
        cfg.lr = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = &a.extractor {
        cfg.extractor = v.clone();
    }
    cfg.validate()?;

    let resume = match &a.resume {
        Some(p) if p.as_os_str() == "auto" => {
            let found = latest_checkpoint(&a.out.join(CHECKPOINT_DIR))?;
            if found.is_none() {
                info!("no checkpoint under {}; starting fresh", a.out.display());
            }
            found
        }
        other => other.clone(),
    };
    let source = if a.data.is_file() {
        DataSource::Manifest(a.data.clone())
    } else if a.data.join("blur").is_dir() && a.data.join("sharp").is_dir() {
        create_dir(&a.out)?;
        let path = a.out.join("train_manifest.tsv");
        DatasetManifest::from_pair_dirs(&a.data)?.save(&path)?;
        DataSource::Manifest(path)
    } else if a.data.is_dir() {
        DataSource::SharpDir(a.data.clone())
    } else {
        return Err(Error::Input(format!("training data {} does not exist", a.data.display())));
    };
    print_config("train", &cfg);
    let device = device_from_env()?;
    let state = train(&cfg, source, &TrainOptions { out_dir: a.out.clone(), resume }, &device)?;
    println!("trained to step {}; checkpoints in {}", state.step, a.out.join(CHECKPOINT_DIR).display());
    Ok(())
}

#[derive(Serialize)]
struct InferResolved<'a> {
    ckpt: &'a Path,
    input: &'a Path,
    out: &'a Path,
    device: String,
}

fn infer_cmd(a: &InferArgs) -> Result<()> {
    let device = device_from_env()?;
    print_config("infer", &InferResolved { ckpt: &a.ckpt, input: &a.input, out: &a.out, device: format!("{device:?}") });
    let state = checkpoint::load(&a.ckpt, &device)?;
    let inputs = collect_images(&a.input)?;
    if inputs.is_empty() {
        return Err(Error::Input(format!("no images found in {}", a.input.display())));
    }
    create_dir(&a.out)?;
    let mut done = 0;
    let mut last_err = None;
    for path in &inputs {
        // Each image stands alone: a bad file fails only its own entry.
        let result = ImageTensor::load(path).and_then(|img| state.generator.infer(&img, DTYPE, &device)).and_then(|out| {
            let dst = a.out.join(png_name(path));
            out.save(&dst)?;
            Ok(dst)
        });
        match result {
            Ok(dst) => {
                info!("{} -> {}", path.display(), dst.display());
                done += 1;
            }
            Err(e) => {
                warn!("{}: {e}", path.display());
                last_err = Some(e);
            }
        }
    }
    println!("deblurred {done} of {} image(s) into {}", inputs.len(), a.out.display());
    match (done, last_err) {
        (0, Some(e)) => Err(e),
        _ => Ok(()),
    }
}

#[derive(Serialize)]
struct EvaluateResolved<'a> {
    target: String,
    manifest: &'a Path,
    dataset: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    report: Option<&'a Path>,
}

fn evaluate_cmd(a: &EvaluateArgs) -> Result<()> {
    let target = match (&a.ckpt, &a.outputs_dir, a.identity) {
        (Some(c), None, false) => EvalTarget::Checkpoint(c.clone()),
        (None, Some(d), false) => EvalTarget::OutputsDir(d.clone()),
        (None, None, true) => EvalTarget::Identity,
        _ => return Err(Error::Config("choose exactly one of --ckpt, --outputs-dir, --identity".into())),
    };
    let manifest = if a.manifest.is_dir() {
        DatasetManifest::from_pair_dirs(&a.manifest)?
    } else {
        DatasetManifest::load(&a.manifest)?
    };
    let dataset = match &a.dataset {
        Some(d) => d.clone(),
        None if !manifest.source.is_empty() => manifest.source.clone(),
        None => a.manifest.file_stem().map_or_else(|| "dataset".into(), |s| s.to_string_lossy().into_owned()),
    };
    print_config(
        "evaluate",
        &EvaluateResolved { target: format!("{target:?}"), manifest: &a.manifest, dataset: &dataset, report: a.report.as_deref() },
    );
    let device = device_from_env()?;
    let report = evaluate(&target, &manifest, &dataset, &device)?;
    if let Some(path) = &a.report {
        report.save(path)?;
        info!("report written to {}", path.display());
    }
    println!("{}", report.to_markdown());
    Ok(())
}
