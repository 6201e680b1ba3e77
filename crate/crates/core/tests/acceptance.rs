//! Acceptance criteria, run in order by a single test so that the timed
//! training criterion does not compete with the others for CPU.
//!
//! Each criterion prints one `PASS`/`FAIL` line straight to stdout (bypassing
//! the test harness capture). Set `ACCEPTANCE_ONLY=3,6` to run a subset.

mod common;

use std::fs;
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use candle_core::{DType, Device, Tensor, Var};
use darkdeblur::blur::{apply_blur, rasterize_kernel, rng_for, sample_trajectory, synthesize_pair, BlurKernel, SynthConfig};
use darkdeblur::data::align::{align_pair, project, to_matrix, warp_into, AlignConfig};
use darkdeblur::data::DataSource;
use darkdeblur::metrics::color::{ciede2000, conformance_pairs};
use darkdeblur::metrics::{delta_e, psnr, psnr_values, ssim};
use darkdeblur::model::blocks::{ChannelAttention, ContextualGate, DenseAttentionBlock, DenseBlock};
use darkdeblur::model::{Ablation, Generator, GeneratorConfig, ParamStore};
use darkdeblur::objectives::{
    adversarial_generator_loss, discriminator_loss, perceptual_feature_loss, reconstruction_loss, structure_loss,
    total_loss, FeatureExtractor, IdentityFeatures, LossWeights, RandomConvFeatures,
};
use darkdeblur::train::{self, checkpoint, read_log, TrainConfig, TrainOptions, TrainState, DTYPE};
use darkdeblur::ImageTensor;
use nalgebra::Matrix3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{random_homography, textured_image};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

trait OrFail<T> {
    fn or_fail(self, what: &str) -> Result<T, String>;
}

impl<T, E: std::fmt::Display> OrFail<T> for Result<T, E> {
    fn or_fail(self, what: &str) -> Result<T, String> {
        self.map_err(|e| format!("{what}: {e}"))
    }
}

// ---------------------------------------------------------------- oracles

fn to_vec(t: &Tensor) -> Vec<f64> {
    t.flatten_all().unwrap().to_dtype(DType::F64).unwrap().to_vec1::<f64>().unwrap()
}

fn random_tensor(seed: u64, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

/// Feature map `C × H × W` held as plain nested loops' input.
#[derive(Clone)]
struct Map {
    c: usize,
    h: usize,
    w: usize,
    v: Vec<f64>,
}

impl Map {
    fn from_tensor(t: &Tensor) -> Self {
        let (_, c, h, w) = t.dims4().unwrap();
        Self { c, h, w, v: to_vec(t) }
    }

    fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.v[(c * self.h + y) * self.w + x]
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { v: self.v.iter().map(|&a| f(a)).collect(), ..self.clone() }
    }

    fn zip(&self, o: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        Self { v: self.v.iter().zip(&o.v).map(|(&a, &b)| f(a, b)).collect(), ..self.clone() }
    }

    fn concat(parts: &[Map]) -> Self {
        let (h, w) = (parts[0].h, parts[0].w);
        Self { c: parts.iter().map(|p| p.c).sum(), h, w, v: parts.iter().flat_map(|p| p.v.clone()).collect() }
    }

    fn channel_means(&self) -> Vec<f64> {
        let n = (self.h * self.w) as f64;
        (0..self.c).map(|c| self.v[c * self.h * self.w..(c + 1) * self.h * self.w].iter().sum::<f64>() / n).collect()
    }

    fn max_diff(&self, t: &Tensor) -> f64 {
        self.v.iter().zip(to_vec(t)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

/// Stride-1 cross-correlation with zero padding `(k − 1) / 2`.
fn conv_oracle(x: &Map, weight: &Tensor, bias: Option<&Tensor>) -> Map {
    let (co, ci, k, _) = weight.dims4().unwrap();
    assert_eq!(ci, x.c);
    let wv = to_vec(weight);
    let bv = bias.map(to_vec).unwrap_or_else(|| vec![0.0; co]);
    let r = (k / 2) as isize;
    let mut out = vec![0.0; co * x.h * x.w];
    for o in 0..co {
        for y in 0..x.h {
            for xx in 0..x.w {
                let mut acc = bv[o];
                for i in 0..ci {
                    for ky in 0..k {
                        for kx in 0..k {
                            let sy = y as isize + ky as isize - r;
                            let sx = xx as isize + kx as isize - r;
                            if sy >= 0 && sx >= 0 && (sy as usize) < x.h && (sx as usize) < x.w {
                                acc += wv[((o * ci + i) * k + ky) * k + kx] * x.at(i, sy as usize, sx as usize);
                            }
                        }
                    }
                }
                out[(o * x.h + y) * x.w + xx] = acc;
            }
        }
    }
    Map { c: co, h: x.h, w: x.w, v: out }
}

fn lrelu(slope: f64) -> impl Fn(f64) -> f64 {
    move |a| if a >= 0.0 { a } else { slope * a }
}

fn sigm(a: f64) -> f64 {
    1.0 / (1.0 + (-a).exp())
}

fn dense_oracle(block: &DenseBlock, x: &Map, slope: f64) -> Map {
    let mut feats = vec![x.clone()];
    for conv in block.layers() {
        let y = conv_oracle(&Map::concat(&feats), conv.weight(), conv.bias()).map(lrelu(slope));
        feats.push(y);
    }
    conv_oracle(&Map::concat(&feats), block.fusion().weight(), block.fusion().bias())
}

fn attention_oracle(att: &ChannelAttention, x: &Map) -> Map {
    let z = Map { c: x.c, h: 1, w: 1, v: x.channel_means() };
    let s = conv_oracle(&z, att.squeeze().weight(), att.squeeze().bias()).map(|a| a.max(0.0));
    let e = conv_oracle(&s, att.excite().weight(), att.excite().bias()).map(sigm);
    let plane = x.h * x.w;
    Map { v: x.v.iter().enumerate().map(|(i, a)| a * e.v[i / plane]).collect(), ..x.clone() }
}

fn reflect101(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    while i < 0 || i >= n {
        i = if i < 0 { -i } else { 2 * (n - 1) - i };
    }
    i as usize
}

/// True convolution with mirror (no edge repeat) borders.
fn blur_oracle(img: &ImageTensor, k: &BlurKernel) -> Vec<f64> {
    let (ch, h, w) = img.dims();
    let s = k.size();
    let r = (s / 2) as isize;
    let mut out = Vec::with_capacity(ch * h * w);
    for c in 0..ch {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for i in 0..s {
                    for j in 0..s {
                        let sy = reflect101(y as isize + r - i as isize, h);
                        let sx = reflect101(x as isize + r - j as isize, w);
                        acc += k.get(i, j) * img.get(c, sy, sx) as f64;
                    }
                }
                out.push(acc);
            }
        }
    }
    out
}

fn random_image(seed: u64, h: usize, w: usize, lo: f32, hi: f32) -> ImageTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ImageTensor::from_fn(3, h, w, |_, _, _| rng.random_range(lo..hi))
}

fn mean_psnr(outputs: &[ImageTensor], refs: &[ImageTensor]) -> f64 {
    outputs.iter().zip(refs).map(|(o, r)| psnr(o, r).unwrap()).sum::<f64>() / outputs.len() as f64
}

// --------------------------------------------------------------- criteria

fn c1_block_oracles() -> Outcome {
    let dev = Device::Cpu;
    let slope = 0.2;
    let mut store = ParamStore::new(5, DType::F64, &dev);
    let (dense, att, gate) = {
        let mut root = store.root();
        let dense = DenseBlock::new(&mut root.pp("dense"), 4, 3, 2, slope).or_fail("dense block")?;
        let att = ChannelAttention::new(&mut root.pp("att"), 4, 2).or_fail("attention")?;
        let gate = ContextualGate::new(&mut root.pp("gate"), 4, 3, slope).or_fail("gate")?;
        (dense, att, gate)
    };
    let x_t = random_tensor(6, &[1, 4, 7, 8], -1.0, 1.0);
    let x = Map::from_tensor(&x_t);
    let mut worst: f64 = 0.0;

    let d_ref = dense_oracle(&dense, &x, slope);
    let e = d_ref.max_diff(&dense.forward(&x_t).or_fail("dense forward")?);
    ensure!(e < 1e-6, "dense block differs from oracle by {e:e}");
    worst = worst.max(e);

    let a_ref = attention_oracle(&att, &x);
    let e = a_ref.max_diff(&att.forward(&x_t).or_fail("attention forward")?);
    ensure!(e < 1e-6, "channel attention differs from oracle by {e:e}");
    worst = worst.max(e);

    let dab = DenseAttentionBlock::from_parts(dense.clone(), Some(att.clone()));
    let e = d_ref.zip(&a_ref, |a, b| a + b).max_diff(&dab.forward(&x_t).or_fail("dense-attention forward")?);
    ensure!(e < 1e-6, "dense-attention block differs from oracle by {e:e}");
    worst = worst.max(e);

    let g = conv_oracle(&x, gate.feature().weight(), gate.feature().bias()).map(lrelu(slope));
    let f = conv_oracle(&x, gate.gate().weight(), gate.gate().bias()).map(sigm);
    let e = g.zip(&f, |a, b| a * b).max_diff(&gate.forward(&x_t).or_fail("gate forward")?);
    ensure!(e < 1e-6, "contextual gate differs from oracle by {e:e}");
    worst = worst.max(e);

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let raw: Vec<f64> = (0..25).map(|_| rng.random_range(0.0..1.0)).collect();
    let total: f64 = raw.iter().sum();
    let kernel = BlurKernel::new(5, raw.iter().map(|v| v / total).collect()).or_fail("kernel")?;
    let img = random_image(8, 8, 8, 0.1, 0.9);
    let got = apply_blur(&img, &kernel).or_fail("apply_blur")?;
    let e = blur_oracle(&img, &kernel).iter().zip(got.data()).map(|(a, b)| (a - *b as f64).abs()).fold(0.0, f64::max);
    ensure!(e < 1e-6, "blur differs from oracle by {e:e}");
    worst = worst.max(e);

    Ok(format!("dense, attention, dense+attention, gate, blur; max |Δ| {worst:.1e}"))
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Central differences of `f` at `x` along flat index `idx`.
fn numeric_grad(f: &dyn Fn(&Tensor) -> f64, x: &Tensor, idx: usize) -> f64 {
    let h = 1e-6;
    let base = to_vec(x);
    let shifted = |d: f64| {
        let mut v = base.clone();
        v[idx] += d;
        Tensor::from_vec(v, x.dims(), x.device()).unwrap()
    };
    (f(&shifted(h)) - f(&shifted(-h))) / (2.0 * h)
}

fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

fn c2_gradient_checks() -> Outcome {
    let dev = Device::Cpu;
    let mut worst: f64 = 0.0;
    let mut checked = 0;

    // Miniature dense-attention block: gradients w.r.t. input and every parameter tensor.
    let mut store = ParamStore::new(21, DType::F64, &dev);
    let block = DenseAttentionBlock::new(&mut store.root(), 3, 2, 2, 0.2, Some(1)).or_fail("block")?;
    let x = Var::from_tensor(&random_tensor(22, &[1, 3, 5, 5], -1.0, 1.0)).unwrap();
    let probe = random_tensor(23, &[1, 3, 5, 5], -1.0, 1.0);
    let objective = |input: &Tensor| (block.forward(input).unwrap() * &probe).unwrap().sum_all().unwrap();
    let grads = objective(x.as_tensor()).backward().or_fail("backward")?;

    let gx = to_vec(grads.get(x.as_tensor()).ok_or("no input gradient")?);
    let f_in = |t: &Tensor| scalar(&objective(t));
    for idx in [0, 7, 31, 52, 74] {
        let n = numeric_grad(&f_in, x.as_tensor(), idx);
        let e = rel_err(gx[idx], n);
        ensure!(e < 1e-5, "input[{idx}]: analytic {} numeric {n} (rel {e:e})", gx[idx]);
        worst = worst.max(e);
        checked += 1;
    }
    for (name, var) in store.params() {
        let g = to_vec(grads.get(var.as_tensor()).ok_or_else(|| format!("no gradient for {name}"))?);
        let original = var.as_tensor().copy().unwrap();
        let f_p = |t: &Tensor| {
            var.set(t).unwrap();
            scalar(&objective(x.as_tensor()))
        };
        for idx in [0, g.len() / 2, g.len() - 1] {
            let n = numeric_grad(&f_p, &original, idx);
            var.set(&original).unwrap();
            let e = rel_err(g[idx], n);
            ensure!(e < 1e-5, "{name}[{idx}]: analytic {} numeric {n} (rel {e:e})", g[idx]);
            worst = worst.max(e);
            checked += 1;
        }
    }

    // Full generator objective w.r.t. the generator output.
    let reference = random_tensor(24, &[1, 3, 16, 16], 0.2, 0.8);
    let out = Var::from_tensor(&(&reference + random_tensor(25, &[1, 3, 16, 16], -0.1, 0.1)).unwrap()).unwrap();
    let d_fake = random_tensor(26, &[1, 1, 2, 2], 0.2, 0.8);
    let random = RandomConvFeatures::new(3, DType::F64, &dev).or_fail("extractor")?;
    let weights = LossWeights::default();
    for (label, extractor) in [("identity", &IdentityFeatures as &dyn FeatureExtractor), ("random", &random)] {
        let loss = |o: &Tensor| total_loss(o, &reference, Some(&d_fake), extractor, &weights).unwrap().total;
        let grads = loss(out.as_tensor()).backward().or_fail("backward")?;
        let g = to_vec(grads.get(out.as_tensor()).ok_or("no output gradient")?);
        let f_out = |t: &Tensor| scalar(&loss(t));
        for idx in [0, 100, 255, 401, 767] {
            let n = numeric_grad(&f_out, out.as_tensor(), idx);
            let e = rel_err(g[idx], n);
            ensure!(e < 1e-5, "total loss ({label} features) output[{idx}]: analytic {} numeric {n} (rel {e:e})", g[idx]);
            worst = worst.max(e);
            checked += 1;
        }
    }
    Ok(format!("{checked} partial derivatives, max relative error {worst:.1e}"))
}

fn c3_loss_identities() -> Outcome {
    let dev = Device::Cpu;
    let x = random_tensor(31, &[2, 3, 32, 32], 0.0, 1.0);
    let ln2 = std::f64::consts::LN_2;
    let random = RandomConvFeatures::new(0, DType::F64, &dev).or_fail("extractor")?;

    let l_r = scalar(&reconstruction_loss(&x, &x).or_fail("L_R")?);
    ensure!(l_r.abs() < 1e-6, "L_R(x, x) = {l_r}");
    let l_s = scalar(&structure_loss(&x, &x).or_fail("L_S")?);
    ensure!(l_s.abs() < 1e-6, "L_S(x, x) = {l_s}");
    for (name, l_f) in [
        ("random", perceptual_feature_loss(&x, &x, &random)),
        ("identity", perceptual_feature_loss(&x, &x, &IdentityFeatures)),
    ] {
        let v = scalar(&l_f.or_fail("L_F")?);
        ensure!(v.abs() < 1e-6, "L_F(x, x) with {name} features = {v}");
    }

    let half = Tensor::full(0.5f64, (2, 1, 4, 4), &dev).unwrap();
    let l_g = scalar(&adversarial_generator_loss(&half).or_fail("L_G")?);
    ensure!((l_g - ln2).abs() < 1e-9, "L_G(0.5) = {l_g}, want ln 2");
    let l_d = scalar(&discriminator_loss(&half, &half).or_fail("L_D")?);
    ensure!((l_d - ln2).abs() < 1e-9, "L_D(0.5, 0.5) = {l_d}, want ln 2");

    let weights = LossWeights::default();
    ensure!(weights.lambda_f == 1e-2 && weights.lambda_g == 1e-4, "default weights {weights:?}");
    let total = scalar(&total_loss(&x, &x, Some(&half), &random, &weights).or_fail("total")?.total);
    ensure!((total - 1e-4 * ln2).abs() < 1e-9, "total at identity = {total:e}, want {:e}", 1e-4 * ln2);
    Ok(format!("L_R = {l_r:.1e}, L_S = {l_s:.1e}, L_G = L_D = ln 2, total = {total:.6e}"))
}

fn c4_identity_at_init() -> Outcome {
    let dev = Device::Cpu;
    let mut n = 0;
    for (label, cfg) in [("desk", GeneratorConfig::desk()), ("default", GeneratorConfig::default())] {
        for ablation in Ablation::ALL {
            let mut store = ParamStore::new(41, DTYPE, &dev);
            let g = Generator::new(&mut store.root(), &cfg, ablation).or_fail("generator")?;
            let count = if label == "desk" && ablation == Ablation::Full { 10 } else { 1 };
            for i in 0..count {
                let img = random_image(400 + i, 24 + 8 * (i as usize % 3), 32, 0.0, 1.0);
                let out = g.infer(&img, DTYPE, &dev).or_fail("infer")?;
                ensure!(out.data() == img.data(), "{label}/{ablation} input {i}: output differs from input");
                n += 1;
            }
        }
    }
    Ok(format!("{n} inputs over both widths and all variants reproduced bit-exactly"))
}

fn c5_kernels() -> Outcome {
    let cfg = SynthConfig::default();
    let mut worst: f64 = 0.0;
    let mut kernels = Vec::new();
    for i in 0..1000 {
        let traj = sample_trajectory(&cfg, &mut rng_for(51, i)).or_fail("trajectory")?;
        let k = rasterize_kernel(&traj, cfg.canvas_size).or_fail("rasterize")?;
        ensure!(k.weights().iter().all(|&w| w >= 0.0), "kernel {i} has negative weights");
        worst = worst.max((k.sum() - 1.0).abs());
        if i % 50 == 0 {
            kernels.push(k);
        }
    }
    ensure!(worst <= 1e-6, "a kernel sums to 1 ± {worst:e}");
    for i in 0..20 {
        let p = synthesize_pair(&random_image(52, 40, 40, 0.0, 1.0), &cfg, &mut rng_for(53, i)).or_fail("synthesize")?;
        ensure!((p.kernel.sum() - 1.0).abs() <= 1e-6, "synthesized kernel {i} sums to {}", p.kernel.sum());
    }

    let img = random_image(54, 37, 41, 0.0, 1.0);
    for size in [3, 15, 31] {
        let out = apply_blur(&img, &BlurKernel::delta(size).or_fail("delta")?).or_fail("blur")?;
        ensure!(out.data() == img.data(), "delta kernel of size {size} changed the image");
    }
    let flat = ImageTensor::filled(3, 40, 40, 0.37);
    let mut drift: f64 = 0.0;
    for k in &kernels {
        let out = apply_blur(&flat, k).or_fail("blur")?;
        drift = out.data().iter().map(|&v| (v as f64 - 0.37f32 as f64).abs()).fold(drift, f64::max);
    }
    ensure!(drift <= 1e-6, "constant image drifted by {drift:e}");
    Ok(format!("1000 kernels sum to 1 within {worst:.1e}; delta identity exact; constant drift {drift:.1e}"))
}

const OVERFIT_STEPS: u64 = 200;
const OVERFIT_BUDGET: Duration = Duration::from_secs(15 * 60);

fn c6_tiny_overfit() -> Outcome {
    let start = Instant::now();
    let dev = Device::Cpu;
    let synth = SynthConfig::default();
    let mut blurry = Vec::new();
    let mut sharp = Vec::new();
    for i in 0..8 {
        let p = synthesize_pair(&textured_image(600 + i, 128, 128), &synth, &mut rng_for(61, i)).or_fail("synthesize")?;
        blurry.push(p.blurry);
        sharp.push(p.sharp);
    }
    let before = mean_psnr(&blurry, &sharp);
    let cfg = TrainConfig {
        lr: 2e-3,
        batch_size: 2,
        total_steps: OVERFIT_STEPS,
        checkpoint_every: OVERFIT_STEPS,
        log_every: 50,
        ablation: Ablation::Full,
        ..TrainConfig::desk()
    };
    let dir = tempfile::tempdir().unwrap();
    let pairs = blurry.iter().cloned().zip(sharp.iter().cloned()).collect();
    let opts = TrainOptions { out_dir: dir.path().to_path_buf(), resume: None };
    let state = train::train(&cfg, DataSource::Pairs(pairs), &opts, &dev).or_fail("training")?;
    let outputs = blurry
        .iter()
        .map(|b| state.generator.infer(b, DTYPE, &dev))
        .collect::<Result<Vec<_>, _>>()
        .or_fail("inference")?;
    let after = mean_psnr(&outputs, &sharp);
    let elapsed = start.elapsed();
    let gain = after - before;
    let summary = format!("{before:.2} → {after:.2} dB (gain {gain:+.2} dB) in {:.0} s", elapsed.as_secs_f64());
    ensure!(gain >= 1.0, "{summary}; need ≥ +1.0 dB");
    ensure!(elapsed <= OVERFIT_BUDGET, "{summary}; over the 15 min budget");
    Ok(summary)
}

fn c7_ablation_structure() -> Outcome {
    let dev = Device::Cpu;
    let mut lines = Vec::new();
    for (label, base) in [("desk", TrainConfig::desk()), ("default", TrainConfig::default())] {
        let mut last = 0;
        let mut counts = Vec::new();
        for ablation in Ablation::ALL {
            let s = TrainState::new(TrainConfig { ablation, ..base.clone() }, &dev).or_fail("state")?;
            let names: Vec<&str> = s.gen_store.param_names().collect();
            let attention = names.iter().any(|n| n.contains(".attention."));
            let gates = names.iter().any(|n| n.starts_with("gate"));
            ensure!(attention == ablation.has_attention(), "{label}/{ablation}: attention present = {attention}");
            ensure!(gates == ablation.has_gates() && s.generator.has_gates() == gates, "{label}/{ablation}: gates = {gates}");
            ensure!(
                s.adversary.is_some() == (ablation == Ablation::Full),
                "{label}/{ablation}: discriminator present = {}",
                s.adversary.is_some()
            );
            let total = s.gen_store.num_params() + s.adversary.as_ref().map_or(0, |a| a.store.num_params());
            ensure!(total > last, "{label}: {ablation} has {total} parameters, not more than {last}");
            last = total;
            counts.push(format!("{ablation} {total}"));
        }
        lines.push(format!("{label}: {}", counts.join(" < ")));
    }
    Ok(lines.join("; "))
}

fn transfer_gap(est: &Matrix3<f64>, truth: &Matrix3<f64>, h: usize, w: usize) -> f64 {
    let mut sum = 0.0;
    let mut n = 0.0;
    for y in (0..h).step_by(16) {
        for x in (0..w).step_by(16) {
            let (a, b) = (project(est, x as f64, y as f64).unwrap(), project(truth, x as f64, y as f64).unwrap());
            sum += ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt();
            n += 1.0;
        }
    }
    sum / n
}

fn c8_alignment() -> Outcome {
    let img = textured_image(1, 160, 192);
    let (_, _, r) = align_pair(&img, &img, &AlignConfig::default()).or_fail("identity pair")?;
    let id_err = (0..3)
        .flat_map(|i| (0..3).map(move |j| (i, j)))
        .map(|(i, j)| (r.homography[i][j] - if i == j { 1.0 } else { 0.0 }).abs())
        .fold(0.0, f64::max);
    ensure!(id_err < 1e-3, "identity pair gave homography off by {id_err:e}");
    ensure!(r.crop_window.area() as f64 >= 0.99 * (160.0 * 192.0), "identity crop {:?}", r.crop_window);

    let (h, w) = (192, 192);
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let trials = 100;
    let mut ok = 0;
    for t in 0..trials {
        let base = textured_image(1000 + t, h, w);
        let g = random_homography(&mut rng, h, w, 15.0, 0.10, 0.05 * w as f64);
        let (sharp, _) = warp_into(&base, &g, h, w);
        let truth = g.try_inverse().unwrap();
        if let Ok((_, _, r)) = align_pair(&base, &sharp, &AlignConfig::default()) {
            let gap = transfer_gap(&to_matrix(&r.homography), &truth, h, w);
            if r.mean_reprojection_error < 1.0 && gap < 1.0 {
                ok += 1;
            }
        }
    }
    ensure!(ok >= 95, "recovered {ok}/{trials} known warps, need ≥ 95");
    Ok(format!("identity exact to {id_err:.1e}; recovered {ok}/{trials} known warps"))
}

fn c9_metrics() -> Outcome {
    let n = 3 * 16 * 16;
    let p = psnr_values(&vec![0.5; n], &vec![0.6; n]).or_fail("psnr")?;
    ensure!((p - 20.0).abs() < 1e-9, "PSNR(0.5, 0.6) = {p}");
    let p32 = psnr(&ImageTensor::filled(3, 16, 16, 0.5), &ImageTensor::filled(3, 16, 16, 0.6)).or_fail("psnr")?;
    ensure!((p32 - 20.0).abs() < 1e-3, "PSNR of 8-bit-free f32 images = {p32}");

    let img = textured_image(91, 64, 64);
    let s = ssim(&img, &img).or_fail("ssim")?;
    ensure!((s - 1.0).abs() < 1e-12, "SSIM(x, x) = {s}");
    let d = delta_e(&img, &img).or_fail("delta_e")?;
    ensure!(d == 0.0, "ΔE(x, x) = {d}");

    let mut worst: f64 = 0.0;
    for (i, (a, b, want)) in conformance_pairs().enumerate() {
        let e = (ciede2000(a, b) - want).abs();
        ensure!(e < 1e-4, "conformance pair {}: off by {e:e}", i + 1);
        worst = worst.max(e);
    }

    let reference = random_image(92, 48, 48, 0.2, 0.8);
    let mut prev: Option<(f64, f64, f64)> = None;
    for delta in [0.01f32, 0.05, 0.1] {
        let mut rng = ChaCha8Rng::seed_from_u64(93);
        let mut out = reference.clone();
        for v in out.data_mut() {
            *v += delta * if rng.random::<bool>() { 1.0 } else { -1.0 };
        }
        let m = (psnr(&out, &reference).unwrap(), ssim(&out, &reference).unwrap(), delta_e(&out, &reference).unwrap());
        if let Some(p) = prev {
            ensure!(m.0 < p.0 && m.1 < p.1 && m.2 > p.2, "not monotone at δ = {delta}: {p:?} → {m:?}");
        }
        prev = Some(m);
    }
    Ok(format!("PSNR 20 dB exact; SSIM(x, x) = 1; 34 CIEDE2000 pairs within {worst:.1e}; monotone in δ"))
}

fn run_cli(args: &[&str]) -> Result<(), String> {
    let argv: Vec<String> = std::iter::once("darkdeblur").chain(args.iter().copied()).map(String::from).collect();
    match darkdeblur::cli::run(argv) {
        0 => Ok(()),
        code => Err(format!("`{}` exited with {code}", args.join(" "))),
    }
}

fn tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn c10_determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let p = |rel: &str| root.join(rel).to_string_lossy().into_owned();
    fs::create_dir_all(root.join("sharp")).unwrap();
    for i in 0..4 {
        textured_image(700 + i, 64, 80).save(&root.join(format!("sharp/img{i}.png"))).or_fail("save")?;
    }
    let cfg = TrainConfig { patch_size: 64, batch_size: 2, log_every: 5, checkpoint_every: 10, ..TrainConfig::desk() };
    fs::write(root.join("train.toml"), cfg.to_toml()).unwrap();

    for run in ["a", "b"] {
        run_cli(&["synthesize", "--sharp", &p("sharp"), "--out", &p(&format!("syn_{run}")), "--seed", "7", "--save-kernels"])?;
    }
    ensure!(tree(&root.join("syn_a")) == tree(&root.join("syn_b")), "synthesized datasets differ");

    for run in ["a", "b"] {
        run_cli(&[
            "train", "--config", &p("train.toml"), "--data", &p("syn_a"), "--steps", "20", "--seed", "3", "--out",
            &p(&format!("run_{run}")),
        ])?;
    }
    let ckpts = |run: &str| tree(&root.join(format!("run_{run}/checkpoints")));
    let (ca, cb) = (ckpts("a"), ckpts("b"));
    ensure!(ca.len() == 3, "expected checkpoints at steps 0, 10, 20, found {}", ca.len());
    ensure!(ca == cb, "checkpoints differ between identical runs");
    let log = |run: &str| {
        read_log(&root.join(format!("run_{run}/{}", train::LOG_FILE)))
            .unwrap()
            .into_iter()
            .map(|r| train::LogRecord { elapsed_s: 0.0, ..r })
            .collect::<Vec<_>>()
    };
    let (la, lb) = (log("a"), log("b"));
    ensure!(la.len() == 4 && la == lb, "training logs differ ({} vs {} records)", la.len(), lb.len());

    let final_a = checkpoint::path_for(&root.join("run_a/checkpoints"), 20);
    let final_b = checkpoint::path_for(&root.join("run_b/checkpoints"), 20);
    for (run, ck) in [("a", &final_a), ("b", &final_b)] {
        let ck = ck.to_string_lossy();
        run_cli(&["evaluate", "--ckpt", &ck, "--manifest", &p("syn_a"), "--report", &p(&format!("report_{run}.json"))])?;
        run_cli(&["infer", "--ckpt", &ck, "--in", &p("syn_a/blur"), "--out", &p(&format!("out_{run}"))])?;
    }
    ensure!(fs::read(p("report_a.json")).unwrap() == fs::read(p("report_b.json")).unwrap(), "evaluation reports differ");
    ensure!(tree(&root.join("out_a")) == tree(&root.join("out_b")), "inference outputs differ");
    Ok(format!("synthesis, {} checkpoints, {} log records, reports and outputs identical", ca.len(), la.len()))
}

fn c11_shape_contract() -> Outcome {
    let dev = Device::Cpu;
    let mut checked = Vec::new();
    for (label, cfg) in [("desk", GeneratorConfig::desk()), ("default", GeneratorConfig::default())] {
        let mut store = ParamStore::new(111, DTYPE, &dev);
        let g = Generator::new(&mut store.root(), &cfg, Ablation::Full).or_fail("generator")?;
        // A non-zero tail so the network actually changes its input.
        let tail = g.tail().weight().dims().to_vec();
        store.assign("tail.weight", &random_tensor(112, &tail, -0.05, 0.05).to_dtype(DTYPE).unwrap()).or_fail("assign")?;
        let sizes: &[(usize, usize)] = if label == "desk" { &[(256, 256), (257, 311), (128, 640)] } else { &[(257, 311)] };
        for &(h, w) in sizes {
            let img = random_image(113 + h as u64, h, w, 0.0, 1.0);
            let out = g.infer(&img, DTYPE, &dev).or_fail("infer")?;
            ensure!(out.dims() == (3, h, w), "{label} {h}x{w}: output {:?}", out.dims());
            ensure!(out.data().iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)), "{label} {h}x{w}: out of range");
            ensure!(out.data() != img.data(), "{label} {h}x{w}: output unexpectedly equals input");
            checked.push(format!("{label} {h}x{w}"));
        }
    }
    Ok(format!("{} in range with matching sizes", checked.join(", ")))
}

// ----------------------------------------------------------------- runner

#[test]
fn acceptance_criteria() {
    let criteria: [(u32, &str, fn() -> Outcome); 11] = [
        (1, "block oracles", c1_block_oracles),
        (2, "gradient checks", c2_gradient_checks),
        (3, "loss identities", c3_loss_identities),
        (4, "identity at initialization", c4_identity_at_init),
        (5, "blur kernels", c5_kernels),
        (6, "tiny overfit", c6_tiny_overfit),
        (7, "ablation structure", c7_ablation_structure),
        (8, "alignment recovery", c8_alignment),
        (9, "metric conformance", c9_metrics),
        (10, "end-to-end determinism", c10_determinism),
        (11, "shape contract", c11_shape_contract),
    ];
    let only: Option<Vec<u32>> =
        std::env::var("ACCEPTANCE_ONLY").ok().map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let mut stdout = std::io::stdout();
    let mut failed = Vec::new();
    for (n, name, check) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        let t = Instant::now();
        let outcome = match catch_unwind(AssertUnwindSafe(check)) {
            Ok(r) => r,
            Err(p) => Err(format!(
                "panicked: {}",
                p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default()
            )),
        };
        let secs = t.elapsed().as_secs_f64();
        let line = match &outcome {
            Ok(detail) => format!("criterion {n:>2} {name:<28} PASS ({secs:.1} s) {detail}"),
            Err(why) => format!("criterion {n:>2} {name:<28} FAIL ({secs:.1} s) {why}"),
        };
        writeln!(stdout, "{line}").unwrap();
        stdout.flush().unwrap();
        if outcome.is_err() {
            failed.push(n);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
