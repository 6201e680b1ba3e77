//! Layer primitives shared by the generator, discriminator and feature extractors.
//!
//! Parameters are created through a [`ParamStore`], which draws initial values
//! from a seeded ChaCha8 stream so that a given seed always yields the same
//! network on every platform.

use std::collections::BTreeMap;

use candle_core::{
    backend::BackendStorage, CpuStorage, CustomOp2, DType, Device, Layout, Shape, Tensor, Var, WithDType,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Named trainable parameters plus non-trainable buffers (batch-norm statistics).
pub struct ParamStore {
    dtype: DType,
    device: Device,
    params: BTreeMap<String, Var>,
    buffers: BTreeMap<String, Var>,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType, device: &Device) -> Self {
        Self {
            dtype,
            device: device.clone(),
            params: BTreeMap::new(),
            buffers: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn root(&mut self) -> ParamBuilder<'_> {
        ParamBuilder {
            store: self,
            prefix: String::new(),
        }
    }

    /// Trainable parameters in name order.
    pub fn params(&self) -> &BTreeMap<String, Var> {
        &self.params
    }

    pub fn buffers(&self) -> &BTreeMap<String, Var> {
        &self.buffers
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.params.get(name)
    }

    /// Total number of trainable scalars.
    pub fn num_params(&self) -> usize {
        self.params.values().map(|v| v.elem_count()).sum()
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    /// Overwrites a parameter or buffer in place; shape must match.
    pub fn assign(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .params
            .get(name)
            .or_else(|| self.buffers.get(name))
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{name}`")))?;
        if var.shape() != value.shape() {
            return Err(Error::Checkpoint(format!(
                "parameter `{name}` has shape {:?}, checkpoint has {:?}",
                var.shape(),
                value.shape()
            )));
        }
        var.set(&value.to_dtype(self.dtype)?)?;
        Ok(())
    }

    fn insert_param(&mut self, name: String, t: Tensor) -> Result<Var> {
        if self.params.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        let var = Var::from_tensor(&t)?;
        self.params.insert(name, var.clone());
        Ok(var)
    }

    fn insert_buffer(&mut self, name: String, t: Tensor) -> Result<Var> {
        let var = Var::from_tensor(&t)?;
        self.buffers.insert(name, var.clone());
        Ok(var)
    }

    fn uniform(&mut self, shape: &[usize], bound: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let vals: Vec<f64> = (0..n)
            .map(|_| self.rng.random_range(-bound..bound))
            .collect();
        Ok(Tensor::from_vec(vals, shape, &self.device)?.to_dtype(self.dtype)?)
    }

    fn constant(&self, shape: &[usize], value: f64) -> Result<Tensor> {
        Ok(Tensor::full(value, shape, &self.device)?.to_dtype(self.dtype)?)
    }
}

/// Scoped view into a [`ParamStore`] that prefixes parameter names.
pub struct ParamBuilder<'a> {
    store: &'a mut ParamStore,
    prefix: String,
}

impl ParamBuilder<'_> {
    pub fn pp(&mut self, name: impl AsRef<str>) -> ParamBuilder<'_> {
        let prefix = if self.prefix.is_empty() {
            name.as_ref().to_string()
        } else {
            format!("{}.{}", self.prefix, name.as_ref())
        };
        ParamBuilder {
            store: self.store,
            prefix,
        }
    }

    fn name(&self, leaf: &str) -> String {
        if self.prefix.is_empty() {
            leaf.to_string()
        } else {
            format!("{}.{leaf}", self.prefix)
        }
    }

    /// Uniform `(-b, b)` init with `b = 1/sqrt(fan_in)`.
    pub fn uniform(&mut self, leaf: &str, shape: &[usize], fan_in: usize) -> Result<Var> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let t = self.store.uniform(shape, bound)?;
        self.store.insert_param(self.name(leaf), t)
    }

    pub fn constant(&mut self, leaf: &str, shape: &[usize], value: f64) -> Result<Var> {
        let t = self.store.constant(shape, value)?;
        self.store.insert_param(self.name(leaf), t)
    }

    pub fn buffer(&mut self, leaf: &str, shape: &[usize], value: f64) -> Result<Var> {
        let t = self.store.constant(shape, value)?;
        self.store.insert_buffer(self.name(leaf), t)
    }
}

/// 2D convolution with square kernels and symmetric zero padding.
#[derive(Clone, Debug)]
pub struct Conv2d {
    weight: Tensor,
    bias: Option<Tensor>,
    stride: usize,
    padding: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct ConvSpec {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub bias: bool,
    pub zero_init: bool,
}

impl ConvSpec {
    /// 3×3, stride 1, padding 1, with bias.
    pub const SAME3: ConvSpec = ConvSpec {
        kernel: 3,
        stride: 1,
        padding: 1,
        bias: true,
        zero_init: false,
    };
    /// 3×3, stride 2, padding 1, with bias.
    pub const DOWN3: ConvSpec = ConvSpec {
        kernel: 3,
        stride: 2,
        padding: 1,
        bias: true,
        zero_init: false,
    };
    /// 1×1 projection with bias.
    pub const POINT: ConvSpec = ConvSpec {
        kernel: 1,
        stride: 1,
        padding: 0,
        bias: true,
        zero_init: false,
    };

    pub fn without_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    pub fn zeroed(mut self) -> Self {
        self.zero_init = true;
        self
    }
}

impl Conv2d {
    pub fn new(pb: &mut ParamBuilder<'_>, c_in: usize, c_out: usize, spec: ConvSpec) -> Result<Self> {
        let k = spec.kernel;
        let shape = [c_out, c_in, k, k];
        let fan_in = c_in * k * k;
        let weight = if spec.zero_init {
            pb.constant("weight", &shape, 0.0)?
        } else {
            pb.uniform("weight", &shape, fan_in)?
        };
        let bias = if !spec.bias {
            None
        } else if spec.zero_init {
            Some(pb.constant("bias", &[c_out], 0.0)?)
        } else {
            Some(pb.uniform("bias", &[c_out], fan_in)?)
        };
        Ok(Self {
            weight: weight.as_tensor().clone(),
            bias: bias.map(|b| b.as_tensor().clone()),
            stride: spec.stride,
            padding: spec.padding,
        })
    }

    /// Wraps plain (untracked) tensors; used by frozen feature extractors.
    pub fn frozen(weight: Tensor, bias: Option<Tensor>, stride: usize, padding: usize) -> Self {
        Self {
            weight: weight.detach(),
            bias: bias.map(|b| b.detach()),
            stride,
            padding,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> Option<&Tensor> {
        self.bias.as_ref()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = conv2d(x, &self.weight, self.stride, self.padding)?;
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(&b.reshape((1, (), 1, 1))?)?),
            None => Ok(y),
        }
    }
}

/// Convolution lowered to im2col + matrix products for the forward pass and
/// both gradients; candle's CPU convolutions spend most of their time outside
/// the matrix product for the narrow layers used here.
pub fn conv2d(x: &Tensor, kernel: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let (_, c_in, _, _) = x.dims4()?;
    let (_, k_in, k_h, k_w) = kernel.dims4()?;
    if c_in != k_in {
        return Err(Error::Config(format!(
            "convolution expects {k_in} input channels, got {c_in}"
        )));
    }
    if k_h != k_w {
        return Err(Error::Config(format!("square kernels only, got {k_h}x{k_w}")));
    }
    if !x.device().is_cpu() {
        return Ok(x.conv2d(kernel, padding, stride, 1, 1)?);
    }
    let x = x.contiguous()?;
    let kernel = kernel.contiguous()?;
    Ok(x.apply_op2(&kernel, ConvOp { stride, padding })?)
}

#[derive(Clone, Copy)]
struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    padding: usize,
    out_h: usize,
    out_w: usize,
}

impl Geometry {
    fn new(x_dims: (usize, usize, usize), k: usize, stride: usize, padding: usize) -> candle_core::Result<Self> {
        let (c, h, w) = x_dims;
        if h + 2 * padding < k || w + 2 * padding < k {
            candle_core::bail!("convolution kernel {k} larger than padded input {h}x{w}");
        }
        let out_h = (h + 2 * padding - k) / stride + 1;
        let out_w = (w + 2 * padding - k) / stride + 1;
        Ok(Self { c, h, w, k, stride, padding, out_h, out_w })
    }

    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Visits every `(row, out_y, valid output x range, input x of the first
    /// valid output, input y)` run of the column matrix.
    fn for_each_run(&self, mut f: impl FnMut(usize, usize, usize, usize, usize, usize)) {
        let (s, p) = (self.stride as isize, self.padding as isize);
        for c in 0..self.c {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (c * self.k + ky) * self.k + kx;
                    // Output columns whose input x lies inside the image.
                    let off = kx as isize - p;
                    let x0 = ((-off).max(0) as usize).div_ceil(self.stride);
                    let x1 = if (self.w as isize) - off <= 0 {
                        0
                    } else {
                        (((self.w as isize - off - 1) / s) as usize + 1).min(self.out_w)
                    };
                    if x0 >= x1 {
                        continue;
                    }
                    for oy in 0..self.out_h {
                        let iy = oy as isize * s + ky as isize - p;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let ix0 = (x0 as isize * s + off) as usize;
                        f(row, oy, x0, x1, ix0, c * self.h * self.w + iy as usize * self.w);
                    }
                }
            }
        }
    }
}

/// `C × H × W` image → `(C·k·k) × (out_h·out_w)` patch matrix.
fn im2col<T: WithDType>(x: &[T], g: &Geometry) -> Vec<T> {
    let n = g.cols();
    let mut out = vec![T::zero(); g.rows() * n];
    g.for_each_run(|row, oy, x0, x1, ix0, plane| {
        let dst = &mut out[row * n + oy * g.out_w..][x0..x1];
        if g.stride == 1 {
            dst.copy_from_slice(&x[plane + ix0..plane + ix0 + (x1 - x0)]);
        } else {
            for (j, d) in dst.iter_mut().enumerate() {
                *d = x[plane + ix0 + j * g.stride];
            }
        }
    });
    out
}

/// Adjoint of [`im2col`]: scatter-adds patch columns back into an image.
fn col2im<T: WithDType>(cols: &[T], g: &Geometry) -> Vec<T> {
    let n = g.cols();
    let mut out = vec![T::zero(); g.c * g.h * g.w];
    g.for_each_run(|row, oy, x0, x1, ix0, plane| {
        let src = &cols[row * n + oy * g.out_w..][x0..x1];
        for (j, &v) in src.iter().enumerate() {
            out[plane + ix0 + j * g.stride] += v;
        }
    });
    out
}

fn batch_im2col(x: &Tensor, g: &Geometry) -> candle_core::Result<Vec<Tensor>> {
    let b = x.dim(0)?;
    let shape = (g.rows(), g.cols());
    (0..b)
        .map(|i| {
            let img = x.get(i)?.flatten_all()?;
            match x.dtype() {
                DType::F32 => Tensor::from_vec(im2col(&img.to_vec1::<f32>()?, g), shape, x.device()),
                DType::F64 => Tensor::from_vec(im2col(&img.to_vec1::<f64>()?, g), shape, x.device()),
                dt => candle_core::bail!("conv op does not support {dt:?}"),
            }
        })
        .collect()
}

struct ConvOp {
    stride: usize,
    padding: usize,
}

impl ConvOp {
    fn geometry(&self, x: &Tensor, kernel: &Tensor) -> candle_core::Result<Geometry> {
        let (_, c, h, w) = x.dims4()?;
        Geometry::new((c, h, w), kernel.dim(2)?, self.stride, self.padding)
    }
}

fn storage_tensor(s: &CpuStorage, l: &Layout) -> candle_core::Result<Tensor> {
    let range = match l.contiguous_offsets() {
        Some((start, end)) => start..end,
        None => candle_core::bail!("conv op expects contiguous inputs"),
    };
    match s {
        CpuStorage::F32(v) => Tensor::from_slice(&v[range], l.shape(), &Device::Cpu),
        CpuStorage::F64(v) => Tensor::from_slice(&v[range], l.shape(), &Device::Cpu),
        other => candle_core::bail!("conv op does not support {:?}", other.dtype()),
    }
}

impl CustomOp2 for ConvOp {
    fn name(&self) -> &'static str {
        "darkdeblur-conv2d"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let x = storage_tensor(s1, l1)?;
        let k = storage_tensor(s2, l2)?;
        let g = self.geometry(&x, &k)?;
        let c_out = k.dim(0)?;
        let w = k.reshape((c_out, g.rows()))?;
        let ys = batch_im2col(&x, &g)?
            .iter()
            .map(|cols| w.matmul(cols))
            .collect::<candle_core::Result<Vec<_>>>()?;
        let flat = Tensor::stack(&ys, 0)?.flatten_all()?;
        let storage = match flat.dtype() {
            DType::F32 => CpuStorage::F32(flat.to_vec1()?),
            DType::F64 => CpuStorage::F64(flat.to_vec1()?),
            dt => candle_core::bail!("conv op does not support {dt:?}"),
        };
        Ok((storage, Shape::from((ys.len(), c_out, g.out_h, g.out_w))))
    }

    fn bwd(
        &self,
        x: &Tensor,
        kernel: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let x = x.detach();
        let kernel = kernel.detach();
        let g = self.geometry(&x, &kernel)?;
        let (b, c_out, _, _) = grad.dims4()?;
        let grad = grad.detach().reshape((b, c_out, g.cols()))?;
        let w = kernel.reshape((c_out, g.rows()))?;
        let w_t = w.t()?;

        let mut grad_w: Option<Tensor> = None;
        let mut grad_x = Vec::with_capacity(b);
        for (i, cols) in batch_im2col(&x, &g)?.iter().enumerate() {
            let gi = grad.get(i)?;
            let gw = gi.matmul(&cols.t()?)?;
            grad_w = Some(match grad_w {
                Some(acc) => (acc + gw)?,
                None => gw,
            });
            let gcols = w_t.matmul(&gi)?;
            let img = match gcols.dtype() {
                DType::F32 => Tensor::from_vec(col2im(&gcols.flatten_all()?.to_vec1::<f32>()?, &g), (g.c, g.h, g.w), x.device())?,
                DType::F64 => Tensor::from_vec(col2im(&gcols.flatten_all()?.to_vec1::<f64>()?, &g), (g.c, g.h, g.w), x.device())?,
                dt => candle_core::bail!("conv op does not support {dt:?}"),
            };
            grad_x.push(img);
        }
        let grad_w = grad_w.expect("non-empty batch").reshape(kernel.shape())?;
        Ok((Some(Tensor::stack(&grad_x, 0)?), Some(grad_w)))
    }
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    let pos = x.relu()?;
    let neg = x.neg()?.relu()?;
    Ok((pos - (neg * slope)?)?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::sigmoid(x)?)
}

/// Per-channel parametric ReLU.
#[derive(Clone, Debug)]
pub struct PRelu {
    weight: Var,
}

impl PRelu {
    pub fn new(pb: &mut ParamBuilder<'_>, channels: usize) -> Result<Self> {
        Ok(Self {
            weight: pb.constant("weight", &[channels], 0.25)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let a = self.weight.as_tensor().reshape((1, (), 1, 1))?;
        let pos = x.relu()?;
        let neg = x.neg()?.relu()?;
        Ok((pos - neg.broadcast_mul(&a)?)?)
    }
}

/// Depth-to-space: `B × C·r² × H × W` → `B × C × H·r × W·r`.
pub fn pixel_shuffle(x: &Tensor, r: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if c % (r * r) != 0 {
        return Err(Error::Config(format!(
            "pixel shuffle needs channels divisible by {}, got {c}",
            r * r
        )));
    }
    let oc = c / (r * r);
    Ok(x
        .reshape((b, oc, r, r, h, w))?
        .permute((0, 1, 4, 2, 5, 3))?
        .reshape((b, oc, h * r, w * r))?)
}

/// Batch normalization over `(B, H, W)` with running statistics for inference.
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    gamma: Var,
    beta: Var,
    running_mean: Var,
    running_var: Var,
    momentum: f64,
    eps: f64,
}

impl BatchNorm2d {
    pub fn new(pb: &mut ParamBuilder<'_>, channels: usize, momentum: f64) -> Result<Self> {
        Ok(Self {
            gamma: pb.constant("weight", &[channels], 1.0)?,
            beta: pb.constant("bias", &[channels], 0.0)?,
            running_mean: pb.buffer("running_mean", &[channels], 0.0)?,
            running_var: pb.buffer("running_var", &[channels], 1.0)?,
            momentum,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let (mean, var) = if train {
            let mean = x.mean_keepdim(0)?.mean_keepdim(2)?.mean_keepdim(3)?;
            let centered = x.broadcast_sub(&mean)?;
            let var = centered
                .sqr()?
                .mean_keepdim(0)?
                .mean_keepdim(2)?
                .mean_keepdim(3)?;
            let n = (b * h * w) as f64;
            let unbiased = if n > 1.0 {
                (var.detach() * (n / (n - 1.0)))?
            } else {
                var.detach()
            };
            let m = self.momentum;
            let rm = ((self.running_mean.as_tensor() * (1.0 - m))?
                + (mean.detach().flatten_all()? * m)?)?;
            let rv = ((self.running_var.as_tensor() * (1.0 - m))?
                + (unbiased.flatten_all()? * m)?)?;
            self.running_mean.set(&rm)?;
            self.running_var.set(&rv)?;
            (mean, var)
        } else {
            (
                self.running_mean.as_tensor().reshape((1, c, 1, 1))?,
                self.running_var.as_tensor().reshape((1, c, 1, 1))?,
            )
        };
        let norm = x
            .broadcast_sub(&mean)?
            .broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(norm
            .broadcast_mul(&self.gamma.as_tensor().reshape((1, c, 1, 1))?)?
            .broadcast_add(&self.beta.as_tensor().reshape((1, c, 1, 1))?)?)
    }
}

/// Direct nested-loop convolution over `f64` buffers; test oracle for [`conv2d`].
#[cfg(test)]
pub(crate) fn conv2d_reference(
    x: &[f64],
    (c_in, h, w): (usize, usize, usize),
    k: &[f64],
    (c_out, kh): (usize, usize),
    bias: Option<&[f64]>,
    stride: usize,
    padding: usize,
) -> (Vec<f64>, usize, usize) {
    let oh = (h + 2 * padding - kh) / stride + 1;
    let ow = (w + 2 * padding - kh) / stride + 1;
    let mut out = vec![0.0; c_out * oh * ow];
    for o in 0..c_out {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = bias.map_or(0.0, |b| b[o]);
                for c in 0..c_in {
                    for ky in 0..kh {
                        for kx in 0..kh {
                            let iy = (oy * stride + ky) as isize - padding as isize;
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            acc += x[(c * h + iy as usize) * w + ix as usize]
                                * k[((o * c_in + c) * kh + ky) * kh + kx];
                        }
                    }
                }
                out[(o * oh + oy) * ow + ox] = acc;
            }
        }
    }
    (out, oh, ow)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn randn(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
        (a - b)
            .unwrap()
            .abs()
            .unwrap()
            .flatten_all()
            .unwrap()
            .max(0)
            .unwrap()
            .to_scalar::<f64>()
            .unwrap()
    }

    #[test]
    fn custom_conv_matches_loop_oracle() {
        for &(stride, h, w) in &[(1usize, 5usize, 6usize), (2, 5, 6), (2, 8, 7)] {
            let x = randn(&[1, 3, h, w], 1);
            let k = randn(&[4, 3, 3, 3], 2);
            let y = conv2d(&x, &k, stride, 1).unwrap();
            let xv: Vec<f64> = x.flatten_all().unwrap().to_vec1().unwrap();
            let kv: Vec<f64> = k.flatten_all().unwrap().to_vec1().unwrap();
            let (want, oh, ow) = conv2d_reference(&xv, (3, h, w), &kv, (4, 3), None, stride, 1);
            assert_eq!(y.dims(), &[1, 4, oh, ow]);
            let want = Tensor::from_vec(want, (1, 4, oh, ow), &Device::Cpu).unwrap();
            assert!(max_abs_diff(&y, &want) < 1e-12);
        }
    }

    #[test]
    fn custom_conv_gradients_match_builtin() {
        for &(stride, pad, k, h, w) in &[
            (1usize, 1usize, 3usize, 6usize, 5usize),
            (2, 1, 3, 6, 6),
            (2, 1, 3, 7, 5),
            (1, 0, 1, 4, 4),
        ] {
            let x = Var::from_tensor(&randn(&[2, 3, h, w], 3)).unwrap();
            let kern = Var::from_tensor(&randn(&[4, 3, k, k], 4)).unwrap();
            let weights = randn(&[2, 4, (h + 2 * pad - k) / stride + 1, (w + 2 * pad - k) / stride + 1], 5);

            let ours = conv2d(x.as_tensor(), kern.as_tensor(), stride, pad).unwrap();
            let g1 = (ours * &weights).unwrap().sum_all().unwrap().backward().unwrap();
            let theirs = x.as_tensor().conv2d(kern.as_tensor(), pad, stride, 1, 1).unwrap();
            let g2 = (theirs * &weights).unwrap().sum_all().unwrap().backward().unwrap();

            assert!(max_abs_diff(g1.get(&x).unwrap(), g2.get(&x).unwrap()) < 1e-10);
            assert!(max_abs_diff(g1.get(&kern).unwrap(), g2.get(&kern).unwrap()) < 1e-10);
        }
    }

    #[test]
    fn pixel_shuffle_arranges_depth_into_blocks() {
        let x = Tensor::new(&[1f32, 2., 3., 4.], &Device::Cpu)
            .unwrap()
            .reshape((1, 4, 1, 1))
            .unwrap();
        let y = pixel_shuffle(&x, 2).unwrap();
        assert_eq!(y.dims(), &[1, 1, 2, 2]);
        let v: Vec<Vec<f32>> = y.squeeze(0).unwrap().squeeze(0).unwrap().to_vec2().unwrap();
        assert_eq!(v, vec![vec![1., 2.], vec![3., 4.]]);
    }

    #[test]
    fn leaky_relu_values() {
        let x = Tensor::new(&[-2f64, 0.0, 3.0], &Device::Cpu).unwrap();
        let y: Vec<f64> = leaky_relu(&x, 0.2).unwrap().to_vec1().unwrap();
        assert_eq!(y, vec![-0.4, 0.0, 3.0]);
    }

    #[test]
    fn param_store_is_seeded() {
        let build = |seed| {
            let mut s = ParamStore::new(seed, DType::F32, &Device::Cpu);
            Conv2d::new(&mut s.root().pp("c"), 3, 4, ConvSpec::SAME3).unwrap();
            s.get("c.weight").unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap()
        };
        assert_eq!(build(7), build(7));
        assert_ne!(build(7), build(8));
    }

    #[test]
    fn batch_norm_normalizes_and_tracks_running_stats() {
        let mut store = ParamStore::new(0, DType::F64, &Device::Cpu);
        let bn = BatchNorm2d::new(&mut store.root().pp("bn"), 2, 0.1).unwrap();
        let x = (randn(&[4, 2, 3, 3], 9) * 3.0).unwrap().affine(1.0, 5.0).unwrap();
        let y = bn.forward(&x, true).unwrap();
        let m: Vec<f64> = y.mean_keepdim(0).unwrap().mean_keepdim(2).unwrap().mean_keepdim(3).unwrap()
            .flatten_all().unwrap().to_vec1().unwrap();
        assert!(m.iter().all(|v| v.abs() < 1e-10));
        let rm: Vec<f64> = store.buffers()["bn.running_mean"].flatten_all().unwrap().to_vec1().unwrap();
        // 0.9 * 0 + 0.1 * (≈5)
        assert!(rm.iter().all(|v| (v - 0.5).abs() < 0.2));
    }
}
