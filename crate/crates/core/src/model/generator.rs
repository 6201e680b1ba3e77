//! Feature-pyramid generator.
//!
//! ```text
//! x ─ head ─ E0 ─────────────────────── (+) ─ D0 ─ tail ─ (+x) ─ clamp
//!            │                         G0↑ ↑up0
//!            ↓down0                     │  │
//!            E1 ─────────────── (+) ─ D1 ─┘
//!            │                 G1↑ ↑up1
//!            ↓down1             │  │
//!            E2 ─────── (+) ─ D2 ─┘
//!            │         G2↑ ↑up2
//!            ↓down2     │  │
//!            B3 ────────┘──┘
//! ```
//!
//! `E*`, `D*` and `B3` are dense-attention blocks, `G*` contextual gates on
//! the skip paths (identity when gates are disabled).

use candle_core::{DType, Device, Tensor};

use super::blocks::{ContextualGate, DenseAttentionBlock, Downsample, Upsample};
use super::config::{Ablation, GeneratorConfig};
use super::nn::{Conv2d, ConvSpec, ParamBuilder};
use crate::error::{Error, Result};
use crate::image::{reflect_index, ImageTensor};

/// Spatial dims must be a multiple of this (three stride-2 descents).
pub const SIZE_MULTIPLE: usize = 8;

#[derive(Clone, Debug)]
pub struct Generator {
    config: GeneratorConfig,
    ablation: Ablation,
    head: Conv2d,
    encoders: Vec<DenseAttentionBlock>,
    downs: Vec<Downsample>,
    bottleneck: DenseAttentionBlock,
    ups: Vec<Upsample>,
    gates: Option<Vec<ContextualGate>>,
    decoders: Vec<DenseAttentionBlock>,
    tail: Conv2d,
}

impl Generator {
    pub fn new(pb: &mut ParamBuilder<'_>, config: &GeneratorConfig, ablation: Ablation) -> Result<Self> {
        config.validate()?;
        let lv = &config.feature_levels;
        let reduction = ablation.has_attention().then_some(config.attention_reduction);
        let dab = |pb: &mut ParamBuilder<'_>, width: usize| {
            DenseAttentionBlock::new(
                pb,
                width,
                config.dense_layers,
                config.dense_growth,
                config.leaky_slope,
                reduction,
            )
        };

        let head = Conv2d::new(&mut pb.pp("head"), 3, lv[0], ConvSpec::SAME3)?;
        let mut encoders = Vec::new();
        let mut downs = Vec::new();
        for i in 0..3 {
            encoders.push(dab(&mut pb.pp(format!("enc{i}")), lv[i])?);
            downs.push(Downsample::new(&mut pb.pp(format!("down{i}")), lv[i], lv[i + 1])?);
        }
        let bottleneck = dab(&mut pb.pp("bottleneck"), lv[3])?;
        let gates = if ablation.has_gates() {
            Some(
                (0..3)
                    .map(|i| {
                        ContextualGate::new(
                            &mut pb.pp(format!("gate{i}")),
                            lv[i],
                            config.gate_widths[i],
                            config.leaky_slope,
                        )
                    })
                    .collect::<Result<Vec<_>>>()?,
            )
        } else {
            None
        };
        let mut ups = Vec::new();
        let mut decoders = Vec::new();
        for i in 0..3 {
            ups.push(Upsample::new(&mut pb.pp(format!("up{i}")), lv[i + 1], lv[i])?);
            decoders.push(dab(&mut pb.pp(format!("dec{i}")), lv[i])?);
        }
        let tail = Conv2d::new(&mut pb.pp("tail"), lv[0], 3, ConvSpec::SAME3.zeroed())?;
        Ok(Self {
            config: config.clone(),
            ablation,
            head,
            encoders,
            downs,
            bottleneck,
            ups,
            gates,
            decoders,
            tail,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn ablation(&self) -> Ablation {
        self.ablation
    }

    pub fn tail(&self) -> &Conv2d {
        &self.tail
    }

    pub fn has_gates(&self) -> bool {
        self.gates.is_some()
    }

    /// Residual deblurring of a `B × 3 × H × W` batch; `H` and `W` must be
    /// multiples of [`SIZE_MULTIPLE`].
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = x.dims4()?;
        if c != 3 {
            return Err(Error::Input(format!("generator expects 3 channels, got {c}")));
        }
        if h % SIZE_MULTIPLE != 0 || w % SIZE_MULTIPLE != 0 {
            return Err(Error::Input(format!(
                "generator input {h}x{w} is not a multiple of {SIZE_MULTIPLE}; use forward_any"
            )));
        }
        let mut skips = Vec::with_capacity(3);
        let mut feat = self.head.forward(x)?;
        for (enc, down) in self.encoders.iter().zip(&self.downs) {
            feat = enc.forward(&feat)?;
            skips.push(feat.clone());
            feat = down.forward(&feat)?;
        }
        feat = self.bottleneck.forward(&feat)?;
        for i in (0..3).rev() {
            let up = self.ups[i].forward(&feat)?;
            let skip = match &self.gates {
                Some(gates) => gates[i].forward(&skips[i])?,
                None => skips[i].clone(),
            };
            feat = self.decoders[i].forward(&(up + skip)?)?;
        }
        let residual = self.tail.forward(&feat)?;
        Ok((x + residual)?.clamp(0.0, 1.0)?)
    }

    /// Like [`Generator::forward`] for any spatial size: reflect-pads bottom
    /// and right edges to the next multiple of 8 and crops the result back.
    pub fn forward_any(&self, x: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        let ph = h.div_ceil(SIZE_MULTIPLE) * SIZE_MULTIPLE;
        let pw = w.div_ceil(SIZE_MULTIPLE) * SIZE_MULTIPLE;
        if ph == h && pw == w {
            return self.forward(x);
        }
        let padded = reflect_pad(x, ph, pw)?;
        let y = self.forward(&padded)?;
        Ok(y.narrow(2, 0, h)?.narrow(3, 0, w)?)
    }

    /// Deblurs one image; output has the input's size and lies in `[0, 1]`.
    pub fn infer(&self, img: &ImageTensor, dtype: DType, device: &Device) -> Result<ImageTensor> {
        if img.channels() != 3 {
            return Err(Error::Input(format!(
                "generator expects 3 channels, got {}",
                img.channels()
            )));
        }
        let x = img.to_tensor(dtype, device)?.clamp(0.0, 1.0)?;
        let y = self.forward_any(&x)?;
        let out = ImageTensor::unstack(&y)?.remove(0);
        if !out.is_finite() {
            return Err(Error::Integrity("generator produced non-finite values".into()));
        }
        Ok(out)
    }
}

/// Mirror-pads dims 2 and 3 of a 4D tensor at the far edges.
pub fn reflect_pad(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (_, _, xh, xw) = x.dims4()?;
    let idx = |n: usize, len: usize| -> Result<Tensor> {
        let v: Vec<u32> = (0..n).map(|i| reflect_index(i, len) as u32).collect();
        Ok(Tensor::from_vec(v, n, x.device())?)
    };
    let y = x.index_select(&idx(h, xh)?, 2)?;
    Ok(y.index_select(&idx(w, xw)?, 3)?)
}
