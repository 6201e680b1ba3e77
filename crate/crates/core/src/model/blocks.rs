//! Generator building blocks.

use candle_core::Tensor;

use super::nn::{leaky_relu, pixel_shuffle, sigmoid, Conv2d, ConvSpec, PRelu, ParamBuilder};
use crate::error::{Error, Result};

fn check_channels(x: &Tensor, expected: usize, what: &str) -> Result<()> {
    let c = x.dim(1)?;
    if c != expected {
        return Err(Error::Config(format!(
            "{what} configured for {expected} channels, input has {c}"
        )));
    }
    Ok(())
}

/// Densely connected convolutions: layer `k` sees the concatenation of the
/// block input and every earlier layer output, and a 1×1 fusion projects the
/// full concatenation back to the input width.
#[derive(Clone, Debug)]
pub struct DenseBlock {
    channels: usize,
    layers: Vec<Conv2d>,
    fusion: Conv2d,
    slope: f64,
}

impl DenseBlock {
    pub fn new(
        pb: &mut ParamBuilder<'_>,
        channels: usize,
        layers: usize,
        growth: usize,
        slope: f64,
    ) -> Result<Self> {
        let convs = (0..layers)
            .map(|k| {
                Conv2d::new(
                    &mut pb.pp(format!("layer{k}")),
                    channels + k * growth,
                    growth,
                    ConvSpec::SAME3,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let fusion = Conv2d::new(
            &mut pb.pp("fusion"),
            channels + layers * growth,
            channels,
            ConvSpec::POINT,
        )?;
        Ok(Self {
            channels,
            layers: convs,
            fusion,
            slope,
        })
    }

    pub fn layers(&self) -> &[Conv2d] {
        &self.layers
    }

    pub fn fusion(&self) -> &Conv2d {
        &self.fusion
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        check_channels(x, self.channels, "dense block")?;
        let mut features = vec![x.clone()];
        for conv in &self.layers {
            let input = Tensor::cat(&features, 1)?;
            features.push(leaky_relu(&conv.forward(&input)?, self.slope)?);
        }
        self.fusion.forward(&Tensor::cat(&features, 1)?)
    }
}

/// Squeeze-and-excitation gating computed from a feature map.
#[derive(Clone, Debug)]
pub struct ChannelAttention {
    channels: usize,
    squeeze: Conv2d,
    excite: Conv2d,
}

impl ChannelAttention {
    pub fn new(pb: &mut ParamBuilder<'_>, channels: usize, reduction: usize) -> Result<Self> {
        let hidden = (channels / reduction).max(1);
        Ok(Self {
            channels,
            squeeze: Conv2d::new(&mut pb.pp("squeeze"), channels, hidden, ConvSpec::POINT)?,
            excite: Conv2d::new(&mut pb.pp("excite"), hidden, channels, ConvSpec::POINT)?,
        })
    }

    /// Zero-initialized variant whose scaling factors are all exactly 0.5.
    pub fn zeroed(pb: &mut ParamBuilder<'_>, channels: usize, reduction: usize) -> Result<Self> {
        let hidden = (channels / reduction).max(1);
        Ok(Self {
            channels,
            squeeze: Conv2d::new(&mut pb.pp("squeeze"), channels, hidden, ConvSpec::POINT.zeroed())?,
            excite: Conv2d::new(&mut pb.pp("excite"), hidden, channels, ConvSpec::POINT.zeroed())?,
        })
    }

    pub fn squeeze(&self) -> &Conv2d {
        &self.squeeze
    }

    pub fn excite(&self) -> &Conv2d {
        &self.excite
    }

    /// Per-channel global average `B × C × 1 × 1`.
    pub fn descriptor(x: &Tensor) -> Result<Tensor> {
        Ok(x.mean_keepdim(2)?.mean_keepdim(3)?)
    }

    /// Scaling factors in `(0, 1)`, shape `B × C × 1 × 1`.
    pub fn scaling(&self, x: &Tensor) -> Result<Tensor> {
        check_channels(x, self.channels, "channel attention")?;
        let z = Self::descriptor(x)?;
        let s = self.squeeze.forward(&z)?.relu()?;
        sigmoid(&self.excite.forward(&s)?)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.broadcast_mul(&self.scaling(x)?)?)
    }
}

/// Dense block plus an attention-rescaled copy of the block input added as a
/// residual. Without attention this is the plain dense block.
#[derive(Clone, Debug)]
pub struct DenseAttentionBlock {
    dense: DenseBlock,
    attention: Option<ChannelAttention>,
}

impl DenseAttentionBlock {
    pub fn new(
        pb: &mut ParamBuilder<'_>,
        channels: usize,
        layers: usize,
        growth: usize,
        slope: f64,
        attention_reduction: Option<usize>,
    ) -> Result<Self> {
        let dense = DenseBlock::new(&mut pb.pp("dense"), channels, layers, growth, slope)?;
        let attention = attention_reduction
            .map(|r| ChannelAttention::new(&mut pb.pp("attention"), channels, r))
            .transpose()?;
        Ok(Self { dense, attention })
    }

    pub fn from_parts(dense: DenseBlock, attention: Option<ChannelAttention>) -> Self {
        Self { dense, attention }
    }

    pub fn dense(&self) -> &DenseBlock {
        &self.dense
    }

    pub fn attention(&self) -> Option<&ChannelAttention> {
        self.attention.as_ref()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dense = self.dense.forward(x)?;
        match &self.attention {
            Some(att) => Ok((dense + att.forward(x)?)?),
            None => Ok(dense),
        }
    }
}

/// `LeakyReLU(W_g * x) ⊙ sigmoid(W_f * x)` over two parallel 3×3 convolutions.
#[derive(Clone, Debug)]
pub struct ContextualGate {
    feature: Conv2d,
    gate: Conv2d,
    slope: f64,
}

impl ContextualGate {
    pub fn new(pb: &mut ParamBuilder<'_>, c_in: usize, width: usize, slope: f64) -> Result<Self> {
        Ok(Self {
            feature: Conv2d::new(&mut pb.pp("feature"), c_in, width, ConvSpec::SAME3)?,
            gate: Conv2d::new(&mut pb.pp("gate"), c_in, width, ConvSpec::SAME3)?,
            slope,
        })
    }

    pub fn feature(&self) -> &Conv2d {
        &self.feature
    }

    pub fn gate(&self) -> &Conv2d {
        &self.gate
    }

    pub fn out_channels(&self) -> usize {
        self.feature.out_channels()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        check_channels(x, self.feature.in_channels(), "contextual gate")?;
        let g = leaky_relu(&self.feature.forward(x)?, self.slope)?;
        let f = sigmoid(&self.gate.forward(x)?)?;
        Ok((g * f)?)
    }
}

/// Strided 3×3 convolution to the next (coarser) level.
#[derive(Clone, Debug)]
pub struct Downsample {
    conv: Conv2d,
}

impl Downsample {
    pub fn new(pb: &mut ParamBuilder<'_>, c_in: usize, c_out: usize) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(pb, c_in, c_out, ConvSpec::DOWN3)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.conv.forward(x)
    }
}

/// Sub-pixel upsampling: 3×3 conv to 4× the target width, depth-to-space by 2, PReLU.
#[derive(Clone, Debug)]
pub struct Upsample {
    conv: Conv2d,
    act: PRelu,
}

impl Upsample {
    pub fn new(pb: &mut ParamBuilder<'_>, c_in: usize, c_out: usize) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(&mut pb.pp("conv"), c_in, 4 * c_out, ConvSpec::SAME3)?,
            act: PRelu::new(&mut pb.pp("act"), c_out)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = pixel_shuffle(&self.conv.forward(x)?, 2)?;
        self.act.forward(&y)
    }
}
