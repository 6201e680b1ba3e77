//! Conditional patch discriminator.
//!
//! The candidate image and its condition are concatenated channelwise. A
//! stem convolution produces `base_width` channels; each following odd
//! layer doubles the width and halves the resolution. Every layer is a 3×3
//! convolution, batch normalization and swish. A 1×1 convolution with a
//! sigmoid yields a map of per-patch real/fake probabilities.

use candle_core::Tensor;

use super::config::DiscriminatorConfig;
use super::nn::{sigmoid, BatchNorm2d, Conv2d, ConvSpec, ParamBuilder};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
struct ConvBnSwish {
    conv: Conv2d,
    bn: BatchNorm2d,
}

impl ConvBnSwish {
    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let y = self.conv.forward(x)?;
        Ok(self.bn.forward(&y, train)?.silu()?)
    }
}

#[derive(Clone, Debug)]
pub struct Discriminator {
    config: DiscriminatorConfig,
    layers: Vec<ConvBnSwish>,
    head: Conv2d,
}

impl Discriminator {
    pub fn new(pb: &mut ParamBuilder<'_>, config: &DiscriminatorConfig) -> Result<Self> {
        config.validate()?;
        let mut layers = Vec::with_capacity(config.num_blocks + 1);
        let mut c_in = 6;
        for i in 0..=config.num_blocks {
            let c_out = config.layer_width(i);
            let spec = ConvSpec {
                stride: config.layer_stride(i),
                ..ConvSpec::SAME3.without_bias()
            };
            let mut lp = pb.pp(format!("layer{i}"));
            let conv = Conv2d::new(&mut lp.pp("conv"), c_in, c_out, spec)?;
            let bn = BatchNorm2d::new(&mut lp.pp("bn"), c_out, config.bn_momentum)?;
            layers.push(ConvBnSwish { conv, bn });
            c_in = c_out;
        }
        let head = Conv2d::new(&mut pb.pp("head"), c_in, 1, ConvSpec::POINT)?;
        Ok(Self {
            config: config.clone(),
            layers,
            head,
        })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    /// Probability map `B × 1 × h × w` with every entry in `(0, 1)`.
    ///
    /// `train` selects batch statistics (and updates the running averages)
    /// instead of the running averages.
    pub fn forward(&self, candidate: &Tensor, condition: &Tensor, train: bool) -> Result<Tensor> {
        if candidate.dims() != condition.dims() {
            return Err(Error::Input(format!(
                "discriminator pair shape mismatch {:?} vs {:?}",
                candidate.dims(),
                condition.dims()
            )));
        }
        let mut x = Tensor::cat(&[candidate, condition], 1)?;
        for layer in &self.layers {
            x = layer.forward(&x, train)?;
        }
        sigmoid(&self.head.forward(&x)?)
    }

    /// Intermediate widths after each layer (stem first).
    pub fn widths(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.conv.out_channels()).collect()
    }
}
