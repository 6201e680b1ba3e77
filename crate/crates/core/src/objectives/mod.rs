//! Training objectives: reconstruction, structure, perceptual and
//! adversarial terms plus their weighted combination.
//!
//! All losses take `B × C × H × W` tensors and return differentiable scalar
//! tensors, so they can be backpropagated directly.

pub mod perceptual;
pub mod ssim;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
pub use perceptual::{ExtractorSpec, FeatureExtractor, IdentityFeatures, RandomConvFeatures, Vgg19Features};

/// Probabilities are clamped to `[EPS, 1 − EPS]` before taking logs.
pub const EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_f: f64,
    pub lambda_g: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_f: 1e-2, lambda_g: 1e-4 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_f >= 0.0 && self.lambda_g >= 0.0) || !self.lambda_f.is_finite() || !self.lambda_g.is_finite() {
            return Err(Error::Config(format!(
                "loss weights must be finite and non-negative, got lambda_f={} lambda_g={}",
                self.lambda_f, self.lambda_g
            )));
        }
        Ok(())
    }

    pub fn combine(&self, reconstruction: f64, structure: f64, perceptual: f64, adversarial: f64) -> f64 {
        reconstruction + structure + self.lambda_f * perceptual + self.lambda_g * adversarial
    }
}

/// Scalar values of each loss term for logging.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub reconstruction: f64,
    pub structure: f64,
    pub perceptual: f64,
    pub adversarial: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn from_components(
        weights: &LossWeights,
        reconstruction: f64,
        structure: f64,
        perceptual: f64,
        adversarial: f64,
    ) -> Self {
        Self {
            reconstruction,
            structure,
            perceptual,
            adversarial,
            total: weights.combine(reconstruction, structure, perceptual, adversarial),
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.reconstruction, self.structure, self.perceptual, self.adversarial, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Differentiable total plus its logged breakdown.
pub struct LossTerms {
    pub total: Tensor,
    pub breakdown: LossBreakdown,
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Input(format!("{what}: shape mismatch {:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

pub(crate) fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?)
}

/// Mean absolute difference.
pub fn reconstruction_loss(output: &Tensor, reference: &Tensor) -> Result<Tensor> {
    same_shape(output, reference, "reconstruction loss")?;
    Ok((output - reference)?.abs()?.mean_all()?)
}

/// `1 − MS-SSIM`.
pub fn structure_loss(output: &Tensor, reference: &Tensor) -> Result<Tensor> {
    same_shape(output, reference, "structure loss")?;
    Ok((1.0 - ssim::ms_ssim(output, reference)?)?)
}

/// L1 distance of extractor features, normalized by the feature element count.
pub fn perceptual_feature_loss(output: &Tensor, reference: &Tensor, extractor: &dyn FeatureExtractor) -> Result<Tensor> {
    same_shape(output, reference, "perceptual loss")?;
    let a = extractor.features(output)?;
    let b = extractor.features(reference)?.detach();
    Ok((a - b)?.abs()?.mean_all()?)
}

fn clamp_prob(p: &Tensor) -> Result<Tensor> {
    Ok(p.clamp(EPS, 1.0 - EPS)?)
}

/// Mean of `−log D(fake)` over the discriminator's patch map.
pub fn adversarial_generator_loss(d_fake: &Tensor) -> Result<Tensor> {
    Ok(clamp_prob(d_fake)?.log()?.neg()?.mean_all()?)
}

/// Binary cross-entropy with targets 1 for real pairs and 0 for fake pairs, halved.
pub fn discriminator_loss(d_real: &Tensor, d_fake: &Tensor) -> Result<Tensor> {
    same_shape(d_real, d_fake, "discriminator loss")?;
    let real = clamp_prob(d_real)?.log()?.neg()?;
    let fake = (1.0 - clamp_prob(d_fake)?)?.log()?.neg()?;
    Ok(((real + fake)?.mean_all()? * 0.5)?)
}

/// Weighted multi-term generator loss.
///
/// With `d_fake = None` the adversarial term is omitted (reported as 0).
pub fn total_loss(
    output: &Tensor,
    reference: &Tensor,
    d_fake: Option<&Tensor>,
    extractor: &dyn FeatureExtractor,
    weights: &LossWeights,
) -> Result<LossTerms> {
    weights.validate()?;
    let l_r = reconstruction_loss(output, reference)?;
    let l_s = structure_loss(output, reference)?;
    let l_f = perceptual_feature_loss(output, reference, extractor)?;
    let mut total = ((&l_r + &l_s)? + (&l_f * weights.lambda_f)?)?;
    let mut adversarial = 0.0;
    if let Some(d) = d_fake {
        let l_g = adversarial_generator_loss(d)?;
        adversarial = scalar(&l_g)?;
        total = (total + (l_g * weights.lambda_g)?)?;
    }
    let breakdown = LossBreakdown::from_components(weights, scalar(&l_r)?, scalar(&l_s)?, scalar(&l_f)?, adversarial);
    Ok(LossTerms { total, breakdown })
}
