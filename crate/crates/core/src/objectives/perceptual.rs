//! Frozen feature extractors for the perceptual loss.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::nn::Conv2d;

/// Maps a `B × 3 × H × W` batch in `[0, 1]` to a feature map.
pub trait FeatureExtractor: Send + Sync {
    fn name(&self) -> String;
    fn features(&self, x: &Tensor) -> Result<Tensor>;
}

/// Features are the raw pixels; reduces the perceptual loss to L1.
#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityFeatures;

impl FeatureExtractor for IdentityFeatures {
    fn name(&self) -> String {
        "identity".into()
    }

    fn features(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.clone())
    }
}

enum Stage {
    Conv(Conv2d),
    Pool,
}

/// 19-layer VGG convolutional trunk up to the last ReLU of its fifth block.
///
/// Weights are read from a safetensors file using the common
/// `features.{i}.weight` / `features.{i}.bias` layout.
pub struct Vgg19Features {
    stages: Vec<Stage>,
    mean: Tensor,
    std: Tensor,
    source: PathBuf,
}

/// Channel plan: `0` marks a 2×2 max-pool.
const VGG19_PLAN: [usize; 20] = [
    64, 64, 0, 128, 128, 0, 256, 256, 256, 256, 0, 512, 512, 512, 512, 0, 512, 512, 512, 512,
];

impl Vgg19Features {
    pub fn load(path: &Path, dtype: DType, device: &Device) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::Config(format!(
                "VGG19 weights not found at {}; export torchvision's vgg19 `features` \
                 state dict to safetensors (keys features.N.weight / features.N.bias) \
                 or select the `random` extractor",
                path.display()
            )));
        }
        let tensors = candle_core::safetensors::load(path, device)?;
        let mut stages = Vec::new();
        let mut c_in = 3;
        // Index into the torchvision `features` Sequential (conv, relu, pool modules).
        let mut module = 0;
        for &width in &VGG19_PLAN {
            if width == 0 {
                stages.push(Stage::Pool);
                module += 1;
                continue;
            }
            let fetch = |leaf: &str| -> Result<Tensor> {
                let key = format!("features.{module}.{leaf}");
                let t = tensors
                    .get(&key)
                    .ok_or_else(|| Error::Config(format!("{}: missing tensor {key}", path.display())))?;
                Ok(t.to_dtype(dtype)?)
            };
            let weight = fetch("weight")?;
            if weight.dims() != [width, c_in, 3, 3] {
                return Err(Error::Config(format!(
                    "{}: features.{module}.weight has shape {:?}, expected {:?}",
                    path.display(),
                    weight.dims(),
                    [width, c_in, 3, 3]
                )));
            }
            let bias = fetch("bias")?;
            stages.push(Stage::Conv(Conv2d::frozen(weight, Some(bias), 1, 1)));
            c_in = width;
            module += 2;
        }
        let mean = Tensor::new(&[0.485f32, 0.456, 0.406], device)?
            .to_dtype(dtype)?
            .reshape((1, 3, 1, 1))?;
        let std = Tensor::new(&[0.229f32, 0.224, 0.225], device)?
            .to_dtype(dtype)?
            .reshape((1, 3, 1, 1))?;
        Ok(Self { stages, mean, std, source: path.to_path_buf() })
    }
}

impl FeatureExtractor for Vgg19Features {
    fn name(&self) -> String {
        format!("vgg19:{}", self.source.display())
    }

    fn features(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.broadcast_sub(&self.mean)?.broadcast_div(&self.std)?;
        for stage in &self.stages {
            h = match stage {
                Stage::Conv(conv) => conv.forward(&h)?.relu()?,
                Stage::Pool => h.max_pool2d(2)?,
            };
        }
        Ok(h)
    }
}

/// Seeded, frozen random convolutional features.
///
/// Stand-in when pretrained weights are not available: three 3×3 ReLU
/// layers, the last two with stride 2.
pub struct RandomConvFeatures {
    seed: u64,
    layers: Vec<Conv2d>,
}

impl RandomConvFeatures {
    pub const WIDTHS: [usize; 3] = [16, 32, 32];

    pub fn new(seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::new();
        let mut c_in = 3;
        for (i, &c_out) in Self::WIDTHS.iter().enumerate() {
            let fan_in = c_in * 9;
            // He-uniform keeps activations at a stable scale through the ReLUs.
            let bound = (6.0 / fan_in as f64).sqrt();
            let w: Vec<f64> = (0..c_out * fan_in).map(|_| rng.random_range(-bound..bound)).collect();
            let weight = Tensor::from_vec(w, (c_out, c_in, 3, 3), device)?.to_dtype(dtype)?;
            let stride = if i == 0 { 1 } else { 2 };
            layers.push(Conv2d::frozen(weight, None, stride, 1));
            c_in = c_out;
        }
        Ok(Self { seed, layers })
    }
}

impl FeatureExtractor for RandomConvFeatures {
    fn name(&self) -> String {
        format!("random:{}", self.seed)
    }

    fn features(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for layer in &self.layers {
            h = layer.forward(&h)?.relu()?;
        }
        Ok(h)
    }
}

/// Which extractor to build; parsed from `identity`, `random[:seed]` or
/// `vgg19:<path>`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum ExtractorSpec {
    Identity,
    Random { seed: u64 },
    Vgg19 { weights: PathBuf },
}

impl ExtractorSpec {
    pub fn build(&self, dtype: DType, device: &Device) -> Result<Box<dyn FeatureExtractor>> {
        Ok(match self {
            Self::Identity => Box::new(IdentityFeatures),
            Self::Random { seed } => Box::new(RandomConvFeatures::new(*seed, dtype, device)?),
            Self::Vgg19 { weights } => Box::new(Vgg19Features::load(weights, dtype, device)?),
        })
    }
}

/// Expected location of the pretrained VGG19 weights.
pub const DEFAULT_VGG19_WEIGHTS: &str = "weights/vgg19.safetensors";

impl Default for ExtractorSpec {
    fn default() -> Self {
        Self::Vgg19 { weights: DEFAULT_VGG19_WEIGHTS.into() }
    }
}

impl TryFrom<String> for ExtractorSpec {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<ExtractorSpec> for String {
    fn from(s: ExtractorSpec) -> String {
        s.to_string()
    }
}

impl fmt::Display for ExtractorSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Identity => f.write_str("identity"),
            Self::Random { seed } => write!(f, "random:{seed}"),
            Self::Vgg19 { weights } => write!(f, "vgg19:{}", weights.display()),
        }
    }
}

impl FromStr for ExtractorSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (kind, arg) = match s.split_once(':') {
            Some((k, a)) => (k, Some(a)),
            None => (s, None),
        };
        match (kind, arg) {
            ("identity", None) => Ok(Self::Identity),
            ("random", None) => Ok(Self::Random { seed: 0 }),
            ("random", Some(seed)) => seed
                .parse()
                .map(|seed| Self::Random { seed })
                .map_err(|_| Error::Config(format!("bad extractor seed {seed:?}"))),
            ("vgg19", Some(path)) if !path.is_empty() => Ok(Self::Vgg19 { weights: path.into() }),
            _ => Err(Error::Config(format!(
                "unknown feature extractor {s:?}; expected identity, random[:seed] or vgg19:<path>"
            ))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_round_trips() {
        for s in ["identity", "random:7", "vgg19:/tmp/w.safetensors"] {
            let spec: ExtractorSpec = s.parse().unwrap();
            assert_eq!(spec.to_string(), s);
        }
        assert_eq!("random".parse::<ExtractorSpec>().unwrap(), ExtractorSpec::Random { seed: 0 });
        assert!("vgg16".parse::<ExtractorSpec>().is_err());
        assert!("vgg19:".parse::<ExtractorSpec>().is_err());
    }

    #[test]
    fn missing_vgg_weights_is_config_error() {
        let err = Vgg19Features::load(Path::new("/nonexistent/vgg19.safetensors"), DType::F32, &Device::Cpu)
            .err()
            .unwrap();
        assert!(matches!(err, Error::Config(ref m) if m.contains("safetensors")));
    }

    #[test]
    fn vgg_loads_from_safetensors_layout() {
        let dev = Device::Cpu;
        let mut map = std::collections::HashMap::new();
        let mut c_in = 3;
        let mut module = 0;
        for &w in &VGG19_PLAN {
            if w == 0 {
                module += 1;
                continue;
            }
            map.insert(
                format!("features.{module}.weight"),
                Tensor::full(0.01f32, (w, c_in, 3, 3), &dev).unwrap(),
            );
            map.insert(format!("features.{module}.bias"), Tensor::zeros(w, DType::F32, &dev).unwrap());
            c_in = w;
            module += 2;
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vgg.safetensors");
        candle_core::safetensors::save(&map, &path).unwrap();
        let vgg = Vgg19Features::load(&path, DType::F32, &dev).unwrap();
        let x = Tensor::full(0.5f32, (1, 3, 32, 32), &dev).unwrap();
        assert_eq!(vgg.features(&x).unwrap().dims(), &[1, 512, 2, 2]);
    }

    #[test]
    fn random_features_are_seeded() {
        let dev = Device::Cpu;
        let x = Tensor::rand(0f32, 1., (1, 3, 16, 16), &dev).unwrap();
        let a = RandomConvFeatures::new(3, DType::F32, &dev).unwrap().features(&x).unwrap();
        let b = RandomConvFeatures::new(3, DType::F32, &dev).unwrap().features(&x).unwrap();
        assert_eq!(a.dims(), &[1, 32, 4, 4]);
        let diff = (a - b).unwrap().abs().unwrap().sum_all().unwrap().to_scalar::<f32>().unwrap();
        assert_eq!(diff, 0.0);
    }
}
