use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which components of the full architecture/objective are enabled.
///
/// Each rung adds exactly one component to the previous one:
/// `Base` (plain dense blocks, L1 only) → `Ca` (+channel attention) →
/// `Cg` (+contextual gates) → `Full` (+multi-term adversarial objective).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Ablation {
    Base,
    Ca,
    Cg,
    #[default]
    Full,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Ablation::Base, Ablation::Ca, Ablation::Cg, Ablation::Full];

    pub fn has_attention(self) -> bool {
        !matches!(self, Ablation::Base)
    }

    pub fn has_gates(self) -> bool {
        matches!(self, Ablation::Cg | Ablation::Full)
    }

    /// Multi-term objective (structure, perceptual and adversarial terms).
    pub fn multi_term(self) -> bool {
        matches!(self, Ablation::Full)
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Ablation::Base => "base",
            Ablation::Ca => "ca",
            Ablation::Cg => "cg",
            Ablation::Full => "full",
        })
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "base" => Ok(Ablation::Base),
            "ca" => Ok(Ablation::Ca),
            "cg" => Ok(Ablation::Cg),
            "full" => Ok(Ablation::Full),
            other => Err(Error::Config(format!(
                "unknown ablation `{other}` (expected base, ca, cg or full)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    /// Channel width of each of the four pyramid levels, finest first.
    pub feature_levels: Vec<usize>,
    /// Output width of the contextual gate on each of the three skip paths.
    pub gate_widths: Vec<usize>,
    pub dense_layers: usize,
    pub dense_growth: usize,
    pub leaky_slope: f64,
    /// Channel reduction inside the attention gating network.
    pub attention_reduction: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            feature_levels: vec![64, 128, 192, 256],
            gate_widths: vec![64, 128, 192],
            dense_layers: 5,
            dense_growth: 32,
            leaky_slope: 0.2,
            attention_reduction: 16,
        }
    }
}

impl GeneratorConfig {
    /// Narrow variant for CPU-scale experiments; same topology as the default.
    pub fn desk() -> Self {
        Self {
            feature_levels: vec![8, 16, 24, 32],
            gate_widths: vec![8, 16, 24],
            dense_layers: 5,
            dense_growth: 4,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let levels = &self.feature_levels;
        if levels.len() != 4 {
            return Err(Error::Config(format!(
                "feature_levels must have exactly 4 entries, got {}",
                levels.len()
            )));
        }
        if levels[0] == 0 || levels.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "feature_levels must be positive and strictly increasing, got {levels:?}"
            )));
        }
        if self.gate_widths.as_slice() != &levels[..3] {
            return Err(Error::Config(format!(
                "gate_widths {:?} must match the first three feature levels {:?}",
                self.gate_widths,
                &levels[..3]
            )));
        }
        if self.dense_layers == 0 || self.dense_growth == 0 {
            return Err(Error::Config(
                "dense_layers and dense_growth must be positive".into(),
            ));
        }
        if !(self.leaky_slope.is_finite() && self.leaky_slope >= 0.0) {
            return Err(Error::Config("leaky_slope must be finite and >= 0".into()));
        }
        if self.attention_reduction == 0 {
            return Err(Error::Config("attention_reduction must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscriminatorConfig {
    pub base_width: usize,
    /// Convolutional layers after the stem; odd-numbered ones stride by 2.
    pub num_blocks: usize,
    pub bn_momentum: f64,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            base_width: 64,
            num_blocks: 6,
            bn_momentum: 0.1,
        }
    }
}

impl DiscriminatorConfig {
    pub fn desk() -> Self {
        Self {
            base_width: 8,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_width == 0 || self.num_blocks == 0 {
            return Err(Error::Config(
                "discriminator base_width and num_blocks must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::Config("bn_momentum must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Output channel width of layer `i` (1-based; 0 is the stem).
    pub fn layer_width(&self, i: usize) -> usize {
        self.base_width << i.div_ceil(2)
    }

    pub fn layer_stride(&self, i: usize) -> usize {
        if i % 2 == 1 {
            2
        } else {
            1
        }
    }
}
