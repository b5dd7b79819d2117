//! Architectural hyperparameters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

/// Token mixer used in every layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Attention,
    Far,
}

impl Variant {
    pub fn tag(self) -> u8 {
        match self {
            Variant::Attention => 0,
            Variant::Far => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Variant::Attention),
            1 => Some(Variant::Far),
            _ => None,
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "attention" | "deit" | "teacher" => Ok(Variant::Attention),
            "far" | "lstm" => Ok(Variant::Far),
            other => Err(Error::Config(format!("unknown variant `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub mlp_ratio: usize,
    pub patch_size: usize,
    pub image_size: usize,
    pub channels: usize,
    pub num_classes: usize,
    pub precision: Precision,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// Laptop-scale geometry: 32×32 images, 8×8 patches, 17 tokens.
    pub fn desk() -> Self {
        Self {
            layers: 4,
            dim: 32,
            heads: 2,
            head_dim: 16,
            mlp_ratio: 4,
            patch_size: 8,
            image_size: 32,
            channels: 3,
            num_classes: 10,
            precision: Precision::F32,
        }
    }

    fn deit(dim: usize, heads: usize) -> Self {
        Self {
            layers: 12,
            dim,
            heads,
            head_dim: 64,
            mlp_ratio: 4,
            patch_size: 16,
            image_size: 224,
            channels: 3,
            num_classes: 1000,
            precision: Precision::F32,
        }
    }

    pub fn deit_tiny() -> Self {
        Self::deit(192, 3)
    }

    pub fn deit_small() -> Self {
        Self::deit(384, 6)
    }

    pub fn deit_base() -> Self {
        Self::deit(768, 12)
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "deit-tiny" | "tiny" => Ok(Self::deit_tiny()),
            "deit-small" | "small" => Ok(Self::deit_small()),
            "deit-base" | "base" => Ok(Self::deit_base()),
            other => Err(Error::Config(format!("unknown preset `{other}`"))),
        }
    }

    pub fn with_image_size(mut self, image_size: usize) -> Self {
        self.image_size = image_size;
        self
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Sequence length including the CLS token.
    pub fn tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn mlp_hidden(&self) -> usize {
        self.dim * self.mlp_ratio
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("layers", self.layers),
            ("dim", self.dim),
            ("heads", self.heads),
            ("head_dim", self.head_dim),
            ("mlp_ratio", self.mlp_ratio),
            ("patch_size", self.patch_size),
            ("image_size", self.image_size),
            ("channels", self.channels),
            ("num_classes", self.num_classes),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::Config(format!(
                "patch_size {} does not divide image_size {}",
                self.patch_size, self.image_size
            )));
        }
        if !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "dim {} is not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        if self.dim != self.heads * self.head_dim {
            return Err(Error::Config(format!(
                "dim {} != heads {} x head_dim {}",
                self.dim, self.heads, self.head_dim
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn token_counts() {
        assert_eq!(ModelConfig::desk().tokens(), 17);
        assert_eq!(ModelConfig::deit_tiny().tokens(), 197);
        assert_eq!(ModelConfig::deit_tiny().with_image_size(384).tokens(), 577);
    }

    #[test]
    fn validation() {
        assert!(ModelConfig::desk().validate().is_ok());
        let mut c = ModelConfig::desk();
        c.patch_size = 5;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::desk();
        c.heads = 3;
        assert!(c.validate().is_err());
    }
}
