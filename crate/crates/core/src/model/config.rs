use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Position-encoding configuration of the encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PosMode {
    /// Learned absolute position table added after the patch embedding.
    Ape,
    /// One relative position bias table per layer.
    Rpb,
    /// A single relative position bias table reused by every layer.
    SharedRpb,
}

impl PosMode {
    pub fn uses_rpb(self) -> bool {
        !matches!(self, PosMode::Ape)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PosMode::Ape => "ape",
            PosMode::Rpb => "rpb",
            PosMode::SharedRpb => "shared_rpb",
        }
    }
}

impl std::str::FromStr for PosMode {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "ape" => Ok(PosMode::Ape),
            "rpb" => Ok(PosMode::Rpb),
            "shared_rpb" | "sharedrpb" => Ok(PosMode::SharedRpb),
            other => Err(invalid(format!("unknown position mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub in_channels: usize,
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub pos_mode: PosMode,
    pub drop_path_rate: f64,
    pub num_classes: Option<usize>,
}

impl Default for EncoderConfig {
    /// Desk-scale encoder: 16x16 RGB input, 4x4 patch grid.
    fn default() -> Self {
        Self {
            image_size: 16,
            patch_size: 4,
            in_channels: 3,
            depth: 4,
            dim: 64,
            heads: 4,
            mlp_ratio: 4,
            pos_mode: PosMode::SharedRpb,
            drop_path_rate: 0.0,
            num_classes: None,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(invalid(format!(
                "image size {} is not a positive multiple of patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.heads == 0 || self.dim == 0 || self.dim % self.heads != 0 {
            return Err(invalid(format!(
                "dim {} is not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if self.in_channels == 0 || self.mlp_ratio == 0 {
            return Err(invalid("channels and mlp ratio must be positive"));
        }
        if !(0.0..1.0).contains(&self.drop_path_rate) {
            return Err(invalid(format!(
                "drop path rate {} outside [0, 1)",
                self.drop_path_rate
            )));
        }
        if self.num_classes == Some(0) {
            return Err(invalid("num_classes must be positive when set"));
        }
        Ok(())
    }

    /// Patch-grid side length.
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

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn patch_dim(&self) -> usize {
        self.in_channels * self.patch_size * self.patch_size
    }

    pub fn with_classes(mut self, k: Option<usize>) -> Self {
        self.num_classes = k;
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_sizes() {
        let c = EncoderConfig {
            image_size: 32,
            patch_size: 8,
            ..Default::default()
        };
        assert_eq!(c.grid(), 4);
        assert_eq!(c.num_patches(), 16);
        assert_eq!(c.tokens(), 17);
        assert_eq!(c.head_dim(), 16);
    }

    #[test]
    fn invalid_configs() {
        let base = EncoderConfig::default();
        for bad in [
            EncoderConfig { image_size: 15, ..base.clone() },
            EncoderConfig { heads: 3, ..base.clone() },
            EncoderConfig { drop_path_rate: 1.0, ..base.clone() },
            EncoderConfig { num_classes: Some(0), ..base.clone() },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
        assert!(base.validate().is_ok());
    }

    #[test]
    fn pos_mode_parsing() {
        assert_eq!("shared-rpb".parse::<PosMode>().unwrap(), PosMode::SharedRpb);
        assert_eq!("APE".parse::<PosMode>().unwrap(), PosMode::Ape);
        assert!("alibi".parse::<PosMode>().is_err());
    }
}
