use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture of a factorised-encoder video transformer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FEModelConfig {
    pub variant_name: String,
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub num_frames: usize,
    pub spatial_depth: usize,
    pub temporal_depth: usize,
    pub hidden: usize,
    pub heads: usize,
    pub mlp_dim: usize,
    pub adapter_hidden: usize,
    pub num_classes: usize,
}

impl Default for FEModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl FEModelConfig {
    /// Laptop-scale model used by the experiments.
    pub fn desk() -> Self {
        FEModelConfig {
            variant_name: "desk".into(),
            image_size: 32,
            patch_size: 8,
            channels: 1,
            num_frames: 8,
            spatial_depth: 4,
            temporal_depth: 2,
            hidden: 64,
            heads: 4,
            mlp_dim: 256,
            adapter_hidden: 64,
            num_classes: 8,
        }
    }

    fn full_scale(name: &str, depth: usize, hidden: usize, heads: usize, mlp: usize, patch: usize) -> Self {
        FEModelConfig {
            variant_name: name.into(),
            image_size: 224,
            patch_size: patch,
            channels: 3,
            num_frames: 32,
            spatial_depth: depth,
            temporal_depth: 4,
            hidden,
            heads,
            mlp_dim: mlp,
            adapter_hidden: hidden,
            num_classes: 400,
        }
    }

    pub fn vivit_b() -> Self {
        Self::full_scale("ViViT-B", 12, 768, 12, 3072, 16)
    }

    pub fn vivit_l() -> Self {
        Self::full_scale("ViViT-L", 24, 1024, 16, 4096, 16)
    }

    pub fn vivit_h() -> Self {
        Self::full_scale("ViViT-H", 32, 1280, 16, 5120, 14)
    }

    pub fn vivit_g() -> Self {
        Self::full_scale("ViViT-g", 40, 1408, 16, 6144, 14)
    }

    /// Look up a preset by name: `desk`, `B`, `L`, `H` or `g`.
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "B" | "b" | "ViViT-B" => Ok(Self::vivit_b()),
            "L" | "l" | "ViViT-L" => Ok(Self::vivit_l()),
            "H" | "h" | "ViViT-H" => Ok(Self::vivit_h()),
            "g" | "G" | "ViViT-g" => Ok(Self::vivit_g()),
            other => Err(Error::Config(format!("unknown model preset `{other}`"))),
        }
    }

    pub fn all_presets() -> Vec<Self> {
        vec![
            Self::desk(),
            Self::vivit_b(),
            Self::vivit_l(),
            Self::vivit_h(),
            Self::vivit_g(),
        ]
    }

    pub fn with_frames(mut self, frames: usize) -> Self {
        self.num_frames = frames;
        self
    }

    pub fn with_classes(mut self, classes: usize) -> Self {
        self.num_classes = classes;
        self
    }

    /// Patches per frame.
    pub fn num_patches(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    /// Flattened length of one patch.
    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("channels", self.channels),
            ("num_frames", self.num_frames),
            ("hidden", self.hidden),
            ("heads", self.heads),
            ("mlp_dim", self.mlp_dim),
            ("adapter_hidden", self.adapter_hidden),
            ("num_classes", self.num_classes),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image_size {} is not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.hidden % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden {} is not divisible by heads {}",
                self.hidden, self.heads
            )));
        }
        Ok(())
    }

    /// Names of the fields (other than `num_frames`) whose values differ.
    pub fn architecture_diff(&self, other: &FEModelConfig, include_classes: bool) -> Vec<String> {
        let pairs = [
            ("image_size", self.image_size, other.image_size),
            ("patch_size", self.patch_size, other.patch_size),
            ("channels", self.channels, other.channels),
            ("spatial_depth", self.spatial_depth, other.spatial_depth),
            ("temporal_depth", self.temporal_depth, other.temporal_depth),
            ("hidden", self.hidden, other.hidden),
            ("heads", self.heads, other.heads),
            ("mlp_dim", self.mlp_dim, other.mlp_dim),
            ("num_classes", self.num_classes, other.num_classes),
        ];
        pairs
            .iter()
            .filter(|(name, a, b)| a != b && (include_classes || *name != "num_classes"))
            .map(|(name, a, b)| format!("{name} ({a} vs {b})"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_valid() {
        for c in FEModelConfig::all_presets() {
            c.validate().unwrap();
        }
        let heads: Vec<_> = ["B", "L", "H", "g"]
            .iter()
            .map(|n| FEModelConfig::preset(n).unwrap().heads)
            .collect();
        assert_eq!(heads, [12, 16, 16, 16]);
    }

    #[test]
    fn desk_defaults() {
        let c = FEModelConfig::desk();
        assert_eq!(c.num_patches(), 16);
        assert_eq!((c.hidden, c.heads, c.mlp_dim, c.adapter_hidden), (64, 4, 256, 64));
        assert_eq!((c.spatial_depth, c.temporal_depth), (4, 2));
    }

    #[test]
    fn rejects_indivisible_shapes() {
        let mut c = FEModelConfig::desk();
        c.patch_size = 7;
        assert!(c.validate().is_err());
        let mut c = FEModelConfig::desk();
        c.heads = 5;
        assert!(c.validate().is_err());
        let c = FEModelConfig::desk().with_frames(0);
        assert!(c.validate().is_err());
    }
}
