use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::scalar::DType;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StemKind {
    /// Flattened 16×16 patches through one linear projection.
    Linear,
    /// Overlapping 3×3 stride-2 convolutions.
    Conv,
    /// Hierarchical MLP: non-overlapping 4/2/2 strided projections.
    Hmlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StemNorm {
    Bn,
    Ln,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Nonlinearity {
    Gelu,
    None,
}

/// Patch pre-processing front end.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StemSpec {
    pub kind: StemKind,
    pub norm: StemNorm,
    pub nonlinearity: Nonlinearity,
    /// Output token width.
    pub width: usize,
    pub patch_size: usize,
    pub in_channels: usize,
}

impl StemSpec {
    /// The usual variant of each stem: plain linear projection; BN + GELU
    /// for the multi-stage stems.
    pub fn standard(kind: StemKind, width: usize) -> Self {
        let (norm, nonlinearity) = match kind {
            StemKind::Linear => (StemNorm::None, Nonlinearity::None),
            StemKind::Conv | StemKind::Hmlp => (StemNorm::Bn, Nonlinearity::Gelu),
        };
        StemSpec {
            kind,
            norm,
            nonlinearity,
            width,
            patch_size: 16,
            in_channels: 3,
        }
    }

    pub fn with_norm(mut self, norm: StemNorm) -> Self {
        self.norm = norm;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.patch_size == 0 || self.in_channels == 0 {
            return Err(config_err!("stem width, patch size and channels must be positive"));
        }
        match self.kind {
            StemKind::Linear => Ok(()),
            StemKind::Hmlp => {
                if self.width % 4 != 0 {
                    return Err(config_err!("hmlp stem needs width divisible by 4, got {}", self.width));
                }
                if self.patch_size != 16 {
                    return Err(config_err!("hmlp stem tiles 16x16 patches, got patch size {}", self.patch_size));
                }
                Ok(())
            }
            StemKind::Conv => {
                if self.width % 8 != 0 {
                    return Err(config_err!("conv stem needs width divisible by 8, got {}", self.width));
                }
                if self.patch_size != 16 {
                    return Err(config_err!("conv stem downsamples by 16, got patch size {}", self.patch_size));
                }
                Ok(())
            }
        }
    }
}

/// `N×P`: `N` layers of `P` parallel (MHSA, FFN) branch pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Layout {
    pub depth: usize,
    pub branches: usize,
}

impl Layout {
    pub fn new(depth: usize, branches: usize) -> Self {
        Layout { depth, branches }
    }

    pub fn total_blocks(&self) -> usize {
        self.depth * self.branches
    }
}

impl fmt::Display for Layout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.depth, self.branches)
    }
}

impl FromStr for Layout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (n, p) = s
            .split_once(['x', 'X', '×'])
            .ok_or_else(|| config_err!("layout {s:?} is not of the form NxP"))?;
        let parse = |v: &str| {
            v.trim()
                .parse::<usize>()
                .ok()
                .filter(|&v| v > 0)
                .ok_or_else(|| config_err!("layout {s:?} needs positive integers"))
        };
        Ok(Layout::new(parse(n)?, parse(p)?))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViTConfig {
    pub width: usize,
    /// Number of layers `N`.
    pub depth: usize,
    /// Parallel branches per layer `P`.
    pub branches: usize,
    pub heads: usize,
    pub patch_size: usize,
    pub image_size: usize,
    pub in_channels: usize,
    pub num_classes: usize,
    /// Stochastic-depth drop probability, uniform across depth.
    pub sd_rate: f64,
    /// LayerScale initial value; `None` disables LayerScale.
    pub layerscale: Option<f64>,
    pub stem_kind: StemKind,
    pub stem_norm: StemNorm,
    pub stem_nonlinearity: Nonlinearity,
    pub dtype: DType,
}

/// Default LayerScale initialization.
pub const LAYERSCALE_INIT: f64 = 1e-4;

impl ViTConfig {
    fn preset(width: usize, depth: usize, heads: usize) -> Self {
        ViTConfig {
            width,
            depth,
            branches: 1,
            heads,
            patch_size: 16,
            image_size: 224,
            in_channels: 3,
            num_classes: 1000,
            sd_rate: 0.0,
            layerscale: None,
            stem_kind: StemKind::Linear,
            stem_norm: StemNorm::None,
            stem_nonlinearity: Nonlinearity::None,
            dtype: DType::F32,
        }
    }

    /// ViT-Ti/16: width 192, 12 layers, 3 heads.
    pub fn tiny() -> Self {
        Self::preset(192, 12, 3)
    }

    /// ViT-S/16: width 384, 12 layers, 6 heads.
    pub fn small() -> Self {
        Self::preset(384, 12, 6).with_sd_rate(0.05)
    }

    /// ViT-B/16: width 768, 12 layers, 12 heads.
    pub fn base() -> Self {
        Self::preset(768, 12, 12).with_sd_rate(0.1)
    }

    /// ViT-L/16: width 1024, 24 layers, 16 heads.
    pub fn large() -> Self {
        Self::preset(1024, 24, 16).with_sd_rate(0.4)
    }

    /// A free-form model with the default linear stem at 1000 classes, 224².
    pub fn custom(width: usize, depth: usize, heads: usize) -> Self {
        Self::preset(width, depth, heads)
    }

    pub fn with_layout(mut self, layout: Layout) -> Self {
        self.depth = layout.depth;
        self.branches = layout.branches;
        self
    }

    pub fn with_stem(mut self, kind: StemKind) -> Self {
        let spec = StemSpec::standard(kind, self.width);
        self.stem_kind = kind;
        self.stem_norm = spec.norm;
        self.stem_nonlinearity = spec.nonlinearity;
        self
    }

    pub fn with_stem_norm(mut self, norm: StemNorm) -> Self {
        self.stem_norm = norm;
        self
    }

    pub fn with_image_size(mut self, size: usize) -> Self {
        self.image_size = size;
        self
    }

    pub fn with_classes(mut self, n: usize) -> Self {
        self.num_classes = n;
        self
    }

    pub fn with_sd_rate(mut self, rate: f64) -> Self {
        self.sd_rate = rate;
        self
    }

    pub fn with_layerscale(mut self, init: Option<f64>) -> Self {
        self.layerscale = init;
        self
    }

    pub fn with_dtype(mut self, dtype: DType) -> Self {
        self.dtype = dtype;
        self
    }

    pub fn layout(&self) -> Layout {
        Layout::new(self.depth, self.branches)
    }

    pub fn total_blocks(&self) -> usize {
        self.depth * self.branches
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Patch tokens `T`, excluding the class token.
    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn stem_spec(&self) -> StemSpec {
        StemSpec {
            kind: self.stem_kind,
            norm: self.stem_norm,
            nonlinearity: self.stem_nonlinearity,
            width: self.width,
            patch_size: self.patch_size,
            in_channels: self.in_channels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.depth == 0 || self.branches == 0 || self.heads == 0 {
            return Err(config_err!("width, depth, branches and heads must be positive"));
        }
        if self.width % self.heads != 0 {
            return Err(config_err!(
                "width {} is not divisible by heads {}",
                self.width,
                self.heads
            ));
        }
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(config_err!(
                "image size {} is not divisible by patch size {}",
                self.image_size,
                self.patch_size
            ));
        }
        if self.num_classes == 0 {
            return Err(config_err!("num_classes must be positive"));
        }
        if !(0.0..1.0).contains(&self.sd_rate) {
            return Err(config_err!("sd_rate {} outside [0, 1)", self.sd_rate));
        }
        if let Some(eps) = self.layerscale {
            if !(eps > 0.0 && eps.is_finite()) {
                return Err(config_err!("layerscale init must be positive, got {eps}"));
            }
        }
        self.stem_spec().validate()
    }

    /// Canonical JSON, as stored in checkpoints.
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}
