//! Declarative backbone descriptions, canonical presets, and analytic size/cost formulas.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Width of the projection inside the progressive classification head.
pub const HEAD_EMBED_WIDTH: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    ResidualBasic,
    ResidualBottleneck,
    TransformerEncoder,
}

impl Family {
    pub fn is_convolutional(self) -> bool {
        !matches!(self, Family::TransformerEncoder)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl InputShape {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        InputShape {
            channels,
            height,
            width,
        }
    }

    pub fn square(channels: usize, side: usize) -> Self {
        Self::new(channels, side, side)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchTokenizerSpec {
    pub patch_size: usize,
    pub stride: usize,
    pub embed_dim: usize,
}

impl PatchTokenizerSpec {
    pub fn non_overlapping(patch_size: usize, embed_dim: usize) -> Self {
        PatchTokenizerSpec {
            patch_size,
            stride: patch_size,
            embed_dim,
        }
    }

    /// Half-patch stride, i.e. neighbouring patches share 50% of their extent along each axis.
    pub fn half_overlap(patch_size: usize, embed_dim: usize) -> Self {
        PatchTokenizerSpec {
            patch_size,
            stride: patch_size / 2,
            embed_dim,
        }
    }

    /// Patch grid `(rows, cols)` for an input of the given size.
    pub fn grid(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        if self.patch_size == 0 || self.stride == 0 || self.stride > self.patch_size {
            return Err(Error::InvalidSpec(format!(
                "patch stride {} must be in 1..={}",
                self.stride, self.patch_size
            )));
        }
        if height < self.patch_size || width < self.patch_size {
            return Err(Error::InvalidSpec(format!(
                "patch size {} exceeds image {}x{}",
                self.patch_size, height, width
            )));
        }
        Ok((
            (height - self.patch_size) / self.stride + 1,
            (width - self.patch_size) / self.stride + 1,
        ))
    }

    /// Number of patch tokens, excluding the class token.
    pub fn patch_count(&self, height: usize, width: usize) -> Result<usize> {
        let (gh, gw) = self.grid(height, width)?;
        Ok(gh * gw)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum StemSpec {
    /// Convolution + batch norm + ReLU, optionally followed by a 3x3/2 max pool.
    Conv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        max_pool: bool,
    },
    /// Patch embedding, learned positional encoding and a class token.
    Patch(PatchTokenizerSpec),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum BlockSpec {
    Basic {
        in_channels: usize,
        out_channels: usize,
        stride: usize,
    },
    Bottleneck {
        in_channels: usize,
        mid_channels: usize,
        out_channels: usize,
        stride: usize,
    },
    Encoder {
        dim: usize,
        heads: usize,
        mlp_dim: usize,
    },
}

impl BlockSpec {
    pub fn in_width(&self) -> usize {
        match *self {
            BlockSpec::Basic { in_channels, .. } | BlockSpec::Bottleneck { in_channels, .. } => in_channels,
            BlockSpec::Encoder { dim, .. } => dim,
        }
    }

    pub fn out_width(&self) -> usize {
        match *self {
            BlockSpec::Basic { out_channels, .. } | BlockSpec::Bottleneck { out_channels, .. } => {
                out_channels
            }
            BlockSpec::Encoder { dim, .. } => dim,
        }
    }

    pub fn stride(&self) -> usize {
        match *self {
            BlockSpec::Basic { stride, .. } | BlockSpec::Bottleneck { stride, .. } => stride,
            BlockSpec::Encoder { .. } => 1,
        }
    }

    /// Residual blocks project the shortcut when the shape changes.
    pub fn has_projection(&self) -> bool {
        match *self {
            BlockSpec::Basic { in_channels, out_channels, stride }
            | BlockSpec::Bottleneck { in_channels, out_channels, stride, .. } => {
                stride != 1 || in_channels != out_channels
            }
            BlockSpec::Encoder { .. } => false,
        }
    }
}

/// Shape of the activation between two blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum FeatureShape {
    Map { channels: usize, height: usize, width: usize },
    Tokens { tokens: usize, dim: usize },
}

impl FeatureShape {
    pub fn width(&self) -> usize {
        match *self {
            FeatureShape::Map { channels, .. } => channels,
            FeatureShape::Tokens { dim, .. } => dim,
        }
    }

    pub fn dims(&self) -> Vec<usize> {
        match *self {
            FeatureShape::Map { channels, height, width } => vec![channels, height, width],
            FeatureShape::Tokens { tokens, dim } => vec![tokens, dim],
        }
    }
}

/// Which classifier sits on top of the active prefix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadKind {
    /// Temporary stage head: pooling, 256-wide projection, ReLU, affine classifier for CNNs;
    /// class token, layer norm, affine classifier for transformers.
    Progressive,
    /// The architecture's own classifier (global pool + affine map for CNNs).
    Final,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub name: String,
    pub family: Family,
    pub input: InputShape,
    pub num_classes: usize,
    pub stem: StemSpec,
    pub blocks: Vec<BlockSpec>,
}

impl BackboneSpec {
    /// Residual network in the torchvision layout: `stage_depths[s]` blocks at base width
    /// `stage_widths[s]`, stride 2 at the first block of every stage after the first.
    pub fn residual(
        name: impl Into<String>,
        family: Family,
        stem: StemSpec,
        stage_depths: &[usize],
        stage_widths: &[usize],
        input: InputShape,
        num_classes: usize,
    ) -> Result<Self> {
        let StemSpec::Conv { out_channels: stem_width, .. } = stem else {
            return Err(Error::InvalidSpec("residual networks need a convolutional stem".into()));
        };
        if stage_depths.len() != stage_widths.len() {
            return Err(Error::InvalidSpec("stage depth/width lists differ in length".into()));
        }
        let mut blocks = Vec::new();
        let mut in_ch = stem_width;
        for (s, (&depth, &width)) in stage_depths.iter().zip(stage_widths).enumerate() {
            for b in 0..depth {
                let stride = if s > 0 && b == 0 { 2 } else { 1 };
                let block = match family {
                    Family::ResidualBasic => BlockSpec::Basic {
                        in_channels: in_ch,
                        out_channels: width,
                        stride,
                    },
                    Family::ResidualBottleneck => BlockSpec::Bottleneck {
                        in_channels: in_ch,
                        mid_channels: width,
                        out_channels: 4 * width,
                        stride,
                    },
                    Family::TransformerEncoder => {
                        return Err(Error::InvalidSpec("transformer family is not residual-convolutional".into()))
                    }
                };
                in_ch = block.out_width();
                blocks.push(block);
            }
        }
        let spec = BackboneSpec {
            name: name.into(),
            family,
            input,
            num_classes,
            stem,
            blocks,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn transformer(
        name: impl Into<String>,
        tokenizer: PatchTokenizerSpec,
        depth: usize,
        heads: usize,
        mlp_dim: usize,
        input: InputShape,
        num_classes: usize,
    ) -> Result<Self> {
        let dim = tokenizer.embed_dim;
        let spec = BackboneSpec {
            name: name.into(),
            family: Family::TransformerEncoder,
            input,
            num_classes,
            stem: StemSpec::Patch(tokenizer),
            blocks: vec![BlockSpec::Encoder { dim, heads, mlp_dim }; depth],
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }

    /// Output width of every block.
    pub fn block_widths(&self) -> Vec<usize> {
        self.blocks.iter().map(BlockSpec::out_width).collect()
    }

    pub fn stem_width(&self) -> usize {
        match self.stem {
            StemSpec::Conv { out_channels, .. } => out_channels,
            StemSpec::Patch(p) => p.embed_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidSpec(format!("{}: {msg}", self.name)));
        if self.blocks.is_empty() {
            return bad("block_count must be at least 1".into());
        }
        if self.num_classes == 0 {
            return bad("num_classes must be at least 1".into());
        }
        let InputShape { channels, height, width } = self.input;
        if channels == 0 || height == 0 || width == 0 {
            return bad(format!("degenerate input shape {:?}", self.input));
        }
        match (self.family, &self.stem) {
            (Family::TransformerEncoder, StemSpec::Patch(p)) => {
                if p.embed_dim == 0 {
                    return bad("embed_dim must be at least 1".into());
                }
                p.grid(height, width)?;
            }
            (Family::TransformerEncoder, _) => return bad("transformers need a patch stem".into()),
            (_, StemSpec::Conv { out_channels, kernel, stride, .. }) => {
                if *out_channels == 0 || *kernel == 0 || *stride == 0 {
                    return bad("stem widths, kernel and stride must be at least 1".into());
                }
            }
            (_, StemSpec::Patch(_)) => return bad("residual networks need a convolutional stem".into()),
        }
        let mut prev = self.stem_width();
        for (i, block) in self.blocks.iter().enumerate() {
            let ok_kind = matches!(
                (self.family, block),
                (Family::ResidualBasic, BlockSpec::Basic { .. })
                    | (Family::ResidualBottleneck, BlockSpec::Bottleneck { .. })
                    | (Family::TransformerEncoder, BlockSpec::Encoder { .. })
            );
            if !ok_kind {
                return bad(format!("block {i} ({block:?}) does not belong to family {:?}", self.family));
            }
            if block.in_width() != prev {
                return bad(format!(
                    "block {i} expects width {} but receives {prev}",
                    block.in_width()
                ));
            }
            match *block {
                BlockSpec::Basic { out_channels, stride, .. } => {
                    if out_channels == 0 || stride == 0 {
                        return bad(format!("block {i} has zero width or stride"));
                    }
                }
                BlockSpec::Bottleneck { mid_channels, out_channels, stride, .. } => {
                    if mid_channels == 0 || out_channels == 0 || stride == 0 {
                        return bad(format!("block {i} has zero width or stride"));
                    }
                }
                BlockSpec::Encoder { dim, heads, mlp_dim } => {
                    if heads == 0 || dim % heads != 0 || mlp_dim == 0 {
                        return bad(format!("block {i}: {heads} heads must divide dim {dim}"));
                    }
                }
            }
            prev = block.out_width();
        }
        self.feature_shapes()?;
        Ok(())
    }

    /// Activation shapes per sample: index 0 is the stem output, index `i` the output of
    /// block `i` (1-based).
    pub fn feature_shapes(&self) -> Result<Vec<FeatureShape>> {
        let InputShape { height, width, .. } = self.input;
        let mut shapes = Vec::with_capacity(self.blocks.len() + 1);
        let too_small = || Error::InvalidSpec(format!("{}: input {:?} too small", self.name, self.input));
        let mut cur = match self.stem {
            StemSpec::Conv { out_channels, kernel, stride, max_pool } => {
                let (mut h, mut w) =
                    crate::nn::layers::conv_output_hw(height, width, kernel, stride, kernel / 2)
                        .ok_or_else(too_small)?;
                if max_pool {
                    (h, w) = crate::nn::layers::conv_output_hw(h, w, 3, 2, 1).ok_or_else(too_small)?;
                }
                FeatureShape::Map { channels: out_channels, height: h, width: w }
            }
            StemSpec::Patch(p) => FeatureShape::Tokens {
                tokens: p.patch_count(height, width)? + 1,
                dim: p.embed_dim,
            },
        };
        shapes.push(cur);
        for block in &self.blocks {
            cur = match (*block, cur) {
                (b @ (BlockSpec::Basic { .. } | BlockSpec::Bottleneck { .. }), FeatureShape::Map { height, width, .. }) => {
                    let (h, w) = crate::nn::layers::conv_output_hw(height, width, 3, b.stride(), 1)
                        .ok_or_else(too_small)?;
                    FeatureShape::Map { channels: b.out_width(), height: h, width: w }
                }
                (BlockSpec::Encoder { .. }, t @ FeatureShape::Tokens { .. }) => t,
                _ => return Err(Error::InvalidSpec(format!("{}: block/feature kind mismatch", self.name))),
            };
            shapes.push(cur);
        }
        Ok(shapes)
    }

    /// Content hash of the canonical JSON form, used to tie checkpoints to specs.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("spec serializes");
        hex::encode(&Sha256::digest(&json)[..8])
    }

    // -- analytic parameter counts -------------------------------------------------------

    pub fn stem_param_count(&self) -> usize {
        let c = self.input.channels;
        match self.stem {
            StemSpec::Conv { out_channels, kernel, .. } => c * out_channels * kernel * kernel + 2 * out_channels,
            StemSpec::Patch(p) => {
                let tokens = p.patch_count(self.input.height, self.input.width).unwrap_or(0) + 1;
                let d = p.embed_dim;
                c * p.patch_size * p.patch_size * d + d + d + tokens * d
            }
        }
    }

    pub fn block_param_count(&self, i: usize) -> usize {
        block_param_count(&self.blocks[i])
    }

    pub fn head_param_count(&self, kind: HeadKind, in_width: usize) -> usize {
        let c = self.num_classes;
        match (self.family.is_convolutional(), kind) {
            (true, HeadKind::Progressive) => {
                in_width * HEAD_EMBED_WIDTH + HEAD_EMBED_WIDTH + HEAD_EMBED_WIDTH * c + c
            }
            (true, HeadKind::Final) => in_width * c + c,
            (false, _) => 2 * in_width + in_width * c + c,
        }
    }

    /// Trainable parameters of stem + first `active` blocks + head.
    pub fn prefix_param_count(&self, active: usize, head: HeadKind) -> usize {
        let blocks: usize = (0..active).map(|i| self.block_param_count(i)).sum();
        let width = if active == 0 { self.stem_width() } else { self.blocks[active - 1].out_width() };
        self.stem_param_count() + blocks + self.head_param_count(head, width)
    }

    pub fn full_param_count(&self) -> usize {
        self.prefix_param_count(self.blocks.len(), HeadKind::Final)
    }

    // -- analytic multiply-accumulate counts (forward pass, per sample) --------------------

    pub fn stem_macs(&self) -> Result<u64> {
        let c = self.input.channels as u64;
        Ok(match (self.stem, self.feature_shapes()?[0]) {
            (StemSpec::Conv { out_channels, kernel, stride, .. }, _) => {
                let (h, w) = crate::nn::layers::conv_output_hw(
                    self.input.height,
                    self.input.width,
                    kernel,
                    stride,
                    kernel / 2,
                )
                .expect("validated");
                (h * w * out_channels * kernel * kernel) as u64 * c
            }
            (StemSpec::Patch(p), _) => {
                let n = p.patch_count(self.input.height, self.input.width)? as u64;
                n * (p.embed_dim * p.patch_size * p.patch_size) as u64 * c
            }
        })
    }

    pub fn block_macs(&self, i: usize) -> Result<u64> {
        let shapes = self.feature_shapes()?;
        let (inp, out) = (shapes[i], shapes[i + 1]);
        Ok(match (self.blocks[i], inp, out) {
            (
                BlockSpec::Basic { in_channels, out_channels, .. },
                _,
                FeatureShape::Map { height, width, .. },
            ) => {
                let p = (height * width) as u64;
                let mut m = p * (9 * in_channels * out_channels + 9 * out_channels * out_channels) as u64;
                if self.blocks[i].has_projection() {
                    m += p * (in_channels * out_channels) as u64;
                }
                m
            }
            (
                BlockSpec::Bottleneck { in_channels, mid_channels, out_channels, .. },
                FeatureShape::Map { height: ih, width: iw, .. },
                FeatureShape::Map { height, width, .. },
            ) => {
                let p_in = (ih * iw) as u64;
                let p = (height * width) as u64;
                let mut m = p_in * (in_channels * mid_channels) as u64
                    + p * (9 * mid_channels * mid_channels + mid_channels * out_channels) as u64;
                if self.blocks[i].has_projection() {
                    m += p * (in_channels * out_channels) as u64;
                }
                m
            }
            (BlockSpec::Encoder { dim, mlp_dim, .. }, FeatureShape::Tokens { tokens, .. }, _) => {
                let t = tokens as u64;
                let d = dim as u64;
                t * (4 * d * d + 2 * d * mlp_dim as u64) + 2 * t * t * d
            }
            _ => unreachable!("validated spec"),
        })
    }

    pub fn head_macs(&self, kind: HeadKind, in_width: usize) -> u64 {
        let c = self.num_classes as u64;
        let w = in_width as u64;
        match (self.family.is_convolutional(), kind) {
            (true, HeadKind::Progressive) => w * HEAD_EMBED_WIDTH as u64 + HEAD_EMBED_WIDTH as u64 * c,
            _ => w * c,
        }
    }
}

pub fn block_param_count(block: &BlockSpec) -> usize {
    match *block {
        BlockSpec::Basic { in_channels: i, out_channels: o, .. } => {
            let mut n = 9 * i * o + 9 * o * o + 4 * o;
            if block.has_projection() {
                n += i * o + 2 * o;
            }
            n
        }
        BlockSpec::Bottleneck { in_channels: i, mid_channels: m, out_channels: o, .. } => {
            let mut n = i * m + 9 * m * m + m * o + 2 * (m + m + o);
            if block.has_projection() {
                n += i * o + 2 * o;
            }
            n
        }
        BlockSpec::Encoder { dim: d, mlp_dim: m, .. } => 4 * d + (3 * d * d + 3 * d) + (d * d + d) + (d * m + m) + (m * d + d),
    }
}

impl fmt::Display for BackboneSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} ({:?}, {} blocks)", self.name, self.family, self.blocks.len())
    }
}

// -- presets --------------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Preset {
    #[serde(rename = "resnet18")]
    ResNet18,
    #[serde(rename = "resnet34")]
    ResNet34,
    #[serde(rename = "resnet50")]
    ResNet50,
    #[serde(rename = "resnet101")]
    ResNet101,
    #[serde(rename = "resnet152")]
    ResNet152,
    #[serde(rename = "vit-b16")]
    VitB16,
    #[serde(rename = "vit-l16")]
    VitL16,
    #[serde(rename = "vit-b32-overlap")]
    VitB32Overlap,
    #[serde(rename = "vit-l32-overlap")]
    VitL32Overlap,
    #[serde(rename = "tiny-resnet")]
    TinyResNet,
    #[serde(rename = "tiny-bottleneck")]
    TinyBottleneck,
    #[serde(rename = "tiny-vit")]
    TinyVit,
}

impl Preset {
    pub const ALL: [Preset; 12] = [
        Preset::ResNet18,
        Preset::ResNet34,
        Preset::ResNet50,
        Preset::ResNet101,
        Preset::ResNet152,
        Preset::VitB16,
        Preset::VitL16,
        Preset::VitB32Overlap,
        Preset::VitL32Overlap,
        Preset::TinyResNet,
        Preset::TinyBottleneck,
        Preset::TinyVit,
    ];

    /// The canonical full-size architectures.
    pub const CANONICAL: [Preset; 9] = [
        Preset::ResNet18,
        Preset::ResNet34,
        Preset::ResNet50,
        Preset::ResNet101,
        Preset::ResNet152,
        Preset::VitB16,
        Preset::VitL16,
        Preset::VitB32Overlap,
        Preset::VitL32Overlap,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::ResNet18 => "resnet18",
            Preset::ResNet34 => "resnet34",
            Preset::ResNet50 => "resnet50",
            Preset::ResNet101 => "resnet101",
            Preset::ResNet152 => "resnet152",
            Preset::VitB16 => "vit-b16",
            Preset::VitL16 => "vit-l16",
            Preset::VitB32Overlap => "vit-b32-overlap",
            Preset::VitL32Overlap => "vit-l32-overlap",
            Preset::TinyResNet => "tiny-resnet",
            Preset::TinyBottleneck => "tiny-bottleneck",
            Preset::TinyVit => "tiny-vit",
        }
    }

    pub fn family(self) -> Family {
        match self {
            Preset::ResNet18 | Preset::ResNet34 | Preset::TinyResNet => Family::ResidualBasic,
            Preset::ResNet50 | Preset::ResNet101 | Preset::ResNet152 | Preset::TinyBottleneck => {
                Family::ResidualBottleneck
            }
            _ => Family::TransformerEncoder,
        }
    }

    fn residual_depths(self) -> Option<&'static [usize]> {
        Some(match self {
            Preset::ResNet18 => &[2, 2, 2, 2],
            Preset::ResNet34 | Preset::ResNet50 => &[3, 4, 6, 3],
            Preset::ResNet101 => &[3, 4, 23, 3],
            Preset::ResNet152 => &[3, 8, 36, 3],
            Preset::TinyResNet | Preset::TinyBottleneck => &[1, 1, 1, 1],
            _ => return None,
        })
    }

    /// `(depth, dim, heads, mlp_dim, patch)` for transformer presets.
    fn transformer_dims(self) -> Option<(usize, usize, usize, usize, PatchKind)> {
        Some(match self {
            Preset::VitB16 => (12, 768, 12, 3072, PatchKind::Plain(16)),
            Preset::VitL16 => (24, 1024, 16, 4096, PatchKind::Plain(16)),
            Preset::VitB32Overlap => (12, 768, 12, 3072, PatchKind::HalfOverlap(32)),
            Preset::VitL32Overlap => (24, 1024, 16, 4096, PatchKind::HalfOverlap(32)),
            Preset::TinyVit => (6, 128, 4, 256, PatchKind::Plain(4)),
            _ => return None,
        })
    }

    pub fn default_input(self) -> InputShape {
        match self {
            Preset::TinyResNet | Preset::TinyBottleneck => InputShape::square(3, 96),
            Preset::TinyVit => InputShape::square(3, 32),
            _ => InputShape::square(3, 224),
        }
    }

    /// The preset at its native input size.
    pub fn spec(self, num_classes: usize) -> Result<BackboneSpec> {
        self.spec_with_input(num_classes, self.default_input())
    }

    pub fn spec_with_input(self, num_classes: usize, input: InputShape) -> Result<BackboneSpec> {
        self.build(num_classes, input, 1)
    }

    /// Same block structure as the preset with every width divided by `divisor` (minimum
    /// widths are kept positive and transformer widths stay divisible by their head count).
    pub fn scaled(self, divisor: usize, num_classes: usize, input: InputShape) -> Result<BackboneSpec> {
        let mut spec = self.build(num_classes, input, divisor.max(1))?;
        if divisor > 1 {
            spec.name = format!("{}/w{}", self.name(), divisor);
        }
        Ok(spec)
    }

    fn build(self, num_classes: usize, input: InputShape, divisor: usize) -> Result<BackboneSpec> {
        let shrink = |w: usize| (w / divisor).max(1);
        if let Some(depths) = self.residual_depths() {
            let tiny = matches!(self, Preset::TinyResNet | Preset::TinyBottleneck);
            let (stem_width, widths): (usize, Vec<usize>) = match self {
                Preset::TinyResNet => (16, vec![16, 32, 64, 64]),
                Preset::TinyBottleneck => (16, vec![8, 16, 32, 32]),
                _ => (64, vec![64, 128, 256, 512]),
            };
            let stem = if tiny && input.height.min(input.width) <= 64 {
                StemSpec::Conv { out_channels: shrink(stem_width), kernel: 3, stride: 1, max_pool: false }
            } else if tiny {
                StemSpec::Conv { out_channels: shrink(stem_width), kernel: 3, stride: 2, max_pool: true }
            } else {
                StemSpec::Conv { out_channels: shrink(stem_width), kernel: 7, stride: 2, max_pool: true }
            };
            let widths: Vec<usize> = widths.into_iter().map(shrink).collect();
            return BackboneSpec::residual(self.name(), self.family(), stem, depths, &widths, input, num_classes);
        }
        let (depth, dim, heads, mlp, patch) = self.transformer_dims().expect("transformer preset");
        let (dim, heads, mlp) = if divisor > 1 {
            let dim = ((dim / divisor).max(2) / 2) * 2;
            (dim, 2, (mlp / divisor).max(1))
        } else {
            (dim, heads, mlp)
        };
        let tok = match patch {
            PatchKind::Plain(p) => PatchTokenizerSpec::non_overlapping(p, dim),
            PatchKind::HalfOverlap(p) => PatchTokenizerSpec::half_overlap(p, dim),
        };
        BackboneSpec::transformer(self.name(), tok, depth, heads, mlp, input, num_classes)
    }
}

#[derive(Clone, Copy, Debug)]
enum PatchKind {
    Plain(usize),
    HalfOverlap(usize),
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .iter()
            .copied()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::UnknownPreset(s.to_string()))
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}
