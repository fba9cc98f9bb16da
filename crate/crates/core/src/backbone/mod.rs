//! Backbones as a stem followed by an ordered list of atomic blocks, and the prefix
//! networks trained at each curriculum stage.

pub mod blocks;
pub mod head;
pub mod network;
pub mod spec;
pub mod stem;

pub use blocks::Block;
pub use head::Head;
pub use network::{build_backbone, build_prefix, grow, head_prefix, OrderedBlocks, PrefixNetwork};
pub use spec::{
    BackboneSpec, BlockSpec, Family, FeatureShape, HeadKind, InputShape, PatchTokenizerSpec, Preset, StemSpec,
    HEAD_EMBED_WIDTH,
};
pub use stem::{tokenize, PatchEmbed, Stem};
