//! Transformer building blocks shared by the encoder, decoder, and baseline.

pub mod block;
pub mod embed;
pub mod linear;
pub mod mask;
pub mod params;
pub mod rope;

pub use block::{BlockCtx, BlockOut, DitBlock, FinalLayer, KvCache};
pub use embed::TimestepEmbedder;
pub use linear::Linear;
pub use mask::{build_mask, last_frame_mask, Mask, MaskKind};
pub use params::{Bound, ParamId, ParamStore};
pub use rope::{RopeMode, RopeTable, TokenPos};
