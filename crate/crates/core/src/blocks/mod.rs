//! The decoder-side building blocks: attention fusion, pyramid pooling and
//! the segmentation head.

pub mod attention;
pub mod head;
pub mod sppm;
pub mod uafm;

pub use attention::{channel_attention, spatial_attention, Attention, AttentionKind};
pub use head::SegHead;
pub use sppm::{SppmBlock, SPPM_BINS};
pub use uafm::{uafm_blend, Fusion, UafmBlock};
