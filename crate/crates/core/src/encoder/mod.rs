//! The three history encoders and the per-event feature embedding they share.

pub mod features;
pub mod lifecycle;
pub mod midterm;
pub mod recent;

pub use features::{FeatureConfig, FeatureEmbedder, ItemTable};
pub use lifecycle::{CompressedMemory, LifecycleConfig, MemoryStore, OnlineEncoder, Phi, QluCompressor};
pub use midterm::{MidConfig, MidEncoder, MidOutput};
pub use recent::{RecentConfig, RecentEncoder};

use std::sync::Arc;

/// Left-padded validity mask: `n` real slots at the end of `width`.
pub fn left_pad_mask(n: usize, width: usize) -> Arc<[bool]> {
    (0..width).map(|i| i >= width - n.min(width)).collect()
}
