//! Self-supervised, unpaired LDR<->HDR image translation toolkit.
//!
//! Cycle-consistent adversarial training with feedback U-Net generators,
//! patch discriminators, perception-driven saliency gating, contrastive and
//! segmentation-based semantic consistency losses, plus the surrounding
//! machinery: image I/O (PNG/JPEG, Radiance RGBE, PFM), tone mapping,
//! datasets, metrics, training loop and checkpointing.

pub mod autograd;
pub mod discriminator;
pub mod error;
pub mod generator;
pub mod imagecore;
pub mod checkpoint;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod perception;
pub mod semantics;
pub mod tonemap;
pub mod trainer;

pub use error::{CoreError, Result};
