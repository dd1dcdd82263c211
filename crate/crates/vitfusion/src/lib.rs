//! RGB-D fusion vision transformer backbone for off-policy visual RL.
//!
//! The crate trains a DrQ-v2-style deterministic actor-critic from pixels on a
//! procedurally rendered 2-D reach-and-lift environment. RGB and depth frames
//! are fused by separate convolutional stems feeding a shared ViT; a masked /
//! unmasked contrastive objective regularizes the encoder, the critic is
//! stabilized with a two-stream (weak + strong augmentation) loss, and domain
//! randomization ranges grow on a success-gated curriculum.
//!
//! All network math runs in `f64` on single-threaded GEMMs, so training and
//! evaluation are bit-deterministic for a fixed seed.

pub mod agent;
pub mod augment;
pub mod curriculum;
pub mod encoder;
pub mod error;
pub mod harness;
pub mod nn;
pub mod replay;
pub mod ssl;
pub mod toyenv;

pub use error::{Error, Result};
