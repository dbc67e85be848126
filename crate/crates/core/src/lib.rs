//! Desk-scale text-to-motion diffusion built around the CLR block (convolution,
//! self-attention, cross-attention, feed-forward), with training-free editing
//! through attention manipulation and action counting from self-attention maps.
//!
//! Module map:
//!
//! * [`corpus`] procedural (prompt, motion) pairs on a 6-joint toy skeleton
//! * [`text`] tokenizer and learned word embeddings
//! * [`network`] CLR blocks, the U-Net denoiser, attention hooks and recorder
//! * [`diffusion`] noise schedule, training loop, DDIM sampling with guidance
//! * [`editing`] attention manipulations and the paired reference/edited runner
//! * [`counting`] action counting from self-attention maps and root trajectories
//! * [`persistence`] tensor files, checkpoints and motion export

pub mod corpus;
pub mod counting;
pub mod diffusion;
pub mod editing;
pub mod error;
pub mod model;
pub mod network;
pub mod persistence;
pub mod scalar;
pub mod text;

pub use error::{Error, ErrorClass, Result};
pub use scalar::Scalar;
