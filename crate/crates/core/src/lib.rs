//! Desk-scale laboratory for one-shot generative domain adaptation.
//!
//! A small style-based GAN is pretrained on procedural domains, then adapted
//! to a target described by one (or a few) reference images by training only
//! a latent-space attribute adaptor, the output projection, and a one-layer
//! attribute classifier on top of a frozen discriminator backbone.

pub mod adapt;
pub mod analysis;
pub mod cli;
pub mod domains;
pub mod engine;
pub mod io;
pub mod metrics;
pub mod nets;
pub mod pretrain;
pub mod rng;

pub use engine::{Tape, Tensor, TensorError, Var};
