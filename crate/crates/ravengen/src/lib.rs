//! Answer generation for Raven-style progressive matrices: a conditional
//! generative model that looks at the eight context images of a 3x3 grid
//! and synthesizes a plausible ninth image, together with the training,
//! evaluation and data tooling around it.
//!
//! The model combines three pathways through shared networks: a VAE that
//! reconstructs the choice panels, a recognition head that scores choices
//! and predicts rule metadata, and a generation pathway that encodes the
//! context at three scales, reasons over rows and columns, translates the
//! fused embedding into the VAE latent space, and decodes an answer. A
//! dynamic selective KL regularizer keeps noise on the latent directions
//! that do not carry the answer, and a contrastive loss over frozen
//! relation codes conditions the generated panel on the grid's rules.

pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod nets;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod trainer;

pub use error::{Error, Result};
