//! Graph out-of-distribution detection through implicit adversarial
//! training: a latent generative model (VAE or latent diffusion) imitates
//! the in-distribution embeddings of an evolving GCN while the classifier
//! and an energy-transforming detector push the generated pseudo-OOD
//! samples away in energy space. Includes energy/MSP/GNNSafe baselines,
//! synthetic-OOD dataset builders, and an oracle-checked metric suite.
//!
//! Everything runs on a small hand-rolled f64 substrate (dense kernels,
//! CSR sparse products, a reverse-mode tape, Adam) so results are
//! deterministic given a seed.

pub mod cli;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod generators;
pub mod graph;
pub mod models;
pub mod numerics;
pub mod objectives;
pub mod pipeline;

pub use error::{Error, Result};
