//! Multi-agent trajectory prediction with multiscale hypergraph relational
//! reasoning, validated on self-generated physics simulations.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`] / [`graph`] / [`nn`]: a minimal differentiable-computation
//!   core (dense tensors, a reverse-mode tape, MLP/GRU layers, Adam,
//!   Gumbel-softmax, a finite-difference gradient checker).
//! - [`sim`]: labelled synthetic scenes (springs, rigid light bars, charged
//!   particles) with a JSON-lines dataset format.
//! - [`topology`]: trajectory-embedding affinities and multiscale hyperedge
//!   search (exact enumeration and greedy).
//! - [`nmp`]: node-to-hyperedge / hyperedge-to-node neural message passing
//!   with the three-element interaction representation (strength, category,
//!   per-category function).
//! - [`predictor`]: the CVAE prediction system (twin encoders, latent
//!   sampling, residual two-block decoder, three-term loss, training loop).
//! - [`eval`]: displacement metrics and the relational-reasoning probes.
//! - [`config`]: the experiment configuration schema shared with the CLI.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod eval;
pub mod fsutil;
pub mod graph;
pub mod nmp;
pub mod nn;
pub mod predictor;
pub mod rng;
pub mod scalar;
pub mod sim;
pub mod tensor;
pub mod topology;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use rng::SeedRng;
pub use scalar::{Real, Scalar};
pub use tensor::Tensor;
