//! Multimodal beam prediction on a synthetic air-to-ground scene.
//!
//! The crate is organised around five subsystems:
//!
//! - [`numcore`] — deterministic tensor math with tape-based reverse-mode
//!   automatic differentiation, the neural-network primitive set, and the
//!   Adam optimizer with a step-decay schedule.
//! - [`airsim`] — a synthetic scene/channel simulator: ULA steering vectors,
//!   a DFT beam codebook, line-of-sight channels, the codebook-gain beam
//!   oracle, a pinhole camera renderer, and a deterministic dataset generator.
//! - [`pipeline`] — preprocessing: image augmentation and normalization,
//!   min–max scaling of the structured sensor vector, dataset splitting,
//!   and batching.
//! - [`beamnet`] — the model: CNN visual branch, Transformer structured
//!   branch, cross-attention fusion, and the beam classifier.
//! - [`harness`] — training loop, Top-K / confusion-matrix evaluation, and
//!   learning-rate sweeps.
//!
//! [`checkpoint`] and [`runconfig`] define the on-disk formats shared with
//! the `beamcast` CLI.

pub mod airsim;
pub mod beamnet;
pub mod checkpoint;
pub mod error;
pub mod harness;
pub mod numcore;
pub mod pipeline;
pub mod runconfig;
pub mod rng;

pub use error::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Returns false when the `BEAMCAST_PARALLEL` environment variable is set to
/// `0` or `false`; reference mode forces all batch/dataset work onto a single
/// thread. Parallel mode is still byte-deterministic (ordered reductions),
/// so the toggle exists for debugging and timing comparisons.
pub fn parallel_enabled() -> bool {
    match std::env::var("BEAMCAST_PARALLEL") {
        Ok(v) => !matches!(v.trim(), "0" | "false" | "off"),
        Err(_) => true,
    }
}
