//! Core library for `g2d`, a self-contained masked-face verification pipeline.
//!
//! The crate covers the full experiment loop on procedurally generated data:
//!
//! - [`tensor`] / [`autodiff`]: dense `f64` tensors and a minimal tape-based
//!   reverse-mode differentiation engine with a finite-difference checker.
//! - [`synth`]: deterministic face renderer, mask templates, affine mask
//!   overlay and dataset generation (PPM/PGM images plus a text manifest).
//! - [`losses`]: reconstruction, adversarial (WGAN with gradient penalty),
//!   relational distillation (distance/angle), embedding regression and
//!   classification objectives.
//! - [`pipeline`]: the four small networks (teacher, generative encoder and
//!   decoder, discriminative reformer, feature classifier), optimizers, and
//!   the greedy stage-wise training protocol with frozen-parameter checks.
//! - [`metrics`]: verification pair construction (MR-MP / UMR-MP) and the
//!   full metric suite (ACC, EER, FDR, FMR/FNMR, FMR100/FMR1000, ROC,
//!   score histograms).
//! - [`config`] / [`dataio`]: INI experiment configuration and the binary
//!   model/embedding containers.

pub mod autodiff;
pub mod checks;
pub mod config;
pub mod dataio;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod rng;
pub mod synth;
pub mod tensor;

pub use error::CoreError;
pub use tensor::Tensor;

/// Crate version string recorded into every output directory.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
