//! Desk-scale diffusion inversion laboratory.
//!
//! Implements deterministic DDIM inversion and reconstruction with
//! noise-map guidance (nmg), null-embedding optimization (nti), the
//! negative-embedding shortcut (npi), and plain classifier-free guidance
//! (ddim_cfg) baselines, over small analytic and trained denoisers so
//! every quantity is exactly computable and testable on a CPU.

pub mod dataset;
pub mod denoiser;
pub mod editing;
pub mod error;
pub mod inversion;
pub mod io;
pub mod metrics;
pub mod rng;
pub mod sampler;
pub mod schedule;

pub use error::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Latent variable z_t: a real-valued array with explicit shape.
/// 2D images use shape [h, w]; toy point clouds use shape [d].
pub type Latent = ndarray::ArrayD<f64>;
