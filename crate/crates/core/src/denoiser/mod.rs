//! Denoiser models and the conditioning type they share.
//!
//! Three implementations: an analytic Gaussian-mixture model with exact
//! score and Jacobian, a small trainable fully-connected model with
//! hand-derived vector-Jacobian products, and a constant-output stub whose
//! zero Jacobian pins down guidance wiring in tests.

pub mod analytic;
pub mod mlp;
pub mod stub;

pub use analytic::{AnalyticModel, MixtureComponent};
pub use mlp::{TrainConfig, TrainedModel};
pub use stub::ConstModel;

use crate::schedule::NoiseSchedule;
use crate::{Error, Latent, Result};
use ndarray::Array1;

/// Semantic condition: nothing, a discrete class, or a raw embedding
/// vector (the form nti optimizes in place of the built-in null row).
#[derive(Debug, Clone, PartialEq)]
pub enum Condition {
    Null,
    Class(usize),
    Embedding(Array1<f64>),
}

pub trait Denoiser {
    fn schedule(&self) -> &NoiseSchedule;

    fn latent_shape(&self) -> &[usize];

    fn n_classes(&self) -> usize;

    /// Predicted noise at train-grid index t. Samplers pass ladder rungs;
    /// any index within the training grid is accepted.
    fn eps(&self, z: &Latent, t: usize, c: &Condition) -> Result<Latent>;

    /// (deps/dz)^T u, exact for the model.
    fn vjp_z(&self, z: &Latent, t: usize, c: &Condition, u: &Latent) -> Result<Latent>;

    /// (deps/de)^T u where e is the embedding carried by c.
    /// c must be an embedding condition.
    fn vjp_embedding(&self, z: &Latent, t: usize, c: &Condition, u: &Latent)
        -> Result<Array1<f64>>;

    /// The model's null embedding row, for warm-starting nti.
    fn null_embedding(&self) -> Result<Array1<f64>>;

    /// Embedding vector standing in for class k, for npi.
    fn class_embedding(&self, k: usize) -> Result<Array1<f64>>;
}

pub(crate) fn check_shape(expected: &[usize], got: &Latent) -> Result<()> {
    if got.shape() != expected {
        return Err(Error::shape_mismatch(expected, got.shape()));
    }
    Ok(())
}

pub(crate) fn check_t(s: &NoiseSchedule, t: usize) -> Result<()> {
    if t > s.train_steps() {
        return Err(Error::Usage(format!(
            "timestep {t} outside training grid 0..={}",
            s.train_steps()
        )));
    }
    Ok(())
}

pub(crate) fn check_class(n_classes: usize, k: usize) -> Result<()> {
    if k >= n_classes {
        return Err(Error::Usage(format!(
            "class {k} out of range for {n_classes} classes"
        )));
    }
    Ok(())
}
