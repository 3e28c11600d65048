//! Constant-output model: eps ignores z, t, and c entirely.
//!
//! Its z-Jacobian is zero, so full-gradient and frozen-denoiser guidance
//! must agree exactly, and reverse stepping retraces inversion up to float
//! roundoff. Used as a wiring check, not a denoiser.

use super::{check_class, check_shape, check_t, Condition, Denoiser};
use crate::schedule::NoiseSchedule;
use crate::{Error, Latent, Result};
use ndarray::Array1;

#[derive(Debug, Clone)]
pub struct ConstModel {
    schedule: NoiseSchedule,
    value: Latent,
    n_classes: usize,
}

impl ConstModel {
    /// Classes are accepted up to n_classes and ignored.
    pub fn new(schedule: NoiseSchedule, value: Latent, n_classes: usize) -> Self {
        ConstModel {
            schedule,
            value,
            n_classes,
        }
    }
}

impl Denoiser for ConstModel {
    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn latent_shape(&self) -> &[usize] {
        self.value.shape()
    }

    fn n_classes(&self) -> usize {
        self.n_classes
    }

    fn eps(&self, z: &Latent, t: usize, c: &Condition) -> Result<Latent> {
        check_shape(self.value.shape(), z)?;
        check_t(&self.schedule, t)?;
        if let Condition::Class(k) = c {
            check_class(self.n_classes, *k)?;
        }
        Ok(self.value.clone())
    }

    fn vjp_z(&self, z: &Latent, t: usize, c: &Condition, u: &Latent) -> Result<Latent> {
        check_shape(self.value.shape(), z)?;
        check_shape(self.value.shape(), u)?;
        check_t(&self.schedule, t)?;
        if let Condition::Class(k) = c {
            check_class(self.n_classes, *k)?;
        }
        Ok(Latent::zeros(z.raw_dim()))
    }

    fn vjp_embedding(
        &self,
        _z: &Latent,
        _t: usize,
        _c: &Condition,
        _u: &Latent,
    ) -> Result<Array1<f64>> {
        Err(Error::Unsupported(
            "constant stub has no embedding space".into(),
        ))
    }

    fn null_embedding(&self) -> Result<Array1<f64>> {
        Err(Error::Unsupported(
            "constant stub has no embedding space".into(),
        ))
    }

    fn class_embedding(&self, _k: usize) -> Result<Array1<f64>> {
        Err(Error::Unsupported(
            "constant stub has no embedding space".into(),
        ))
    }
}
