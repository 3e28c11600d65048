//! DDIM stepping, classifier-free guidance, and trajectory runners.
//!
//! Both step directions share one affine form z_to = a z_from + b eps with
//! coefficients from the schedule, so each inversion step is the exact
//! algebraic inverse of the matching reverse step when the same eps value
//! is used. The runners evaluate eps at the current latent; the timestep
//! argument for an inversion step t -> t+1 is the destination rung's grid
//! index, mirroring the (latent, timestep) pairing the reverse pass will
//! use when it retraces the same rung. That pairing is what keeps w=1
//! round trips near machine precision instead of discretization scale.

use crate::denoiser::{Condition, Denoiser};
use crate::schedule::{NoiseSchedule, StepCoeffs};
use crate::{Error, Latent, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// Inversion: data toward noise, rung 0 -> T.
    Forward,
    /// Reverse: noise toward data, rung T -> 0.
    Backward,
}

/// Latents indexed by inference rung 0..=T regardless of direction.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub latents: Vec<Latent>,
    pub direction: Direction,
}

impl Trajectory {
    /// T, the last rung index.
    pub fn top_rung(&self) -> usize {
        self.latents.len() - 1
    }

    pub fn at(&self, t: usize) -> &Latent {
        &self.latents[t]
    }
}

/// eps_null + w (eps_cond - eps_null). The w = 0 and w = 1 cases return
/// the respective input bit-exactly rather than through the arithmetic.
pub fn cfg_eps(eps_null: &Latent, eps_cond: &Latent, w: f64) -> Result<Latent> {
    if eps_null.shape() != eps_cond.shape() {
        return Err(Error::shape_mismatch(eps_null.shape(), eps_cond.shape()));
    }
    if w == 0.0 {
        return Ok(eps_null.clone());
    }
    if w == 1.0 {
        return Ok(eps_cond.clone());
    }
    Ok(eps_null + &(w * &(eps_cond - eps_null)))
}

fn apply(c: StepCoeffs, z: &Latent, eps: &Latent) -> Result<Latent> {
    if z.shape() != eps.shape() {
        return Err(Error::shape_mismatch(z.shape(), eps.shape()));
    }
    Ok(c.a * z + &(c.b * eps))
}

/// One step down the ladder, t -> t-1.
pub fn reverse_step(s: &NoiseSchedule, z: &Latent, t: usize, eps: &Latent) -> Result<Latent> {
    if t == 0 {
        return Err(Error::Usage("reverse step needs t > 0".into()));
    }
    apply(s.coeffs(t, t - 1)?, z, eps)
}

/// One step up the ladder, t -> t+1.
pub fn inversion_step(s: &NoiseSchedule, z: &Latent, t: usize, eps: &Latent) -> Result<Latent> {
    if t >= s.infer_steps() {
        return Err(Error::Usage(format!(
            "inversion step needs t < {}",
            s.infer_steps()
        )));
    }
    apply(s.coeffs(t, t + 1)?, z, eps)
}

/// CFG-combined eps at train-grid index t_grid. w = 1 skips the null
/// branch entirely, so it is bit-identical to the conditional prediction.
pub fn guided_eps(
    model: &dyn Denoiser,
    z: &Latent,
    t_grid: usize,
    c: &Condition,
    w: f64,
) -> Result<Latent> {
    if w == 1.0 {
        return model.eps(z, t_grid, c);
    }
    let eps_null = model.eps(z, t_grid, &Condition::Null)?;
    let eps_cond = model.eps(z, t_grid, c)?;
    cfg_eps(&eps_null, &eps_cond, w)
}

pub(crate) fn check_grid(model: &dyn Denoiser, s: &NoiseSchedule) -> Result<()> {
    if !model.schedule().params().same_train_grid(s.params()) {
        return Err(Error::Usage(
            "model was built on a different training grid than the schedule".into(),
        ));
    }
    Ok(())
}

/// Records z*_0..z*_T stepping data toward noise, plus the eps actually
/// applied at each step (eps[t] took rung t to t+1).
pub fn run_inversion_with_eps(
    model: &dyn Denoiser,
    s: &NoiseSchedule,
    z0: &Latent,
    c: &Condition,
    w: f64,
) -> Result<(Trajectory, Vec<Latent>)> {
    check_grid(model, s)?;
    let t_max = s.infer_steps();
    let mut latents = Vec::with_capacity(t_max + 1);
    let mut eps_used = Vec::with_capacity(t_max);
    latents.push(z0.clone());
    for t in 0..t_max {
        let eps = guided_eps(model, &latents[t], s.ladder()[t + 1], c, w)?;
        let next = inversion_step(s, &latents[t], t, &eps)?;
        latents.push(next);
        eps_used.push(eps);
    }
    Ok((
        Trajectory {
            latents,
            direction: Direction::Forward,
        },
        eps_used,
    ))
}

pub fn run_inversion(
    model: &dyn Denoiser,
    s: &NoiseSchedule,
    z0: &Latent,
    c: &Condition,
    w: f64,
) -> Result<Trajectory> {
    Ok(run_inversion_with_eps(model, s, z0, c, w)?.0)
}

/// Steps noise toward data, rung T -> 0, with CFG weight w.
pub fn run_reverse(
    model: &dyn Denoiser,
    s: &NoiseSchedule,
    z_top: &Latent,
    c: &Condition,
    w: f64,
) -> Result<Trajectory> {
    check_grid(model, s)?;
    let t_max = s.infer_steps();
    let mut latents = vec![Latent::zeros(z_top.raw_dim()); t_max + 1];
    latents[t_max] = z_top.clone();
    for t in (1..=t_max).rev() {
        let eps = guided_eps(model, &latents[t], s.ladder()[t], c, w)?;
        latents[t - 1] = reverse_step(s, &latents[t], t, &eps)?;
    }
    Ok(Trajectory {
        latents,
        direction: Direction::Backward,
    })
}

/// Reverse pass that reuses recorded eps values verbatim: eps[t] is
/// applied stepping rung t+1 -> t. Exactly inverts the recording pass up
/// to float roundoff, independent of where the eps came from.
pub fn replay_reverse(s: &NoiseSchedule, z_top: &Latent, eps: &[Latent]) -> Result<Trajectory> {
    let t_max = s.infer_steps();
    if eps.len() != t_max {
        return Err(Error::Usage(format!(
            "need {} eps values, got {}",
            t_max,
            eps.len()
        )));
    }
    let mut latents = vec![Latent::zeros(z_top.raw_dim()); t_max + 1];
    latents[t_max] = z_top.clone();
    for t in (1..=t_max).rev() {
        latents[t - 1] = reverse_step(s, &latents[t], t, &eps[t - 1])?;
    }
    Ok(Trajectory {
        latents,
        direction: Direction::Backward,
    })
}
