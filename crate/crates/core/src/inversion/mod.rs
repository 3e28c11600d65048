//! Reconstruction methods over recorded inversion trajectories: plain CFG,
//! noise-map guidance (nmg), null-embedding optimization (nti), the
//! negative-embedding shortcut (npi), and the nti+nmg combination.

pub mod nti;
pub mod reconstruct;

pub use nti::{nti_optimize, NtiParams};
pub use reconstruct::{reconstruct, Reconstruction};

use crate::denoiser::{Condition, Denoiser};
use crate::sampler::{cfg_eps, reverse_step};
use crate::schedule::NoiseSchedule;
use crate::{Error, Latent, Result};
use ndarray::Array1;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EnergyNorm {
    #[serde(rename = "l1", alias = "L1")]
    L1,
    #[serde(rename = "l2", alias = "L2")]
    L2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GradMode {
    #[serde(rename = "full_vjp", alias = "full")]
    FullVjp,
    #[serde(rename = "frozen_denoiser", alias = "frozen")]
    FrozenDenoiser,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Order {
    #[serde(rename = "noise_map_first", alias = "nm-first")]
    NoiseMapFirst,
    #[serde(rename = "text_first", alias = "text-first")]
    TextFirst,
}

/// Which grid index the text sub-step hands the denoiser: the rung being
/// stepped (default) or the rung below it. Exposed for comparison only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TextTimestep {
    #[serde(rename = "current")]
    Current,
    #[serde(rename = "previous")]
    Previous,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceConfig {
    #[serde(rename = "s_N")]
    pub s_n: f64,
    #[serde(rename = "s_T")]
    pub s_t: f64,
    pub s_g: f64,
    #[serde(rename = "norm", alias = "energy_norm")]
    pub energy_norm: EnergyNorm,
    pub grad_mode: GradMode,
    pub order: Order,
    pub text_timestep: TextTimestep,
}

impl Default for GuidanceConfig {
    /// Reconstruction defaults. The L2 energy is the default because its
    /// correction is proportional to the deviation it corrects; the L1
    /// kick has constant magnitude, which overshoots small deviations into
    /// a limit cycle at these scales. L1 stays available for the energy
    /// ablation.
    fn default() -> Self {
        GuidanceConfig {
            s_n: 10.0,
            s_t: 7.5,
            s_g: 10000.0,
            energy_norm: EnergyNorm::L2,
            grad_mode: GradMode::FullVjp,
            order: Order::NoiseMapFirst,
            text_timestep: TextTimestep::Current,
        }
    }
}

impl GuidanceConfig {
    pub fn editing_defaults() -> Self {
        GuidanceConfig {
            s_t: 10.0,
            s_g: 5000.0,
            ..GuidanceConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("s_N", self.s_n), ("s_T", self.s_t), ("s_g", self.s_g)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!(
                    "{name} must be finite and non-negative, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Per-rung null embeddings, slot t-1 holding the vector used at rung t.
#[derive(Debug, Clone, PartialEq)]
pub struct NullSchedule {
    embeddings: Vec<Array1<f64>>,
}

impl NullSchedule {
    pub fn new(embeddings: Vec<Array1<f64>>) -> Result<Self> {
        if let Some(first) = embeddings.first() {
            if embeddings.iter().any(|e| e.len() != first.len()) {
                return Err(Error::Config("null schedule dims are not uniform".into()));
            }
        }
        Ok(NullSchedule { embeddings })
    }

    pub fn constant(e: Array1<f64>, rungs: usize) -> Self {
        NullSchedule {
            embeddings: vec![e; rungs],
        }
    }

    /// Embedding for rung t, t in 1..=len.
    pub fn at(&self, t: usize) -> Result<&Array1<f64>> {
        if t == 0 || t > self.embeddings.len() {
            return Err(Error::Usage(format!(
                "null schedule has rungs 1..={}, asked for {t}",
                self.embeddings.len()
            )));
        }
        Ok(&self.embeddings[t - 1])
    }

    pub fn len(&self) -> usize {
        self.embeddings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.is_empty()
    }

    pub fn embeddings(&self) -> &[Array1<f64>] {
        &self.embeddings
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "ddim_cfg")]
    DdimCfg,
    #[serde(rename = "nti")]
    Nti,
    #[serde(rename = "npi")]
    Npi,
    #[serde(rename = "nmg")]
    Nmg,
    #[serde(rename = "nti_plus_nmg")]
    NtiPlusNmg,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::DdimCfg,
        Method::Nti,
        Method::Npi,
        Method::Nmg,
        Method::NtiPlusNmg,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Method::DdimCfg => "ddim_cfg",
            Method::Nti => "nti",
            Method::Npi => "npi",
            Method::Nmg => "nmg",
            Method::NtiPlusNmg => "nti_plus_nmg",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Method> {
        Method::ALL
            .iter()
            .copied()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown method '{s}', expected one of ddim_cfg, nti, npi, nmg, nti_plus_nmg"
                ))
            })
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Desk-scale calibration of the guidance energy. Residuals are averaged
/// per element and per ladder rung so the default scales carry across
/// latent sizes and ladder densities. The 0.6 sets the top-rung loop gain
/// of the proportional (L2) correction: on the shapes model, sweeps put
/// the onset of per-rung overshoot between 0.6 and 1.0, and values well
/// below 0.5 leave deviations uncorrected at the low-gain bottom rungs.
const ENERGY_CALIBRATION: f64 = 0.6;

fn energy_scale(numel: usize, rungs: usize) -> f64 {
    ENERGY_CALIBRATION / (numel * rungs) as f64
}

fn sign0(d: f64) -> f64 {
    if d > 0.0 {
        1.0
    } else if d < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Subgradient of the averaged energy with respect to z', where
/// delta = z' - z*.
fn norm_subgradient(delta: &Latent, norm: EnergyNorm, scale: f64) -> Latent {
    match norm {
        EnergyNorm::L1 => delta.mapv(|d| sign0(d) * scale),
        EnergyNorm::L2 => delta.mapv(|d| 2.0 * d * scale),
    }
}

/// The averaged energy value itself; used by finite-difference checks.
pub fn energy_value(
    model: &dyn Denoiser,
    s: &NoiseSchedule,
    z_t: &Latent,
    t: usize,
    z_star_prev: &Latent,
    cfg: &GuidanceConfig,
) -> Result<f64> {
    let eps_null = model.eps(z_t, s.ladder()[check_energy_rung(s, t)?], &Condition::Null)?;
    let z_prime = reverse_step(s, z_t, t, &eps_null)?;
    let scale = energy_scale(z_t.len(), s.infer_steps());
    let delta = &z_prime - z_star_prev;
    Ok(match cfg.energy_norm {
        EnergyNorm::L1 => delta.iter().map(|d| d.abs()).sum::<f64>() * scale,
        EnergyNorm::L2 => delta.iter().map(|d| d * d).sum::<f64>() * scale,
    })
}

fn check_energy_rung(s: &NoiseSchedule, t: usize) -> Result<usize> {
    if t == 0 {
        return Err(Error::Usage("energy gradient needs t > 0".into()));
    }
    s.check_rung(t)?;
    Ok(t)
}

fn energy_grad_inner(
    model: &dyn Denoiser,
    s: &NoiseSchedule,
    z_t: &Latent,
    t: usize,
    z_star_prev: &Latent,
    cfg: &GuidanceConfig,
    null_c: &Condition,
    eps_null: &Latent,
) -> Result<Latent> {
    if z_star_prev.shape() != z_t.shape() {
        return Err(Error::shape_mismatch(z_t.shape(), z_star_prev.shape()));
    }
    let coeffs = s.coeffs(t, t - 1)?;
    let z_prime = reverse_step(s, z_t, t, eps_null)?;
    let scale = energy_scale(z_t.len(), s.infer_steps());
    let g = norm_subgradient(&(&z_prime - z_star_prev), cfg.energy_norm, scale);
    match cfg.grad_mode {
        GradMode::FrozenDenoiser => Ok(coeffs.a * &g),
        GradMode::FullVjp => {
            let through = model.vjp_z(z_t, s.ladder()[t], null_c, &g)?;
            Ok(coeffs.a * &g + &(coeffs.b * &through))
        }
    }
}

/// Gradient of the averaged distance between the one-step unconditional
/// reverse prediction z' and the recorded z*_{t-1}, with respect to z_t.
pub fn energy_grad(
    model: &dyn Denoiser,
    s: &NoiseSchedule,
    z_t: &Latent,
    t: usize,
    z_star_prev: &Latent,
    cfg: &GuidanceConfig,
) -> Result<Latent> {
    check_energy_rung(s, t)?;
    let eps_null = model.eps(z_t, s.ladder()[t], &Condition::Null)?;
    energy_grad_inner(model, s, z_t, t, z_star_prev, cfg, &Condition::Null, &eps_null)
}

/// sqrt(1 - alphabar_t) * s_g * energy_grad: the additive deviation that
/// turns the unconditional eps into the noise-map-conditioned eps.
fn nmg_deviation(
    model: &dyn Denoiser,
    s: &NoiseSchedule,
    z_t: &Latent,
    t: usize,
    z_star_prev: &Latent,
    cfg: &GuidanceConfig,
    null_c: &Condition,
    eps_null: &Latent,
) -> Result<Latent> {
    let grad = energy_grad_inner(model, s, z_t, t, z_star_prev, cfg, null_c, eps_null)?;
    let root = (1.0 - s.alphabar_at_rung(t)?).sqrt();
    Ok((root * cfg.s_g) * &grad)
}

fn nmg_eps_with_null(
    model: &dyn Denoiser,
    s: &NoiseSchedule,
    z_t: &Latent,
    t: usize,
    z_star_prev: &Latent,
    cfg: &GuidanceConfig,
    null_c: &Condition,
) -> Result<Latent> {
    check_energy_rung(s, t)?;
    let eps_null = model.eps(z_t, s.ladder()[t], null_c)?;
    if cfg.s_g == 0.0 {
        return Ok(eps_null);
    }
    let dev = nmg_deviation(model, s, z_t, t, z_star_prev, cfg, null_c, &eps_null)?;
    Ok(&eps_null + &dev)
}

/// Noise-map-conditioned eps: eps(z_t, null) plus the scaled energy
/// gradient. s_g = 0 returns the unconditional eps bit-exactly.
pub fn nmg_eps(
    model: &dyn Denoiser,
    s: &NoiseSchedule,
    z_t: &Latent,
    t: usize,
    z_star_prev: &Latent,
    cfg: &GuidanceConfig,
) -> Result<Latent> {
    nmg_eps_with_null(model, s, z_t, t, z_star_prev, cfg, &Condition::Null)
}

fn nmg_guided_eps_with_null(
    model: &dyn Denoiser,
    s: &NoiseSchedule,
    z_t: &Latent,
    t: usize,
    z_star_prev: &Latent,
    cfg: &GuidanceConfig,
    null_c: &Condition,
) -> Result<Latent> {
    check_energy_rung(s, t)?;
    let eps_null = model.eps(z_t, s.ladder()[t], null_c)?;
    if cfg.s_g == 0.0 || cfg.s_n == 0.0 {
        return Ok(eps_null);
    }
    let dev = nmg_deviation(model, s, z_t, t, z_star_prev, cfg, null_c, &eps_null)?;
    Ok(&eps_null + &(cfg.s_n * &dev))
}

/// eps(z_t, null) + s_N * (nmg_eps - eps(z_t, null)), the guidance-weighted
/// noise-map eps. s_N = 0 returns the unconditional eps bit-exactly;
/// s_N = 1 equals nmg_eps bit-exactly.
pub fn nmg_guided_eps(
    model: &dyn Denoiser,
    s: &NoiseSchedule,
    z_t: &Latent,
    t: usize,
    z_star_prev: &Latent,
    cfg: &GuidanceConfig,
) -> Result<Latent> {
    nmg_guided_eps_with_null(model, s, z_t, t, z_star_prev, cfg, &Condition::Null)
}

fn text_grid_index(s: &NoiseSchedule, t: usize, cfg: &GuidanceConfig) -> usize {
    match cfg.text_timestep {
        TextTimestep::Current => s.ladder()[t],
        TextTimestep::Previous => s.ladder()[t - 1],
    }
}

pub(crate) fn cfg_eps_at(
    model: &dyn Denoiser,
    z: &Latent,
    grid: usize,
    null_c: &Condition,
    c_t: &Condition,
    w: f64,
) -> Result<Latent> {
    if w == 1.0 {
        return model.eps(z, grid, c_t);
    }
    if w == 0.0 {
        return model.eps(z, grid, null_c);
    }
    let eps_null = model.eps(z, grid, null_c)?;
    let eps_cond = model.eps(z, grid, c_t)?;
    cfg_eps(&eps_null, &eps_cond, w)
}

/// nmg_step with the intermediate latent exposed, for callers that need to
/// backpropagate through both sub-steps.
#[allow(clippy::too_many_arguments)]
pub(crate) fn nmg_step_parts(
    model: &dyn Denoiser,
    s: &NoiseSchedule,
    z_t: &Latent,
    t: usize,
    z_star_prev: &Latent,
    c_t: &Condition,
    cfg: &GuidanceConfig,
    null_c: &Condition,
) -> Result<(Latent, Latent)> {
    check_energy_rung(s, t)?;
    match cfg.order {
        Order::NoiseMapFirst => {
            let eps_nm = nmg_guided_eps_with_null(model, s, z_t, t, z_star_prev, cfg, null_c)?;
            let z_nm = reverse_step(s, z_t, t, &eps_nm)?;
            let grid = text_grid_index(s, t, cfg);
            let eps_text = cfg_eps_at(model, &z_nm, grid, null_c, c_t, cfg.s_t)?;
            let out = reverse_step(s, &z_nm, t, &eps_text)?;
            Ok((z_nm, out))
        }
        Order::TextFirst => {
            let grid = text_grid_index(s, t, cfg);
            let eps_text = cfg_eps_at(model, z_t, grid, null_c, c_t, cfg.s_t)?;
            let z_text = reverse_step(s, z_t, t, &eps_text)?;
            let eps_nm = nmg_guided_eps_with_null(model, s, &z_text, t, z_star_prev, cfg, null_c)?;
            let out = reverse_step(s, &z_text, t, &eps_nm)?;
            Ok((z_text, out))
        }
    }
}

/// One full reconstruction step at rung t: a noise-map sub-step and a text
/// CFG sub-step, both landing on rung t-1 coefficients, composed in the
/// configured order. null_t, when given, replaces the model's null
/// condition in both sub-steps.
#[allow(clippy::too_many_arguments)]
pub fn nmg_step(
    model: &dyn Denoiser,
    s: &NoiseSchedule,
    z_t: &Latent,
    t: usize,
    z_star_prev: &Latent,
    c_t: &Condition,
    cfg: &GuidanceConfig,
    null_t: Option<&Array1<f64>>,
) -> Result<Latent> {
    let null_c = match null_t {
        Some(e) => Condition::Embedding(e.clone()),
        None => Condition::Null,
    };
    Ok(nmg_step_parts(model, s, z_t, t, z_star_prev, c_t, cfg, &null_c)?.1)
}
