//! Per-rung null-embedding optimization against recorded noise maps.
//!
//! Walks the ladder top-down; at each rung, gradient-descends the null
//! embedding on the squared distance between the one-step reverse
//! prediction and the recorded z*_{t-1}, then carries the optimized latent
//! forward. The loss is a plain sum of squares (no averaging), and descent
//! backtracks by halving the step on any increase, so the recorded loss
//! sequence is non-increasing by construction.
//!
//! The combination's variant fits the same embedding per rung, but against
//! the landing point of the full two-sub-step reconstruction step it will
//! actually take, from the state that step starts at. A schedule tuned for
//! single-step landings applied inside the two-step composition carries a
//! systematic offset at this scale, so the combination optimizes what it
//! executes.

use super::{
    cfg_eps_at, energy_scale, nmg_step_parts, text_grid_index, EnergyNorm, GuidanceConfig,
    NullSchedule, Order,
};
use crate::denoiser::{Condition, Denoiser};
use crate::sampler::{check_grid, reverse_step, Direction, Trajectory};
use crate::schedule::NoiseSchedule;
use crate::{Error, Latent, Result};
use ndarray::Array1;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NtiParams {
    pub inner_iters: usize,
    pub lr: f64,
    pub stop_eps: f64,
}

impl Default for NtiParams {
    fn default() -> Self {
        NtiParams {
            inner_iters: 10,
            lr: 1e-2,
            stop_eps: 1e-5,
        }
    }
}

impl NtiParams {
    pub(crate) fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "nti lr must be positive, got {}",
                self.lr
            )));
        }
        if !(self.stop_eps >= 0.0) {
            return Err(Error::Config(format!(
                "nti stop_eps must be non-negative, got {}",
                self.stop_eps
            )));
        }
        Ok(())
    }
}

const MAX_HALVINGS: u32 = 30;

struct StepEval {
    loss: f64,
    candidate: Latent,
}

fn eval_step(
    model: &dyn Denoiser,
    s: &NoiseSchedule,
    z: &Latent,
    t: usize,
    null_e: &Array1<f64>,
    c_t: &Condition,
    s_t: f64,
    z_star: &Latent,
) -> Result<StepEval> {
    let null_c = Condition::Embedding(null_e.clone());
    let eps = cfg_eps_at(model, z, s.ladder()[t], &null_c, c_t, s_t)?;
    let candidate = reverse_step(s, z, t, &eps)?;
    let loss = candidate
        .iter()
        .zip(z_star.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(StepEval { loss, candidate })
}

/// Optimizes one null embedding per rung, t = T..1, warm-starting each
/// from the rung above. Returns the schedule and, per rung (slot t-1),
/// the loss after the initial evaluation and after each iteration.
pub fn nti_optimize(
    model: &dyn Denoiser,
    s: &NoiseSchedule,
    traj: &Trajectory,
    c_t: &Condition,
    s_t: f64,
    params: &NtiParams,
) -> Result<(NullSchedule, Vec<Vec<f64>>)> {
    check_grid(model, s)?;
    if traj.direction != Direction::Forward {
        return Err(Error::Usage(
            "nti needs a recorded inversion trajectory".into(),
        ));
    }
    let t_max = s.infer_steps();
    if traj.top_rung() != t_max {
        return Err(Error::Usage(format!(
            "trajectory has {} rungs, schedule has {}",
            traj.top_rung(),
            t_max
        )));
    }
    params.validate()?;

    let mut null_e = model.null_embedding()?;
    let mut z = traj.at(t_max).clone();
    let mut embeddings = vec![Array1::zeros(null_e.len()); t_max];
    let mut losses = vec![Vec::new(); t_max];

    for t in (1..=t_max).rev() {
        let z_star = traj.at(t - 1);
        let mut eval = eval_step(model, s, &z, t, &null_e, c_t, s_t, z_star)?;
        if !eval.loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "null optimization loss diverged at rung {t}"
            )));
        }
        let mut rung_losses = vec![eval.loss];

        // s_t = 1 makes the combined eps independent of the null branch,
        // so the gradient is identically zero and iteration is pointless.
        if s_t != 1.0 && params.inner_iters > 0 {
            let coeff_b = s.coeffs(t, t - 1)?.b;
            let mut lr = params.lr;
            for _ in 0..params.inner_iters {
                if eval.loss < params.stop_eps {
                    break;
                }
                let resid = &eval.candidate - z_star;
                let null_c = Condition::Embedding(null_e.clone());
                let vjp = model.vjp_embedding(&z, s.ladder()[t], &null_c, &resid)?;
                let grad = vjp.mapv(|v| 2.0 * coeff_b * (1.0 - s_t) * v);
                let mut accepted = false;
                for _ in 0..=MAX_HALVINGS {
                    let cand_e = &null_e - &(lr * &grad);
                    let cand = eval_step(model, s, &z, t, &cand_e, c_t, s_t, z_star)?;
                    if cand.loss <= eval.loss {
                        null_e = cand_e;
                        eval = cand;
                        accepted = true;
                        break;
                    }
                    lr /= 2.0;
                }
                rung_losses.push(eval.loss);
                if !accepted {
                    break;
                }
            }
        }

        embeddings[t - 1] = null_e.clone();
        losses[t - 1] = rung_losses;
        z = eval.candidate;
    }

    Ok((NullSchedule::new(embeddings)?, losses))
}

/// One rung of the combination's schedule fit: the embedding the combined
/// step consumed, where it landed, and the loss after the initial
/// evaluation and after each iteration.
pub(crate) struct CombinedRungFit {
    pub null_e: Array1<f64>,
    pub z_next: Latent,
    pub losses: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
fn combined_eval(
    model: &dyn Denoiser,
    s: &NoiseSchedule,
    z: &Latent,
    t: usize,
    z_star: &Latent,
    c_t: &Condition,
    cfg: &GuidanceConfig,
    null_e: &Array1<f64>,
) -> Result<(f64, Latent, Latent)> {
    let null_c = Condition::Embedding(null_e.clone());
    let (mid, out) = nmg_step_parts(model, s, z, t, z_star, c_t, cfg, &null_c)?;
    let loss = out
        .iter()
        .zip(z_star.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok((loss, mid, out))
}

// Gradient of the combined step's landing error w.r.t. the null embedding.
// The embedding enters both sub-steps directly and the second sub-step
// again through the intermediate latent. For the L2 energy the guidance
// deviation is lambda * (z' - z*) with the denoiser frozen, and z' itself
// moves with the embedding, which folds into the same vector-Jacobian
// products as the scalar factor (1 + s_N lambda b); that makes this
// gradient exact in frozen mode. What remains approximate (the full-mode
// Jacobian term inside the energy, the L1 sign pattern) is covered by the
// caller's backtracking, which guarantees descent regardless.
#[allow(clippy::too_many_arguments)]
fn combined_grad(
    model: &dyn Denoiser,
    s: &NoiseSchedule,
    z: &Latent,
    mid: &Latent,
    out: &Latent,
    t: usize,
    z_star: &Latent,
    c_t: &Condition,
    cfg: &GuidanceConfig,
    null_e: &Array1<f64>,
) -> Result<Array1<f64>> {
    let co = s.coeffs(t, t - 1)?;
    let grid_nm = s.ladder()[t];
    let grid_tx = text_grid_index(s, t, cfg);
    let null_c = Condition::Embedding(null_e.clone());
    let r = (out - z_star).mapv(|v| 2.0 * v);

    let lambda = match cfg.energy_norm {
        EnergyNorm::L2 => {
            let root = (1.0 - s.alphabar_at_rung(t)?).sqrt();
            let scale = energy_scale(z.len(), s.infer_steps());
            root * cfg.s_g * 2.0 * scale * co.a
        }
        EnergyNorm::L1 => 0.0,
    };
    let kappa = cfg.s_n * lambda * co.b;

    let text_emb = |p: &Latent, w: &Latent| -> Result<Option<Array1<f64>>> {
        if cfg.s_t == 1.0 {
            return Ok(None);
        }
        let v = model.vjp_embedding(p, grid_tx, &null_c, w)?;
        Ok(Some(v.mapv(|g| co.b * (1.0 - cfg.s_t) * g)))
    };
    let text_z = |p: &Latent, w: &Latent| -> Result<Latent> {
        if cfg.s_t == 1.0 {
            model.vjp_z(p, grid_tx, c_t, w)
        } else if cfg.s_t == 0.0 {
            model.vjp_z(p, grid_tx, &null_c, w)
        } else {
            let dn = model.vjp_z(p, grid_tx, &null_c, w)?;
            let dc = model.vjp_z(p, grid_tx, c_t, w)?;
            Ok(dn.mapv(|v| (1.0 - cfg.s_t) * v) + dc.mapv(|v| cfg.s_t * v))
        }
    };

    match cfg.order {
        Order::NoiseMapFirst => {
            let mut g = match text_emb(mid, &r)? {
                Some(v) => v,
                None => Array1::zeros(null_e.len()),
            };
            let u = r.mapv(|v| co.a * v) + text_z(mid, &r)?.mapv(|v| co.b * v);
            g = g + model
                .vjp_embedding(z, grid_nm, &null_c, &u)?
                .mapv(|v| co.b * (1.0 + kappa) * v);
            Ok(g)
        }
        Order::TextFirst => {
            let mut g = model
                .vjp_embedding(mid, grid_nm, &null_c, &r)?
                .mapv(|v| co.b * (1.0 + kappa) * v);
            let u = (r.mapv(|v| co.a * v)
                + model.vjp_z(mid, grid_nm, &null_c, &r)?.mapv(|v| co.b * v))
            .mapv(|v| (1.0 + kappa) * v);
            if let Some(v) = text_emb(z, &u)? {
                g = g + v;
            }
            Ok(g)
        }
    }
}

/// Optimizes one rung's null embedding against the landing point of the
/// combined noise-map + text step, warm-starting from `warm`. Unlike the
/// plain objective, s_T = 1 does not make the problem degenerate here: the
/// noise-map sub-step still consumes the embedding.
#[allow(clippy::too_many_arguments)]
pub(crate) fn optimize_combined_rung(
    model: &dyn Denoiser,
    s: &NoiseSchedule,
    z: &Latent,
    t: usize,
    z_star: &Latent,
    c_t: &Condition,
    cfg: &GuidanceConfig,
    params: &NtiParams,
    warm: Array1<f64>,
) -> Result<CombinedRungFit> {
    params.validate()?;
    let mut null_e = warm;
    let (mut loss, mut mid, mut out) = combined_eval(model, s, z, t, z_star, c_t, cfg, &null_e)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!(
            "combined null optimization loss diverged at rung {t}"
        )));
    }
    let mut losses = vec![loss];
    let mut lr = params.lr;
    for _ in 0..params.inner_iters {
        if loss < params.stop_eps {
            break;
        }
        let grad = combined_grad(model, s, z, &mid, &out, t, z_star, c_t, cfg, &null_e)?;
        let mut accepted = false;
        for _ in 0..=MAX_HALVINGS {
            let cand_e = &null_e - &(lr * &grad);
            let (cand_loss, cand_mid, cand_out) =
                combined_eval(model, s, z, t, z_star, c_t, cfg, &cand_e)?;
            if cand_loss <= loss {
                null_e = cand_e;
                loss = cand_loss;
                mid = cand_mid;
                out = cand_out;
                accepted = true;
                break;
            }
            lr /= 2.0;
        }
        losses.push(loss);
        if !accepted {
            break;
        }
    }
    Ok(CombinedRungFit {
        null_e,
        z_next: out,
        losses,
    })
}
