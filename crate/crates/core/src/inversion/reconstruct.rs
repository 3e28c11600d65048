//! Full reverse passes against recorded noise maps, one per method.

use super::nti::{nti_optimize, optimize_combined_rung, NtiParams};
use super::{cfg_eps_at, nmg_step, GuidanceConfig, Method, NullSchedule};
use crate::denoiser::{Condition, Denoiser};
use crate::sampler::{check_grid, reverse_step, Direction, Trajectory};
use crate::schedule::NoiseSchedule;
use crate::{Error, Latent, Result};
use ndarray::Array1;
use std::time::Instant;

/// One method's reverse pass. `deviation` holds (rung, ||z_t - z*_t||) for
/// every rung from T down to 0; the rung-T entry is zero because the pass
/// starts from the recorded top latent. `path` keeps the full descent so
/// editing can fan out from it.
#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub method: Method,
    pub output: Latent,
    pub path: Trajectory,
    pub deviation: Vec<(usize, f64)>,
    pub null_schedule: Option<NullSchedule>,
    pub wall_ms: f64,
}

fn source_embedding(model: &dyn Denoiser, c_t: &Condition) -> Result<Array1<f64>> {
    match c_t {
        Condition::Null => model.null_embedding(),
        Condition::Class(k) => model.class_embedding(*k),
        Condition::Embedding(e) => Ok(e.clone()),
    }
}

fn l2(a: &Latent, b: &Latent) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Replays the reverse pass for `method` against the noise maps in `traj`,
/// conditioning on `c_t`. NTI-family methods optimize their null schedule
/// first; its wall time is part of `wall_ms`.
pub fn reconstruct(
    model: &dyn Denoiser,
    s: &NoiseSchedule,
    traj: &Trajectory,
    c_t: &Condition,
    method: Method,
    cfg: &GuidanceConfig,
    nti_params: &NtiParams,
) -> Result<Reconstruction> {
    cfg.validate()?;
    check_grid(model, s)?;
    if traj.direction != Direction::Forward {
        return Err(Error::Usage(
            "reconstruction needs a recorded inversion trajectory".into(),
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

    let start = Instant::now();
    let mut null_schedule = match method {
        // The combination fits its schedule during the walk below.
        Method::DdimCfg | Method::Nmg | Method::NtiPlusNmg => None,
        Method::Nti => {
            let (ns, _) = nti_optimize(model, s, traj, c_t, cfg.s_t, nti_params)?;
            Some(ns)
        }
        Method::Npi => Some(NullSchedule::constant(
            source_embedding(model, c_t)?,
            t_max,
        )),
    };

    let mut combo_warm = match method {
        Method::NtiPlusNmg => Some(model.null_embedding()?),
        _ => None,
    };
    let mut combo_embeddings = Vec::new();

    let mut z = traj.at(t_max).clone();
    let mut latents = vec![z.clone()];
    let mut deviation = vec![(t_max, 0.0)];
    for t in (1..=t_max).rev() {
        z = match method {
            Method::Nmg => nmg_step(model, s, &z, t, traj.at(t - 1), c_t, cfg, None)?,
            Method::NtiPlusNmg => {
                let warm = combo_warm.take().unwrap();
                let fit = optimize_combined_rung(
                    model,
                    s,
                    &z,
                    t,
                    traj.at(t - 1),
                    c_t,
                    cfg,
                    nti_params,
                    warm,
                )?;
                combo_warm = Some(fit.null_e.clone());
                combo_embeddings.push(fit.null_e);
                fit.z_next
            }
            Method::DdimCfg | Method::Nti | Method::Npi => {
                let null_c = match &null_schedule {
                    Some(ns) => Condition::Embedding(ns.at(t)?.clone()),
                    None => Condition::Null,
                };
                let eps = cfg_eps_at(model, &z, s.ladder()[t], &null_c, c_t, cfg.s_t)?;
                reverse_step(s, &z, t, &eps)?
            }
        };
        deviation.push((t - 1, l2(&z, traj.at(t - 1))));
        latents.push(z.clone());
    }
    if method == Method::NtiPlusNmg {
        combo_embeddings.reverse();
        null_schedule = Some(NullSchedule::new(combo_embeddings)?);
    }
    let wall_ms = start.elapsed().as_secs_f64() * 1e3;

    Ok(Reconstruction {
        method,
        output: z,
        path: Trajectory {
            latents,
            direction: Direction::Backward,
        },
        deviation,
        null_schedule,
        wall_ms,
    })
}
