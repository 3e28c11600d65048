//! Class-swap edits that fan out from a reconstruction pass.
//!
//! The reconstruction path is computed first and never touched afterwards;
//! the edit path copies its latents for the high-noise rungs (injection)
//! and follows plain classifier-free guidance toward the target condition
//! for the rest. With `inject_until` equal to the rung count the edit path
//! is copied wholesale, so it is bit-identical to the reconstruction.

use crate::denoiser::{Condition, Denoiser};
use crate::inversion::{cfg_eps_at, reconstruct, GuidanceConfig, Method, NtiParams};
use crate::sampler::{reverse_step, Trajectory};
use crate::schedule::NoiseSchedule;
use crate::{Error, Latent, Result};

#[derive(Debug, Clone)]
pub struct EditSpec {
    pub source: Condition,
    pub target: Condition,
    /// Injection horizon tau: reconstruction latents are copied at every
    /// rung r >= T - tau. Zero decouples the paths below the shared top
    /// latent; T copies everything.
    pub inject_until: usize,
}

#[derive(Debug, Clone)]
pub struct EditOutcome {
    pub edited: Latent,
    pub reconstructed: Latent,
    pub edit_path: Trajectory,
    pub edit_deviation: Vec<(usize, f64)>,
    pub recon_deviation: Vec<(usize, f64)>,
    pub wall_ms: f64,
}

fn l2(a: &Latent, b: &Latent) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Reconstructs under `method` with the source condition, then runs the
/// edit path against the same noise maps. The reconstruction result is
/// identical to a standalone [`reconstruct`] call with the same arguments.
pub fn edit(
    model: &dyn Denoiser,
    s: &NoiseSchedule,
    traj: &Trajectory,
    spec: &EditSpec,
    method: Method,
    cfg: &GuidanceConfig,
    nti_params: &NtiParams,
) -> Result<EditOutcome> {
    let t_max = s.infer_steps();
    if spec.inject_until > t_max {
        return Err(Error::Usage(format!(
            "inject_until {} exceeds rung count {}",
            spec.inject_until, t_max
        )));
    }
    let recon = reconstruct(model, s, traj, &spec.source, method, cfg, nti_params)?;
    let start = std::time::Instant::now();

    // recon.path runs top-down: latents[i] sits at rung t_max - i.
    let copy_floor = t_max - spec.inject_until;

    let mut z = traj.at(t_max).clone();
    let mut latents = vec![z.clone()];
    let mut edit_deviation = vec![(t_max, 0.0)];
    for t in (1..=t_max).rev() {
        let dest = t - 1;
        z = if dest >= copy_floor {
            recon.path.latents[t_max - dest].clone()
        } else {
            let eps = cfg_eps_at(model, &z, s.ladder()[t], &Condition::Null, &spec.target, cfg.s_t)?;
            reverse_step(s, &z, t, &eps)?
        };
        edit_deviation.push((dest, l2(&z, traj.at(dest))));
        latents.push(z.clone());
    }
    let wall_ms = recon.wall_ms + start.elapsed().as_secs_f64() * 1e3;

    Ok(EditOutcome {
        edited: z,
        reconstructed: recon.output,
        edit_path: Trajectory {
            latents,
            direction: crate::sampler::Direction::Backward,
        },
        edit_deviation,
        recon_deviation: recon.deviation,
        wall_ms,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::TrainedModel;
    use crate::rng::seed_stream;
    use crate::sampler::run_inversion;
    use crate::schedule::make_schedule;
    use ndarray::IxDyn;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn setup(t: usize) -> (TrainedModel, NoiseSchedule, Trajectory) {
        let s = make_schedule(100, t, 1e-4, 0.02).unwrap();
        let m = TrainedModel::init(s.clone(), &[6], 3, 21).unwrap();
        let mut rng = seed_stream(60, "edit");
        let z0 = Latent::from_shape_simple_fn(IxDyn(&[6]), || {
            0.5 + 0.2 * rng.sample::<f64, _>(StandardNormal)
        });
        let traj = run_inversion(&m, &s, &z0, &Condition::Class(0), 1.0).unwrap();
        (m, s, traj)
    }

    fn spec(target: usize, tau: usize) -> EditSpec {
        EditSpec {
            source: Condition::Class(0),
            target: Condition::Class(target),
            inject_until: tau,
        }
    }

    #[test]
    fn full_injection_with_matching_target_is_bit_identical() {
        let (m, s, traj) = setup(8);
        let out = edit(
            &m,
            &s,
            &traj,
            &spec(0, 8),
            Method::Nmg,
            &GuidanceConfig::default(),
            &NtiParams::default(),
        )
        .unwrap();
        assert_eq!(out.edited, out.reconstructed);
        assert_eq!(out.edit_deviation, out.recon_deviation);
    }

    #[test]
    fn reconstruction_is_unchanged_by_a_concurrent_edit() {
        let (m, s, traj) = setup(8);
        let cfg = GuidanceConfig::default();
        let solo = reconstruct(
            &m,
            &s,
            &traj,
            &Condition::Class(0),
            Method::Nmg,
            &cfg,
            &NtiParams::default(),
        )
        .unwrap();
        let out = edit(
            &m,
            &s,
            &traj,
            &spec(2, 4),
            Method::Nmg,
            &cfg,
            &NtiParams::default(),
        )
        .unwrap();
        assert_eq!(out.reconstructed, solo.output);
        assert_eq!(out.recon_deviation, solo.deviation);
    }

    #[test]
    fn zero_injection_makes_the_edit_path_method_independent() {
        let (m, s, traj) = setup(8);
        let cfg = GuidanceConfig::default();
        let a = edit(
            &m,
            &s,
            &traj,
            &spec(1, 0),
            Method::DdimCfg,
            &cfg,
            &NtiParams::default(),
        )
        .unwrap();
        let b = edit(
            &m,
            &s,
            &traj,
            &spec(1, 0),
            Method::Nmg,
            &cfg,
            &NtiParams::default(),
        )
        .unwrap();
        assert_eq!(a.edited, b.edited);
        assert_ne!(a.reconstructed, b.reconstructed);
    }

    #[test]
    fn larger_injection_horizon_tracks_the_reconstruction_longer() {
        let (m, s, traj) = setup(10);
        let cfg = GuidanceConfig::default();
        let out = edit(
            &m,
            &s,
            &traj,
            &spec(1, 6),
            Method::DdimCfg,
            &cfg,
            &NtiParams::default(),
        )
        .unwrap();
        let recon = reconstruct(
            &m,
            &s,
            &traj,
            &Condition::Class(0),
            Method::DdimCfg,
            &cfg,
            &NtiParams::default(),
        )
        .unwrap();
        // Copied rungs match the reconstruction path exactly; free rungs drift.
        for (i, zl) in out.edit_path.latents.iter().enumerate() {
            let rung = 10 - i;
            if rung >= 4 {
                assert_eq!(zl, &recon.path.latents[i], "rung {rung}");
            }
        }
        assert_ne!(out.edited, recon.output);
    }

    #[test]
    fn oversized_injection_horizon_is_rejected() {
        let (m, s, traj) = setup(8);
        assert!(matches!(
            edit(
                &m,
                &s,
                &traj,
                &spec(1, 9),
                Method::DdimCfg,
                &GuidanceConfig::default(),
                &NtiParams::default(),
            ),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn deviation_series_cover_every_rung() {
        let (m, s, traj) = setup(8);
        let out = edit(
            &m,
            &s,
            &traj,
            &spec(2, 4),
            Method::DdimCfg,
            &GuidanceConfig::default(),
            &NtiParams::default(),
        )
        .unwrap();
        assert_eq!(out.edit_deviation.len(), 9);
        assert_eq!(out.recon_deviation.len(), 9);
        assert_eq!(out.edit_deviation[0], (8, 0.0));
    }
}
