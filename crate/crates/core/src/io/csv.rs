//! CSV exports. Numbers are written with Rust's shortest-roundtrip float
//! formatting, so files are deterministic for identical inputs.

use crate::inversion::Method;
use crate::sampler::{Direction, Trajectory};
use crate::Result;
use std::path::Path;

/// Rows of (method, rung, deviation from the recorded latent, wall time of
/// the producing run).
pub fn write_deviation_csv(path: &Path, rows: &[(Method, usize, f64, f64)]) -> Result<()> {
    let mut text = String::from("method,t,deviation,wall_ms\n");
    for (method, t, dev, wall) in rows {
        text.push_str(&format!("{method},{t},{dev},{wall}\n"));
    }
    std::fs::write(path, text)?;
    Ok(())
}

pub fn write_recon_report_csv(path: &Path, rows: &[(Method, f64, f64, f64)]) -> Result<()> {
    let mut text = String::from("method,mse,ssim,wall_ms\n");
    for (method, mse, ssim, wall) in rows {
        text.push_str(&format!("{method},{mse},{ssim},{wall}\n"));
    }
    std::fs::write(path, text)?;
    Ok(())
}

/// Per-rung norms of a path, with distances to a reference trajectory when
/// one is given. Rows are emitted in ascending rung order regardless of the
/// path's direction.
pub fn write_norms_csv(path: &Path, traj: &Trajectory, reference: Option<&Trajectory>) -> Result<()> {
    let mut text = String::from("t,norm_z,dev_from_ref\n");
    let top = traj.latents.len() - 1;
    for t in 0..=top {
        let z = match traj.direction {
            Direction::Forward => &traj.latents[t],
            Direction::Backward => &traj.latents[top - t],
        };
        let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
        let dev = match reference {
            Some(r) => {
                let zr = match r.direction {
                    Direction::Forward => &r.latents[t],
                    Direction::Backward => &r.latents[top - t],
                };
                z.iter()
                    .zip(zr.iter())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt()
            }
            None => 0.0,
        };
        text.push_str(&format!("{t},{norm},{dev}\n"));
    }
    std::fs::write(path, text)?;
    Ok(())
}

/// Training curve, one row per SGD step.
pub fn write_loss_csv(path: &Path, losses: &[f64]) -> Result<()> {
    let mut text = String::from("step,loss\n");
    for (i, loss) in losses.iter().enumerate() {
        text.push_str(&format!("{},{loss}\n", i + 1));
    }
    std::fs::write(path, text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Latent;
    use ndarray::IxDyn;

    #[test]
    fn deviation_rows_are_formatted_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dev.csv");
        write_deviation_csv(
            &path,
            &[
                (Method::DdimCfg, 50, 0.0, 12.5),
                (Method::Nmg, 49, 0.125, 12.5),
            ],
        )
        .unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(
            text,
            "method,t,deviation,wall_ms\nddim_cfg,50,0,12.5\nnmg,49,0.125,12.5\n"
        );
    }

    #[test]
    fn norms_honor_direction() {
        let dir = tempfile::tempdir().unwrap();
        let fwd = Trajectory {
            latents: vec![
                Latent::from_elem(IxDyn(&[1]), 3.0),
                Latent::from_elem(IxDyn(&[1]), 4.0),
            ],
            direction: Direction::Forward,
        };
        let bwd = Trajectory {
            latents: vec![
                Latent::from_elem(IxDyn(&[1]), 4.0),
                Latent::from_elem(IxDyn(&[1]), 3.0),
            ],
            direction: Direction::Backward,
        };
        let pf = dir.path().join("f.csv");
        let pb = dir.path().join("b.csv");
        write_norms_csv(&pf, &fwd, None).unwrap();
        write_norms_csv(&pb, &bwd, Some(&fwd)).unwrap();
        assert_eq!(
            std::fs::read_to_string(&pf).unwrap(),
            "t,norm_z,dev_from_ref\n0,3,0\n1,4,0\n"
        );
        assert_eq!(
            std::fs::read_to_string(&pb).unwrap(),
            "t,norm_z,dev_from_ref\n0,3,0\n1,4,0\n"
        );
    }

    #[test]
    fn loss_rows_are_one_based() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("loss.csv");
        write_loss_csv(&path, &[0.5, 0.25]).unwrap();
        assert_eq!(
            std::fs::read_to_string(&path).unwrap(),
            "step,loss\n1,0.5\n2,0.25\n"
        );
    }

    #[test]
    fn report_header_is_pinned() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.csv");
        write_recon_report_csv(&path, &[(Method::Nti, 0.0127, 0.91, 1500.0)]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("method,mse,ssim,wall_ms\n"));
        assert!(text.contains("nti,0.0127,0.91,1500\n"));
    }
}
