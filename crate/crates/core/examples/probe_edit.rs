//! Edit-path diagnostics: what the disc -> square edits look like under
//! different injection horizons and text scales. Not part of the test suite.

use nmg_core::dataset::{generate_shapes, Centroids};
use nmg_core::denoiser::Condition;
use nmg_core::editing::{edit, EditSpec};
use nmg_core::inversion::{GuidanceConfig, Method, NtiParams};
use nmg_core::sampler::run_inversion;
use nmg_core::schedule::make_schedule;
use nmg_core::Latent;

fn ascii(img: &Latent) -> String {
    let v = img.view().into_dimensionality::<ndarray::Ix2>().unwrap();
    let mut out = String::new();
    for i in 0..v.nrows() {
        for j in 0..v.ncols() {
            let x = v[[i, j]];
            out.push(if x > 0.66 {
                '#'
            } else if x > 0.33 {
                '+'
            } else if x > 0.1 {
                '.'
            } else {
                ' '
            });
        }
        out.push('\n');
    }
    out
}

fn stats(img: &Latent) -> (f64, f64, f64) {
    let mn = img.iter().cloned().fold(f64::INFINITY, f64::min);
    let mx = img.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let n2 = img.iter().map(|v| v * v).sum::<f64>().sqrt();
    (mn, mx, n2)
}

fn main() {
    let steps: usize = std::env::args()
        .nth(1)
        .and_then(|a| a.parse().ok())
        .unwrap_or(12000);
    let s = make_schedule(1000, 50, 1e-4, 0.02).unwrap();
    let p_uncond: f64 = std::env::var("NMG_PU")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(0.1);
    let cache = std::env::temp_dir().join(format!("probe-model-{steps}-{p_uncond}.ckpt"));
    let model = nmg_core::io::load_checkpoint(&cache).expect("run probe first to train the model");
    let train_set = {
        let mut d = generate_shapes(512 + 10, 0).unwrap();
        d.images.truncate(512);
        d.labels.truncate(512);
        d
    };
    let centroids = Centroids::fit(&train_set).unwrap();
    let extra = generate_shapes(512 + 80, 0).unwrap();
    let discs: Vec<&Latent> = extra.images[512..]
        .iter()
        .zip(&extra.labels[512..])
        .filter(|(_, &l)| l == 0)
        .map(|(im, _)| im)
        .take(10)
        .collect();
    let nti_p = NtiParams::default();

    let mut base = GuidanceConfig::editing_defaults();
    if std::env::var("NMG_L2").is_ok() {
        base.energy_norm = nmg_core::inversion::EnergyNorm::L2;
    }
    if std::env::var("NMG_FROZEN").is_ok() {
        base.grad_mode = nmg_core::inversion::GradMode::FrozenDenoiser;
    }
    for tau_frac in [0usize, 15, 25, 35, 45] {
        for st in [3.0f64, 7.5, 10.0] {
            let cfg = GuidanceConfig { s_t: st, ..base };
            let mut flips = 0;
            let mut labels = String::new();
            for img in &discs {
                let src = Condition::Class(0);
                let traj = run_inversion(&model, &s, img, &src, 1.0).unwrap();
                let out = edit(
                    &model,
                    &s,
                    &traj,
                    &EditSpec {
                        source: src,
                        target: Condition::Class(1),
                        inject_until: tau_frac,
                    },
                    Method::Nmg,
                    &cfg,
                    &nti_p,
                )
                .unwrap();
                let got = centroids.classify(&out.edited);
                labels.push(char::from_digit(got as u32, 10).unwrap());
                if got == 1 {
                    flips += 1;
                }
            }
            println!("tau {tau_frac:2} s_T {st:4}: flips {flips}/10  [{labels}]");
        }
    }

    // Look at one edit in detail at the editing defaults.
    let cfg = base;
    let src = Condition::Class(0);
    let traj = run_inversion(&model, &s, discs[0], &src, 1.0).unwrap();
    let out = edit(
        &model,
        &s,
        &traj,
        &EditSpec {
            source: src,
            target: Condition::Class(1),
            inject_until: 25,
        },
        Method::Nmg,
        &cfg,
        &nti_p,
    )
    .unwrap();
    let (mn, mx, n2) = stats(&out.edited);
    println!("edited tau=25: min {mn:.3} max {mx:.3} l2 {n2:.3}");
    println!("{}", ascii(&out.edited));
    let (mn, mx, n2) = stats(&out.reconstructed);
    println!("recon: min {mn:.3} max {mx:.3} l2 {n2:.3}");
    println!("{}", ascii(&out.reconstructed));
    println!("source:");
    println!("{}", ascii(discs[0]));
    for (t, d) in &out.edit_deviation {
        if t % 5 == 0 {
            println!("  edit rung {t:2}: dev {d:.4}");
        }
    }
}
