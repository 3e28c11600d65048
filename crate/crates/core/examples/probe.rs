//! Measurement probe: training settings, eps calibration, and method
//! comparisons on the real shapes model. Not part of the test suite.

use nmg_core::dataset::{generate_shapes, Centroids};
use nmg_core::denoiser::{Condition, Denoiser, TrainConfig, TrainedModel};
use nmg_core::editing::{edit, EditSpec};
use nmg_core::inversion::{reconstruct, GuidanceConfig, Method, NtiParams};
use nmg_core::metrics::mse;
use nmg_core::rng::seed_stream;
use nmg_core::sampler::run_inversion;
use nmg_core::schedule::make_schedule;
use rand::Rng;
use rand_distr::StandardNormal;
use std::time::Instant;

fn smoothed(losses: &[f64], w: usize) -> (f64, f64) {
    let head: f64 = losses[..w].iter().sum::<f64>() / w as f64;
    let tail: f64 = losses[losses.len() - w..].iter().sum::<f64>() / w as f64;
    (head, tail)
}

fn main() {
    let steps: usize = std::env::args()
        .nth(1)
        .and_then(|a| a.parse().ok())
        .unwrap_or(6000);
    let s = make_schedule(1000, 50, 1e-4, 0.02).unwrap();
    let n_eval = 10usize;
    let all = generate_shapes(512 + n_eval, 0).unwrap();
    let mut train_set = all.clone();
    train_set.images.truncate(512);
    train_set.labels.truncate(512);
    let eval_imgs = &all.images[512..];
    let eval_labels = &all.labels[512..];

    let p_uncond: f64 = std::env::var("NMG_PU")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(TrainConfig::default().p_uncond);
    let cache = std::env::temp_dir().join(format!("probe-model-{steps}-{p_uncond}.ckpt"));
    let model = if cache.exists() {
        println!("train: cached {}", cache.display());
        nmg_core::io::load_checkpoint(&cache).unwrap()
    } else {
        let t0 = Instant::now();
        let model = TrainedModel::init(s.clone(), &[16, 16], 3, 0).unwrap();
        let (model, losses) = model
            .train(
                &train_set,
                &TrainConfig {
                    steps,
                    p_uncond,
                    ..TrainConfig::default()
                },
            )
            .unwrap();
        let train_secs = t0.elapsed().as_secs_f64();
        let (head, tail) = smoothed(&losses, 200.min(steps / 4));
        println!(
            "train: {steps} steps in {train_secs:.1}s  loss {head:.4} -> {tail:.4}  ratio {:.3}",
            tail / head
        );
        nmg_core::io::save_checkpoint(&cache, &model).unwrap();
        model
    };

    // eps calibration on held-out forward-noised samples at ladder rungs.
    let mut rng = seed_stream(1, "probe");
    let mut ms_acc = 0.0;
    let mut n_acc = 0usize;
    for (img, &lab) in eval_imgs.iter().zip(eval_labels) {
        for _ in 0..5 {
            let t = s.ladder()[rng.gen_range(1..s.ladder().len())];
            let ab = s.alphabar()[t];
            let noise = img.mapv(|_| rng.sample::<f64, _>(StandardNormal));
            let z_t = img.mapv(|v| ab.sqrt() * v) + noise.mapv(|v| (1.0 - ab).sqrt() * v);
            let eh = model.eps(&z_t, t, &Condition::Class(lab)).unwrap();
            ms_acc += eh.iter().map(|v| v * v).sum::<f64>();
            n_acc += eh.len();
        }
    }
    println!("calibration: mean-square eps = {:.4} (want 0.5..2.0)", ms_acc / n_acc as f64);

    // Per-image method comparison.
    let mut defaults = GuidanceConfig::default();
    if std::env::var("NMG_FROZEN").is_ok() {
        defaults.grad_mode = nmg_core::inversion::GradMode::FrozenDenoiser;
    }
    if std::env::var("NMG_L2").is_ok() {
        defaults.energy_norm = nmg_core::inversion::EnergyNorm::L2;
    }
    let unit = GuidanceConfig { s_t: 1.0, ..defaults.clone() };
    let mut nti_p = NtiParams::default();
    if let Ok(v) = std::env::var("NMG_ITERS") {
        nti_p.inner_iters = v.parse().unwrap();
    }
    let mut wins_cfg_vs_unit = 0usize;
    let mut wins_nmg_vs_cfg = 0usize;
    let mut ptwise_fracs = Vec::new();
    let mut nti_ratio_ok = 0usize;
    let mut combo_ok = 0usize;
    let (mut mse_cfg_m, mut mse_nmg_m, mut mse_nti_m, mut mse_combo_m, mut mse_unit_m) =
        (0.0, 0.0, 0.0, 0.0, 0.0);
    let (mut wall_nmg, mut wall_nti) = (0.0, 0.0);
    for (i, (img, &lab)) in eval_imgs.iter().zip(eval_labels).enumerate() {
        let c = Condition::Class(lab);
        let traj = run_inversion(&model, &s, img, &c, 1.0).unwrap();
        let cfg_rec = reconstruct(&model, &s, &traj, &c, Method::DdimCfg, &defaults, &nti_p).unwrap();
        let unit_rec = reconstruct(&model, &s, &traj, &c, Method::DdimCfg, &unit, &nti_p).unwrap();
        let nmg_rec = reconstruct(&model, &s, &traj, &c, Method::Nmg, &defaults, &nti_p).unwrap();
        let fast = std::env::args().nth(2).as_deref() == Some("fast");
        let (nti_rec, combo_rec) = if fast {
            (nmg_rec.clone(), nmg_rec.clone())
        } else {
            (
                reconstruct(&model, &s, &traj, &c, Method::Nti, &defaults, &nti_p).unwrap(),
                reconstruct(&model, &s, &traj, &c, Method::NtiPlusNmg, &defaults, &nti_p).unwrap(),
            )
        };
        let m_cfg = mse(&cfg_rec.output, img).unwrap();
        let m_unit = mse(&unit_rec.output, img).unwrap();
        let m_nmg = mse(&nmg_rec.output, img).unwrap();
        let m_nti = mse(&nti_rec.output, img).unwrap();
        let m_combo = mse(&combo_rec.output, img).unwrap();
        mse_cfg_m += m_cfg;
        mse_unit_m += m_unit;
        mse_nmg_m += m_nmg;
        mse_nti_m += m_nti;
        mse_combo_m += m_combo;
        wall_nmg += nmg_rec.wall_ms;
        wall_nti += nti_rec.wall_ms;
        if m_cfg > m_unit {
            wins_cfg_vs_unit += 1;
        }
        if m_nmg < m_cfg {
            wins_nmg_vs_cfg += 1;
        }
        let le = cfg_rec
            .deviation
            .iter()
            .zip(&nmg_rec.deviation)
            .filter(|((_, dc), (_, dn))| dn <= dc)
            .count();
        ptwise_fracs.push(le as f64 / cfg_rec.deviation.len() as f64);
        if m_nmg <= 2.0 * m_nti && nmg_rec.wall_ms < nti_rec.wall_ms / 5.0 {
            nti_ratio_ok += 1;
        }
        if m_combo <= 1.10 * m_nti.min(m_nmg) {
            combo_ok += 1;
        }
        println!(
            "img {i} (class {lab}): unit {m_unit:.5} cfg {m_cfg:.5} nmg {m_nmg:.5} nti {m_nti:.5} combo {m_combo:.5}  walls nmg {:.0}ms nti {:.0}ms",
            nmg_rec.wall_ms, nti_rec.wall_ms
        );
        let table_img: usize = std::env::var("NMG_RUNG_IMG")
            .ok()
            .and_then(|v| v.parse().ok())
            .unwrap_or(0);
        if i == table_img {
            for ((t, dc), (_, dn)) in cfg_rec.deviation.iter().zip(&nmg_rec.deviation) {
                let mark = if dn <= dc { ' ' } else { '<' };
                println!("  rung {t:2}: cfg {dc:10.5}  nmg {dn:10.5} {mark}");
            }
        }
    }
    let n = n_eval as f64;
    println!("--- summary over {n_eval} images");
    println!(
        "mean mse: unit {:.5} cfg {:.5} nmg {:.5} nti {:.5} combo {:.5}",
        mse_unit_m / n,
        mse_cfg_m / n,
        mse_nmg_m / n,
        mse_nti_m / n,
        mse_combo_m / n
    );
    println!("cfg(7.5) worse than unit(1.0): {wins_cfg_vs_unit}/{n_eval} (want >=9)");
    println!("nmg beats cfg: {wins_nmg_vs_cfg}/{n_eval} (want >=9)");
    println!(
        "pointwise nmg<=cfg fraction per image: {:?} (want >=0.8 each)",
        ptwise_fracs.iter().map(|f| (f * 100.0).round() / 100.0).collect::<Vec<_>>()
    );
    println!("nmg within 2x nti mse AND wall < nti/5, per image: {nti_ratio_ok}/{n_eval} (info)");
    let agg5 = mse_nmg_m <= 2.0 * mse_nti_m && wall_nmg / n < wall_nti / n / 5.0;
    println!(
        "aggregate: mean nmg {:.5} <= 2x mean nti {:.5} AND mean wall ratio {:.1}x -> {}",
        mse_nmg_m / n,
        mse_nti_m / n,
        (wall_nti / n) / (wall_nmg / n).max(1e-9),
        if agg5 { "PASS" } else { "FAIL" }
    );
    println!("combo <= 1.1*min(nti,nmg): {combo_ok}/{n_eval} (want >=7)");
    println!("mean walls: nmg {:.0}ms nti {:.0}ms", wall_nmg / n, wall_nti / n);

    // Disc -> square edits at editing defaults, classified by the centroid
    // oracle fit on the training set.
    let centroids = Centroids::fit(&train_set).unwrap();
    let mut edit_cfg = GuidanceConfig::editing_defaults();
    edit_cfg.grad_mode = defaults.grad_mode;
    edit_cfg.energy_norm = defaults.energy_norm;
    let tau = s.infer_steps() / 2;
    let extra = generate_shapes(512 + 80, 0).unwrap();
    let discs: Vec<&nmg_core::Latent> = extra.images[512..]
        .iter()
        .zip(&extra.labels[512..])
        .filter(|(_, &l)| l == 0)
        .map(|(im, _)| im)
        .take(10)
        .collect();
    let mut flips = 0usize;
    for img in &discs {
        let src = Condition::Class(0);
        let traj = run_inversion(&model, &s, img, &src, 1.0).unwrap();
        let out = edit(
            &model,
            &s,
            &traj,
            &EditSpec {
                source: src.clone(),
                target: Condition::Class(1),
                inject_until: tau,
            },
            Method::Nmg,
            &edit_cfg,
            &nti_p,
        )
        .unwrap();
        let got = centroids.classify(&out.edited);
        if got == 1 {
            flips += 1;
        }
        print!("{got}");
    }
    println!("  disc->square flips: {flips}/{} (want >=8)", discs.len());
}
