use ndarray::IxDyn;
use nmg_core::dataset::{generate_shapes, Centroids};
use nmg_core::denoiser::{Condition, Denoiser};
use nmg_core::rng::seed_stream;
use nmg_core::sampler::reverse_step;
use nmg_core::schedule::make_schedule;
use nmg_core::Latent;
use rand::Rng;
use rand_distr::StandardNormal;

fn ascii(img: &Latent) -> String {
    let v = img.view().into_dimensionality::<ndarray::Ix2>().unwrap();
    let mut out = String::new();
    for i in 0..v.nrows() {
        for j in 0..v.ncols() {
            let x = v[[i, j]];
            out.push(if x > 0.66 { '#' } else if x > 0.33 { '+' } else if x > 0.1 { '.' } else { ' ' });
        }
        out.push('\n');
    }
    out
}

fn main() {
    let steps: usize = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(12000);
    let s = make_schedule(1000, 50, 1e-4, 0.02).unwrap();
    let p_uncond: f64 = std::env::var("NMG_PU")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(0.1);
    let cache = std::env::temp_dir().join(format!("probe-model-{steps}-{p_uncond}.ckpt"));
    let model = nmg_core::io::load_checkpoint(&cache).unwrap();
    let mut rng = seed_stream(7, "gen");
    for class in 0..3usize {
        let z0: Latent = Latent::from_shape_simple_fn(IxDyn(&[16, 16]), || rng.sample::<f64, _>(StandardNormal));
        let mut z = z0.clone();
        let c = Condition::Class(class);
        for t in (1..=s.infer_steps()).rev() {
            let grid = s.ladder()[t];
            let e_null = model.eps(&z, grid, &Condition::Null).unwrap();
            let e_cond = model.eps(&z, grid, &c).unwrap();
            let eps = &e_null + &((&e_cond - &e_null) * 3.0);
            z = reverse_step(&s, &z, t, &eps).unwrap();
        }
        println!("class {class} (same z_T):");
        println!("{}", ascii(&z));
    }
    let train_set = { let mut d = generate_shapes(522, 0).unwrap(); d.images.truncate(512); d.labels.truncate(512); d };
    let cents = Centroids::fit(&train_set).unwrap();
    let mut z1 = None;
    for class in 0..3usize {
        let z0: Latent = Latent::from_shape_simple_fn(IxDyn(&[16, 16]), || rng.sample::<f64, _>(StandardNormal));
        if class == 1 { z1 = Some(z0.clone()); }
        let _ = cents; let _ = z0;
    }
    let _ = z1;
}
