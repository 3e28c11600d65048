//! Generation-quality diagnostics: sample each class from pure noise at a
//! few text scales and classify the results. Not part of the test suite.

use ndarray::IxDyn;
use nmg_core::dataset::{generate_shapes, Centroids};
use nmg_core::denoiser::{Condition, Denoiser};
use nmg_core::rng::seed_stream;
use nmg_core::schedule::make_schedule;
use nmg_core::Latent;
use rand::Rng;
use rand_distr::StandardNormal;

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
    let mut rng = seed_stream(7, "gen");

    for st in [1.0f64, 3.0, 7.5, 10.0] {
        for class in 0..3usize {
            let mut hits = 0;
            let mut labels = String::new();
            for _ in 0..10 {
                let z_t: Latent = Latent::from_shape_simple_fn(IxDyn(&[16, 16]), || {
                    rng.sample::<f64, _>(StandardNormal)
                });
                let img = generate(&model, &s, &z_t, class, st);
                let got = centroids.classify(&img);
                labels.push(char::from_digit(got as u32, 10).unwrap());
                if got == class {
                    hits += 1;
                }
            }
            println!("s_T {st:4} class {class}: {hits}/10 [{labels}]");
        }
    }
}

fn generate(
    model: &dyn Denoiser,
    s: &nmg_core::schedule::NoiseSchedule,
    z_top: &Latent,
    class: usize,
    s_t: f64,
) -> Latent {
    // Plain CFG walk down the ladder, mirroring the editing path's free
    // segment but starting from Gaussian noise.
    use nmg_core::sampler::reverse_step;
    let mut z = z_top.clone();
    let c = Condition::Class(class);
    for t in (1..=s.infer_steps()).rev() {
        let grid = s.ladder()[t];
        let e_null = model.eps(&z, grid, &Condition::Null).unwrap();
        let e_cond = model.eps(&z, grid, &c).unwrap();
        let eps = &e_null + &((&e_cond - &e_null) * s_t);
        z = reverse_step(s, &z, t, &eps).unwrap();
    }
    z
}
