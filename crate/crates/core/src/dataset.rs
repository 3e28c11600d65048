//! Procedural 16x16 grayscale shapes: disc, square, cross.
//!
//! Shapes are drawn with a smoothstep edge about one pixel wide so the
//! classes stay separable under position and size jitter. Pixel values
//! are in [0, 1]; background 0, ink 1. The disc is filled, the square is
//! an outline, the cross is two crossed bars: every class keeps a large
//! pixel footprint that none of the other classes (or their mean) shares,
//! which is what gives class conditioning something to pull against.

use crate::rng::seed_stream;
use crate::{Error, Latent, Result};
use ndarray::IxDyn;
use rand::Rng;

pub const IMG: usize = 16;
pub const N_CLASSES: usize = 3;
pub const CLASS_NAMES: [&str; N_CLASSES] = ["disc", "square", "cross"];

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Vec<Latent>,
    pub labels: Vec<usize>,
    pub n_classes: usize,
}

fn smoothstep(t: f64) -> f64 {
    let t = t.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Signed distance to a centered axis-aligned box, positive inside.
/// Exact inside and along edge normals; corners are approximate, which
/// only affects sub-pixel antialiasing.
fn box_dist(dx: f64, dy: f64, hx: f64, hy: f64) -> f64 {
    (hx - dx.abs()).min(hy - dy.abs())
}

fn render(dist: impl Fn(f64, f64) -> f64) -> Latent {
    let mut img = Latent::zeros(IxDyn(&[IMG, IMG]));
    for i in 0..IMG {
        for j in 0..IMG {
            let px = j as f64 + 0.5;
            let py = i as f64 + 0.5;
            img[[i, j]] = smoothstep(dist(px, py) + 0.5);
        }
    }
    img
}

/// One image of the given class with parameters drawn from rng.
pub fn shape_image(class: usize, rng: &mut impl Rng) -> Result<Latent> {
    if class >= N_CLASSES {
        return Err(Error::Usage(format!(
            "class {class} out of range for {N_CLASSES} classes"
        )));
    }
    let cx = rng.gen_range(5.5..10.5);
    let cy = rng.gen_range(5.5..10.5);
    let img = match class {
        0 => {
            let r = rng.gen_range(3.5..5.5);
            render(|px, py| r - ((px - cx).powi(2) + (py - cy).powi(2)).sqrt())
        }
        1 => {
            let half = rng.gen_range(3.5..5.0);
            let th = rng.gen_range(1.3..1.7);
            render(|px, py| {
                let outer = box_dist(px - cx, py - cy, half, half);
                let inner = box_dist(px - cx, py - cy, half - th, half - th);
                outer.min(-inner)
            })
        }
        _ => {
            let arm = rng.gen_range(4.0..6.0);
            let hw = rng.gen_range(1.2..1.8) / 2.0;
            render(|px, py| {
                let h = box_dist(px - cx, py - cy, arm, hw);
                let v = box_dist(px - cx, py - cy, hw, arm);
                h.max(v)
            })
        }
    };
    Ok(img)
}

/// Deterministic dataset with uniformly random labels.
pub fn generate_shapes(n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Config("dataset size must be positive".into()));
    }
    let mut rng = seed_stream(seed, "data");
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let class = rng.gen_range(0..N_CLASSES);
        labels.push(class);
        images.push(shape_image(class, &mut rng)?);
    }
    Ok(Dataset {
        images,
        labels,
        n_classes: N_CLASSES,
    })
}

/// Shifts the shape to the image center by integer center-of-mass offset,
/// then scales to unit L2 norm. Random placement and size otherwise blur
/// class centroids into near-identical blobs (raw-pixel nearest-mean
/// confuses half the discs with squares).
fn recenter(img: &Latent) -> Latent {
    let mass: f64 = img.iter().sum();
    if mass <= 0.0 {
        return img.clone();
    }
    let (mut cx, mut cy) = (0.0, 0.0);
    for i in 0..IMG {
        for j in 0..IMG {
            let v = img[[i, j]];
            cy += v * (i as f64 + 0.5);
            cx += v * (j as f64 + 0.5);
        }
    }
    let mid = IMG as f64 / 2.0;
    let di = (mid - cy / mass).round() as isize;
    let dj = (mid - cx / mass).round() as isize;
    let mut out = Latent::zeros(IxDyn(&[IMG, IMG]));
    for i in 0..IMG as isize {
        for j in 0..IMG as isize {
            let (si, sj) = (i - di, j - dj);
            if (0..IMG as isize).contains(&si) && (0..IMG as isize).contains(&sj) {
                out[[i as usize, j as usize]] = img[[si as usize, sj as usize]];
            }
        }
    }
    let norm = out.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        out.mapv_inplace(|v| v / norm);
    }
    out
}

const SIZE_BINS: usize = 4;

/// Nearest-centroid classifier over recentered images. Shape size varies
/// enough that one centroid per class confuses small squares with discs,
/// so each class gets a few prototypes binned by total ink.
#[derive(Debug, Clone)]
pub struct Centroids {
    prototypes: Vec<(usize, Latent)>,
}

impl Centroids {
    pub fn fit(data: &Dataset) -> Result<Centroids> {
        let mut by_class: Vec<Vec<(f64, Latent)>> = vec![Vec::new(); data.n_classes];
        for (img, &label) in data.images.iter().zip(&data.labels) {
            by_class[label].push((img.iter().sum(), recenter(img)));
        }
        let mut prototypes = Vec::new();
        for (k, mut members) in by_class.into_iter().enumerate() {
            if members.is_empty() {
                return Err(Error::Validation(format!(
                    "class {k} has no samples to fit a centroid"
                )));
            }
            members.sort_by(|a, b| a.0.total_cmp(&b.0));
            let bins = SIZE_BINS.min(members.len());
            for b in 0..bins {
                let lo = b * members.len() / bins;
                let hi = (b + 1) * members.len() / bins;
                let mut mean = Latent::zeros(IxDyn(&[IMG, IMG]));
                for (_, img) in &members[lo..hi] {
                    mean += img;
                }
                mean.mapv_inplace(|v| v / (hi - lo) as f64);
                prototypes.push((k, mean));
            }
        }
        Ok(Centroids { prototypes })
    }

    pub fn classify(&self, img: &Latent) -> usize {
        let centered = recenter(img);
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (k, proto) in &self.prototypes {
            let d: f64 = proto
                .iter()
                .zip(centered.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            if d < best_d {
                best_d = d;
                best = *k;
            }
        }
        best
    }
}
