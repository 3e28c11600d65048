//! Gaussian-mixture denoiser with closed-form score and Jacobian.
//!
//! Forward-noising a component N(mu, diag(v)) to train index t gives
//! N(sqrt(ab)*mu, ab*v + (1-ab)) with ab = alphabar[t]. The conditional
//! score is that component's Gaussian score; the unconditional score is
//! the responsibility-weighted mixture score. eps = -sqrt(1-ab) * score.

use super::{check_class, check_shape, check_t, Condition, Denoiser};
use crate::schedule::NoiseSchedule;
use crate::{Error, Latent, Result};
use ndarray::Array1;

#[derive(Debug, Clone)]
pub struct MixtureComponent {
    pub weight: f64,
    pub mean: Latent,
    pub var: Latent,
}

impl MixtureComponent {
    pub fn isotropic(weight: f64, mean: Latent, var: f64) -> Self {
        let var = Latent::from_elem(mean.raw_dim(), var);
        MixtureComponent { weight, mean, var }
    }
}

#[derive(Debug, Clone)]
pub struct AnalyticModel {
    schedule: NoiseSchedule,
    shape: Vec<usize>,
    components: Vec<MixtureComponent>,
}

impl AnalyticModel {
    /// Weights are renormalized to sum to 1; they must be positive, and
    /// variances must be positive elementwise.
    pub fn new(schedule: NoiseSchedule, components: Vec<MixtureComponent>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::Config("mixture needs at least one component".into()));
        }
        let shape = components[0].mean.shape().to_vec();
        let mut total = 0.0f64;
        for comp in &components {
            if comp.mean.shape() != shape.as_slice() {
                return Err(Error::shape_mismatch(&shape, comp.mean.shape()));
            }
            if comp.var.shape() != shape.as_slice() {
                return Err(Error::shape_mismatch(&shape, comp.var.shape()));
            }
            if !(comp.weight > 0.0 && comp.weight.is_finite()) {
                return Err(Error::Config(format!(
                    "component weight must be positive, got {}",
                    comp.weight
                )));
            }
            if comp.var.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
                return Err(Error::Config("component variances must be positive".into()));
            }
            total += comp.weight;
        }
        let mut components = components;
        for comp in &mut components {
            comp.weight /= total;
        }
        Ok(AnalyticModel {
            schedule,
            shape,
            components,
        })
    }

    /// Single component N(0, I): eps(z, t, null) = sqrt(1 - alphabar_t) * z.
    pub fn unit_gaussian(schedule: NoiseSchedule, shape: &[usize]) -> Self {
        let mean = Latent::zeros(ndarray::IxDyn(shape));
        let comp = MixtureComponent::isotropic(1.0, mean, 1.0);
        AnalyticModel::new(schedule, vec![comp]).expect("valid by construction")
    }

    pub fn components(&self) -> &[MixtureComponent] {
        &self.components
    }

    /// Noised stats of component k at train index t: (m, s2).
    fn noised(&self, k: usize, ab: f64) -> (Latent, Latent) {
        let comp = &self.components[k];
        let m = comp.mean.mapv(|x| ab.sqrt() * x);
        let s2 = comp.var.mapv(|v| ab * v + (1.0 - ab));
        (m, s2)
    }

    /// Per-component Gaussian score g_k = (m_k - z) / s2_k and log-density.
    fn component_score(&self, z: &Latent, k: usize, ab: f64) -> (Latent, f64) {
        let (m, s2) = self.noised(k, ab);
        let diff = &m - z;
        let g = &diff / &s2;
        let mut logp = 0.0f64;
        for (d, &v) in diff.iter().zip(s2.iter()) {
            logp -= 0.5 * ((2.0 * std::f64::consts::PI * v).ln() + d * d / v);
        }
        (g, logp)
    }

    /// Responsibilities and per-component scores under the full mixture.
    fn responsibilities(&self, z: &Latent, ab: f64) -> (Vec<f64>, Vec<Latent>) {
        let n = self.components.len();
        let mut scores = Vec::with_capacity(n);
        let mut logits = Vec::with_capacity(n);
        for k in 0..n {
            let (g, logp) = self.component_score(z, k, ab);
            scores.push(g);
            logits.push(self.components[k].weight.ln() + logp);
        }
        let peak = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut r: Vec<f64> = logits.iter().map(|&l| (l - peak).exp()).collect();
        let z_norm: f64 = r.iter().sum();
        for v in &mut r {
            *v /= z_norm;
        }
        (r, scores)
    }

    fn score(&self, z: &Latent, t: usize, c: &Condition) -> Result<Latent> {
        let ab = self.schedule.alphabar()[t];
        match c {
            Condition::Null => {
                if self.components.len() == 1 {
                    return Ok(self.component_score(z, 0, ab).0);
                }
                let (r, scores) = self.responsibilities(z, ab);
                let mut acc = Latent::zeros(z.raw_dim());
                for (rk, g) in r.iter().zip(scores.iter()) {
                    acc.scaled_add(*rk, g);
                }
                Ok(acc)
            }
            Condition::Class(k) => {
                check_class(self.components.len(), *k)?;
                Ok(self.component_score(z, *k, ab).0)
            }
            Condition::Embedding(_) => Err(Error::Unsupported(
                "analytic model has no embedding space".into(),
            )),
        }
    }
}

impl Denoiser for AnalyticModel {
    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn latent_shape(&self) -> &[usize] {
        &self.shape
    }

    fn n_classes(&self) -> usize {
        self.components.len()
    }

    fn eps(&self, z: &Latent, t: usize, c: &Condition) -> Result<Latent> {
        check_shape(&self.shape, z)?;
        check_t(&self.schedule, t)?;
        let ab = self.schedule.alphabar()[t];
        let score = self.score(z, t, c)?;
        Ok(score.mapv(|s| -(1.0 - ab).sqrt() * s))
    }

    fn vjp_z(&self, z: &Latent, t: usize, c: &Condition, u: &Latent) -> Result<Latent> {
        check_shape(&self.shape, z)?;
        check_shape(&self.shape, u)?;
        check_t(&self.schedule, t)?;
        let ab = self.schedule.alphabar()[t];
        let root = (1.0 - ab).sqrt();
        match c {
            Condition::Class(k) => {
                check_class(self.components.len(), *k)?;
                let (_, s2) = self.noised(*k, ab);
                Ok(root * u / &s2)
            }
            Condition::Null => {
                if self.components.len() == 1 {
                    let (_, s2) = self.noised(0, ab);
                    return Ok(root * u / &s2);
                }
                // d score/d z = sum_k r_k (g_k g_k^T - diag(1/s2_k)) - score score^T;
                // symmetric, so the vjp is a plain matrix-vector product.
                let (r, scores) = self.responsibilities(z, ab);
                let mut mix = Latent::zeros(z.raw_dim());
                let mut acc = Latent::zeros(z.raw_dim());
                for (k, (rk, g)) in r.iter().zip(scores.iter()).enumerate() {
                    let (_, s2) = self.noised(k, ab);
                    let gu: f64 = g.iter().zip(u.iter()).map(|(a, b)| a * b).sum();
                    acc.scaled_add(*rk, &(g.mapv(|x| x * gu) - u / &s2));
                    mix.scaled_add(*rk, g);
                }
                let su: f64 = mix.iter().zip(u.iter()).map(|(a, b)| a * b).sum();
                acc.scaled_add(-su, &mix);
                Ok(acc.mapv(|x| -root * x))
            }
            Condition::Embedding(_) => Err(Error::Unsupported(
                "analytic model has no embedding space".into(),
            )),
        }
    }

    fn vjp_embedding(
        &self,
        _z: &Latent,
        _t: usize,
        _c: &Condition,
        _u: &Latent,
    ) -> Result<Array1<f64>> {
        Err(Error::Unsupported(
            "analytic model has no embedding space".into(),
        ))
    }

    fn null_embedding(&self) -> Result<Array1<f64>> {
        Err(Error::Unsupported(
            "analytic model has no embedding space".into(),
        ))
    }

    fn class_embedding(&self, _k: usize) -> Result<Array1<f64>> {
        Err(Error::Unsupported(
            "analytic model has no embedding space".into(),
        ))
    }
}
