//! Noise schedule and step coefficients.
//!
//! A linear beta schedule over a fine training grid defines the cumulative
//! products alphabar[k] = prod_{j<=k}(1 - beta_j); an evenly strided ladder
//! subsamples that grid into T inference rungs. The same coefficient
//! formula serves reverse steps (t -> t-1) and inversion steps (t -> t+1)
//! with the endpoint roles swapped. All schedule math is f64.

use crate::error::Error;
use crate::Result;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleParams {
    pub train_steps: usize,
    pub infer_steps: usize,
    pub beta_lo: f64,
    pub beta_hi: f64,
}

impl ScheduleParams {
    /// The grid a denoiser is tied to: everything except the inference
    /// ladder density.
    pub fn same_train_grid(&self, other: &ScheduleParams) -> bool {
        self.train_steps == other.train_steps
            && self.beta_lo == other.beta_lo
            && self.beta_hi == other.beta_hi
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    params: ScheduleParams,
    alphabar: Vec<f64>,
    ladder: Vec<usize>,
}

/// Coefficients of one DDIM step: z_to = a * z_from + b * eps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepCoeffs {
    pub a: f64,
    pub b: f64,
}

/// a = sqrt(ab_to / ab_from); b = sqrt(ab_to) * (sqrt(1/ab_to - 1) - sqrt(1/ab_from - 1)).
pub fn step_coeffs(ab_from: f64, ab_to: f64) -> StepCoeffs {
    let a = (ab_to / ab_from).sqrt();
    let b = ab_to.sqrt() * ((1.0 / ab_to - 1.0).sqrt() - (1.0 / ab_from - 1.0).sqrt());
    StepCoeffs { a, b }
}

pub fn make_schedule(
    train_steps: usize,
    infer_steps: usize,
    beta_lo: f64,
    beta_hi: f64,
) -> Result<NoiseSchedule> {
    if train_steps == 0 {
        return Err(Error::Config("train_steps must be positive".into()));
    }
    if infer_steps > train_steps {
        return Err(Error::Config(format!(
            "infer_steps {infer_steps} exceeds train_steps {train_steps}"
        )));
    }
    if !(beta_lo > 0.0 && beta_lo <= beta_hi && beta_hi < 1.0) {
        return Err(Error::Config(format!(
            "beta range must satisfy 0 < lo <= hi < 1, got [{beta_lo}, {beta_hi}]"
        )));
    }

    let mut alphabar = Vec::with_capacity(train_steps + 1);
    alphabar.push(1.0);
    let mut prod = 1.0f64;
    for j in 1..=train_steps {
        let frac = if train_steps == 1 {
            0.0
        } else {
            (j - 1) as f64 / (train_steps - 1) as f64
        };
        let beta = beta_lo + (beta_hi - beta_lo) * frac;
        prod *= 1.0 - beta;
        alphabar.push(prod);
    }

    let mut ladder = Vec::with_capacity(infer_steps + 1);
    for t in 0..=infer_steps {
        let idx = ((t * train_steps) as f64 / infer_steps.max(1) as f64).round() as usize;
        ladder.push(idx.min(train_steps));
    }
    if infer_steps == 0 {
        ladder.truncate(1);
        ladder[0] = 0;
    }
    debug_assert!(ladder.windows(2).all(|w| w[0] < w[1]));

    Ok(NoiseSchedule {
        params: ScheduleParams {
            train_steps,
            infer_steps,
            beta_lo,
            beta_hi,
        },
        alphabar,
        ladder,
    })
}

impl NoiseSchedule {
    pub fn from_params(p: &ScheduleParams) -> Result<Self> {
        make_schedule(p.train_steps, p.infer_steps, p.beta_lo, p.beta_hi)
    }

    pub fn params(&self) -> &ScheduleParams {
        &self.params
    }

    pub fn train_steps(&self) -> usize {
        self.params.train_steps
    }

    /// T, the number of inference steps.
    pub fn infer_steps(&self) -> usize {
        self.params.infer_steps
    }

    /// Cumulative alpha over the training grid; index 0..=train_steps.
    pub fn alphabar(&self) -> &[f64] {
        &self.alphabar
    }

    /// Ladder of train-step indices; index 0..=infer_steps, ladder[0] = 0.
    pub fn ladder(&self) -> &[usize] {
        &self.ladder
    }

    pub fn check_rung(&self, t: usize) -> Result<()> {
        if t > self.infer_steps() {
            return Err(Error::Usage(format!(
                "rung {t} out of range 0..={}",
                self.infer_steps()
            )));
        }
        Ok(())
    }

    /// alphabar at inference rung t.
    pub fn alphabar_at_rung(&self, t: usize) -> Result<f64> {
        self.check_rung(t)?;
        Ok(self.alphabar[self.ladder[t]])
    }

    /// Step coefficients between adjacent rungs; reverse uses (t, t-1),
    /// inversion uses (t, t+1).
    pub fn coeffs(&self, t_from: usize, t_to: usize) -> Result<StepCoeffs> {
        self.check_rung(t_from)?;
        self.check_rung(t_to)?;
        if t_from.abs_diff(t_to) != 1 {
            return Err(Error::Usage(format!(
                "coeffs requires adjacent rungs, got {t_from} -> {t_to}"
            )));
        }
        let ab_from = self.alphabar[self.ladder[t_from]];
        let ab_to = self.alphabar[self.ladder[t_to]];
        Ok(step_coeffs(ab_from, ab_to))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn default_schedule() -> NoiseSchedule {
        make_schedule(1000, 50, 1e-4, 0.02).unwrap()
    }

    #[test]
    fn alphabar_starts_at_one_exactly() {
        let s = default_schedule();
        assert_eq!(s.alphabar()[0], 1.0);
    }

    #[test]
    fn alphabar_strictly_decreasing_in_unit_interval() {
        let s = default_schedule();
        for w in s.alphabar().windows(2) {
            assert!(w[1] < w[0], "{} !< {}", w[1], w[0]);
            assert!(w[1] > 0.0 && w[1] <= 1.0);
        }
    }

    #[test]
    fn alphabar_end_matches_log_domain_product() {
        // Independent route: Kahan-compensated sum of ln(1 - beta_j),
        // exponentiated once at the end.
        let s = default_schedule();
        let n = 1000usize;
        let mut sum = 0.0f64;
        let mut comp = 0.0f64;
        for j in 1..=n {
            let beta = 1e-4 + (0.02 - 1e-4) * (j - 1) as f64 / (n - 1) as f64;
            let term = (1.0 - beta).ln();
            let y = term - comp;
            let t = sum + y;
            comp = (t - sum) - y;
            sum = t;
        }
        let expected = sum.exp();
        assert_relative_eq!(s.alphabar()[1000], expected, max_relative = 1e-12);
    }

    #[test]
    fn ladder_is_even_stride_for_divisible_counts() {
        let s = default_schedule();
        let expected: Vec<usize> = (0..=50).map(|t| t * 20).collect();
        assert_eq!(s.ladder(), &expected[..]);
    }

    #[test]
    fn ladder_strictly_increasing_for_uneven_counts() {
        let s = make_schedule(1000, 47, 1e-4, 0.02).unwrap();
        assert_eq!(s.ladder()[0], 0);
        assert_eq!(*s.ladder().last().unwrap(), 1000);
        for w in s.ladder().windows(2) {
            assert!(w[0] < w[1]);
        }
    }

    #[test]
    fn zero_infer_steps_gives_single_rung() {
        let s = make_schedule(1000, 0, 1e-4, 0.02).unwrap();
        assert_eq!(s.ladder(), &[0]);
    }

    #[test]
    fn coeffs_degenerate_equal_noise_step() {
        let c = step_coeffs(0.5, 0.5);
        assert_eq!(c.a, 1.0);
        assert_eq!(c.b, 0.0);
    }

    #[test]
    fn coeffs_closed_form_quarter_to_one() {
        let c = step_coeffs(0.25, 1.0);
        assert_relative_eq!(c.a, 2.0, max_relative = 1e-15);
        assert_relative_eq!(c.b, -(3.0f64.sqrt()), max_relative = 1e-15);
    }

    #[test]
    fn coeffs_match_direct_formula_on_arbitrary_pairs() {
        // Independent route: the same algebra written with mul_add-free,
        // explicitly parenthesized operations and f64::powf.
        let pairs = [
            (0.9, 0.95),
            (0.1, 0.2),
            (1e-4, 2e-4),
            (0.5, 0.4999),
            (0.037, 0.62),
        ];
        for &(f, t) in &pairs {
            let c = step_coeffs(f, t);
            let a_ref = (t / f).powf(0.5);
            let b_ref = t.powf(0.5) * ((1.0 / t - 1.0).powf(0.5) - (1.0 / f - 1.0).powf(0.5));
            assert_relative_eq!(c.a, a_ref, max_relative = 1e-12);
            if b_ref != 0.0 {
                assert_relative_eq!(c.b, b_ref, max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn reverse_then_inversion_coefficients_compose_to_identity() {
        let s = default_schedule();
        for t in 1..=50usize {
            let rev = s.coeffs(t, t - 1).unwrap();
            let inv = s.coeffs(t - 1, t).unwrap();
            assert!((rev.a * inv.a - 1.0).abs() < 1e-9, "rung {t}");
            assert!((inv.a * rev.b + inv.b).abs() < 1e-9, "rung {t}");
        }
    }

    #[test]
    fn coeffs_rejects_non_adjacent_rungs() {
        let s = default_schedule();
        assert!(matches!(s.coeffs(5, 7), Err(Error::Usage(_))));
        assert!(matches!(s.coeffs(5, 5), Err(Error::Usage(_))));
    }

    #[test]
    fn invalid_ranges_are_config_errors() {
        assert!(matches!(
            make_schedule(100, 200, 1e-4, 0.02),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            make_schedule(100, 50, 0.0, 0.02),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            make_schedule(100, 50, 0.03, 0.02),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            make_schedule(100, 50, 1e-4, 1.0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn params_roundtrip_through_json() {
        let s = default_schedule();
        let text = serde_json::to_string(s.params()).unwrap();
        let p: ScheduleParams = serde_json::from_str(&text).unwrap();
        let s2 = NoiseSchedule::from_params(&p).unwrap();
        assert_eq!(s, s2);
    }
}
