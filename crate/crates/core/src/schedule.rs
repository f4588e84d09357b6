//! Variance-preserving noise schedules and the closed-form diffusion algebra.
//!
//! Step `t = 0` is clean data and every table carries `T + 1` entries, so a
//! DDIM step may land exactly on `t = 0`. All operations here are pure.

use std::f64::consts::FRAC_PI_2;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sample::{check_same_shape, Mat};

/// Log-SNR values are clamped to this magnitude; the endpoints are infinite.
pub const LAMBDA_CLAMP: f64 = 20.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    /// `alpha_t = cos(t/T * pi/2)`, `sigma_t = sin(t/T * pi/2)`.
    Cosine,
    /// log-SNR linear in `t` from `+20` to `-20`, with exact clean endpoint.
    LinearLambda,
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScheduleKind::Cosine => "cosine",
            ScheduleKind::LinearLambda => "linear-lambda",
        })
    }
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(ScheduleKind::Cosine),
            "linear-lambda" => Ok(ScheduleKind::LinearLambda),
            other => Err(Error::InvalidArgument(format!(
                "unknown schedule kind {other:?}"
            ))),
        }
    }
}

/// Tables of `alpha_t`, `sigma_t` and clamped `lambda_t` for `t` in `0..=T`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    steps: usize,
    kind: ScheduleKind,
    alpha: Vec<f64>,
    sigma: Vec<f64>,
    lambda: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(steps: usize, kind: ScheduleKind) -> Result<Self> {
        if steps < 2 {
            return Err(Error::InvalidArgument(format!(
                "schedule needs at least 2 steps, got {steps}"
            )));
        }
        let n = steps as f64;
        let (alpha, sigma): (Vec<f64>, Vec<f64>) = match kind {
            ScheduleKind::Cosine => (0..=steps)
                .map(|t| {
                    let phase = t as f64 / n * FRAC_PI_2;
                    (phase.cos(), phase.sin())
                })
                .unzip(),
            ScheduleKind::LinearLambda => (0..=steps)
                .map(|t| {
                    if t == 0 {
                        return (1.0, 0.0);
                    }
                    let lambda = LAMBDA_CLAMP - 2.0 * LAMBDA_CLAMP * t as f64 / n;
                    // alpha^2 = sigmoid(lambda), sigma^2 = sigmoid(-lambda)
                    (sigmoid(lambda).sqrt(), sigmoid(-lambda).sqrt())
                })
                .unzip(),
        };
        let lambda = alpha
            .iter()
            .zip(&sigma)
            .map(|(a, s)| {
                let raw = (a * a / (s * s)).ln();
                if raw.is_nan() {
                    -LAMBDA_CLAMP
                } else {
                    raw.clamp(-LAMBDA_CLAMP, LAMBDA_CLAMP)
                }
            })
            .collect();
        Ok(NoiseSchedule {
            steps,
            kind,
            alpha,
            sigma,
            lambda,
        })
    }

    /// Total number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t]
    }

    pub fn lambda(&self, t: usize) -> f64 {
        self.lambda[t]
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigma
    }

    pub fn lambdas(&self) -> &[f64] {
        &self.lambda
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t > self.steps {
            return Err(Error::StepOutOfRange {
                step: t,
                min: 0,
                max: self.steps,
            });
        }
        Ok(())
    }

    /// `x_t = alpha_t * x0 + sigma_t * eps`.
    pub fn forward_diffuse(&self, x0: &Mat, t: usize, eps: &Mat) -> Result<Mat> {
        self.check_step(t)?;
        check_same_shape(x0, eps)?;
        let (a, s) = (self.alpha[t], self.sigma[t]);
        Ok(ndarray::Zip::from(x0)
            .and(eps)
            .map_collect(|&x, &e| a * x + s * e))
    }

    /// Deterministic interleaved step from `t` to `t - k` given the denoised
    /// estimate `x0_hat`.
    pub fn ddim_step(&self, x_t: &Mat, x0_hat: &Mat, t: usize, k: usize) -> Result<Mat> {
        let (a_next, s_next, a_t, s_t) = self.ddim_coefficients(t, k)?;
        check_same_shape(x_t, x0_hat)?;
        let ratio = s_next / s_t;
        Ok(ndarray::Zip::from(x_t)
            .and(x0_hat)
            .map_collect(|&xt, &x0| a_next * x0 + ratio * (xt - a_t * x0)))
    }

    /// Weight that `ddim_step` puts on the denoised estimate:
    /// `alpha_{t-k} - alpha_t * sigma_{t-k} / sigma_t`.
    pub fn ddim_estimate_weight(&self, t: usize, k: usize) -> Result<f64> {
        let (a_next, s_next, a_t, s_t) = self.ddim_coefficients(t, k)?;
        Ok(a_next - a_t * s_next / s_t)
    }

    fn ddim_coefficients(&self, t: usize, k: usize) -> Result<(f64, f64, f64, f64)> {
        self.check_step(t)?;
        if k == 0 {
            return Err(Error::InvalidArgument("step size must be >= 1".into()));
        }
        if k > t {
            return Err(Error::InvalidArgument(format!(
                "step {t} - stride {k} is negative"
            )));
        }
        let s_t = self.sigma[t];
        if s_t == 0.0 {
            return Err(Error::Degenerate(format!("sigma_{t} is zero")));
        }
        Ok((self.alpha[t - k], self.sigma[t - k], self.alpha[t], s_t))
    }

    /// Standard deviation `beta_t` of the stochastic reverse transition.
    pub fn reverse_transition_std(&self, t: usize) -> Result<f64> {
        if t == 0 || t > self.steps {
            return Err(Error::StepOutOfRange {
                step: t,
                min: 1,
                max: self.steps,
            });
        }
        let (a_prev, s_prev) = (self.alpha[t - 1], self.sigma[t - 1]);
        let (a_t, s_t) = (self.alpha[t], self.sigma[t]);
        if s_t == 0.0 || a_prev == 0.0 {
            return Err(Error::Degenerate(format!(
                "beta_{t} undefined: sigma_t={s_t}, alpha_(t-1)={a_prev}"
            )));
        }
        let radicand = (a_prev * a_prev - a_t * a_t).max(0.0);
        Ok(s_prev / (s_t * a_prev) * radicand.sqrt())
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Split of steps `1..=T` into `F` equal contiguous fractions, indexed `1..=F`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FractionLayout {
    fractions: usize,
    steps: usize,
}

impl FractionLayout {
    pub fn new(steps: usize, fractions: usize) -> Result<Self> {
        if fractions == 0 || steps == 0 || !steps.is_multiple_of(fractions) {
            return Err(Error::InvalidArgument(format!(
                "{fractions} fractions must evenly divide {steps} steps"
            )));
        }
        Ok(FractionLayout { fractions, steps })
    }

    pub fn fractions(&self) -> usize {
        self.fractions
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Steps per fraction, `T / F`; never zero.
    #[allow(clippy::len_without_is_empty)]
    pub fn len(&self) -> usize {
        self.steps / self.fractions
    }

    /// Highest (noisiest) step of fraction `f`.
    pub fn start(&self, f: usize) -> usize {
        debug_assert!((1..=self.fractions).contains(&f));
        self.steps * f / self.fractions
    }

    /// Lowest step of fraction `f`.
    pub fn end(&self, f: usize) -> usize {
        debug_assert!((1..=self.fractions).contains(&f));
        self.steps * (f - 1) / self.fractions + 1
    }

    pub fn contains(&self, f: usize, t: usize) -> bool {
        (1..=self.fractions).contains(&f) && self.end(f) <= t && t <= self.start(f)
    }

    /// Fraction serving step `t`: `ceil(t * F / T)`.
    pub fn fraction_of_step(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.steps {
            return Err(Error::StepOutOfRange {
                step: t,
                min: 1,
                max: self.steps,
            });
        }
        Ok((t * self.fractions).div_ceil(self.steps))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{arr2, Array2};

    fn cosine(t: usize) -> NoiseSchedule {
        NoiseSchedule::new(t, ScheduleKind::Cosine).unwrap()
    }

    #[test]
    fn endpoints_and_constraint() {
        for kind in [ScheduleKind::Cosine, ScheduleKind::LinearLambda] {
            let s = NoiseSchedule::new(1024, kind).unwrap();
            assert_eq!(s.alpha(0), 1.0);
            assert_eq!(s.sigma(0), 0.0);
            for t in 0..=1024 {
                let dev = s.alpha(t).powi(2) + s.sigma(t).powi(2) - 1.0;
                assert!(dev.abs() <= 1e-12, "{kind} t={t} dev={dev}");
            }
        }
    }

    #[test]
    fn cosine_midpoint_by_hand() {
        let s = cosine(4);
        // cos(pi/4) = sin(pi/4) = 1/sqrt(2)
        assert_abs_diff_eq!(s.alpha(2), std::f64::consts::FRAC_1_SQRT_2, epsilon = 1e-15);
        assert_abs_diff_eq!(s.sigma(2), std::f64::consts::FRAC_1_SQRT_2, epsilon = 1e-15);
    }

    #[test]
    fn too_few_steps_and_unknown_kind() {
        assert!(NoiseSchedule::new(1, ScheduleKind::Cosine).is_err());
        assert!(NoiseSchedule::new(0, ScheduleKind::LinearLambda).is_err());
        assert!("quadratic".parse::<ScheduleKind>().is_err());
        assert_eq!(
            "linear-lambda".parse::<ScheduleKind>().unwrap(),
            ScheduleKind::LinearLambda
        );
    }

    #[test]
    fn lambda_clamped_at_endpoints() {
        let s = cosine(64);
        assert_eq!(s.lambda(0), LAMBDA_CLAMP);
        assert_eq!(s.lambda(64), -LAMBDA_CLAMP);
        assert!(s.lambdas().windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn forward_diffuse_cases() {
        let s = cosine(4);
        let x0 = arr2(&[[1.5, -2.0], [0.25, 3.0]]);
        let eps = arr2(&[[9.0, 9.0], [-9.0, 1.0]]);
        assert_eq!(s.forward_diffuse(&x0, 0, &eps).unwrap(), x0);
        let zeros = Array2::zeros((2, 2));
        let out = s.forward_diffuse(&zeros, 3, &eps).unwrap();
        assert_eq!(out, eps.mapv(|e| s.sigma(3) * e));
        // cos(pi/4) + sin(pi/4) = sqrt(2)
        let one = arr2(&[[1.0]]);
        let v = s.forward_diffuse(&one, 2, &one).unwrap()[[0, 0]];
        assert_abs_diff_eq!(v, std::f64::consts::SQRT_2, epsilon = 1e-14);
        assert!(s.forward_diffuse(&x0, 5, &eps).is_err());
        assert!(s.forward_diffuse(&x0, 1, &one).is_err());
    }

    #[test]
    fn ddim_scalar_by_hand() {
        let s = cosine(4);
        let x = arr2(&[[1.0]]);
        let x0 = arr2(&[[0.5]]);
        // cos(pi/4)*0.5 + sin(pi/4) * (1 - cos(3pi/8)*0.5) / sin(3pi/8)
        let v = s.ddim_step(&x, &x0, 3, 1).unwrap()[[0, 0]];
        assert_abs_diff_eq!(v, 0.9724736459167271, epsilon = 1e-14);
    }

    #[test]
    fn ddim_endpoint_and_errors() {
        let s = cosine(8);
        let x = arr2(&[[0.3, -0.1]]);
        let x0 = arr2(&[[2.0, 4.0]]);
        assert_eq!(s.ddim_step(&x, &x0, 4, 4).unwrap(), x0);
        assert!(s.ddim_step(&x, &x0, 3, 4).is_err());
        assert!(s.ddim_step(&x, &x0, 0, 0).is_err());
        assert!(matches!(
            s.ddim_step(&x, &x0, 0, 0),
            Err(Error::InvalidArgument(_))
        ));
        assert!(s.ddim_step(&x, &arr2(&[[1.0]]), 4, 2).is_err());
    }

    #[test]
    fn ddim_is_bitwise_pure() {
        let s = cosine(64);
        let x = arr2(&[[0.123456789, -1.5], [2.5, 0.0001]]);
        let x0 = arr2(&[[0.3, 0.7], [-0.2, 1.1]]);
        let a = s.ddim_step(&x, &x0, 40, 8).unwrap();
        let b = s.ddim_step(&x, &x0, 40, 8).unwrap();
        assert!(a.iter().zip(b.iter()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn beta_by_hand() {
        let s = cosine(4);
        // sin(pi/8) / (sin(pi/4) cos(pi/8)) * sqrt(cos^2(pi/8) - cos^2(pi/4))
        assert_abs_diff_eq!(
            s.reverse_transition_std(2).unwrap(),
            0.3483106997490065,
            epsilon = 1e-14
        );
        assert!(s.reverse_transition_std(0).is_err());
        assert!(s.reverse_transition_std(5).is_err());
        // t = 1: sigma_0 = 0 so beta vanishes
        assert_eq!(s.reverse_transition_std(1).unwrap(), 0.0);
    }

    #[test]
    fn fraction_boundaries() {
        let layout = FractionLayout::new(1024, 4).unwrap();
        assert_eq!(layout.fraction_of_step(1024).unwrap(), 4);
        assert_eq!(layout.fraction_of_step(1).unwrap(), 1);
        assert_eq!(layout.fraction_of_step(512).unwrap(), 2);
        assert_eq!(layout.fraction_of_step(513).unwrap(), 3);
        assert!(layout.fraction_of_step(0).is_err());
        assert!(layout.fraction_of_step(1025).is_err());
        assert_eq!((layout.end(2), layout.start(2)), (257, 512));
        assert!(FractionLayout::new(10, 4).is_err());
    }

    #[test]
    fn fraction_of_step_matches_interval_enumeration() {
        for steps in [4usize, 64, 96, 1024, 4096] {
            for fractions in (1..=16).filter(|f| steps % f == 0) {
                let layout = FractionLayout::new(steps, fractions).unwrap();
                let mut covered = vec![0usize; steps + 1];
                for f in 1..=fractions {
                    for t in layout.end(f)..=layout.start(f) {
                        covered[t] += 1;
                        assert_eq!(layout.fraction_of_step(t).unwrap(), f);
                    }
                }
                assert!(covered[1..].iter().all(|&c| c == 1));
            }
        }
    }
}
