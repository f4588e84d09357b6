//! Classifier-guided counterfactual generation.
//!
//! The input is noised to `delta_t`, then denoised fraction by fraction.
//! On entry to each fraction an unguided rollout to `t = 0` gives a clean
//! estimate `x~0`; the classifier gradient `G = d log p(target | x~0) / dx~0`
//! is added, scaled by `gamma`, on the fraction's final step.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classifier::Classifier;
use crate::error::{Error, Result};
use crate::prior::{check_on_grid, rollout, routed_step, FractionDenoiser};
use crate::sample::{standard_normal, Mat, Sample};
use crate::schedule::NoiseSchedule;

/// Default guidance scale.
pub const DEFAULT_SCALE: f64 = 50.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GuidanceMode {
    /// One rollout and one guided step per fraction.
    #[default]
    PerFraction,
    /// Fresh rollout and guidance on every step.
    PerStep,
}

impl fmt::Display for GuidanceMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GuidanceMode::PerFraction => "per-fraction",
            GuidanceMode::PerStep => "per-step",
        })
    }
}

impl FromStr for GuidanceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per-fraction" => Ok(GuidanceMode::PerFraction),
            "per-step" => Ok(GuidanceMode::PerStep),
            _ => Err(Error::InvalidArgument(format!("unknown guidance mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidanceConfig {
    pub scale: f64,
    /// Noising depth; `None` means `T / 2` rounded down to the step grid.
    pub delta_t: Option<usize>,
    pub target: usize,
    pub seed: u64,
    #[serde(default)]
    pub mode: GuidanceMode,
}

impl GuidanceConfig {
    pub fn new(target: usize, seed: u64) -> Self {
        GuidanceConfig {
            scale: DEFAULT_SCALE,
            delta_t: None,
            target,
            seed,
            mode: GuidanceMode::PerFraction,
        }
    }

    pub fn resolved_delta_t(&self, steps: usize, k: usize) -> usize {
        self.delta_t.unwrap_or_else(|| (steps / 2 / k).max(1) * k)
    }
}

/// `gamma = s * (sigma_t^2 / alpha_t^2) * (alpha_{t-k} - alpha_t sigma_{t-k} / sigma_t)`.
pub fn guidance_gamma(t: usize, k: usize, scale: f64, sched: &NoiseSchedule) -> Result<f64> {
    if k == 0 || k > t || t > sched.steps() {
        return Err(Error::InvalidArgument(format!(
            "no guided step from t={t} with stride {k}"
        )));
    }
    let (a, s) = (sched.alpha(t), sched.sigma(t));
    if s == 0.0 {
        return Err(Error::Degenerate(format!("sigma is zero at t={t}")));
    }
    if a.abs() < 1e-12 {
        return Err(Error::Degenerate(format!("alpha vanishes at t={t}")));
    }
    let (a_k, s_k) = (sched.alpha(t - k), sched.sigma(t - k));
    Ok(scale * (s * s) / (a * a) * (a_k - a * s_k / s))
}

/// `gamma * grad`.
pub fn guidance_term(grad: &Mat, t: usize, k: usize, scale: f64, sched: &NoiseSchedule) -> Result<Mat> {
    let gamma = guidance_gamma(t, k, scale, sched)?;
    Ok(grad * gamma)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidanceEvent {
    pub fraction: usize,
    /// Step the rollout started from.
    pub t_rollout: usize,
    /// Source step of the guided update.
    pub t_guided: usize,
    /// `p(target | x~0)` at the rollout estimate.
    pub target_posterior: f64,
    pub gamma: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualResult {
    pub original: Sample,
    pub counterfactual: Sample,
    pub target: usize,
    pub source_prediction: usize,
    /// `counterfactual - original`.
    pub diff: Mat,
    pub denoiser_calls: usize,
    pub flipped: bool,
    /// Target-class posterior of the counterfactual.
    pub target_posterior: f64,
    pub delta_t: usize,
    pub trace: Vec<GuidanceEvent>,
}

/// Forward-noises `x0` to `delta_t` with the seeded noise used by [`generate`].
pub fn noised_input<D: FractionDenoiser + ?Sized>(
    prior: &D,
    x0: &Mat,
    delta_t: usize,
    seed: u64,
) -> Result<Mat> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps = standard_normal(&mut rng, x0.nrows(), x0.ncols());
    prior.schedule().forward_diffuse(x0, delta_t, &eps)
}

/// Unguided reconstruction of `x0` from depth `delta_t` with the same noise
/// as [`generate`]; the reference the `scale = 0` path must reproduce.
pub fn regenerate<D: FractionDenoiser + ?Sized>(
    prior: &D,
    x0: &Mat,
    delta_t: usize,
    seed: u64,
) -> Result<Mat> {
    check_on_grid(prior, delta_t)?;
    let noisy = noised_input(prior, x0, delta_t, seed)?;
    Ok(rollout(prior, &noisy, delta_t)?.sample)
}

/// Closed-form denoiser-call count of per-fraction generation: one rollout
/// per visited fraction plus one call per grid step from `delta_t` to 0.
pub fn expected_calls(steps: usize, fractions: usize, k: usize, delta_t: usize) -> usize {
    let len = steps / fractions;
    let f_c = (delta_t * fractions).div_ceil(steps);
    let rollouts: usize = (1..=f_c).map(|f| delta_t.min(f * len) / k).sum();
    rollouts + delta_t / k
}

pub fn generate<D: FractionDenoiser + ?Sized>(
    prior: &D,
    clf: &Classifier,
    x0: &Sample,
    cfg: &GuidanceConfig,
) -> Result<CounterfactualResult> {
    let sched = prior.schedule();
    let layout = prior.layout();
    let k = prior.step_size();
    let delta_t = cfg.resolved_delta_t(sched.steps(), k);
    check_on_grid(prior, delta_t)?;
    if !(cfg.scale >= 0.0 && cfg.scale.is_finite()) {
        return Err(Error::InvalidArgument(format!("guidance scale {} must be >= 0", cfg.scale)));
    }
    if cfg.target >= clf.classes() {
        return Err(Error::InvalidArgument(format!(
            "target {} outside 0..{}",
            cfg.target,
            clf.classes()
        )));
    }
    let source_prediction = clf.predict(&x0.values)?;
    if source_prediction == cfg.target {
        return Err(Error::AlreadyTarget(cfg.target));
    }

    let mut x = noised_input(prior, &x0.values, delta_t, cfg.seed)?;
    let mut t = delta_t;
    let mut calls = 0;
    let mut trace = Vec::new();
    let f_c = layout.fraction_of_step(delta_t)?;
    for f in (1..=f_c).rev() {
        let lower = layout.end(f);
        let mut grad: Option<Mat> = None;
        while t >= lower {
            let last = t - k < lower;
            let guide_now = match cfg.mode {
                GuidanceMode::PerFraction => last,
                GuidanceMode::PerStep => true,
            };
            if grad.is_none() || cfg.mode == GuidanceMode::PerStep {
                let est = rollout(prior, &x, t)?;
                calls += est.calls;
                let (p, g) = clf.posterior_and_input_grad(&est.sample, cfg.target)?;
                trace.push(GuidanceEvent {
                    fraction: f,
                    t_rollout: t,
                    t_guided: 0,
                    target_posterior: p,
                    gamma: 0.0,
                    grad_norm: g.iter().map(|v| v * v).sum::<f64>().sqrt(),
                });
                grad = Some(g);
            }
            let mut next = routed_step(prior, &x, t, k)?;
            calls += 1;
            if guide_now {
                let gamma = guidance_gamma(t, k, cfg.scale, sched)?;
                let event = trace.last_mut().expect("rollout precedes guidance");
                event.t_guided = t;
                event.gamma = gamma;
                // skipping the add keeps scale 0 bitwise equal to regeneration
                if gamma != 0.0 {
                    next.scaled_add(gamma, grad.as_ref().expect("gradient computed"));
                }
            }
            x = next;
            t -= k;
        }
    }
    debug_assert_eq!(t, 0);

    let counterfactual = Sample::new(format!("{}-cf{}", x0.id, cfg.target), Some(cfg.target), x)?;
    let diff = &counterfactual.values - &x0.values;
    let post = clf.posterior(&counterfactual.values)?;
    let prediction = crate::metrics::argmax(&post);
    Ok(CounterfactualResult {
        original: x0.clone(),
        target: cfg.target,
        source_prediction,
        diff,
        denoiser_calls: calls,
        flipped: prediction == cfg.target,
        target_posterior: post[cfg.target],
        delta_t,
        trace,
        counterfactual,
    })
}
