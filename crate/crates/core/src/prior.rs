//! Fraction-wise prior: one denoiser per fraction of the diffusion process,
//! trained on its own step range and distilled phase by phase so that each
//! phase doubles the sampling stride.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::{DenoiserConfig, DenoiserNet, TrainItem};
use crate::error::{Error, Result};
use crate::optim::{Adam, TrainConfig};
use crate::sample::{standard_normal, Mat, Sample};
use crate::schedule::{FractionLayout, NoiseSchedule};

/// Denominators of the inverted distillation target below this are skipped.
pub const DEGENERATE_DENOMINATOR: f64 = 1e-12;

/// Anything that can serve routed denoising on a fraction layout.
pub trait FractionDenoiser {
    fn schedule(&self) -> &NoiseSchedule;
    fn layout(&self) -> &FractionLayout;
    /// Current sampling stride `k`.
    fn step_size(&self) -> usize;
    /// Denoise `x_t` with the network dedicated to fraction `fraction`.
    fn denoise_fraction(&self, fraction: usize, x_t: &Mat, t: usize) -> Result<Mat>;
}

#[derive(Debug, Clone)]
pub struct Rollout {
    pub sample: Mat,
    pub calls: usize,
}

/// One routed DDIM step `t -> t - k` using the network that owns step `t`.
pub fn routed_step<D: FractionDenoiser + ?Sized>(
    prior: &D,
    x_t: &Mat,
    t: usize,
    k: usize,
) -> Result<Mat> {
    let f = prior.layout().fraction_of_step(t)?;
    let x0_hat = prior.denoise_fraction(f, x_t, t)?;
    prior.schedule().ddim_step(x_t, &x0_hat, t, k)
}

pub fn check_on_grid<D: FractionDenoiser + ?Sized>(prior: &D, t: usize) -> Result<()> {
    let k = prior.step_size();
    let steps = prior.schedule().steps();
    if t == 0 || t > steps || !t.is_multiple_of(k) {
        return Err(Error::InvalidArgument(format!(
            "step {t} is not on the stride-{k} grid of 1..={steps}"
        )));
    }
    Ok(())
}

/// Deterministic sampling from `t_start` down to `t = 0` with stride `k`,
/// switching networks at fraction boundaries.
pub fn rollout<D: FractionDenoiser + ?Sized>(prior: &D, x_t: &Mat, t_start: usize) -> Result<Rollout> {
    check_on_grid(prior, t_start)?;
    let k = prior.step_size();
    let mut x = x_t.clone();
    let mut t = t_start;
    let mut calls = 0;
    while t > 0 {
        x = routed_step(prior, &x, t, k)?;
        calls += 1;
        t -= k;
    }
    Ok(Rollout { sample: x, calls })
}

/// Distillation target recovered from two teacher steps:
/// `(x_{t-2k} - r x_t) / (alpha_{t-2k} - r alpha_t)` with
/// `r = sigma_{t-2k} / sigma_t`.
pub fn inverted_target(
    sched: &NoiseSchedule,
    x_t: &Mat,
    x_two_steps: &Mat,
    t: usize,
    teacher_step: usize,
) -> Result<Mat> {
    let two = 2 * teacher_step;
    if two > t || sched.sigma(t) == 0.0 {
        return Err(Error::InvalidArgument(format!(
            "no two-step target from t={t} with teacher stride {teacher_step}"
        )));
    }
    let r = sched.sigma(t - two) / sched.sigma(t);
    let denom = sched.alpha(t - two) - r * sched.alpha(t);
    if denom.abs() < DEGENERATE_DENOMINATOR {
        return Err(Error::Degenerate(format!(
            "inverted target denominator {denom:e} at t={t}"
        )));
    }
    Ok(ndarray::Zip::from(x_two_steps)
        .and(x_t)
        .map_collect(|&x2, &xt| (x2 - r * xt) / denom))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FmdPrior {
    sched: NoiseSchedule,
    layout: FractionLayout,
    nets: Vec<DenoiserNet>,
    phase: u32,
}

impl FractionDenoiser for FmdPrior {
    fn schedule(&self) -> &NoiseSchedule {
        &self.sched
    }

    fn layout(&self) -> &FractionLayout {
        &self.layout
    }

    fn step_size(&self) -> usize {
        1 << self.phase
    }

    fn denoise_fraction(&self, fraction: usize, x_t: &Mat, t: usize) -> Result<Mat> {
        if !self.layout.contains(fraction, t) {
            return Err(Error::InvalidArgument(format!(
                "routing violation: step {t} dispatched to fraction {fraction}"
            )));
        }
        self.nets[fraction - 1].denoise(x_t, t)
    }
}

impl FmdPrior {
    pub fn new(
        sched: NoiseSchedule,
        layout: FractionLayout,
        nets: Vec<DenoiserNet>,
        phase: u32,
    ) -> Result<Self> {
        if layout.steps() != sched.steps() {
            return Err(Error::InvalidArgument(format!(
                "layout covers {} steps but schedule has {}",
                layout.steps(),
                sched.steps()
            )));
        }
        if nets.len() != layout.fractions() {
            return Err(Error::InvalidArgument(format!(
                "{} networks for {} fractions",
                nets.len(),
                layout.fractions()
            )));
        }
        if phase >= usize::BITS || !layout.len().is_multiple_of(1usize << phase) {
            return Err(Error::InvalidArgument(format!(
                "stride 2^{phase} does not divide fraction length {}",
                layout.len()
            )));
        }
        if let Some(first) = nets.first() {
            if nets.iter().any(|n| n.config() != first.config()) {
                return Err(Error::InvalidArgument("fraction networks differ in config".into()));
            }
        }
        if nets.iter().any(|n| n.steps() != sched.steps()) {
            return Err(Error::InvalidArgument("network time scale differs from schedule".into()));
        }
        Ok(FmdPrior {
            sched,
            layout,
            nets,
            phase,
        })
    }

    pub fn phase(&self) -> u32 {
        self.phase
    }

    pub fn step_size(&self) -> usize {
        1 << self.phase
    }

    pub fn nets(&self) -> &[DenoiserNet] {
        &self.nets
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.sched
    }

    pub fn layout(&self) -> &FractionLayout {
        &self.layout
    }

    pub fn denoiser_config(&self) -> &DenoiserConfig {
        self.nets[0].config()
    }

    /// `(regions, timepoints)` of the samples this prior models.
    pub fn sample_shape(&self) -> (usize, usize) {
        let c = self.denoiser_config();
        (c.regions, c.timepoints)
    }

    pub fn rollout(&self, x_t: &Mat, t_start: usize) -> Result<Rollout> {
        rollout(self, x_t, t_start)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FractionStats {
    pub fraction: usize,
    pub optimizer_steps: usize,
    /// Mean loss over each epoch.
    pub epoch_losses: Vec<f64>,
    /// Mean loss over the last (up to) ten optimizer steps.
    pub final_loss: f64,
    /// Batch items dropped because the distillation target was degenerate.
    pub skipped_items: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub prior: FmdPrior,
    pub stats: Vec<FractionStats>,
}

fn check_data(data: &[Sample], regions: usize, timepoints: usize) -> Result<()> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("training data is empty".into()));
    }
    for s in data {
        if s.shape() != (regions, timepoints) {
            return Err(Error::shape(
                format!("{:?}", (regions, timepoints)),
                format!("{:?} (sample {})", s.shape(), s.id),
            ));
        }
    }
    Ok(())
}

fn fraction_rng(seed: u64, fraction: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fraction as u64);
    rng
}

/// Adam over `epochs * ceil(n / batch)` steps; each step draws `batch` items
/// by cycling through a per-epoch shuffle of the `n` data indices.
fn fit<F>(
    net: &mut DenoiserNet,
    n: usize,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
    fraction: usize,
    mut make_item: F,
) -> Result<FractionStats>
where
    F: FnMut(usize, &mut ChaCha8Rng) -> Result<Option<TrainItem>>,
{
    cfg.validate()?;
    let per_epoch = n.div_ceil(cfg.batch);
    let total = cfg.epochs * per_epoch;
    let mut adam = Adam::new(net.param_count());
    let mut order: Vec<usize> = (0..n).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut recent = std::collections::VecDeque::with_capacity(10);
    let mut skipped = 0;
    let mut step = 0;
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        let mut epoch_sum = 0.0;
        let mut epoch_count = 0;
        for chunk in 0..per_epoch {
            let mut items = Vec::with_capacity(cfg.batch);
            for j in 0..cfg.batch {
                let idx = order[(chunk * cfg.batch + j) % n];
                match make_item(idx, rng)? {
                    Some(item) => items.push(item),
                    None => skipped += 1,
                }
            }
            let lr = cfg.lr_at(step, total);
            step += 1;
            if items.is_empty() {
                continue;
            }
            let (loss, grad) = net.loss_and_grad(&items)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("training loss in fraction {fraction}")));
            }
            adam.step_with_lr(net.params_mut(), &grad, cfg, lr)?;
            epoch_sum += loss;
            epoch_count += 1;
            if recent.len() == 10 {
                recent.pop_front();
            }
            recent.push_back(loss);
        }
        epoch_losses.push(if epoch_count > 0 {
            epoch_sum / epoch_count as f64
        } else {
            f64::NAN
        });
    }
    net.snap_to_f32();
    let final_loss = if recent.is_empty() {
        f64::NAN
    } else {
        recent.iter().sum::<f64>() / recent.len() as f64
    };
    Ok(FractionStats {
        fraction,
        optimizer_steps: step,
        epoch_losses,
        final_loss,
        skipped_items: skipped,
    })
}

/// Trains the network for one fraction (1-based) on the plain denoising
/// objective with `t` uniform over the fraction's steps.
pub fn train_fraction(
    data: &[Sample],
    cfg: &TrainConfig,
    sched: &NoiseSchedule,
    layout: &FractionLayout,
    dcfg: &DenoiserConfig,
    seed: u64,
    fraction: usize,
) -> Result<(DenoiserNet, FractionStats)> {
    check_data(data, dcfg.regions, dcfg.timepoints)?;
    if !(1..=layout.fractions()).contains(&fraction) {
        return Err(Error::InvalidArgument(format!("no fraction {fraction}")));
    }
    let init_seed = dcfg.seed.wrapping_add(fraction as u64);
    let mut net = DenoiserNet::with_init_seed(dcfg, sched.steps(), init_seed)?;
    let (lo, hi) = (layout.end(fraction), layout.start(fraction));
    let (r, l) = (dcfg.regions, dcfg.timepoints);
    let mut rng = fraction_rng(seed, fraction);
    let stats = fit(&mut net, data.len(), cfg, &mut rng, fraction, |idx, rng| {
        let x0 = &data[idx].values;
        let t = rng.random_range(lo..=hi);
        let eps = standard_normal(rng, r, l);
        let x_t = sched.forward_diffuse(x0, t, &eps)?;
        Ok(Some(TrainItem {
            x_t,
            t,
            target: x0.clone(),
        }))
    })?;
    Ok((net, stats))
}

/// Phase-0 prior: every fraction trained independently.
pub fn train_fractions(
    data: &[Sample],
    cfg: &TrainConfig,
    sched: &NoiseSchedule,
    layout: &FractionLayout,
    dcfg: &DenoiserConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    let mut nets = Vec::with_capacity(layout.fractions());
    let mut stats = Vec::with_capacity(layout.fractions());
    for f in 1..=layout.fractions() {
        let (net, s) = train_fraction(data, cfg, sched, layout, dcfg, seed, f)?;
        log::info!("fraction {f}: final loss {:.3e}", s.final_loss);
        nets.push(net);
        stats.push(s);
    }
    let prior = FmdPrior::new(sched.clone(), *layout, nets, 0)?;
    Ok(TrainOutcome { prior, stats })
}

/// Distils the network of one fraction onto a student with twice the stride.
pub fn distill_fraction(
    teacher: &FmdPrior,
    data: &[Sample],
    cfg: &TrainConfig,
    seed: u64,
    fraction: usize,
) -> Result<(DenoiserNet, FractionStats)> {
    let (r, l) = teacher.sample_shape();
    check_data(data, r, l)?;
    let layout = teacher.layout();
    if !(1..=layout.fractions()).contains(&fraction) {
        return Err(Error::InvalidArgument(format!("no fraction {fraction}")));
    }
    let k_o = teacher.step_size();
    let k_d = 2 * k_o;
    if !layout.len().is_multiple_of(k_d) {
        return Err(Error::InvalidArgument(format!(
            "student stride {k_d} does not divide fraction length {}",
            layout.len()
        )));
    }
    let grid: Vec<usize> = (0..layout.len() / k_d)
        .map(|j| layout.start(fraction) - j * k_d)
        .collect();
    let sched = teacher.schedule();
    let mut student = teacher.nets()[fraction - 1].clone_params();
    let mut rng = fraction_rng(seed, fraction);
    let stats = fit(&mut student, data.len(), cfg, &mut rng, fraction, |idx, rng| {
        let x0 = &data[idx].values;
        let t = grid[rng.random_range(0..grid.len())];
        let eps = standard_normal(rng, r, l);
        let x_t = sched.forward_diffuse(x0, t, &eps)?;
        let x_mid = routed_step(teacher, &x_t, t, k_o)?;
        let x_two = routed_step(teacher, &x_mid, t - k_o, k_o)?;
        match inverted_target(sched, &x_t, &x_two, t, k_o) {
            Ok(target) => Ok(Some(TrainItem { x_t, t, target })),
            Err(Error::Degenerate(_)) => Ok(None),
            Err(e) => Err(e),
        }
    })?;
    Ok((student, stats))
}

/// One distillation phase over all fractions; the returned prior samples
/// with twice the stride of `prior`.
pub fn distill_phase(
    prior: &FmdPrior,
    data: &[Sample],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    let mut nets = Vec::with_capacity(prior.nets().len());
    let mut stats = Vec::with_capacity(prior.nets().len());
    for f in 1..=prior.layout().fractions() {
        let (net, s) = distill_fraction(prior, data, cfg, seed, f)?;
        log::info!(
            "phase {} fraction {f}: final loss {:.3e}",
            prior.phase() + 1,
            s.final_loss
        );
        nets.push(net);
        stats.push(s);
    }
    let next = FmdPrior::new(prior.sched.clone(), prior.layout, nets, prior.phase + 1)?;
    Ok(TrainOutcome { prior: next, stats })
}

/// Rollout from pure noise at `t = T`.
pub fn unconditional_sample(prior: &FmdPrior, seed: u64) -> Result<Sample> {
    let (r, l) = prior.sample_shape();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = standard_normal(&mut rng, r, l);
    let out = prior.rollout(&noise, prior.schedule().steps())?;
    Sample::new(format!("uncond-{seed}"), None, out.sample)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::ScheduleKind;
    use ndarray::Array2;

    struct Oracle {
        sched: NoiseSchedule,
        layout: FractionLayout,
        k: usize,
        x0: Mat,
    }

    impl FractionDenoiser for Oracle {
        fn schedule(&self) -> &NoiseSchedule {
            &self.sched
        }
        fn layout(&self) -> &FractionLayout {
            &self.layout
        }
        fn step_size(&self) -> usize {
            self.k
        }
        fn denoise_fraction(&self, f: usize, _x: &Mat, t: usize) -> Result<Mat> {
            assert!(self.layout.contains(f, t));
            Ok(self.x0.clone())
        }
    }

    fn oracle(steps: usize, fractions: usize, k: usize, x0: Mat) -> Oracle {
        Oracle {
            sched: NoiseSchedule::new(steps, ScheduleKind::Cosine).unwrap(),
            layout: FractionLayout::new(steps, fractions).unwrap(),
            k,
            x0,
        }
    }

    #[test]
    fn rollout_with_perfect_denoiser_returns_x0() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x0 = standard_normal(&mut rng, 3, 5);
        let o = oracle(64, 4, 8, x0.clone());
        let eps = standard_normal(&mut rng, 3, 5);
        let x_t = o.sched.forward_diffuse(&x0, 40, &eps).unwrap();
        let out = rollout(&o, &x_t, 40).unwrap();
        assert_eq!(out.calls, 5);
        for (a, b) in out.sample.iter().zip(&x0) {
            assert!((a - b).abs() < 1e-12);
        }
        // one step from t = k lands on the estimate itself
        let one = rollout(&o, &x_t, 8).unwrap();
        assert_eq!(one.calls, 1);
        assert_eq!(one.sample, x0);
    }

    #[test]
    fn rollout_grid_errors() {
        let o = oracle(64, 4, 8, Array2::zeros((1, 1)));
        let x = Array2::zeros((1, 1));
        assert!(rollout(&o, &x, 12).is_err());
        assert!(rollout(&o, &x, 0).is_err());
        assert!(rollout(&o, &x, 72).is_err());
    }

    #[test]
    fn inverted_target_recovers_x0_for_perfect_teacher() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x0 = standard_normal(&mut rng, 2, 4);
        let o = oracle(64, 4, 2, x0.clone());
        let eps = standard_normal(&mut rng, 2, 4);
        for t in [4usize, 16, 30, 64] {
            let x_t = o.sched.forward_diffuse(&x0, t, &eps).unwrap();
            let mid = routed_step(&o, &x_t, t, 2).unwrap();
            let two = routed_step(&o, &mid, t - 2, 2).unwrap();
            let target = inverted_target(&o.sched, &x_t, &two, t, 2).unwrap();
            for (a, b) in target.iter().zip(&x0) {
                assert!((a - b).abs() < 1e-9, "t={t}: {a} vs {b}");
            }
        }
        assert!(inverted_target(&o.sched, &x0, &x0, 3, 2).is_err());
    }

    #[test]
    fn prior_invariants_enforced() {
        let sched = NoiseSchedule::new(64, ScheduleKind::Cosine).unwrap();
        let layout = FractionLayout::new(64, 4).unwrap();
        let net = DenoiserNet::new(&DenoiserConfig::dense(2, 4), 64).unwrap();
        assert!(FmdPrior::new(sched.clone(), layout, vec![net.clone(); 3], 0).is_err());
        assert!(FmdPrior::new(sched.clone(), layout, vec![net.clone(); 4], 5).is_err());
        let p = FmdPrior::new(sched, layout, vec![net; 4], 4).unwrap();
        assert_eq!(p.step_size(), 16);
        let x = Array2::zeros((2, 4));
        assert!(p.denoise_fraction(1, &x, 17).is_err());
        assert!(p.denoise_fraction(2, &x, 17).is_ok());
    }
}
