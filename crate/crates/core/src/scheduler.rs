//! Noise schedule, timestep planning and the deterministic DDIM update.

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor4;

pub const DEFAULT_TRAIN_STEPS: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 0.00085;
pub const DEFAULT_BETA_END: f64 = 0.012;

/// Purpose tag for the initial Gaussian latents.
pub const INIT_NOISE_TAG: &str = "init";
/// Purpose tag for the noise that re-noises encoded input at strength < 1.
pub const RENOISE_TAG: &str = "renoise";

/// Cumulative signal retention `alpha_bar[t]` per training timestep.
///
/// The clean boundary (one step before `t = 0`) is not stored; it has
/// `alpha_bar = 1` by definition and is addressed with `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    alpha_bar: Vec<f64>,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        build_schedule(DEFAULT_TRAIN_STEPS, DEFAULT_BETA_START, DEFAULT_BETA_END)
            .expect("default schedule parameters are valid")
    }
}

impl NoiseSchedule {
    pub fn num_train_steps(&self) -> usize {
        self.alpha_bar.len()
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// `alpha_bar` at a training timestep, or 1 at the clean boundary.
    pub fn alpha_bar(&self, t: Option<usize>) -> Result<f64> {
        match t {
            None => Ok(1.0),
            Some(t) => self.alpha_bar.get(t).copied().ok_or_else(|| {
                Error::Parameter(format!(
                    "timestep {t} outside schedule of {} steps",
                    self.alpha_bar.len()
                ))
            }),
        }
    }
}

/// Scaled-linear betas: `beta_t` interpolates linearly in square-root space.
pub fn build_schedule(
    num_train_steps: usize,
    beta_start: f64,
    beta_end: f64,
) -> Result<NoiseSchedule> {
    if num_train_steps == 0 {
        return Err(Error::Parameter("num_train_steps must be positive".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Parameter(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )));
    }
    let (lo, hi) = (beta_start.sqrt(), beta_end.sqrt());
    let denom = num_train_steps.saturating_sub(1).max(1) as f64;
    let mut alpha_bar = Vec::with_capacity(num_train_steps);
    let mut acc = 1.0f64;
    for t in 0..num_train_steps {
        let root = lo + (t as f64 / denom) * (hi - lo);
        acc *= 1.0 - root * root;
        alpha_bar.push(acc);
    }
    Ok(NoiseSchedule { alpha_bar })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimestepPlan {
    inference_steps: usize,
    strength: f64,
    timesteps: Vec<usize>,
}

impl TimestepPlan {
    pub fn inference_steps(&self) -> usize {
        self.inference_steps
    }

    pub fn strength(&self) -> f64 {
        self.strength
    }

    /// Training timesteps, strictly decreasing.
    pub fn timesteps(&self) -> &[usize] {
        &self.timesteps
    }

    pub fn len(&self) -> usize {
        self.timesteps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timesteps.is_empty()
    }

    pub fn first(&self) -> Option<usize> {
        self.timesteps.first().copied()
    }

    /// `(t, t_prev)` pairs in execution order; the last step targets the
    /// clean boundary (`None`).
    pub fn steps(&self) -> impl Iterator<Item = (usize, Option<usize>)> + '_ {
        self.timesteps
            .iter()
            .enumerate()
            .map(|(k, &t)| (t, self.timesteps.get(k + 1).copied()))
    }
}

/// Number of steps kept for `strength`; floor with a small tolerance so that
/// products like `100 * 0.29` land on 29 rather than 28.
pub fn steps_for_strength(inference_steps: usize, strength: f64) -> usize {
    let raw = inference_steps as f64 * strength;
    ((raw + 1e-9).floor() as usize).min(inference_steps)
}

/// Uniform ladder `t_k = ceil((k+1) * train / T) - 1`, descending, keeping the
/// low-noise tail of `floor(T * strength)` entries.
pub fn plan_timesteps(
    schedule: &NoiseSchedule,
    inference_steps: usize,
    strength: f64,
) -> Result<TimestepPlan> {
    let train = schedule.num_train_steps();
    if inference_steps == 0 || inference_steps > train {
        return Err(Error::Parameter(format!(
            "inference steps must be in 1..={train}, got {inference_steps}"
        )));
    }
    if !(0.0..=1.0).contains(&strength) {
        return Err(Error::Parameter(format!(
            "denoising strength must be in [0, 1], got {strength}"
        )));
    }
    let ladder: Vec<usize> = (0..inference_steps)
        .rev()
        .map(|k| ((k + 1) * train).div_ceil(inference_steps) - 1)
        .collect();
    let keep = steps_for_strength(inference_steps, strength);
    Ok(TimestepPlan {
        inference_steps,
        strength,
        timesteps: ladder[inference_steps - keep..].to_vec(),
    })
}

/// Forward noising `sqrt(ab) * x0 + sqrt(1 - ab) * noise`.
pub fn add_noise(
    x0: &Tensor4,
    noise: &Tensor4,
    t: Option<usize>,
    schedule: &NoiseSchedule,
) -> Result<Tensor4> {
    add_noise_with(x0, noise, schedule.alpha_bar(t)?)
}

pub fn add_noise_with(x0: &Tensor4, noise: &Tensor4, alpha_bar: f64) -> Result<Tensor4> {
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    x0.zip_map(noise, "add_noise", |x, n| {
        (a * x as f64 + b * n as f64) as f32
    })
}

/// One deterministic DDIM step from `t` to `t_prev` given predicted noise `e`.
pub fn ddim_step(
    x_t: &Tensor4,
    e: &Tensor4,
    t: usize,
    t_prev: Option<usize>,
    schedule: &NoiseSchedule,
) -> Result<Tensor4> {
    let ab_t = schedule.alpha_bar(Some(t))?;
    let ab_prev = schedule.alpha_bar(t_prev)?;
    ddim_step_with(x_t, e, ab_t, ab_prev)
}

/// DDIM update with explicit cumulative coefficients.
pub fn ddim_step_with(
    x_t: &Tensor4,
    e: &Tensor4,
    alpha_bar_t: f64,
    alpha_bar_prev: f64,
) -> Result<Tensor4> {
    if alpha_bar_t <= 0.0 {
        return Err(Error::Singularity(format!("alpha_bar_t = {alpha_bar_t}")));
    }
    if alpha_bar_prev < alpha_bar_t {
        return Err(Error::Parameter(format!(
            "target alpha_bar {alpha_bar_prev} is noisier than source {alpha_bar_t}"
        )));
    }
    x_t.ensure_same_shape(e, "ddim_step")?;
    if alpha_bar_prev == alpha_bar_t {
        return Ok(x_t.clone());
    }
    let sqrt_t = alpha_bar_t.sqrt();
    let sigma_t = (1.0 - alpha_bar_t).sqrt();
    let sqrt_prev = alpha_bar_prev.sqrt();
    let sigma_prev = (1.0 - alpha_bar_prev).sqrt();
    x_t.zip_map(e, "ddim_step", |x, e| {
        let (x, e) = (x as f64, e as f64);
        let x0 = (x - sigma_t * e) / sqrt_t;
        (sqrt_prev * x0 + sigma_prev * e) as f32
    })
}

/// Per-frame standard normal latents; frame `i` comes from stream
/// `(seed, i, tag)`.
pub fn init_noise_tagged(shape: [usize; 4], rng: &SeededRng, tag: &str) -> Result<Tensor4> {
    let mut t = Tensor4::zeros(shape)?;
    for i in 0..shape[0] {
        rng.stream(i as u64, tag).fill_normal(t.frame_mut(i));
    }
    Ok(t)
}

pub fn init_noise(n: usize, h: usize, w: usize, c: usize, rng: &SeededRng) -> Result<Tensor4> {
    init_noise_tagged([n, h, w, c], rng, INIT_NOISE_TAG)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn scalar(v: f32) -> Tensor4 {
        Tensor4::full([1, 1, 1, 1], v).unwrap()
    }

    #[test]
    fn default_schedule_endpoints() {
        let s = NoiseSchedule::default();
        assert_eq!(s.num_train_steps(), 1000);
        assert!((s.alpha_bars()[0] - 0.99915).abs() < 1e-15);
        // 50-digit product computed independently with mpmath
        let golden_last = 0.004_660_098_513_077_24;
        assert!((s.alpha_bars()[999] - golden_last).abs() < 1e-12);
        assert!(s.alpha_bars()[999] > 0.0 && s.alpha_bars()[999] < 0.05);
        assert!((s.alpha_bars()[499] - 0.277_669_650_456_467_8).abs() < 1e-12);
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
        assert_eq!(s.alpha_bar(None).unwrap(), 1.0);
    }

    #[test]
    fn invalid_betas_rejected() {
        assert!(build_schedule(1000, 0.0, 0.01).is_err());
        assert!(build_schedule(1000, 0.02, 0.01).is_err());
        assert!(build_schedule(1000, 0.001, 1.0).is_err());
        assert!(build_schedule(0, 0.001, 0.01).is_err());
    }

    #[test]
    fn plan_lengths_follow_strength() {
        let s = NoiseSchedule::default();
        let main = plan_timesteps(&s, 10, 1.0).unwrap();
        assert_eq!(
            main.timesteps(),
            &[999, 899, 799, 699, 599, 499, 399, 299, 199, 99]
        );
        assert_eq!(plan_timesteps(&s, 20, 0.9).unwrap().len(), 18);
        assert!(plan_timesteps(&s, 10, 0.0).unwrap().is_empty());
        assert_eq!(steps_for_strength(100, 0.29), 29);
        assert!(plan_timesteps(&s, 0, 1.0).is_err());
        assert!(plan_timesteps(&s, 1001, 1.0).is_err());
        assert!(plan_timesteps(&s, 10, 1.5).is_err());
    }

    #[test]
    fn plan_steps_end_at_boundary() {
        let s = NoiseSchedule::default();
        let plan = plan_timesteps(&s, 3, 1.0).unwrap();
        let steps: Vec<_> = plan.steps().collect();
        assert_eq!(steps, vec![(999, Some(666)), (666, Some(333)), (333, None)]);
    }

    #[test]
    fn add_noise_examples() {
        let s = NoiseSchedule::default();
        let x0 = Tensor4::from_fn([2, 2, 2, 1], |i, y, x, _| (i + y + x) as f32 * 0.3).unwrap();
        let n = x0.map(|v| v - 1.0);
        assert_eq!(add_noise(&x0, &n, None, &s).unwrap(), x0);

        let out = add_noise_with(&scalar(2.0), &scalar(1.0), 0.25).unwrap();
        assert!((out.data()[0] - 1.866_025_4).abs() < 1e-6);

        let zero = x0.map(|_| 0.0);
        let ab = s.alpha_bar(Some(500)).unwrap();
        let scaled = add_noise(&x0, &zero, Some(500), &s).unwrap();
        for (a, b) in scaled.data().iter().zip(x0.data()) {
            assert_eq!(*a, (ab.sqrt() * *b as f64) as f32);
        }
        assert!(add_noise(&x0, &scalar(1.0), Some(1), &s).is_err());
    }

    #[test]
    fn ddim_scalar_golden() {
        let out = ddim_step_with(&scalar(1.0), &scalar(0.6), 0.25, 1.0).unwrap();
        assert!((out.data()[0] - 0.960_769_5).abs() < 1e-6);
    }

    #[test]
    fn ddim_equal_alphas_is_identity() {
        let x =
            Tensor4::from_fn([1, 2, 3, 4], |_, y, x, k| (y * 12 + x * 4 + k) as f32 * 0.1).unwrap();
        let e = x.map(|v| v * -0.5 + 0.2);
        assert_eq!(ddim_step_with(&x, &e, 0.4, 0.4).unwrap(), x);
    }

    #[test]
    fn ddim_rejects_bad_coefficients() {
        assert!(matches!(
            ddim_step_with(&scalar(1.0), &scalar(0.0), 0.0, 1.0),
            Err(Error::Singularity(_))
        ));
        assert!(ddim_step_with(&scalar(1.0), &scalar(0.0), 0.5, 0.4).is_err());
    }

    #[test]
    fn init_noise_is_deterministic_and_per_frame() {
        let a = init_noise(3, 4, 4, 4, &SeededRng::new(9)).unwrap();
        let b = init_noise(3, 4, 4, 4, &SeededRng::new(9)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.frame(0)[..16], a.frame(1)[..16]);
        // frame 1 of a longer video matches frame 1 of a shorter one
        let c = init_noise(2, 4, 4, 4, &SeededRng::new(9)).unwrap();
        assert_eq!(a.frame(1), c.frame(1));
    }

    #[test]
    fn init_noise_moments() {
        let t = init_noise(10, 50, 50, 4, &SeededRng::new(3)).unwrap();
        let n = t.len() as f64;
        let mean = t.data().iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = t
            .data()
            .iter()
            .map(|&v| (v as f64 - mean).powi(2))
            .sum::<f64>()
            / n;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.03, "var {var}");
    }

    fn random_tensor(seed: u64, shape: [usize; 4], tag: &str) -> Tensor4 {
        init_noise_tagged(shape, &SeededRng::new(seed), tag).unwrap()
    }

    #[test]
    fn add_noise_then_ddim_to_boundary_recovers_x0() {
        let s = NoiseSchedule::default();
        let x0 = random_tensor(1, [3, 4, 4, 4], "x0");
        let eps = random_tensor(1, [3, 4, 4, 4], "eps");
        for t in [0, 99, 500, 999] {
            let xt = add_noise(&x0, &eps, Some(t), &s).unwrap();
            let back = ddim_step(&xt, &eps, t, None, &s).unwrap();
            assert!(back.max_abs_diff(&x0).unwrap() < 1e-4, "t={t}");
        }
    }

    proptest! {
        #[test]
        fn perfect_denoiser_substitution(seed in any::<u64>(), steps in 1usize..30, strength in 0.0f64..=1.0) {
            let s = NoiseSchedule::default();
            let plan = plan_timesteps(&s, steps, strength).unwrap();
            let x0 = random_tensor(seed, [2, 3, 3, 4], "x0");
            let eps = random_tensor(seed, [2, 3, 3, 4], "eps");
            for (t, t_prev) in plan.steps() {
                let xt = add_noise(&x0, &eps, Some(t), &s).unwrap();
                let got = ddim_step(&xt, &eps, t, t_prev, &s).unwrap();
                let want = add_noise(&x0, &eps, t_prev, &s).unwrap();
                for (g, w) in got.data().iter().zip(want.data()) {
                    let rel = (g - w).abs() / w.abs().max(1.0);
                    prop_assert!(rel < 1e-5, "t={} g={} w={}", t, g, w);
                }
            }
        }

        #[test]
        fn strength_truncation_is_a_suffix(steps in 1usize..200, strength in 0.0f64..=1.0) {
            let s = NoiseSchedule::default();
            let full = plan_timesteps(&s, steps, 1.0).unwrap();
            let part = plan_timesteps(&s, steps, strength).unwrap();
            prop_assert!(full.timesteps().ends_with(part.timesteps()));
            prop_assert_eq!(part.len(), steps_for_strength(steps, strength));
            prop_assert!(part.timesteps().windows(2).all(|w| w[1] < w[0]));
            prop_assert!(part.timesteps().iter().all(|&t| t < 1000));
        }
    }
}
