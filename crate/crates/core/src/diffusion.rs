//! Denoising-diffusion mathematics with x0-parameterized denoisers.
//!
//! Step indices run `1..=T`; `alpha_bar(0) = 1`. Schedule construction,
//! the loss and the guidance combination only need field arithmetic, so
//! they are generic over any [`Num`] type and can be checked in exact
//! rationals. Everything that takes square roots requires [`Scalar`].

use num_traits::Num;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{gaussian_tensor, stream, StreamRng};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn count<T: Num>(n: usize) -> T {
    (0..n).fold(T::zero(), |acc, _| acc + T::one())
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule<T> {
    beta: Vec<T>,
    alpha: Vec<T>,
    alpha_bar: Vec<T>,
}

impl<T: Num + Clone + PartialOrd> NoiseSchedule<T> {
    /// Builds a schedule from explicit `β_1..β_T`, each in `(0, 1)`.
    pub fn from_betas(beta: Vec<T>) -> Result<Self> {
        if beta.is_empty() {
            return Err(Error::range("schedule length", "T must be at least 1"));
        }
        if let Some(t) = beta.iter().position(|b| !(*b > T::zero() && *b < T::one())) {
            return Err(Error::range("beta", format!("beta_{} not in (0, 1)", t + 1)));
        }
        let alpha: Vec<T> = beta.iter().map(|b| T::one() - b.clone()).collect();
        let mut alpha_bar = Vec::with_capacity(beta.len() + 1);
        alpha_bar.push(T::one());
        for a in &alpha {
            let prev = alpha_bar.last().cloned().expect("nonempty");
            alpha_bar.push(prev * a.clone());
        }
        Ok(NoiseSchedule { beta, alpha, alpha_bar })
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    /// `β_t` for `1 <= t <= T`.
    pub fn beta(&self, t: usize) -> T {
        self.beta[t - 1].clone()
    }

    pub fn alpha(&self, t: usize) -> T {
        self.alpha[t - 1].clone()
    }

    /// `ᾱ_t` for `0 <= t <= T`.
    pub fn alpha_bar(&self, t: usize) -> T {
        self.alpha_bar[t].clone()
    }

    fn check_step(&self, t: usize, lo: usize) -> Result<()> {
        if t < lo || t > self.steps() {
            return Err(Error::range("step", format!("{t} not in [{lo}, {}]", self.steps())));
        }
        Ok(())
    }
}

impl<S: Scalar> NoiseSchedule<S> {
    /// `1 − ᾱ_t` without cancellation for tiny `β`.
    pub fn one_minus_alpha_bar(&self, t: usize) -> S {
        -self.beta[..t].iter().map(|&b| (-b).ln_1p()).sum::<S>().exp_m1()
    }
}

/// Linear `β` schedule from `beta_start` to `beta_end` over `t_max` steps.
pub fn make_schedule<T: Num + Clone + PartialOrd>(t_max: usize, beta_start: T, beta_end: T) -> Result<NoiseSchedule<T>> {
    if t_max == 0 {
        return Err(Error::range("schedule length", "T must be at least 1"));
    }
    if !(beta_start > T::zero() && beta_start <= beta_end && beta_end < T::one()) {
        return Err(Error::range("beta bounds", "need 0 < beta_start <= beta_end < 1"));
    }
    let betas = (0..t_max)
        .map(|i| {
            if t_max == 1 {
                beta_start.clone()
            } else {
                beta_start.clone() + (beta_end.clone() - beta_start.clone()) * count::<T>(i) / count::<T>(t_max - 1)
            }
        })
        .collect();
    NoiseSchedule::from_betas(betas)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        // the [1e-4, 0.02] range is calibrated for 1000 steps; scaled by 10 for 100
        ScheduleConfig { steps: 100, beta_start: 1e-3, beta_end: 0.2 }
    }
}

impl ScheduleConfig {
    pub fn build<S: Scalar>(&self) -> Result<NoiseSchedule<S>> {
        make_schedule(self.steps, S::lit(self.beta_start), S::lit(self.beta_end))
    }
}

/// `√ᾱ_t·x0 + √(1−ᾱ_t)·noise`.
pub fn forward_marginal<S: Scalar>(x0: &Tensor<S>, t: usize, schedule: &NoiseSchedule<S>, noise: &Tensor<S>) -> Result<Tensor<S>> {
    schedule.check_step(t, 0)?;
    if t == 0 {
        x0.check_same_shape(noise)?;
        return Ok(x0.clone());
    }
    let (a, b) = (schedule.alpha_bar(t).sqrt(), schedule.one_minus_alpha_bar(t).sqrt());
    x0.zip_map(noise, |&x, &e| a * x + b * e)
}

/// One Markov step `√(1−β)·x_prev + √β·noise` with an explicit `β`.
pub fn chain_step_with_beta<S: Scalar>(x_prev: &Tensor<S>, beta: S, noise: &Tensor<S>) -> Result<Tensor<S>> {
    let (a, b) = ((S::one() - beta).sqrt(), beta.sqrt());
    x_prev.zip_map(noise, |&x, &e| a * x + b * e)
}

pub fn chain_step<S: Scalar>(x_prev: &Tensor<S>, t: usize, schedule: &NoiseSchedule<S>, noise: &Tensor<S>) -> Result<Tensor<S>> {
    schedule.check_step(t, 1)?;
    chain_step_with_beta(x_prev, schedule.beta(t), noise)
}

/// Per-step loss weighting. Only the constant weight exists.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossConfig {
    #[default]
    Unit,
}

impl LossConfig {
    pub fn weight<T: Num>(self, _t: usize) -> T {
        match self {
            LossConfig::Unit => T::one(),
        }
    }
}

/// Weighted mean squared error over all entries.
pub fn diffusion_loss<T: Num + Clone>(prediction: &Tensor<T>, x0: &Tensor<T>, config: LossConfig) -> Result<T> {
    let sq = prediction.zip_map(x0, |p, x| {
        let d = p.clone() - x.clone();
        d.clone() * d
    })?;
    let n = sq.len();
    let sum = sq.into_data().into_iter().fold(T::zero(), |a, b| a + b);
    Ok(config.weight::<T>(0) * sum / count::<T>(n))
}

/// `uncond + w·(cond − uncond)`.
pub fn cfg_combine<T: Num + Clone>(cond: &Tensor<T>, uncond: &Tensor<T>, w: T) -> Result<Tensor<T>> {
    cond.zip_map(uncond, |c, u| u.clone() + w.clone() * (c.clone() - u.clone()))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceMode {
    /// `β̃_t = (1−ᾱ_{t−1})/(1−ᾱ_t)·β_t`.
    #[default]
    FixedSmall,
    /// `β_t`.
    FixedLarge,
}

/// Sampling knobs. The step count is the schedule's `T`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub guidance_weight: f64,
    pub seed: u64,
    #[serde(default)]
    pub variance: VarianceMode,
}

impl SamplerConfig {
    pub fn new(guidance_weight: f64, seed: u64) -> Self {
        SamplerConfig { guidance_weight, seed, variance: VarianceMode::FixedSmall }
    }
}

/// Which conditioning branch a denoiser call evaluates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Conditional,
    Unconditional,
}

/// An x0-predicting denoiser with its condition already bound.
pub trait Denoiser<S> {
    fn predict_x0(&mut self, x_t: &Tensor<S>, t: usize, branch: Branch) -> Result<Tensor<S>>;
}

impl<S, F> Denoiser<S> for F
where
    F: FnMut(&Tensor<S>, usize, Branch) -> Result<Tensor<S>>,
{
    fn predict_x0(&mut self, x_t: &Tensor<S>, t: usize, branch: Branch) -> Result<Tensor<S>> {
        self(x_t, t, branch)
    }
}

/// The `x_T` draw a sampler run with `seed` starts from.
pub fn initial_noise<S: Scalar>(shape: &[usize], seed: u64) -> Tensor<S> {
    gaussian_tensor(shape, &mut stream(seed))
}

/// q-posterior coefficients `(coef_x0, coef_xt, variance)` of `x_{t−1}`.
pub fn posterior_coefficients<S: Scalar>(schedule: &NoiseSchedule<S>, t: usize, mode: VarianceMode) -> (S, S, S) {
    let (ab_prev, beta) = (schedule.alpha_bar(t - 1), schedule.beta(t));
    let denom = schedule.one_minus_alpha_bar(t);
    let rest_prev = schedule.one_minus_alpha_bar(t - 1);
    let coef_x0 = ab_prev.sqrt() * beta / denom;
    let coef_xt = schedule.alpha(t).sqrt() * rest_prev / denom;
    let var = match mode {
        VarianceMode::FixedSmall => rest_prev / denom * beta,
        VarianceMode::FixedLarge => beta,
    };
    (coef_x0, coef_xt, var)
}

fn guided<S: Scalar>(den: &mut impl Denoiser<S>, x: &Tensor<S>, t: usize, w: f64) -> Result<Tensor<S>> {
    let cond = den.predict_x0(x, t, Branch::Conditional)?;
    if !cond.is_finite() {
        return Err(Error::SamplerAbort { step: t });
    }
    // w = 1 is the plain conditional model; the unconditional pass is skipped
    if w == 1.0 {
        return Ok(cond);
    }
    let uncond = den.predict_x0(x, t, Branch::Unconditional)?;
    if !uncond.is_finite() {
        return Err(Error::SamplerAbort { step: t });
    }
    cfg_combine(&cond, &uncond, S::lit(w))
}

/// Ancestral sampling from `x_T ~ N(0, I)` to `x_0`.
///
/// Random draws come from one stream seeded by `config.seed`: first the
/// `x_T` entries, then one noise tensor per step `t = T..2`.
pub fn ddpm_sample<S: Scalar>(
    denoiser: &mut impl Denoiser<S>,
    shape: &[usize],
    schedule: &NoiseSchedule<S>,
    config: &SamplerConfig,
) -> Result<Tensor<S>> {
    if !(config.guidance_weight >= 0.0) {
        return Err(Error::range("guidance weight", config.guidance_weight.to_string()));
    }
    let mut rng: StreamRng = stream(config.seed);
    let mut x: Tensor<S> = gaussian_tensor(shape, &mut rng);
    let one = S::one();
    for t in (1..=schedule.steps()).rev() {
        let x0 = guided(denoiser, &x, t, config.guidance_weight)?.clamp(-one, one);
        let (c0, ct, var) = posterior_coefficients(schedule, t, config.variance);
        let mean = x0.zip_map(&x, |&a, &b| c0 * a + ct * b)?;
        x = if t > 1 {
            let sd = var.sqrt();
            let z: Tensor<S> = gaussian_tensor(shape, &mut rng);
            mean.zip_map(&z, |&m, &e| m + sd * e)?
        } else {
            mean
        };
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::gaussian;
    use num_rational::Ratio;
    use proptest::prelude::*;

    type Q = Ratio<i64>;

    fn q(n: i64, d: i64) -> Q {
        Ratio::new(n, d)
    }

    #[test]
    fn single_step_schedule() {
        let s = make_schedule(1, 0.5f64, 0.5).unwrap();
        assert_eq!(s.alpha_bar(1), 0.5);
        assert_eq!(s.alpha_bar(0), 1.0);
    }

    #[test]
    fn constant_tenth_schedule_is_exact() {
        let s = make_schedule(3, q(1, 10), q(1, 10)).unwrap();
        assert_eq!(s.alpha_bar(3), q(729, 1000));
    }

    #[test]
    fn linear_interpolation_is_exact() {
        let s = make_schedule(5, q(1, 100), q(5, 100)).unwrap();
        for t in 1..=5 {
            assert_eq!(s.beta(t), q(t as i64, 100));
        }
    }

    /// Product of `1 - beta` for a linear schedule, summed in log space.
    fn log_space_alpha_bar(t_max: usize, lo: f64, hi: f64, t: usize) -> f64 {
        (0..t).map(|i| (1.0 - (lo + (hi - lo) * i as f64 / (t_max - 1) as f64)).ln()).sum::<f64>().exp()
    }

    #[test]
    fn hundred_step_schedules_match_independent_product() {
        for (lo, hi) in [(1e-4, 0.02), (1e-3, 0.2)] {
            let s = make_schedule(100, lo, hi).unwrap();
            for t in 1..=100 {
                assert!((s.alpha_bar(t) - log_space_alpha_bar(100, lo, hi, t)).abs() < 1e-13);
                assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            }
        }
        // [1e-4, 0.02] only nearly destroys the signal at 1000 steps
        let narrow = make_schedule(100, 1e-4f64, 0.02).unwrap().alpha_bar(100);
        assert!((narrow - 0.3636).abs() < 1e-3, "{narrow}");
        assert!(make_schedule(1000, 1e-4f64, 0.02).unwrap().alpha_bar(1000) < 0.05);
        let desk: NoiseSchedule<f64> = ScheduleConfig::default().build().unwrap();
        assert_eq!(desk.steps(), 100);
        assert!(desk.alpha_bar(100) < 0.05, "{}", desk.alpha_bar(100));
    }

    #[test]
    fn bad_bounds_are_range_errors() {
        assert!(make_schedule(0, 0.1f64, 0.2).is_err());
        assert!(make_schedule(5, 0.0f64, 0.2).is_err());
        assert!(make_schedule(5, 0.3f64, 0.2).is_err());
        assert!(make_schedule(5, 0.1f64, 1.0).is_err());
    }

    proptest! {
        #[test]
        fn alpha_bar_strictly_decreases(t in 1usize..300, a in 1e-6f64..0.5, span in 0.0f64..0.49) {
            let s = make_schedule(t, a, a + span).unwrap();
            prop_assert_eq!(s.alpha_bar(0), 1.0);
            for i in 0..t {
                prop_assert!(s.alpha_bar(i + 1) < s.alpha_bar(i));
            }
        }

        #[test]
        fn cfg_combine_is_affine_in_w(u in -50i64..50, c in -50i64..50, d in 1i64..20, w in 0i64..40) {
            let ut = Tensor::new(vec![1], vec![q(u, d)]).unwrap();
            let ct = Tensor::new(vec![1], vec![q(c, d)]).unwrap();
            let w = q(w, 4);
            let at0 = cfg_combine(&ct, &ut, q(0, 1)).unwrap().data()[0];
            let at1 = cfg_combine(&ct, &ut, q(1, 1)).unwrap().data()[0];
            let at_w = cfg_combine(&ct, &ut, w).unwrap().data()[0];
            prop_assert_eq!(at_w, at0 + w * (at1 - at0));
        }

        #[test]
        fn loss_is_zero_iff_equal(a in proptest::collection::vec(-20i64..20, 1..10), b in proptest::collection::vec(-20i64..20, 1..10)) {
            let n = a.len().min(b.len());
            let p = Tensor::new(vec![n], a[..n].iter().map(|&v| q(v, 3)).collect()).unwrap();
            let x = Tensor::new(vec![n], b[..n].iter().map(|&v| q(v, 3)).collect()).unwrap();
            let l = diffusion_loss(&p, &x, LossConfig::Unit).unwrap();
            prop_assert!(l >= q(0, 1));
            prop_assert_eq!(l == q(0, 1), p == x);
        }
    }

    #[test]
    fn forward_marginal_at_zero_is_identity() {
        let s = make_schedule(10, 0.01f64, 0.2).unwrap();
        let x = Tensor::new(vec![3], vec![0.3, -0.7, 1.0]).unwrap();
        let e = Tensor::new(vec![3], vec![5.0, 5.0, 5.0]).unwrap();
        assert_eq!(forward_marginal(&x, 0, &s, &e).unwrap(), x);
        assert!(forward_marginal(&x, 11, &s, &e).is_err());
        assert!(forward_marginal(&x, 1, &s, &Tensor::zeros(vec![2])).is_err());
    }

    #[test]
    fn vanishing_betas_preserve_x0() {
        let x = Tensor::new(vec![2], vec![0.25, -0.5]).unwrap();
        let e = Tensor::new(vec![2], vec![1.0, -1.0]).unwrap();
        // the noise coefficient is sqrt(t * beta)
        let s = make_schedule(1, 1e-12f64, 1e-12).unwrap();
        assert!(forward_marginal(&x, 1, &s, &e).unwrap().max_abs_diff(&x).unwrap() <= 1e-6 + 1e-15);
        let s = make_schedule(50, 1e-14f64, 1e-14).unwrap();
        for t in [1, 25, 50] {
            assert!(forward_marginal(&x, t, &s, &e).unwrap().max_abs_diff(&x).unwrap() < 1e-6);
        }
    }

    #[test]
    fn chain_step_arithmetic() {
        let x = Tensor::new(vec![1], vec![1.0f64]).unwrap();
        let e = Tensor::new(vec![1], vec![1.0f64]).unwrap();
        let y = chain_step_with_beta(&x, 0.19, &e).unwrap();
        assert!((y.data()[0] - (0.81f64.sqrt() + 0.19f64.sqrt())).abs() < 1e-15);
        assert!((y.data()[0] - 1.33589).abs() < 1e-5);
        assert_eq!(chain_step_with_beta(&x, 0.0, &Tensor::new(vec![1], vec![3.0]).unwrap()).unwrap(), x);
        let s = make_schedule(4, 0.1f64, 0.1).unwrap();
        assert!(chain_step(&x, 0, &s, &e).is_err());
        assert!(chain_step(&x, 5, &s, &e).is_err());
    }

    #[test]
    fn loss_examples() {
        let x = Tensor::new(vec![4], vec![0.1f64, -0.2, 0.3, 0.9]).unwrap();
        assert_eq!(diffusion_loss(&x, &x, LossConfig::Unit).unwrap(), 0.0);
        let p = x.map(|v| v + 0.1);
        assert!((diffusion_loss(&p, &x, LossConfig::Unit).unwrap() - 0.01).abs() < 1e-15);
        assert!(diffusion_loss(&p, &Tensor::zeros(vec![3]), LossConfig::Unit).is_err());
    }

    #[test]
    fn cfg_examples() {
        let u = Tensor::new(vec![1], vec![0.1f64]).unwrap();
        let c = Tensor::new(vec![1], vec![0.2f64]).unwrap();
        assert!((cfg_combine(&c, &u, 15.0).unwrap().data()[0] - 1.6).abs() < 1e-12);
        assert_eq!(cfg_combine(&c, &u, 0.0).unwrap(), u);
        let exact = cfg_combine(&Tensor::new(vec![1], vec![q(1, 5)]).unwrap(), &Tensor::new(vec![1], vec![q(1, 10)]).unwrap(), q(15, 1)).unwrap();
        assert_eq!(exact.data()[0], q(8, 5));
        assert_eq!(cfg_combine(&Tensor::new(vec![1], vec![q(1, 5)]).unwrap(), &Tensor::new(vec![1], vec![q(1, 10)]).unwrap(), q(1, 1)).unwrap().data()[0], q(1, 5));
    }

    #[test]
    fn identity_denoiser_with_vanishing_betas_returns_clipped_start() {
        let s = make_schedule(20, 1e-14f64, 1e-14).unwrap();
        let shape = [4, 4, 3];
        let cfg = SamplerConfig::new(3.0, 42);
        let mut den = |x: &Tensor<f64>, _t: usize, _b: Branch| Ok(x.clamp(-1.0, 1.0));
        let out = ddpm_sample(&mut den, &shape, &s, &cfg).unwrap();
        let start = initial_noise::<f64>(&shape, 42).clamp(-1.0, 1.0);
        assert!(out.max_abs_diff(&start).unwrap() < 1e-6);
    }

    #[test]
    fn two_step_scalar_recursion_matches_hand_unrolled_oracle() {
        let (b1, b2) = (0.1f64, 0.3f64);
        let s = NoiseSchedule::from_betas(vec![b1, b2]).unwrap();
        let seed = 5;
        let mut den = |_x: &Tensor<f64>, _t: usize, _b: Branch| Ok(Tensor::new(vec![1], vec![0.5]).unwrap());
        let out = ddpm_sample(&mut den, &[1], &s, &SamplerConfig::new(1.0, seed)).unwrap();

        let mut rng = stream(seed);
        let x2: f64 = gaussian(&mut rng);
        let z: f64 = gaussian(&mut rng);
        let (ab1, ab2) = (1.0 - b1, (1.0 - b1) * (1.0 - b2));
        let c = 0.5;
        let mean2 = ab1.sqrt() * b2 / (1.0 - ab2) * c + (1.0 - b2).sqrt() * (1.0 - ab1) / (1.0 - ab2) * x2;
        let var2 = (1.0 - ab1) / (1.0 - ab2) * b2;
        let x1 = mean2 + var2.sqrt() * z;
        let x0 = 1.0 * b1 / (1.0 - ab1) * c + (1.0 - b1).sqrt() * 0.0 / (1.0 - ab1) * x1;
        assert!((out.data()[0] - x0).abs() < 1e-12);
        assert!((out.data()[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn fixed_large_variance_uses_beta() {
        let s = NoiseSchedule::from_betas(vec![0.1f64, 0.3]).unwrap();
        let (_, _, v) = posterior_coefficients(&s, 2, VarianceMode::FixedLarge);
        assert_eq!(v, 0.3);
        let (c0, ct, _) = posterior_coefficients(&s, 1, VarianceMode::FixedSmall);
        assert!((c0 - 1.0).abs() < 1e-15 && ct.abs() < 1e-15);
    }

    #[test]
    fn sampler_is_deterministic_and_aborts_on_nan() {
        let s = make_schedule(10, 1e-3f64, 0.05).unwrap();
        let mut den = |x: &Tensor<f64>, t: usize, b: Branch| {
            let k = if b == Branch::Conditional { 0.5 } else { 0.2 };
            Ok(x.scale(k / t as f64))
        };
        let cfg = SamplerConfig::new(2.0, 9);
        let a = ddpm_sample(&mut den, &[2, 2, 3], &s, &cfg).unwrap();
        let b = ddpm_sample(&mut den, &[2, 2, 3], &s, &cfg).unwrap();
        assert_eq!(a, b);
        let mut bad = |x: &Tensor<f64>, t: usize, _b: Branch| Ok(if t == 7 { x.map(|_| f64::NAN) } else { x.clone() });
        match ddpm_sample(&mut bad, &[2], &s, &cfg) {
            Err(Error::SamplerAbort { step }) => assert_eq!(step, 7),
            other => panic!("{other:?}"),
        }
    }
}
