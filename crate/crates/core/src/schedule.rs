//! Continuous-time variance-preserving noise schedule.
//!
//! `α(t) = cos(πt/2)`, `σ(t) = sin(πt/2)` for `t ∈ [0, 1]`. The forward
//! process is `z_t = α(t)·x + σ(t)·ε`.

use std::f64::consts::FRAC_PI_2;

use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    Cosine,
}

/// Noise schedule plus the range training times are drawn from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSchedule {
    pub kind: ScheduleKind,
    pub t_min: f64,
    pub t_max: f64,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        NoiseSchedule {
            kind: ScheduleKind::Cosine,
            t_min: 0.001,
            t_max: 1.0,
        }
    }
}

impl NoiseSchedule {
    pub fn new(t_min: f64, t_max: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&t_min) || !(t_max > t_min && t_max <= 1.0) {
            return Err(Error::Config(format!(
                "schedule range must satisfy 0 <= t_min < t_max <= 1, got [{t_min}, {t_max}]"
            )));
        }
        Ok(NoiseSchedule {
            kind: ScheduleKind::Cosine,
            t_min,
            t_max,
        })
    }

    /// `(α(t), σ(t))`. Endpoints are exact.
    pub fn alpha_sigma(&self, t: f64) -> Result<(f64, f64)> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Domain(format!("t = {t} is outside [0, 1]")));
        }
        Ok(match self.kind {
            ScheduleKind::Cosine => {
                if t == 0.0 {
                    (1.0, 0.0)
                } else if t == 1.0 {
                    (0.0, 1.0)
                } else {
                    let a = FRAC_PI_2 * t;
                    (a.cos(), a.sin())
                }
            }
        })
    }

    /// Forward process `α_t·x + σ_t·ε`.
    pub fn noise_image(&self, x: &Image, eps: &Image, t: f64) -> Result<Image> {
        x.ensure_same_shape(eps)?;
        let (alpha, sigma) = self.alpha_sigma(t)?;
        let data = x
            .as_slice()
            .iter()
            .zip(eps.as_slice())
            .map(|(&xv, &ev)| alpha * xv + sigma * ev)
            .collect();
        Image::from_vec(x.height(), x.width(), data)
    }

    /// Uniform descending grid `t₀·(N−i)/N`, `i = 0..=N`.
    pub fn discretize(&self, t0: f64, steps: usize) -> Result<StepGrid> {
        if steps == 0 {
            return Err(Error::Argument("step count must be at least 1".into()));
        }
        if !(t0 > 0.0 && t0 <= 1.0) {
            return Err(Error::Argument(format!("t0 = {t0} must lie in (0, 1]")));
        }
        let n = steps as f64;
        let times = (0..=steps)
            .map(|i| {
                if i == 0 {
                    t0
                } else {
                    t0 * (steps - i) as f64 / n
                }
            })
            .collect();
        Ok(StepGrid { times })
    }

    /// Map a unit-interval draw onto `[t_min, t_max]`.
    pub fn training_time(&self, u: f64) -> f64 {
        self.t_min + (self.t_max - self.t_min) * u
    }
}

/// Strictly decreasing sampling times ending at exactly 0.
#[derive(Debug, Clone, PartialEq)]
pub struct StepGrid {
    times: Vec<f64>,
}

impl StepGrid {
    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn start(&self) -> f64 {
        self.times[0]
    }

    /// Number of transitions (`times.len() - 1`).
    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    /// `(t, t_next)` pairs in sampling order.
    pub fn transitions(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.times.windows(2).map(|w| (w[0], w[1]))
    }
}

/// Simplified denoising objective: `w_t · mean((ε̂ − ε)²)` with `w_t = 1`.
pub fn denoising_loss(eps_hat: &Image, eps: &Image, _t: f64) -> Result<f64> {
    eps_hat.mse(eps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::rng_stream;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn sched() -> NoiseSchedule {
        NoiseSchedule::default()
    }

    #[test]
    fn endpoints_are_exact() {
        assert_eq!(sched().alpha_sigma(0.0).unwrap(), (1.0, 0.0));
        assert_eq!(sched().alpha_sigma(1.0).unwrap(), (0.0, 1.0));
        let (a, s) = sched().alpha_sigma(0.5).unwrap();
        assert_abs_diff_eq!(a, std::f64::consts::FRAC_1_SQRT_2, epsilon = 1e-15);
        assert_abs_diff_eq!(s, std::f64::consts::FRAC_1_SQRT_2, epsilon = 1e-15);
    }

    #[test]
    fn out_of_range_time_is_a_domain_error() {
        assert!(matches!(sched().alpha_sigma(-0.1), Err(Error::Domain(_))));
        assert!(matches!(sched().alpha_sigma(1.0001), Err(Error::Domain(_))));
        assert!(matches!(sched().alpha_sigma(f64::NAN), Err(Error::Domain(_))));
    }

    #[test]
    fn variance_preserving_and_monotone_on_dense_grid() {
        let s = sched();
        let mut prev = s.alpha_sigma(0.0).unwrap();
        for i in 1..1000 {
            let t = i as f64 / 999.0;
            let (a, sg) = s.alpha_sigma(t).unwrap();
            assert!((a * a + sg * sg - 1.0).abs() < 1e-12);
            assert!(a < prev.0 && sg > prev.1, "not monotone at t={t}");
            prev = (a, sg);
        }
    }

    #[test]
    fn noise_image_special_cases() {
        let mut rng = rng_stream(1, 0);
        let x = Image::randn(4, 5, &mut rng);
        let eps = Image::randn(4, 5, &mut rng);
        let zero = Image::zeros(4, 5);
        let (a, _) = sched().alpha_sigma(0.3).unwrap();
        assert_eq!(sched().noise_image(&x, &zero, 0.3).unwrap(), x.map(|v| a * v));
        assert_eq!(sched().noise_image(&x, &eps, 1.0).unwrap(), eps);
        assert!(matches!(
            sched().noise_image(&x, &Image::zeros(5, 4), 0.5),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn noise_image_moments_match_forward_process() {
        // Monte Carlo over 10,000 draws at t = 0.5.
        let s = sched();
        let mut rng = rng_stream(7, 0);
        let x = Image::randn(2, 2, &mut rng).map(|v| v.clamp(-1.0, 1.0));
        let (alpha, sigma) = s.alpha_sigma(0.5).unwrap();
        let n = 10_000;
        let len = x.as_slice().len();
        let mut sum = vec![0.0; len];
        let mut sq = vec![0.0; len];
        for _ in 0..n {
            let eps = Image::randn(2, 2, &mut rng);
            let z = s.noise_image(&x, &eps, 0.5).unwrap();
            for (i, &v) in z.as_slice().iter().enumerate() {
                sum[i] += v;
                sq[i] += v * v;
            }
        }
        let se = sigma / (n as f64).sqrt();
        for i in 0..len {
            let mean = sum[i] / n as f64;
            let var = (sq[i] - n as f64 * mean * mean) / (n - 1) as f64;
            assert!((mean - alpha * x.as_slice()[i]).abs() < 4.0 * se);
            assert!((var / (sigma * sigma) - 1.0).abs() < 0.05);
        }
    }

    #[test]
    fn loss_examples() {
        let mut rng = rng_stream(3, 0);
        let eps = Image::randn(3, 3, &mut rng);
        assert_eq!(denoising_loss(&eps, &eps, 0.4).unwrap(), 0.0);
        let shifted = eps.map(|v| v + 1.0);
        assert_abs_diff_eq!(denoising_loss(&shifted, &eps, 0.4).unwrap(), 1.0, epsilon = 1e-12);

        let other = Image::randn(3, 3, &mut rng);
        let mut brute = 0.0;
        let mut count = 0;
        for y in 0..3 {
            for x in 0..3 {
                for c in 0..3 {
                    let d = other.get(y, x, c) - eps.get(y, x, c);
                    brute += d * d;
                    count += 1;
                }
            }
        }
        assert_abs_diff_eq!(
            denoising_loss(&other, &eps, 0.9).unwrap(),
            brute / count as f64,
            epsilon = 1e-14
        );
        assert!(denoising_loss(&other, &Image::zeros(2, 3), 0.1).is_err());
    }

    #[test]
    fn discretize_examples() {
        let s = sched();
        assert_eq!(
            s.discretize(1.0, 4).unwrap().times(),
            &[1.0, 0.75, 0.5, 0.25, 0.0]
        );
        assert_eq!(s.discretize(0.9, 1).unwrap().times(), &[0.9, 0.0]);
        let g = s.discretize(0.8, 256).unwrap();
        assert_eq!(g.times().len(), 257);
        assert_eq!(g.start(), 0.8);
        assert_eq!(*g.times().last().unwrap(), 0.0);
        assert!(g.times().windows(2).all(|w| w[0] > w[1]));
        assert!(matches!(s.discretize(0.5, 0), Err(Error::Argument(_))));
        assert!(s.discretize(0.0, 4).is_err());
    }

    proptest! {
        #[test]
        fn noise_image_is_linear(seed in 0u64..1000, a in -2.0f64..2.0, b in -2.0f64..2.0, t in 0.0f64..=1.0) {
            let s = sched();
            let mut rng = rng_stream(seed, 0);
            let x1 = Image::randn(3, 2, &mut rng);
            let x2 = Image::randn(3, 2, &mut rng);
            let e1 = Image::randn(3, 2, &mut rng);
            let e2 = Image::randn(3, 2, &mut rng);
            let combine = |p: &Image, q: &Image| {
                Image::from_vec(3, 2, p.as_slice().iter().zip(q.as_slice()).map(|(u, v)| a * u + b * v).collect()).unwrap()
            };
            let lhs = s.noise_image(&combine(&x1, &x2), &combine(&e1, &e2), t).unwrap();
            let z1 = s.noise_image(&x1, &e1, t).unwrap();
            let z2 = s.noise_image(&x2, &e2, t).unwrap();
            let rhs = combine(&z1, &z2);
            for (l, r) in lhs.as_slice().iter().zip(rhs.as_slice()) {
                prop_assert!((l - r).abs() < 1e-12);
            }
        }

        #[test]
        fn loss_is_symmetric_and_nonnegative(seed in 0u64..1000) {
            let mut rng = rng_stream(seed, 1);
            let a = Image::randn(2, 2, &mut rng);
            let b = Image::randn(2, 2, &mut rng);
            let ab = denoising_loss(&a, &b, 0.5).unwrap();
            prop_assert_eq!(ab, denoising_loss(&b, &a, 0.5).unwrap());
            prop_assert!(ab > 0.0);
        }
    }
}
