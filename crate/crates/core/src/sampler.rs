//! Guided sampling from a (fine-tuned) checkpoint.
//!
//! Starts from a noised copy of the base image at `t₀`, runs the generalized
//! ancestral step down the uniform grid with classifier-free guidance and
//! dynamic thresholding, and optionally keeps part of the image pinned to the
//! base through a mask.

use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::image::{Image, CHANNELS};
use crate::schedule::NoiseSchedule;
use crate::text_cond::TokenSeq;
use crate::util::rng_stream;

/// Lower bound on `α_t` when reconstructing `x̂0`; only reached at `t = 1`.
pub const ALPHA_FLOOR: f64 = 1e-3;

/// Per-seed random streams: initial noise, ancestral noise, mask noise.
pub const INIT_STREAM: u64 = 1;
pub const STEP_STREAM: u64 = 2;
pub const MASK_STREAM: u64 = 3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Oscillation {
    Off,
    /// Constant `w` until `switch_fraction·N`, then cycles of `period` steps
    /// whose first step uses `w` and the rest `low`.
    On { period: usize, low: f64, switch_fraction: f64 },
}

impl Oscillation {
    pub fn standard() -> Self {
        Oscillation::On {
            period: 2,
            low: 1.0,
            switch_fraction: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    pub t0: f64,
    pub steps: usize,
    pub cfg_weight: f64,
    pub oscillation: Oscillation,
    pub threshold_p: f64,
    pub eta: f64,
    pub seed: u64,
}

/// Guidance weight used when none is given.
pub const DEFAULT_CFG_WEIGHT: f64 = 3.0;

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            t0: 0.9,
            steps: 64,
            cfg_weight: DEFAULT_CFG_WEIGHT,
            oscillation: Oscillation::Off,
            threshold_p: 99.5,
            eta: 0.0,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    /// High-guidance preset (w = 32, oscillating).
    pub fn preset_high() -> Self {
        SamplerConfig {
            cfg_weight: 32.0,
            oscillation: Oscillation::standard(),
            ..Default::default()
        }
    }

    /// Moderate-guidance preset (w = 7.5).
    pub fn preset_moderate() -> Self {
        SamplerConfig {
            cfg_weight: 7.5,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t0 > 0.0 && self.t0 <= 1.0) {
            return Err(Error::Config(format!("t0 = {} must lie in (0, 1]", self.t0)));
        }
        if self.steps == 0 {
            return Err(Error::Config("sampling needs at least one step".into()));
        }
        if !(self.cfg_weight >= 0.0 && self.cfg_weight.is_finite()) {
            return Err(Error::Config(format!("guidance weight {} must be >= 0", self.cfg_weight)));
        }
        if !(self.threshold_p > 50.0 && self.threshold_p <= 100.0) {
            return Err(Error::Config(format!("threshold percentile {} must lie in (50, 100]", self.threshold_p)));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::Config(format!("eta {} must lie in [0, 1]", self.eta)));
        }
        if let Oscillation::On { period, low, switch_fraction } = self.oscillation {
            if period == 0 || !(0.0..=1.0).contains(&switch_fraction) || !(low >= 0.0 && low.is_finite()) {
                return Err(Error::Config("invalid oscillation settings".into()));
            }
        }
        Ok(())
    }
}

/// Editable-region mask; `true` pixels may change.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    editable: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, editable: Vec<bool>) -> Result<Self> {
        if editable.len() != height * width {
            return Err(Error::shape(format!("{} mask entries", height * width), editable.len().to_string()));
        }
        Ok(Mask { height, width, editable })
    }

    pub fn all(height: usize, width: usize, value: bool) -> Self {
        Mask {
            height,
            width,
            editable: vec![value; height * width],
        }
    }

    /// Editable wherever the image is brighter than mid-grey.
    pub fn from_image(img: &Image) -> Self {
        let editable = img
            .as_slice()
            .chunks_exact(CHANNELS)
            .map(|p| p.iter().sum::<f64>() / CHANNELS as f64 > 0.0)
            .collect();
        Mask {
            height: img.height(),
            width: img.width(),
            editable,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn is_editable(&self, y: usize, x: usize) -> bool {
        self.editable[y * self.width + x]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.editable
    }

    /// Pixels that must stay equal to the base image.
    pub fn keep(&self) -> Vec<bool> {
        self.editable.iter().map(|e| !e).collect()
    }
}

/// `w·ε_cond + (1 − w)·ε_uncond`, which equals `ε_uncond + w·(ε_cond − ε_uncond)`
/// and is exact at `w = 0` and `w = 1`.
pub fn cfg_combine(eps_cond: &Image, eps_uncond: &Image, w: f64) -> Result<Image> {
    eps_cond.ensure_same_shape(eps_uncond)?;
    let data = eps_cond
        .as_slice()
        .iter()
        .zip(eps_uncond.as_slice())
        .map(|(&c, &u)| w * c + (1.0 - w) * u)
        .collect();
    Image::from_vec(eps_cond.height(), eps_cond.width(), data)
}

pub fn guidance_weight_at(i: usize, cfg: &SamplerConfig) -> f64 {
    match cfg.oscillation {
        Oscillation::Off => cfg.cfg_weight,
        Oscillation::On { period, low, switch_fraction } => {
            let start = (switch_fraction * cfg.steps as f64).ceil() as usize;
            if i < start || (i - start) % period.max(1) == 0 {
                cfg.cfg_weight
            } else {
                low
            }
        }
    }
}

/// `p`-th percentile of `values`, linear interpolation between order
/// statistics at rank `p/100·(n−1)`.
pub fn percentile(values: &[f64], p: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = p / 100.0 * (v.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    v[lo] + (rank - lo as f64) * (v[hi] - v[lo])
}

/// Clip to the `p`-th percentile of `|x̂0|` (never below 1) and rescale into
/// `[−1, 1]`.
pub fn dynamic_threshold(x0: &Image, p: f64) -> Image {
    let abs: Vec<f64> = x0.as_slice().iter().map(|v| v.abs()).collect();
    let s = percentile(&abs, p).max(1.0);
    if s == 1.0 {
        return x0.map(|v| v.clamp(-1.0, 1.0));
    }
    x0.map(|v| v.clamp(-s, s) / s)
}

/// Current latent and its time.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentState {
    pub z: Image,
    pub t: f64,
}

/// `z = α_{t₀}·x_b + σ_{t₀}·ε`.
pub fn init_latent(sched: &NoiseSchedule, x_b: &Image, t0: f64, rng: &mut ChaCha8Rng) -> Result<LatentState> {
    if !(t0 > 0.0 && t0 <= 1.0) {
        return Err(Error::Argument(format!("t0 = {t0} must lie in (0, 1]")));
    }
    let eps = Image::randn(x_b.height(), x_b.width(), rng);
    Ok(LatentState {
        z: sched.noise_image(x_b, &eps, t0)?,
        t: t0,
    })
}

/// One generalized ancestral step from `state.t` to `t_next`. `η = 0` is the
/// deterministic step; `η = 1` injects the full posterior noise. When
/// thresholding rescales `x̂₀`, the direction term uses the noise implied by
/// the rescaled estimate, `(z − α·x̂₀)/σ`.
pub fn ancestral_step(
    sched: &NoiseSchedule,
    state: &LatentState,
    eps_hat: &Image,
    t_next: f64,
    eta: f64,
    rng: &mut ChaCha8Rng,
    p: f64,
) -> Result<LatentState> {
    if !(t_next < state.t) {
        return Err(Error::Argument(format!("t_next = {t_next} is not below t = {}", state.t)));
    }
    state.z.ensure_same_shape(eps_hat)?;
    let (a, s) = sched.alpha_sigma(state.t)?;
    let (an, sn) = sched.alpha_sigma(t_next)?;
    let inv = 1.0 / a.max(ALPHA_FLOOR);
    let raw = Image::from_vec(
        state.z.height(),
        state.z.width(),
        state.z.as_slice().iter().zip(eps_hat.as_slice()).map(|(&z, &e)| (z - s * e) * inv).collect(),
    )?;
    let x0 = dynamic_threshold(&raw, p);
    if t_next == 0.0 {
        return Ok(LatentState { z: x0, t: 0.0 });
    }
    let tilde = if s > 0.0 && eta > 0.0 {
        eta * sn / s * (1.0 - (a * a) / (an * an)).max(0.0).sqrt()
    } else {
        0.0
    };
    let dir = (sn * sn - tilde * tilde).max(0.0).sqrt();
    let fresh = (tilde > 0.0).then(|| Image::randn(x0.height(), x0.width(), rng));
    let rescaled = x0 != raw;
    let mut z = Image::zeros(x0.height(), x0.width());
    for (i, v) in z.as_mut_slice().iter_mut().enumerate() {
        let e = if rescaled {
            (state.z.as_slice()[i] - a * x0.as_slice()[i]) / s
        } else {
            eps_hat.as_slice()[i]
        };
        *v = an * x0.as_slice()[i] + dir * e;
        if let Some(f) = &fresh {
            *v += tilde * f.as_slice()[i];
        }
    }
    Ok(LatentState { z, t: t_next })
}

/// Run the full sampler. `x_b` is required when `t₀ < 1` or a mask is given.
pub fn sample(
    ckpt: &Checkpoint,
    cond: &TokenSeq,
    cfg: &SamplerConfig,
    x_b: Option<&Image>,
    mask: Option<&Mask>,
) -> Result<Image> {
    cfg.validate()?;
    let res = ckpt.denoiser.arch().resolution;
    let x_b = match x_b {
        Some(img) => {
            if img.shape() != (res, res) {
                return Err(Error::shape(format!("{res}x{res}x3"), format!("{}x{}x3", img.height(), img.width())));
            }
            Some(img)
        }
        None if cfg.t0 < 1.0 || mask.is_some() => {
            return Err(Error::Argument("a base image is required for t0 < 1 or masked sampling".into()))
        }
        None => None,
    };
    if let Some(m) = mask {
        if m.shape() != (res, res) {
            return Err(Error::shape(format!("{res}x{res} mask"), format!("{}x{} mask", m.height, m.width)));
        }
    }
    let sched = NoiseSchedule::default();
    let grid = sched.discretize(cfg.t0, cfg.steps)?;
    let c = ckpt.embeddings.encode(cond)?;
    let null = ckpt.embeddings.null_condition();
    let zero = Image::zeros(res, res);
    let mut state = init_latent(&sched, x_b.unwrap_or(&zero), cfg.t0, &mut rng_stream(cfg.seed, INIT_STREAM))?;
    let mut step_rng = rng_stream(cfg.seed, STEP_STREAM);
    let mut mask_rng = rng_stream(cfg.seed, MASK_STREAM);
    for (i, (t, t_next)) in grid.transitions().enumerate() {
        let w = guidance_weight_at(i, cfg);
        let eps = if w == 1.0 {
            ckpt.denoiser.predict_eps(&state.z, t, &c)?
        } else {
            let mut out = ckpt.denoiser.predict_batch(&[(&state.z, t, &c), (&state.z, t, &null)])?;
            let u = out.pop().expect("two outputs");
            let e = out.pop().expect("two outputs");
            cfg_combine(&e, &u, w)?
        };
        state = ancestral_step(&sched, &state, &eps, t_next, cfg.eta, &mut step_rng, cfg.threshold_p)?;
        if !state.z.is_finite() {
            return Err(Error::Numeric(format!("non-finite latent at t = {t_next}")));
        }
        if let (Some(m), Some(xb)) = (mask, x_b) {
            replace_kept(&mut state.z, xb, m, &sched, t_next, &mut mask_rng)?;
        }
    }
    Ok(state.z)
}

/// Overwrite the non-editable pixels of `z` with the base image noised to `t`.
fn replace_kept(z: &mut Image, x_b: &Image, mask: &Mask, sched: &NoiseSchedule, t: f64, rng: &mut ChaCha8Rng) -> Result<()> {
    let (a, s) = sched.alpha_sigma(t)?;
    let noise = (t > 0.0).then(|| Image::randn(z.height(), z.width(), rng));
    for (p, &editable) in mask.editable.iter().enumerate() {
        if editable {
            continue;
        }
        for c in 0..CHANNELS {
            let i = p * CHANNELS + c;
            z.as_mut_slice()[i] = match &noise {
                Some(n) => a * x_b.as_slice()[i] + s * n.as_slice()[i],
                None => x_b.as_slice()[i],
            };
        }
    }
    Ok(())
}
