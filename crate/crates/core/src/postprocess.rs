//! Pull generated pixels back towards the base image wherever the two agree
//! locally.

use crate::error::{Error, Result};
use crate::image::{Image, CHANNELS};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InterpConfig {
    pub blur_sigma: f64,
    pub tau: f64,
}

impl Default for InterpConfig {
    fn default() -> Self {
        InterpConfig {
            blur_sigma: 2.0,
            tau: 0.05,
        }
    }
}

impl InterpConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.blur_sigma > 0.0 && self.tau > 0.0) {
            return Err(Error::Config(format!(
                "blur sigma ({}) and tau ({}) must be positive",
                self.blur_sigma, self.tau
            )));
        }
        Ok(())
    }
}

/// Single-channel H×W map.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl ScalarMap {
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }
}

/// Per-pixel squared distance summed over channels.
pub fn neighborhood_distance(x_b: &Image, x_gen: &Image) -> Result<ScalarMap> {
    x_b.ensure_same_shape(x_gen)?;
    let data = x_b
        .as_slice()
        .chunks_exact(CHANNELS)
        .zip(x_gen.as_slice().chunks_exact(CHANNELS))
        .map(|(a, b)| a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum())
        .collect();
    Ok(ScalarMap {
        height: x_b.height(),
        width: x_b.width(),
        data,
    })
}

/// Normalized Gaussian taps for offsets `-r..=r`, `r = ceil(3σ)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as i64;
    let taps: Vec<f64> = (-r..=r).map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = taps.iter().sum();
    taps.into_iter().map(|v| v / total).collect()
}

/// Mirror an out-of-range index back into `0..n` without repeating the edge.
fn reflect(i: i64, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as i64 - 1);
    let m = i.rem_euclid(period);
    (if m < n as i64 { m } else { period - m }) as usize
}

/// Separable Gaussian blur with reflect padding.
pub fn gaussian_blur(map: &ScalarMap, sigma: f64) -> ScalarMap {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let (h, w) = (map.height, map.width);
    let mut rows = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            rows[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(j, kv)| kv * map.data[y * w + reflect(x as i64 + j as i64 - r, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(j, kv)| kv * rows[reflect(y as i64 + j as i64 - r, h) * w + x])
                .sum();
        }
    }
    ScalarMap {
        height: h,
        width: w,
        data: out,
    }
}

/// Blend weight towards the base image: `exp(−blur(d)/τ)`.
pub fn agreement_weight(x_b: &Image, x_gen: &Image, cfg: &InterpConfig) -> Result<ScalarMap> {
    cfg.validate()?;
    let mut m = gaussian_blur(&neighborhood_distance(x_b, x_gen)?, cfg.blur_sigma);
    for v in &mut m.data {
        *v = (-*v / cfg.tau).exp();
    }
    Ok(m)
}

/// `m⊙x_b + (1−m)⊙x_gen` with `m` from [`agreement_weight`].
pub fn interpolate(x_b: &Image, x_gen: &Image, cfg: &InterpConfig) -> Result<Image> {
    let m = agreement_weight(x_b, x_gen, cfg)?;
    let mut out = x_gen.clone();
    for (p, (o, b)) in out
        .as_mut_slice()
        .chunks_exact_mut(CHANNELS)
        .zip(x_b.as_slice().chunks_exact(CHANNELS))
        .enumerate()
    {
        let w = m.data[p];
        for (ov, bv) in o.iter_mut().zip(b) {
            *ov = w * bv + (1.0 - w) * *ov;
        }
    }
    Ok(out)
}
