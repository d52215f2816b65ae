//! Planar-free `H×W×3` images with real-valued pixels.
//!
//! Pixels are stored row-major with interleaved channels (`HWC`), which is
//! also the layout the denoiser consumes. Nominal range is `[-1, 1]`.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

pub const CHANNELS: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, 0.0)
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Image {
            height,
            width,
            data: vec![value; height * width * CHANNELS],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        let expected = height * width * CHANNELS;
        if data.len() != expected {
            return Err(Error::shape(
                format!("{height}x{width}x{CHANNELS} ({expected} values)"),
                format!("{} values", data.len()),
            ));
        }
        Ok(Image {
            height,
            width,
            data,
        })
    }

    /// Standard-normal noise with the given shape.
    pub fn randn<R: Rng + ?Sized>(height: usize, width: usize, rng: &mut R) -> Self {
        let data = (0..height * width * CHANNELS)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        Image {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * CHANNELS + c
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[self.index(y, x, c)]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        let i = self.index(y, x, c);
        self.data[i] = v;
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; CHANNELS] {
        let i = self.index(y, x, 0);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f64; CHANNELS]) {
        let i = self.index(y, x, 0);
        self.data[i..i + CHANNELS].copy_from_slice(&rgb);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_same_shape(&self, other: &Image) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(
                format!("{}x{}x3", self.height, self.width),
                format!("{}x{}x3", other.height, other.width),
            ));
        }
        Ok(())
    }

    /// Mean squared difference over every entry, accumulated in `f64`.
    pub fn mse(&self, other: &Image) -> Result<f64> {
        self.ensure_same_shape(other)?;
        let sum: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        Ok(sum / self.data.len() as f64)
    }

    /// Mean squared difference restricted to pixels where `keep` is true.
    /// Returns 0 when the region is empty.
    pub fn masked_mse(&self, other: &Image, keep: &[bool]) -> Result<f64> {
        self.ensure_same_shape(other)?;
        if keep.len() != self.height * self.width {
            return Err(Error::shape(
                format!("{} mask entries", self.height * self.width),
                format!("{}", keep.len()),
            ));
        }
        let mut sum = 0.0;
        let mut count = 0usize;
        for (p, &k) in keep.iter().enumerate() {
            if !k {
                continue;
            }
            for c in 0..CHANNELS {
                let d = self.data[p * CHANNELS + c] - other.data[p * CHANNELS + c];
                sum += d * d;
            }
            count += CHANNELS;
        }
        Ok(if count == 0 { 0.0 } else { sum / count as f64 })
    }

    pub fn clamp_unit(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(-1.0, 1.0);
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image {
        Image {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// SHA-256 of the little-endian pixel bytes, hex encoded.
    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        hasher.update((self.height as u64).to_le_bytes());
        hasher.update((self.width as u64).to_le_bytes());
        for v in &self.data {
            hasher.update(v.to_le_bytes());
        }
        crate::util::hex(&hasher.finalize())
    }
}
