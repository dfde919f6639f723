//! Test-time corruption of 8-bit images.
//!
//! Gaussian levels are on the 0–255 intensity scale. By default a level is a
//! variance (`σ = √level`); [`GaussianScale::StdDev`] reads it as `σ` instead.
//! Salt-and-pepper levels are the fraction of pixel positions replaced by pure
//! black or white on every channel.

use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::netpbm::Image8;
use crate::{rng, Error, Result};

pub const GAUSSIAN_LEVELS: [f64; 6] = [0.0, 5.0, 10.0, 15.0, 20.0, 25.0];
pub const SALT_PEPPER_LEVELS: [f64; 6] = [0.0, 0.001, 0.002, 0.003, 0.004, 0.005];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    Gaussian,
    SaltPepper,
}

impl NoiseKind {
    pub fn as_str(self) -> &'static str {
        match self {
            NoiseKind::Gaussian => "gaussian",
            NoiseKind::SaltPepper => "salt_pepper",
        }
    }

    pub fn default_levels(self) -> &'static [f64] {
        match self {
            NoiseKind::Gaussian => &GAUSSIAN_LEVELS,
            NoiseKind::SaltPepper => &SALT_PEPPER_LEVELS,
        }
    }
}

impl fmt::Display for NoiseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for NoiseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(NoiseKind::Gaussian),
            "salt_pepper" | "salt-pepper" => Ok(NoiseKind::SaltPepper),
            other => Err(Error::Usage(format!(
                "unknown noise kind {other:?} (gaussian or salt_pepper)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum GaussianScale {
    #[default]
    Variance,
    StdDev,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub level: f64,
    pub seed: u64,
    pub scale: GaussianScale,
}

impl NoiseSpec {
    pub fn new(kind: NoiseKind, level: f64, seed: u64) -> Result<Self> {
        let spec = Self {
            kind,
            level,
            seed,
            scale: GaussianScale::Variance,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.level.is_finite() || self.level < 0.0 {
            return Err(Error::input(format!(
                "noise level must be finite and ≥ 0, got {}",
                self.level
            )));
        }
        if self.kind == NoiseKind::SaltPepper && self.level > 1.0 {
            return Err(Error::input(format!(
                "salt-and-pepper ratio must be ≤ 1, got {}",
                self.level
            )));
        }
        Ok(())
    }

    pub fn apply(&self, image: &Image8) -> Result<Image8> {
        self.validate()?;
        Ok(match self.kind {
            NoiseKind::Gaussian => add_gaussian_noise(image, self.level, self.seed, self.scale),
            NoiseKind::SaltPepper => add_salt_pepper_noise(image, self.level, self.seed),
        })
    }
}

/// Adds `N(0, σ²)` to every channel of every pixel, clamps to `[0, 255]` and
/// rounds to the nearest integer. Level 0 returns the input unchanged.
pub fn add_gaussian_noise(image: &Image8, level: f64, seed: u64, scale: GaussianScale) -> Image8 {
    if level == 0.0 {
        return image.clone();
    }
    let sigma = match scale {
        GaussianScale::Variance => level.sqrt(),
        GaussianScale::StdDev => level,
    };
    let normal = Normal::new(0.0, sigma).expect("finite nonnegative sigma");
    let mut rng = rng::rng(seed);
    let mut out = image.clone();
    for v in &mut out.data {
        let noisy = *v as f64 + normal.sample(&mut rng);
        *v = noisy.clamp(0.0, 255.0).round() as u8;
    }
    out
}

/// Number of positions corrupted at `ratio`: `round(ratio · pixels)`.
pub fn salt_pepper_count(ratio: f64, pixels: usize) -> usize {
    (ratio * pixels as f64).round() as usize
}

/// Sets [`salt_pepper_count`] distinct pixel positions, sampled without
/// replacement, to 0 or 255 on all channels with probability ½ each.
pub fn add_salt_pepper_noise(image: &Image8, ratio: f64, seed: u64) -> Image8 {
    let pixels = image.pixel_count();
    let count = salt_pepper_count(ratio.clamp(0.0, 1.0), pixels);
    if count == 0 {
        return image.clone();
    }
    let mut rng = rng::rng(seed);
    let mut out = image.clone();
    let c = image.channels;
    for pos in index::sample(&mut rng, pixels, count).into_vec() {
        let value = if rng.random_bool(0.5) { 255 } else { 0 };
        out.data[pos * c..(pos + 1) * c].fill(value);
    }
    out
}
