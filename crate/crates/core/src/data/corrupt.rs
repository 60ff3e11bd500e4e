use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const VARIANCE_FLOOR: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntensityRange {
    pub lo: f64,
    pub hi: f64,
}

impl Default for IntensityRange {
    fn default() -> Self {
        IntensityRange { lo: 0.0, hi: 1.0 }
    }
}

/// Strength of the shifted image `x'` mixed into test inputs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorruptionConfig {
    /// Gamma-curve exponents are drawn log-uniformly from this interval.
    pub contrast_range: (f64, f64),
    pub noise_std: f64,
    pub intensity_range: IntensityRange,
}

impl Default for CorruptionConfig {
    fn default() -> Self {
        CorruptionConfig {
            contrast_range: (0.4, 2.5),
            noise_std: 0.2,
            intensity_range: IntensityRange::default(),
        }
    }
}

impl CorruptionConfig {
    pub fn validate(&self) -> Result<()> {
        let (a, b) = self.contrast_range;
        if !(a > 0.0 && a <= b && b.is_finite()) {
            return Err(Error::invalid("contrast_range", format!("({a}, {b}) must be a positive interval")));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::invalid("noise_std", "must be a finite non-negative number"));
        }
        if !(self.intensity_range.lo < self.intensity_range.hi) {
            return Err(Error::invalid("intensity_range", "lo must be below hi"));
        }
        Ok(())
    }
}

/// `γ·x' + (1 − γ)·x`, clipped to the intensity range, where `x'` is a
/// gamma-remapped, noised copy of `x`. Each batch item draws its own exponent.
pub fn ood_corrupt(image: &Tensor<f32>, gamma: f64, config: &CorruptionConfig, seed: u64) -> Result<Tensor<f32>> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::invalid("gamma", format!("{gamma} is outside [0, 1]")));
    }
    config.validate()?;
    if gamma == 0.0 {
        return Ok(image.clone());
    }
    let IntensityRange { lo, hi } = config.intensity_range;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, config.noise_std).expect("validated std");
    let (ga, gb) = config.contrast_range;
    let mut out = image.clone();
    for n in 0..image.batch() {
        let exponent = (rng.gen_range(ga.ln()..=gb.ln())).exp();
        for v in out.item_mut(n) {
            let x = *v as f64;
            let unit = ((x - lo) / (hi - lo)).clamp(0.0, 1.0);
            let shifted = lo + (hi - lo) * unit.powf(exponent) + noise.sample(&mut rng);
            *v = (gamma * shifted + (1.0 - gamma) * x).clamp(lo, hi) as f32;
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormScope {
    PerCase,
    Global,
}

fn moments<'a>(values: impl Iterator<Item = &'a f32>) -> (f64, f64) {
    let (mut n, mut s, mut ss) = (0f64, 0f64, 0f64);
    for &v in values {
        n += 1.0;
        s += v as f64;
        ss += (v as f64) * (v as f64);
    }
    let mean = s / n;
    let var = (ss / n - mean * mean).max(0.0);
    (mean, var.max(VARIANCE_FLOOR).sqrt())
}

/// Zero mean, unit variance per case (each tensor on its own) or over the
/// whole collection.
pub fn normalize(images: &[Tensor<f32>], scope: NormScope) -> Vec<Tensor<f32>> {
    match scope {
        NormScope::PerCase => images
            .iter()
            .map(|t| {
                let (m, s) = moments(t.data().iter());
                t.map(|v| ((v as f64 - m) / s) as f32)
            })
            .collect(),
        NormScope::Global => {
            let (m, s) = moments(images.iter().flat_map(|t| t.data().iter()));
            images.iter().map(|t| t.map(|v| ((v as f64 - m) / s) as f32)).collect()
        }
    }
}
