use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::Sample;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MIN_FG_FRACTION: f64 = 0.02;
pub const MAX_FG_FRACTION: f64 = 0.6;
const MAX_ATTEMPTS: usize = 100;
const MAX_SHAPES: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Ellipse,
    Rectangle,
    Blob,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    /// `[H, W]` or `[D, H, W]`.
    pub image_size: Vec<usize>,
    pub num_images: usize,
    pub shapes: Vec<ShapeKind>,
    pub fg_intensity_range: (f64, f64),
    pub bg_intensity_range: (f64, f64),
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            image_size: vec![32, 32],
            num_images: 108,
            shapes: vec![ShapeKind::Ellipse, ShapeKind::Rectangle, ShapeKind::Blob],
            fg_intensity_range: (0.5, 0.9),
            bg_intensity_range: (0.1, 0.55),
            noise_std: 0.15,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn spatial(&self) -> Result<[usize; 3]> {
        match self.image_size[..] {
            [h, w] => Ok([1, h, w]),
            [d, h, w] => Ok([d, h, w]),
            _ => Err(Error::invalid("image_size", "expected 2 or 3 spatial dims")),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sp = self.spatial()?;
        if sp.contains(&0) {
            return Err(Error::invalid("image_size", "dimensions must be positive"));
        }
        if self.num_images == 0 {
            return Err(Error::invalid("num_images", "must be positive"));
        }
        if self.shapes.is_empty() {
            return Err(Error::invalid("shapes", "at least one shape kind is required"));
        }
        for (name, (lo, hi)) in [
            ("fg_intensity_range", self.fg_intensity_range),
            ("bg_intensity_range", self.bg_intensity_range),
        ] {
            if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
                return Err(Error::invalid(name, format!("[{lo}, {hi}] is not an interval inside [0, 1]")));
            }
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::invalid("noise_std", "must be a finite non-negative number"));
        }
        Ok(())
    }
}

// Shapes live in normalised coordinates: each axis maps to [0, 1].
struct Placed {
    kind: ShapeKind,
    center: [f64; 3],
    radii: [f64; 3],
    angle: f64,
    lobes: Vec<([f64; 3], f64)>,
    intensity: f64,
}

impl Placed {
    fn contains(&self, p: [f64; 3], volumetric: bool) -> bool {
        let d = [p[0] - self.center[0], p[1] - self.center[1], p[2] - self.center[2]];
        let (c, s) = (self.angle.cos(), self.angle.sin());
        let (ry, rx) = (c * d[1] + s * d[2], -s * d[1] + c * d[2]);
        let rz = if volumetric { d[0] / self.radii[0] } else { 0.0 };
        match self.kind {
            ShapeKind::Ellipse => rz * rz + (ry / self.radii[1]).powi(2) + (rx / self.radii[2]).powi(2) <= 1.0,
            ShapeKind::Rectangle => rz.abs() <= 1.0 && ry.abs() <= self.radii[1] && rx.abs() <= self.radii[2],
            ShapeKind::Blob => self.lobes.iter().any(|(o, r)| {
                let z = if volumetric { d[0] - o[0] } else { 0.0 };
                z * z + (d[1] - o[1]).powi(2) + (d[2] - o[2]).powi(2) <= r * r
            }),
        }
    }
}

fn place(rng: &mut ChaCha8Rng, spec: &SyntheticSpec) -> Placed {
    let kind = spec.shapes[rng.gen_range(0..spec.shapes.len())];
    let center = [rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8)];
    let radii = [rng.gen_range(0.08..0.25), rng.gen_range(0.08..0.25), rng.gen_range(0.08..0.25)];
    let lobes = if kind == ShapeKind::Blob {
        (0..rng.gen_range(2..=4))
            .map(|_| {
                let o = [rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1)];
                (o, rng.gen_range(0.06..0.14))
            })
            .collect()
    } else {
        Vec::new()
    };
    let (lo, hi) = spec.fg_intensity_range;
    Placed {
        kind,
        center,
        radii,
        angle: rng.gen_range(0.0..std::f64::consts::PI),
        lobes,
        intensity: lo + (hi - lo) * rng.gen::<f64>(),
    }
}

/// Smooth field in [0, 1] built from two random plane waves.
fn background_field(rng: &mut ChaCha8Rng) -> impl Fn([f64; 3]) -> f64 {
    let waves: Vec<([f64; 3], f64)> = (0..2)
        .map(|_| {
            let k = [rng.gen_range(-6.0..6.0), rng.gen_range(-6.0..6.0), rng.gen_range(-6.0..6.0)];
            (k, rng.gen_range(0.0..std::f64::consts::TAU))
        })
        .collect();
    move |p| {
        let s: f64 = waves.iter().map(|(k, ph)| (k[0] * p[0] + k[1] * p[1] + k[2] * p[2] + ph).sin()).sum();
        0.5 + 0.25 * s
    }
}

fn render_one(spec: &SyntheticSpec, index: usize) -> Result<Sample> {
    let [d, h, w] = spec.spatial()?;
    let volumetric = spec.image_size.len() == 3;
    let n = d * h * w;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);
    let coord = |i: usize, len: usize| if len == 1 { 0.5 } else { (i as f64 + 0.5) / len as f64 };

    for _ in 0..MAX_ATTEMPTS {
        let shapes: Vec<Placed> = (0..rng.gen_range(1..=MAX_SHAPES)).map(|_| place(&mut rng, spec)).collect();
        let field = background_field(&mut rng);
        let (blo, bhi) = spec.bg_intensity_range;
        let mut image = vec![0f32; n];
        let mut mask = vec![0f32; n];
        let mut fg = 0usize;
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let p = [coord(z, d), coord(y, h), coord(x, w)];
                    let i = (z * h + y) * w + x;
                    // Later shapes paint over earlier ones.
                    match shapes.iter().rev().find(|s| s.contains(p, volumetric)) {
                        Some(s) => {
                            image[i] = s.intensity as f32;
                            mask[i] = 1.0;
                            fg += 1;
                        }
                        None => image[i] = (blo + (bhi - blo) * field(p)) as f32,
                    }
                }
            }
        }
        let frac = fg as f64 / n as f64;
        if !(MIN_FG_FRACTION..=MAX_FG_FRACTION).contains(&frac) {
            continue;
        }
        if spec.noise_std > 0.0 {
            let noise = Normal::new(0.0, spec.noise_std).expect("validated std");
            for v in &mut image {
                *v = (*v + noise.sample(&mut rng) as f32).clamp(0.0, 1.0);
            }
        }
        return Ok(Sample {
            id: index,
            image: Tensor::from_vec([1, 1, d, h, w], image)?,
            mask: Some(Tensor::from_vec([1, 1, d, h, w], mask)?),
        });
    }
    Err(Error::InsufficientData(format!(
        "image {index}: foreground fraction outside [{MIN_FG_FRACTION}, {MAX_FG_FRACTION}] after {MAX_ATTEMPTS} attempts"
    )))
}

/// Renders `num_images` shape images with intensities in `[0, 1]`. Image `i` depends only on the seed
/// and `i`, so growing the dataset keeps the existing images.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Vec<Sample>> {
    spec.validate()?;
    (0..spec.num_images).map(|i| render_one(spec, i)).collect()
}
