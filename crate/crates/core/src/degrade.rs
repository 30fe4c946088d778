//! Synthetic degradations, procedural textures and training crops.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::imageio::load_image;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Degradation {
    /// Additive zero-mean Gaussian noise, clamped to `[0,1]`.
    GaussianNoise { sigma: f32 },
    /// `I^gamma`; `gamma > 1` darkens.
    GammaDarken { gamma: f32 },
    /// `I*t + A*(1-t)` with uniform transmission `t` and airlight `A`.
    Haze { t: f32, airlight: f32 },
}

impl Degradation {
    pub fn name(&self) -> &'static str {
        match self {
            Degradation::GaussianNoise { .. } => "gaussian_noise",
            Degradation::GammaDarken { .. } => "gamma_darken",
            Degradation::Haze { .. } => "haze",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Degradation::GaussianNoise { sigma } if !(sigma >= 0.0) => {
                Err(Error::Config(format!("noise_sigma must be nonnegative, got {sigma}")))
            }
            Degradation::GammaDarken { gamma } if !(gamma > 0.0) => {
                Err(Error::Config(format!("gamma must be positive, got {gamma}")))
            }
            Degradation::Haze { t, airlight } if !(0.0..=1.0).contains(&t) || !(0.0..=1.0).contains(&airlight) => {
                Err(Error::Config(format!("haze_t and haze_a must lie in [0,1], got {t} and {airlight}")))
            }
            _ => Ok(()),
        }
    }

    /// Degrades `clean`; the result depends only on `clean`, the parameters and `seed`.
    pub fn apply(&self, clean: &Tensor, seed: u64) -> Tensor {
        match *self {
            Degradation::GaussianNoise { sigma } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let normal = Normal::new(0.0f32, sigma.max(0.0)).expect("finite sigma");
                let mut out = clean.clone();
                for v in out.data_mut() {
                    *v = (*v + normal.sample(&mut rng)).clamp(0.0, 1.0);
                }
                out
            }
            Degradation::GammaDarken { gamma } => clean.map(|v| v.clamp(0.0, 1.0).powf(gamma)),
            Degradation::Haze { t, airlight } => clean.map(|v| v * t + airlight * (1.0 - t)),
        }
    }
}

/// Smooth multi-component texture `[1,3,h,w]` in `[0,1]`: oriented sinusoids, soft discs and one edge.
pub fn procedural_texture<R: Rng + ?Sized>(h: usize, w: usize, rng: &mut R) -> Tensor {
    let mut img = Tensor::zeros([1, 3, h, w]);
    let base: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.25..0.75));
    for (c, &b) in base.iter().enumerate() {
        img.plane_mut(0, c).fill(b);
    }
    let add = |img: &mut Tensor, gains: [f32; 3], f: &dyn Fn(f32, f32) -> f32| {
        for (c, &g) in gains.iter().enumerate() {
            let plane = img.plane_mut(0, c);
            for y in 0..h {
                for x in 0..w {
                    plane[y * w + x] += g * f(y as f32, x as f32);
                }
            }
        }
    };
    for _ in 0..3 {
        let freq = rng.random_range(0.02f32..0.15) * std::f32::consts::TAU;
        let theta = rng.random_range(0.0f32..std::f32::consts::PI);
        let phase = rng.random_range(0.0f32..std::f32::consts::TAU);
        let amp = rng.random_range(0.04f32..0.15);
        let gains = std::array::from_fn(|_| amp * rng.random_range(0.5f32..1.0));
        let (s, co) = theta.sin_cos();
        add(&mut img, gains, &|y, x| (freq * (x * co + y * s) + phase).sin());
    }
    for _ in 0..2 {
        let cy = rng.random_range(0.0..h as f32);
        let cx = rng.random_range(0.0..w as f32);
        let r = rng.random_range(0.1f32..0.4) * h.min(w) as f32 + 1.0;
        let gains = std::array::from_fn(|_| rng.random_range(-0.2f32..0.2));
        add(&mut img, gains, &|y, x| {
            let d = ((y - cy).powi(2) + (x - cx).powi(2)).sqrt();
            1.0 / (1.0 + ((d - r) / 1.5).exp())
        });
    }
    let theta = rng.random_range(0.0f32..std::f32::consts::TAU);
    let offset = rng.random_range(-0.3f32..0.3) * h.min(w) as f32;
    let (cy, cx) = (h as f32 / 2.0, w as f32 / 2.0);
    let (s, co) = theta.sin_cos();
    let gains = std::array::from_fn(|_| rng.random_range(-0.15f32..0.15));
    add(&mut img, gains, &|y, x| if (x - cx) * co + (y - cy) * s > offset { 1.0 } else { 0.0 });
    for v in img.data_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    img
}

/// Source of clean training crops.
#[derive(Clone, Debug)]
pub enum Dataset {
    Procedural,
    Images(Vec<Tensor>),
}

impl Dataset {
    /// Loads every `.png` / `.ppm` file in `dir` (sorted by name).
    pub fn from_dir(dir: impl AsRef<Path>, crop: usize) -> Result<Self> {
        let dir = dir.as_ref();
        let mut paths: Vec<_> = std::fs::read_dir(dir)
            .map_err(|e| Error::Data(format!("cannot read data directory {}: {e}", dir.display())))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| e.eq_ignore_ascii_case("png") || e.eq_ignore_ascii_case("ppm"))
            })
            .collect();
        paths.sort();
        if paths.is_empty() {
            return Err(Error::Data(format!("no PNG or PPM images in {}", dir.display())));
        }
        let images = paths
            .iter()
            .map(|p| {
                let img = load_image(p)?;
                let (_, _, h, w) = img.dims();
                if h < crop || w < crop {
                    return Err(Error::Data(format!("{} is {h}x{w}, smaller than the {crop}x{crop} crop", p.display())));
                }
                Ok(img)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset::Images(images))
    }

    /// A batch of random crops with random horizontal and vertical flips.
    pub fn sample<R: Rng + ?Sized>(&self, batch: usize, crop: usize, rng: &mut R) -> Tensor {
        let mut out = Tensor::zeros([batch, 3, crop, crop]);
        for b in 0..batch {
            let src = match self {
                Dataset::Procedural => procedural_texture(crop, crop, rng),
                Dataset::Images(images) => {
                    let img = &images[rng.random_range(0..images.len())];
                    let (_, _, h, w) = img.dims();
                    let oy = rng.random_range(0..=h - crop);
                    let ox = rng.random_range(0..=w - crop);
                    Tensor::from_fn([1, 3, crop, crop], |_, c, y, x| img.at(0, c, oy + y, ox + x))
                }
            };
            let flip_h = rng.random_bool(0.5);
            let flip_v = rng.random_bool(0.5);
            for c in 0..3 {
                for y in 0..crop {
                    for x in 0..crop {
                        let sy = if flip_v { crop - 1 - y } else { y };
                        let sx = if flip_h { crop - 1 - x } else { x };
                        out.set(b, c, y, x, src.at(0, c, sy, sx));
                    }
                }
            }
        }
        out
    }
}
