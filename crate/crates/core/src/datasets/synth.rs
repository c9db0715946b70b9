use std::f32::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::Image;

/// Content family of a synthetic image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Population {
    Flat,
    Texture,
    Edge,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub n_flat: usize,
    pub n_texture: usize,
    #[serde(default)]
    pub n_edge: usize,
    /// Side length of each generated (HR) image.
    #[serde(default = "default_size")]
    pub size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_channels")]
    pub channels: usize,
    /// Standard deviation of per-pixel Gaussian grain added to every image.
    /// Grain finer than the LR grid is lost in downsampling and puts a floor
    /// under the error any branch can reach.
    #[serde(default)]
    pub grain: f32,
}

fn default_size() -> usize {
    192
}
fn default_channels() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthImage {
    pub image: Image,
    pub population: Population,
}

/// Images in population order (flat, texture, edge). Image `i` draws from
/// its own random stream, so the corpus depends only on the spec.
pub fn synth_corpus(spec: &SynthSpec) -> Result<Vec<SynthImage>> {
    let plan = std::iter::repeat(Population::Flat)
        .take(spec.n_flat)
        .chain(std::iter::repeat(Population::Texture).take(spec.n_texture))
        .chain(std::iter::repeat(Population::Edge).take(spec.n_edge));
    plan.enumerate()
        .map(|(i, population)| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(i as u64);
            let image = match population {
                Population::Flat => flat(&mut rng, spec.size, spec.channels),
                Population::Texture => texture(&mut rng, spec.size, spec.channels),
                Population::Edge => edge(&mut rng, spec.size, spec.channels),
            }?;
            let image = add_grain(&image, spec.grain, &mut rng)?;
            Ok(SynthImage { image, population })
        })
        .collect()
}

fn add_grain(img: &Image, sigma: f32, rng: &mut ChaCha8Rng) -> Result<Image> {
    if sigma <= 0.0 {
        return Ok(img.clone());
    }
    let noise = Normal::new(0.0, sigma).map_err(|e| Error::InvalidArgument(format!("grain {sigma}: {e}")))?;
    let data = img.data().iter().map(|v| v + noise.sample(rng)).collect();
    Image::clamped(img.height(), img.width(), img.channels(), data)
}

/// Smooth shading shared by every population: a plane gradient plus one
/// slow wave of at most two cycles per image, per channel.
struct Shading {
    params: Vec<[f32; 6]>,
    theta: f32,
    size: f32,
}

impl Shading {
    fn new(rng: &mut ChaCha8Rng, size: usize, channels: usize) -> Self {
        let params = (0..channels)
            .map(|_| {
                [
                    rng.gen_range(0.35..0.65),
                    rng.gen_range(-0.2..0.2),
                    rng.gen_range(-0.2..0.2),
                    rng.gen_range(0.0..0.08),
                    rng.gen_range(0.2..2.0),
                    rng.gen_range(0.0..2.0 * PI),
                ]
            })
            .collect();
        Shading {
            params,
            theta: rng.gen_range(0.0..PI),
            size: size as f32,
        }
    }

    fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        let [base, gx, gy, amp, freq, phase] = self.params[c];
        let (u, v) = (x as f32 / self.size - 0.5, y as f32 / self.size - 0.5);
        let along = u * self.theta.cos() + v * self.theta.sin();
        base + gx * u + gy * v + amp * (2.0 * PI * freq * along + phase).sin()
    }
}

/// Sum of random plane waves with periods of 10 to 24 pixels, with total
/// amplitude drawn from `amp`.
struct Waves {
    waves: Vec<(f32, f32, f32)>,
    amp: f32,
}

impl Waves {
    const COUNT: usize = 10;

    fn new(rng: &mut ChaCha8Rng, amp: std::ops::Range<f32>) -> Self {
        let waves = (0..Self::COUNT)
            .map(|_| {
                let period: f32 = rng.gen_range(10.0..24.0);
                let angle: f32 = rng.gen_range(0.0..PI);
                let k = 2.0 * PI / period;
                (k * angle.cos(), k * angle.sin(), rng.gen_range(0.0..2.0 * PI))
            })
            .collect();
        let amp = rng.gen_range(amp) / (Self::COUNT as f32).sqrt();
        Waves { waves, amp }
    }

    fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        let v: f32 = self
            .waves
            .iter()
            .enumerate()
            .map(|(i, &(kx, ky, p))| (kx * x as f32 + ky * y as f32 + p + c as f32 * i as f32).sin())
            .sum();
        self.amp * v
    }
}

/// Shading with a faint texture.
fn flat(rng: &mut ChaCha8Rng, size: usize, channels: usize) -> Result<Image> {
    let shading = Shading::new(rng, size, channels);
    let detail = Waves::new(rng, 0.02..0.05);
    Image::from_fn(size, size, channels, |c, y, x| shading.at(c, y, x) + detail.at(c, y, x))
}

/// Shading with a strong texture.
fn texture(rng: &mut ChaCha8Rng, size: usize, channels: usize) -> Result<Image> {
    let shading = Shading::new(rng, size, channels);
    let detail = Waves::new(rng, 0.25..0.4);
    Image::from_fn(size, size, channels, |c, y, x| shading.at(c, y, x) + detail.at(c, y, x))
}

/// Shading offset by either a rotated checkerboard or a stack of
/// flat-shaded triangles.
fn edge(rng: &mut ChaCha8Rng, size: usize, channels: usize) -> Result<Image> {
    let shading = Shading::new(rng, size, channels);
    let s = size as f32;
    if rng.gen_bool(0.5) {
        let cell: f32 = rng.gen_range(10.0..28.0);
        let angle: f32 = rng.gen_range(0.0..PI / 2.0);
        let contrast: f32 = rng.gen_range(0.15..0.3);
        let (ca, sa) = (angle.cos(), angle.sin());
        Image::from_fn(size, size, channels, |c, y, x| {
            let (u, v) = (x as f32 * ca + y as f32 * sa, -(x as f32) * sa + y as f32 * ca);
            let parity = ((u / cell).floor() as i64 + (v / cell).floor() as i64).rem_euclid(2);
            shading.at(c, y, x) + if parity == 0 { -contrast } else { contrast }
        })
    } else {
        let n = rng.gen_range(4..9);
        let tris: Vec<([(f32, f32); 3], f32)> = (0..n)
            .map(|_| {
                let pts = [(); 3].map(|_| (rng.gen_range(-0.2 * s..1.2 * s), rng.gen_range(-0.2 * s..1.2 * s)));
                (pts, rng.gen_range(-0.3..0.3))
            })
            .collect();
        Image::from_fn(size, size, channels, |c, y, x| {
            let p = (x as f32 + 0.5, y as f32 + 0.5);
            let offset = tris.iter().rev().find(|(t, _)| inside(p, t)).map_or(0.0, |(_, v)| *v);
            shading.at(c, y, x) + offset
        })
    }
}

fn inside(p: (f32, f32), t: &[(f32, f32); 3]) -> bool {
    let cross = |a: (f32, f32), b: (f32, f32)| (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0);
    let d = [cross(t[0], t[1]), cross(t[1], t[2]), cross(t[2], t[0])];
    d.iter().all(|v| *v >= 0.0) || d.iter().all(|v| *v <= 0.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(n_flat: usize, n_texture: usize, n_edge: usize) -> SynthSpec {
        SynthSpec {
            n_flat,
            n_texture,
            n_edge,
            size: 64,
            seed: 9,
            channels: 1,
            grain: 0.0,
        }
    }

    #[test]
    fn fixed_seed_is_reproducible() {
        let a = synth_corpus(&spec(2, 2, 2)).unwrap();
        let b = synth_corpus(&spec(2, 2, 2)).unwrap();
        assert_eq!(a, b);
        let other = synth_corpus(&SynthSpec { seed: 10, ..spec(2, 2, 2) }).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn counts_follow_the_spec() {
        let c = synth_corpus(&spec(0, 3, 1)).unwrap();
        assert_eq!(c.len(), 4);
        assert!(c.iter().all(|s| s.population != Population::Flat));
        assert_eq!(c[3].population, Population::Edge);
    }

    #[test]
    fn images_are_distinct_within_a_population() {
        let c = synth_corpus(&spec(2, 2, 0)).unwrap();
        assert_ne!(c[0].image, c[1].image);
        assert_ne!(c[2].image, c[3].image);
    }

    #[test]
    fn grain_adds_zero_mean_noise_of_the_given_size() {
        let clean = synth_corpus(&spec(1, 0, 0)).unwrap();
        let grainy = synth_corpus(&SynthSpec { grain: 0.02, ..spec(1, 0, 0) }).unwrap();
        let diffs: Vec<f64> = clean[0]
            .image
            .data()
            .iter()
            .zip(grainy[0].image.data())
            .map(|(a, b)| (b - a) as f64)
            .collect();
        let n = diffs.len() as f64;
        let mean = diffs.iter().sum::<f64>() / n;
        let std = (diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() < 1e-3, "{mean}");
        assert!((std - 0.02).abs() < 2e-3, "{std}");
    }
}
