//! Procedural texture classes standing in for fabric tactile captures.

use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{CONTACT_BASE, DOME_AMP, NOISE_SIGMA, TEXTURE_AMP};
use crate::error::{Error, Result};
use crate::image::TactileImage;
use crate::seed;

/// Closed sampling range `[lo, hi]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub lo: f64,
    pub hi: f64,
}

impl Range {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        if self.hi > self.lo {
            rng.random_range(self.lo..=self.hi)
        } else {
            self.lo
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Generator {
    /// Sinusoidal stripes; `angle` in degrees.
    Stripes { period: Range, angle: Range },
    /// Gaussian bumps on a square lattice.
    Dots { spacing: Range, radius: Range },
    /// Product of two orthogonal sinusoids (a checker-like weave).
    Weave { period: Range },
    /// Rectified stripes whose centre line wiggles sinusoidally.
    Ridges { period: Range, wiggle: Range, wiggle_period: Range },
    /// Smoothly interpolated lattice noise.
    NoiseBlend { scale: Range },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextureClass {
    pub class_id: usize,
    pub name: String,
    pub generator: Generator,
}

/// The ten built-in classes; `k` of them are used, `k ≤ 10`.
pub fn default_classes(k: usize) -> Result<Vec<TextureClass>> {
    use Generator::*;
    let all = [
        ("stripes_coarse_h", Stripes { period: Range::new(7.0, 8.5), angle: Range::new(-10.0, 10.0) }),
        ("stripes_coarse_v", Stripes { period: Range::new(7.0, 8.5), angle: Range::new(80.0, 100.0) }),
        ("stripes_fine_diag", Stripes { period: Range::new(3.2, 3.8), angle: Range::new(35.0, 55.0) }),
        ("dots_sparse", Dots { spacing: Range::new(7.5, 8.5), radius: Range::new(1.6, 2.0) }),
        ("dots_dense", Dots { spacing: Range::new(4.2, 4.8), radius: Range::new(0.9, 1.1) }),
        ("weave_coarse", Weave { period: Range::new(9.0, 10.5) }),
        ("weave_fine", Weave { period: Range::new(4.5, 5.2) }),
        (
            "ridges_wavy",
            Ridges { period: Range::new(5.5, 6.5), wiggle: Range::new(1.5, 2.5), wiggle_period: Range::new(10.0, 14.0) },
        ),
        ("noise_coarse", NoiseBlend { scale: Range::new(7.0, 9.0) }),
        ("noise_fine", NoiseBlend { scale: Range::new(1.8, 2.4) }),
    ];
    if k == 0 || k > all.len() {
        return Err(Error::config(format!("between 1 and {} texture classes are available, asked for {k}", all.len())));
    }
    Ok(all
        .into_iter()
        .take(k)
        .enumerate()
        .map(|(class_id, (name, generator))| TextureClass { class_id, name: name.to_string(), generator })
        .collect())
}

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Texture field in `[0, 1]` over an `h×w` grid.
fn field(gen: &Generator, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    match gen {
        Generator::Stripes { period, angle } => {
            let p = period.sample(rng);
            let a = angle.sample(rng).to_radians();
            let phase = rng.random_range(0.0..2.0 * PI);
            let (c, s) = (a.cos(), a.sin());
            for y in 0..h {
                for x in 0..w {
                    let u = x as f64 * c + y as f64 * s;
                    out[y * w + x] = 0.5 + 0.5 * (2.0 * PI * u / p + phase).sin();
                }
            }
        }
        Generator::Dots { spacing, radius } => {
            let sp = spacing.sample(rng);
            let r = radius.sample(rng);
            let (ox, oy) = (rng.random_range(0.0..sp), rng.random_range(0.0..sp));
            for y in 0..h {
                for x in 0..w {
                    let dx = (x as f64 - ox).rem_euclid(sp);
                    let dy = (y as f64 - oy).rem_euclid(sp);
                    let dx = dx.min(sp - dx);
                    let dy = dy.min(sp - dy);
                    out[y * w + x] = (-(dx * dx + dy * dy) / (2.0 * r * r)).exp();
                }
            }
        }
        Generator::Weave { period } => {
            let p = period.sample(rng);
            let (px, py) = (rng.random_range(0.0..2.0 * PI), rng.random_range(0.0..2.0 * PI));
            for y in 0..h {
                for x in 0..w {
                    let v = (2.0 * PI * x as f64 / p + px).sin() * (2.0 * PI * y as f64 / p + py).sin();
                    out[y * w + x] = 0.5 + 0.5 * v;
                }
            }
        }
        Generator::Ridges { period, wiggle, wiggle_period } => {
            let p = period.sample(rng);
            let a = wiggle.sample(rng);
            let wp = wiggle_period.sample(rng);
            let (phase, wphase) = (rng.random_range(0.0..PI), rng.random_range(0.0..2.0 * PI));
            let transpose = rng.random_bool(0.5);
            for y in 0..h {
                for x in 0..w {
                    let (along, across) = if transpose { (y as f64, x as f64) } else { (x as f64, y as f64) };
                    let offset = a * (2.0 * PI * along / wp + wphase).sin();
                    out[y * w + x] = (PI * (across + offset) / p + phase).sin().abs();
                }
            }
        }
        Generator::NoiseBlend { scale } => {
            let s = scale.sample(rng);
            let gw = (w as f64 / s).ceil() as usize + 2;
            let gh = (h as f64 / s).ceil() as usize + 2;
            let lattice: Vec<f64> = (0..gw * gh).map(|_| rng.random_range(0.0..1.0)).collect();
            let (ox, oy) = (rng.random_range(0.0..s), rng.random_range(0.0..s));
            for y in 0..h {
                for x in 0..w {
                    let fx = (x as f64 + ox) / s;
                    let fy = (y as f64 + oy) / s;
                    let (ix, iy) = (fx.floor() as usize, fy.floor() as usize);
                    let (tx, ty) = (smoothstep(fx.fract()), smoothstep(fy.fract()));
                    let at = |i: usize, j: usize| lattice[j * gw + i];
                    let top = at(ix, iy) * (1.0 - tx) + at(ix + 1, iy) * tx;
                    let bottom = at(ix, iy + 1) * (1.0 - tx) + at(ix + 1, iy + 1) * tx;
                    out[y * w + x] = top * (1.0 - ty) + bottom * ty;
                }
            }
            let (lo, hi) = out.iter().fold((f64::MAX, f64::MIN), |(lo, hi), &v| (lo.min(v), hi.max(v)));
            let span = (hi - lo).max(1e-9);
            out.iter_mut().for_each(|v| *v = (*v - lo) / span);
        }
    }
    out
}

/// Gaussian sensor noise clipped to ±3σ.
pub(crate) fn sensor_noise(rng: &mut ChaCha8Rng) -> f64 {
    let normal = Normal::new(0.0, NOISE_SIGMA).expect("valid sigma");
    normal.sample(rng).clamp(-3.0 * NOISE_SIGMA, 3.0 * NOISE_SIGMA)
}

/// Full-contact image of `class`: texture field on a contact base level with
/// a smooth dome profile and clipped sensor noise. Deterministic in
/// `(class, seed)`.
pub fn generate_texture(class: &TextureClass, size: usize, seed: u64) -> TactileImage {
    let mut rng = seed::rng(seed);
    let (h, w) = (size, size);
    let t = field(&class.generator, h, w, &mut rng);
    let gain = rng.random_range(0.85..=1.0);
    let cx = w as f64 * rng.random_range(0.4..0.6);
    let cy = h as f64 * rng.random_range(0.4..0.6);
    let spread = 0.35 * w as f64;
    let mut pixels = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let r2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
            let dome = (-r2 / (2.0 * spread * spread)).exp();
            let v = CONTACT_BASE + DOME_AMP * dome + TEXTURE_AMP * gain * t[y * w + x] + sensor_noise(&mut rng);
            pixels.push(v.clamp(0.0, 1.0));
        }
    }
    TactileImage::new(h, w, 1, pixels, class.class_id).expect("valid synthetic image")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_class_and_seed() {
        let classes = default_classes(10).unwrap();
        for c in &classes {
            assert_eq!(generate_texture(c, 32, 11), generate_texture(c, 32, 11));
            assert_ne!(generate_texture(c, 32, 11).pixels, generate_texture(c, 32, 12).pixels);
        }
    }

    #[test]
    fn pixels_stay_in_unit_range() {
        let classes = default_classes(10).unwrap();
        for s in 0..1000u64 {
            let img = generate_texture(&classes[(s % 10) as usize], 32, s);
            assert!(img.pixels.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn class_count_is_bounded() {
        assert!(default_classes(0).is_err());
        assert!(default_classes(11).is_err());
        assert_eq!(default_classes(3).unwrap().len(), 3);
    }
}
