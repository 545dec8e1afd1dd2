//! Contact footprints and contact-area measurement.

use std::collections::VecDeque;
use std::f64::consts::PI;

use rand::Rng;

use super::texture::sensor_noise;
use super::{BACKGROUND_LEVEL, DETECT_THRESHOLD};
use crate::error::{Error, Result};
use crate::image::{ContactKind, TactileImage};
use crate::seed;

/// Lower bound (exclusive) of an adequate contact area.
pub const ADEQUATE_MIN: f64 = 0.50;
/// Inclusive bounds of a partial contact area.
pub const PARTIAL_MIN: f64 = 0.10;
pub const PARTIAL_MAX: f64 = 0.40;

const FIT_TOLERANCE: f64 = 0.01;
const MAX_BISECTIONS: usize = 50;

/// Binary contact mask; `fraction == popcount / (H·W)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ContactFootprint {
    pub height: usize,
    pub width: usize,
    pub mask: Vec<bool>,
    pub fraction: f64,
}

impl ContactFootprint {
    pub fn from_mask(height: usize, width: usize, mask: Vec<bool>) -> Self {
        let count = mask.iter().filter(|&&m| m).count();
        Self { height, width, mask, fraction: count as f64 / (height * width) as f64 }
    }

    pub fn area(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// `> 0.50` adequate, `[0.10, 0.40]` partial, anything else discarded.
pub fn classify_contact(fraction: f64) -> Option<ContactKind> {
    if fraction > ADEQUATE_MIN {
        Some(ContactKind::Adequate)
    } else if (PARTIAL_MIN..=PARTIAL_MAX).contains(&fraction) {
        Some(ContactKind::Partial)
    } else {
        None
    }
}

/// Keeps only the largest 4-connected component of `mask` (first in scan
/// order on ties).
pub fn largest_component(height: usize, width: usize, mask: &[bool]) -> Vec<bool> {
    let mut label = vec![0u32; mask.len()];
    let mut best = (0usize, 0u32);
    let mut next = 0u32;
    let mut queue = VecDeque::new();
    for start in 0..mask.len() {
        if !mask[start] || label[start] != 0 {
            continue;
        }
        next += 1;
        label[start] = next;
        queue.push_back(start);
        let mut size = 0;
        while let Some(i) = queue.pop_front() {
            size += 1;
            let (y, x) = (i / width, i % width);
            let mut visit = |j: usize| {
                if mask[j] && label[j] == 0 {
                    label[j] = next;
                    queue.push_back(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < width {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - width);
            }
            if y + 1 < height {
                visit(i + width);
            }
        }
        if size > best.0 {
            best = (size, next);
        }
    }
    label.iter().map(|&l| best.0 > 0 && l == best.1).collect()
}

/// Measured contact area: pixels deviating from `background` by more than
/// `threshold` (channel mean), largest 4-connected region, over `H·W`.
pub fn contact_fraction(img: &TactileImage, background: f64, threshold: f64) -> Result<f64> {
    if threshold <= 0.0 {
        return Err(Error::config("contact threshold must be positive"));
    }
    let c = img.channels;
    let candidates: Vec<bool> = img
        .pixels
        .chunks(c)
        .map(|px| (px.iter().sum::<f64>() / c as f64 - background).abs() > threshold)
        .collect();
    let region = largest_component(img.height, img.width, &candidates);
    Ok(region.iter().filter(|&&m| m).count() as f64 / img.n_pixels() as f64)
}

/// [`contact_fraction`] with the generator's background and threshold.
pub fn measure_contact(img: &TactileImage) -> f64 {
    contact_fraction(img, BACKGROUND_LEVEL, DETECT_THRESHOLD).expect("positive threshold")
}

struct Ellipse {
    cx: f64,
    cy: f64,
    cos: f64,
    sin: f64,
    aspect: f64,
}

impl Ellipse {
    fn raster(&self, h: usize, w: usize, minor: f64) -> ContactFootprint {
        let major = minor * self.aspect;
        let mut mask = vec![false; h * w];
        for y in 0..h {
            for x in 0..w {
                let (dx, dy) = (x as f64 + 0.5 - self.cx, y as f64 + 0.5 - self.cy);
                let u = dx * self.cos + dy * self.sin;
                let v = -dx * self.sin + dy * self.cos;
                mask[y * w + x] = minor > 0.0 && (u / major).powi(2) + (v / minor).powi(2) <= 1.0;
            }
        }
        ContactFootprint::from_mask(h, w, largest_component(h, w, &mask))
    }
}

/// Elliptical footprint whose in-bounds area is within ±0.01 of `target`,
/// found by bisection over the ellipse size.
pub fn fit_footprint(height: usize, width: usize, target: f64, seed: u64) -> Result<ContactFootprint> {
    if !(target > 0.0 && target <= 1.0) {
        return Err(Error::Generation(format!("target contact fraction {target} outside (0, 1]")));
    }
    if target >= 1.0 {
        return Ok(ContactFootprint::from_mask(height, width, vec![true; height * width]));
    }
    let mut rng = seed::rng(seed);
    let angle = rng.random_range(0.0..PI);
    let ellipse = Ellipse {
        cx: width as f64 * rng.random_range(0.3..0.7),
        cy: height as f64 * rng.random_range(0.3..0.7),
        cos: angle.cos(),
        sin: angle.sin(),
        aspect: rng.random_range(1.0..1.6),
    };
    let (mut lo, mut hi) = (0.0, (height + width) as f64 * 2.0);
    for _ in 0..MAX_BISECTIONS {
        let mid = 0.5 * (lo + hi);
        let fp = ellipse.raster(height, width, mid);
        if (fp.fraction - target).abs() <= FIT_TOLERANCE {
            return Ok(fp);
        }
        if fp.fraction < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Err(Error::Generation(format!(
        "no footprint within ±{FIT_TOLERANCE} of {target} after {MAX_BISECTIONS} bisection steps"
    )))
}

/// Replaces everything outside a fitted footprint by the no-contact
/// background plus clipped sensor noise. `target == 1` leaves the image as is.
pub fn apply_partial_contact(img: &TactileImage, target: f64, seed: u64) -> Result<(TactileImage, ContactFootprint)> {
    let fp = fit_footprint(img.height, img.width, target, seed)?;
    let mut out = img.clone();
    if target < 1.0 {
        let mut rng = seed::rng(seed::derive(seed, &[1]));
        for (i, &inside) in fp.mask.iter().enumerate() {
            if !inside {
                for c in 0..img.channels {
                    out.pixels[i * img.channels + c] = (BACKGROUND_LEVEL + sensor_noise(&mut rng)).clamp(0.0, 1.0);
                }
            }
        }
    }
    out.contact_fraction = fp.fraction;
    out.contact_kind = classify_contact(fp.fraction).unwrap_or(ContactKind::Partial);
    Ok((out, fp))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::texture::{default_classes, generate_texture};
    use crate::data::NOISE_SIGMA;

    #[test]
    fn thresholds() {
        assert_eq!(classify_contact(0.55), Some(ContactKind::Adequate));
        assert_eq!(classify_contact(0.25), Some(ContactKind::Partial));
        assert_eq!(classify_contact(0.45), None);
        assert_eq!(classify_contact(0.05), None);
        assert_eq!(classify_contact(0.50), None);
        assert_eq!(classify_contact(0.10), Some(ContactKind::Partial));
        assert_eq!(classify_contact(0.40), Some(ContactKind::Partial));
        assert_eq!(classify_contact(1.0), Some(ContactKind::Adequate));
    }

    #[test]
    fn blank_and_full_contact() {
        let blank = TactileImage::new(32, 32, 1, vec![0.5; 1024], 0).unwrap();
        assert_eq!(measure_contact(&blank), 0.0);
        let classes = default_classes(10).unwrap();
        for (s, c) in classes.iter().enumerate() {
            let img = generate_texture(c, 32, s as u64);
            assert!(measure_contact(&img) >= 0.95, "class {}", c.name);
        }
    }

    #[test]
    fn full_target_is_identity() {
        let img = generate_texture(&default_classes(1).unwrap()[0], 32, 5);
        let (out, fp) = apply_partial_contact(&img, 1.0, 9).unwrap();
        assert_eq!(out.pixels, img.pixels);
        assert_eq!(fp.fraction, 1.0);
        assert_eq!(out.contact_fraction, 1.0);
    }

    #[test]
    fn quarter_target_pixel_count() {
        let img = generate_texture(&default_classes(4).unwrap()[3], 32, 1);
        for s in 0..50 {
            let (out, fp) = apply_partial_contact(&img, 0.25, s).unwrap();
            let area = fp.area();
            assert!((246..=266).contains(&area), "area {area}");
            assert_eq!(out.contact_fraction, area as f64 / 1024.0);
            // One connected region.
            assert_eq!(largest_component(32, 32, &fp.mask), fp.mask);
            for (i, &inside) in fp.mask.iter().enumerate() {
                if !inside {
                    assert!((out.pixels[i] - BACKGROUND_LEVEL).abs() <= 3.0 * NOISE_SIGMA + 1e-12);
                }
            }
        }
    }

    #[test]
    fn detector_closes_loop_on_generator() {
        let classes = default_classes(10).unwrap();
        for s in 0..40u64 {
            let img = generate_texture(&classes[(s % 10) as usize], 32, 100 + s);
            let (out, _) = apply_partial_contact(&img, 0.30, s).unwrap();
            let measured = measure_contact(&out);
            assert!((measured - 0.30).abs() <= 0.03, "measured {measured}");
        }
    }

    #[test]
    fn invalid_targets() {
        assert!(matches!(fit_footprint(32, 32, 0.0, 1), Err(Error::Generation(_))));
        assert!(fit_footprint(32, 32, 1.5, 1).is_err());
        assert!(contact_fraction(&TactileImage::new(2, 2, 1, vec![0.5; 4], 0).unwrap(), 0.5, 0.0).is_err());
    }
}
