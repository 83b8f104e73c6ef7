//! Procedural glyph renderer: anti-aliased class glyphs over textured backgrounds.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::numkit::rng::{derive_seed, RandomStream};
use crate::raster::{Mask, Raster};

pub const NUM_CLASSES: usize = 8;
pub const NUM_BACKGROUNDS: usize = 6;
const SUPERSAMPLE: usize = 4;

/// Opaque prompt tokens for the classes, in class order.
pub const CLASS_TOKENS: [&str; NUM_CLASSES] =
    ["kwa", "mcke", "zorp", "quib", "vask", "trel", "oyn", "plix"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Glyph {
    Disc,
    Square,
    Triangle,
    Plus,
    Flower,
    Ring,
    Diamond,
    Ell,
}

const GLYPHS: [Glyph; NUM_CLASSES] = [
    Glyph::Disc,
    Glyph::Square,
    Glyph::Triangle,
    Glyph::Plus,
    Glyph::Flower,
    Glyph::Ring,
    Glyph::Diamond,
    Glyph::Ell,
];

/// `(fill, band)` colours per class.
const SCHEMES: [([u8; 3], [u8; 3]); NUM_CLASSES] = [
    ([220, 40, 40], [250, 240, 230]),
    ([40, 70, 220], [250, 220, 40]),
    ([30, 170, 60], [230, 50, 220]),
    ([250, 140, 20], [30, 40, 160]),
    ([245, 225, 30], [120, 30, 160]),
    ([30, 200, 220], [200, 20, 40]),
    ([140, 40, 200], [150, 250, 60]),
    ([245, 245, 245], [20, 20, 20]),
];

impl Glyph {
    pub fn of_class(class_id: usize) -> Glyph {
        GLYPHS[class_id % NUM_CLASSES]
    }

    /// Membership in glyph-local coordinates (`u` right, `v` down, unit radius).
    pub fn contains(self, u: f64, v: f64) -> bool {
        let r2 = u * u + v * v;
        match self {
            Glyph::Disc => r2 <= 0.81,
            Glyph::Square => u.abs() <= 0.72 && v.abs() <= 0.72,
            Glyph::Triangle => (-0.9..=0.7).contains(&v) && u.abs() <= 0.95 * (v + 0.9) / 1.6,
            Glyph::Plus => {
                (u.abs() <= 0.3 && v.abs() <= 0.92) || (v.abs() <= 0.3 && u.abs() <= 0.92)
            }
            Glyph::Flower => {
                let theta = v.atan2(u);
                r2.sqrt() <= 0.6 + 0.32 * (5.0 * theta).cos()
            }
            Glyph::Ring => (0.25..=0.85).contains(&r2),
            Glyph::Diamond => u.abs() + v.abs() <= 0.95,
            Glyph::Ell => {
                ((-0.7..=-0.15).contains(&u) && v.abs() <= 0.9)
                    || ((0.35..=0.9).contains(&v) && (-0.7..=0.75).contains(&u))
            }
        }
    }
}

pub fn class_colors(class_id: usize) -> ([u8; 3], [u8; 3]) {
    SCHEMES[class_id % NUM_CLASSES]
}

/// Glyph placement: centre as a fraction of the raster, radius in pixels,
/// rotation in radians.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub cy: f64,
    pub cx: f64,
    pub radius: f64,
    pub rotation: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub class_id: usize,
    pub pose: Pose,
    pub background_id: usize,
}

impl ShapeSpec {
    /// Random spec of `class_id` roughly filling a square raster.
    pub fn random(
        class_id: usize,
        rng: &mut RandomStream,
        fill: (f64, f64),
        jitter: f64,
    ) -> ShapeSpec {
        ShapeSpec {
            class_id,
            pose: Pose {
                cy: 0.5 + rng.uniform_range(-jitter, jitter),
                cx: 0.5 + rng.uniform_range(-jitter, jitter),
                radius: rng.uniform_range(fill.0, fill.1),
                rotation: rng.uniform_range(-0.6, 0.6),
            },
            background_id: rng.below(NUM_BACKGROUNDS),
        }
    }
}

fn lerp(a: [u8; 3], b: [u8; 3], t: f64) -> [f64; 3] {
    std::array::from_fn(|c| a[c] as f64 * (1.0 - t) + b[c] as f64 * t)
}

/// Low-contrast texture `background_id`, with a tint and phase drawn from `seed`.
pub fn render_background(background_id: usize, height: usize, width: usize, seed: u64) -> Raster {
    let mut r = RandomStream::labeled(seed, "background");
    let base: [u8; 3] = std::array::from_fn(|_| 80 + r.below(90) as u8);
    let alt: [u8; 3] = std::array::from_fn(|c| base[c].saturating_add(25 + r.below(20) as u8));
    let phase = r.uniform_range(0.0, 2.0 * PI);
    let period = r.uniform_range(5.0, 9.0);
    let dots = RandomStream::labeled(seed, "background/grain");
    let grain: Vec<f64> = {
        let mut d = dots;
        (0..height * width)
            .map(|_| d.uniform_range(-6.0, 6.0))
            .collect()
    };
    Raster::from_fn(height, width, |y, x| {
        let (fy, fx) = (y as f64, x as f64);
        let t = match background_id % NUM_BACKGROUNDS {
            0 => 0.5 + 0.5 * ((fx + fy) * 2.0 * PI / period + phase).sin(),
            1 => (((y / 4) + (x / 4)) % 2) as f64,
            2 => fy / height.max(1) as f64,
            3 => {
                let (dy, dx) = ((fy % 6.0) - 3.0, ((fx + phase) % 6.0) - 3.0);
                if dy * dy + dx * dx < 3.0 {
                    1.0
                } else {
                    0.0
                }
            }
            4 => 0.5 + 0.5 * (fy * 2.0 * PI / period + 2.0 * (fx * 0.3 + phase).sin()).sin(),
            _ => 0.5,
        };
        let c = lerp(base, alt, t);
        let g = grain[y * width + x];
        std::array::from_fn(|k| (c[k] + g).round().clamp(0.0, 255.0) as u8)
    })
}

/// Renders `spec` over its textured background. The mask marks pixels whose
/// glyph coverage is at least one half.
pub fn render_sample(spec: &ShapeSpec, size: (usize, usize), seed: u64) -> Result<(Raster, Mask)> {
    let (h, w) = size;
    contract!(h > 0 && w > 0, "empty render size");
    contract!(spec.pose.radius > 0.0, "glyph radius must be positive");
    let bg = render_background(spec.background_id, h, w, derive_seed(seed, "scene"));
    let (fill, band) = class_colors(spec.class_id);
    let glyph = Glyph::of_class(spec.class_id);
    let (cy, cx) = (spec.pose.cy * h as f64, spec.pose.cx * w as f64);
    let (s, c) = spec.pose.rotation.sin_cos();
    let inv_r = 1.0 / spec.pose.radius;
    let mut img = bg.clone();
    let mut mask = Mask::new(h, w);
    let n = (SUPERSAMPLE * SUPERSAMPLE) as f64;
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0f64; 3];
            let mut covered = 0usize;
            let under = bg.get(y, x);
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let py = y as f64 + (sy as f64 + 0.5) / SUPERSAMPLE as f64 - cy;
                    let px = x as f64 + (sx as f64 + 0.5) / SUPERSAMPLE as f64 - cx;
                    // rotate the sample into glyph-local coordinates
                    let u = (c * px + s * py) * inv_r;
                    let v = (-s * px + c * py) * inv_r;
                    let col = if glyph.contains(u, v) {
                        covered += 1;
                        if v.abs() < 0.16 {
                            band
                        } else {
                            fill
                        }
                    } else {
                        under
                    };
                    for k in 0..3 {
                        acc[k] += col[k] as f64;
                    }
                }
            }
            if covered > 0 {
                img.set(y, x, std::array::from_fn(|k| (acc[k] / n).round() as u8));
            }
            mask.set(y, x, 2 * covered >= SUPERSAMPLE * SUPERSAMPLE);
        }
    }
    Ok((img, mask))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(class_id: usize, rotation: f64) -> ShapeSpec {
        ShapeSpec {
            class_id,
            pose: Pose {
                cy: 0.5,
                cx: 0.5,
                radius: 9.0,
                rotation,
            },
            background_id: 1,
        }
    }

    #[test]
    fn deterministic_and_nontrivial() {
        for class in 0..NUM_CLASSES {
            let (a, ma) = render_sample(&spec(class, 0.3), (24, 24), 5).unwrap();
            let (b, mb) = render_sample(&spec(class, 0.3), (24, 24), 5).unwrap();
            assert_eq!(a.bytes(), b.bytes());
            assert_eq!(ma, mb);
            assert!(ma.count() > 0 && ma.count() < 24 * 24, "class {class}");
        }
    }

    #[test]
    fn quarter_turn_rotates_the_mask() {
        // rotating the glyph by +90 degrees (y down) equals rotating the
        // raster clockwise about its centre
        for class in [1, 2, 7] {
            let (_, m0) = render_sample(&spec(class, 0.2), (24, 24), 1).unwrap();
            let (_, m1) = render_sample(&spec(class, 0.2 + PI / 2.0), (24, 24), 1).unwrap();
            let rotated = m0.rotate90();
            let diff = (0..24 * 24)
                .filter(|&i| rotated.bits()[i] != m1.bits()[i])
                .count();
            assert!(diff <= 2, "class {class}: {diff} pixels differ");
        }
        let (_, sq) = render_sample(&spec(1, 0.0), (24, 24), 1).unwrap();
        assert_eq!(sq.rotate90(), sq);
    }

    #[test]
    fn backgrounds_differ_by_id_and_seed() {
        let a = render_background(0, 16, 16, 1);
        assert_ne!(a, render_background(1, 16, 16, 1));
        assert_ne!(a, render_background(0, 16, 16, 2));
        assert_eq!(a, render_background(0, 16, 16, 1));
    }
}
