//! Procedural camouflage scenes: a fractal value-noise background and a
//! smooth blob whose texture is drawn from the same family.
//!
//! `similarity = 0` puts foreground and background in disjoint intensity
//! bands; `similarity = 1` gives both the same intensity distribution, so
//! only the texture seam separates them.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Sample;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub count: usize,
    pub size: usize,
    /// Inclusive bounds on the foreground fraction.
    pub fg_range: (f64, f64),
    pub similarity: f64,
}

impl SyntheticSpec {
    pub fn new(seed: u64, count: usize, size: usize) -> Self {
        Self { seed, count, size, fg_range: (0.05, 0.3), similarity: 0.5 }
    }

    fn validate(&self) -> Result<()> {
        let (lo, hi) = self.fg_range;
        if !(0.0 < lo && lo <= hi && hi <= 0.5) {
            return Err(Error::Config(format!("foreground range {:?} must satisfy 0 < lo <= hi <= 0.5", self.fg_range)));
        }
        if !(0.0..=1.0).contains(&self.similarity) {
            return Err(Error::Config(format!("similarity {} must lie in [0, 1]", self.similarity)));
        }
        if self.size < 16 {
            return Err(Error::Config(format!("synthetic images need at least 16 pixels per side, got {}", self.size)));
        }
        Ok(())
    }
}

/// Fractal value noise in `[0, 1]`, `size x size`.
fn fbm(rng: &mut ChaCha8Rng, size: usize, base_cells: usize, octaves: usize) -> Vec<f32> {
    let mut out = vec![0f32; size * size];
    let mut amp = 1.0f32;
    for o in 0..octaves {
        let cells = base_cells << o;
        let n = cells + 1;
        let lattice: Vec<f32> = (0..n * n).map(|_| rng.random::<f32>()).collect();
        let scale = cells as f32 / size as f32;
        for y in 0..size {
            let fy = y as f32 * scale;
            let (iy, ty) = (fy as usize, fy.fract());
            let sy = ty * ty * (3.0 - 2.0 * ty);
            for x in 0..size {
                let fx = x as f32 * scale;
                let (ix, tx) = (fx as usize, fx.fract());
                let sx = tx * tx * (3.0 - 2.0 * tx);
                let at = |yy: usize, xx: usize| lattice[yy.min(cells) * n + xx.min(cells)];
                let top = at(iy, ix) * (1.0 - sx) + at(iy, ix + 1) * sx;
                let bot = at(iy + 1, ix) * (1.0 - sx) + at(iy + 1, ix + 1) * sx;
                out[y * size + x] += amp * (top * (1.0 - sy) + bot * sy);
            }
        }
        amp *= 0.5;
    }
    let lo = out.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = out.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let range = (hi - lo).max(f32::EPSILON);
    out.iter_mut().for_each(|v| *v = (*v - lo) / range);
    out
}

struct Blob {
    cy: f64,
    cx: f64,
    harmonics: [(f64, f64); 3],
}

impl Blob {
    fn mask(&self, size: usize, radius: f64) -> Vec<u8> {
        let mut m = vec![0u8; size * size];
        for y in 0..size {
            for x in 0..size {
                let (dy, dx) = (y as f64 + 0.5 - self.cy, x as f64 + 0.5 - self.cx);
                let theta = dy.atan2(dx);
                let mut r = 1.0;
                for (k, &(a, phi)) in self.harmonics.iter().enumerate() {
                    r += a * ((k as f64 + 2.0) * theta + phi).cos();
                }
                m[y * size + x] = u8::from(dy.hypot(dx) <= radius * r);
            }
        }
        m
    }
}

fn fraction(m: &[u8]) -> f64 {
    m.iter().filter(|&&v| v > 0).count() as f64 / m.len() as f64
}

/// Blob mask whose foreground fraction lies in `range`.
fn blob_mask(rng: &mut ChaCha8Rng, size: usize, range: (f64, f64)) -> Vec<u8> {
    let s = size as f64;
    loop {
        let blob = Blob {
            cy: rng.random_range(0.35 * s..0.65 * s),
            cx: rng.random_range(0.35 * s..0.65 * s),
            harmonics: [0; 3].map(|_| (rng.random_range(0.0..0.15), rng.random_range(0.0..std::f64::consts::TAU))),
        };
        let target = rng.random_range(range.0..=range.1);
        let (mut lo, mut hi) = (0.0, s);
        for _ in 0..40 {
            let mid = 0.5 * (lo + hi);
            if fraction(&blob.mask(size, mid)) < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let m = blob.mask(size, hi);
        let f = fraction(&m);
        if (range.0..=range.1).contains(&f) {
            return m;
        }
        let m = blob.mask(size, lo);
        let f = fraction(&m);
        if (range.0..=range.1).contains(&f) {
            return m;
        }
    }
}

fn generate_one(spec: &SyntheticSpec, index: usize) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);
    let s = spec.size;
    let mask = blob_mask(&mut rng, s, spec.fg_range);
    let base = (s / 32).max(2);
    let bg = fbm(&mut rng, s, base, 4);
    let fg = fbm(&mut rng, s, base * 2, 4);
    let tint: [f32; 3] = [0; 3].map(|_| rng.random_range(0.8..=1.0));
    let band = 0.4 + 0.6 * spec.similarity as f32;
    let plane = s * s;
    let mut image = vec![0f32; 3 * plane];
    for i in 0..plane {
        let v = if mask[i] > 0 { 1.0 - band + band * fg[i] } else { band * bg[i] };
        for c in 0..3 {
            image[c * plane + i] = v * tint[c];
        }
    }
    Sample::new(s, image, mask)
}

/// `spec.count` samples; sample `i` depends only on `(spec, i)`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Vec<Sample>> {
    spec.validate()?;
    Ok((0..spec.count).map(|i| generate_one(spec, i)).collect())
}

/// Writes samples as `Imgs/NNNN.png` and `GT/NNNN.png` under `root`.
pub fn materialize(samples: &[Sample], root: &Path) -> Result<()> {
    let imgs = root.join("Imgs");
    let gts = root.join("GT");
    std::fs::create_dir_all(&imgs)?;
    std::fs::create_dir_all(&gts)?;
    for (i, smp) in samples.iter().enumerate() {
        let s = smp.size as u32;
        let plane = smp.size * smp.size;
        let rgb = image::RgbImage::from_fn(s, s, |x, y| {
            let p = y as usize * smp.size + x as usize;
            image::Rgb([0, 1, 2].map(|c| (smp.image[c * plane + p].clamp(0.0, 1.0) * 255.0).round() as u8))
        });
        let gray = image::GrayImage::from_fn(s, s, |x, y| image::Luma([smp.mask[y as usize * smp.size + x as usize] * 255]));
        rgb.save(imgs.join(format!("{i:04}.png")))?;
        gray.save(gts.join(format!("{i:04}.png")))?;
    }
    Ok(())
}
