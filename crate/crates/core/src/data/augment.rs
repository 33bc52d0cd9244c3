//! Geometric augmentation applied jointly to image and mask.

use rand::Rng;

use super::Sample;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    /// Maximum absolute rotation in degrees.
    pub rotate_deg: f64,
    /// Maximum fraction trimmed from each border before resizing back.
    pub border_clip: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { flip_prob: 0.5, rotate_deg: 15.0, border_clip: 0.1 }
    }
}

/// Bilinear read with zero outside the plane.
fn bilinear(plane: &[f32], s: usize, y: f64, x: f64) -> f32 {
    let (y0, x0) = (y.floor(), x.floor());
    let (fy, fx) = ((y - y0) as f32, (x - x0) as f32);
    let at = |yy: f64, xx: f64| -> f32 {
        if yy < 0.0 || xx < 0.0 || yy >= s as f64 || xx >= s as f64 {
            0.0
        } else {
            plane[yy as usize * s + xx as usize]
        }
    };
    let top = at(y0, x0) * (1.0 - fx) + at(y0, x0 + 1.0) * fx;
    let bot = at(y0 + 1.0, x0) * (1.0 - fx) + at(y0 + 1.0, x0 + 1.0) * fx;
    top * (1.0 - fy) + bot * fy
}

fn nearest(plane: &[u8], s: usize, y: f64, x: f64) -> u8 {
    let (yy, xx) = (y.round(), x.round());
    if yy < 0.0 || xx < 0.0 || yy >= s as f64 || xx >= s as f64 { 0 } else { plane[yy as usize * s + xx as usize] }
}

/// Resamples through `src(y, x) = map(y, x)` for every output pixel.
fn warp(sample: &Sample, map: impl Fn(f64, f64) -> (f64, f64)) -> Sample {
    let s = sample.size;
    let plane = s * s;
    let mut image = vec![0f32; 3 * plane];
    let mut mask = vec![0u8; plane];
    for y in 0..s {
        for x in 0..s {
            let (sy, sx) = map(y as f64, x as f64);
            for c in 0..3 {
                image[c * plane + y * s + x] = bilinear(&sample.image[c * plane..(c + 1) * plane], s, sy, sx);
            }
            mask[y * s + x] = nearest(&sample.mask, s, sy, sx);
        }
    }
    Sample::new(s, image, mask)
}

pub fn flip_horizontal(sample: &Sample) -> Sample {
    let s = sample.size;
    let mut out = sample.clone();
    for row in out.image.chunks_mut(s) {
        row.reverse();
    }
    for row in out.mask.chunks_mut(s) {
        row.reverse();
    }
    out
}

/// Rotation by `deg` about the centre; uncovered corners become zero.
pub fn rotate(sample: &Sample, deg: f64) -> Sample {
    let c = (sample.size as f64 - 1.0) / 2.0;
    let (sin, cos) = deg.to_radians().sin_cos();
    warp(sample, |y, x| {
        let (dy, dx) = (y - c, x - c);
        (c + cos * dy - sin * dx, c + sin * dy + cos * dx)
    })
}

/// Keeps the window `[top, s - bottom) x [left, s - right)` and stretches it
/// back to full size.
pub fn clip_borders(sample: &Sample, top: usize, bottom: usize, left: usize, right: usize) -> Sample {
    let s = sample.size as f64;
    let (h, w) = (s - (top + bottom) as f64, s - (left + right) as f64);
    warp(sample, |y, x| {
        (top as f64 + (y + 0.5) * h / s - 0.5, left as f64 + (x + 0.5) * w / s - 0.5)
    })
}

/// Random flip, rotation and border clip with one draw of parameters shared
/// by image and mask.
pub fn augment<R: Rng>(sample: &Sample, cfg: &AugmentConfig, rng: &mut R) -> Sample {
    let flip = rng.random_bool(cfg.flip_prob.clamp(0.0, 1.0));
    let deg = if cfg.rotate_deg > 0.0 { rng.random_range(-cfg.rotate_deg..=cfg.rotate_deg) } else { 0.0 };
    let max_clip = (cfg.border_clip.clamp(0.0, 0.45) * sample.size as f64).floor() as usize;
    let mut clip = [0usize; 4];
    for c in &mut clip {
        *c = if max_clip > 0 { rng.random_range(0..=max_clip) } else { 0 };
    }
    let mut out = if flip { flip_horizontal(sample) } else { sample.clone() };
    if deg != 0.0 {
        out = rotate(&out, deg);
    }
    if clip.iter().any(|&c| c > 0) {
        out = clip_borders(&out, clip[0], clip[1], clip[2], clip[3]);
    }
    out
}
