//! Weighted F-measure: errors are spread by a Gaussian to their foreground
//! neighbourhood and background errors are weighted by distance to the object.

const EPS: f64 = f64::EPSILON;
const BETA2: f64 = 1.0;
const KERNEL: usize = 7;
const SIGMA: f64 = 5.0;

/// Exact squared Euclidean distance to, and index of, the nearest foreground
/// pixel. Ties go to the smallest row, then the smallest column. Returns
/// `None` when there is no foreground.
pub fn nearest_foreground(gt: &[bool], h: usize, w: usize) -> Option<(Vec<i64>, Vec<usize>)> {
    if !gt.iter().any(|&g| g) {
        return None;
    }
    let d2 = squared_edt(gt, h, w);
    let mut idx = vec![0; h * w];
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            if gt[p] {
                idx[p] = p;
                continue;
            }
            idx[p] = lexicographic_at_distance(gt, h, w, y, x, d2[p]).expect("distance is attained");
        }
    }
    Some((d2, idx))
}

fn isqrt(v: i64) -> Option<i64> {
    let r = (v as f64).sqrt().round() as i64;
    (r >= 0 && r * r == v).then_some(r)
}

fn lexicographic_at_distance(gt: &[bool], h: usize, w: usize, y: usize, x: usize, d2: i64) -> Option<usize> {
    let d = (d2 as f64).sqrt().floor() as i64 + 1;
    for dy in -d..=d {
        let yy = y as i64 + dy;
        if yy < 0 || yy >= h as i64 {
            continue;
        }
        let Some(dx) = isqrt(d2 - dy * dy) else { continue };
        for xx in [x as i64 - dx, x as i64 + dx] {
            if xx >= 0 && xx < w as i64 && gt[yy as usize * w + xx as usize] {
                return Some(yy as usize * w + xx as usize);
            }
        }
    }
    None
}

/// Two-pass lower-envelope distance transform on squared distances.
fn squared_edt(gt: &[bool], h: usize, w: usize) -> Vec<i64> {
    let inf = ((h + w) * (h + w)) as i64 * 4;
    let mut col = vec![inf; h * w];
    for x in 0..w {
        let f: Vec<i64> = (0..h).map(|y| if gt[y * w + x] { 0 } else { inf }).collect();
        let d = edt_1d(&f);
        for y in 0..h {
            col[y * w + x] = d[y];
        }
    }
    let mut out = vec![0; h * w];
    for y in 0..h {
        let d = edt_1d(&col[y * w..(y + 1) * w]);
        out[y * w..(y + 1) * w].copy_from_slice(&d);
    }
    out
}

fn edt_1d(f: &[i64]) -> Vec<i64> {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0f64; n + 1];
    let mut k = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    let inter = |q: usize, p: usize| {
        ((f[q] + (q * q) as i64) - (f[p] + (p * p) as i64)) as f64 / (2.0 * (q as f64 - p as f64))
    };
    for q in 1..n {
        let mut s = inter(q, v[k]);
        while s <= z[k] {
            k -= 1;
            s = inter(q, v[k]);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    let mut d = vec![0; n];
    k = 0;
    for (q, out) in d.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        *out = (q as i64 - p as i64).pow(2) + f[p];
    }
    d
}

fn gaussian_kernel() -> [[f64; KERNEL]; KERNEL] {
    let r = (KERNEL / 2) as i64;
    let mut k = [[0.0; KERNEL]; KERNEL];
    let mut sum = 0.0;
    for (i, row) in k.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (dy, dx) = (i as i64 - r, j as i64 - r);
            *v = (-((dy * dy + dx * dx) as f64) / (2.0 * SIGMA * SIGMA)).exp();
            sum += *v;
        }
    }
    for row in k.iter_mut() {
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    k
}

/// Zero-padded, same-size correlation with the 7x7 Gaussian.
fn filter(src: &[f64], h: usize, w: usize) -> Vec<f64> {
    let k = gaussian_kernel();
    let r = (KERNEL / 2) as i64;
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, row) in k.iter().enumerate() {
                let yy = y as i64 + i as i64 - r;
                if yy < 0 || yy >= h as i64 {
                    continue;
                }
                for (j, kv) in row.iter().enumerate() {
                    let xx = x as i64 + j as i64 - r;
                    if xx >= 0 && xx < w as i64 {
                        acc += kv * src[yy as usize * w + xx as usize];
                    }
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Weighted F-measure with `β² = 1`. An empty ground truth scores 0.
pub fn weighted_f(pred: &[f64], gt: &[bool], h: usize, w: usize) -> f64 {
    assert_eq!(pred.len(), h * w);
    assert_eq!(gt.len(), h * w);
    let Some((d2, idx)) = nearest_foreground(gt, h, w) else { return 0.0 };
    let e: Vec<f64> = pred.iter().zip(gt).map(|(&p, &g)| (p - f64::from(u8::from(g))).abs()).collect();
    let et: Vec<f64> = (0..h * w).map(|p| if gt[p] { e[p] } else { e[idx[p]] }).collect();
    let ea = filter(&et, h, w);
    let decay = 0.5f64.ln() / 5.0;
    let (mut fg_err, mut bg_err, mut fg) = (0.0, 0.0, 0.0);
    for p in 0..h * w {
        if gt[p] {
            let m = if ea[p] < e[p] { ea[p] } else { e[p] };
            fg_err += m;
            fg += 1.0;
        } else {
            let b = 2.0 - (decay * (d2[p] as f64).sqrt()).exp();
            bg_err += e[p] * b;
        }
    }
    let tp_sum = fg - fg_err;
    let r = 1.0 - fg_err / fg;
    let p = tp_sum / (EPS + tp_sum + bg_err);
    (1.0 + BETA2) * r * p / (EPS + r + BETA2 * p)
}
