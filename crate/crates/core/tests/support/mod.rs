//! Independent metric oracles written from the textbook formulas, plus
//! small helpers shared by the integration tests.
#![allow(dead_code)]

use tristage::metrics::Curves;

const EPS: f64 = f64::EPSILON;

/// Deterministic pseudo-random stream for oracle inputs.
pub struct Lcg(pub u64);

impl Lcg {
    pub fn next(&mut self) -> u64 {
        self.0 = self.0.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        self.0 >> 33
    }

    pub fn level(&mut self) -> f64 {
        (self.next() % 5) as f64 / 4.0
    }
}

pub fn grid(v: &[f64], h: usize, w: usize) -> Vec<Vec<f64>> {
    (0..h).map(|y| v[y * w..(y + 1) * w].to_vec()).collect()
}

pub fn gt_from_bits(bits: u32, n: usize) -> Vec<bool> {
    (0..n).map(|i| bits >> i & 1 == 1).collect()
}

pub fn mean2(m: &[Vec<f64>]) -> f64 {
    let n: usize = m.iter().map(Vec::len).sum();
    m.iter().flatten().sum::<f64>() / n as f64
}

// ---- structure measure, written against the published MATLAB listing ----

pub fn oracle_object(pred: &[Vec<f64>], gt: &[Vec<bool>]) -> f64 {
    let vals: Vec<f64> = pred.iter().flatten().zip(gt.iter().flatten()).filter(|(_, g)| **g).map(|(p, _)| *p).collect();
    let x = vals.iter().sum::<f64>() / vals.len() as f64;
    let sd = if vals.len() < 2 {
        0.0
    } else {
        let ss: f64 = vals.iter().map(|v| (v - x) * (v - x)).sum();
        (ss / (vals.len() - 1) as f64).sqrt()
    };
    2.0 * x / (x * x + 1.0 + sd + EPS)
}

pub fn oracle_ssim(p: &[Vec<f64>], g: &[Vec<f64>]) -> f64 {
    let n = p.iter().map(Vec::len).sum::<usize>() as f64;
    let (x, y) = (mean2(p), mean2(g));
    let (mut sx, mut sy, mut sxy) = (0.0, 0.0, 0.0);
    for (pr, gr) in p.iter().zip(g) {
        for (a, b) in pr.iter().zip(gr) {
            sx += (a - x) * (a - x);
            sy += (b - y) * (b - y);
            sxy += (a - x) * (b - y);
        }
    }
    let (sx, sy, sxy) = (sx / (n - 1.0 + EPS), sy / (n - 1.0 + EPS), sxy / (n - 1.0 + EPS));
    let alpha = 4.0 * x * y * sxy;
    let beta = (x * x + y * y) * (sx + sy);
    if alpha != 0.0 {
        alpha / (beta + EPS)
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

pub fn sub(m: &[Vec<f64>], r0: usize, r1: usize, c0: usize, c1: usize) -> Vec<Vec<f64>> {
    m[r0..r1].iter().map(|row| row[c0..c1].to_vec()).collect()
}

pub fn oracle_s(pred: &[f64], gt: &[bool], h: usize, w: usize) -> f64 {
    let p = grid(pred, h, w);
    let gb: Vec<Vec<bool>> = (0..h).map(|y| gt[y * w..(y + 1) * w].to_vec()).collect();
    let gf: Vec<Vec<f64>> = gb.iter().map(|r| r.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()).collect();
    let y = mean2(&gf);
    if y == 0.0 {
        return 1.0 - mean2(&p);
    }
    if y == 1.0 {
        return mean2(&p);
    }
    // object term
    let fg: Vec<Vec<f64>> = p.iter().zip(&gb).map(|(r, g)| r.iter().zip(g).map(|(v, &b)| if b { *v } else { 0.0 }).collect()).collect();
    let bg: Vec<Vec<f64>> = p.iter().zip(&gb).map(|(r, g)| r.iter().zip(g).map(|(v, &b)| if b { 0.0 } else { 1.0 - v }).collect()).collect();
    let not_g: Vec<Vec<bool>> = gb.iter().map(|r| r.iter().map(|b| !b).collect()).collect();
    let so = y * oracle_object(&fg, &gb) + (1.0 - y) * oracle_object(&bg, &not_g);
    // region term: centroid from column and row sums with 1-based indices
    let total: f64 = gf.iter().flatten().sum();
    let col_sum: f64 = (0..w).map(|c| gf.iter().map(|r| r[c]).sum::<f64>() * (c + 1) as f64).sum();
    let row_sum: f64 = (0..h).map(|r| gf[r].iter().sum::<f64>() * (r + 1) as f64).sum();
    let cx = (col_sum / total).round() as usize;
    let cy = (row_sum / total).round() as usize;
    let area = (h * w) as f64;
    let w1 = (cx * cy) as f64 / area;
    let w2 = ((w - cx) * cy) as f64 / area;
    let w3 = (cx * (h - cy)) as f64 / area;
    let w4 = 1.0 - w1 - w2 - w3;
    let quads = [(0, cy, 0, cx, w1), (0, cy, cx, w, w2), (cy, h, 0, cx, w3), (cy, h, cx, w, w4)];
    let mut sr = 0.0;
    for (r0, r1, c0, c1, wt) in quads {
        if r1 > r0 && c1 > c0 {
            sr += wt * oracle_ssim(&sub(&p, r0, r1, c0, c1), &sub(&gf, r0, r1, c0, c1));
        }
    }
    (0.5 * so + 0.5 * sr).max(0.0)
}

// ---- enhanced alignment ----

pub fn oracle_e(pred: &[f64], gt: &[bool]) -> f64 {
    let n = gt.len() as f64;
    let q: Vec<f64> = pred.iter().map(|p| (p * 255.0).round()).collect();
    let g: Vec<f64> = gt.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    let mut acc = 0.0;
    for k in 1..=255 {
        let f: Vec<f64> = q.iter().map(|&v| if v >= k as f64 { 1.0 } else { 0.0 }).collect();
        let sg: f64 = g.iter().sum();
        let mut s = 0.0;
        if sg == 0.0 {
            s = f.iter().map(|v| 1.0 - v).sum();
        } else if sg == n {
            s = f.iter().sum();
        } else {
            let mf = f.iter().sum::<f64>() / n;
            let mg = sg / n;
            for i in 0..gt.len() {
                let a = 2.0 * (g[i] - mg) * (f[i] - mf) / ((g[i] - mg).powi(2) + (f[i] - mf).powi(2) + EPS);
                s += (a + 1.0) * (a + 1.0) / 4.0;
            }
        }
        acc += s / n;
    }
    acc / 255.0
}

// ---- weighted F ----

pub fn oracle_wf(pred: &[f64], gt: &[bool], h: usize, w: usize) -> f64 {
    if !gt.iter().any(|&g| g) {
        return 0.0;
    }
    let n = h * w;
    let e: Vec<f64> = (0..n).map(|i| (pred[i] - if gt[i] { 1.0 } else { 0.0 }).abs()).collect();
    // brute-force nearest foreground, first in row-major order on ties
    let mut dist = vec![0.0; n];
    let mut idx = vec![0; n];
    for i in 0..n {
        let (y, x) = ((i / w) as f64, (i % w) as f64);
        let mut best = (f64::INFINITY, 0);
        for j in (0..n).filter(|&j| gt[j]) {
            let d = ((y - (j / w) as f64).powi(2) + (x - (j % w) as f64).powi(2)).sqrt();
            if d < best.0 {
                best = (d, j);
            }
        }
        dist[i] = best.0;
        idx[i] = best.1;
    }
    let et: Vec<f64> = (0..n).map(|i| e[idx[i]]).collect();
    let mut kern = [[0.0; 7]; 7];
    let mut ks = 0.0;
    for a in 0..7 {
        for b in 0..7 {
            let (dy, dx) = (a as f64 - 3.0, b as f64 - 3.0);
            kern[a][b] = (-(dy * dy + dx * dx) / 50.0).exp();
            ks += kern[a][b];
        }
    }
    let mut ea = vec![0.0; n];
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let mut s = 0.0;
            for a in -3i64..=3 {
                for b in -3i64..=3 {
                    let (yy, xx) = (y + a, x + b);
                    if (0..h as i64).contains(&yy) && (0..w as i64).contains(&xx) {
                        s += kern[(a + 3) as usize][(b + 3) as usize] / ks * et[(yy * w as i64 + xx) as usize];
                    }
                }
            }
            ea[(y * w as i64 + x) as usize] = s;
        }
    }
    let mut ew = vec![0.0; n];
    for i in 0..n {
        let m = if gt[i] && ea[i] < e[i] { ea[i] } else { e[i] };
        let b = if gt[i] { 1.0 } else { 2.0 - ((0.5f64).ln() / 5.0 * dist[i]).exp() };
        ew[i] = m * b;
    }
    let fg = gt.iter().filter(|&&g| g).count() as f64;
    let ew_fg: f64 = (0..n).filter(|&i| gt[i]).map(|i| ew[i]).sum();
    let ew_bg: f64 = (0..n).filter(|&i| !gt[i]).map(|i| ew[i]).sum();
    let tpw = fg - ew_fg;
    let r = 1.0 - ew_fg / fg;
    let p = tpw / (EPS + tpw + ew_bg);
    2.0 * r * p / (EPS + r + p)
}

pub fn oracle_curves(pred: &[f64], gt: &[bool]) -> Curves {
    let mut c = Curves::zeros();
    let q: Vec<u32> = pred.iter().map(|p| (p * 255.0).round() as u32).collect();
    for k in 0..256u32 {
        let tp = q.iter().zip(gt).filter(|(v, g)| **v > k && **g).count() as f64;
        let fp = q.iter().zip(gt).filter(|(v, g)| **v > k && !**g).count() as f64;
        let pos = gt.iter().filter(|g| **g).count() as f64;
        let p = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let r = if pos > 0.0 { tp / pos } else { 0.0 };
        c.precision[k as usize] = p;
        c.recall[k as usize] = r;
        c.f[k as usize] = if 0.3 * p + r > 0.0 { 1.3 * p * r / (0.3 * p + r) } else { 0.0 };
    }
    c
}

