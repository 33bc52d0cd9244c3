//! Structure measure: object-aware plus region-aware structural similarity,
//! with the conventions of the original MATLAB release (sample standard
//! deviation, half-away-from-zero centroid rounding, `eps = 2^-52`).

const EPS: f64 = f64::EPSILON;
const ALPHA: f64 = 0.5;

pub fn s_measure(pred: &[f64], gt: &[bool], h: usize, w: usize) -> f64 {
    assert_eq!(pred.len(), h * w);
    assert_eq!(gt.len(), h * w);
    let n = (h * w) as f64;
    let fg = gt.iter().filter(|&&g| g).count() as f64;
    let mean = pred.iter().sum::<f64>() / n;
    if fg == 0.0 {
        return 1.0 - mean;
    }
    if fg == n {
        return mean;
    }
    let q = ALPHA * s_object(pred, gt) + (1.0 - ALPHA) * s_region(pred, gt, h, w);
    q.max(0.0)
}

fn object_score(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let x = values.iter().sum::<f64>() / n;
    let sigma = if values.len() > 1 {
        (values.iter().map(|v| (v - x).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    2.0 * x / (x * x + 1.0 + sigma + EPS)
}

fn s_object(pred: &[f64], gt: &[bool]) -> f64 {
    let fg: Vec<f64> = pred.iter().zip(gt).filter(|(_, &g)| g).map(|(&p, _)| p).collect();
    let bg: Vec<f64> = pred.iter().zip(gt).filter(|(_, &g)| !g).map(|(&p, _)| 1.0 - p).collect();
    let u = fg.len() as f64 / gt.len() as f64;
    u * object_score(&fg) + (1.0 - u) * object_score(&bg)
}

/// 1-based centroid `(X, Y)` of the foreground.
fn centroid(gt: &[bool], h: usize, w: usize) -> (usize, usize) {
    let (mut total, mut sx, mut sy) = (0.0, 0.0, 0.0);
    for y in 0..h {
        for x in 0..w {
            if gt[y * w + x] {
                total += 1.0;
                sx += (x + 1) as f64;
                sy += (y + 1) as f64;
            }
        }
    }
    if total == 0.0 {
        return ((w as f64 / 2.0).round() as usize, (h as f64 / 2.0).round() as usize);
    }
    ((sx / total).round() as usize, (sy / total).round() as usize)
}

fn ssim(pred: &[f64], gt: &[f64]) -> f64 {
    let n = pred.len() as f64;
    if pred.is_empty() {
        return 0.0;
    }
    let x = pred.iter().sum::<f64>() / n;
    let y = gt.iter().sum::<f64>() / n;
    let sx2 = pred.iter().map(|p| (p - x).powi(2)).sum::<f64>() / (n - 1.0 + EPS);
    let sy2 = gt.iter().map(|g| (g - y).powi(2)).sum::<f64>() / (n - 1.0 + EPS);
    let sxy = pred.iter().zip(gt).map(|(p, g)| (p - x) * (g - y)).sum::<f64>() / (n - 1.0 + EPS);
    let alpha = 4.0 * x * y * sxy;
    let beta = (x * x + y * y) * (sx2 + sy2);
    if alpha != 0.0 {
        alpha / (beta + EPS)
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

fn quadrant(data: &[f64], w: usize, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) -> Vec<f64> {
    rows.flat_map(|y| cols.clone().map(move |x| (y, x))).map(|(y, x)| data[y * w + x]).collect()
}

fn s_region(pred: &[f64], gt: &[bool], h: usize, w: usize) -> f64 {
    let (cx, cy) = centroid(gt, h, w);
    let g: Vec<f64> = gt.iter().map(|&b| f64::from(u8::from(b))).collect();
    let area = (h * w) as f64;
    let w1 = (cx * cy) as f64 / area;
    let w2 = ((w - cx) * cy) as f64 / area;
    let w3 = (cx * (h - cy)) as f64 / area;
    let w4 = 1.0 - w1 - w2 - w3;
    let parts = [(0..cy, 0..cx, w1), (0..cy, cx..w, w2), (cy..h, 0..cx, w3), (cy..h, cx..w, w4)];
    parts
        .into_iter()
        .map(|(r, c, wt)| {
            if wt == 0.0 {
                return 0.0;
            }
            wt * ssim(&quadrant(pred, w, r.clone(), c.clone()), &quadrant(&g, w, r, c))
        })
        .sum()
}
