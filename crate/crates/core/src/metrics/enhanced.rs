//! Enhanced-alignment measure on binary maps, and its mean over thresholds.

const EPS: f64 = f64::EPSILON;

/// Alignment score of a binary foreground map against the ground truth.
/// The sum of the enhanced alignment matrix is divided by the pixel count,
/// so a perfect match scores exactly 1 (up to `eps`).
pub fn e_measure_binary(fm: &[bool], gt: &[bool]) -> f64 {
    assert_eq!(fm.len(), gt.len());
    let n = gt.len() as f64;
    let f: Vec<f64> = fm.iter().map(|&b| f64::from(u8::from(b))).collect();
    let g: Vec<f64> = gt.iter().map(|&b| f64::from(u8::from(b))).collect();
    let g_sum: f64 = g.iter().sum();
    let total: f64 = if g_sum == 0.0 {
        f.iter().map(|v| 1.0 - v).sum()
    } else if g_sum == n {
        f.iter().sum()
    } else {
        let mf = f.iter().sum::<f64>() / n;
        let mg = g_sum / n;
        f.iter()
            .zip(&g)
            .map(|(fv, gv)| {
                let (af, ag) = (fv - mf, gv - mg);
                let align = 2.0 * ag * af / (ag * ag + af * af + EPS);
                (align + 1.0).powi(2) / 4.0
            })
            .sum()
    };
    total / n
}

/// Mean enhanced-alignment over the thresholds `k/255, k = 1..=255`
/// applied to the 8-bit quantised prediction (`q >= k`).
pub fn e_measure_mean(pred: &[f64], gt: &[bool]) -> f64 {
    let q = super::quantize(pred);
    let mut acc = 0.0;
    let mut fm = vec![false; q.len()];
    for k in 1..=255u8 {
        for (f, &v) in fm.iter_mut().zip(&q) {
            *f = v >= k;
        }
        acc += e_measure_binary(&fm, gt);
    }
    acc / 255.0
}
