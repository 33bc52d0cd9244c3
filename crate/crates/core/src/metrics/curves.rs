//! Precision, recall and F-measure at every 8-bit threshold.

pub const THRESHOLDS: usize = 256;
pub const BETA2: f64 = 0.3;

/// Per-threshold curves; entry `k` binarises the quantised prediction with
/// `q > k`. Undefined ratios (zero denominators) are 0.
#[derive(Clone, Debug, PartialEq)]
pub struct Curves {
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub f: Vec<f64>,
}

impl Curves {
    pub fn zeros() -> Self {
        Self { precision: vec![0.0; THRESHOLDS], recall: vec![0.0; THRESHOLDS], f: vec![0.0; THRESHOLDS] }
    }
}

pub fn f_beta(p: f64, r: f64) -> f64 {
    let den = BETA2 * p + r;
    if den > 0.0 { (1.0 + BETA2) * p * r / den } else { 0.0 }
}

pub fn pr_and_f_curves(pred: &[f64], gt: &[bool]) -> Curves {
    assert_eq!(pred.len(), gt.len());
    let q = super::quantize(pred);
    // histograms of quantised values over foreground and background
    let mut fg_hist = [0u64; THRESHOLDS];
    let mut bg_hist = [0u64; THRESHOLDS];
    for (&v, &g) in q.iter().zip(gt) {
        if g {
            fg_hist[v as usize] += 1;
        } else {
            bg_hist[v as usize] += 1;
        }
    }
    let positives: u64 = fg_hist.iter().sum();
    let mut c = Curves::zeros();
    let (mut tp, mut fp) = (0u64, 0u64);
    for k in (0..THRESHOLDS).rev() {
        // q > k
        if k + 1 < THRESHOLDS {
            tp += fg_hist[k + 1];
            fp += bg_hist[k + 1];
        }
        let p = if tp + fp > 0 { tp as f64 / (tp + fp) as f64 } else { 0.0 };
        let r = if positives > 0 { tp as f64 / positives as f64 } else { 0.0 };
        c.precision[k] = p;
        c.recall[k] = r;
        c.f[k] = f_beta(p, r);
    }
    c
}
