//! Evaluation measures for binary segmentation: MAE, structure measure,
//! mean enhanced-alignment measure, weighted F-measure and threshold curves,
//! plus small-object subset selection.
//!
//! Metrics work on `f64` maps in `[0, 1]` and boolean ground truth, both
//! row-major `h x w`.

pub mod curves;
pub mod enhanced;
pub mod structure;
pub mod weighted_f;

pub use curves::{pr_and_f_curves, Curves};
pub use enhanced::{e_measure_binary, e_measure_mean};
pub use structure::s_measure;
pub use weighted_f::weighted_f;

/// 8-bit level `round(255 p)` of a map clamped to `[0, 1]`.
pub fn quantize(pred: &[f64]) -> Vec<u8> {
    pred.iter().map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
}

/// Per-image min-max normalisation; constant maps are only clamped.
pub fn normalize_prediction(pred: &[f64]) -> Vec<f64> {
    let lo = pred.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = pred.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo > f64::EPSILON {
        pred.iter().map(|&p| (p - lo) / (hi - lo)).collect()
    } else {
        pred.iter().map(|&p| p.clamp(0.0, 1.0)).collect()
    }
}

/// Foreground test for 8-bit masks.
pub fn binarize_mask(gray: &[u8]) -> Vec<bool> {
    gray.iter().map(|&v| v > 127).collect()
}

pub fn mae(pred: &[f64], gt: &[bool]) -> f64 {
    assert_eq!(pred.len(), gt.len());
    let s: f64 = pred.iter().zip(gt).map(|(&p, &g)| (p - f64::from(u8::from(g))).abs()).sum();
    s / pred.len() as f64
}

/// Foreground fraction `A_f / A_t`.
pub fn foreground_fraction(gt: &[bool]) -> f64 {
    gt.iter().filter(|&&g| g).count() as f64 / gt.len() as f64
}

/// Indices of masks whose foreground fraction is below `tau`.
pub fn filter_small<'a>(masks: impl IntoIterator<Item = &'a [bool]>, tau: f64) -> Vec<usize> {
    masks.into_iter().enumerate().filter(|(_, m)| foreground_fraction(m) < tau).map(|(i, _)| i).collect()
}

/// Thresholds of the small-object groups Small8, Small16, Small32.
pub const SMALL_GROUPS: [(&str, f64); 3] = [("Small8", 1.0 / 8.0), ("Small16", 1.0 / 16.0), ("Small32", 1.0 / 32.0)];

/// All measures for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageScores {
    pub mae: f64,
    pub s_measure: f64,
    pub e_measure: f64,
    pub weighted_f: f64,
    pub curves: Curves,
}

/// Normalises `pred` and evaluates every measure against `gt`.
pub fn evaluate_image(pred: &[f64], gt: &[bool], h: usize, w: usize) -> ImageScores {
    let p = normalize_prediction(pred);
    ImageScores {
        mae: mae(&p, gt),
        s_measure: s_measure(&p, gt, h, w),
        e_measure: e_measure_mean(&p, gt),
        weighted_f: weighted_f(&p, gt, h, w),
        curves: pr_and_f_curves(&p, gt),
    }
}

/// Dataset means; image order does not affect the result beyond summation
/// order, which follows insertion.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub count: usize,
    pub mae: f64,
    pub s_measure: f64,
    pub e_measure: f64,
    pub weighted_f: f64,
    pub curves: Curves,
}

impl MetricReport {
    pub fn from_scores<'a>(scores: impl IntoIterator<Item = &'a ImageScores>) -> Self {
        let mut r = Self { count: 0, mae: 0.0, s_measure: 0.0, e_measure: 0.0, weighted_f: 0.0, curves: Curves::zeros() };
        for s in scores {
            r.count += 1;
            r.mae += s.mae;
            r.s_measure += s.s_measure;
            r.e_measure += s.e_measure;
            r.weighted_f += s.weighted_f;
            for k in 0..curves::THRESHOLDS {
                r.curves.precision[k] += s.curves.precision[k];
                r.curves.recall[k] += s.curves.recall[k];
                r.curves.f[k] += s.curves.f[k];
            }
        }
        if r.count > 0 {
            let n = r.count as f64;
            r.mae /= n;
            r.s_measure /= n;
            r.e_measure /= n;
            r.weighted_f /= n;
            for k in 0..curves::THRESHOLDS {
                r.curves.precision[k] /= n;
                r.curves.recall[k] /= n;
                r.curves.f[k] /= n;
            }
        }
        r
    }

    /// Header matching [`MetricReport::row`].
    pub const HEADER: &'static str = "dataset,count,S_m,wF,MAE,E_mean,maxF,meanF";

    pub fn max_f(&self) -> f64 {
        self.curves.f.iter().copied().fold(0.0, f64::max)
    }

    pub fn mean_f(&self) -> f64 {
        self.curves.f.iter().sum::<f64>() / self.curves.f.len() as f64
    }

    /// An empty group prints `nan` for every score.
    pub fn row(&self, name: &str) -> String {
        if self.count == 0 {
            return format!("{name},0,nan,nan,nan,nan,nan,nan");
        }
        format!(
            "{name},{},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4}",
            self.count,
            self.s_measure,
            self.weighted_f,
            self.mae,
            self.e_measure,
            self.max_f(),
            self.mean_f()
        )
    }

    /// 256-row table `threshold,precision,recall,f`.
    pub fn curves_csv(&self) -> String {
        let mut s = String::from("threshold,precision,recall,f\n");
        for k in 0..curves::THRESHOLDS {
            s.push_str(&format!("{k},{:.6},{:.6},{:.6}\n", self.curves.precision[k], self.curves.recall[k], self.curves.f[k]));
        }
        s
    }
}

