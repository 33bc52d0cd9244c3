//! Hybrid weighted BCE + weighted IoU loss with deep supervision.

use crate::autograd::{sigmoid, BackFn, Graph, Var};
use crate::error::{Error, Result};
use crate::geometry;
use crate::kernels::{self, PoolGeom};
use crate::pipeline::ForwardVars;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// How a prediction map is expressed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Form {
    Logits,
    Probs,
}

/// Where each supervision term is evaluated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Resolution {
    /// Targets are nearest-downsampled to each prediction's own grid.
    Native,
    /// Predictions are bilinearly upsampled to the image grid.
    Image,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub window: usize,
    pub coefficient: f64,
    pub resolution: Resolution,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { window: 31, coefficient: 5.0, resolution: Resolution::Native }
    }
}

/// `1 + c·|avgpool_k(G) − G|`, stride 1, averaging over in-bounds pixels.
pub fn weight_map<T: Scalar>(gt: &Tensor<T>, window: usize, coefficient: f64) -> Tensor<T> {
    let pooled = kernels::avg_pool2d_forward(gt, PoolGeom::new(window, 1, window / 2, false));
    let c = T::c(coefficient);
    pooled.zip_map(gt, |a, g| T::one() + c * (a - g).abs())
}

fn prob_eps<T: Scalar>() -> T {
    T::epsilon().max(T::c(1e-12))
}

/// Weighted BCE plus weighted IoU between `pred` and a binary target,
/// averaged over the batch. Differentiable in `pred`.
pub fn hybrid_loss<T: Scalar>(g: &Graph<T>, pred: Var, target: &Tensor<T>, form: Form, cfg: &LossConfig) -> Result<Var> {
    let ps = g.shape(pred);
    if ps != target.shape() {
        return Err(Error::Shape(format!("prediction {ps:?} paired with target {:?}", target.shape())));
    }
    let w = weight_map(target, cfg.window, cfg.coefficient);
    let z = g.value(pred);
    let (n, c, h, wd) = z.dims4();
    let per = c * h * wd;
    let eps = prob_eps::<T>();
    let one = T::one();
    let mut total = T::zero();
    let mut grad = vec![T::zero(); z.numel()];
    let inv_n = one / T::c(n as f64);
    for b in 0..n {
        let r = b * per..(b + 1) * per;
        let (zs, gs, ws) = (&z.data()[r.clone()], &target.data()[r.clone()], &w.data()[r.clone()]);
        let mut probs = Vec::with_capacity(per);
        let (mut wsum, mut wbce, mut inter, mut union) = (T::zero(), T::zero(), T::zero(), T::zero());
        for j in 0..per {
            let (zj, gj, wj) = (zs[j], gs[j], ws[j]);
            let (p, bce) = match form {
                Form::Logits => (sigmoid(zj), zj.max(T::zero()) - zj * gj + (one + (-zj.abs()).exp()).ln()),
                Form::Probs => {
                    let pc = zj.max(eps).min(one - eps);
                    (zj, -(gj * pc.ln() + (one - gj) * (one - pc).ln()))
                }
            };
            probs.push(p);
            wsum += wj;
            wbce += wj * bce;
            inter += wj * p * gj;
            union += wj * (p + gj);
        }
        let a = inter + one;
        let bb = union - inter + one;
        total += (wbce / wsum + one - a / bb) * inv_n;
        let gr = &mut grad[r];
        for j in 0..per {
            let (zj, gj, wj, p) = (zs[j], gs[j], ws[j], probs[j]);
            let diou = -(wj * gj * bb - a * wj * (one - gj)) / (bb * bb);
            gr[j] = match form {
                Form::Logits => ((wj * (p - gj)) / wsum + diou * p * (one - p)) * inv_n,
                Form::Probs => {
                    let dbce = if zj > eps && zj < one - eps { (zj - gj) / (zj * (one - zj)) } else { T::zero() };
                    (wj * dbce / wsum + diou) * inv_n
                }
            };
        }
    }
    let dz = Tensor::from_vec(z.shape(), grad);
    let back: BackFn<T> = Box::new(move |_, _, gout| vec![Some(dz.map(|v| v * gout.data()[0]))]);
    Ok(g.custom(&[pred], Tensor::scalar(total), back))
}

/// Binary mask at `h x w` by nearest-neighbour resampling.
pub fn mask_at<T: Scalar>(gt: &Tensor<T>, h: usize, w: usize) -> Tensor<T> {
    let (_, _, gh, gw) = gt.dims4();
    if (gh, gw) == (h, w) { gt.clone() } else { kernels::resize_nearest(gt, h, w) }
}

/// Boundary target: the boundary operator applied to the mask, min-max
/// normalised per sample and binarised at 0.5.
pub fn boundary_target<T: Scalar>(mask: &Tensor<T>) -> Tensor<T> {
    let e = geometry::derive_boundary(mask);
    let (en, _) = geometry::normalize_minmax(&e);
    geometry::binarize(&en, T::c(0.5))
}

/// One named supervision term.
#[derive(Clone, Debug)]
pub struct Term {
    pub name: &'static str,
    pub value: f64,
}

/// Per-term values; they sum, in order, to the total.
#[derive(Clone, Debug, Default)]
pub struct Breakdown {
    pub terms: Vec<Term>,
    pub total: f64,
}

pub const MASK_TERMS: [&str; 5] = ["mask_m1", "mask_rst5", "mask_rst4", "mask_rst3", "mask_m3"];
pub const EDGE_TERMS: [&str; 5] = ["edge_e1", "edge_rst5", "edge_rst4", "edge_rst3", "edge_e3"];

/// Deep-supervision total over five mask and five boundary predictions.
/// `gt` is the binary mask at image resolution, `[N, 1, H, W]`.
pub fn total_loss<T: Scalar>(g: &Graph<T>, fv: &ForwardVars, gt: &Tensor<T>, cfg: &LossConfig) -> Result<(Var, Breakdown)> {
    let masks = [(fv.m1, Form::Logits), (fv.rst_mask[0], Form::Probs), (fv.rst_mask[1], Form::Probs), (fv.rst_mask[2], Form::Probs), (fv.m3, Form::Logits)];
    let edges = [(fv.e1, Form::Probs), (fv.rst_edge[0], Form::Probs), (fv.rst_edge[1], Form::Probs), (fv.rst_edge[2], Form::Probs), (fv.e3, Form::Logits)];
    let (_, _, ih, iw) = gt.dims4();
    let mut vars = Vec::with_capacity(10);
    let mut breakdown = Breakdown::default();
    for (names, preds, edge) in [(MASK_TERMS, masks, false), (EDGE_TERMS, edges, true)] {
        for (name, (pred, form)) in names.iter().zip(preds) {
            let pred = match cfg.resolution {
                Resolution::Native => pred,
                Resolution::Image => g.resize(pred, ih, iw),
            };
            let s = g.shape(pred);
            let m = mask_at(gt, s[2], s[3]);
            let target = if edge { boundary_target(&m) } else { m };
            let v = hybrid_loss(g, pred, &target, form, cfg)?;
            breakdown.terms.push(Term { name, value: g.value(v).data()[0].f64() });
            vars.push(v);
        }
    }
    let mut total = vars[0];
    for &v in &vars[1..] {
        total = g.add(total, v);
    }
    breakdown.total = g.value(total).data()[0].f64();
    Ok((total, breakdown))
}
