//! Central-difference verification of tape gradients at double precision.

use crate::autograd::{Graph, Mode, Var};
use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Gradients smaller than this are compared absolutely rather than relatively.
pub const ABS_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradReport {
    /// Largest `|analytic − numeric| / max(|analytic|, |numeric|, ABS_FLOOR)`.
    pub max_rel_error: f64,
    pub checked: usize,
    /// Name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
}

impl GradReport {
    fn record(&mut self, analytic: f64, numeric: f64, name: &str, index: usize) {
        let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ABS_FLOOR);
        self.checked += 1;
        if err > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = self.max_rel_error.max(err);
            self.worst = Some((name.to_string(), index));
        }
    }
}

/// Evenly spaced flat indices, at most `count` of them.
fn probes(numel: usize, count: usize) -> Vec<usize> {
    if numel <= count {
        return (0..numel).collect();
    }
    (0..count).map(|k| k * numel / count + (numel / count) / 2).collect()
}

fn scalar(g: &Graph<f64>, v: Var) -> f64 {
    g.value(v).sum()
}

/// Checks the gradient of the scalar `loss` with respect to up to
/// `per_param` entries of each parameter in `ids`.
pub fn check_params(
    store: &mut ParamStore<f64>,
    ids: &[ParamId],
    per_param: usize,
    h: f64,
    loss: impl Fn(&Graph<f64>) -> Result<Var>,
) -> Result<GradReport> {
    let grads = {
        let g = Graph::new(store, Mode::Train);
        let l = loss(&g)?;
        g.backward(l)
    };
    let mut report = GradReport::default();
    for &id in ids {
        let name = store.name(id).to_string();
        let zeros = Tensor::zeros(store.get(id).shape());
        let analytic = grads.param(id).unwrap_or(&zeros).clone();
        for i in probes(analytic.numel(), per_param) {
            let orig = store.get(id).data()[i];
            let mut eval = |v: f64| -> Result<f64> {
                store.get_mut(id).data_mut()[i] = v;
                let g = Graph::new(store, Mode::Eval);
                let l = loss(&g)?;
                Ok(scalar(&g, l))
            };
            let numeric = (eval(orig + h)? - eval(orig - h)?) / (2.0 * h);
            store.get_mut(id).data_mut()[i] = orig;
            report.record(analytic.data()[i], numeric, &name, i);
        }
    }
    Ok(report)
}

/// Checks the gradient of the scalar `f(x)` with respect to up to `count`
/// entries of the input `x`.
pub fn check_input(
    store: &ParamStore<f64>,
    x: &Tensor<f64>,
    count: usize,
    h: f64,
    f: impl Fn(&Graph<f64>, Var) -> Result<Var>,
) -> Result<GradReport> {
    let analytic = {
        let g = Graph::new(store, Mode::Train);
        let v = g.leaf(x.clone());
        let l = f(&g, v)?;
        g.backward(l).wrt(v).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()))
    };
    let eval = |t: Tensor<f64>| -> Result<f64> {
        let g = Graph::new(store, Mode::Eval);
        let v = g.input(t);
        let l = f(&g, v)?;
        Ok(scalar(&g, l))
    };
    let mut report = GradReport::default();
    for i in probes(x.numel(), count) {
        let mut xp = x.clone();
        xp.data_mut()[i] += h;
        let mut xm = x.clone();
        xm.data_mut()[i] -= h;
        let numeric = (eval(xp)? - eval(xm)?) / (2.0 * h);
        report.record(analytic.data()[i], numeric, "input", i);
    }
    Ok(report)
}
