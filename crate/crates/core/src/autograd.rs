//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation applied to [`Var`] handles. In
//! [`Mode::Train`] each node keeps a backward closure; in [`Mode::Eval`] only
//! values are kept; in [`Mode::Meta`] values are shape-only and the graph just
//! accumulates multiply-accumulate counts.

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::rc::Rc;

use crate::kernels::{self, ConvGeom, PoolGeom};
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::scalar::{gemm, Scalar};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
    Meta,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// `(parent values, output value, output gradient) -> parent gradients`.
pub type BackFn<T> = Box<dyn Fn(&[&Tensor<T>], &Tensor<T>, &Tensor<T>) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    value: Rc<Tensor<T>>,
    parents: Vec<usize>,
    back: Option<BackFn<T>>,
    grad: bool,
}

pub struct Graph<'p, T: Scalar> {
    store: &'p ParamStore<T>,
    mode: Mode,
    nodes: RefCell<Vec<Node<T>>>,
    param_vars: RefCell<HashMap<ParamId, Var>>,
    macs: Cell<u64>,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: HashMap<ParamId, usize>,
}

impl<T: Scalar> Gradients<T> {
    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(&id).and_then(|&n| self.grads[n].as_ref())
    }

    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.params.keys().copied()
    }
}

fn pad4(shape: &[usize]) -> [usize; 4] {
    assert!(shape.len() <= 4, "broadcast ops support rank <= 4, got {shape:?}");
    let mut out = [1; 4];
    out[4 - shape.len()..].copy_from_slice(shape);
    out
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    assert_eq!(a.len(), b.len(), "broadcast requires equal rank: {a:?} vs {b:?}");
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            assert!(x == y || x == 1 || y == 1, "shapes {a:?} and {b:?} do not broadcast");
            x.max(y)
        })
        .collect()
}

fn bstrides(shape: &[usize], out: &[usize; 4]) -> [usize; 4] {
    let s = pad4(shape);
    let mut st = [0; 4];
    let mut acc = 1;
    for d in (0..4).rev() {
        st[d] = if s[d] == 1 && out[d] != 1 { 0 } else { acc };
        acc *= s[d];
    }
    st
}

/// Elementwise `f(a, b)` with numpy-style broadcasting.
fn broadcast_zip<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let shape = broadcast_shape(a.shape(), b.shape());
    if a.is_meta() || b.is_meta() {
        return Tensor::meta(&shape);
    }
    if a.shape() == b.shape() {
        return a.zip_map(b, f);
    }
    let o = pad4(&shape);
    let sa = bstrides(a.shape(), &o);
    let sb = bstrides(b.shape(), &o);
    let (ad, bd) = (a.data(), b.data());
    let mut out = Vec::with_capacity(shape.iter().product());
    for i0 in 0..o[0] {
        for i1 in 0..o[1] {
            for i2 in 0..o[2] {
                let ba = i0 * sa[0] + i1 * sa[1] + i2 * sa[2];
                let bb = i0 * sb[0] + i1 * sb[1] + i2 * sb[2];
                for i3 in 0..o[3] {
                    out.push(f(ad[ba + i3 * sa[3]], bd[bb + i3 * sb[3]]));
                }
            }
        }
    }
    Tensor::from_vec(&shape, out)
}

/// Sums `g` down to `shape` over broadcast dimensions.
fn reduce_to<T: Scalar>(g: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if g.shape() == shape {
        return g.clone();
    }
    let o = pad4(g.shape());
    let st = bstrides(shape, &o);
    let mut out = Tensor::zeros(shape);
    let od = out.data_mut();
    let gd = g.data();
    let mut k = 0;
    for i0 in 0..o[0] {
        for i1 in 0..o[1] {
            for i2 in 0..o[2] {
                let base = i0 * st[0] + i1 * st[1] + i2 * st[2];
                for i3 in 0..o[3] {
                    od[base + i3 * st[3]] += gd[k];
                    k += 1;
                }
            }
        }
    }
    out
}

fn add_into<T: Scalar>(acc: &mut Tensor<T>, g: &Tensor<T>) {
    assert_eq!(acc.shape(), g.shape(), "gradient shape mismatch");
    for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
        *a += b;
    }
}

/// Copies a `[.., h, w]` window from each plane of an NCHW tensor.
fn crop_planes<T: Scalar>(x: &Tensor<T>, y0: usize, x0: usize, h: usize, w: usize) -> Tensor<T> {
    let (n, c, hh, ww) = x.dims4();
    assert!(y0 + h <= hh && x0 + w <= ww, "crop window out of bounds");
    let shape = [n, c, h, w];
    if x.is_meta() {
        return Tensor::meta(&shape);
    }
    let mut out = Vec::with_capacity(n * c * h * w);
    for plane in x.data().chunks(hh * ww) {
        for yy in y0..y0 + h {
            out.extend_from_slice(&plane[yy * ww + x0..yy * ww + x0 + w]);
        }
    }
    Tensor::from_vec(&shape, out)
}

/// Writes each plane of `x` into a zero canvas of size `hh x ww` at `(y0, x0)`.
fn place_planes<T: Scalar>(x: &Tensor<T>, hh: usize, ww: usize, y0: usize, x0: usize) -> Tensor<T> {
    let (n, c, h, w) = x.dims4();
    assert!(y0 + h <= hh && x0 + w <= ww, "placement out of canvas");
    let shape = [n, c, hh, ww];
    if x.is_meta() {
        return Tensor::meta(&shape);
    }
    let mut out = Tensor::zeros(&shape);
    let od = out.data_mut();
    for (pi, plane) in x.data().chunks(h * w).enumerate() {
        let dst = &mut od[pi * hh * ww..(pi + 1) * hh * ww];
        for yy in 0..h {
            dst[(y0 + yy) * ww + x0..(y0 + yy) * ww + x0 + w].copy_from_slice(&plane[yy * w..(yy + 1) * w]);
        }
    }
    out
}

fn channel_slice<T: Scalar>(x: &Tensor<T>, start: usize, len: usize) -> Tensor<T> {
    let (n, c, h, w) = x.dims4();
    assert!(start + len <= c, "channel slice out of range");
    let shape = [n, len, h, w];
    if x.is_meta() {
        return Tensor::meta(&shape);
    }
    let hw = h * w;
    let mut out = Vec::with_capacity(n * len * hw);
    for ni in 0..n {
        let off = (ni * c + start) * hw;
        out.extend_from_slice(&x.data()[off..off + len * hw]);
    }
    Tensor::from_vec(&shape, out)
}

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new(store: &'p ParamStore<T>, mode: Mode) -> Self {
        Self {
            store,
            mode,
            nodes: RefCell::new(Vec::new()),
            param_vars: RefCell::new(HashMap::new()),
            macs: Cell::new(0),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn is_meta(&self) -> bool {
        self.mode == Mode::Meta
    }

    pub fn store(&self) -> &'p ParamStore<T> {
        self.store
    }

    /// Multiply-accumulate operations recorded so far.
    pub fn macs(&self) -> u64 {
        self.macs.get()
    }

    fn count(&self, macs: usize) {
        self.macs.set(self.macs.get() + macs as u64);
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn needs_grad(&self, parents: &[Var]) -> bool {
        if self.mode != Mode::Train {
            return false;
        }
        let nodes = self.nodes.borrow();
        parents.iter().any(|p| nodes[p.0].grad)
    }

    fn push(&self, value: Tensor<T>, parents: &[Var], back: BackFn<T>) -> Var {
        let grad = self.needs_grad(parents);
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            parents: parents.iter().map(|p| p.0).collect(),
            back: if grad { Some(back) } else { None },
            grad,
        });
        Var(nodes.len() - 1)
    }

    fn leaf_node(&self, value: Tensor<T>, grad: bool) -> Var {
        let value = if self.is_meta() && !value.is_meta() { Tensor::meta(value.shape()) } else { value };
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), parents: Vec::new(), back: None, grad: grad && self.mode == Mode::Train });
        Var(nodes.len() - 1)
    }

    /// Constant input (no gradient).
    pub fn input(&self, value: Tensor<T>) -> Var {
        self.leaf_node(value, false)
    }

    /// Input whose gradient is tracked, for sensitivity checks.
    pub fn leaf(&self, value: Tensor<T>) -> Var {
        self.leaf_node(value, true)
    }

    /// The stored parameter `id` as a graph variable (one node per parameter).
    pub fn param(&self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.borrow().get(&id) {
            return v;
        }
        let trainable = self.store.kind(id) == ParamKind::Trainable;
        let value = self.store.get(id).clone();
        let v = self.leaf_node(value, trainable);
        self.param_vars.borrow_mut().insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].grad
    }

    /// Same value, cut from the tape.
    pub fn detach(&self, v: Var) -> Var {
        let value = (*self.value(v)).clone();
        self.input(value)
    }

    /// Records a user-defined op. `back` receives parent values in order.
    pub fn custom(&self, parents: &[Var], value: Tensor<T>, back: BackFn<T>) -> Var {
        self.push(value, parents, back)
    }

    fn unary(&self, a: Var, value: Tensor<T>, back: BackFn<T>) -> Var {
        self.push(value, &[a], back)
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let out = broadcast_zip(&va, &vb, |x, y| x + y);
        self.push(
            out,
            &[a, b],
            Box::new(|p, _, g| vec![Some(reduce_to(g, p[0].shape())), Some(reduce_to(g, p[1].shape()))]),
        )
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let out = broadcast_zip(&va, &vb, |x, y| x - y);
        self.push(
            out,
            &[a, b],
            Box::new(|p, _, g| {
                vec![Some(reduce_to(g, p[0].shape())), Some(reduce_to(&g.map(|v| -v), p[1].shape()))]
            }),
        )
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let out = broadcast_zip(&va, &vb, |x, y| x * y);
        self.push(
            out,
            &[a, b],
            Box::new(|p, _, g| {
                let ga = reduce_to(&broadcast_zip(g, p[1], |u, v| u * v), p[0].shape());
                let gb = reduce_to(&broadcast_zip(g, p[0], |u, v| u * v), p[1].shape());
                vec![Some(ga), Some(gb)]
            }),
        )
    }

    pub fn div(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let out = broadcast_zip(&va, &vb, |x, y| x / y);
        self.push(
            out,
            &[a, b],
            Box::new(|p, out, g| {
                let ga = reduce_to(&broadcast_zip(g, p[1], |u, v| u / v), p[0].shape());
                let q = broadcast_zip(out, p[1], |o, v| o / v);
                let gb = reduce_to(&g.zip_map(&q, |u, v| -u * v), p[1].shape());
                vec![Some(ga), Some(gb)]
            }),
        )
    }

    pub fn scale(&self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|v| v * s);
        self.unary(a, out, Box::new(move |_, _, g| vec![Some(g.map(|v| v * s))]))
    }

    pub fn add_scalar(&self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|v| v + s);
        self.unary(a, out, Box::new(|_, _, g| vec![Some(g.clone())]))
    }

    pub fn relu(&self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.max(T::zero()));
        self.unary(
            a,
            out,
            Box::new(|p, _, g| vec![Some(g.zip_map(p[0], |gv, x| if x > T::zero() { gv } else { T::zero() }))]),
        )
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.unary(a, out, Box::new(|_, y, g| vec![Some(g.zip_map(y, |gv, s| gv * s * (T::one() - s)))]))
    }

    pub fn abs(&self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.abs());
        self.unary(
            a,
            out,
            Box::new(|p, _, g| {
                vec![Some(g.zip_map(p[0], |gv, x| {
                    if x > T::zero() {
                        gv
                    } else if x < T::zero() {
                        -gv
                    } else {
                        T::zero()
                    }
                }))]
            }),
        )
    }

    /// Sum of all elements as a `[1]` tensor.
    pub fn sum_all(&self, a: Var) -> Var {
        let va = self.value(a);
        let out = if va.is_meta() { Tensor::meta(&[1]) } else { Tensor::scalar(va.sum()) };
        self.unary(a, out, Box::new(|p, _, g| vec![Some(Tensor::full(p[0].shape(), g.data()[0]))]))
    }

    /// Spatial mean: `[N, C, H, W] -> [N, C, 1, 1]`.
    pub fn mean_hw(&self, a: Var) -> Var {
        let va = self.value(a);
        let (n, c, h, w) = va.dims4();
        let out = if va.is_meta() {
            Tensor::meta(&[n, c, 1, 1])
        } else {
            let inv = T::one() / T::from_usize(h * w).unwrap();
            Tensor::from_vec(&[n, c, 1, 1], va.data().chunks(h * w).map(|p| p.iter().copied().sum::<T>() * inv).collect())
        };
        self.unary(
            a,
            out,
            Box::new(move |p, _, g| {
                let inv = T::one() / T::from_usize(h * w).unwrap();
                let mut gx = Tensor::zeros(p[0].shape());
                for (plane, &gv) in gx.data_mut().chunks_mut(h * w).zip(g.data()) {
                    plane.iter_mut().for_each(|v| *v = gv * inv);
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Channel mean: `[N, C, H, W] -> [N, 1, H, W]`.
    pub fn mean_c(&self, a: Var) -> Var {
        let va = self.value(a);
        let (n, c, h, w) = va.dims4();
        let hw = h * w;
        let out = if va.is_meta() {
            Tensor::meta(&[n, 1, h, w])
        } else {
            let inv = T::one() / T::from_usize(c).unwrap();
            let mut o = vec![T::zero(); n * hw];
            for ni in 0..n {
                for ci in 0..c {
                    let src = &va.data()[(ni * c + ci) * hw..(ni * c + ci + 1) * hw];
                    for (d, &s) in o[ni * hw..(ni + 1) * hw].iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
            o.iter_mut().for_each(|v| *v *= inv);
            Tensor::from_vec(&[n, 1, h, w], o)
        };
        self.unary(
            a,
            out,
            Box::new(move |p, _, g| {
                let inv = T::one() / T::from_usize(c).unwrap();
                let mut gx = Tensor::zeros(p[0].shape());
                let gd = g.data();
                for ni in 0..n {
                    for ci in 0..c {
                        let dst = &mut gx.data_mut()[(ni * c + ci) * hw..(ni * c + ci + 1) * hw];
                        for (d, &s) in dst.iter_mut().zip(&gd[ni * hw..(ni + 1) * hw]) {
                            *d = s * inv;
                        }
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    pub fn conv2d(&self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Var {
        let (vx, vw) = (self.value(x), self.value(w));
        let vb = b.map(|b| self.value(b));
        let out = kernels::conv2d_forward(&vx, &vw, vb.as_deref(), geom);
        let (_, co, ho, wo) = out.dims4();
        let (cin, k) = (vw.shape()[1], vw.shape()[2]);
        self.count(out.shape()[0] * co * cin * k * k * ho * wo);
        let mut parents = vec![x, w];
        if let Some(b) = b {
            parents.push(b);
        }
        let has_bias = b.is_some();
        let need_dx = self.requires_grad(x);
        self.push(
            out,
            &parents,
            Box::new(move |p, _, g| {
                let (dx, dw, db) = kernels::conv2d_backward(p[0], p[1], g, geom, need_dx, has_bias);
                let mut grads = vec![dx, Some(dw)];
                if has_bias {
                    grads.push(db);
                }
                grads
            }),
        )
    }

    pub fn max_pool(&self, x: Var, geom: PoolGeom) -> Var {
        let vx = self.value(x);
        let (out, arg) = kernels::max_pool2d_forward(&vx, geom);
        self.unary(x, out, Box::new(move |p, _, g| vec![Some(kernels::max_pool2d_backward(p[0].shape(), &arg, g))]))
    }

    pub fn avg_pool(&self, x: Var, geom: PoolGeom) -> Var {
        let vx = self.value(x);
        let out = kernels::avg_pool2d_forward(&vx, geom);
        self.unary(x, out, Box::new(move |p, _, g| vec![Some(kernels::avg_pool2d_backward(p[0].shape(), geom, g))]))
    }

    /// Bilinear resize to `h x w` (half-pixel centres).
    pub fn resize(&self, x: Var, h: usize, w: usize) -> Var {
        let vx = self.value(x);
        if vx.shape()[2] == h && vx.shape()[3] == w {
            return x;
        }
        let out = kernels::resize_bilinear_forward(&vx, h, w);
        self.unary(x, out, Box::new(|p, _, g| vec![Some(kernels::resize_bilinear_backward(p[0].shape(), g))]))
    }

    /// Concatenation along channels.
    pub fn concat_c(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let vals: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
        let (n, _, h, w) = vals[0].dims4();
        let widths: Vec<usize> = vals
            .iter()
            .map(|v| {
                let (vn, vc, vh, vw) = v.dims4();
                assert!(vn == n && vh == h && vw == w, "concat_c: mismatched shapes {:?} vs {:?}", v.shape(), vals[0].shape());
                vc
            })
            .collect();
        let c: usize = widths.iter().sum();
        let hw = h * w;
        let shape = [n, c, h, w];
        let out = if vals.iter().any(|v| v.is_meta()) {
            Tensor::meta(&shape)
        } else {
            let mut o = Vec::with_capacity(n * c * hw);
            for ni in 0..n {
                for (v, &wc) in vals.iter().zip(&widths) {
                    o.extend_from_slice(&v.data()[ni * wc * hw..(ni + 1) * wc * hw]);
                }
            }
            Tensor::from_vec(&shape, o)
        };
        self.push(
            out,
            parts,
            Box::new(move |_, _, g| {
                let mut start = 0;
                widths
                    .iter()
                    .map(|&wc| {
                        let s = channel_slice(g, start, wc);
                        start += wc;
                        Some(s)
                    })
                    .collect()
            }),
        )
    }

    pub fn slice_c(&self, x: Var, start: usize, len: usize) -> Var {
        let vx = self.value(x);
        let out = channel_slice(&vx, start, len);
        self.unary(
            x,
            out,
            Box::new(move |p, _, g| {
                let (n, c, h, w) = p[0].dims4();
                let hw = h * w;
                let mut gx = Tensor::zeros(&[n, c, h, w]);
                for ni in 0..n {
                    let dst = (ni * c + start) * hw;
                    gx.data_mut()[dst..dst + len * hw].copy_from_slice(&g.data()[ni * len * hw..(ni + 1) * len * hw]);
                }
                vec![Some(gx)]
            }),
        )
    }

    pub fn slice_batch(&self, x: Var, start: usize, len: usize) -> Var {
        let out = self.value(x).slice_batch(start, len);
        self.unary(
            x,
            out,
            Box::new(move |p, _, g| {
                let per: usize = p[0].shape()[1..].iter().product();
                let mut gx = Tensor::zeros(p[0].shape());
                gx.data_mut()[start * per..(start + len) * per].copy_from_slice(g.data());
                vec![Some(gx)]
            }),
        )
    }

    pub fn cat_batch(&self, parts: &[Var]) -> Var {
        let vals: Vec<Tensor<T>> = parts.iter().map(|&p| (*self.value(p)).clone()).collect();
        let sizes: Vec<usize> = vals.iter().map(|v| v.shape()[0]).collect();
        let out = Tensor::cat_batch(&vals);
        self.push(
            out,
            parts,
            Box::new(move |_, _, g| {
                let mut start = 0;
                sizes
                    .iter()
                    .map(|&s| {
                        let t = g.slice_batch(start, s);
                        start += s;
                        Some(t)
                    })
                    .collect()
            }),
        )
    }

    /// Spatial window `[y0, y0+h) x [x0, x0+w)` of every plane.
    pub fn crop_hw(&self, x: Var, y0: usize, x0: usize, h: usize, w: usize) -> Var {
        let vx = self.value(x);
        let out = crop_planes(&vx, y0, x0, h, w);
        self.unary(
            x,
            out,
            Box::new(move |p, _, g| {
                let (_, _, hh, ww) = p[0].dims4();
                vec![Some(place_planes(g, hh, ww, y0, x0))]
            }),
        )
    }

    /// Places every plane into a zero canvas of size `hh x ww` at `(y0, x0)`.
    pub fn place_hw(&self, x: Var, hh: usize, ww: usize, y0: usize, x0: usize) -> Var {
        let vx = self.value(x);
        let (_, _, h, w) = vx.dims4();
        let out = place_planes(&vx, hh, ww, y0, x0);
        self.unary(x, out, Box::new(move |_, _, g| vec![Some(crop_planes(g, y0, x0, h, w))]))
    }

    pub fn group_norm(&self, x: Var, gamma: Var, beta: Var, groups: usize, eps: T) -> Var {
        let (vx, vg, vb) = (self.value(x), self.value(gamma), self.value(beta));
        let (out, cache) = kernels::group_norm_forward(&vx, &vg, &vb, groups, eps);
        self.push(
            out,
            &[x, gamma, beta],
            Box::new(move |p, _, g| {
                let cache = cache.as_ref().expect("group norm cache");
                let (dx, dg, db) = kernels::group_norm_backward(p[0].shape(), p[1], groups, cache, g);
                vec![Some(dx), Some(dg), Some(db)]
            }),
        )
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Var {
        let vx = self.value(x);
        let out = if vx.is_meta() {
            assert_eq!(vx.numel(), shape.iter().product::<usize>(), "cannot reshape {:?} into {shape:?}", vx.shape());
            Tensor::meta(shape)
        } else {
            (*vx).clone().reshape(shape)
        };
        self.unary(x, out, Box::new(|p, _, g| vec![Some(g.clone().reshape(p[0].shape()))]))
    }

    /// Batched matrix product `op(a) * op(b)` on `[B, r, c]` tensors.
    pub fn bmm(&self, a: Var, b: Var, trans_a: bool, trans_b: bool) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.rank(), 3, "bmm expects rank-3 operands");
        assert_eq!(vb.rank(), 3, "bmm expects rank-3 operands");
        let bsz = va.shape()[0];
        assert_eq!(vb.shape()[0], bsz, "bmm batch mismatch");
        let (m, k) = if trans_a { (va.shape()[2], va.shape()[1]) } else { (va.shape()[1], va.shape()[2]) };
        let (k2, n) = if trans_b { (vb.shape()[2], vb.shape()[1]) } else { (vb.shape()[1], vb.shape()[2]) };
        assert_eq!(k, k2, "bmm inner dimension mismatch");
        self.count(bsz * m * k * n);
        let shape = [bsz, m, n];
        let out = if va.is_meta() || vb.is_meta() {
            Tensor::meta(&shape)
        } else {
            let mut o = vec![T::zero(); bsz * m * n];
            for bi in 0..bsz {
                gemm(
                    m,
                    k,
                    n,
                    &va.data()[bi * m * k..(bi + 1) * m * k],
                    trans_a,
                    &vb.data()[bi * k * n..(bi + 1) * k * n],
                    trans_b,
                    T::zero(),
                    &mut o[bi * m * n..(bi + 1) * m * n],
                );
            }
            Tensor::from_vec(&shape, o)
        };
        self.push(
            out,
            &[a, b],
            Box::new(move |p, _, g| {
                let (ad, bd, gd) = (p[0].data(), p[1].data(), g.data());
                let mut da = vec![T::zero(); bsz * m * k];
                let mut db = vec![T::zero(); bsz * k * n];
                for bi in 0..bsz {
                    let a_s = &ad[bi * m * k..(bi + 1) * m * k];
                    let b_s = &bd[bi * k * n..(bi + 1) * k * n];
                    let g_s = &gd[bi * m * n..(bi + 1) * m * n];
                    let da_s = &mut da[bi * m * k..(bi + 1) * m * k];
                    if trans_a {
                        gemm(k, n, m, b_s, trans_b, g_s, true, T::zero(), da_s);
                    } else {
                        gemm(m, n, k, g_s, false, b_s, !trans_b, T::zero(), da_s);
                    }
                    let db_s = &mut db[bi * k * n..(bi + 1) * k * n];
                    if trans_b {
                        gemm(n, m, k, g_s, true, a_s, trans_a, T::zero(), db_s);
                    } else {
                        gemm(k, m, n, a_s, !trans_a, g_s, false, T::zero(), db_s);
                    }
                }
                vec![
                    Some(Tensor::from_vec(p[0].shape(), da)),
                    Some(Tensor::from_vec(p[1].shape(), db)),
                ]
            }),
        )
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&self, x: Var) -> Var {
        let vx = self.value(x);
        let d = *vx.shape().last().expect("softmax on rank-0 tensor");
        let out = if vx.is_meta() {
            Tensor::meta(vx.shape())
        } else {
            let mut o = Vec::with_capacity(vx.numel());
            for row in vx.data().chunks(d) {
                let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
                let start = o.len();
                let mut s = T::zero();
                for &v in row {
                    let e = (v - mx).exp();
                    s += e;
                    o.push(e);
                }
                o[start..].iter_mut().for_each(|v| *v /= s);
            }
            Tensor::from_vec(vx.shape(), o)
        };
        self.unary(
            x,
            out,
            Box::new(move |_, y, g| {
                let mut gx = Vec::with_capacity(y.numel());
                for (yr, gr) in y.data().chunks(d).zip(g.data().chunks(d)) {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    gx.extend(yr.iter().zip(gr).map(|(&a, &b)| a * (b - dot)));
                }
                vec![Some(Tensor::from_vec(y.shape(), gx))]
            }),
        )
    }

    /// Per-plane `(x - min) / (max - min)`. Planes whose range is below
    /// `T::epsilon()` become zero and pass no gradient.
    pub fn minmax_norm(&self, x: Var) -> Var {
        let vx = self.value(x);
        let (_, _, h, w) = vx.dims4();
        let hw = h * w;
        if vx.is_meta() {
            let out = Tensor::meta(vx.shape());
            return self.unary(x, out, Box::new(|p, _, _| vec![Some(Tensor::zeros(p[0].shape()))]));
        }
        let mut stats = Vec::new();
        let mut o = Vec::with_capacity(vx.numel());
        for plane in vx.data().chunks(hw) {
            let (mut imin, mut imax) = (0, 0);
            for (i, &v) in plane.iter().enumerate() {
                if v < plane[imin] {
                    imin = i;
                }
                if v > plane[imax] {
                    imax = i;
                }
            }
            let range = plane[imax] - plane[imin];
            if range > T::epsilon() {
                o.extend(plane.iter().map(|&v| (v - plane[imin]) / range));
                stats.push(Some((imin, imax, range)));
            } else {
                o.extend(std::iter::repeat_n(T::zero(), hw));
                stats.push(None);
            }
        }
        let out = Tensor::from_vec(vx.shape(), o);
        self.unary(
            x,
            out,
            Box::new(move |_, y, g| {
                let mut gx = Tensor::zeros(y.shape());
                let gxd = gx.data_mut();
                for (pi, st) in stats.iter().enumerate() {
                    let Some((imin, imax, range)) = *st else { continue };
                    let base = pi * hw;
                    let (mut to_min, mut to_max) = (T::zero(), T::zero());
                    for j in 0..hw {
                        let (gv, yv) = (g.data()[base + j], y.data()[base + j]);
                        gxd[base + j] += gv / range;
                        to_min += gv * (yv - T::one()) / range;
                        to_max -= gv * yv / range;
                    }
                    gxd[base + imin] += to_min;
                    gxd[base + imax] += to_max;
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Reverse pass from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[loss.0].value.numel(), 1, "backward requires a scalar output");
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        if nodes[loss.0].grad {
            grads[loss.0] = Some(Tensor::ones(nodes[loss.0].value.shape()));
        }
        for id in (0..=loss.0).rev() {
            let node = &nodes[id];
            let Some(back) = node.back.as_ref() else { continue };
            let Some(g) = grads[id].take() else { continue };
            let parent_vals: Vec<&Tensor<T>> = node.parents.iter().map(|&p| nodes[p].value.as_ref()).collect();
            let pg = back(&parent_vals, &node.value, &g);
            for (&p, gp) in node.parents.iter().zip(pg) {
                let Some(gp) = gp else { continue };
                if !nodes[p].grad {
                    continue;
                }
                match grads[p].as_mut() {
                    Some(acc) => add_into(acc, &gp),
                    None => grads[p] = Some(gp),
                }
            }
        }
        let params = self.param_vars.borrow().iter().map(|(&k, v)| (k, v.0)).collect();
        Gradients { grads, params }
    }
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(shape: &[usize], seed: usize) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|i| (((i + seed) * 7919) % 97) as f64 / 40.0 - 1.2).collect())
    }

    /// Central-difference check of `f` at `x` against the tape gradient.
    fn check(x: Tensor<f64>, f: impl Fn(&Graph<f64>, Var) -> Var) {
        let store = ParamStore::new();
        let g = Graph::new(&store, Mode::Train);
        let v = g.leaf(x.clone());
        let out = f(&g, v);
        let loss = g.sum_all(out);
        let grads = g.backward(loss);
        let analytic = grads.wrt(v).expect("gradient").clone();
        let eval = |t: Tensor<f64>| {
            let g = Graph::new(&store, Mode::Eval);
            let v = g.input(t);
            let o = f(&g, v);
            g.value(o).sum()
        };
        let h = 1e-6;
        for i in 0..x.numel() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let fd = (eval(xp) - eval(xm)) / (2.0 * h);
            let an = analytic.data()[i];
            assert!((fd - an).abs() <= 1e-6 * (1.0 + fd.abs()), "index {i}: fd {fd} vs analytic {an}");
        }
    }

    #[test]
    fn broadcast_mul_and_div_gradients() {
        let w = ramp(&[1, 3, 1, 1], 5).map(|v| v + 2.0);
        check(ramp(&[2, 3, 2, 2], 0), |g, x| {
            let c = g.input(w.clone());
            let m = g.mul(x, c);
            g.div(m, c)
        });
        check(ramp(&[1, 3, 1, 1], 3).map(|v| v + 3.0), |g, x| {
            let big = g.input(ramp(&[2, 3, 2, 2], 1));
            let q = g.div(big, x);
            g.mul(q, q)
        });
    }

    #[test]
    fn conv_pool_resize_chain_gradient() {
        let wt = ramp(&[2, 3, 3, 3], 11).map(|v| v * 0.3);
        check(ramp(&[1, 3, 5, 6], 2), |g, x| {
            let w = g.input(wt.clone());
            let y = g.conv2d(x, w, None, ConvGeom::new(1, 2, 2));
            let y = g.sigmoid(y);
            let y = g.avg_pool(y, PoolGeom::new(2, 2, 0, true));
            let y = g.resize(y, 7, 4);
            g.mul(y, y)
        });
    }

    #[test]
    fn attention_style_gradient() {
        check(ramp(&[2, 3, 4], 9).map(|v| v * 0.5), |g, x| {
            let s = g.bmm(x, x, true, false);
            let a = g.softmax_last(s);
            let o = g.bmm(x, a, false, true);
            g.mul(o, o)
        });
        check(ramp(&[1, 4, 3], 4), |g, x| {
            let other = g.input(ramp(&[1, 3, 2], 7));
            let y = g.bmm(x, other, false, false);
            let z = g.bmm(other, x, true, true);
            let zz = g.mul(z, z);
            let t = g.sum_all(zz);
            let yy = g.sum_all(y);
            g.add(t, yy)
        });
    }

    #[test]
    fn structural_ops_gradient() {
        check(ramp(&[2, 3, 4, 4], 1), |g, x| {
            let a = g.slice_c(x, 1, 2);
            let b = g.crop_hw(a, 1, 0, 2, 3);
            let b = g.place_hw(b, 4, 5, 2, 1);
            let cat = g.concat_c(&[b, b]);
            let s0 = g.slice_batch(cat, 1, 1);
            let s1 = g.slice_batch(cat, 0, 1);
            let r = g.cat_batch(&[s0, s1]);
            let m = g.mean_hw(r);
            let mc = g.mean_c(r);
            let p = g.mul(r, m);
            let p = g.add(p, mc);
            g.mul(p, p)
        });
    }

    #[test]
    fn group_norm_and_minmax_gradient() {
        let gamma = ramp(&[4], 3).map(|v| v + 1.5);
        let beta = ramp(&[4], 8);
        check(ramp(&[2, 4, 3, 3], 5), |g, x| {
            let ga = g.input(gamma.clone());
            let be = g.input(beta.clone());
            let ga = g.reshape(ga, &[4]);
            let y = g.group_norm(x, ga, be, 2, 1e-5);
            let y2 = g.mul(y, y);
            let n = g.minmax_norm(y);
            g.add(y2, n)
        });
    }

    #[test]
    fn relu_abs_scale_gradient() {
        check(ramp(&[1, 2, 3, 3], 0).map(|v| v + 0.013), |g, x| {
            let r = g.relu(x);
            let a = g.abs(x);
            let s = g.scale(a, 0.7);
            let s = g.add_scalar(s, 0.2);
            let m = g.sub(r, s);
            g.mul(m, m)
        });
    }

    #[test]
    fn param_grads_are_collected_once_per_param() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::from_vec(&[1], vec![3.0]), ParamKind::Trainable);
        let g = Graph::new(&store, Mode::Train);
        let a = g.param(id);
        let b = g.param(id);
        assert_eq!(a, b);
        let p = g.mul(a, b);
        let grads = g.backward(p);
        assert_eq!(grads.param(id).unwrap().data(), &[6.0]);
    }

    #[test]
    fn eval_mode_records_no_backward() {
        let mut store = ParamStore::<f32>::new();
        let id = store.add("w", Tensor::ones(&[1, 1, 1, 1]), ParamKind::Trainable);
        let g = Graph::new(&store, Mode::Eval);
        let w = g.param(id);
        let x = g.input(Tensor::ones(&[1, 1, 2, 2]));
        let y = g.conv2d(x, w, None, ConvGeom::new(1, 0, 1));
        assert!(!g.requires_grad(y));
        assert_eq!(g.macs(), 4);
    }

    #[test]
    fn meta_mode_tracks_shapes_and_macs() {
        let mut store = ParamStore::<f32>::new();
        let id = store.add("w", Tensor::zeros(&[8, 3, 3, 3]), ParamKind::Trainable);
        let g = Graph::new(&store, Mode::Meta);
        let x = g.input(Tensor::meta(&[1, 3, 16, 16]));
        let w = g.param(id);
        let y = g.conv2d(x, w, None, ConvGeom::new(2, 1, 1));
        assert_eq!(g.shape(y), vec![1, 8, 8, 8]);
        assert!(g.value(y).is_meta());
        assert_eq!(g.macs(), 8 * 3 * 9 * 64);
    }
}
