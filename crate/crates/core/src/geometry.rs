//! Map normalisation, binarisation and the box geometry that links the
//! coarse stage to the cropped second stage.

use crate::autograd::{Graph, Var};
use crate::kernels::{self, PoolGeom};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const BOUNDARY_POOL: PoolGeom = PoolGeom::new(3, 1, 1, false);

/// `|avgpool3(m) - m|` with stride 1 and size-preserving padding.
pub fn derive_boundary<T: Scalar>(m: &Tensor<T>) -> Tensor<T> {
    let pooled = kernels::avg_pool2d_forward(m, BOUNDARY_POOL);
    pooled.zip_map(m, |a, b| (a - b).abs())
}

/// In-graph [`derive_boundary`].
pub fn derive_boundary_var<T: Scalar>(g: &Graph<T>, m: Var) -> Var {
    let pooled = g.avg_pool(m, BOUNDARY_POOL);
    let d = g.sub(pooled, m);
    g.abs(d)
}

/// Per-plane min-max normalisation. Planes whose range does not exceed the
/// scalar epsilon become zero and are flagged as empty.
pub fn normalize_minmax<T: Scalar>(m: &Tensor<T>) -> (Tensor<T>, Vec<bool>) {
    let (n, c, h, w) = m.dims4();
    let mut out = Vec::with_capacity(m.numel());
    let mut empty = Vec::with_capacity(n * c);
    for plane in m.data().chunks(h * w) {
        let lo = plane.iter().copied().fold(T::infinity(), T::min);
        let hi = plane.iter().copied().fold(T::neg_infinity(), T::max);
        let range = hi - lo;
        if range > T::epsilon() {
            out.extend(plane.iter().map(|&v| (v - lo) / range));
            empty.push(false);
        } else {
            out.extend(std::iter::repeat_n(T::zero(), h * w));
            empty.push(true);
        }
    }
    (Tensor::from_vec(m.shape(), out), empty)
}

/// 1 where strictly above `tau`, else 0.
pub fn binarize<T: Scalar>(m: &Tensor<T>, tau: T) -> Tensor<T> {
    m.map(|v| if v > tau { T::one() } else { T::zero() })
}

/// Integer box in feature coordinates, inclusive on both ends.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rect {
    pub x_min: usize,
    pub y_min: usize,
    pub x_max: usize,
    pub y_max: usize,
}

impl Rect {
    pub fn full(h: usize, w: usize) -> Self {
        Self { x_min: 0, y_min: 0, x_max: w - 1, y_max: h - 1 }
    }

    pub fn width(&self) -> usize {
        self.x_max - self.x_min + 1
    }

    pub fn height(&self) -> usize {
        self.y_max - self.y_min + 1
    }

    pub fn contains(&self, other: &Rect) -> bool {
        self.x_min <= other.x_min && self.y_min <= other.y_min && self.x_max >= other.x_max && self.y_max >= other.y_max
    }

    pub fn contains_point(&self, y: usize, x: usize) -> bool {
        (self.y_min..=self.y_max).contains(&y) && (self.x_min..=self.x_max).contains(&x)
    }
}

/// Expanded, clamped box together with the detected extent it came from.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BBox {
    pub rect: Rect,
    /// Extent of the nonzero region before expansion; `None` when the mask
    /// was empty and the full grid was used.
    pub detected: Option<Rect>,
    pub ratio: f64,
    pub grid: (usize, usize),
}

impl BBox {
    pub fn full_grid(h: usize, w: usize, ratio: f64) -> Self {
        Self { rect: Rect::full(h, w), detected: None, ratio, grid: (h, w) }
    }

    pub fn is_fallback(&self) -> bool {
        self.detected.is_none()
    }
}

/// Square of side `r * l` about the centre of `ext`, before clamping, as
/// `(x_min, y_min, x_max, y_max)`. Min edges are floored and max edges ceiled.
pub fn expand_unclamped(ext: &Rect, r: f64) -> (i64, i64, i64, i64) {
    let xc = (ext.x_min + ext.x_max) as f64 / 2.0;
    let yc = (ext.y_min + ext.y_max) as f64 / 2.0;
    let l = (ext.y_max - ext.y_min).max(ext.x_max - ext.x_min) as f64;
    let half = r * l / 2.0;
    // tolerance keeps exact halves from drifting across an integer
    let fl = |v: f64| (v + 1e-9).floor() as i64;
    let cl = |v: f64| (v - 1e-9).ceil() as i64;
    (fl(xc - half), fl(yc - half), cl(xc + half), cl(yc + half))
}

/// Nonzero extent of a binary plane, or `None` when empty.
pub fn extent<T: Scalar>(plane: &[T], h: usize, w: usize) -> Option<Rect> {
    let mut rows = (usize::MAX, 0);
    let mut cols = (usize::MAX, 0);
    for y in 0..h {
        for x in 0..w {
            if plane[y * w + x] > T::zero() {
                rows = (rows.0.min(y), rows.1.max(y));
                cols = (cols.0.min(x), cols.1.max(x));
            }
        }
    }
    (rows.0 != usize::MAX).then_some(Rect { x_min: cols.0, y_min: rows.0, x_max: cols.1, y_max: rows.1 })
}

/// Box for one binary plane of size `h x w`, computed on the `grid` after
/// nearest-neighbour upsampling.
pub fn compute_bbox<T: Scalar>(plane: &[T], h: usize, w: usize, r: f64, grid: (usize, usize)) -> BBox {
    let (gh, gw) = grid;
    let src = Tensor::from_vec(&[1, 1, h, w], plane.to_vec());
    let up = kernels::resize_nearest(&src, gh, gw);
    let Some(ext) = extent(up.data(), gh, gw) else {
        return BBox::full_grid(gh, gw, r);
    };
    let (x0, y0, x1, y1) = expand_unclamped(&ext, r);
    let clamp = |v: i64, hi: usize| v.clamp(0, hi as i64 - 1) as usize;
    let rect = Rect { x_min: clamp(x0, gw), y_min: clamp(y0, gh), x_max: clamp(x1, gw), y_max: clamp(y1, gh) };
    BBox { rect, detected: Some(ext), ratio: r, grid }
}

/// Crops each sample to its box and resizes to `s x s` (bilinear).
pub fn crop_resize<T: Scalar>(g: &Graph<T>, x: Var, boxes: &[BBox], s: usize) -> Var {
    let parts: Vec<Var> = boxes
        .iter()
        .enumerate()
        .map(|(i, b)| {
            let xi = g.slice_batch(x, i, 1);
            let r = b.rect;
            let c = g.crop_hw(xi, r.y_min, r.x_min, r.height(), r.width());
            g.resize(c, s, s)
        })
        .collect();
    if parts.len() == 1 { parts[0] } else { g.cat_batch(&parts) }
}

/// Resizes each sample to its box extent and writes it into a zero canvas of
/// the box grid size.
pub fn restore<T: Scalar>(g: &Graph<T>, c: Var, boxes: &[BBox]) -> Var {
    let parts: Vec<Var> = boxes
        .iter()
        .enumerate()
        .map(|(i, b)| {
            let ci = g.slice_batch(c, i, 1);
            let r = b.rect;
            let fitted = g.resize(ci, r.height(), r.width());
            g.place_hw(fitted, b.grid.0, b.grid.1, r.y_min, r.x_min)
        })
        .collect();
    if parts.len() == 1 { parts[0] } else { g.cat_batch(&parts) }
}
