//! Dense row-major tensors.
//!
//! Feature maps are `[N, C, H, W]`. A tensor may also be a *meta* tensor that
//! carries a shape but no storage; those flow through shape-only forward
//! passes used for complexity accounting.

use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    meta: bool,
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Self {
        let numel: usize = shape.iter().product();
        assert_eq!(
            numel,
            data.len(),
            "tensor data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Self { shape: shape.to_vec(), data, meta: false }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; numel], meta: false }
    }

    pub fn scalar(value: T) -> Self {
        Self::from_vec(&[1], vec![value])
    }

    /// Shape-only tensor with no storage.
    pub fn meta(shape: &[usize]) -> Self {
        Self { shape: shape.to_vec(), data: Vec::new(), meta: true }
    }

    pub fn is_meta(&self) -> bool {
        self.meta
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// `(n, c, h, w)` of a rank-4 tensor.
    pub fn dims4(&self) -> (usize, usize, usize, usize) {
        assert_eq!(self.shape.len(), 4, "expected NCHW tensor, got shape {:?}", self.shape);
        (self.shape[0], self.shape[1], self.shape[2], self.shape[3])
    }

    pub fn data(&self) -> &[T] {
        debug_assert!(!self.meta, "reading data of a meta tensor");
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        debug_assert!(!self.meta, "writing data of a meta tensor");
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn reshape(mut self, shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        assert_eq!(numel, self.numel(), "cannot reshape {:?} into {:?}", self.shape, shape);
        self.shape = shape.to_vec();
        self
    }

    #[inline]
    pub fn at4(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        let (_, cc, h, w) = self.dims4();
        self.data[((n * cc + c) * h + y) * w + x]
    }

    #[inline]
    pub fn set4(&mut self, n: usize, c: usize, y: usize, x: usize, v: T) {
        let (_, cc, h, w) = self.dims4();
        self.data[((n * cc + c) * h + y) * w + x] = v;
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        if self.meta {
            return self.clone();
        }
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect(), meta: false }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        assert_eq!(self.shape, other.shape, "zip_map shape mismatch");
        if self.meta || other.meta {
            return Self::meta(&self.shape);
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Self { shape: self.shape.clone(), data, meta: false }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        self.sum() / T::from_usize(self.numel().max(1)).unwrap()
    }

    pub fn max_value(&self) -> T {
        self.data.iter().copied().fold(T::neg_infinity(), T::max)
    }

    pub fn min_value(&self) -> T {
        self.data.iter().copied().fold(T::infinity(), T::min)
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Converts element type.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        if self.meta {
            return Tensor::meta(&self.shape);
        }
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.f64()).unwrap()).collect(),
            meta: false,
        }
    }

    /// Samples `[n..n+len]` along the batch axis.
    pub fn slice_batch(&self, start: usize, len: usize) -> Self {
        let per: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = len;
        if self.meta {
            return Self::meta(&shape);
        }
        Self::from_vec(&shape, self.data[start * per..(start + len) * per].to_vec())
    }

    /// Concatenates along the batch axis.
    pub fn cat_batch(parts: &[Self]) -> Self {
        assert!(!parts.is_empty());
        let mut shape = parts[0].shape.clone();
        shape[0] = parts.iter().map(|p| p.shape[0]).sum();
        for p in parts {
            assert_eq!(p.shape[1..], parts[0].shape[1..], "cat_batch shape mismatch");
        }
        if parts.iter().any(|p| p.meta) {
            return Self::meta(&shape);
        }
        let mut data = Vec::with_capacity(shape.iter().product());
        for p in parts {
            data.extend_from_slice(&p.data);
        }
        Self::from_vec(&shape, data)
    }

    /// One `[1, 1, H, W]` plane.
    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let (_, cc, h, w) = self.dims4();
        let off = (n * cc + c) * h * w;
        &self.data[off..off + h * w]
    }
}
