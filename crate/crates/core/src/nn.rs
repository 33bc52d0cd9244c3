//! Convolution, normalisation and attention layers.

use crate::autograd::{Graph, Var};
use crate::config::NormKind;
use crate::kernels::ConvGeom;
use crate::params::{Builder, ParamId};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub geom: ConvGeom,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
}

impl Conv {
    pub fn new<T: Scalar>(b: &mut Builder<T>, cin: usize, cout: usize, k: usize, geom: ConvGeom, bias: bool) -> Self {
        let weight = b.conv_weight("weight", cout, cin, k);
        let bias = bias.then(|| b.zeros("bias", &[cout]));
        Self { weight, bias, geom, cin, cout, k }
    }

    /// Stride-1 convolution preserving spatial size.
    pub fn same<T: Scalar>(b: &mut Builder<T>, cin: usize, cout: usize, k: usize, bias: bool) -> Self {
        Self::new(b, cin, cout, k, ConvGeom::same(k, 1), bias)
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<T>, x: Var) -> Var {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.conv2d(x, w, b, self.geom)
    }
}

/// Largest group count not above `max` that divides `channels`.
pub fn group_count(channels: usize, max: usize) -> usize {
    (1..=max.min(channels)).rev().find(|g| channels.is_multiple_of(*g)).unwrap_or(1)
}

#[derive(Clone, Debug)]
pub enum Norm {
    Identity,
    Group { gamma: ParamId, beta: ParamId, groups: usize },
    FrozenBatch { weight: ParamId, bias: ParamId, mean: ParamId, var: ParamId },
}

impl Norm {
    pub fn new<T: Scalar>(b: &mut Builder<T>, kind: NormKind, channels: usize) -> Self {
        match kind {
            NormKind::None => Norm::Identity,
            NormKind::Group(max) => Norm::Group {
                gamma: b.ones("weight", &[channels]),
                beta: b.zeros("bias", &[channels]),
                groups: group_count(channels, max),
            },
            NormKind::FrozenBatch => Norm::FrozenBatch {
                weight: b.ones("weight", &[channels]),
                bias: b.zeros("bias", &[channels]),
                mean: b.buffer("running_mean", Tensor::zeros(&[channels])),
                var: b.buffer("running_var", Tensor::ones(&[channels])),
            },
        }
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<T>, x: Var) -> Var {
        match *self {
            Norm::Identity => x,
            Norm::Group { gamma, beta, groups } => {
                let (ga, be) = (g.param(gamma), g.param(beta));
                g.group_norm(x, ga, be, groups, T::c(NORM_EPS))
            }
            Norm::FrozenBatch { weight, bias, mean, var } => frozen_batch_norm(g, x, weight, bias, mean, var),
        }
    }
}

/// `(x - mean) / sqrt(var + eps) * weight + bias` with fixed statistics.
fn frozen_batch_norm<T: Scalar>(g: &Graph<T>, x: Var, weight: ParamId, bias: ParamId, mean: ParamId, var: ParamId) -> Var {
    let (w, b) = (g.param(weight), g.param(bias));
    let store = g.store();
    let c = store.get(mean).numel();
    let inv: Vec<T> = store.get(var).data().iter().map(|&v| T::one() / (v + T::c(NORM_EPS)).sqrt()).collect();
    let inv = g.input(Tensor::from_vec(&[1, c, 1, 1], inv));
    let mu = g.input(store.get(mean).clone().reshape(&[1, c, 1, 1]));
    let w = g.reshape(w, &[1, c, 1, 1]);
    let b = g.reshape(b, &[1, c, 1, 1]);
    let centered = g.sub(x, mu);
    let scale = g.mul(inv, w);
    let y = g.mul(centered, scale);
    g.add(y, b)
}

/// Convolution, optional normalisation, optional ReLU.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub conv: Conv,
    pub norm: Norm,
    pub relu: bool,
}

impl ConvBlock {
    pub fn new<T: Scalar>(
        b: &mut Builder<T>,
        cin: usize,
        cout: usize,
        k: usize,
        geom: ConvGeom,
        norm: NormKind,
        relu: bool,
    ) -> Self {
        let conv = Conv::new(b, cin, cout, k, geom, norm == NormKind::None);
        let norm = Norm::new(&mut b.push("norm"), norm, cout);
        Self { conv, norm, relu }
    }

    /// Size-preserving conv-norm-ReLU.
    pub fn cbr<T: Scalar>(b: &mut Builder<T>, cin: usize, cout: usize, k: usize, norm: NormKind) -> Self {
        Self::new(b, cin, cout, k, ConvGeom::same(k, 1), norm, true)
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<T>, x: Var) -> Var {
        let y = self.conv.forward(g, x);
        let y = self.norm.forward(g, y);
        if self.relu {
            g.relu(y)
        } else {
            y
        }
    }
}

/// Squeeze-and-excitation style gate: `sigmoid(fc2(relu(fc1(mean_hw(x)))))`.
#[derive(Clone, Debug)]
pub struct ChannelAttention {
    pub fc1: Conv,
    pub fc2: Conv,
}

impl ChannelAttention {
    pub fn new<T: Scalar>(b: &mut Builder<T>, channels: usize, reduction: usize) -> Self {
        let hidden = (channels / reduction).max(1);
        let fc1 = Conv::new(&mut b.push("fc1"), channels, hidden, 1, ConvGeom::new(1, 0, 1), true);
        let fc2 = Conv::new(&mut b.push("fc2"), hidden, channels, 1, ConvGeom::new(1, 0, 1), true);
        Self { fc1, fc2 }
    }

    /// Weights of shape `[N, C, 1, 1]`.
    pub fn weights<T: Scalar>(&self, g: &Graph<T>, x: Var) -> Var {
        let m = g.mean_hw(x);
        let h = self.fc1.forward(g, m);
        let h = g.relu(h);
        let o = self.fc2.forward(g, h);
        g.sigmoid(o)
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<T>, x: Var) -> Var {
        let w = self.weights(g, x);
        g.mul(x, w)
    }
}

/// `sigmoid(conv7x7(mean_c(x)))`.
#[derive(Clone, Debug)]
pub struct SpatialAttention {
    pub conv: Conv,
}

impl SpatialAttention {
    pub fn new<T: Scalar>(b: &mut Builder<T>) -> Self {
        Self { conv: Conv::new(&mut b.push("conv"), 1, 1, 7, ConvGeom::new(1, 3, 1), true) }
    }

    /// Weights of shape `[N, 1, H, W]`.
    pub fn weights<T: Scalar>(&self, g: &Graph<T>, x: Var) -> Var {
        let m = g.mean_c(x);
        let o = self.conv.forward(g, m);
        g.sigmoid(o)
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<T>, x: Var) -> Var {
        let w = self.weights(g, x);
        g.mul(x, w)
    }
}
