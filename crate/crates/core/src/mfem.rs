//! Multi-scale feature enhancement: a 1x1 shortcut, a chain of pooled
//! convolution branches and, on the deepest level, a non-local block, summed.
//!
//! An optional `lateral` feature (already at the output width) is added to
//! every 1x1 projection before its normalisation. This is the same as
//! projecting `[x; lateral]` with an identity block on the lateral channels,
//! and is how the top-down decoder merges a coarser level into a wide
//! backbone feature.

use crate::autograd::{Graph, Var};
use crate::config::NormKind;
use crate::error::{Error, Result};
use crate::kernels::{ConvGeom, PoolGeom};
use crate::nn::{Conv, ConvBlock};
use crate::params::Builder;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct MfemConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub qk_channels: usize,
    pub pool_sizes: Vec<usize>,
    pub dilation: usize,
    pub use_nonlocal: bool,
    pub max_positions: usize,
    pub norm: NormKind,
    /// Branches read only their own projection and are summed.
    pub parallel: bool,
    /// Replace the module by a single 3x3 conv block.
    pub plain: bool,
}

/// Query/key/value attention over all spatial positions.
///
/// With `Q, K` of shape `qk x n` and `V` of shape `c x n`, the attention map
/// is `S = softmax(Q^T K)` normalised over its first index, so every column
/// of `S` sums to one, and the output is `V S`: output position `j` is a
/// convex combination of the values.
#[derive(Clone, Debug)]
pub struct NonLocal {
    pub reduce: ConvBlock,
    pub query: Conv,
    pub key: Conv,
    pub value: Conv,
    pub max_positions: usize,
}

impl NonLocal {
    fn new<T: Scalar>(b: &mut Builder<T>, cfg: &MfemConfig) -> Self {
        let p = ConvGeom::new(1, 0, 1);
        let d = cfg.out_channels;
        Self {
            reduce: ConvBlock::new(&mut b.push("reduce"), cfg.in_channels, d, 1, p, cfg.norm, true),
            query: Conv::new(&mut b.push("query"), d, cfg.qk_channels, 1, p, false),
            key: Conv::new(&mut b.push("key"), d, cfg.qk_channels, 1, p, true),
            value: Conv::new(&mut b.push("value"), d, d, 1, p, true),
            max_positions: cfg.max_positions,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<T>, x: Var) -> Result<Var> {
        let (n, h, w) = {
            let s = g.shape(x);
            (s[0], s[2], s[3])
        };
        let pos = h * w;
        if pos > self.max_positions {
            return Err(Error::NonLocalTooLarge { positions: pos, limit: self.max_positions });
        }
        let f = self.reduce.forward(g, x);
        let q = self.query.forward(g, f);
        let k = self.key.forward(g, f);
        let v = self.value.forward(g, f);
        let qk = self.query.cout;
        let d = self.value.cout;
        let q = g.reshape(q, &[n, qk, pos]);
        let k = g.reshape(k, &[n, qk, pos]);
        let v = g.reshape(v, &[n, d, pos]);
        // rows of `st` are columns of S
        let st = g.bmm(k, q, true, false);
        let st = g.softmax_last(st);
        let out = g.bmm(v, st, false, true);
        Ok(g.reshape(out, &[n, d, h, w]))
    }

    /// The attention map `S` as `[N, n, n]`; its columns sum to one.
    pub fn attention<T: Scalar>(&self, g: &Graph<T>, x: Var) -> Tensor<T> {
        let s = g.shape(x);
        let (n, pos) = (s[0], s[2] * s[3]);
        let f = self.reduce.forward(g, x);
        let q = self.query.forward(g, f);
        let k = self.key.forward(g, f);
        let qk = self.query.cout;
        let q = g.reshape(q, &[n, qk, pos]);
        let k = g.reshape(k, &[n, qk, pos]);
        let st = g.bmm(k, q, true, false);
        let st = g.value(g.softmax_last(st));
        let mut out = Tensor::zeros(&[n, pos, pos]);
        for b in 0..n {
            for i in 0..pos {
                for j in 0..pos {
                    out.data_mut()[(b * pos + i) * pos + j] = st.data()[(b * pos + j) * pos + i];
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct Branch {
    pub reduce: ConvBlock,
    pub pool: usize,
    pub conv: ConvBlock,
    pub dilated: ConvBlock,
}

#[derive(Clone, Debug)]
pub enum Mfem {
    Full {
        shortcut: ConvBlock,
        branches: Vec<Branch>,
        nonlocal: Option<NonLocal>,
        parallel: bool,
    },
    Plain {
        conv: ConvBlock,
    },
}

/// Conv, add `extra`, then the block's norm and activation.
fn block_with<T: Scalar>(g: &Graph<T>, block: &ConvBlock, x: Var, extra: Option<Var>) -> Var {
    let mut y = block.conv.forward(g, x);
    if let Some(e) = extra {
        y = g.add(y, e);
    }
    let y = block.norm.forward(g, y);
    if block.relu {
        g.relu(y)
    } else {
        y
    }
}

impl Mfem {
    pub fn new<T: Scalar>(b: &mut Builder<T>, cfg: &MfemConfig) -> Self {
        let (cin, d) = (cfg.in_channels, cfg.out_channels);
        if cfg.plain {
            return Mfem::Plain { conv: ConvBlock::cbr(&mut b.push("conv"), cin, d, 3, cfg.norm) };
        }
        let one = ConvGeom::new(1, 0, 1);
        let shortcut = ConvBlock::new(&mut b.push("shortcut"), cin, d, 1, one, cfg.norm, false);
        let branches = cfg
            .pool_sizes
            .iter()
            .enumerate()
            .map(|(i, &pool)| {
                let mut bb = b.push(&format!("branch{}", i + 1));
                Branch {
                    reduce: ConvBlock::new(&mut bb.push("reduce"), cin, d, 1, one, cfg.norm, true),
                    pool,
                    conv: ConvBlock::cbr(&mut bb.push("conv"), d, d, 3, cfg.norm),
                    dilated: ConvBlock::new(
                        &mut bb.push("dilated"),
                        d,
                        d,
                        3,
                        ConvGeom::same(3, cfg.dilation),
                        cfg.norm,
                        true,
                    ),
                }
            })
            .collect();
        let nonlocal = cfg.use_nonlocal.then(|| NonLocal::new(&mut b.push("nonlocal"), cfg));
        Mfem::Full { shortcut, branches, nonlocal, parallel: cfg.parallel }
    }

    /// Output of the pooled branch chain alone.
    pub fn conv_block<T: Scalar>(&self, g: &Graph<T>, x: Var, lateral: Option<Var>) -> Option<Var> {
        let Mfem::Full { branches, parallel, .. } = self else { return None };
        let s = g.shape(x);
        let (h, w) = (s[2], s[3]);
        let mut prev: Option<Var> = None;
        let mut total: Option<Var> = None;
        for br in branches {
            let mut f = block_with(g, &br.reduce, x, lateral);
            if !parallel {
                if let Some(p) = prev {
                    f = g.add(f, p);
                }
            }
            let pooled = if br.pool > 1 { g.avg_pool(f, PoolGeom::new(br.pool, br.pool, 0, true)) } else { f };
            let y = br.conv.forward(g, pooled);
            let y = br.dilated.forward(g, y);
            let y = g.resize(y, h, w);
            total = Some(match total {
                Some(t) if *parallel => g.add(t, y),
                _ => y,
            });
            prev = Some(y);
        }
        total
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<T>, x: Var, lateral: Option<Var>) -> Result<Var> {
        if let Some(l) = lateral {
            let (sx, sl) = (g.shape(x), g.shape(l));
            if sx[2..] != sl[2..] {
                return Err(Error::Shape(format!(
                    "lateral feature {:?} does not match input {:?}; upsample it first",
                    &sl[2..],
                    &sx[2..]
                )));
            }
        }
        match self {
            Mfem::Plain { conv } => Ok(block_with(g, conv, x, lateral)),
            Mfem::Full { shortcut, nonlocal, .. } => {
                let mut out = block_with(g, shortcut, x, lateral);
                if let Some(cb) = self.conv_block(g, x, lateral) {
                    out = g.add(out, cb);
                }
                if let Some(nl) = nonlocal {
                    let y = nl.forward(g, x)?;
                    out = g.add(out, y);
                }
                Ok(out)
            }
        }
    }
}
