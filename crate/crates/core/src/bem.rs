//! Boundary enhancement: fuses a boundary map into decoder features, refines
//! them with channel then spatial attention, and predicts mask and boundary
//! logits.

use crate::autograd::{Graph, Var};
use crate::config::NormKind;
use crate::error::{Error, Result};
use crate::nn::{ChannelAttention, Conv, ConvBlock, SpatialAttention};
use crate::params::Builder;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct BemConfig {
    pub channels: usize,
    pub ca_reduction: usize,
    pub norm: NormKind,
    /// Concatenate the boundary map before the first convolution.
    pub use_edge: bool,
    /// Replace the module by a single 3x3 conv block.
    pub plain: bool,
}

#[derive(Clone, Copy, Debug)]
pub struct BemOutput {
    pub mask_logits: Var,
    pub edge_logits: Var,
    pub refined: Var,
}

#[derive(Clone, Debug)]
pub enum Bem {
    Full {
        fuse: ConvBlock,
        ca: ChannelAttention,
        sa: SpatialAttention,
        edge_head: Conv,
        mask_stack: [ConvBlock; 2],
        mask_head: Conv,
        use_edge: bool,
    },
    Plain {
        conv: ConvBlock,
        edge_head: Conv,
        mask_head: Conv,
    },
}

impl Bem {
    pub fn new<T: Scalar>(b: &mut Builder<T>, cfg: &BemConfig) -> Self {
        let d = cfg.channels;
        if cfg.plain {
            return Bem::Plain {
                conv: ConvBlock::cbr(&mut b.push("conv"), d, d, 3, cfg.norm),
                edge_head: Conv::same(&mut b.push("edge_head"), d, 1, 3, true),
                mask_head: Conv::same(&mut b.push("mask_head"), d, 1, 3, true),
            };
        }
        let cin = d + usize::from(cfg.use_edge);
        Bem::Full {
            fuse: ConvBlock::cbr(&mut b.push("fuse"), cin, d, 3, cfg.norm),
            ca: ChannelAttention::new(&mut b.push("ca"), d, cfg.ca_reduction),
            sa: SpatialAttention::new(&mut b.push("sa")),
            edge_head: Conv::same(&mut b.push("edge_head"), d, 1, 3, true),
            mask_stack: [
                ConvBlock::cbr(&mut b.push("mask_stack.0"), d, d, 3, cfg.norm),
                ConvBlock::cbr(&mut b.push("mask_stack.1"), d, d, 3, cfg.norm),
            ],
            mask_head: Conv::same(&mut b.push("mask_head"), d, 1, 3, true),
            use_edge: cfg.use_edge,
        }
    }

    /// `f_high` is absent on the deepest level; `edge` must be given when the
    /// module concatenates boundary maps and is ignored otherwise.
    pub fn forward<T: Scalar>(&self, g: &Graph<T>, f_low: Var, f_high: Option<Var>, edge: Option<Var>) -> Result<BemOutput> {
        let base = g.shape(f_low);
        let check = |v: Var, what: &str| -> Result<()> {
            let s = g.shape(v);
            if s[2..] != base[2..] {
                return Err(Error::Shape(format!(
                    "{what} is {}x{} but the decoder feature is {}x{}; upsample it first",
                    s[2], s[3], base[2], base[3]
                )));
            }
            Ok(())
        };
        if let Some(h) = f_high {
            check(h, "higher-level feature")?;
        }
        if let Some(e) = edge {
            check(e, "boundary map")?;
        }
        let f = match f_high {
            Some(h) => g.add(f_low, h),
            None => f_low,
        };
        match self {
            Bem::Plain { conv, edge_head, mask_head } => {
                let refined = conv.forward(g, f);
                Ok(BemOutput {
                    mask_logits: mask_head.forward(g, refined),
                    edge_logits: edge_head.forward(g, refined),
                    refined,
                })
            }
            Bem::Full { fuse, ca, sa, edge_head, mask_stack, mask_head, use_edge } => {
                let input = if *use_edge {
                    let e = edge.ok_or_else(|| Error::Shape("boundary map required by this module".into()))?;
                    g.concat_c(&[e, f])
                } else {
                    f
                };
                let f = fuse.forward(g, input);
                let f_ca = ca.forward(g, f);
                let f_out = sa.forward(g, f_ca);
                let edge_logits = edge_head.forward(g, f_out);
                let m = mask_stack[0].forward(g, f_out);
                let m = mask_stack[1].forward(g, m);
                let mask_logits = mask_head.forward(g, m);
                Ok(BemOutput { mask_logits, edge_logits, refined: f_out })
            }
        }
    }

    pub fn uses_edge(&self) -> bool {
        matches!(self, Bem::Full { use_edge: true, .. })
    }
}
