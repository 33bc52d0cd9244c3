//! Mask-guided fusion: the third decoder, which refines the high-resolution
//! stem feature with the restored mask and boundary maps.
//!
//! The split-fusion stage applies spatial attention before channel attention
//! within each group, while the trunk applies channel attention first.

use crate::autograd::{Graph, Var};
use crate::config::NormKind;
use crate::error::{Error, Result};
use crate::mfem::{Mfem, MfemConfig};
use crate::nn::{ChannelAttention, Conv, ConvBlock, SpatialAttention};
use crate::params::Builder;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct MgfmConfig {
    pub mfem: MfemConfig,
    pub groups: usize,
    pub ca_reduction: usize,
    pub edge_width: usize,
    pub norm: NormKind,
    /// Concatenate `E2` into the boundary branch.
    pub use_edge: bool,
    /// Replace the split-fusion stage by one 3x3 conv block over `[R2; M2]`.
    pub plain_fusion: bool,
}

#[derive(Clone, Debug)]
pub struct SfmGroup {
    pub conv: ConvBlock,
    pub sa: SpatialAttention,
    pub ca: ChannelAttention,
}

#[derive(Clone, Debug)]
pub struct Sfm {
    pub groups: Vec<SfmGroup>,
    pub width: usize,
}

impl Sfm {
    pub fn new<T: Scalar>(b: &mut Builder<T>, channels: usize, groups: usize, reduction: usize, norm: NormKind) -> Result<Self> {
        if groups == 0 || !channels.is_multiple_of(groups) {
            return Err(Error::Config(format!("{channels} channels cannot be split into {groups} groups")));
        }
        let width = channels / groups;
        let groups = (0..groups)
            .map(|i| {
                let mut gb = b.push(&format!("group{}", i + 1));
                SfmGroup {
                    conv: ConvBlock::cbr(&mut gb.push("conv"), width + 1, width, 3, norm),
                    sa: SpatialAttention::new(&mut gb.push("sa")),
                    ca: ChannelAttention::new(&mut gb.push("ca"), width, reduction),
                }
            })
            .collect();
        Ok(Self { groups, width })
    }

    /// Per-group outputs `G_o^i`; their channel concatenation is `f_f`.
    pub fn group_outputs<T: Scalar>(&self, g: &Graph<T>, r2: Var, m2: Var) -> Vec<Var> {
        let mut outs: Vec<Var> = Vec::with_capacity(self.groups.len());
        for (i, grp) in self.groups.iter().enumerate() {
            let mut gi = g.slice_c(r2, i * self.width, self.width);
            if let Some(&prev) = outs.last() {
                gi = g.add(gi, prev);
            }
            let cat = g.concat_c(&[gi, m2]);
            let x = grp.conv.forward(g, cat);
            let x = grp.sa.forward(g, x);
            outs.push(grp.ca.forward(g, x));
        }
        outs
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<T>, r2: Var, m2: Var) -> Var {
        let outs = self.group_outputs(g, r2, m2);
        g.concat_c(&outs)
    }
}

#[derive(Clone, Debug)]
pub enum Fusion {
    Sfm(Sfm),
    Plain(ConvBlock),
}

#[derive(Clone, Debug)]
pub struct Mgfm {
    pub mfem: Mfem,
    pub fusion: Fusion,
    pub ca: ChannelAttention,
    pub sa: SpatialAttention,
    pub edge_conv: ConvBlock,
    pub edge_fuse: ConvBlock,
    pub refine: ConvBlock,
    pub mask_head: Conv,
    pub edge_head: Conv,
    pub use_edge: bool,
}

/// Intermediate features kept for inspection.
#[derive(Clone, Copy, Debug)]
pub struct MgfmOutput {
    pub r2: Var,
    pub f_f: Var,
    pub f_a: Var,
    pub f_e: Var,
    pub f_r: Var,
    pub m3: Var,
    pub e3: Var,
}

impl Mgfm {
    /// Registers the stem-level MFEM under `mfem.dec3.2` and the rest under
    /// `mgfm`, relative to `root`.
    pub fn new<T: Scalar>(root: &mut Builder<T>, cfg: &MgfmConfig) -> Result<Self> {
        let d = cfg.mfem.out_channels;
        let mfem = Mfem::new(&mut root.push("mfem.dec3.2"), &cfg.mfem);
        let b = &mut root.push("mgfm");
        let fusion = if cfg.plain_fusion {
            Fusion::Plain(ConvBlock::cbr(&mut b.push("fusion"), d + 1, d, 3, cfg.norm))
        } else {
            Fusion::Sfm(Sfm::new(&mut b.push("sfm"), d, cfg.groups, cfg.ca_reduction, cfg.norm)?)
        };
        Ok(Self {
            mfem,
            fusion,
            ca: ChannelAttention::new(&mut b.push("ca"), d, cfg.ca_reduction),
            sa: SpatialAttention::new(&mut b.push("sa")),
            edge_conv: ConvBlock::cbr(&mut b.push("edge_conv"), d, cfg.edge_width, 3, cfg.norm),
            edge_fuse: ConvBlock::cbr(&mut b.push("edge_fuse"), cfg.edge_width + usize::from(cfg.use_edge), d, 3, cfg.norm),
            refine: ConvBlock::cbr(&mut b.push("refine"), d, d, 3, cfg.norm),
            mask_head: Conv::same(&mut b.push("mask_head"), d, 1, 3, true),
            edge_head: Conv::same(&mut b.push("edge_head"), d, 1, 3, true),
            use_edge: cfg.use_edge,
        })
    }

    /// `f2` is the stem feature; `m2`, `e2` are `[N, 1, h, w]` maps in `[0, 1]`
    /// at the same resolution.
    pub fn forward<T: Scalar>(&self, g: &Graph<T>, f2: Var, m2: Var, e2: Option<Var>) -> Result<MgfmOutput> {
        let s = g.shape(f2);
        for (what, v) in [("M2", Some(m2)), ("E2", e2)] {
            if let Some(v) = v {
                let sv = g.shape(v);
                if sv[2..] != s[2..] {
                    return Err(Error::Shape(format!(
                        "{what} is {}x{} but the stem feature is {}x{}",
                        sv[2], sv[3], s[2], s[3]
                    )));
                }
            }
        }
        let r2 = self.mfem.forward(g, f2, None)?;
        let f_f = match &self.fusion {
            Fusion::Sfm(sfm) => sfm.forward(g, r2, m2),
            Fusion::Plain(conv) => {
                let cat = g.concat_c(&[r2, m2]);
                conv.forward(g, cat)
            }
        };
        let f_ca = self.ca.forward(g, f_f);
        let f_a = self.sa.forward(g, f_ca);
        let b = self.edge_conv.forward(g, f_a);
        let b = if self.use_edge {
            let e2 = e2.ok_or_else(|| Error::Shape("E2 is required by this module".into()))?;
            g.concat_c(&[b, e2])
        } else {
            b
        };
        let f_e = self.edge_fuse.forward(g, b);
        let sum = g.add(f_a, f_e);
        let refined = self.refine.forward(g, sum);
        let f_r = g.add(f_a, refined);
        let m3 = self.mask_head.forward(g, f_r);
        let e3 = self.edge_head.forward(g, f_e);
        Ok(MgfmOutput { r2, f_f, f_a, f_e, f_r, m3, e3 })
    }
}
