//! Bifurcated bottleneck-residual encoder: a shared stem and two leaf
//! branches of identical shape but separate weights.
//!
//! Parameter names follow the usual residual-network layout (`conv1`, `bn1`,
//! `layerK.i.convJ`, `layerK.i.downsample.{0,1}`) under the `stem.`, `leaf1.`
//! and `leaf2.` prefixes, so converted pretrained weights map directly.

use crate::autograd::{Graph, Var};
use crate::config::{BackboneConfig, NormKind};
use crate::error::{Error, Result};
use crate::kernels::{ConvGeom, PoolGeom};
use crate::nn::{Conv, Norm};
use crate::params::{Builder, ParamStore};
use crate::scalar::Scalar;

#[derive(Clone, Debug)]
struct Bottleneck {
    conv1: Conv,
    bn1: Norm,
    conv2: Conv,
    bn2: Norm,
    conv3: Conv,
    bn3: Norm,
    downsample: Option<(Conv, Norm)>,
}

impl Bottleneck {
    fn new<T: Scalar>(b: &mut Builder<T>, cin: usize, cout: usize, expansion: usize, stride: usize, norm: NormKind) -> Self {
        let mid = cout / expansion;
        let bias = norm == NormKind::None;
        let conv1 = Conv::new(&mut b.push("conv1"), cin, mid, 1, ConvGeom::new(1, 0, 1), bias);
        let bn1 = Norm::new(&mut b.push("bn1"), norm, mid);
        let conv2 = Conv::new(&mut b.push("conv2"), mid, mid, 3, ConvGeom::new(stride, 1, 1), bias);
        let bn2 = Norm::new(&mut b.push("bn2"), norm, mid);
        let conv3 = Conv::new(&mut b.push("conv3"), mid, cout, 1, ConvGeom::new(1, 0, 1), bias);
        let bn3 = Norm::new(&mut b.push("bn3"), norm, cout);
        let downsample = (stride != 1 || cin != cout).then(|| {
            let conv = Conv::new(&mut b.push("downsample.0"), cin, cout, 1, ConvGeom::new(stride, 0, 1), bias);
            let bn = Norm::new(&mut b.push("downsample.1"), norm, cout);
            (conv, bn)
        });
        Self { conv1, bn1, conv2, bn2, conv3, bn3, downsample }
    }

    fn forward<T: Scalar>(&self, g: &Graph<T>, x: Var) -> Var {
        let y = self.conv1.forward(g, x);
        let y = self.bn1.forward(g, y);
        let y = g.relu(y);
        let y = self.conv2.forward(g, y);
        let y = self.bn2.forward(g, y);
        let y = g.relu(y);
        let y = self.conv3.forward(g, y);
        let y = self.bn3.forward(g, y);
        let skip = match &self.downsample {
            Some((conv, bn)) => {
                let s = conv.forward(g, x);
                bn.forward(g, s)
            }
            None => x,
        };
        let y = g.add(y, skip);
        g.relu(y)
    }
}

#[derive(Clone, Debug)]
struct Stage {
    blocks: Vec<Bottleneck>,
}

impl Stage {
    #[allow(clippy::too_many_arguments)]
    fn new<T: Scalar>(
        b: &mut Builder<T>,
        cin: usize,
        cout: usize,
        blocks: usize,
        expansion: usize,
        stride: usize,
        norm: NormKind,
    ) -> Self {
        let blocks = (0..blocks)
            .map(|i| {
                let (ci, s) = if i == 0 { (cin, stride) } else { (cout, 1) };
                Bottleneck::new(&mut b.push(&i.to_string()), ci, cout, expansion, s, norm)
            })
            .collect();
        Self { blocks }
    }

    fn forward<T: Scalar>(&self, g: &Graph<T>, mut x: Var) -> Var {
        for block in &self.blocks {
            x = block.forward(g, x);
        }
        x
    }
}

/// Stem output; `f1` is produced internally and dropped.
#[derive(Clone, Copy, Debug)]
pub struct StemOutput {
    pub f2: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct LeafOutput {
    pub f3: Var,
    pub f4: Var,
    pub f5: Var,
}

#[derive(Clone, Debug)]
pub struct Leaf {
    layers: [Stage; 3],
}

impl Leaf {
    fn new<T: Scalar>(b: &mut Builder<T>, cfg: &BackboneConfig, norm: NormKind) -> Self {
        let c = &cfg.stage_channels;
        let n = &cfg.stage_blocks;
        let e = cfg.expansion;
        Self {
            layers: [
                Stage::new(&mut b.push("layer2"), c[1], c[2], n[2], e, 2, norm),
                Stage::new(&mut b.push("layer3"), c[2], c[3], n[3], e, 2, norm),
                Stage::new(&mut b.push("layer4"), c[3], c[4], n[4], e, 2, norm),
            ],
        }
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<T>, x: Var) -> LeafOutput {
        let f3 = self.layers[0].forward(g, x);
        let f4 = self.layers[1].forward(g, f3);
        let f5 = self.layers[2].forward(g, f4);
        LeafOutput { f3, f4, f5 }
    }
}

#[derive(Clone, Debug)]
pub struct Backbone {
    conv1: Conv,
    bn1: Norm,
    layer1: Stage,
    pub leaf1: Leaf,
    pub leaf2: Leaf,
    pub channels: [usize; 5],
}

impl Backbone {
    pub fn new<T: Scalar>(b: &mut Builder<T>, cfg: &BackboneConfig, norm: NormKind) -> Self {
        let c = &cfg.stage_channels;
        let bias = norm == NormKind::None;
        let mut stem = b.push("stem");
        let conv1 = Conv::new(&mut stem.push("conv1"), 3, c[0], 7, ConvGeom::new(2, 3, 1), bias);
        let bn1 = Norm::new(&mut stem.push("bn1"), norm, c[0]);
        let layer1 = Stage::new(&mut stem.push("layer1"), c[0], c[1], cfg.stage_blocks[1], cfg.expansion, 1, norm);
        let leaf1 = Leaf::new(&mut b.push("leaf1"), cfg, norm);
        let leaf2 = Leaf::new(&mut b.push("leaf2"), cfg, norm);
        Self { conv1, bn1, layer1, leaf1, leaf2, channels: *c }
    }

    /// Stages 1-2 on an image batch; returns `f2` at a quarter of the input size.
    pub fn stem_forward<T: Scalar>(&self, g: &Graph<T>, image: Var) -> Result<StemOutput> {
        let s = g.shape(image);
        let (h, w) = (s[2], s[3]);
        for (what, v) in [("image height", h), ("image width", w)] {
            if v < 32 || v % 16 != 0 {
                return Err(Error::Sizing { what, multiple: 16, min: 32, got: v });
            }
        }
        let f1 = self.conv1.forward(g, image);
        let f1 = self.bn1.forward(g, f1);
        let f1 = g.relu(f1);
        let x = g.max_pool(f1, PoolGeom::new(3, 2, 1, false));
        let f2 = self.layer1.forward(g, x);
        Ok(StemOutput { f2 })
    }

    /// 2x2 max-pool followed by the first leaf.
    pub fn pool_then_leaf1<T: Scalar>(&self, g: &Graph<T>, f2: Var) -> Result<LeafOutput> {
        let s = g.shape(f2);
        if s[2] < 8 || s[3] < 8 {
            return Err(Error::Sizing { what: "stem feature size", multiple: 1, min: 8, got: s[2].min(s[3]) });
        }
        let x = g.max_pool(f2, PoolGeom::new(2, 2, 0, true));
        Ok(self.leaf1.forward(g, x))
    }

    /// Second leaf on the cropped, resized stem feature (no extra pooling).
    pub fn leaf2_forward<T: Scalar>(&self, g: &Graph<T>, crop: Var) -> Result<LeafOutput> {
        let s = g.shape(crop);
        for v in [s[2], s[3]] {
            if v < 8 || v % 8 != 0 {
                return Err(Error::Sizing { what: "crop size", multiple: 8, min: 8, got: v });
            }
        }
        Ok(self.leaf2.forward(g, crop))
    }
}

/// Copies pretrained residual-network weights into a store. Source names use
/// the plain layout (`conv1.weight`, `layer2.0.bn1.running_mean`, ...);
/// `conv1`, `bn1` and `layer1` go to the stem, `layer2-4` to leaf 1 and, when
/// `both_leaves`, to leaf 2 as well. Returns how many tensors were copied.
pub fn load_pretrained<T: Scalar>(
    store: &mut ParamStore<T>,
    source: &[(String, crate::tensor::Tensor<T>)],
    both_leaves: bool,
) -> Result<usize> {
    let mut copied = 0;
    for (name, value) in source {
        let targets: Vec<String> = if name.starts_with("conv1.") || name.starts_with("bn1.") || name.starts_with("layer1.") {
            vec![format!("stem.{name}")]
        } else if ["layer2.", "layer3.", "layer4."].iter().any(|p| name.starts_with(p)) {
            let mut t = vec![format!("leaf1.{name}")];
            if both_leaves {
                t.push(format!("leaf2.{name}"));
            }
            t
        } else {
            continue;
        };
        for t in targets {
            let id = store.id(&t).ok_or_else(|| Error::Checkpoint(format!("no parameter `{t}` for pretrained `{name}`")))?;
            if store.get(id).shape() != value.shape() {
                return Err(Error::Checkpoint(format!(
                    "pretrained `{name}` has shape {:?}, model expects {:?}",
                    value.shape(),
                    store.get(id).shape()
                )));
            }
            store.set(id, value.clone());
            copied += 1;
        }
    }
    Ok(copied)
}
