//! The three-stage forward pass: coarse localisation on the first leaf, a
//! cropped and magnified second pass, and full-resolution fusion.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::backbone::Backbone;
use crate::bem::{Bem, BemConfig};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::geometry::{self, BBox};
use crate::mfem::{Mfem, MfemConfig};
use crate::mgfm::{Mgfm, MgfmConfig};
use crate::nn::Conv;
use crate::params::{Builder, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Decoder levels in processing order (deepest first).
pub const LEVELS: [usize; 3] = [5, 4, 3];

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub backbone: Backbone,
    /// First decoder MFEMs for levels 5, 4, 3.
    pub dec1: [Mfem; 3],
    pub dec1_head: Conv,
    /// Second decoder MFEMs for levels 5, 4, 3.
    pub dec2: [Mfem; 3],
    pub bem: [Bem; 3],
    pub mgfm: Mgfm,
}

/// Graph handles for every intermediate prediction, at native resolution.
#[derive(Clone, Debug)]
pub struct ForwardVars {
    pub image_size: (usize, usize),
    /// Coarse mask logits at the `f3` grid.
    pub m1: Var,
    /// Coarse boundary probabilities `|avgpool3(σ(M1)) − σ(M1)|`.
    pub e1: Var,
    /// Min-max normalised `E1`.
    pub e1n: Var,
    /// Min-max normalised `σ(M1)`; not differentiated.
    pub m1n: Tensor<f64>,
    pub m1b: Tensor<f64>,
    pub e1b: Tensor<f64>,
    pub boxes: Vec<BBox>,
    /// Second-decoder mask and boundary logits at crop resolution, levels 5, 4, 3.
    pub c_mask: [Var; 3],
    pub c_edge: [Var; 3],
    /// Restored `σ(C)` on the stem grid, zero outside the box, levels 5, 4, 3.
    pub rst_mask: [Var; 3],
    pub rst_edge: [Var; 3],
    /// Final logits on the stem grid.
    pub m3: Var,
    pub e3: Var,
    /// Named intermediate features of the second and third decoders.
    pub taps: Vec<(&'static str, Var)>,
}

impl ForwardVars {
    pub fn m2(&self) -> Var {
        self.rst_mask[2]
    }

    pub fn e2(&self) -> Var {
        self.rst_edge[2]
    }
}

/// Every stage's maps upsampled to image resolution, `[N, 1, H, W]`.
#[derive(Clone, Debug)]
pub struct StageOutputs<T> {
    /// `σ(M1)`.
    pub m1: Tensor<T>,
    pub e1: Tensor<T>,
    pub m1n: Tensor<T>,
    pub e1n: Tensor<T>,
    pub m1b: Tensor<T>,
    pub e1b: Tensor<T>,
    pub m2: Tensor<T>,
    pub e2: Tensor<T>,
    /// Final logits.
    pub m3: Tensor<T>,
    pub e3: Tensor<T>,
    pub boxes: Vec<BBox>,
}

impl<T: Scalar> StageOutputs<T> {
    /// Final mask probabilities, the map used for evaluation.
    pub fn prediction(&self) -> Tensor<T> {
        self.m3.map(crate::autograd::sigmoid)
    }
}

impl Model {
    /// Builds the model and a freshly initialised parameter store.
    pub fn new<T: Scalar>(config: &ModelConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut root = Builder::new(&mut store, &mut rng);
        let model = Self::build(&mut root, config)?;
        Ok((model, store))
    }

    fn mfem_config(cfg: &ModelConfig, in_channels: usize, use_nonlocal: bool) -> MfemConfig {
        MfemConfig {
            in_channels,
            out_channels: cfg.dec_channels,
            qk_channels: cfg.qk_channels,
            pool_sizes: cfg.pool_sizes.clone(),
            dilation: cfg.dilation,
            use_nonlocal,
            max_positions: cfg.nonlocal_max_positions,
            norm: cfg.norm,
            parallel: cfg.ablation.mfem_parallel,
            plain: cfg.ablation.no_mfem,
        }
    }

    fn build<T: Scalar>(root: &mut Builder<T>, cfg: &ModelConfig) -> Result<Self> {
        let backbone = Backbone::new(root, &cfg.backbone, cfg.backbone_norm);
        let ch = backbone.channels;
        let d = cfg.dec_channels;
        let level_in = |level: usize| ch[level - 1];
        let mfems = |dec: &str, root: &mut Builder<T>| -> [Mfem; 3] {
            LEVELS.map(|l| {
                let mc = Self::mfem_config(cfg, level_in(l), l == 5);
                Mfem::new(&mut root.push(&format!("mfem.{dec}.{l}")), &mc)
            })
        };
        let dec1 = mfems("dec1", root);
        let dec1_head = Conv::same(&mut root.push("dec1.head"), d, 1, 3, true);
        let dec2 = mfems("dec2", root);
        let bem_cfg = BemConfig {
            channels: d,
            ca_reduction: cfg.ca_reduction,
            norm: cfg.norm,
            use_edge: !cfg.ablation.no_edge_bem,
            plain: cfg.ablation.no_bem,
        };
        let bem = LEVELS.map(|l| Bem::new(&mut root.push(&format!("bem.{l}")), &bem_cfg));
        let mgfm_cfg = MgfmConfig {
            mfem: Self::mfem_config(cfg, ch[1], false),
            groups: cfg.sfm_groups,
            ca_reduction: cfg.ca_reduction,
            edge_width: cfg.edge_width,
            norm: cfg.norm,
            use_edge: !cfg.ablation.no_edge_mgfm,
            plain_fusion: cfg.ablation.no_sfm,
        };
        let mgfm = Mgfm::new(root, &mgfm_cfg)?;
        Ok(Self { config: cfg.clone(), backbone, dec1, dec1_head, dec2, bem, mgfm })
    }

    /// First decoder: top-down MFEM cascade over `f5, f4, f3`, returning
    /// `(M1 logits, E1, r3)`.
    pub fn decoder1<T: Scalar>(&self, g: &Graph<T>, f3: Var, f4: Var, f5: Var) -> Result<(Var, Var, Var)> {
        let r5 = self.dec1[0].forward(g, f5, None)?;
        let r4 = self.dec1[1].forward(g, f4, Some(upsample_to(g, r5, f4)))?;
        let r3 = self.dec1[2].forward(g, f3, Some(upsample_to(g, r4, f3)))?;
        let m1 = self.dec1_head.forward(g, r3);
        let p1 = g.sigmoid(m1);
        let e1 = geometry::derive_boundary_var(g, p1);
        Ok((m1, e1, r3))
    }

    /// Second decoder on the cropped leaf features. Returns mask logits,
    /// boundary logits and refined features for levels 5, 4, 3.
    pub fn decoder2<T: Scalar>(&self, g: &Graph<T>, f: [Var; 3], ce: Var) -> Result<([Var; 3], [Var; 3], [Var; 3])> {
        let mut masks = Vec::with_capacity(3);
        let mut edges = Vec::with_capacity(3);
        let mut refined = Vec::with_capacity(3);
        let mut prev: Option<(Var, Var)> = None;
        for (i, &fi) in f.iter().enumerate() {
            let r = self.dec2[i].forward(g, fi, None)?;
            let out = match prev {
                None => self.bem[i].forward(g, r, None, Some(ce))?,
                Some((refined, edge_logits)) => {
                    let hi = upsample_to(g, refined, r);
                    let e = g.sigmoid(edge_logits);
                    let e = upsample_to(g, e, r);
                    self.bem[i].forward(g, r, Some(hi), Some(e))?
                }
            };
            masks.push(out.mask_logits);
            edges.push(out.edge_logits);
            refined.push(out.refined);
            prev = Some((out.refined, out.edge_logits));
        }
        Ok((to3(masks), to3(edges), to3(refined)))
    }

    /// Full forward on an image batch `[N, 3, H, W]`.
    pub fn forward<T: Scalar>(&self, g: &Graph<T>, image: Var) -> Result<ForwardVars> {
        let s = g.shape(image);
        if s.len() != 4 || s[1] != 3 {
            return Err(Error::Shape(format!("expected an [N, 3, H, W] image batch, got {s:?}")));
        }
        let (n, h, w) = (s[0], s[2], s[3]);
        let f2 = self.backbone.stem_forward(g, image)?.f2;
        let leaf1 = self.backbone.pool_then_leaf1(g, f2)?;
        let (m1, e1, _) = self.decoder1(g, leaf1.f3, leaf1.f4, leaf1.f5)?;
        let e1n = g.minmax_norm(e1);

        let fs = g.shape(f2);
        let grid = (fs[2], fs[3]);
        let r = self.config.expansion_ratio;
        let (m1n, m1b, e1b, boxes) = if g.is_meta() {
            let e3 = g.shape(m1);
            let z = Tensor::zeros(&e3);
            (z.clone(), z.clone(), z, vec![BBox::full_grid(grid.0, grid.1, r); n])
        } else {
            let p1: Tensor<f64> = g.value(m1).map(crate::autograd::sigmoid).cast();
            let (m1n, _) = geometry::normalize_minmax(&p1);
            let m1b = geometry::binarize(&m1n, 0.5);
            let e1b = geometry::binarize(&g.value(e1n).cast::<f64>(), 0.5);
            let (_, _, mh, mw) = m1b.dims4();
            let boxes = (0..n).map(|i| geometry::compute_bbox(m1b.plane(i, 0), mh, mw, r, grid)).collect();
            (m1n, m1b, e1b, boxes)
        };

        let crop = self.config.crop_size;
        let f2_crop = geometry::crop_resize(g, f2, &boxes, crop);
        let leaf2 = self.backbone.leaf2_forward(g, f2_crop)?;
        let e1n_up = g.resize(e1n, grid.0, grid.1);
        let f5s = g.shape(leaf2.f5);
        let ce = geometry::crop_resize(g, e1n_up, &boxes, f5s[2]);
        let (c_mask, c_edge, c_refined) = self.decoder2(g, [leaf2.f5, leaf2.f4, leaf2.f3], ce)?;

        let rst = |c: Var| {
            let p = g.sigmoid(c);
            geometry::restore(g, p, &boxes)
        };
        let rst_mask = c_mask.map(rst);
        let rst_edge = c_edge.map(rst);
        let mg = self.mgfm.forward(g, f2, rst_mask[2], Some(rst_edge[2]))?;
        Ok(ForwardVars {
            image_size: (h, w),
            m1,
            e1,
            e1n,
            m1n,
            m1b,
            e1b,
            boxes,
            c_mask,
            c_edge,
            rst_mask,
            rst_edge,
            m3: mg.m3,
            e3: mg.e3,
            taps: vec![
                ("dec2.level5", c_refined[0]),
                ("dec2.level4", c_refined[1]),
                ("dec2.level3", c_refined[2]),
                ("dec3.fused", mg.f_f),
                ("dec3.attended", mg.f_a),
                ("dec3.boundary", mg.f_e),
                ("dec3.refined", mg.f_r),
            ],
        })
    }

    /// Upsamples every map in `fv` to image resolution: bilinear for
    /// continuous maps, nearest for binary ones.
    pub fn emit<T: Scalar>(&self, g: &Graph<T>, fv: &ForwardVars) -> StageOutputs<T> {
        let (h, w) = fv.image_size;
        let up = |t: &Tensor<T>| crate::kernels::resize_bilinear_forward(t, h, w);
        let upv = |v: Var| up(&g.value(v));
        let nearest = |t: &Tensor<f64>| crate::kernels::resize_nearest(&t.cast::<T>(), h, w);
        StageOutputs {
            m1: up(&g.value(fv.m1).map(crate::autograd::sigmoid)),
            e1: upv(fv.e1),
            m1n: up(&fv.m1n.cast()),
            e1n: upv(fv.e1n),
            m1b: nearest(&fv.m1b),
            e1b: nearest(&fv.e1b),
            m2: upv(fv.m2()),
            e2: upv(fv.e2()),
            m3: upv(fv.m3),
            e3: upv(fv.e3),
            boxes: fv.boxes.clone(),
        }
    }

    /// Inference convenience: forward in evaluation mode and emit.
    pub fn predict<T: Scalar>(&self, store: &ParamStore<T>, images: &Tensor<T>) -> Result<StageOutputs<T>> {
        let g = Graph::new(store, crate::autograd::Mode::Eval);
        let x = g.input(images.clone());
        let fv = self.forward(&g, x)?;
        Ok(self.emit(&g, &fv))
    }
}

fn upsample_to<T: Scalar>(g: &Graph<T>, x: Var, like: Var) -> Var {
    let s = g.shape(like);
    g.resize(x, s[2], s[3])
}

fn to3(v: Vec<Var>) -> [Var; 3] {
    [v[0], v[1], v[2]]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Mode;
    use crate::config::Ablation;

    fn small() -> ModelConfig {
        ModelConfig { input_size: 64, crop_size: 16, ..ModelConfig::tiny() }
    }

    fn image(n: usize, s: usize) -> Tensor<f64> {
        let len = n * 3 * s * s;
        Tensor::from_vec(&[n, 3, s, s], (0..len).map(|i| (((i * 7919) % 101) as f64 / 50.0) - 1.0).collect())
    }

    #[test]
    fn forward_shapes_and_emission() {
        let cfg = small();
        let (model, store) = Model::new::<f64>(&cfg, 1).unwrap();
        let g = Graph::new(&store, Mode::Eval);
        let x = g.input(image(2, 64));
        let fv = model.forward(&g, x).unwrap();
        assert_eq!(g.shape(fv.m1), vec![2, 1, 4, 4]);
        assert_eq!(g.shape(fv.c_mask[0]), vec![2, 1, 2, 2]);
        assert_eq!(g.shape(fv.c_mask[2]), vec![2, 1, 8, 8]);
        assert_eq!(g.shape(fv.m3), vec![2, 1, 16, 16]);
        let out = model.emit(&g, &fv);
        for t in [&out.m1, &out.e1, &out.m1n, &out.e1n, &out.m1b, &out.e1b, &out.m2, &out.e2, &out.m3, &out.e3] {
            assert_eq!(t.shape(), &[2, 1, 64, 64]);
            assert!(t.all_finite());
        }
        assert!(out.m1b.data().iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn restored_maps_vanish_outside_box() {
        let (model, store) = Model::new::<f64>(&small(), 3).unwrap();
        let g = Graph::new(&store, Mode::Eval);
        let x = g.input(image(2, 64));
        let fv = model.forward(&g, x).unwrap();
        for v in [fv.m2(), fv.e2()] {
            let t = g.value(v);
            for (i, b) in fv.boxes.iter().enumerate() {
                for y in 0..16 {
                    for xx in 0..16 {
                        if !b.rect.contains_point(y, xx) {
                            assert_eq!(t.at4(i, 0, y, xx), 0.0);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn zero_decoder_gives_constant_coarse_map_and_full_box() {
        let (model, mut store) = Model::new::<f64>(&small(), 4).unwrap();
        let ids: Vec<_> = store.ids().filter(|&id| store.name(id).starts_with("mfem.dec1")).collect();
        for id in ids {
            let shape = store.get(id).shape().to_vec();
            store.set(id, Tensor::zeros(&shape));
        }
        let bias = store.id("dec1.head.bias").unwrap();
        store.set(bias, Tensor::full(&[1], 0.3));
        let g = Graph::new(&store, Mode::Eval);
        let x = g.input(image(1, 64));
        let fv = model.forward(&g, x).unwrap();
        let m1 = g.value(fv.m1);
        assert!(m1.data().iter().all(|&v| (v - 0.3).abs() < 1e-12));
        assert!(fv.boxes[0].is_fallback());
        assert_eq!(fv.boxes[0].rect, geometry::Rect::full(16, 16));
    }

    #[test]
    fn every_ablation_builds_and_runs() {
        for name in Ablation::NAMES {
            let cfg = ModelConfig { ablation: Ablation::from_name(name).unwrap(), ..small() };
            let (model, store) = Model::new::<f32>(&cfg, 5).unwrap();
            let out = model.predict(&store, &image(1, 64).cast()).unwrap();
            assert!(out.m3.all_finite(), "{name}");
        }
    }

    #[test]
    fn meta_mode_counts_without_values() {
        let (model, store) = Model::new::<f32>(&small(), 0).unwrap();
        let g = Graph::new(&store, Mode::Meta);
        let x = g.input(Tensor::meta(&[1, 3, 64, 64]));
        let fv = model.forward(&g, x).unwrap();
        assert_eq!(g.shape(fv.m3), vec![1, 1, 16, 16]);
        assert!(g.macs() > 0);
    }

    #[test]
    fn rejects_bad_input() {
        let (model, store) = Model::new::<f32>(&small(), 0).unwrap();
        let g = Graph::new(&store, Mode::Eval);
        let x = g.input(Tensor::zeros(&[1, 3, 40, 40]));
        assert!(matches!(model.forward(&g, x), Err(Error::Sizing { .. })));
    }
}
