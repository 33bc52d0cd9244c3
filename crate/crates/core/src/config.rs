//! Model and run configuration.
//!
//! Run configurations serialise to a flat `key = value` text form, one entry
//! per line, `#` starting a comment.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormKind {
    /// No normalisation; convolutions carry a bias.
    None,
    /// Group normalisation with at most this many groups.
    Group(usize),
    /// Batch normalisation with frozen running statistics.
    FrozenBatch,
}

impl NormKind {
    fn encode(self) -> String {
        match self {
            NormKind::None => "none".into(),
            NormKind::Group(g) => format!("group{g}"),
            NormKind::FrozenBatch => "frozen_bn".into(),
        }
    }

    fn decode(s: &str) -> Option<Self> {
        match s {
            "none" => Some(NormKind::None),
            "frozen_bn" => Some(NormKind::FrozenBatch),
            _ => s.strip_prefix("group").and_then(|g| g.parse().ok()).filter(|&g| g > 0).map(NormKind::Group),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    /// Output widths of conv1 and the four residual stages.
    pub stage_channels: [usize; 5],
    /// Block counts; entry 0 is unused by the stem convolution and kept for symmetry.
    pub stage_blocks: [usize; 5],
    pub stem_stride_total: usize,
    /// Bottleneck expansion (output width / inner width).
    pub expansion: usize,
}

impl BackboneConfig {
    pub fn resnet50() -> Self {
        Self { stage_channels: [64, 256, 512, 1024, 2048], stage_blocks: [1, 3, 4, 6, 3], stem_stride_total: 4, expansion: 4 }
    }

    pub fn tiny() -> Self {
        Self { stage_channels: [16, 32, 48, 64, 96], stage_blocks: [1, 1, 1, 1, 1], stem_stride_total: 4, expansion: 4 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.iter().chain(&self.stage_blocks).any(|&v| v == 0) {
            return Err(Error::Config("backbone channels and block counts must be positive".into()));
        }
        if self.stem_stride_total != 4 {
            return Err(Error::Config("only a total stem stride of 4 is supported".into()));
        }
        if self.expansion == 0 || self.stage_channels[1..].iter().any(|&c| c % self.expansion != 0) {
            return Err(Error::Config(format!(
                "stage widths {:?} must be divisible by the bottleneck expansion {}",
                &self.stage_channels[1..],
                self.expansion
            )));
        }
        Ok(())
    }
}

/// Model variants from the ablation study. At most one structural switch may
/// be active, since every ablation row changes a single component.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Ablation {
    /// Every MFEM replaced by one 3x3 conv block.
    pub no_mfem: bool,
    /// MFEM branches consume only their own projection; outputs are summed.
    pub mfem_parallel: bool,
    /// Every BEM replaced by one 3x3 conv block.
    pub no_bem: bool,
    /// BEMs do not concatenate the boundary map.
    pub no_edge_bem: bool,
    /// MGFM does not concatenate the boundary map.
    pub no_edge_mgfm: bool,
    /// SFM replaced by one 3x3 conv block over `[R2; M2]`.
    pub no_sfm: bool,
}

impl Ablation {
    pub const NAMES: [&'static str; 6] = ["no_mfem", "mfem_parallel", "no_bem", "no_edge_bem", "no_edge_mgfm", "no_sfm"];

    fn flags(&self) -> [bool; 6] {
        [self.no_mfem, self.mfem_parallel, self.no_bem, self.no_edge_bem, self.no_edge_mgfm, self.no_sfm]
    }

    fn flag_mut(&mut self, name: &str) -> Option<&mut bool> {
        Some(match name {
            "no_mfem" => &mut self.no_mfem,
            "mfem_parallel" => &mut self.mfem_parallel,
            "no_bem" => &mut self.no_bem,
            "no_edge_bem" => &mut self.no_edge_bem,
            "no_edge_mgfm" => &mut self.no_edge_mgfm,
            "no_sfm" => &mut self.no_sfm,
            _ => return None,
        })
    }

    /// Parses a single switch name (or `none`).
    pub fn from_name(name: &str) -> Option<Self> {
        let mut a = Self::default();
        if name == "none" {
            return Some(a);
        }
        *a.flag_mut(name)? = true;
        Some(a)
    }

    pub fn active(&self) -> Vec<&'static str> {
        Self::NAMES.iter().zip(self.flags()).filter(|(_, f)| *f).map(|(n, _)| *n).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let on = self.active();
        if on.len() < 2 {
            return Ok(());
        }
        let reason = match (on[0], on[1]) {
            ("no_mfem", "mfem_parallel") => "the MFEM table's parallel row modifies an MFEM that `no_mfem` removes",
            ("no_bem", "no_edge_bem") => "the BEM table's `w/o edge` row modifies a BEM that `no_bem` removes",
            ("no_edge_bem", "no_edge_mgfm") => "the BEM and MGFM tables each remove one boundary input, never both",
            _ => "each ablation table row changes exactly one component of the full model",
        };
        Err(Error::Ablation { a: on[0], b: on[1], reason })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub input_size: usize,
    pub crop_size: usize,
    pub expansion_ratio: f64,
    pub backbone: BackboneConfig,
    pub dec_channels: usize,
    pub qk_channels: usize,
    pub pool_sizes: Vec<usize>,
    pub dilation: usize,
    pub nonlocal_max_positions: usize,
    pub ca_reduction: usize,
    pub sfm_groups: usize,
    /// Width of the boundary feature inside MGFM before it meets `E2`.
    pub edge_width: usize,
    pub norm: NormKind,
    /// Normalisation inside the backbone.
    pub backbone_norm: NormKind,
    pub ablation: Ablation,
    /// Initialise both leaves from identical weights.
    pub shared_leaf_init: bool,
}

impl ModelConfig {
    /// ResNet-50 profile at 704x704 with a 120x120 crop.
    pub fn full() -> Self {
        Self {
            input_size: 704,
            crop_size: 120,
            expansion_ratio: 1.2,
            backbone: BackboneConfig::resnet50(),
            dec_channels: 64,
            qk_channels: 16,
            pool_sizes: vec![8, 4, 2, 1],
            dilation: 2,
            nonlocal_max_positions: 4096,
            ca_reduction: 4,
            sfm_groups: 4,
            edge_width: 64,
            norm: NormKind::Group(8),
            backbone_norm: NormKind::FrozenBatch,
            ablation: Ablation::default(),
            shared_leaf_init: true,
        }
    }

    /// Reduced widths and depths at 176x176 with a 40x40 crop, sized for CPU.
    pub fn tiny() -> Self {
        Self {
            input_size: 176,
            crop_size: 40,
            expansion_ratio: 1.2,
            backbone: BackboneConfig::tiny(),
            dec_channels: 16,
            qk_channels: 8,
            pool_sizes: vec![8, 4, 2, 1],
            dilation: 2,
            nonlocal_max_positions: 4096,
            ca_reduction: 4,
            sfm_groups: 4,
            edge_width: 16,
            norm: NormKind::Group(4),
            backbone_norm: NormKind::Group(4),
            ablation: Ablation::default(),
            shared_leaf_init: true,
        }
    }

    pub fn profile(name: &str) -> Option<Self> {
        match name {
            "full" => Some(Self::full()),
            "tiny" => Some(Self::tiny()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.ablation.validate()?;
        check_size("input size", self.input_size, 16, 32)?;
        check_size("crop size", self.crop_size, 8, 8)?;
        if !(self.expansion_ratio.is_finite() && self.expansion_ratio > 0.0) {
            return Err(Error::Config(format!("expansion ratio must be positive, got {}", self.expansion_ratio)));
        }
        if self.qk_channels == 0 || self.qk_channels > self.dec_channels {
            return Err(Error::Config("qk_channels must lie in 1..=dec_channels".into()));
        }
        if self.pool_sizes.is_empty() || self.pool_sizes.windows(2).any(|w| w[0] <= w[1]) || self.pool_sizes.contains(&0) {
            return Err(Error::Config(format!("pool sizes {:?} must be positive and strictly decreasing", self.pool_sizes)));
        }
        if !self.dec_channels.is_multiple_of(self.sfm_groups) {
            return Err(Error::Config(format!(
                "decoder width {} is not divisible into {} SFM groups",
                self.dec_channels, self.sfm_groups
            )));
        }
        if self.dilation == 0 || self.ca_reduction == 0 || self.edge_width == 0 {
            return Err(Error::Config("dilation, ca_reduction and edge_width must be positive".into()));
        }
        Ok(())
    }
}

fn check_size(what: &'static str, got: usize, multiple: usize, min: usize) -> Result<()> {
    if got < min || !got.is_multiple_of(multiple) {
        return Err(Error::Sizing { what, multiple, min, got });
    }
    Ok(())
}

/// Everything a CLI run needs, with a lossless text form.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub profile: String,
    pub model: ModelConfig,
    pub lr: f64,
    pub poly_power: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Overrides `epochs` when non-zero.
    pub max_steps: usize,
    pub seed: u64,
    pub train_root: Option<PathBuf>,
    pub test_roots: Vec<PathBuf>,
    pub output_dir: PathBuf,
    pub augment: bool,
    pub rotate_deg: f64,
    pub border_clip: f64,
    pub checkpoint_every: usize,
    pub synthetic_count: usize,
    pub synthetic_similarity: f64,
    pub workers: usize,
}

impl RunConfig {
    pub fn for_profile(profile: &str) -> Result<Self> {
        let model = ModelConfig::profile(profile).ok_or_else(|| Error::Config(format!("unknown profile `{profile}`")))?;
        let tiny = profile == "tiny";
        Ok(Self {
            profile: profile.to_string(),
            model,
            lr: if tiny { 2e-3 } else { 2e-5 },
            poly_power: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.0,
            batch_size: if tiny { 4 } else { 8 },
            epochs: 120,
            max_steps: 0,
            seed: 0,
            train_root: None,
            test_roots: Vec::new(),
            output_dir: PathBuf::from("runs/default"),
            augment: true,
            rotate_deg: 15.0,
            border_clip: 0.1,
            checkpoint_every: 500,
            synthetic_count: 16,
            synthetic_similarity: 0.5,
            workers: 1,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("lr must be positive".into()));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let m = &self.model;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        let list = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        kv("profile", self.profile.clone());
        kv("input_size", m.input_size.to_string());
        kv("crop_size", m.crop_size.to_string());
        kv("expansion_ratio", format!("{:?}", m.expansion_ratio));
        kv("stage_channels", list(&m.backbone.stage_channels));
        kv("stage_blocks", list(&m.backbone.stage_blocks));
        kv("bottleneck_expansion", m.backbone.expansion.to_string());
        kv("dec_channels", m.dec_channels.to_string());
        kv("qk_channels", m.qk_channels.to_string());
        kv("pool_sizes", list(&m.pool_sizes));
        kv("dilation", m.dilation.to_string());
        kv("nonlocal_max_positions", m.nonlocal_max_positions.to_string());
        kv("ca_reduction", m.ca_reduction.to_string());
        kv("sfm_groups", m.sfm_groups.to_string());
        kv("edge_width", m.edge_width.to_string());
        kv("norm", m.norm.encode());
        kv("backbone_norm", m.backbone_norm.encode());
        for (name, on) in Ablation::NAMES.iter().zip(m.ablation.flags()) {
            kv(name, on.to_string());
        }
        kv("shared_leaf_init", m.shared_leaf_init.to_string());
        kv("lr", format!("{:?}", self.lr));
        kv("poly_power", format!("{:?}", self.poly_power));
        kv("beta1", format!("{:?}", self.beta1));
        kv("beta2", format!("{:?}", self.beta2));
        kv("weight_decay", format!("{:?}", self.weight_decay));
        kv("batch_size", self.batch_size.to_string());
        kv("epochs", self.epochs.to_string());
        kv("max_steps", self.max_steps.to_string());
        kv("seed", self.seed.to_string());
        kv("train_root", self.train_root.as_ref().map(|p| p.display().to_string()).unwrap_or_default());
        kv(
            "test_roots",
            self.test_roots.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(","),
        );
        kv("output_dir", self.output_dir.display().to_string());
        kv("augment", self.augment.to_string());
        kv("rotate_deg", format!("{:?}", self.rotate_deg));
        kv("border_clip", format!("{:?}", self.border_clip));
        kv("checkpoint_every", self.checkpoint_every.to_string());
        kv("synthetic_count", self.synthetic_count.to_string());
        kv("synthetic_similarity", format!("{:?}", self.synthetic_similarity));
        kv("workers", self.workers.to_string());
        s
    }

    /// Parses the text form. Keys not present keep the profile defaults, so
    /// a file may set `profile` and override a handful of fields.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut pairs = BTreeMap::new();
        let mut lines = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse { line: i + 1, msg: format!("expected `key = value`, got `{line}`") })?;
            pairs.insert(k.trim().to_string(), v.trim().to_string());
            lines.insert(k.trim().to_string(), i + 1);
        }
        let profile = pairs.remove("profile").unwrap_or_else(|| "tiny".to_string());
        let mut cfg = Self::for_profile(&profile)?;
        for (k, v) in pairs {
            let line = lines[&k];
            cfg.set(&k, &v).map_err(|msg| Error::Parse { line, msg })?;
        }
        Ok(cfg)
    }

    /// Assigns one field from its text form.
    pub fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        fn p<F: std::str::FromStr>(key: &str, v: &str) -> std::result::Result<F, String> {
            v.parse().map_err(|_| format!("invalid value `{v}` for `{key}`"))
        }
        fn list<const N: usize>(key: &str, v: &str) -> std::result::Result<[usize; N], String> {
            let items: Vec<usize> = v.split(',').map(|s| p(key, s.trim())).collect::<std::result::Result<_, _>>()?;
            items.try_into().map_err(|_| format!("`{key}` needs exactly {N} entries"))
        }
        let m = &mut self.model;
        match key {
            "input_size" => m.input_size = p(key, v)?,
            "crop_size" => m.crop_size = p(key, v)?,
            "expansion_ratio" => m.expansion_ratio = p(key, v)?,
            "stage_channels" => m.backbone.stage_channels = list::<5>(key, v)?,
            "stage_blocks" => m.backbone.stage_blocks = list::<5>(key, v)?,
            "bottleneck_expansion" => m.backbone.expansion = p(key, v)?,
            "dec_channels" => m.dec_channels = p(key, v)?,
            "qk_channels" => m.qk_channels = p(key, v)?,
            "pool_sizes" => {
                m.pool_sizes = v.split(',').map(|s| p(key, s.trim())).collect::<std::result::Result<_, _>>()?
            }
            "dilation" => m.dilation = p(key, v)?,
            "nonlocal_max_positions" => m.nonlocal_max_positions = p(key, v)?,
            "ca_reduction" => m.ca_reduction = p(key, v)?,
            "sfm_groups" => m.sfm_groups = p(key, v)?,
            "edge_width" => m.edge_width = p(key, v)?,
            "norm" => m.norm = NormKind::decode(v).ok_or_else(|| format!("unknown norm `{v}`"))?,
            "backbone_norm" => m.backbone_norm = NormKind::decode(v).ok_or_else(|| format!("unknown norm `{v}`"))?,
            "shared_leaf_init" => m.shared_leaf_init = p(key, v)?,
            "lr" => self.lr = p(key, v)?,
            "poly_power" => self.poly_power = p(key, v)?,
            "beta1" => self.beta1 = p(key, v)?,
            "beta2" => self.beta2 = p(key, v)?,
            "weight_decay" => self.weight_decay = p(key, v)?,
            "batch_size" => self.batch_size = p(key, v)?,
            "epochs" => self.epochs = p(key, v)?,
            "max_steps" => self.max_steps = p(key, v)?,
            "seed" => self.seed = p(key, v)?,
            "train_root" => self.train_root = if v.is_empty() { None } else { Some(PathBuf::from(v)) },
            "test_roots" => {
                self.test_roots = v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(PathBuf::from).collect()
            }
            "output_dir" => self.output_dir = PathBuf::from(v),
            "augment" => self.augment = p(key, v)?,
            "rotate_deg" => self.rotate_deg = p(key, v)?,
            "border_clip" => self.border_clip = p(key, v)?,
            "checkpoint_every" => self.checkpoint_every = p(key, v)?,
            "synthetic_count" => self.synthetic_count = p(key, v)?,
            "synthetic_similarity" => self.synthetic_similarity = p(key, v)?,
            "workers" => self.workers = p(key, v)?,
            "profile" => return Err("`profile` must be the first setting".into()),
            other => match m.ablation.flag_mut(other) {
                Some(flag) => *flag = p(key, v)?,
                None => return Err(format!("unknown key `{other}`")),
            },
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_text(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }
}
