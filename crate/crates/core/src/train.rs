//! Training loop: deterministic batch order, seeded augmentation, poly
//! schedule and resumable state.
//!
//! Sample order and augmentation depend only on `(seed, step)`, so a run
//! resumed from a checkpoint sees exactly the batches the uninterrupted run
//! would have seen, whatever the worker count.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autograd::{Graph, Mode};
use crate::checkpoint::{self, CheckpointInfo};
use crate::config::RunConfig;
use crate::data::{augment, to_batch, AugmentConfig, Dataset, Sample};
use crate::error::{Error, Result};
use crate::loss::{total_loss, Breakdown, LossConfig, EDGE_TERMS, MASK_TERMS};
use crate::optim::{poly_lr, Adam};
use crate::params::ParamStore;
use crate::pipeline::Model;
use crate::scalar::Scalar;

const ORDER_STREAM: u64 = 0x6f72_6465_7200_0000;
const AUGMENT_STREAM: u64 = 0x6175_676d_0000_0000;

/// Training images, held in memory or read from disk on demand.
#[derive(Clone, Debug)]
pub enum Source {
    Memory(Vec<Sample>),
    Disk { dataset: Dataset, size: usize },
}

impl Source {
    pub fn len(&self) -> usize {
        match self {
            Source::Memory(s) => s.len(),
            Source::Disk { dataset, .. } => dataset.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, index: usize) -> Result<Sample> {
        match self {
            Source::Memory(s) => Ok(s[index].clone()),
            Source::Disk { dataset, size } => dataset.load(index, *size),
        }
    }
}

/// Dataset indices of the batch taken at `step`: consecutive slices of a
/// fresh permutation per epoch.
pub fn batch_indices(seed: u64, len: usize, batch: usize, step: usize) -> Vec<usize> {
    let mut cached: Option<(usize, Vec<usize>)> = None;
    (0..batch)
        .map(|j| {
            let pos = step * batch + j;
            let epoch = pos / len;
            if cached.as_ref().map(|c| c.0) != Some(epoch) {
                let mut perm: Vec<usize> = (0..len).collect();
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ORDER_STREAM);
                rng.set_stream(epoch as u64);
                perm.shuffle(&mut rng);
                cached = Some((epoch, perm));
            }
            cached.as_ref().expect("filled above").1[pos % len]
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: Breakdown,
}

impl StepRecord {
    pub fn csv_header() -> String {
        let mut h = String::from("step,lr");
        for t in MASK_TERMS.iter().chain(&EDGE_TERMS) {
            h.push(',');
            h.push_str(t);
        }
        h.push_str(",total");
        h
    }

    pub fn csv_row(&self) -> String {
        let mut r = format!("{},{:e}", self.step, self.lr);
        for t in &self.loss.terms {
            r.push_str(&format!(",{:.6}", t.value));
        }
        r.push_str(&format!(",{:.6}", self.loss.total));
        r
    }
}

pub struct Trainer<T: Scalar> {
    pub config: RunConfig,
    pub model: Model,
    pub store: ParamStore<T>,
    pub adam: Adam<T>,
    /// Steps completed.
    pub step: usize,
    pub loss: LossConfig,
    source: Source,
    pool: rayon::ThreadPool,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(config: RunConfig, source: Source) -> Result<Self> {
        config.validate()?;
        if source.is_empty() {
            return Err(Error::Config("training source is empty".into()));
        }
        let (model, store) = Model::new::<T>(&config.model, config.seed)?;
        let adam = Adam::new(&store, config.beta1, config.beta2, config.weight_decay);
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.workers.max(1))
            .build()
            .map_err(|e| Error::Config(format!("workers: {e}")))?;
        Ok(Self { config, model, store, adam, step: 0, loss: LossConfig::default(), source, pool })
    }

    /// Restores parameters, optimiser moments and the step counter.
    pub fn resume(&mut self, path: &Path) -> Result<CheckpointInfo> {
        let info = checkpoint::load(path, &mut self.store, Some(&mut self.adam))?;
        self.step = info.step;
        Ok(info)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let info = CheckpointInfo { step: self.step, config: self.config.to_text() };
        checkpoint::save(path, &self.store, Some(&self.adam), &info)
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.source.len().div_ceil(self.config.batch_size)
    }

    pub fn total_steps(&self) -> usize {
        if self.config.max_steps > 0 {
            self.config.max_steps
        } else {
            self.config.epochs * self.steps_per_epoch()
        }
    }

    /// The samples of batch `step`, augmented when enabled.
    pub fn batch(&self, step: usize) -> Result<Vec<Sample>> {
        let cfg = &self.config;
        let idx = batch_indices(cfg.seed, self.source.len(), cfg.batch_size, step);
        let aug = AugmentConfig { rotate_deg: cfg.rotate_deg, border_clip: cfg.border_clip, ..AugmentConfig::default() };
        let source = &self.source;
        self.pool.install(|| {
            idx.par_iter()
                .enumerate()
                .map(|(slot, &i)| {
                    let s = source.get(i)?;
                    if !cfg.augment {
                        return Ok(s);
                    }
                    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ AUGMENT_STREAM);
                    rng.set_stream((step * cfg.batch_size + slot) as u64);
                    Ok(augment(&s, &aug, &mut rng))
                })
                .collect()
        })
    }

    /// Loss of batch `step` under the current parameters, without updating.
    pub fn evaluate_loss(&self, step: usize) -> Result<Breakdown> {
        let (img, gt) = to_batch::<T>(&self.batch(step)?);
        let g = Graph::new(&self.store, Mode::Eval);
        let x = g.input(img);
        let fv = self.model.forward(&g, x)?;
        Ok(total_loss(&g, &fv, &gt, &self.loss)?.1)
    }

    /// One optimisation step.
    pub fn train_step(&mut self) -> Result<StepRecord> {
        let step = self.step;
        let lr = poly_lr(self.config.lr, step, self.total_steps(), self.config.poly_power);
        let (img, gt) = to_batch::<T>(&self.batch(step)?);
        let (grads, breakdown) = {
            let g = Graph::new(&self.store, Mode::Train);
            let x = g.input(img);
            let fv = self.model.forward(&g, x)?;
            let (loss, breakdown) = total_loss(&g, &fv, &gt, &self.loss)?;
            if !breakdown.total.is_finite() {
                let bad: Vec<_> = breakdown.terms.iter().filter(|t| !t.value.is_finite()).map(|t| t.name).collect();
                return Err(Error::Numeric(format!("non-finite loss at step {step} (terms {bad:?})")));
            }
            (g.backward(loss), breakdown)
        };
        self.adam.step(&mut self.store, &grads, lr);
        self.step += 1;
        Ok(StepRecord { step, lr, loss: breakdown })
    }
}
