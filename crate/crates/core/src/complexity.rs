//! Parameter and multiply-accumulate accounting.
//!
//! MACs are counted by running the forward pass on shape-only tensors, so
//! the figure follows the model's actual layer shapes. The crop path always
//! runs at the configured crop size, which makes the count independent of
//! the boxes chosen at run time.

use crate::autograd::{Graph, Mode};
use crate::config::ModelConfig;
use crate::error::Result;
use crate::params::ParamStore;
use crate::pipeline::Model;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Complexity {
    pub parameters: usize,
    /// Per-image multiply-accumulates of one forward pass.
    pub macs: u64,
    /// Trainable scalars by top-level namespace, in registration order.
    pub groups: Vec<(String, usize)>,
}

impl Complexity {
    pub fn gmacs(&self) -> f64 {
        self.macs as f64 / 1e9
    }

    pub fn mparams(&self) -> f64 {
        self.parameters as f64 / 1e6
    }
}

fn namespace(name: &str) -> String {
    let parts: Vec<&str> = name.split('.').collect();
    let depth = if parts[0] == "mfem" { 2 } else { 1 };
    parts[..depth.min(parts.len())].join(".")
}

/// Counts for an existing model and parameter store.
pub fn measure<T: Scalar>(model: &Model, store: &ParamStore<T>) -> Result<Complexity> {
    let s = model.config.input_size;
    let g = Graph::new(store, Mode::Meta);
    let x = g.input(Tensor::meta(&[1, 3, s, s]));
    model.forward(&g, x)?;
    let mut groups: Vec<(String, usize)> = Vec::new();
    for id in store.trainable_ids() {
        let ns = namespace(store.name(id));
        let n = store.get(id).numel();
        match groups.iter_mut().find(|(k, _)| *k == ns) {
            Some((_, c)) => *c += n,
            None => groups.push((ns, n)),
        }
    }
    Ok(Complexity { parameters: store.num_parameters(), macs: g.macs(), groups })
}

/// Builds the model described by `cfg` and counts it.
pub fn analyze(cfg: &ModelConfig) -> Result<Complexity> {
    let (model, store) = Model::new::<f32>(cfg, 0)?;
    measure(&model, &store)
}
