//! Model evaluation over in-memory samples, one score list per decoder.

use rayon::prelude::*;

use crate::data::{to_batch, Sample};
use crate::error::Result;
use crate::metrics::{evaluate_image, ImageScores};
use crate::params::ParamStore;
use crate::pipeline::{Model, StageOutputs};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Row labels for [`decoder_maps`].
pub const DECODERS: [&str; 3] = ["first", "second", "third"];

/// Mask probabilities of the three decoders: `σ(M1)`, `M2`, `σ(M3)`.
pub fn decoder_maps<T: Scalar>(out: &StageOutputs<T>) -> [Tensor<T>; 3] {
    [out.m1.clone(), out.m2.clone(), out.prediction()]
}

/// Scores every sample under each decoder, running the model `batch`
/// images at a time.
pub fn evaluate_samples<T: Scalar>(
    model: &Model,
    store: &ParamStore<T>,
    samples: &[Sample],
    batch: usize,
) -> Result<[Vec<ImageScores>; 3]> {
    let mut scores: [Vec<ImageScores>; 3] = Default::default();
    for chunk in samples.chunks(batch.max(1)) {
        let (img, _) = to_batch::<T>(chunk);
        let out = model.predict(store, &img)?;
        let maps = decoder_maps(&out);
        for (d, map) in maps.iter().enumerate() {
            let (_, _, h, w) = map.dims4();
            let chunk_scores: Vec<ImageScores> = chunk
                .par_iter()
                .enumerate()
                .map(|(i, s)| {
                    let pred: Vec<f64> = map.plane(i, 0).iter().map(|v| v.f64()).collect();
                    evaluate_image(&pred, &s.mask_bool(), h, w)
                })
                .collect();
            scores[d].extend(chunk_scores);
        }
    }
    Ok(scores)
}
