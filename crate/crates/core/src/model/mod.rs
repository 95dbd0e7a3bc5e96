//! Focal-modulation classifier whose projections `P` are separable from the
//! shared remainder `xi`.

mod focal;
mod params;

pub use focal::{
    backward, forward, gate_distributions, loss, loss_and_grad, sgd_step, ForwardCache,
};
pub(crate) use focal::{cross_entropy, softmax_rows};
pub use params::{Arch, BlockShared, ModelParams, ModulationParams, ProjectionSet, SharedParams};

use crate::error::{config_err, Result};
use crate::numcore::Matrix;

/// Inputs (`n x input_dim`) with their class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(inputs: Matrix, labels: Vec<usize>) -> Result<Self> {
        if inputs.rows() != labels.len() {
            return config_err(format!(
                "batch has {} rows but {} labels",
                inputs.rows(),
                labels.len()
            ));
        }
        if labels.is_empty() {
            return config_err("batch must contain at least one sample");
        }
        Ok(Self { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Rows `idx` (in the given order) as a new batch.
    pub fn select(&self, idx: &[usize]) -> Batch {
        let cols = self.inputs.cols();
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            data.extend_from_slice(self.inputs.row(i));
        }
        Batch {
            inputs: Matrix::from_vec(idx.len(), cols, data).expect("consistent shape"),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Mean loss and accuracy of `params` on `batch`.
pub fn evaluate_batch(params: &ModelParams, batch: &Batch) -> Result<(f64, f64)> {
    let (_, cache) = forward(params, batch)?;
    let (loss, _) = cross_entropy(&cache.probs, &batch.labels);
    let correct = batch
        .labels
        .iter()
        .enumerate()
        .filter(|(i, &y)| argmax(cache.probs.row(*i)) == y)
        .count();
    Ok((loss, correct as f64 / batch.len() as f64))
}
