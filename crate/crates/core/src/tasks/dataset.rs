//! Supervised task datasets held as flat row-major buffers.

use crate::error::{CoreError, Result};
use crate::numcore::rng::SeededRng;
use crate::objectives::Batch;

#[derive(Clone, Debug)]
pub struct TaskDataset {
    pub inputs: Vec<f64>,
    pub input_dim: usize,
    pub labels: Vec<usize>,
    pub task_id: usize,
    pub class_count: usize,
}

impl TaskDataset {
    pub fn new(
        inputs: Vec<f64>,
        input_dim: usize,
        labels: Vec<usize>,
        task_id: usize,
        class_count: usize,
    ) -> Result<Self> {
        if inputs.len() != labels.len() * input_dim {
            return Err(CoreError::dimension("dataset: inputs do not match labels x dim"));
        }
        if labels.iter().any(|&l| l >= class_count) {
            return Err(CoreError::contract("dataset: label out of class range"));
        }
        if inputs.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::numeric("dataset: non-finite input"));
        }
        Ok(TaskDataset { inputs, input_dim, labels, task_id, class_count })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn example(&self, i: usize) -> (&[f64], usize) {
        (&self.inputs[i * self.input_dim..(i + 1) * self.input_dim], self.labels[i])
    }

    /// Copy the rows at `indices` into a batch (order preserved).
    pub fn gather(&self, indices: &[usize]) -> Batch {
        let mut inputs = Vec::with_capacity(indices.len() * self.input_dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            let (x, y) = self.example(i);
            inputs.extend_from_slice(x);
            labels.push(y);
        }
        Batch { inputs, labels, input_dim: self.input_dim }
    }

    pub fn full_batch(&self) -> Batch {
        Batch {
            inputs: self.inputs.clone(),
            labels: self.labels.clone(),
            input_dim: self.input_dim,
        }
    }

    /// Uniform subsample without replacement; the whole set if n >= len.
    pub fn subsample(&self, n: usize, rng: &mut SeededRng) -> TaskDataset {
        if n >= self.len() {
            return self.clone();
        }
        let picked = rng.choose(self.len(), n);
        let batch = self.gather(&picked);
        TaskDataset {
            inputs: batch.inputs,
            input_dim: self.input_dim,
            labels: batch.labels,
            task_id: self.task_id,
            class_count: self.class_count,
        }
    }

    /// Keep only the rows at `indices` as a new dataset.
    pub fn select(&self, indices: &[usize]) -> TaskDataset {
        let batch = self.gather(indices);
        TaskDataset {
            inputs: batch.inputs,
            input_dim: self.input_dim,
            labels: batch.labels,
            task_id: self.task_id,
            class_count: self.class_count,
        }
    }
}
