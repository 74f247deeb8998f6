//! Size- and age-restricted replay memory, plus the reserved core sets the
//! two-step VCL variant fine-tunes on.
//!
//! The buffer keeps at most `max_tasks` past tasks with at most `per_task`
//! examples each; training on older tasks is impossible by construction,
//! which is what keeps the benchmark from being trivialized by unlimited
//! replay.

use std::collections::VecDeque;

use crate::error::{CoreError, Result};
use crate::numcore::rng::SeededRng;
use crate::objectives::{Batch, LagBatch};
use crate::tasks::dataset::TaskDataset;

#[derive(Clone, Debug)]
pub struct StoredTask {
    pub task_id: usize,
    pub inputs: Vec<f64>,
    pub labels: Vec<usize>,
    pub input_dim: usize,
}

impl StoredTask {
    fn len(&self) -> usize {
        self.labels.len()
    }
}

#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    max_tasks: usize,
    per_task: usize,
    /// Newest task first.
    stored: VecDeque<StoredTask>,
}

impl ReplayBuffer {
    pub fn new(max_tasks: usize, per_task: usize) -> Self {
        ReplayBuffer { max_tasks, per_task, stored: VecDeque::new() }
    }

    pub fn max_tasks(&self) -> usize {
        self.max_tasks
    }

    pub fn per_task(&self) -> usize {
        self.per_task
    }

    pub fn task_count(&self) -> usize {
        self.stored.len()
    }

    pub fn total_examples(&self) -> usize {
        self.stored.iter().map(StoredTask::len).sum()
    }

    pub fn contains_task(&self, task_id: usize) -> bool {
        self.stored.iter().any(|s| s.task_id == task_id)
    }

    /// Store a uniform `per_task`-subset of a finished task, evicting the
    /// oldest stored task beyond `max_tasks`.
    pub fn replay_update(&mut self, finished: &TaskDataset, rng: &mut SeededRng) -> Result<()> {
        if let Some(newest) = self.stored.front() {
            if finished.task_id <= newest.task_id {
                return Err(CoreError::contract(format!(
                    "replay update: task {} not newer than stored {}",
                    finished.task_id, newest.task_id
                )));
            }
        }
        let keep = self.per_task.min(finished.len());
        let picked = rng.choose(finished.len(), keep);
        let batch = finished.gather(&picked);
        self.stored.push_front(StoredTask {
            task_id: finished.task_id,
            inputs: batch.inputs,
            labels: batch.labels,
            input_dim: finished.input_dim,
        });
        while self.stored.len() > self.max_tasks {
            self.stored.pop_back();
        }
        Ok(())
    }

    /// Uniform batch with replacement from the task at `lag` behind
    /// `current_task`, or `Empty` when the restriction leaves no data.
    pub fn replay_batch(
        &self,
        current_task: usize,
        lag: usize,
        batch_size: usize,
        rng: &mut SeededRng,
    ) -> Result<LagBatch> {
        if lag == 0 {
            return Err(CoreError::contract("replay batch: lag must be >= 1"));
        }
        let Some(wanted) = current_task.checked_sub(lag) else {
            return Ok(LagBatch::Empty);
        };
        let Some(task) = self.stored.iter().find(|s| s.task_id == wanted) else {
            return Ok(LagBatch::Empty);
        };
        let dim = task.input_dim;
        let mut inputs = Vec::with_capacity(batch_size * dim);
        let mut labels = Vec::with_capacity(batch_size);
        for _ in 0..batch_size {
            let i = rng.below(task.len() as u64) as usize;
            inputs.extend_from_slice(&task.inputs[i * dim..(i + 1) * dim]);
            labels.push(task.labels[i]);
        }
        Ok(LagBatch::Data(Batch { inputs, labels, input_dim: dim }))
    }
}

/// Per-task reserved subsets, selected before training and excluded from the
/// main split; replayed in a separate fine-tuning pass before evaluation.
#[derive(Clone, Debug)]
pub struct CoreSet {
    per_task: usize,
    stored: Vec<StoredTask>,
}

impl CoreSet {
    pub fn new(per_task: usize) -> Self {
        CoreSet { per_task, stored: Vec::new() }
    }

    pub fn is_empty(&self) -> bool {
        self.stored.is_empty()
    }

    /// Randomly reserve `per_task` examples of `task`; returns the remaining
    /// training set with the reserved rows removed.
    pub fn reserve(&mut self, task: &TaskDataset, rng: &mut SeededRng) -> Result<TaskDataset> {
        if self.stored.iter().any(|s| s.task_id == task.task_id) {
            return Err(CoreError::contract("core set: task already reserved"));
        }
        let keep = self.per_task.min(task.len().saturating_sub(1));
        let mut picked = rng.choose(task.len(), keep);
        picked.sort_unstable();
        let batch = task.gather(&picked);
        self.stored.push(StoredTask {
            task_id: task.task_id,
            inputs: batch.inputs,
            labels: batch.labels,
            input_dim: task.input_dim,
        });
        let mut in_core = vec![false; task.len()];
        for &i in &picked {
            in_core[i] = true;
        }
        let rest: Vec<usize> = (0..task.len()).filter(|&i| !in_core[i]).collect();
        Ok(task.select(&rest))
    }

    /// All reserved examples pooled into one batch.
    pub fn union_batch(&self) -> Option<Batch> {
        let first = self.stored.first()?;
        let dim = first.input_dim;
        let mut inputs = Vec::new();
        let mut labels = Vec::new();
        for s in &self.stored {
            inputs.extend_from_slice(&s.inputs);
            labels.extend_from_slice(&s.labels);
        }
        Some(Batch { inputs, labels, input_dim: dim })
    }

    /// Reserved examples of one task, if stored.
    pub fn task_batch(&self, task_id: usize) -> Option<Batch> {
        self.stored.iter().find(|s| s.task_id == task_id).map(|s| Batch {
            inputs: s.inputs.clone(),
            labels: s.labels.clone(),
            input_dim: s.input_dim,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn task(id: usize, n: usize, seed: u64) -> TaskDataset {
        let mut rng = SeededRng::new(seed);
        let dim = 3;
        let inputs = (0..n * dim).map(|_| rng.uniform()).collect();
        let labels = (0..n).map(|i| i % 2).collect();
        TaskDataset::new(inputs, dim, labels, id, 2).unwrap()
    }

    #[test]
    fn keeps_two_most_recent_tasks() {
        let mut rng = SeededRng::new(1);
        let mut buf = ReplayBuffer::new(2, 200);
        for id in 1..=3 {
            buf.replay_update(&task(id, 300, id as u64), &mut rng).unwrap();
        }
        assert!(!buf.contains_task(1));
        assert!(buf.contains_task(2));
        assert!(buf.contains_task(3));
        assert_eq!(buf.total_examples(), 400);
    }

    #[test]
    fn single_task_budget_forty() {
        let mut rng = SeededRng::new(2);
        let mut buf = ReplayBuffer::new(1, 40);
        buf.replay_update(&task(1, 100, 3), &mut rng).unwrap();
        buf.replay_update(&task(2, 100, 4), &mut rng).unwrap();
        assert_eq!(buf.task_count(), 1);
        assert_eq!(buf.total_examples(), 40);
        assert!(buf.contains_task(2));
    }

    #[test]
    fn stores_whole_task_when_budget_exceeds_size() {
        let mut rng = SeededRng::new(3);
        let mut buf = ReplayBuffer::new(2, 200);
        buf.replay_update(&task(1, 50, 5), &mut rng).unwrap();
        assert_eq!(buf.total_examples(), 50);
    }

    #[test]
    fn replay_batch_for_stored_and_missing_lags() {
        let mut rng = SeededRng::new(4);
        let mut buf = ReplayBuffer::new(2, 10);
        buf.replay_update(&task(1, 30, 6), &mut rng).unwrap();
        buf.replay_update(&task(2, 30, 7), &mut rng).unwrap();
        // current task is 3: lag 1 -> task 2, lag 2 -> task 1, lag 3 -> gone
        let b1 = buf.replay_batch(3, 1, 8, &mut rng).unwrap();
        assert_eq!(b1.as_data().unwrap().rows(), 8);
        let b3 = buf.replay_batch(3, 3, 8, &mut rng).unwrap();
        assert!(b3.as_data().is_none());
        assert!(buf.replay_batch(3, 0, 8, &mut rng).is_err());
    }

    #[test]
    fn replay_batch_deterministic_per_seed() {
        let mut rng = SeededRng::new(5);
        let mut buf = ReplayBuffer::new(1, 20);
        buf.replay_update(&task(1, 40, 8), &mut rng).unwrap();
        let a = buf.replay_batch(2, 1, 6, &mut SeededRng::new(99)).unwrap();
        let b = buf.replay_batch(2, 1, 6, &mut SeededRng::new(99)).unwrap();
        assert_eq!(a.as_data().unwrap().labels, b.as_data().unwrap().labels);
        assert_eq!(a.as_data().unwrap().inputs, b.as_data().unwrap().inputs);
    }

    #[test]
    fn rejects_stale_update() {
        let mut rng = SeededRng::new(6);
        let mut buf = ReplayBuffer::new(2, 10);
        buf.replay_update(&task(2, 20, 9), &mut rng).unwrap();
        assert!(buf.replay_update(&task(2, 20, 10), &mut rng).is_err());
        assert!(buf.replay_update(&task(1, 20, 11), &mut rng).is_err());
    }

    #[test]
    fn coreset_excludes_reserved_from_training_split() {
        let mut rng = SeededRng::new(7);
        let mut cs = CoreSet::new(10);
        let t = task(1, 50, 12);
        let rest = cs.reserve(&t, &mut rng).unwrap();
        assert_eq!(rest.len(), 40);
        let reserved = cs.task_batch(1).unwrap();
        assert_eq!(reserved.rows(), 10);
        // no reserved row appears in the remaining split
        let rest_rows: std::collections::BTreeSet<Vec<u64>> = (0..rest.len())
            .map(|i| rest.example(i).0.iter().map(|v| v.to_bits()).collect())
            .collect();
        for i in 0..reserved.rows() {
            let row: Vec<u64> = reserved.inputs[i * 3..(i + 1) * 3]
                .iter()
                .map(|v| v.to_bits())
                .collect();
            assert!(!rest_rows.contains(&row));
        }
    }
}
