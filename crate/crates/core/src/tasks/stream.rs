//! Task-stream construction: permuted-pixel and split-class protocols plus
//! seeded synthetic generators for self-contained runs.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::numcore::rng::SeededRng;
use crate::tasks::dataset::TaskDataset;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    Permuted,
    Split,
    Synthetic,
}

#[derive(Clone, Debug)]
pub struct TaskPair {
    pub train: TaskDataset,
    pub test: TaskDataset,
}

#[derive(Clone, Debug)]
pub struct TaskStream {
    pub tasks: Vec<TaskPair>,
    pub protocol: Protocol,
}

impl TaskStream {
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.tasks[0].train.input_dim
    }

    pub fn class_count(&self) -> usize {
        self.tasks[0].train.class_count
    }
}

fn apply_permutation(data: &TaskDataset, perm: &[usize], task_id: usize) -> TaskDataset {
    let dim = data.input_dim;
    let mut inputs = vec![0.0; data.inputs.len()];
    for r in 0..data.len() {
        let src = &data.inputs[r * dim..(r + 1) * dim];
        let dst = &mut inputs[r * dim..(r + 1) * dim];
        for (j, &p) in perm.iter().enumerate() {
            dst[j] = src[p];
        }
    }
    TaskDataset {
        inputs,
        input_dim: dim,
        labels: data.labels.clone(),
        task_id,
        class_count: data.class_count,
    }
}

/// Permuted-pixel stream: task 1 is the identity, tasks 2..T apply fresh
/// uniform pixel permutations, the same permutation to train and test.
pub fn make_permuted_stream(
    base_train: &TaskDataset,
    base_test: &TaskDataset,
    task_count: usize,
    rng: &mut SeededRng,
) -> Result<TaskStream> {
    if task_count == 0 {
        return Err(CoreError::contract("permuted stream: need at least one task"));
    }
    if base_train.input_dim != base_test.input_dim
        || base_train.class_count != base_test.class_count
    {
        return Err(CoreError::contract("permuted stream: train/test disagree"));
    }
    let mut tasks = Vec::with_capacity(task_count);
    for t in 1..=task_count {
        let pair = if t == 1 {
            let mut train = base_train.clone();
            train.task_id = 1;
            let mut test = base_test.clone();
            test.task_id = 1;
            TaskPair { train, test }
        } else {
            let perm = rng.permutation(base_train.input_dim);
            TaskPair {
                train: apply_permutation(base_train, &perm, t),
                test: apply_permutation(base_test, &perm, t),
            }
        };
        tasks.push(pair);
    }
    Ok(TaskStream { tasks, protocol: Protocol::Permuted })
}

fn filter_pair(
    data: &TaskDataset,
    pair: (usize, usize),
    task_id: usize,
    relabel: bool,
) -> TaskDataset {
    let mut inputs = Vec::new();
    let mut labels = Vec::new();
    for i in 0..data.len() {
        let (x, y) = data.example(i);
        if y == pair.0 || y == pair.1 {
            inputs.extend_from_slice(x);
            labels.push(if relabel {
                usize::from(y == pair.1)
            } else {
                y
            });
        }
    }
    TaskDataset {
        inputs,
        input_dim: data.input_dim,
        labels,
        task_id,
        class_count: if relabel { 2 } else { data.class_count },
    }
}

/// Split-class stream: task i keeps only its two classes, relabeled {0, 1}
/// for the shared binary output head.
pub fn make_split_stream(
    base_train: &TaskDataset,
    base_test: &TaskDataset,
    pairs: &[(usize, usize)],
) -> Result<TaskStream> {
    if pairs.is_empty() {
        return Err(CoreError::contract("split stream: need at least one pair"));
    }
    let mut seen = std::collections::BTreeSet::new();
    for &(a, b) in pairs {
        if a == b || !seen.insert(a) || !seen.insert(b) {
            return Err(CoreError::contract("split stream: class pairs must be disjoint"));
        }
        if a >= base_train.class_count || b >= base_train.class_count {
            return Err(CoreError::contract("split stream: class out of range"));
        }
    }
    let mut tasks = Vec::with_capacity(pairs.len());
    for (idx, &pair) in pairs.iter().enumerate() {
        let t = idx + 1;
        tasks.push(TaskPair {
            train: filter_pair(base_train, pair, t, true),
            test: filter_pair(base_test, pair, t, true),
        });
    }
    Ok(TaskStream { tasks, protocol: Protocol::Split })
}

/// Linearly separable two-class blobs with per-task random directions;
/// the light-weight stream used by smoke configs and trainer tests.
pub fn synthetic_blob_stream(
    task_count: usize,
    dim: usize,
    n_train: usize,
    n_test: usize,
    separation: f64,
    rng: &mut SeededRng,
) -> Result<TaskStream> {
    if task_count == 0 || dim == 0 {
        return Err(CoreError::contract("blob stream: degenerate size"));
    }
    let mut tasks = Vec::with_capacity(task_count);
    for t in 1..=task_count {
        let direction: Vec<f64> = {
            let raw = rng.normal_vec(dim);
            let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            raw.iter().map(|v| v / norm).collect()
        };
        let make = |n: usize, rng: &mut SeededRng| -> TaskDataset {
            let mut inputs = Vec::with_capacity(n * dim);
            let mut labels = Vec::with_capacity(n);
            for i in 0..n {
                let cls = i % 2;
                let sign = if cls == 0 { -1.0 } else { 1.0 };
                for d in 0..dim {
                    inputs.push(sign * separation * direction[d] + rng.normal());
                }
                labels.push(cls);
            }
            TaskDataset { inputs, input_dim: dim, labels, task_id: t, class_count: 2 }
        };
        let train = make(n_train, rng);
        let test = make(n_test, rng);
        tasks.push(TaskPair { train, test });
    }
    Ok(TaskStream { tasks, protocol: Protocol::Synthetic })
}

/// Seeded stand-in for an image classification base set.
///
/// Classes are sparse mixtures over a shared dictionary of Gaussian bumps,
/// with pairs of classes sharing most of their active components so the
/// decision boundaries are genuinely fine-grained. Per-sample coefficient
/// jitter, a random translation, and pixel noise give intra-class spread.
/// Serves the permuted-pixel protocol when no IDX data is on disk.
pub fn synthetic_image_base(
    classes: usize,
    side: usize,
    n_train: usize,
    n_test: usize,
    rng: &mut SeededRng,
) -> Result<(TaskDataset, TaskDataset)> {
    if classes < 2 || side < 8 {
        return Err(CoreError::contract("image base: need >= 2 classes and side >= 8"));
    }
    let dim = side * side;
    let basis_count = 64usize;
    let mut bases: Vec<Vec<f64>> = Vec::with_capacity(basis_count);
    for _ in 0..basis_count {
        let cx = rng.uniform() * side as f64;
        let cy = rng.uniform() * side as f64;
        let width = 2.0 + 2.5 * rng.uniform();
        let mut basis = vec![0.0f64; dim];
        for y in 0..side {
            for x in 0..side {
                let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                basis[y * side + x] = (-d2 / (2.0 * width * width)).exp();
            }
        }
        bases.push(basis);
    }

    // confusable pairs: classes 2k and 2k+1 share a core pattern and differ
    // in a small sparse delta
    let mut coefficients: Vec<Vec<f64>> = Vec::with_capacity(classes);
    let cores = classes.div_ceil(2);
    let mut core_patterns = Vec::with_capacity(cores);
    for _ in 0..cores {
        let mut c = vec![0.0f64; basis_count];
        for _ in 0..14 {
            let j = rng.below(basis_count as u64) as usize;
            c[j] = 0.4 + 0.6 * rng.uniform();
        }
        core_patterns.push(c);
    }
    for k in 0..classes {
        let mut c = core_patterns[k / 2].clone();
        for _ in 0..4 {
            let j = rng.below(basis_count as u64) as usize;
            if k % 2 == 0 {
                c[j] += 0.7 + 0.3 * rng.uniform();
            } else {
                c[j] = 0.0;
            }
        }
        coefficients.push(c);
    }

    let make = |n: usize, first_id: usize, rng: &mut SeededRng| -> TaskDataset {
        let mut inputs = Vec::with_capacity(n * dim);
        let mut labels = Vec::with_capacity(n);
        let mut image = vec![0.0f64; dim];
        for i in 0..n {
            let cls = (first_id + i) % classes;
            let coeff = &coefficients[cls];
            image.iter_mut().for_each(|v| *v = 0.0);
            for (j, &c) in coeff.iter().enumerate() {
                if c == 0.0 {
                    continue;
                }
                let jitter = (1.0 + 0.35 * rng.normal()).max(0.0);
                let scale = c * jitter;
                if scale != 0.0 {
                    for (dst, &b) in image.iter_mut().zip(&bases[j]) {
                        *dst += scale * b;
                    }
                }
            }
            let dx = rng.below(5) as isize - 2;
            let dy = rng.below(5) as isize - 2;
            for y in 0..side {
                for x in 0..side {
                    let sx = (x as isize - dx).rem_euclid(side as isize) as usize;
                    let sy = (y as isize - dy).rem_euclid(side as isize) as usize;
                    let v = 0.6 * image[sy * side + sx] + 0.1 * rng.normal();
                    inputs.push(v.clamp(0.0, 1.0));
                }
            }
            labels.push(cls);
        }
        TaskDataset { inputs, input_dim: dim, labels, task_id: 1, class_count: classes }
    };
    let train = make(n_train, 0, rng);
    let test = make(n_test, 1, rng);
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_base(seed: u64) -> (TaskDataset, TaskDataset) {
        let mut rng = SeededRng::new(seed);
        let dim = 9;
        let make = |n: usize, rng: &mut SeededRng| {
            let inputs = (0..n * dim).map(|_| rng.uniform()).collect();
            let labels = (0..n).map(|i| i % 4).collect();
            TaskDataset::new(inputs, dim, labels, 1, 4).unwrap()
        };
        let train = make(12, &mut rng);
        let test = make(8, &mut rng);
        (train, test)
    }

    #[test]
    fn permuted_first_task_is_identity() {
        let (train, test) = toy_base(1);
        let mut rng = SeededRng::new(2);
        let stream = make_permuted_stream(&train, &test, 1, &mut rng).unwrap();
        assert_eq!(stream.len(), 1);
        assert_eq!(stream.tasks[0].train.inputs, train.inputs);
        assert_eq!(stream.tasks[0].test.inputs, test.inputs);
    }

    #[test]
    fn permuted_preserves_pixel_multiset() {
        let (train, test) = toy_base(3);
        let mut rng = SeededRng::new(4);
        let stream = make_permuted_stream(&train, &test, 4, &mut rng).unwrap();
        for pair in &stream.tasks {
            for r in 0..pair.train.len() {
                let mut orig: Vec<u64> =
                    train.example(r).0.iter().map(|v| v.to_bits()).collect();
                let mut perm: Vec<u64> =
                    pair.train.example(r).0.iter().map(|v| v.to_bits()).collect();
                orig.sort_unstable();
                perm.sort_unstable();
                assert_eq!(orig, perm);
            }
        }
    }

    #[test]
    fn permuted_deterministic_per_seed() {
        let (train, test) = toy_base(5);
        let a = make_permuted_stream(&train, &test, 3, &mut SeededRng::new(6)).unwrap();
        let b = make_permuted_stream(&train, &test, 3, &mut SeededRng::new(6)).unwrap();
        for (pa, pb) in a.tasks.iter().zip(b.tasks.iter()) {
            assert_eq!(pa.train.inputs, pb.train.inputs);
        }
    }

    #[test]
    fn split_filters_and_relabels() {
        let (train, test) = toy_base(7);
        let stream = make_split_stream(&train, &test, &[(0, 1), (2, 3)]).unwrap();
        assert_eq!(stream.len(), 2);
        for pair in &stream.tasks {
            assert_eq!(pair.train.class_count, 2);
            assert!(pair.train.labels.iter().all(|&l| l < 2));
            assert!(pair.test.labels.iter().all(|&l| l < 2));
        }
        // tasks partition the examples: totals add up
        let total: usize = stream.tasks.iter().map(|p| p.train.len()).sum();
        assert_eq!(total, train.len());
    }

    #[test]
    fn split_rejects_overlapping_pairs() {
        let (train, test) = toy_base(8);
        assert!(matches!(
            make_split_stream(&train, &test, &[(0, 1), (1, 2)]),
            Err(CoreError::Contract(_))
        ));
    }

    #[test]
    fn synthetic_image_base_is_learnable_shape() {
        let mut rng = SeededRng::new(11);
        let (train, test) = synthetic_image_base(4, 8, 40, 20, &mut rng).unwrap();
        assert_eq!(train.input_dim, 64);
        assert_eq!(train.len(), 40);
        assert_eq!(test.len(), 20);
        assert!(train.inputs.iter().all(|&v| (0.0..=1.0).contains(&v)));
        // all classes present
        let mut seen = [false; 4];
        for &l in &train.labels {
            seen[l] = true;
        }
        assert!(seen.iter().all(|&s| s));
    }
}
