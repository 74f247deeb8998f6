//! Randomized invariants for the schedule, history, replay, and stream types.

use proptest::prelude::*;

use tdvcl_core::net::NetworkShape;
use tdvcl_core::numcore::rng::SeededRng;
use tdvcl_core::objectives::CoefficientSchedule;
use tdvcl_core::tasks::{make_permuted_stream, ReplayBuffer, TaskDataset};
use tdvcl_core::vardist::{GaussianPrior, MeanFieldGaussian, PosteriorHistory};

fn toy_dataset(task_id: usize, n: usize, dim: usize, seed: u64) -> TaskDataset {
    let mut rng = SeededRng::new(seed);
    let inputs = (0..n * dim).map(|_| rng.uniform()).collect();
    let labels = (0..n).map(|i| i % 2).collect();
    TaskDataset::new(inputs, dim, labels, task_id, 2).unwrap()
}

proptest! {
    #[test]
    fn schedule_weights_normalized_for_any_inputs(n in 1usize..=12, lambda in 0.0f64..1.0) {
        let s = CoefficientSchedule::td_lambda(n, lambda).unwrap();
        let vsum: f64 = s.kl_weights.iter().sum();
        prop_assert!((vsum - 1.0).abs() < 1e-12);
        prop_assert_eq!(s.likelihood_weights[0], 1.0);
        for w in s.likelihood_weights.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-15);
        }
        for v in s.kl_weights.windows(2) {
            prop_assert!(v[1] <= v[0] + 1e-15);
        }
    }

    #[test]
    fn history_ordering_invariant_under_random_pushes(
        capacity in 1usize..5,
        indices in proptest::collection::vec(1usize..50, 1..20),
        seed in 0u64..1000,
    ) {
        let shape = NetworkShape::single_head(2, &[2], 2).unwrap();
        let prior = GaussianPrior::new(1.0).unwrap();
        let mut rng = SeededRng::new(seed);
        let q = MeanFieldGaussian::init_from_prior(shape, &prior, &mut rng).unwrap();
        let mut history = PosteriorHistory::new(capacity);
        for &t in &indices {
            let _ = history.push_snapshot(&q, t); // stale pushes must be rejected
            prop_assert!(history.len() <= capacity);
            // task indices strictly decreasing from slot 0
            for i in 1..history.len() {
                prop_assert!(
                    history.get(i - 1).unwrap().task_index > history.get(i).unwrap().task_index
                );
            }
        }
    }

    #[test]
    fn replay_buffer_never_exceeds_budget_nor_stores_current(
        max_tasks in 1usize..4,
        per_task in 1usize..60,
        task_sizes in proptest::collection::vec(1usize..120, 1..8),
        seed in 0u64..1000,
    ) {
        let mut rng = SeededRng::new(seed);
        let mut buffer = ReplayBuffer::new(max_tasks, per_task);
        for (idx, &n) in task_sizes.iter().enumerate() {
            let task_id = idx + 1;
            buffer.replay_update(&toy_dataset(task_id, n, 3, seed + idx as u64), &mut rng).unwrap();
            let current = task_id + 1; // the task now being trained
            prop_assert!(buffer.total_examples() <= max_tasks * per_task);
            prop_assert!(buffer.task_count() <= max_tasks);
            prop_assert!(!buffer.contains_task(current));
            // only the most recent max_tasks finished tasks are present
            for old in 1..=task_id {
                let expect = old + max_tasks > task_id;
                prop_assert_eq!(buffer.contains_task(old), expect);
            }
        }
    }

    #[test]
    fn permuted_tasks_preserve_pixel_multisets(
        task_count in 1usize..5,
        n in 1usize..6,
        dim in 2usize..20,
        seed in 0u64..1000,
    ) {
        let base_train = toy_dataset(1, n, dim, seed);
        let base_test = toy_dataset(1, n.max(2), dim, seed + 1);
        let mut rng = SeededRng::new(seed + 2);
        let stream = make_permuted_stream(&base_train, &base_test, task_count, &mut rng).unwrap();
        for pair in &stream.tasks {
            for r in 0..pair.train.len() {
                let mut orig: Vec<u64> =
                    base_train.example(r).0.iter().map(|v| v.to_bits()).collect();
                let mut perm: Vec<u64> =
                    pair.train.example(r).0.iter().map(|v| v.to_bits()).collect();
                orig.sort_unstable();
                perm.sort_unstable();
                prop_assert_eq!(orig, perm);
            }
        }
    }
}
