//! Execute one experiment config end to end: build the stream per seed, run
//! the continual loop, and emit the report artifacts.

use std::path::Path;

use tdvcl_core::error::{CoreError, Result};
use tdvcl_core::evalreport::{aggregate, emit_report, AccuracyMatrix};
use tdvcl_core::numcore::rng::SeededRng;
use tdvcl_core::oracle::{kl_trajectory, make_orthogonal_stream, median, write_kl_csv, RecursionMode};
use tdvcl_core::tasks::{
    load_idx, make_permuted_stream, make_split_stream, synthetic_blob_stream,
    synthetic_image_base, TaskDataset, TaskStream,
};
use tdvcl_core::trainer::run_continual;

use crate::config::{Benchmark, ExperimentConfig, OracleConfig};

fn load_base(config: &ExperimentConfig, which: &str) -> Result<(TaskDataset, TaskDataset)> {
    let data = config
        .data
        .as_ref()
        .ok_or_else(|| CoreError::contract("config field `data`: required"))?
        .resolved();
    let (train_inputs, dim, train_labels) = load_idx(&data.train_images, &data.train_labels)?;
    let (test_inputs, test_dim, test_labels) = load_idx(&data.test_images, &data.test_labels)?;
    if dim != test_dim {
        return Err(CoreError::format("train/test image dimensions disagree"));
    }
    let classes = 1 + train_labels.iter().chain(test_labels.iter()).max().copied().unwrap_or(0);
    let train = TaskDataset::new(train_inputs, dim, train_labels, 1, classes)?;
    let test = TaskDataset::new(test_inputs, dim, test_labels, 1, classes)?;
    eprintln!(
        "[{which}] loaded IDX base: {} train / {} test examples, dim {dim}, {classes} classes",
        train.len(),
        test.len()
    );
    Ok((train, test))
}

/// Build the task stream for one seed.
pub fn build_stream(config: &ExperimentConfig, seed: u64) -> Result<TaskStream> {
    let mut rng = SeededRng::new(seed ^ 0x5eed_5eed);
    match config.benchmark {
        Benchmark::Permuted => {
            let (mut base_train, mut base_test) = if config.data.is_some() {
                load_base(config, "permuted")?
            } else {
                let synth = config.synthetic.clone().unwrap_or_default();
                let train_n = config.train_per_task.unwrap_or(2000);
                let test_n = config.test_per_task.unwrap_or(1000);
                synthetic_image_base(synth.classes, synth.side, train_n, test_n, &mut rng)?
            };
            if let Some(n) = config.train_per_task {
                base_train = base_train.subsample(n, &mut rng);
            }
            if let Some(n) = config.test_per_task {
                base_test = base_test.subsample(n, &mut rng);
            }
            let tasks = config.task_count.unwrap_or(10);
            make_permuted_stream(&base_train, &base_test, tasks, &mut rng)
        }
        Benchmark::Split => {
            let (base_train, base_test) = load_base(config, "split")?;
            let pairs = config.split_pairs.clone().unwrap_or_default();
            let mut stream = make_split_stream(&base_train, &base_test, &pairs)?;
            if let Some(n) = config.train_per_task {
                for pair in stream.tasks.iter_mut() {
                    pair.train = pair.train.subsample(n, &mut rng);
                }
            }
            if let Some(n) = config.test_per_task {
                for pair in stream.tasks.iter_mut() {
                    pair.test = pair.test.subsample(n, &mut rng);
                }
            }
            Ok(stream)
        }
        Benchmark::Synthetic => synthetic_blob_stream(
            config.task_count.unwrap_or(2),
            8,
            config.train_per_task.unwrap_or(200),
            config.test_per_task.unwrap_or(100),
            1.8,
            &mut rng,
        ),
        Benchmark::Oracle => {
            Err(CoreError::contract("oracle benchmark does not build a task stream"))
        }
    }
}

fn print_aggregate_row(matrices: &[AccuracyMatrix]) -> Result<()> {
    let agg = aggregate(matrices)?;
    for (method, by_t) in &agg {
        let mut line = format!("{method:<24}");
        for (t, e) in by_t {
            line.push_str(&format!("  t={t}: {:.3}±{:.3}", e.mean, e.two_sigma));
        }
        println!("{line}");
    }
    Ok(())
}

fn run_oracle(config: &ExperimentConfig, seeds: &[u64], out_dir: &Path) -> Result<()> {
    let oracle: OracleConfig = config.oracle.clone().unwrap_or_default();
    std::fs::create_dir_all(out_dir)?;
    let mut runs = Vec::new();
    let mut single_finals = Vec::new();
    let mut multi_finals = Vec::new();
    for &seed in seeds {
        let mut stream_rng = SeededRng::new(seed ^ 0x0AC1E);
        let stream = make_orthogonal_stream(
            oracle.dim,
            oracle.tasks,
            oracle.noise_var,
            oracle.prior_var,
            &mut stream_rng,
        );
        let mut rng_single = SeededRng::new(seed.wrapping_add(1));
        let mut rng_multi = SeededRng::new(seed.wrapping_add(1));
        let single = kl_trajectory(
            &stream,
            oracle.noise_scale,
            RecursionMode::SingleStep,
            &mut rng_single,
        )?;
        let multi = kl_trajectory(
            &stream,
            oracle.noise_scale,
            RecursionMode::NStep(oracle.nstep),
            &mut rng_multi,
        )?;
        single_finals.push(*single.last().expect("nonempty"));
        multi_finals.push(*multi.last().expect("nonempty"));
        runs.push(("single_step".to_string(), seed, single));
        runs.push((format!("nstep_{}", oracle.nstep), seed, multi));
    }
    let csv = out_dir.join("kl_trajectories.csv");
    write_kl_csv(&runs, &csv)?;
    println!(
        "oracle: median final KL-to-truth over {} seeds: single_step = {:.4e}, nstep_{} = {:.4e}",
        seeds.len(),
        median(&mut single_finals),
        oracle.nstep,
        median(&mut multi_finals),
    );
    println!("wrote {}", csv.display());
    Ok(())
}

/// Execute the config; returns the emitted accuracy matrices (empty for the
/// oracle benchmark).
pub fn run(
    config: &ExperimentConfig,
    out_override: Option<&Path>,
    seed_override: Option<u64>,
) -> Result<Vec<AccuracyMatrix>> {
    let out_dir = out_override.unwrap_or(&config.output_dir).to_path_buf();
    let seeds: Vec<u64> = match seed_override {
        Some(s) => vec![s],
        None => config.seeds.clone(),
    };

    std::fs::create_dir_all(&out_dir)?;
    // stamp the resolved configuration for exact reproducibility
    let resolved = serde_json::json!({
        "config": config,
        "seeds_executed": seeds,
    });
    std::fs::write(out_dir.join("config.resolved.json"), serde_json::to_vec_pretty(&resolved)?)?;

    if config.benchmark == Benchmark::Oracle {
        run_oracle(config, &seeds, &out_dir)?;
        return Ok(Vec::new());
    }

    let spec = config.to_spec()?;
    let mut matrices = Vec::with_capacity(seeds.len());
    for &seed in &seeds {
        let stream = build_stream(config, seed)?;
        let settings = config.to_settings(seed);
        eprintln!("[seed {seed}] running {} tasks", stream.len());
        let result = run_continual(&stream, &spec, &settings)?;
        // per-task logs as JSON lines alongside the reports
        let log_path = out_dir.join(format!("train_log_seed{seed}.jsonl"));
        let mut lines = String::new();
        for log in &result.task_logs {
            lines.push_str(&serde_json::to_string(log)?);
            lines.push('\n');
        }
        std::fs::write(log_path, lines)?;
        matrices.push(result.accuracy);
    }
    emit_report(&matrices, &out_dir)?;
    print_aggregate_row(&matrices)?;
    println!("wrote report files to {}", out_dir.display());
    Ok(matrices)
}
