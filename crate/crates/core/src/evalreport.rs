//! Monte-Carlo predictive evaluation, accuracy bookkeeping, and report
//! emission (per-run CSV, aggregated JSON, self-contained SVG plots).

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{CoreError, Result};
use crate::net::{self, NetworkShape};
use crate::numcore::rng::SeededRng;
use crate::vardist::MeanFieldGaussian;

/// acc[t][k]: accuracy on task k's test set after training task t (k <= t).
/// Rows are appended as tasks finish, so row t always has exactly t entries.
#[derive(Clone, Debug, PartialEq)]
pub struct AccuracyMatrix {
    rows: Vec<Vec<f64>>,
    pub seed: u64,
    pub method: String,
}

impl AccuracyMatrix {
    pub fn new(seed: u64, method: impl Into<String>) -> Self {
        AccuracyMatrix { rows: Vec::new(), seed, method: method.into() }
    }

    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        if row.len() != self.rows.len() + 1 {
            return Err(CoreError::contract(format!(
                "row {} must have {} entries, got {}",
                self.rows.len() + 1,
                self.rows.len() + 1,
                row.len()
            )));
        }
        if row.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(CoreError::contract("accuracy outside [0, 1]"));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn task_count(&self) -> usize {
        self.rows.len()
    }

    /// Accuracy on task k after task t, both 1-based.
    pub fn acc(&self, t: usize, k: usize) -> Option<f64> {
        self.rows.get(t - 1).and_then(|r| r.get(k - 1)).copied()
    }

    pub fn row(&self, t: usize) -> Option<&[f64]> {
        self.rows.get(t - 1).map(Vec::as_slice)
    }

    /// Mean accuracy across the past t observed tasks.
    pub fn avg_accuracy(&self, t: usize) -> Result<f64> {
        let row = self
            .row(t)
            .ok_or_else(|| CoreError::contract(format!("row {t} not recorded")))?;
        Ok(row.iter().sum::<f64>() / row.len() as f64)
    }
}

fn softmax_row(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut probs: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let z: f64 = probs.iter().sum();
    for p in probs.iter_mut() {
        *p /= z;
    }
    probs
}

/// Posterior predictive probabilities for a batch:
/// (1/S) sum_s softmax(f(x; theta_s)), theta_s ~ q. Row-major (rows, classes).
pub fn predictive_batch(
    q: &MeanFieldGaussian,
    shape: &NetworkShape,
    inputs: &[f64],
    rows: usize,
    head: usize,
    samples: usize,
    rng: &mut SeededRng,
) -> Result<Vec<f64>> {
    if samples == 0 {
        return Err(CoreError::contract("predictive: samples must be >= 1"));
    }
    let c = shape.classes;
    let mut probs = vec![0.0; rows * c];
    for _ in 0..samples {
        let theta = q.sample_detached(rng);
        let logits = net::forward_logits(shape, &theta, inputs, rows, head)?;
        for r in 0..rows {
            let p = softmax_row(&logits[r * c..(r + 1) * c]);
            for (dst, src) in probs[r * c..(r + 1) * c].iter_mut().zip(p) {
                *dst += src;
            }
        }
    }
    let inv = 1.0 / samples as f64;
    for p in probs.iter_mut() {
        *p *= inv;
    }
    Ok(probs)
}

/// Predictive class probabilities for a single input.
pub fn predictive(
    q: &MeanFieldGaussian,
    shape: &NetworkShape,
    input: &[f64],
    head: usize,
    samples: usize,
    rng: &mut SeededRng,
) -> Result<Vec<f64>> {
    predictive_batch(q, shape, input, 1, head, samples, rng)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Accuracy of the MC predictive classifier on a labeled set.
pub fn predictive_accuracy(
    q: &MeanFieldGaussian,
    shape: &NetworkShape,
    inputs: &[f64],
    labels: &[usize],
    head: usize,
    samples: usize,
    rng: &mut SeededRng,
) -> Result<f64> {
    let rows = labels.len();
    let probs = predictive_batch(q, shape, inputs, rows, head, samples, rng)?;
    let c = shape.classes;
    let hits = labels
        .iter()
        .enumerate()
        .filter(|(r, &y)| argmax(&probs[r * c..(r + 1) * c]) == y)
        .count();
    Ok(hits as f64 / rows as f64)
}

/// Deterministic accuracy at the posterior mean (the MLE baselines).
pub fn point_accuracy(
    q: &MeanFieldGaussian,
    shape: &NetworkShape,
    inputs: &[f64],
    labels: &[usize],
    head: usize,
) -> Result<f64> {
    let rows = labels.len();
    let logits = net::forward_logits(shape, &q.mu, inputs, rows, head)?;
    let c = shape.classes;
    let hits = labels
        .iter()
        .enumerate()
        .filter(|(r, &y)| argmax(&logits[r * c..(r + 1) * c]) == y)
        .count();
    Ok(hits as f64 / rows as f64)
}

// --- report emission -----------------------------------------------------

pub const RUNS_CSV_HEADER: &str = "run_id,seed,method,t,task,accuracy";

#[derive(Debug, Clone)]
pub struct ReportPaths {
    pub runs_csv: PathBuf,
    pub aggregate_json: PathBuf,
    pub avg_plot_svg: PathBuf,
    pub per_task_plot_svg: PathBuf,
}

/// Aggregate across seeds: mean and two sample standard deviations of the
/// average accuracy per (method, t).
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize, PartialEq)]
pub struct AggregateEntry {
    pub mean: f64,
    pub two_sigma: f64,
    pub seeds: usize,
}

pub type Aggregate = BTreeMap<String, BTreeMap<usize, AggregateEntry>>;

pub fn aggregate(matrices: &[AccuracyMatrix]) -> Result<Aggregate> {
    let mut grouped: BTreeMap<(String, usize), Vec<f64>> = BTreeMap::new();
    for m in matrices {
        for t in 1..=m.task_count() {
            grouped
                .entry((m.method.clone(), t))
                .or_default()
                .push(m.avg_accuracy(t)?);
        }
    }
    let mut out: Aggregate = BTreeMap::new();
    for ((method, t), vals) in grouped {
        let n = vals.len();
        let mean = vals.iter().sum::<f64>() / n as f64;
        let two_sigma = if n > 1 {
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
            2.0 * var.sqrt()
        } else {
            0.0
        };
        out.entry(method).or_default().insert(t, AggregateEntry { mean, two_sigma, seeds: n });
    }
    Ok(out)
}

/// Write the per-run CSV, the aggregate JSON, and the SVG plots.
pub fn emit_report(matrices: &[AccuracyMatrix], out_dir: &Path) -> Result<ReportPaths> {
    if matrices.is_empty() {
        return Err(CoreError::contract("emit_report: no matrices"));
    }
    std::fs::create_dir_all(out_dir)?;
    let paths = ReportPaths {
        runs_csv: out_dir.join("runs.csv"),
        aggregate_json: out_dir.join("aggregate.json"),
        avg_plot_svg: out_dir.join("avg_accuracy.svg"),
        per_task_plot_svg: out_dir.join("per_task_accuracy.svg"),
    };

    let mut csv = String::from(RUNS_CSV_HEADER);
    csv.push('\n');
    for m in matrices {
        let run_id = format!("{}-s{}", m.method, m.seed);
        for t in 1..=m.task_count() {
            for (k, acc) in m.row(t).unwrap().iter().enumerate() {
                csv.push_str(&format!(
                    "{run_id},{},{},{t},{},{}\n",
                    m.seed,
                    m.method,
                    k + 1,
                    acc
                ));
            }
        }
    }
    std::fs::write(&paths.runs_csv, csv)?;

    let agg = aggregate(matrices)?;
    std::fs::write(&paths.aggregate_json, serde_json::to_vec_pretty(&agg)?)?;

    // average accuracy vs t, one line per method
    let avg_series: Vec<(String, Vec<(f64, f64)>)> = agg
        .iter()
        .map(|(method, by_t)| {
            (
                method.clone(),
                by_t.iter().map(|(t, e)| (*t as f64, e.mean)).collect(),
            )
        })
        .collect();
    svg_line_plot(&avg_series, "average accuracy vs observed tasks", &paths.avg_plot_svg)?;

    // per-task retention curves of the first matrix's method (one line per task)
    let first_method = &matrices[0].method;
    let horizon = matrices.iter().map(AccuracyMatrix::task_count).max().unwrap_or(0);
    let mut per_task: Vec<(String, Vec<(f64, f64)>)> = Vec::new();
    for k in 1..=horizon {
        let mut pts = Vec::new();
        for t in k..=horizon {
            let same: Vec<f64> = matrices
                .iter()
                .filter(|m| &m.method == first_method)
                .filter_map(|m| m.acc(t, k))
                .collect();
            if !same.is_empty() {
                pts.push((t as f64, same.iter().sum::<f64>() / same.len() as f64));
            }
        }
        if !pts.is_empty() {
            per_task.push((format!("task {k}"), pts));
        }
    }
    svg_line_plot(
        &per_task,
        &format!("per-task accuracy over time ({first_method})"),
        &paths.per_task_plot_svg,
    )?;

    Ok(paths)
}

/// Reload the per-run CSV into matrices (exact f64 round trip).
pub fn load_runs_csv(path: &Path) -> Result<Vec<AccuracyMatrix>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == RUNS_CSV_HEADER => {}
        other => {
            return Err(CoreError::format(format!("unexpected csv header: {other:?}")));
        }
    }
    // run_id -> (seed, method, rows: map t -> map task -> acc)
    let mut runs: BTreeMap<String, (u64, String, BTreeMap<usize, BTreeMap<usize, f64>>)> =
        BTreeMap::new();
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(CoreError::format(format!("csv line {}: bad field count", lineno + 2)));
        }
        let parse = |s: &str, what: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|_| CoreError::format(format!("csv line {}: bad {what}", lineno + 2)))
        };
        let seed = parse(fields[1], "seed")? as u64;
        let t = parse(fields[3], "t")? as usize;
        let task = parse(fields[4], "task")? as usize;
        let acc = parse(fields[5], "accuracy")?;
        let entry = runs
            .entry(fields[0].to_string())
            .or_insert_with(|| (seed, fields[2].to_string(), BTreeMap::new()));
        entry.2.entry(t).or_default().insert(task, acc);
    }
    let mut out = Vec::new();
    for (_, (seed, method, rows)) in runs {
        let mut m = AccuracyMatrix::new(seed, method);
        for (t, by_task) in rows {
            let row: Vec<f64> = (1..=t)
                .map(|k| {
                    by_task.get(&k).copied().ok_or_else(|| {
                        CoreError::format(format!("csv: missing (t={t}, task={k})"))
                    })
                })
                .collect::<Result<_>>()?;
            m.push_row(row)?;
        }
        out.push(m);
    }
    Ok(out)
}

/// Minimal self-contained SVG line plot; axes assume y in [0, 1].
pub fn svg_line_plot(
    series: &[(String, Vec<(f64, f64)>)],
    title: &str,
    path: &Path,
) -> Result<()> {
    const W: f64 = 640.0;
    const H: f64 = 420.0;
    const M: f64 = 50.0;
    let xs: Vec<f64> = series.iter().flat_map(|(_, pts)| pts.iter().map(|p| p.0)).collect();
    let (xmin, xmax) = xs
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    let (xmin, xmax) = if xs.is_empty() || (xmax - xmin).abs() < 1e-12 {
        (0.0, 1.0)
    } else {
        (xmin, xmax)
    };
    let px = |x: f64| M + (x - xmin) / (xmax - xmin) * (W - 2.0 * M);
    let py = |y: f64| H - M - y.clamp(0.0, 1.0) * (H - 2.0 * M);

    let palette = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf"];
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(
        f,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    )?;
    writeln!(f, r#"<rect width="{W}" height="{H}" fill="white"/>"#)?;
    writeln!(
        f,
        r#"<text x="{}" y="20" text-anchor="middle" font-family="sans-serif" font-size="14">{title}</text>"#,
        W / 2.0
    )?;
    // axes
    writeln!(
        f,
        r#"<line x1="{M}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#,
        H - M,
        W - M,
        H - M
    )?;
    writeln!(f, r#"<line x1="{M}" y1="{M}" x2="{M}" y2="{}" stroke="black"/>"#, H - M)?;
    for tick in 0..=5 {
        let y = tick as f64 / 5.0;
        writeln!(
            f,
            r#"<text x="{}" y="{}" text-anchor="end" font-family="sans-serif" font-size="10">{y:.1}</text>"#,
            M - 6.0,
            py(y) + 3.0
        )?;
    }
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = palette[i % palette.len()];
        let d: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y))).collect();
        writeln!(
            f,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            d.join(" ")
        )?;
        writeln!(
            f,
            r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11" fill="{color}">{name}</text>"#,
            W - M + 4.0,
            M + 14.0 * i as f64
        )?;
    }
    writeln!(f, "</svg>")?;
    Ok(())
}
