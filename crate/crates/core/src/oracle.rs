//! Conjugate Bayesian linear-regression testbed.
//!
//! With a Gaussian prior over regression weights and Gaussian observation
//! noise the exact posterior is closed form, so this module can (a) verify
//! the sequential-equals-joint posterior recursion exactly and (b) measure
//! how injected approximation error compounds through single-anchor
//! recursion versus the multi-anchor objectives. Task designs are kept
//! column-orthogonal so a diagonal approximation can be exact at zero
//! injected noise, and the variational fits then have per-coordinate
//! closed-form optima (no optimizer in the loop).

use crate::error::{CoreError, Result};
use crate::numcore::rng::SeededRng;
use crate::objectives::CoefficientSchedule;

// --- small dense symmetric linear algebra --------------------------------

/// Cholesky factor L (lower, row-major) of a symmetric positive definite A.
fn cholesky(a: &[f64], d: usize) -> Result<Vec<f64>> {
    let mut l = vec![0.0; d * d];
    for j in 0..d {
        let mut diag = a[j * d + j];
        for k in 0..j {
            diag -= l[j * d + k] * l[j * d + k];
        }
        if !(diag > 0.0) {
            return Err(CoreError::numeric("matrix not positive definite"));
        }
        let diag = diag.sqrt();
        l[j * d + j] = diag;
        for i in j + 1..d {
            let mut v = a[i * d + j];
            for k in 0..j {
                v -= l[i * d + k] * l[j * d + k];
            }
            l[i * d + j] = v / diag;
        }
    }
    Ok(l)
}

/// Solve A x = b given the Cholesky factor of A.
fn chol_solve(l: &[f64], d: usize, b: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; d];
    for i in 0..d {
        let mut v = b[i];
        for k in 0..i {
            v -= l[i * d + k] * y[k];
        }
        y[i] = v / l[i * d + i];
    }
    let mut x = vec![0.0; d];
    for i in (0..d).rev() {
        let mut v = y[i];
        for k in i + 1..d {
            v -= l[k * d + i] * x[k];
        }
        x[i] = v / l[i * d + i];
    }
    x
}

fn inverse_spd(a: &[f64], d: usize) -> Result<Vec<f64>> {
    let l = cholesky(a, d)?;
    let mut inv = vec![0.0; d * d];
    let mut unit = vec![0.0; d];
    for j in 0..d {
        unit[j] = 1.0;
        let col = chol_solve(&l, d, &unit);
        unit[j] = 0.0;
        for i in 0..d {
            inv[i * d + j] = col[i];
        }
    }
    Ok(inv)
}

fn logdet_from_chol(l: &[f64], d: usize) -> f64 {
    (0..d).map(|i| l[i * d + i].ln()).sum::<f64>() * 2.0
}

// --- exact conjugate posterior --------------------------------------------

/// Exact Gaussian posterior over regression weights.
#[derive(Clone, Debug)]
pub struct ConjugateGaussianPosterior {
    pub mean: Vec<f64>,
    /// Row-major d x d covariance.
    pub cov: Vec<f64>,
}

impl ConjugateGaussianPosterior {
    pub fn isotropic_prior(dim: usize, variance: f64) -> Result<Self> {
        if !(variance > 0.0) {
            return Err(CoreError::contract("prior variance must be positive"));
        }
        let mut cov = vec![0.0; dim * dim];
        for i in 0..dim {
            cov[i * dim + i] = variance;
        }
        Ok(ConjugateGaussianPosterior { mean: vec![0.0; dim], cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// One regression task: N rows of inputs with targets.
#[derive(Clone, Debug)]
pub struct RegressionTask {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub dim: usize,
}

impl RegressionTask {
    pub fn rows(&self) -> usize {
        self.y.len()
    }

    /// X^T y.
    fn xty(&self) -> Vec<f64> {
        let d = self.dim;
        let mut b = vec![0.0; d];
        for r in 0..self.rows() {
            for j in 0..d {
                b[j] += self.x[r * d + j] * self.y[r];
            }
        }
        b
    }

    /// X^T X, row-major.
    fn xtx(&self) -> Vec<f64> {
        let d = self.dim;
        let mut g = vec![0.0; d * d];
        for r in 0..self.rows() {
            let row = &self.x[r * d..(r + 1) * d];
            for i in 0..d {
                for j in 0..d {
                    g[i * d + j] += row[i] * row[j];
                }
            }
        }
        g
    }
}

/// Standard conjugate update:
/// C' = (C^-1 + X^T X / noise_var)^-1, m' = C'(C^-1 m + X^T y / noise_var).
pub fn exact_update(
    prior: &ConjugateGaussianPosterior,
    task: &RegressionTask,
    noise_var: f64,
) -> Result<ConjugateGaussianPosterior> {
    if !(noise_var > 0.0) {
        return Err(CoreError::contract("noise variance must be positive"));
    }
    if task.dim != prior.dim() {
        return Err(CoreError::dimension("task dim does not match prior"));
    }
    let d = prior.dim();
    if task.rows() == 0 {
        return Ok(prior.clone());
    }
    let cinv = inverse_spd(&prior.cov, d)?;
    let mut precision = cinv.clone();
    let xtx = task.xtx();
    for i in 0..d * d {
        precision[i] += xtx[i] / noise_var;
    }
    let cov = inverse_spd(&precision, d)?;
    // rhs = C^-1 m + X^T y / noise_var
    let mut rhs = vec![0.0; d];
    for i in 0..d {
        for j in 0..d {
            rhs[i] += cinv[i * d + j] * prior.mean[j];
        }
    }
    for (r, b) in rhs.iter_mut().zip(task.xty()) {
        *r += b / noise_var;
    }
    let mut mean = vec![0.0; d];
    for i in 0..d {
        for j in 0..d {
            mean[i] += cov[i * d + j] * rhs[j];
        }
    }
    Ok(ConjugateGaussianPosterior { mean, cov })
}

/// Diagonal Gaussian approximation (mean, per-coordinate variance).
#[derive(Clone, Debug)]
pub struct DiagGaussian {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// KL(approx || exact) between a diagonal Gaussian and a full-covariance one.
pub fn kl_to_truth(approx: &DiagGaussian, exact: &ConjugateGaussianPosterior) -> Result<f64> {
    let d = exact.dim();
    if approx.mean.len() != d || approx.var.len() != d {
        return Err(CoreError::dimension("kl_to_truth: dimension mismatch"));
    }
    let l = cholesky(&exact.cov, d)?;
    let cinv = inverse_spd(&exact.cov, d)?;
    let logdet_exact = logdet_from_chol(&l, d);
    let logdet_approx: f64 = approx.var.iter().map(|v| v.ln()).sum();
    let mut trace = 0.0;
    for i in 0..d {
        trace += cinv[i * d + i] * approx.var[i];
    }
    let delta: Vec<f64> = approx.mean.iter().zip(&exact.mean).map(|(a, e)| a - e).collect();
    let mut quad = 0.0;
    for i in 0..d {
        for j in 0..d {
            quad += delta[i] * cinv[i * d + j] * delta[j];
        }
    }
    Ok(0.5 * (trace + quad - d as f64 + logdet_exact - logdet_approx))
}

// --- streams ---------------------------------------------------------------

/// Stream of regression tasks with a shared true weight vector.
#[derive(Clone, Debug)]
pub struct RegressionStream {
    pub tasks: Vec<RegressionTask>,
    pub true_weights: Vec<f64>,
    pub noise_var: f64,
    pub prior_var: f64,
}

/// Column-orthogonal designs (one scaled basis row per coordinate), so
/// X^T X is diagonal and the exact posterior stays diagonal.
pub fn make_orthogonal_stream(
    dim: usize,
    task_count: usize,
    noise_var: f64,
    prior_var: f64,
    rng: &mut SeededRng,
) -> RegressionStream {
    let true_weights = rng.normal_vec(dim);
    let mut tasks = Vec::with_capacity(task_count);
    for _ in 0..task_count {
        let mut x = vec![0.0; dim * dim];
        let mut y = vec![0.0; dim];
        for j in 0..dim {
            let alpha = 0.7 + 0.8 * rng.uniform();
            x[j * dim + j] = alpha;
            y[j] = alpha * true_weights[j] + noise_var.sqrt() * rng.normal();
        }
        tasks.push(RegressionTask { x, y, dim });
    }
    RegressionStream { tasks, true_weights, noise_var, prior_var }
}

/// Dense random designs for recursion checks where diagonality is not needed.
pub fn make_dense_stream(
    dim: usize,
    task_count: usize,
    rows_per_task: usize,
    noise_var: f64,
    prior_var: f64,
    rng: &mut SeededRng,
) -> RegressionStream {
    let true_weights = rng.normal_vec(dim);
    let mut tasks = Vec::with_capacity(task_count);
    for _ in 0..task_count {
        let x = rng.normal_vec(rows_per_task * dim);
        let mut y = vec![0.0; rows_per_task];
        for r in 0..rows_per_task {
            let mut v = 0.0;
            for j in 0..dim {
                v += x[r * dim + j] * true_weights[j];
            }
            y[r] = v + noise_var.sqrt() * rng.normal();
        }
        tasks.push(RegressionTask { x, y, dim });
    }
    RegressionStream { tasks, true_weights, noise_var, prior_var }
}

/// Exact posterior after each task of a stream.
pub fn exact_trajectory(stream: &RegressionStream) -> Result<Vec<ConjugateGaussianPosterior>> {
    let dim = stream.tasks[0].dim;
    let mut current = ConjugateGaussianPosterior::isotropic_prior(dim, stream.prior_var)?;
    let mut out = Vec::with_capacity(stream.tasks.len());
    for task in &stream.tasks {
        current = exact_update(&current, task, stream.noise_var)?;
        out.push(current.clone());
    }
    Ok(out)
}

/// Anchoring mode of the emulated variational recursion.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RecursionMode {
    /// Anchor only to the previous approximation (single-anchor recursion).
    SingleStep,
    /// Anchor to the last n approximations with the (n-i)/n and 1/n weights.
    NStep(usize),
}

impl RecursionMode {
    fn horizon(self) -> usize {
        match self {
            RecursionMode::SingleStep => 1,
            RecursionMode::NStep(n) => n,
        }
    }
}

/// Emulate variational continual learning on the conjugate stream with
/// diagonal approximations, injecting Gaussian mean noise of magnitude
/// `noise_scale` after each task's fit.
///
/// Because the designs are column-orthogonal the per-task variational
/// optimum is solved in closed form per coordinate:
/// precision_j = sum_i w_i d_{t-i,j} / noise_var + sum_i v_i / s_{anchor_i,j}
/// and the mean solves the matching linear equation.
pub fn perturbed_recursion(
    stream: &RegressionStream,
    noise_scale: f64,
    mode: RecursionMode,
    rng: &mut SeededRng,
) -> Result<Vec<DiagGaussian>> {
    if noise_scale < 0.0 {
        return Err(CoreError::contract("noise scale must be >= 0"));
    }
    let dim = stream.tasks[0].dim;
    let horizon = mode.horizon();
    // per-task sufficient statistics
    let stats: Vec<(Vec<f64>, Vec<f64>)> = stream
        .tasks
        .iter()
        .map(|task| {
            let xtx = task.xtx();
            let diag: Vec<f64> = (0..dim).map(|j| xtx[j * dim + j]).collect();
            (diag, task.xty())
        })
        .collect();

    let prior = DiagGaussian { mean: vec![0.0; dim], var: vec![stream.prior_var; dim] };
    let mut approximations: Vec<DiagGaussian> = Vec::with_capacity(stream.tasks.len());

    for t in 1..=stream.tasks.len() {
        let n_t = horizon.min(t);
        let sched = CoefficientSchedule::nstep(n_t)?;
        let mut mean = vec![0.0; dim];
        let mut var = vec![0.0; dim];
        for j in 0..dim {
            let mut precision = 0.0;
            let mut rhs = 0.0;
            for i in 0..n_t {
                let w = sched.likelihood_weights[i];
                let v = sched.kl_weights[i];
                let (ref d_stats, ref b_stats) = stats[t - 1 - i];
                precision += w * d_stats[j] / stream.noise_var;
                rhs += w * b_stats[j] / stream.noise_var;
                let anchor = if t >= i + 2 {
                    &approximations[t - i - 2]
                } else {
                    &prior
                };
                precision += v / anchor.var[j];
                rhs += v * anchor.mean[j] / anchor.var[j];
            }
            mean[j] = rhs / precision;
            var[j] = 1.0 / precision;
        }
        if noise_scale > 0.0 {
            for m in mean.iter_mut() {
                *m += noise_scale * rng.normal();
            }
        }
        approximations.push(DiagGaussian { mean, var });
    }
    Ok(approximations)
}

/// KL-to-truth after each task for a given recursion mode.
pub fn kl_trajectory(
    stream: &RegressionStream,
    noise_scale: f64,
    mode: RecursionMode,
    rng: &mut SeededRng,
) -> Result<Vec<f64>> {
    let approx = perturbed_recursion(stream, noise_scale, mode, rng)?;
    let exact = exact_trajectory(stream)?;
    approx
        .iter()
        .zip(exact.iter())
        .map(|(a, e)| kl_to_truth(a, e))
        .collect()
}

/// KL-to-truth trajectories in the run CSV schema (the KL value occupies the
/// accuracy column; task mirrors t).
pub fn write_kl_csv(
    runs: &[(String, u64, Vec<f64>)],
    path: &std::path::Path,
) -> Result<()> {
    let mut text = String::from(crate::evalreport::RUNS_CSV_HEADER);
    text.push('\n');
    for (method, seed, traj) in runs {
        let run_id = format!("{method}-s{seed}");
        for (idx, kl) in traj.iter().enumerate() {
            let t = idx + 1;
            text.push_str(&format!("{run_id},{seed},{method},{t},{t},{kl}\n"));
        }
    }
    std::fs::write(path, text)?;
    Ok(())
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}
