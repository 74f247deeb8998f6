//! Reusable invariant suites behind the `check` CLI subcommand, plus the
//! finite-difference oracle shared by the gradient tests.
//!
//! Each suite returns named pass/fail outcomes so callers (CLI, acceptance
//! tests) can print one line per invariant and gate on the result.

use crate::error::Result;
use crate::net::NetworkShape;
use crate::numcore::rng::SeededRng;
use crate::numcore::tape::Tape;
use crate::objectives::{
    compound_identity_residual, evaluate_objective, Batch, CoefficientSchedule, EpsDraws,
    LagBatch, ObjectiveContext, ObjectiveSpec,
};
use crate::oracle::{
    exact_trajectory, exact_update, kl_trajectory, make_dense_stream, make_orthogonal_stream,
    median, perturbed_recursion, ConjugateGaussianPosterior, RecursionMode, RegressionTask,
};
use crate::vardist::{GaussianPrior, MeanFieldGaussian, PosteriorHistory};

/// Central finite differences of a scalar function at `x`.
pub fn central_difference<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], h: f64) -> Vec<f64> {
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let plus = f(&probe);
        probe[i] = orig - h;
        let minus = f(&probe);
        probe[i] = orig;
        grad[i] = (plus - minus) / (2.0 * h);
    }
    grad
}

/// Outcome of one named invariant check.
#[derive(Debug, Clone, serde::Serialize)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckOutcome {
    pub fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        CheckOutcome { name: name.into(), passed, detail: detail.into() }
    }
}

pub fn all_passed(outcomes: &[CheckOutcome]) -> bool {
    outcomes.iter().all(|o| o.passed)
}

/// Run a named suite at its default size.
pub fn run_suite(name: &str) -> Result<Vec<CheckOutcome>> {
    match name {
        "coefficients" => Ok(coefficients_suite()),
        "propositions" => Ok(propositions_suite(100)),
        "gradients" => Ok(gradients_suite()),
        "oracle" => Ok(oracle_suite(30)),
        other => Err(crate::error::CoreError::contract(format!("unknown check suite: {other}"))),
    }
}

// --- coefficients -----------------------------------------------------------

pub fn coefficients_suite() -> Vec<CheckOutcome> {
    let lambdas = [0.0, 0.1, 0.5, 0.9, 1.0 - 1e-9];
    let mut out = Vec::new();

    let mut worst_vsum = 0.0f64;
    let mut worst_w0 = 0.0f64;
    let mut monotone_ok = true;
    for n in 1..=10 {
        for &lambda in &lambdas {
            let s = CoefficientSchedule::td_lambda(n, lambda).expect("valid inputs");
            let vsum: f64 = s.kl_weights.iter().sum();
            worst_vsum = worst_vsum.max((vsum - 1.0).abs());
            worst_w0 = worst_w0.max((s.likelihood_weights[0] - 1.0).abs());
            monotone_ok &= s.likelihood_weights.windows(2).all(|w| w[1] <= w[0] + 1e-15)
                && s.kl_weights.windows(2).all(|v| v[1] <= v[0] + 1e-15)
                && s.likelihood_weights.iter().all(|&w| w >= 0.0)
                && s.kl_weights.iter().all(|&v| v >= 0.0);
        }
    }
    out.push(CheckOutcome::new(
        "coefficients/kl_weights_sum_to_one",
        worst_vsum < 1e-12,
        format!("max |sum v - 1| = {worst_vsum:.3e} over n<=10, lambda grid"),
    ));
    out.push(CheckOutcome::new(
        "coefficients/w0_is_one",
        worst_w0 == 0.0,
        format!("max |w0 - 1| = {worst_w0:.3e}"),
    ));
    out.push(CheckOutcome::new(
        "coefficients/weights_nonincreasing",
        monotone_ok,
        "both sequences non-negative and non-increasing".to_string(),
    ));

    // lambda = 0 recovers the single-anchor weights for every n
    let mut zero_ok = true;
    for n in 1..=10 {
        let s = CoefficientSchedule::td_lambda(n, 0.0).expect("valid");
        zero_ok &= s.likelihood_weights[0] == 1.0 && s.kl_weights[0] == 1.0;
        zero_ok &= s.likelihood_weights[1..].iter().all(|&w| w == 0.0);
        zero_ok &= s.kl_weights[1..].iter().all(|&v| v == 0.0);
    }
    out.push(CheckOutcome::new(
        "coefficients/lambda_zero_is_vcl",
        zero_ok,
        "lambda = 0 gives w = [1, 0, ...], v = [1, 0, ...]".to_string(),
    ));

    // lambda -> 1 limit matches the n-step weights elementwise
    let mut worst_limit = 0.0f64;
    for n in 1..=10 {
        let td = CoefficientSchedule::td_lambda(n, 1.0 - 1e-9).expect("valid");
        let ns = CoefficientSchedule::nstep(n).expect("valid");
        for i in 0..n {
            worst_limit = worst_limit
                .max((td.likelihood_weights[i] - ns.likelihood_weights[i]).abs())
                .max((td.kl_weights[i] - ns.kl_weights[i]).abs());
        }
    }
    out.push(CheckOutcome::new(
        "coefficients/lambda_near_one_matches_nstep",
        worst_limit < 1e-6,
        format!("max elementwise gap = {worst_limit:.3e}"),
    ));

    // cross identity via the stable geometric-sum form
    let mut worst_cross = 0.0f64;
    for n in 1..=10 {
        for &lambda in &lambdas {
            let s = CoefficientSchedule::td_lambda(n, lambda).expect("valid");
            for i in 0..n {
                let geo: f64 = (0..n - i).map(|j| lambda.powi(j as i32)).sum();
                worst_cross = worst_cross.max((s.likelihood_weights[i] - s.kl_weights[i] * geo).abs());
            }
        }
    }
    out.push(CheckOutcome::new(
        "coefficients/cross_identity",
        worst_cross < 1e-12,
        format!("max |w_i - v_i * sum_j lambda^j| = {worst_cross:.3e}"),
    ));

    out
}

// --- propositions ------------------------------------------------------------

struct PropFixture {
    q: MeanFieldGaussian,
    history: PosteriorHistory,
    prior: GaussianPrior,
    shape: NetworkShape,
    batches: Vec<LagBatch>,
    task_index: usize,
}

impl PropFixture {
    fn ctx(&self) -> ObjectiveContext<'_> {
        ObjectiveContext {
            shape: &self.shape,
            history: &self.history,
            prior: &self.prior,
            task_index: self.task_index,
            kl_dataset_scale: 1.0,
        }
    }
}

fn random_fixture(rng: &mut SeededRng, lags: usize) -> PropFixture {
    let input = 3 + rng.below(4) as usize;
    let hidden = 4 + rng.below(5) as usize;
    let classes = 2 + rng.below(3) as usize;
    let shape = NetworkShape::single_head(input, &[hidden], classes).expect("valid shape");
    let prior = GaussianPrior::new(0.3).expect("positive");
    let mut q = MeanFieldGaussian::init_from_prior(shape.clone(), &prior, rng).expect("init");
    for m in q.mu.iter_mut() {
        *m += 0.4 * rng.normal();
    }
    let mut history = PosteriorHistory::new(lags + 1);
    for t in 1..=lags {
        let mut past = q.clone();
        for m in past.mu.iter_mut() {
            *m += 0.3 * rng.normal();
        }
        for r in past.rho.iter_mut() {
            *r += 0.2 * rng.normal();
        }
        history.push_snapshot(&past, t).expect("increasing");
    }
    let batches = (0..lags)
        .map(|_| {
            let rows = 3 + rng.below(6) as usize;
            let inputs = rng.normal_vec(rows * input);
            let labels = (0..rows).map(|_| rng.below(classes as u64) as usize).collect();
            LagBatch::Data(Batch::new(inputs, labels, input).expect("shapes"))
        })
        .collect();
    PropFixture { q, history, prior, shape, batches, task_index: lags + 1 }
}

/// Discounted-sum identity plus the objective equivalences, over random
/// networks and batches with shared Monte-Carlo noise.
pub fn propositions_suite(trials: usize) -> Vec<CheckOutcome> {
    let mut rng = SeededRng::new(0xD15C0);
    let ns = [2usize, 3, 5, 8];
    let lambdas = [0.1, 0.5, 0.9];
    let mut worst_residual = 0.0f64;
    for _ in 0..trials {
        let fx = random_fixture(&mut rng, 8);
        let eps = EpsDraws::sample(3, fx.q.len(), &mut rng);
        for &n in &ns {
            for &lambda in &lambdas {
                let r = compound_identity_residual(n, lambda, &fx.q, &fx.ctx(), &fx.batches, &eps)
                    .expect("identity evaluable");
                worst_residual = worst_residual.max(r);
            }
        }
    }
    let mut out = vec![CheckOutcome::new(
        "propositions/discounted_td_sum_identity",
        worst_residual < 1e-8,
        format!(
            "max |TD(lambda) - normalized discounted TD sum| = {worst_residual:.3e} \
             over {trials} trials, n in {{2,3,5,8}}, lambda in {{0.1,0.5,0.9}}"
        ),
    )];

    // objective equivalences at shared seeds
    let mut worst_equiv = 0.0f64;
    for _ in 0..10 {
        let fx = random_fixture(&mut rng, 4);
        let eps = EpsDraws::sample(3, fx.q.len(), &mut rng);
        let eval = |spec: &ObjectiveSpec| -> f64 {
            let mut tape = Tape::new();
            let live = fx.q.live_nodes(&mut tape);
            let (loss, _) = evaluate_objective(&mut tape, &live, spec, &fx.ctx(), &fx.batches, &eps)
                .expect("evaluable");
            tape.value(loss).item()
        };
        let vcl = eval(&ObjectiveSpec::vcl(5e-3, 3));
        let nstep1 = eval(&ObjectiveSpec::nstep_kl(1, 5e-3, 3));
        let td0 = eval(&ObjectiveSpec::td_lambda(4, 0.0, 5e-3, 3));
        worst_equiv = worst_equiv.max((vcl - nstep1).abs()).max((vcl - td0).abs());
    }
    out.push(CheckOutcome::new(
        "propositions/objective_equivalences",
        worst_equiv < 1e-12,
        format!("max |VCL - NStepKl(1)|, |VCL - TdLambda(0)| = {worst_equiv:.3e}"),
    ));

    out
}

// --- gradients ----------------------------------------------------------------

/// Full-objective gradient of every mu and rho coordinate against central
/// finite differences (h = 1e-5) for a [10, 10] network under the
/// three-anchor TD(lambda) objective.
pub fn gradients_suite() -> Vec<CheckOutcome> {
    let mut rng = SeededRng::new(0x9AD);
    let shape = NetworkShape::single_head(6, &[10, 10], 3).expect("valid");
    let prior = GaussianPrior::new(0.3).expect("positive");
    let mut q = MeanFieldGaussian::init_from_prior(shape.clone(), &prior, &mut rng).expect("init");
    for m in q.mu.iter_mut() {
        *m += 0.4 * rng.normal();
    }
    let lags = 3;
    let mut history = PosteriorHistory::new(lags + 1);
    for t in 1..=lags {
        let mut past = q.clone();
        for m in past.mu.iter_mut() {
            *m += 0.3 * rng.normal();
        }
        history.push_snapshot(&past, t).expect("increasing");
    }
    let batches: Vec<LagBatch> = (0..lags)
        .map(|_| {
            let rows = 6;
            let inputs = rng.normal_vec(rows * 6);
            let labels = (0..rows).map(|_| rng.below(3) as usize).collect();
            LagBatch::Data(Batch::new(inputs, labels, 6).expect("shapes"))
        })
        .collect();
    let spec = ObjectiveSpec::td_lambda(3, 0.5, 5e-3, 2);
    let eps = EpsDraws::sample(2, q.len(), &mut rng);
    let len = q.len();
    let layer_spec = q.layer_spec.clone();
    let history_ref = &history;
    let prior_ref = &prior;
    let batches_ref = &batches;

    let eval = |params: &[f64]| -> f64 {
        let probe = MeanFieldGaussian {
            mu: params[..len].to_vec(),
            rho: params[len..].to_vec(),
            layer_spec: layer_spec.clone(),
        };
        let ctx = ObjectiveContext {
            shape: &layer_spec,
            history: history_ref,
            prior: prior_ref,
            task_index: 4,
            kl_dataset_scale: 1.0,
        };
        let mut tape = Tape::new();
        let live = probe.live_nodes(&mut tape);
        let (loss, _) =
            evaluate_objective(&mut tape, &live, &spec, &ctx, batches_ref, &eps).expect("eval");
        tape.value(loss).item()
    };

    let mut params = q.mu.clone();
    params.extend_from_slice(&q.rho);

    let ctx = ObjectiveContext {
        shape: &layer_spec,
        history: history_ref,
        prior: prior_ref,
        task_index: 4,
        kl_dataset_scale: 1.0,
    };
    let mut tape = Tape::new();
    let live = q.live_nodes(&mut tape);
    let (loss, _) =
        evaluate_objective(&mut tape, &live, &spec, &ctx, batches_ref, &eps).expect("eval");
    let grads = tape.backward(loss).expect("scalar loss");
    let mut analytic = grads.wrt_or_zeros(live.mu, len);
    analytic.extend_from_slice(&grads.wrt_or_zeros(live.rho, len));

    let fd = central_difference(eval, &params, 1e-5);
    let mut worst = 0.0f64;
    let mut worst_coord = 0usize;
    for i in 0..params.len() {
        let denom = analytic[i].abs().max(fd[i].abs()).max(1e-5);
        let rel = (analytic[i] - fd[i]).abs() / denom;
        if rel > worst {
            worst = rel;
            worst_coord = i;
        }
    }
    vec![CheckOutcome::new(
        "gradients/full_objective_vs_finite_differences",
        worst < 1e-4,
        format!(
            "max relative error {worst:.3e} at coordinate {worst_coord} of {} (mu+rho)",
            params.len()
        ),
    )]
}

// --- oracle --------------------------------------------------------------------

pub fn oracle_suite(seeds: usize) -> Vec<CheckOutcome> {
    let mut out = Vec::new();

    // sequential vs joint exact updates
    let mut rng = SeededRng::new(0x0AC1E);
    let mut worst_seq = 0.0f64;
    for _ in 0..10 {
        let stream = make_dense_stream(4, 3, 6, 0.5, 1.0, &mut rng);
        let prior = ConjugateGaussianPosterior::isotropic_prior(4, 1.0).expect("prior");
        let mut sequential = prior.clone();
        for task in &stream.tasks {
            sequential = exact_update(&sequential, task, 0.5).expect("update");
        }
        let mut x = Vec::new();
        let mut y = Vec::new();
        for task in &stream.tasks {
            x.extend_from_slice(&task.x);
            y.extend_from_slice(&task.y);
        }
        let joint =
            exact_update(&prior, &RegressionTask { x, y, dim: 4 }, 0.5).expect("update");
        for i in 0..4 {
            worst_seq = worst_seq.max((sequential.mean[i] - joint.mean[i]).abs());
        }
        for i in 0..16 {
            worst_seq = worst_seq.max((sequential.cov[i] - joint.cov[i]).abs());
        }
    }
    out.push(CheckOutcome::new(
        "oracle/sequential_equals_joint",
        worst_seq < 1e-10,
        format!("max |sequential - joint| = {worst_seq:.3e}"),
    ));

    // zero injected noise recovers the exact trajectory
    let mut worst_zero = 0.0f64;
    for seed in 0..5u64 {
        let mut rng = SeededRng::new(77 + seed);
        let stream = make_orthogonal_stream(4, 6, 0.25, 1.0, &mut rng);
        let approx = perturbed_recursion(&stream, 0.0, RecursionMode::SingleStep, &mut rng)
            .expect("recursion");
        let multi = perturbed_recursion(&stream, 0.0, RecursionMode::NStep(3), &mut rng)
            .expect("recursion");
        let exact = exact_trajectory(&stream).expect("exact");
        for (t, e) in exact.iter().enumerate() {
            for j in 0..4 {
                worst_zero = worst_zero
                    .max((approx[t].mean[j] - e.mean[j]).abs())
                    .max((approx[t].var[j] - e.cov[j * 4 + j]).abs())
                    .max((multi[t].mean[j] - e.mean[j]).abs());
            }
        }
    }
    out.push(CheckOutcome::new(
        "oracle/zero_noise_recovers_truth",
        worst_zero < 1e-6,
        format!("max deviation from exact trajectory = {worst_zero:.3e}"),
    ));

    // directional claim: multi-anchor drifts less under injected noise
    let mut singles = Vec::with_capacity(seeds);
    let mut multis = Vec::with_capacity(seeds);
    for seed in 0..seeds as u64 {
        let mut stream_rng = SeededRng::new(9000 + seed);
        let stream = make_orthogonal_stream(4, 8, 0.25, 1.0, &mut stream_rng);
        let mut rng_a = SeededRng::new(70_000 + seed);
        let mut rng_b = SeededRng::new(70_000 + seed);
        let s = kl_trajectory(&stream, 0.1, RecursionMode::SingleStep, &mut rng_a)
            .expect("trajectory");
        let m = kl_trajectory(&stream, 0.1, RecursionMode::NStep(3), &mut rng_b)
            .expect("trajectory");
        singles.push(*s.last().expect("nonempty"));
        multis.push(*m.last().expect("nonempty"));
    }
    let med_single = median(&mut singles);
    let med_multi = median(&mut multis);
    out.push(CheckOutcome::new(
        "oracle/multi_anchor_median_drift_lower",
        med_multi < med_single,
        format!(
            "median final KL-to-truth over {seeds} seeds: n_step(3) = {med_multi:.4e} \
             vs single_step = {med_single:.4e}"
        ),
    ));

    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn coefficients_suite_passes() {
        let outcomes = coefficients_suite();
        assert!(all_passed(&outcomes), "{outcomes:?}");
        assert_eq!(outcomes.len(), 6);
    }

    #[test]
    fn propositions_suite_passes_small() {
        let outcomes = propositions_suite(5);
        assert!(all_passed(&outcomes), "{outcomes:?}");
    }

    #[test]
    fn gradients_suite_passes() {
        let outcomes = gradients_suite();
        assert!(all_passed(&outcomes), "{outcomes:?}");
    }

    #[test]
    fn oracle_suite_passes_small() {
        let outcomes = oracle_suite(10);
        assert!(all_passed(&outcomes), "{outcomes:?}");
    }

    #[test]
    fn unknown_suite_is_an_error() {
        assert!(run_suite("nonsense").is_err());
    }
}
