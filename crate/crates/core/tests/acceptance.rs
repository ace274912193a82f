//! Acceptance suite. Each test prints one `PASS`/`FAIL` line (bypassing
//! output capture) and then asserts the same condition.

mod common;

use std::io::Write;
use std::time::Instant;

use covsteer::benchmark;
use covsteer::conic::{smat, svec, Backend, ConicProblem, LinExpr, SolveStatus, SolverSettings};
use covsteer::linalg::{max_eigenvalue, min_eigenvalue, psd_factor, Matrix, Vector};
use covsteer::model::HalfPlane;
use covsteer::montecarlo::{self, compare_moments, estimate_moments, SimulationConfig};
use covsteer::propagation::propagate_policy;
use covsteer::steering::{run_algorithm1, solve_two_step, tighten_halfplane, tighten_norm, SteeringSolution};
use covsteer::{MjlsModel, Policy, SteeringOptions};
use rand::{Rng, SeedableRng};
use rand_chacha::{ChaCha20Rng, ChaCha8Rng};
use rand_distr::StandardNormal;
use rayon::prelude::*;

const MOMENT_SAMPLES: usize = 100_000;
const MOMENT_Z: f64 = 3.0;
const MOMENT_SECONDS: f64 = 60.0;
const IDENTITY_Z: f64 = 4.0;
const LOSSLESS_TOL: f64 = 1e-5;
const MAX_ITERATIONS: usize = 15;
const SOLVE_SECONDS: f64 = 120.0;
const BOUNDARY_TOL: f64 = 1e-6;
const VALIDATION_SAMPLES: usize = 2500;
const RISK_BUDGET: f64 = 0.05;
const TERMINAL_SLACK: f64 = 0.5;
const SINGLE_MODE_REL: f64 = 1e-5;
const TIGHTENING_DRAWS: usize = 1_000_000;
const TIGHTENING_TRIALS: u64 = 20;
const CONIC_TOL: f64 = 1e-8;
const ISOMETRY_TOL: f64 = 1e-12;

fn report(id: u32, name: &str, passed: bool, detail: &str) {
    let tag = if passed { "PASS" } else { "FAIL" };
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{tag} criterion {id:>2} {name}: {detail}");
}

fn arbitrary_policy(m: &MjlsModel) -> Policy {
    let ubar = (0..m.horizon)
        .map(|k| (0..2).map(|i| Vector::from_vec(vec![1.0 - 0.3 * k as f64, 0.5 * i as f64 - 0.2])).collect())
        .collect();
    let gains = (0..m.horizon)
        .map(|k| {
            (0..2)
                .map(|i| Matrix::from_row_slice(2, 2, &[-0.2, 0.05 * k as f64, 0.1 * i as f64, -0.4]))
                .collect()
        })
        .collect();
    Policy::with_gains(m, ubar, gains).unwrap()
}

fn converged() -> (MjlsModel, covsteer::ChanceConstraintSet, SteeringSolution, f64) {
    let m = benchmark::two_mode_model();
    let cc = benchmark::two_mode_constraints();
    let start = Instant::now();
    let sol = run_algorithm1(&m, &cc, &SteeringOptions::default()).unwrap();
    (m, cc, sol, start.elapsed().as_secs_f64())
}

#[test]
fn criterion_01_moment_propagation_oracle() {
    let m = benchmark::two_mode_model();
    let policy = arbitrary_policy(&m);
    let start = Instant::now();
    let (tau, xi) = propagate_policy(&m, &policy).unwrap();
    let cfg = SimulationConfig { num_samples: MOMENT_SAMPLES, seed: 101, ..SimulationConfig::default() };
    let samples = montecarlo::simulate(&m, &policy, &cfg).unwrap();
    let emp = estimate_moments(&samples, 2, Some(&tau.xbar)).unwrap();
    let cmp = compare_moments(&emp, &tau, &xi, MOMENT_Z);
    let secs = start.elapsed().as_secs_f64();
    let passed = cmp.passed() && cmp.skipped_buckets.is_empty() && secs <= MOMENT_SECONDS;
    report(
        1,
        "moment propagation vs Monte Carlo",
        passed,
        &format!(
            "{} entries, max z q={:.2} S={:.2} Sigma={:.2} (limit {MOMENT_Z}), {secs:.1}s (limit {MOMENT_SECONDS}s), failures {:?}",
            cmp.entries_checked, cmp.max_z_q, cmp.max_z_s, cmp.max_z_sigma, cmp.failures
        ),
    );
    assert!(passed);
}

#[test]
fn criterion_02_identity_suite() {
    let (m, _, sol, _) = converged();
    let cfg = SimulationConfig { num_samples: MOMENT_SAMPLES, seed: 102, ..SimulationConfig::default() };
    let samples = montecarlo::simulate(&m, &sol.policy, &cfg).unwrap();
    // Moments of the policy itself: the solver's Y matches K S Kᵀ only to its
    // tolerance, which is far above the sampling error where K ≈ 0.
    let (tau, xi) = propagate_policy(&m, &sol.policy).unwrap();
    let rep = montecarlo::verify_identities(&samples, &sol.policy, &tau, &xi, &m).unwrap();
    let detail: Vec<String> = rep.checks.iter().map(|c| format!("{:.2}", c.max_z)).collect();
    let passed = rep.passed && rep.checks.iter().all(|c| c.max_z <= IDENTITY_Z && c.buckets_checked > 0);
    report(
        2,
        "partial-moment identities",
        passed,
        &format!("{} identities, max z [{}] (limit {IDENTITY_Z}), flagged buckets {:?}", rep.checks.len(), detail.join(", "), rep.flagged_buckets),
    );
    assert!(passed);
}

#[test]
fn criterion_03_losslessness() {
    let m = benchmark::two_mode_model();
    let unconstrained = solve_two_step(&m, &SteeringOptions::default()).unwrap();
    let (_, _, constrained, _) = converged();
    let (a, b) = (unconstrained.losslessness.max, constrained.losslessness.max);
    let passed = a <= LOSSLESS_TOL && b <= LOSSLESS_TOL && constrained.converged();
    report(
        3,
        "losslessness certificate",
        passed,
        &format!("covariance program {a:.2e}, chance-constrained program {b:.2e} (limit {LOSSLESS_TOL:e})"),
    );
    assert!(passed);
}

#[test]
fn criterion_04_benchmark_reproduction() {
    let (m, _, sol, secs) = converged();
    let mean_err = sol.terminal_mean_error(&m);
    let excess = sol.terminal_covariance_excess(&m);
    let passed = sol.converged()
        && sol.iterations <= MAX_ITERATIONS
        && secs <= SOLVE_SECONDS
        && mean_err <= BOUNDARY_TOL
        && excess <= BOUNDARY_TOL;
    report(
        4,
        "benchmark instance",
        passed,
        &format!(
            "{:?} in {} iterations (limit {MAX_ITERATIONS}), {secs:.2}s (limit {SOLVE_SECONDS}s), |mu_T-mu_f|={mean_err:.1e}, lambda_max(Sigma_T-Sigma_f)={excess:.3}",
            sol.status, sol.iterations
        ),
    );
    assert!(passed);
}

fn validation_run() -> (MjlsModel, montecarlo::McReport) {
    let (m, cc, sol, _) = converged();
    let cfg = SimulationConfig { num_samples: VALIDATION_SAMPLES, seed: 105, ..SimulationConfig::default() };
    let (rep, _) = montecarlo::run(&m, &sol.policy, Some(&cc), &cfg).unwrap();
    (m, rep)
}

#[test]
fn criterion_05_chance_constraint_validation() {
    let (_, rep) = validation_run();
    let v = rep.violations.as_ref().unwrap();
    let worst_step = v.control_norm_per_step.iter().copied().fold(0.0, f64::max);
    let worst_mode = v.control_norm_per_mode.iter().flatten().copied().filter(|r| !r.is_nan()).fold(0.0, f64::max);
    let passed = v.state_trajectory <= RISK_BUDGET && worst_step <= RISK_BUDGET;
    report(
        5,
        "chance-constraint validation",
        passed,
        &format!(
            "state trajectory-wise {:.4}, control norm worst step {worst_step:.4}, worst (k,i) {worst_mode:.4} (budget {RISK_BUDGET}) over {VALIDATION_SAMPLES} samples",
            v.state_trajectory
        ),
    );
    assert!(passed);
}

#[test]
fn criterion_06_terminal_containment() {
    let (m, rep) = validation_run();
    let excess = max_eigenvalue(&(&rep.moments.steps[m.horizon].sigma.mean - &m.sigma_f));
    let passed = excess <= TERMINAL_SLACK;
    report(
        6,
        "terminal containment",
        passed,
        &format!("lambda_max(empirical Sigma_T - Sigma_f) = {excess:.4} (limit {TERMINAL_SLACK})"),
    );
    assert!(passed);
}

#[test]
fn criterion_07_single_mode_reduction() {
    let mut worst = 0.0_f64;
    let mut oracle_ok = true;
    for (seed, t) in [(21, 4), (22, 6), (23, 8), (24, 4), (25, 6)] {
        let m = common::single_mode_instance(seed, t);
        let (mean_cost, _) = common::mean_oracle(&m);
        let cov = common::covariance_oracle(&m);
        oracle_ok &= cov.terminal_residual < 1e-10 && min_eigenvalue(&cov.lambda) > 0.0;
        let sol = solve_two_step(&m, &SteeringOptions::default()).unwrap();
        let oracle = mean_cost + cov.cost;
        worst = worst.max((sol.cost.total - oracle).abs() / oracle.abs());
    }
    let passed = oracle_ok && worst <= SINGLE_MODE_REL;
    report(
        7,
        "single-mode reduction",
        passed,
        &format!("5 instances, worst relative cost gap {worst:.2e} (limit {SINGLE_MODE_REL:e}), oracle certified {oracle_ok}"),
    );
    assert!(passed);
}

fn covariance_response(m: &MjlsModel) -> f64 {
    let (t, n) = (m.horizon, m.num_modes());
    let gains = vec![vec![Matrix::from_element(m.n_u, m.n_x, -0.1); n]; t];
    let base = vec![vec![Vector::from_element(m.n_u, 0.5); n]; t];
    let shifted: Vec<Vec<Vector>> = base.iter().map(|r| r.iter().map(|u| u.add_scalar(1.0)).collect()).collect();
    let (_, a) = propagate_policy(m, &Policy::with_gains(m, base, gains.clone()).unwrap()).unwrap();
    let (_, b) = propagate_policy(m, &Policy::with_gains(m, shifted, gains).unwrap()).unwrap();
    (&a.sigma[t] - &b.sigma[t]).amax()
}

#[test]
fn criterion_08_coupling_witness() {
    let two = covariance_response(&benchmark::two_mode_model());
    let one = covariance_response(&common::single_mode_instance(31, 6));
    let passed = two > 1e-3 && one < 1e-12;
    report(
        8,
        "mean-covariance coupling",
        passed,
        &format!("terminal covariance response to a feedforward shift: two modes {two:.3e}, one mode {one:.1e}"),
    );
    assert!(passed);
}

fn random_gaussian(rng: &mut ChaCha8Rng) -> (Vector, Matrix) {
    let f = Matrix::from_fn(2, 2, |_, _| rng.random_range(-2.0..2.0));
    let cov = &f * f.transpose() + Matrix::identity(2, 2) * 0.05;
    (Vector::from_fn(2, |_, _| rng.random_range(-5.0..5.0)), cov)
}

/// Fraction of `N(mean, cov)` draws satisfying `ok`.
fn satisfaction(seed: u64, mean: &Vector, cov: &Matrix, ok: impl Fn(&Vector) -> bool + Sync) -> f64 {
    let f = psd_factor(cov);
    let chunks = 64;
    let per = TIGHTENING_DRAWS / chunks;
    let hits: usize = (0..chunks as u64)
        .into_par_iter()
        .map(|c| {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            rng.set_stream(c);
            (0..per)
                .filter(|_| {
                    let z = Vector::from_fn(2, |_, _| rng.sample(StandardNormal));
                    ok(&(mean + &f * z))
                })
                .count()
        })
        .sum();
    hits as f64 / (per * chunks) as f64
}

#[test]
fn criterion_09_tightening_soundness() {
    let eps = RISK_BUDGET;
    let mut worst_half = 1.0_f64;
    let mut worst_norm = 1.0_f64;
    for trial in 0..TIGHTENING_TRIALS {
        let seed = 9000 + trial;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mean, cov) = random_gaussian(&mut rng);
        // Offset chosen so the tightened half-plane holds with equality.
        let normal = vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let probe = HalfPlane::new(normal.clone(), 0.0);
        let offset = -tighten_halfplane(&mean, &cov, &probe, eps).unwrap();
        let h = HalfPlane::new(normal, offset);
        assert!(tighten_halfplane(&mean, &cov, &h, eps).unwrap().abs() < 1e-9);
        worst_half = worst_half.min(satisfaction(seed, &mean, &cov, |x| h.evaluate(x) <= 0.0));
        // Bound chosen so the tightened norm constraint holds with equality.
        let v_max = tighten_norm(&mean, &cov, 0.0, eps).unwrap();
        assert!(tighten_norm(&mean, &cov, v_max, eps).unwrap().abs() < 1e-9);
        worst_norm = worst_norm.min(satisfaction(seed + 1_000, &mean, &cov, |x| x.norm() <= v_max));
    }
    let passed = worst_half >= 1.0 - eps && worst_norm >= 1.0 - eps;
    report(
        9,
        "tightening soundness",
        passed,
        &format!(
            "{TIGHTENING_TRIALS} trials x {TIGHTENING_DRAWS} draws each: worst satisfaction half-plane {worst_half:.5}, norm {worst_norm:.5} (required {:.2})",
            1.0 - eps
        ),
    );
    assert!(passed);
}

#[test]
fn criterion_10_conic_ir_self_test() {
    let mut worst = 0.0_f64;
    let mut all_optimal = true;
    for backend in [Backend::Clarabel, Backend::Native] {
        let s = SolverSettings::with_backend(backend);
        // min x s.t. x ≥ 1
        let mut p = ConicProblem::new();
        let x = p.scalar("x");
        p.add_nonneg("x>=1", vec![&x - 1.0]);
        p.add_objective(&x);
        // min t s.t. ‖(3, 4)‖ ≤ t
        let mut q = ConicProblem::new();
        let t = q.scalar("t");
        q.add_soc("norm", t.clone(), vec![LinExpr::from(3.0), LinExpr::from(4.0)]);
        q.add_objective(&t);
        // min Tr(S) s.t. S ⪰ I
        let mut r = ConicProblem::new();
        let sm = r.symmetric("S", 2);
        r.add_psd("S-I", &(&sm - &Matrix::identity(2, 2))).unwrap();
        r.add_objective(&sm.trace());
        for (prob, expect) in [(&p, 1.0), (&q, 5.0), (&r, 2.0)] {
            let res = prob.solve(&s);
            all_optimal &= res.status == SolveStatus::Optimal;
            worst = worst.max((res.objective.unwrap_or(f64::NAN) - expect).abs());
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut iso = 0.0_f64;
    for j in 0..100 {
        let n = 1 + j % 6;
        let a = Matrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let b = Matrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let (x, y) = ((&a + a.transpose()) * 0.5, (&b + b.transpose()) * 0.5);
        let inner = (&x * &y).trace();
        iso = iso.max((svec(&x).dot(&svec(&y)) - inner).abs() / (1.0 + inner.abs()));
        iso = iso.max((smat(&svec(&x)) - &x).amax());
    }
    let passed = all_optimal && worst <= CONIC_TOL && iso <= ISOMETRY_TOL;
    report(
        10,
        "conic IR self-test",
        passed,
        &format!("worst optimum error {worst:.1e} (limit {CONIC_TOL:e}) on both backends, isometry error {iso:.1e} (limit {ISOMETRY_TOL:e})"),
    );
    assert!(passed);
}
