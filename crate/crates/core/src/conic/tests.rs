use super::native::{jordan_divide, jordan_product, max_step, nt_scaling};
use super::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const BACKENDS: [Backend; 2] = [Backend::Clarabel, Backend::Native];

fn settings(b: Backend) -> SolverSettings {
    SolverSettings::with_backend(b)
}

fn random_sym(rng: &mut ChaCha8Rng, n: usize) -> Matrix {
    let m = Matrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    (&m + m.transpose()) * 0.5
}

fn random_pd(rng: &mut ChaCha8Rng, n: usize) -> Matrix {
    let m = Matrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    &m * m.transpose() + Matrix::identity(n, n) * 0.1
}

#[test]
fn svec_is_an_isometry() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for t in 0..100 {
        let n = 1 + t % 6;
        let (x, y) = (random_sym(&mut rng, n), random_sym(&mut rng, n));
        let lhs = svec(&x).dot(&svec(&y));
        let rhs = (&x * &y).trace();
        assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + rhs.abs()), "{lhs} vs {rhs}");
        assert!((smat(&svec(&x)) - &x).amax() <= 1e-15);
    }
}

#[test]
fn svec_layout() {
    let m = Matrix::from_row_slice(3, 3, &[1.0, 2.0, 4.0, 2.0, 3.0, 5.0, 4.0, 5.0, 6.0]);
    let v = svec(&m);
    let r2 = std::f64::consts::SQRT_2;
    let expect = [1.0, 2.0 * r2, 3.0, 4.0 * r2, 5.0 * r2, 6.0];
    for (a, b) in v.iter().zip(expect) {
        assert!((a - b).abs() < 1e-15);
    }
    assert_eq!(svec_side(6), Some(3));
    assert_eq!(svec_side(5), None);
}

#[test]
fn linexpr_arithmetic() {
    let x = LinExpr::var(0);
    let y = LinExpr::var(1);
    let e = &(&x * 2.0) + &(&y - &x) + 3.0;
    assert_eq!(e.terms(), &[(0, 1.0), (1, 1.0)]);
    assert_eq!(e.constant(), 3.0);
    let zero = &e - &e;
    assert!(zero.terms().is_empty());
    assert_eq!(e.eval(&Vector::from_vec(vec![2.0, 5.0])), 10.0);
    let sum: LinExpr = vec![x.clone(), x.clone(), y.clone()].into_iter().sum();
    assert_eq!(sum.terms(), &[(0, 2.0), (1, 1.0)]);
}

#[test]
fn matexpr_products_match_dense() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut p = ConicProblem::new();
    let x = p.matrix("X", 2, 3);
    let vals = Vector::from_fn(6, |_, _| rng.random_range(-1.0..1.0));
    let xm = x.eval(&vals);
    let c = Matrix::from_fn(4, 2, |_, _| rng.random_range(-1.0..1.0));
    let d = Matrix::from_fn(3, 2, |_, _| rng.random_range(-1.0..1.0));
    assert!((x.left_mul(&c).eval(&vals) - &c * &xm).amax() < 1e-14);
    assert!((x.right_mul(&d).eval(&vals) - &xm * &d).amax() < 1e-14);
    assert!((x.transpose().eval(&vals) - xm.transpose()).amax() == 0.0);
    let s = p.symmetric("S", 3);
    let sv = Vector::from_fn(p.num_vars(), |_, _| rng.random_range(-1.0..1.0));
    let sm = s.eval(&sv);
    assert_eq!(sm, sm.transpose());
    let a = Vector::from_vec(vec![1.0, -2.0, 0.5]);
    assert!((s.quad_form(&a).eval(&sv) - a.dot(&(&sm * &a))).abs() < 1e-14);
}

#[test]
fn nonsymmetric_psd_rejected() {
    let mut p = ConicProblem::new();
    let x = p.matrix("X", 2, 2);
    assert!(matches!(p.add_psd("bad", &x), Err(ConicError::NotSymmetric(_))));
}

#[test]
fn trivial_lp() {
    for b in BACKENDS {
        let mut p = ConicProblem::new();
        let x = p.scalar("x");
        p.add_nonneg("x>=1", vec![&x - 1.0]);
        p.add_objective(&x);
        let r = p.solve(&settings(b));
        assert_eq!(r.status, SolveStatus::Optimal, "{b:?}");
        assert!((r.objective.unwrap() - 1.0).abs() <= 1e-8, "{b:?}");
    }
}

#[test]
fn trivial_soc() {
    for b in BACKENDS {
        let mut p = ConicProblem::new();
        let t = p.scalar("t");
        p.add_soc("norm", t.clone(), vec![LinExpr::from(3.0), LinExpr::from(4.0)]);
        p.add_objective(&t);
        let r = p.solve(&settings(b));
        assert_eq!(r.status, SolveStatus::Optimal, "{b:?}");
        assert!((r.objective.unwrap() - 5.0).abs() <= 1e-8, "{b:?}");
    }
}

#[test]
fn trivial_sdp_max_eigenvalue() {
    let c = Matrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
    for b in BACKENDS {
        let mut p = ConicProblem::new();
        let t = p.scalar("t");
        let ti = MatExpr::from_fn(2, 2, |i, j| if i == j { t.clone() } else { LinExpr::zero() });
        p.add_psd("tI-C", &(&ti - &c)).unwrap();
        p.add_objective(&t);
        let r = p.solve(&settings(b));
        assert_eq!(r.status, SolveStatus::Optimal, "{b:?}");
        assert!((r.objective.unwrap() - 3.0).abs() <= 1e-8, "{b:?}");
    }
}

#[test]
fn schur_block_gives_quadratic_bound() {
    for b in BACKENDS {
        let mut p = ConicProblem::new();
        let t = p.scalar("t");
        let a = MatExpr::column(&[t.clone()]);
        let v = MatExpr::constant(&Matrix::from_element(1, 1, 2.0));
        let one = MatExpr::constant(&Matrix::identity(1, 1));
        p.add_psd_block_2x2("schur", &a, &v, &one).unwrap();
        p.add_objective(&t);
        let r = p.solve(&settings(b));
        assert_eq!(r.status, SolveStatus::Optimal);
        assert!((r.objective.unwrap() - 4.0).abs() <= 1e-8, "{b:?} {:?}", r.objective);
    }
}

#[test]
fn quadratic_objective_with_constant() {
    for b in BACKENDS {
        let mut p = ConicProblem::new();
        let x = p.vector("x", 2);
        let v = vec![&x[0] - 1.0, &x[1] + 2.0];
        p.add_quadratic(v, &Matrix::identity(2, 2)).unwrap();
        p.add_objective(&LinExpr::from(0.5));
        let r = p.solve(&settings(b));
        assert_eq!(r.status, SolveStatus::Optimal, "{b:?}");
        assert!((r.objective.unwrap() - 0.5).abs() <= 1e-8, "{b:?}");
        let xs = r.values(&x);
        assert!((xs[0] - 1.0).abs() < 1e-4 && (xs[1] + 2.0).abs() < 1e-4, "{b:?} {xs}");
    }
}

#[test]
fn equality_constrained_qp() {
    // min x² + y² s.t. x + y = 1  →  1/2 at (½, ½).
    for b in BACKENDS {
        let mut p = ConicProblem::new();
        let x = p.vector("x", 2);
        p.add_equality("sum", &(&x[0] + &x[1]) - 1.0);
        p.add_quadratic(x.clone(), &Matrix::identity(2, 2)).unwrap();
        let r = p.solve(&settings(b));
        assert_eq!(r.status, SolveStatus::Optimal, "{b:?} {:?}", r.stats);
        assert!((r.objective.unwrap() - 0.5).abs() <= 1e-8, "{b:?}");
    }
}

#[test]
fn infeasible_and_unbounded() {
    for b in BACKENDS {
        let mut p = ConicProblem::new();
        let x = p.scalar("x");
        p.add_nonneg("lo", vec![&x - 1.0]);
        p.add_nonneg("hi", vec![-&x]);
        p.add_objective(&x);
        assert_eq!(p.solve(&settings(b)).status, SolveStatus::Infeasible, "{b:?}");

        let mut p = ConicProblem::new();
        let x = p.scalar("x");
        p.add_nonneg("hi", vec![-&x]);
        p.add_objective(&x);
        let r = p.solve(&settings(b));
        assert_eq!(r.status, SolveStatus::Unbounded, "{b:?}");
        assert!(r.x.is_none());
    }
}

#[test]
fn duals_are_exposed() {
    // min x s.t. x ≥ 2: multiplier 1.
    for b in BACKENDS {
        let mut p = ConicProblem::new();
        let x = p.scalar("x");
        let id = p.add_nonneg("x>=2", vec![&x - 2.0]);
        p.add_objective(&x);
        let r = p.solve(&settings(b));
        assert!((r.dual(id)[0] - 1.0).abs() < 1e-7, "{b:?}");
    }
}

#[test]
fn contract_check_downgrades_bad_claims() {
    let mut p = ConicProblem::new();
    let x = p.scalar("x");
    p.add_nonneg("x>=1", vec![&x - 1.0]);
    p.add_objective(&x);
    let sf = p.standard_form();
    let fake = BackendOutput {
        status: SolveStatus::Optimal,
        x: Vector::from_vec(vec![0.5]),
        s: Vector::from_vec(vec![0.0]),
        z: Vector::from_vec(vec![1.0]),
        iterations: 1,
        backend_status: "fake".into(),
        dual_objective: None,
    };
    let r = p.finish(&sf, fake, &SolverSettings::with_backend(Backend::Clarabel), 0.0);
    assert_eq!(r.status, SolveStatus::NumericalTrouble);
    assert!(r.stats.downgraded);
    assert!(r.x.is_none());
}

#[test]
fn debug_dump_lists_everything() {
    let mut p = ConicProblem::new();
    let x = p.symmetric("S", 2);
    p.add_psd("S psd", &x).unwrap();
    p.add_objective(&x.trace());
    let d = p.debug_dump();
    assert!(d.contains("block S Symmetric(2)"));
    assert!(d.contains("S psd Psd(2)"));
}

#[test]
fn backend_from_str() {
    assert_eq!("native".parse::<Backend>(), Ok(Backend::Native));
    assert_eq!("Clarabel".parse::<Backend>(), Ok(Backend::Clarabel));
    assert!("mosek".parse::<Backend>().is_err());
}

/// Random feasible, bounded mixed-cone programs solved by both backends.
#[test]
fn backends_agree_on_random_programs() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for trial in 0..12 {
        let n = 3;
        let mut p = ConicProblem::new();
        let x = p.vector("x", n);
        let s = p.symmetric("S", 2);
        // Bounded: box on x, trace bound on S.
        for xi in &x {
            p.add_nonneg("box", vec![xi + 2.0, -xi + 2.0]);
        }
        p.add_nonneg("trace", vec![-&s.trace() + 5.0]);
        p.add_psd("S", &s).unwrap();
        let t = p.scalar("t");
        p.add_soc("soc", t.clone(), x.iter().map(|xi| xi + rng.random_range(-1.0..1.0)).collect());
        let c = random_sym(&mut rng, 2);
        let lin = LinExpr::dot(&[rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 0.3], &x);
        p.add_objective(&(&lin + &t));
        p.add_objective(&s.inner(&c));
        if trial % 2 == 0 {
            p.add_quadratic(x.clone(), &random_pd(&mut rng, n)).unwrap();
        }
        let a = p.solve(&settings(Backend::Clarabel));
        let b = p.solve(&settings(Backend::Native));
        assert_eq!(a.status, SolveStatus::Optimal);
        assert_eq!(b.status, SolveStatus::Optimal, "trial {trial}: {:?}", b.stats);
        let (oa, ob) = (a.objective.unwrap(), b.objective.unwrap());
        assert!((oa - ob).abs() <= 1e-6 * (1.0 + oa.abs()), "trial {trial}: {oa} vs {ob}");
    }
}

fn random_interior(rng: &mut ChaCha8Rng, cone: &Cone) -> Vector {
    match *cone {
        Cone::Zero(n) => Vector::zeros(n),
        Cone::Nonneg(n) => Vector::from_fn(n, |_, _| rng.random_range(0.1..3.0)),
        Cone::SecondOrder(n) => {
            let mut v = Vector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
            v[0] = v.rows(1, n - 1).norm() + rng.random_range(0.05..2.0);
            v
        }
        Cone::Psd(n) => svec(&random_pd(rng, n)),
    }
}

#[test]
fn nt_scaling_identities() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for cone in [Cone::Nonneg(3), Cone::SecondOrder(4), Cone::Psd(3)] {
        for _ in 0..20 {
            let s = random_interior(&mut rng, &cone);
            let z = random_interior(&mut rng, &cone);
            let sc = nt_scaling(&cone, &s, &z).unwrap();
            let wz = &sc.w * &z;
            let ws = &sc.w_inv_t * &s;
            let scale = 1.0 + sc.lambda.amax();
            assert!((&wz - &sc.lambda).amax() < 1e-10 * scale, "{cone:?} Wz {wz} λ {}", sc.lambda);
            assert!((&ws - &sc.lambda).amax() < 1e-10 * scale, "{cone:?} W⁻ᵀs {ws} λ {}", sc.lambda);
            let ident = sc.w.transpose() * &sc.w_inv_t;
            assert!((ident - Matrix::identity(s.len(), s.len())).amax() < 1e-10, "{cone:?}");
        }
    }
}

#[test]
fn jordan_division_inverts_product() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for cone in [Cone::Nonneg(3), Cone::SecondOrder(4)] {
        let l = random_interior(&mut rng, &cone);
        let v = Vector::from_fn(cone.dim(), |_, _| rng.random_range(-1.0..1.0));
        let x = jordan_divide(&cone, &l, &v);
        assert!((jordan_product(&cone, &l, &x) - v).amax() < 1e-12);
    }
    let cone = Cone::Psd(3);
    let l = svec(&Matrix::from_diagonal(&Vector::from_vec(vec![0.5, 1.0, 2.0])));
    let v = svec(&random_sym(&mut rng, 3));
    let x = jordan_divide(&cone, &l, &v);
    assert!((jordan_product(&cone, &l, &x) - v).amax() < 1e-12);
}

proptest! {
    #[test]
    fn max_step_lands_on_boundary(seed in 0u64..500, which in 0usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cone = [Cone::Nonneg(3), Cone::SecondOrder(3), Cone::Psd(2)][which];
        let x = random_interior(&mut rng, &cone);
        let d = Vector::from_fn(cone.dim(), |_, _| rng.random_range(-3.0..3.0));
        let a = max_step(&cone, &x, &d);
        let viol = |v: &Vector| cone_violation(&[cone], v);
        if a.is_finite() {
            prop_assert!(viol(&(&x + &d * (0.999 * a))) <= 1e-12);
            prop_assert!(viol(&(&x + &d * (1.001 * a))) > 0.0);
        } else {
            prop_assert!(viol(&(&x + &d * 1e3)) <= 1e-9 * 1e3);
        }
    }
}
