//! Independent oracles shared by the integration tests.
//!
//! The single-mode oracles avoid the conic layer entirely: the mean part is
//! a dense equality-constrained least-squares solve, the covariance part is
//! found through the Lagrangian dual of the terminal constraint, whose inner
//! minimization is a Riccati recursion.

#![allow(dead_code)]

use covsteer::linalg::{symmetrize, Matrix, Vector};
use covsteer::model::{MarkovChain, MjlsModel, ModeDynamics, PerStep};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> Matrix {
    Matrix::from_fn(r, c, |_, _| rng.random_range(-scale..scale))
}

fn random_spd(rng: &mut ChaCha8Rng, n: usize, floor: f64) -> Matrix {
    let m = random_matrix(rng, n, n, 1.0);
    &m * m.transpose() + Matrix::identity(n, n) * floor
}

/// Random single-mode instance with `n_x = n_u = 2`. The terminal bound is
/// placed strictly between the smallest reachable covariance and the one
/// reached by the unconstrained LQ gains, so it is active in every direction.
pub fn single_mode_instance(seed: u64, horizon: usize) -> MjlsModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 2;
    let a = random_matrix(&mut rng, n, n, 1.0);
    let b = Matrix::identity(n, n) + random_matrix(&mut rng, n, n, 0.3);
    let g = Matrix::identity(n, n) * 0.3 + random_matrix(&mut rng, n, n, 0.1);
    let mut model = MjlsModel {
        n_x: n,
        n_u: n,
        n_w: n,
        horizon,
        modes: PerStep::Constant(vec![ModeDynamics { a, b, g: g.clone() }]),
        chain: MarkovChain { transition: Matrix::identity(1, 1), rho0: Vector::from_vec(vec![1.0]) },
        bias: PerStep::Constant(Vector::from_fn(n, |_, _| rng.random_range(-0.1..0.1))),
        q_weight: PerStep::Constant(random_spd(&mut rng, n, 0.2)),
        r_weight: PerStep::Constant(random_spd(&mut rng, n, 0.2)),
        mu0: Vector::from_fn(n, |_, _| rng.random_range(-5.0..5.0)),
        sigma0: random_spd(&mut rng, n, 0.5),
        mu_f: Vector::from_fn(n, |_, _| rng.random_range(-1.0..1.0)),
        sigma_f: Matrix::zeros(n, n),
    };
    let free = closed_loop_terminal(&model, &riccati_gains(&model, &Matrix::zeros(n, n)));
    let ggt = &g * g.transpose();
    model.sigma_f = symmetrize(&(&ggt + (&free - &ggt) * 0.5));
    model
}

/// Minimum of `Σ_{k<T} x̄ᵀQx̄ + ūᵀRū` subject to the mean dynamics and
/// `x̄_T = μ_f`, by eliminating the states and solving the KKT system.
pub fn mean_oracle(model: &MjlsModel) -> (f64, Vec<Vector>) {
    let (nx, nu, t) = (model.n_x, model.n_u, model.horizon);
    let nv = nu * t;
    // x̄_k = phi_k + gam_k · U
    let mut phi = vec![model.mu0.clone()];
    let mut gam = vec![Matrix::zeros(nx, nv)];
    for k in 0..t {
        let md = model.mode(k, 0);
        phi.push(&md.a * &phi[k] + model.bias_at(k));
        let mut next = &md.a * &gam[k];
        next.view_mut((0, k * nu), (nx, nu)).copy_from(&md.b);
        gam.push(next);
    }
    let mut h = Matrix::zeros(nv, nv);
    let mut f = Vector::zeros(nv);
    let mut c0 = 0.0;
    for k in 0..t {
        let q = model.q_at(k);
        h += gam[k].transpose() * q * &gam[k];
        f += gam[k].transpose() * q * &phi[k];
        c0 += phi[k].dot(&(q * &phi[k]));
        let mut blk = h.view_mut((k * nu, k * nu), (nu, nu));
        blk += model.r_at(k);
    }
    let m = nv + nx;
    let mut kkt = Matrix::zeros(m, m);
    kkt.view_mut((0, 0), (nv, nv)).copy_from(&h);
    kkt.view_mut((nv, 0), (nx, nv)).copy_from(&gam[t]);
    kkt.view_mut((0, nv), (nv, nx)).copy_from(&gam[t].transpose());
    let mut rhs = Vector::zeros(m);
    rhs.rows_mut(0, nv).copy_from(&(-&f));
    rhs.rows_mut(nv, nx).copy_from(&(&model.mu_f - &phi[t]));
    let sol = kkt.lu().solve(&rhs).expect("KKT system is nonsingular");
    let u = sol.rows(0, nv).into_owned();
    let cost = u.dot(&(&h * &u)) + 2.0 * f.dot(&u) + c0;
    let ubar = (0..t).map(|k| u.rows(k * nu, nu).into_owned()).collect();
    (cost, ubar)
}

/// LQ gains for stage weights `(Q, R)` and terminal weight `Λ`.
pub fn riccati_gains(model: &MjlsModel, lambda: &Matrix) -> Vec<Matrix> {
    let t = model.horizon;
    let mut p = lambda.clone();
    let mut gains = vec![Matrix::zeros(model.n_u, model.n_x); t];
    for k in (0..t).rev() {
        let md = model.mode(k, 0);
        let btp = md.b.transpose() * &p;
        let gain = -(model.r_at(k) + &btp * &md.b).lu().solve(&(&btp * &md.a)).expect("R + BᵀPB is nonsingular");
        let acl = &md.a + &md.b * &gain;
        p = symmetrize(&(model.q_at(k) + gain.transpose() * model.r_at(k) * &gain + acl.transpose() * &p * &acl));
        gains[k] = gain;
    }
    gains
}

fn closed_loop(model: &MjlsModel, gains: &[Matrix]) -> (Vec<Matrix>, f64) {
    let mut sigma = vec![model.sigma0.clone()];
    let mut cost = 0.0;
    for (k, gain) in gains.iter().enumerate() {
        let md = model.mode(k, 0);
        let s = &sigma[k];
        cost += (model.q_at(k) * s).trace() + (model.r_at(k) * gain * s * gain.transpose()).trace();
        let acl = &md.a + &md.b * gain;
        sigma.push(symmetrize(&(&acl * s * acl.transpose() + &md.g * md.g.transpose())));
    }
    (sigma, cost)
}

fn closed_loop_terminal(model: &MjlsModel, gains: &[Matrix]) -> Matrix {
    closed_loop(model, gains).0.pop().expect("nonempty")
}

pub struct CovarianceOracle {
    pub cost: f64,
    pub lambda: Matrix,
    pub gains: Vec<Matrix>,
    pub terminal_residual: f64,
}

fn sym_from(v: &Vector) -> Matrix {
    Matrix::from_row_slice(2, 2, &[v[0], v[1], v[1], v[2]])
}

fn sym_to(m: &Matrix) -> Vector {
    Vector::from_vec(vec![m[(0, 0)], m[(0, 1)], m[(1, 1)]])
}

/// Optimal covariance cost for `n_x = 2` single-mode instances whose
/// terminal bound is active in every direction: Newton's method on
/// `Σ_T(K(Λ)) = Σ_f`, with `K(Λ)` the LQ gains for terminal weight `Λ`.
/// The result is optimal when the multiplier `Λ` is positive definite.
pub fn covariance_oracle(model: &MjlsModel) -> CovarianceOracle {
    assert_eq!(model.n_x, 2, "oracle is written for two states");
    let residual = |v: &Vector| {
        let lambda = sym_from(v);
        sym_to(&(closed_loop_terminal(model, &riccati_gains(model, &lambda)) - &model.sigma_f))
    };
    let mut v = Vector::from_vec(vec![1.0, 0.0, 1.0]);
    for _ in 0..100 {
        let r = residual(&v);
        if r.amax() < 1e-13 {
            break;
        }
        let mut jac = Matrix::zeros(3, 3);
        for c in 0..3 {
            let h = 1e-6 * (1.0 + v[c].abs());
            let mut vp = v.clone();
            vp[c] += h;
            let mut vm = v.clone();
            vm[c] -= h;
            jac.set_column(c, &((residual(&vp) - residual(&vm)) / (2.0 * h)));
        }
        let step = jac.lu().solve(&r).expect("Jacobian is nonsingular");
        // Damped step keeping Λ positive definite.
        let mut alpha = 1.0;
        loop {
            let cand = &v - &step * alpha;
            let ok = cand[0] > 0.0 && cand[0] * cand[2] - cand[1] * cand[1] > 0.0;
            if ok && (residual(&cand).amax() < r.amax() || alpha < 1e-4) {
                v = cand;
                break;
            }
            alpha *= 0.5;
        }
    }
    let lambda = sym_from(&v);
    let gains = riccati_gains(model, &lambda);
    let (sigma, cost) = closed_loop(model, &gains);
    let terminal_residual = (&sigma[model.horizon] - &model.sigma_f).amax();
    CovarianceOracle { cost, lambda, gains, terminal_residual }
}
