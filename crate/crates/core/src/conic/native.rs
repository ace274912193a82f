//! Dense homogeneous self-dual interior-point method.
//!
//! Solves `min cᵀx s.t. Ax + s = b, s ∈ K` through the embedding
//!
//! ```text
//! Aᵀz + cτ = 0,   Ax + s − bτ = 0,   κ + cᵀx + bᵀz = 0,
//! (s, z) ∈ K × K*,   τ, κ ≥ 0
//! ```
//!
//! with Nesterov–Todd scaling and a Mehrotra predictor–corrector. Quadratic
//! objectives are moved into a second-order cone epigraph first. Everything is
//! dense: the solver targets the small programs produced by this crate.

use nalgebra::linalg::LU;

use super::{svec, smat, BackendOutput, Cone, SolveStatus, SolverSettings, StandardForm};
use crate::linalg::{Matrix, Vector};

const STEP_FRACTION: f64 = 0.99;
const REGULARIZATION: f64 = 1e-10;
const REFINEMENT_STEPS: usize = 5;
const EQUILIBRATION_PASSES: usize = 15;
const INFEASIBILITY_TOL: f64 = 1e-8;

/// Linear conic program `min cᵀx s.t. Ax + s = b, s ∈ K`.
#[derive(Clone, Debug)]
pub struct LinearConic {
    pub c: Vector,
    pub a: Matrix,
    pub b: Vector,
    pub cones: Vec<Cone>,
}

/// Rewrites `½xᵀPx + qᵀx` as `σt + qᵀx` with `(t + ½, t − ½, F x/√σ) ∈ SOC`,
/// `P = FᵀF`. Returns the program and the number of original variables.
///
/// The cone is well conditioned when `t` stays near `½`, so `σ` should
/// be of the order of the optimal quadratic term.
pub fn epigraph_form(sf: &StandardForm, sigma: f64) -> (LinearConic, usize) {
    let n = sf.num_vars();
    let m = sf.num_rows();
    let p_scale = sf.p.amax();
    if p_scale == 0.0 {
        return (LinearConic { c: sf.q.clone(), a: sf.a.clone(), b: sf.b.clone(), cones: sf.cones.clone() }, n);
    }
    let eig = sf.p.clone().symmetric_eigen();
    let keep: Vec<usize> =
        (0..n).filter(|&i| eig.eigenvalues[i] > 1e-14 * p_scale).collect();
    let r = keep.len();
    // Rows of F: √λ_i v_iᵀ.
    let mut f = Matrix::zeros(r, n);
    for (row, &i) in keep.iter().enumerate() {
        let sq = (eig.eigenvalues[i] / sigma).sqrt();
        for j in 0..n {
            f[(row, j)] = sq * eig.eigenvectors[(j, i)];
        }
    }
    let m2 = m + 2 + r;
    let mut a = Matrix::zeros(m2, n + 1);
    a.view_mut((0, 0), (m, n)).copy_from(&sf.a);
    let mut b = Vector::zeros(m2);
    b.rows_mut(0, m).copy_from(&sf.b);
    a[(m, n)] = -1.0;
    b[m] = 0.5;
    a[(m + 1, n)] = -1.0;
    b[m + 1] = -0.5;
    a.view_mut((m + 2, 0), (r, n)).copy_from(&(-f));
    let mut c = Vector::zeros(n + 1);
    c.rows_mut(0, n).copy_from(&sf.q);
    c[n] = sigma;
    let mut cones = sf.cones.clone();
    cones.push(Cone::SecondOrder(r + 2));
    (LinearConic { c, a, b, cones }, n)
}

pub(crate) fn solve(sf: &StandardForm, settings: &SolverSettings) -> BackendOutput {
    let mut sigma = 1.0;
    if sf.p.amax() > 0.0 {
        let rough = SolverSettings { feas_tol: 1e-4, gap_tol: 1e-4, verbose: false, ..settings.clone() };
        let (lc, n) = epigraph_form(sf, 1.0);
        let first = solve_linear(&lc, &rough);
        if first.status == SolveStatus::Optimal {
            let x = first.x.rows(0, n).into_owned();
            sigma = (0.5 * x.dot(&(&sf.p * &x))).max(1.0);
        }
    }
    let (lc, n) = epigraph_form(sf, sigma);
    let m = sf.num_rows();
    // The epigraph cone is only satisfied to within the primal residual, which
    // the quadratic term amplifies, so the gap is also measured on the
    // original objective before stopping.
    let true_gap = |x: &Vector, z: &Vector| {
        let xo = x.rows(0, n).into_owned();
        let p = 0.5 * xo.dot(&(&sf.p * &xo)) + sf.q.dot(&xo);
        let d = -lc.b.dot(z);
        (p - d).abs() / (1.0f64).max(p.abs().min(d.abs()))
    };
    let out = if lc.cones.len() > sf.cones.len() {
        solve_linear_checked(&lc, settings, Some(&true_gap))
    } else {
        solve_linear(&lc, settings)
    };
    let dual_objective = (lc.cones.len() > sf.cones.len()).then(|| -lc.b.dot(&out.z));
    BackendOutput {
        status: out.status,
        x: out.x.rows(0, n).into_owned(),
        s: out.s.rows(0, m).into_owned(),
        z: out.z.rows(0, m).into_owned(),
        iterations: out.iterations,
        backend_status: out.backend_status,
        dual_objective,
    }
}

// ---------------------------------------------------------------------------
// Cone primitives

#[derive(Clone, Copy, Debug)]
struct Segment {
    cone: Cone,
    start: usize,
    dim: usize,
}

fn segments(cones: &[Cone]) -> Vec<Segment> {
    let mut start = 0;
    cones
        .iter()
        .map(|&cone| {
            let s = Segment { cone, start, dim: cone.dim() };
            start += s.dim;
            s
        })
        .collect()
}

fn degree(cone: &Cone) -> usize {
    match *cone {
        Cone::Zero(_) => 0,
        Cone::Nonneg(n) => n,
        Cone::SecondOrder(_) => 1,
        Cone::Psd(n) => n,
    }
}

fn identity_element(cone: &Cone) -> Vector {
    match *cone {
        Cone::Zero(n) => Vector::zeros(n),
        Cone::Nonneg(n) => Vector::from_element(n, 1.0),
        Cone::SecondOrder(n) => {
            let mut e = Vector::zeros(n);
            e[0] = 1.0;
            e
        }
        Cone::Psd(n) => svec(&Matrix::identity(n, n)),
    }
}

/// Smallest `α` such that `v + α e` lies in the (closed) cone.
fn interior_shift(cone: &Cone, v: &Vector) -> f64 {
    match *cone {
        Cone::Zero(_) => f64::NEG_INFINITY,
        Cone::Nonneg(_) => -v.min(),
        Cone::SecondOrder(n) => v.rows(1, n - 1).norm() - v[0],
        Cone::Psd(_) => -crate::linalg::min_eigenvalue(&smat(v)),
    }
}

/// Jordan product `x ∘ y`.
pub fn jordan_product(cone: &Cone, x: &Vector, y: &Vector) -> Vector {
    match *cone {
        Cone::Zero(n) => Vector::zeros(n),
        Cone::Nonneg(_) => x.component_mul(y),
        Cone::SecondOrder(n) => {
            let mut out = Vector::zeros(n);
            out[0] = x.dot(y);
            let tail = y.rows(1, n - 1) * x[0] + x.rows(1, n - 1) * y[0];
            out.rows_mut(1, n - 1).copy_from(&tail);
            out
        }
        Cone::Psd(_) => {
            let (xm, ym) = (smat(x), smat(y));
            svec(&((&xm * &ym + &ym * &xm) * 0.5))
        }
    }
}

/// Solves `λ ∘ x = v` for `x`. For the PSD cone `λ` must be diagonal.
pub fn jordan_divide(cone: &Cone, lambda: &Vector, v: &Vector) -> Vector {
    match *cone {
        Cone::Zero(n) => Vector::zeros(n),
        Cone::Nonneg(_) => v.component_div(lambda),
        Cone::SecondOrder(n) => {
            let l0 = lambda[0];
            let l1 = lambda.rows(1, n - 1);
            let v1 = v.rows(1, n - 1);
            let x0 = (l0 * v[0] - l1.dot(&v1)) / (l0 * l0 - l1.norm_squared());
            let mut out = Vector::zeros(n);
            out[0] = x0;
            out.rows_mut(1, n - 1).copy_from(&((v1 - l1 * x0) / l0));
            out
        }
        Cone::Psd(n) => {
            let lm = smat(lambda);
            let vm = smat(v);
            let xm = Matrix::from_fn(n, n, |i, j| 2.0 * vm[(i, j)] / (lm[(i, i)] + lm[(j, j)]));
            svec(&xm)
        }
    }
}

/// Largest `α ≥ 0` with `x + α d` in the cone (may be `∞`).
pub fn max_step(cone: &Cone, x: &Vector, d: &Vector) -> f64 {
    match *cone {
        Cone::Zero(_) => f64::INFINITY,
        Cone::Nonneg(_) => x
            .iter()
            .zip(d.iter())
            .filter(|(_, &di)| di < 0.0)
            .map(|(&xi, &di)| -xi / di)
            .fold(f64::INFINITY, f64::min),
        Cone::SecondOrder(n) => {
            let (x0, x1) = (x[0], x.rows(1, n - 1));
            let (d0, d1) = (d[0], d.rows(1, n - 1));
            let a = d0 * d0 - d1.norm_squared();
            let b = 2.0 * (x0 * d0 - x1.dot(&d1));
            let c = (x0 * x0 - x1.norm_squared()).max(0.0);
            smallest_positive_root(a, b, c)
        }
        Cone::Psd(_) => {
            let xm = smat(x);
            let Some(chol) = xm.cholesky() else { return 0.0 };
            let l = chol.l();
            let Some(linv) = l.clone().try_inverse() else { return 0.0 };
            let mm = &linv * smat(d) * linv.transpose();
            let lo = crate::linalg::min_eigenvalue(&((&mm + mm.transpose()) * 0.5));
            if lo >= 0.0 {
                f64::INFINITY
            } else {
                -1.0 / lo
            }
        }
    }
}

fn smallest_positive_root(a: f64, b: f64, c: f64) -> f64 {
    let disc = b * b - 4.0 * a * c;
    if disc < 0.0 {
        return f64::INFINITY;
    }
    let q = -0.5 * (b + b.signum() * disc.sqrt());
    let mut best = f64::INFINITY;
    if a != 0.0 {
        let r = q / a;
        if r > 0.0 {
            best = best.min(r);
        }
    }
    if q != 0.0 {
        let r = c / q;
        if r > 0.0 {
            best = best.min(r);
        }
    }
    best
}

/// Nesterov–Todd scaling of one cone block: `W z = W⁻ᵀ s = λ`.
#[derive(Clone, Debug)]
pub struct NtScaling {
    pub w: Matrix,
    pub w_inv_t: Matrix,
    pub lambda: Vector,
}

pub fn nt_scaling(cone: &Cone, s: &Vector, z: &Vector) -> Option<NtScaling> {
    match *cone {
        Cone::Zero(n) => Some(NtScaling { w: Matrix::zeros(n, n), w_inv_t: Matrix::zeros(n, n), lambda: Vector::zeros(n) }),
        Cone::Nonneg(n) => {
            if s.min() <= 0.0 || z.min() <= 0.0 {
                return None;
            }
            let d = Vector::from_fn(n, |i, _| (s[i] / z[i]).sqrt());
            let lambda = Vector::from_fn(n, |i, _| (s[i] * z[i]).sqrt());
            Some(NtScaling {
                w: Matrix::from_diagonal(&d),
                w_inv_t: Matrix::from_diagonal(&d.map(|v| 1.0 / v)),
                lambda,
            })
        }
        Cone::SecondOrder(n) => {
            let jnorm = |v: &Vector| {
                let t = v.rows(1, n - 1).norm();
                (v[0] - t) * (v[0] + t)
            };
            let (sj, zj) = (jnorm(s), jnorm(z));
            if sj <= 0.0 || zj <= 0.0 || s[0] <= 0.0 || z[0] <= 0.0 {
                return None;
            }
            let sbar = s / sj.sqrt();
            let zbar = z / zj.sqrt();
            let beta = (sj / zj).powf(0.25);
            let gamma = ((1.0 + zbar.dot(&sbar)) / 2.0).sqrt();
            let mut jz = zbar.clone();
            jz.rows_mut(1, n - 1).neg_mut();
            let wbar = (&sbar + &jz) / (2.0 * gamma);
            let w0 = wbar[0];
            let w1 = wbar.rows(1, n - 1).into_owned();
            let mut h = Matrix::identity(n, n);
            h[(0, 0)] = w0;
            let tail = Matrix::identity(n - 1, n - 1) + &w1 * w1.transpose() / (1.0 + w0);
            h.view_mut((1, 1), (n - 1, n - 1)).copy_from(&tail);
            let mut hinv = h.clone();
            for i in 1..n {
                h[(0, i)] = w1[i - 1];
                h[(i, 0)] = w1[i - 1];
                hinv[(0, i)] = -w1[i - 1];
                hinv[(i, 0)] = -w1[i - 1];
            }
            let w = h * beta;
            let w_inv_t = hinv / beta;
            let lambda = &w * z;
            Some(NtScaling { w, w_inv_t, lambda })
        }
        Cone::Psd(_) => {
            let ls = smat(s).cholesky()?.l();
            let lz = smat(z).cholesky()?.l();
            let svd = (lz.transpose() * &ls).svd(false, true);
            let v = svd.v_t?.transpose();
            let sv = svd.singular_values;
            if sv.min() <= 0.0 {
                return None;
            }
            let r = &ls * &v * Matrix::from_diagonal(&sv.map(|x| 1.0 / x.sqrt()));
            let rinv = r.clone().try_inverse()?;
            let len = s.len();
            let mut w = Matrix::zeros(len, len);
            let mut w_inv_t = Matrix::zeros(len, len);
            for k in 0..len {
                let mut e = Vector::zeros(len);
                e[k] = 1.0;
                let em = smat(&e);
                w.set_column(k, &svec(&(r.transpose() * &em * &r)));
                w_inv_t.set_column(k, &svec(&(&rinv * &em * rinv.transpose())));
            }
            let lambda = svec(&Matrix::from_diagonal(&sv));
            Some(NtScaling { w, w_inv_t, lambda })
        }
    }
}

// ---------------------------------------------------------------------------
// Equilibration

struct Equilibration {
    /// Column scaling `D`.
    d: Vector,
    /// Row scaling `E`, constant on each second-order and PSD block.
    e: Vector,
}

fn equilibrate(lc: &LinearConic) -> (LinearConic, Equilibration) {
    let (m, n) = lc.a.shape();
    let segs = segments(&lc.cones);
    let mut d = Vector::from_element(n, 1.0);
    let mut e = Vector::from_element(m, 1.0);
    let mut a = lc.a.clone();
    for _ in 0..EQUILIBRATION_PASSES {
        let mut dc = Vector::from_element(n, 1.0);
        for j in 0..n {
            let mx = a.column(j).amax();
            if mx > 0.0 {
                dc[j] = (1.0 / mx.sqrt()).clamp(1e-4, 1e4);
            }
        }
        let mut er = Vector::from_element(m, 1.0);
        for i in 0..m {
            let mx = a.row(i).amax();
            if mx > 0.0 {
                er[i] = (1.0 / mx.sqrt()).clamp(1e-4, 1e4);
            }
        }
        for seg in &segs {
            if matches!(seg.cone, Cone::SecondOrder(_) | Cone::Psd(_)) {
                let mx = (seg.start..seg.start + seg.dim).map(|i| a.row(i).amax()).fold(0.0, f64::max);
                let v = if mx > 0.0 { (1.0 / mx.sqrt()).clamp(1e-4, 1e4) } else { 1.0 };
                for i in seg.start..seg.start + seg.dim {
                    er[i] = v;
                }
            }
        }
        for j in 0..n {
            for i in 0..m {
                a[(i, j)] *= er[i] * dc[j];
            }
        }
        d.component_mul_assign(&dc);
        e.component_mul_assign(&er);
    }
    let scaled = LinearConic { c: lc.c.component_mul(&d), a, b: lc.b.component_mul(&e), cones: lc.cones.clone() };
    (scaled, Equilibration { d, e })
}

// ---------------------------------------------------------------------------
// KKT system

struct Kkt {
    lu: LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    exact: Matrix,
    n: usize,
}

impl Kkt {
    /// `[[0, Aᵀ], [A, −H]]` with static regularization, `H` block diagonal.
    fn factor(a: &Matrix, h: &Matrix) -> Self {
        let (m, n) = a.shape();
        let mut k = Matrix::zeros(n + m, n + m);
        k.view_mut((0, n), (n, m)).copy_from(&a.transpose());
        k.view_mut((n, 0), (m, n)).copy_from(a);
        k.view_mut((n, n), (m, m)).copy_from(&(-h));
        let exact = k.clone();
        for i in 0..n {
            k[(i, i)] += REGULARIZATION;
        }
        for i in n..n + m {
            k[(i, i)] -= REGULARIZATION;
        }
        Self { lu: k.lu(), exact, n }
    }

    fn solve(&self, rhs1: &Vector, rhs2: &Vector) -> Option<(Vector, Vector)> {
        let n = self.n;
        let mut rhs = Vector::zeros(rhs1.len() + rhs2.len());
        rhs.rows_mut(0, n).copy_from(rhs1);
        rhs.rows_mut(n, rhs2.len()).copy_from(rhs2);
        let mut sol = self.lu.solve(&rhs)?;
        for _ in 0..REFINEMENT_STEPS {
            let r = &rhs - &self.exact * &sol;
            if r.amax() <= 1e-15 * rhs.amax().max(1.0) {
                break;
            }
            sol += self.lu.solve(&r)?;
        }
        if sol.iter().any(|v| !v.is_finite()) {
            return None;
        }
        let m = rhs2.len();
        Some((sol.rows(0, n).into_owned(), sol.rows(n, m).into_owned()))
    }
}

// ---------------------------------------------------------------------------
// Main loop

#[derive(Clone, Debug)]
pub struct LinearSolution {
    pub status: SolveStatus,
    pub x: Vector,
    pub s: Vector,
    pub z: Vector,
    pub iterations: u32,
    pub backend_status: String,
}

struct Iterate {
    x: Vector,
    s: Vector,
    z: Vector,
    tau: f64,
    kappa: f64,
}

fn block_apply(segs: &[Segment], scalings: &[NtScaling], v: &Vector, f: impl Fn(&NtScaling, &Vector) -> Vector) -> Vector {
    let mut out = Vector::zeros(v.len());
    for (seg, sc) in segs.iter().zip(scalings) {
        if matches!(seg.cone, Cone::Zero(_)) {
            continue;
        }
        let part = f(sc, &v.rows(seg.start, seg.dim).into_owned());
        out.rows_mut(seg.start, seg.dim).copy_from(&part);
    }
    out
}

fn block_cone_op(segs: &[Segment], x: &Vector, y: &Vector, f: impl Fn(&Cone, &Vector, &Vector) -> Vector) -> Vector {
    let mut out = Vector::zeros(x.len());
    for seg in segs {
        if matches!(seg.cone, Cone::Zero(_)) {
            continue;
        }
        let part = f(&seg.cone, &x.rows(seg.start, seg.dim).into_owned(), &y.rows(seg.start, seg.dim).into_owned());
        out.rows_mut(seg.start, seg.dim).copy_from(&part);
    }
    out
}

fn strictly_interior(segs: &[Segment], v: &Vector) -> bool {
    segs.iter().all(|seg| {
        let part = v.rows(seg.start, seg.dim).into_owned();
        match seg.cone {
            Cone::Zero(_) => true,
            Cone::Nonneg(_) => part.min() > 0.0,
            Cone::SecondOrder(n) => {
                let t = part.rows(1, n - 1).norm();
                part[0] > 0.0 && (part[0] - t) * (part[0] + t) > 0.0
            }
            Cone::Psd(_) => smat(&part).cholesky().is_some(),
        }
    })
}

fn cone_step(segs: &[Segment], x: &Vector, d: &Vector) -> f64 {
    segs.iter()
        .map(|seg| max_step(&seg.cone, &x.rows(seg.start, seg.dim).into_owned(), &d.rows(seg.start, seg.dim).into_owned()))
        .fold(f64::INFINITY, f64::min)
}

fn shift_into_interior(segs: &[Segment], v: &mut Vector) {
    let alpha = segs
        .iter()
        .map(|seg| interior_shift(&seg.cone, &v.rows(seg.start, seg.dim).into_owned()))
        .fold(f64::NEG_INFINITY, f64::max);
    if alpha >= -1e-8 {
        for seg in segs {
            let e = identity_element(&seg.cone);
            let mut part = v.rows_mut(seg.start, seg.dim);
            part += e * (1.0 + alpha.max(0.0));
        }
    }
    for seg in segs {
        if matches!(seg.cone, Cone::Zero(_)) {
            v.rows_mut(seg.start, seg.dim).fill(0.0);
        }
    }
}

fn initial_point(lc: &LinearConic, segs: &[Segment]) -> Option<Iterate> {
    let (m, n) = lc.a.shape();
    let mut h = Matrix::zeros(m, m);
    for seg in segs {
        if !matches!(seg.cone, Cone::Zero(_)) {
            for i in seg.start..seg.start + seg.dim {
                h[(i, i)] = 1.0;
            }
        }
    }
    let kkt = Kkt::factor(&lc.a, &h);
    let (x, zp) = kkt.solve(&Vector::zeros(n), &lc.b)?;
    let mut s = -zp;
    let (_, mut z) = kkt.solve(&-&lc.c, &Vector::zeros(m))?;
    for seg in segs {
        if matches!(seg.cone, Cone::Zero(_)) {
            s.rows_mut(seg.start, seg.dim).fill(0.0);
        }
    }
    shift_into_interior(segs, &mut s);
    shift_into_interior(segs, &mut z);
    // Free dual entries on equality rows are kept as computed.
    let (_, zfull) = kkt.solve(&-&lc.c, &Vector::zeros(m))?;
    for seg in segs {
        if matches!(seg.cone, Cone::Zero(_)) {
            z.rows_mut(seg.start, seg.dim).copy_from(&zfull.rows(seg.start, seg.dim));
        }
    }
    Some(Iterate { x, s, z, tau: 1.0, kappa: 1.0 })
}

/// Solves a linear conic program with equilibration.
pub fn solve_linear(lc: &LinearConic, settings: &SolverSettings) -> LinearSolution {
    solve_linear_checked(lc, settings, None)
}

type GapCheck<'a> = &'a dyn Fn(&Vector, &Vector) -> f64;

/// Like [`solve_linear`], additionally requiring `extra(x, z) ≤ gap_tol` at
/// the (unscaled) iterate before reporting optimality.
fn solve_linear_checked(lc: &LinearConic, settings: &SolverSettings, extra: Option<GapCheck<'_>>) -> LinearSolution {
    let (scaled, eq) = equilibrate(lc);
    let mut out = solve_scaled(&scaled, lc, &eq, settings, extra);
    out.x.component_mul_assign(&eq.d);
    out.s.component_div_assign(&eq.e);
    out.z.component_mul_assign(&eq.e);
    out
}

struct Residuals {
    primal: f64,
    dual: f64,
    gap: f64,
    primal_infeasible: bool,
    dual_infeasible: bool,
}

/// Convergence measures on the original (unequilibrated) data.
fn measure(orig: &LinearConic, eq: &Equilibration, it: &Iterate) -> Residuals {
    let x = it.x.component_mul(&eq.d);
    let s = it.s.component_div(&eq.e);
    let z = it.z.component_mul(&eq.e);
    let (xh, sh, zh) = (&x / it.tau, &s / it.tau, &z / it.tau);
    let rp = &orig.a * &xh + &sh - &orig.b;
    let primal = rp.amax() / (1.0f64).max(orig.b.amax() + xh.amax() + sh.amax());
    let rd = orig.a.transpose() * &zh + &orig.c;
    let dual = rd.amax() / (1.0f64).max(orig.c.amax() + zh.amax());
    let (p, d) = (orig.c.dot(&xh), -orig.b.dot(&zh));
    let gap = (p - d).abs() / (1.0f64).max(p.abs().min(d.abs()));
    let btz = orig.b.dot(&z);
    let primal_infeasible = btz < 0.0 && (orig.a.transpose() * &z).amax() <= INFEASIBILITY_TOL * (-btz);
    let ctx = orig.c.dot(&x);
    let dual_infeasible = ctx < 0.0 && (&orig.a * &x + &s).amax() <= INFEASIBILITY_TOL * (-ctx);
    Residuals { primal, dual, gap, primal_infeasible, dual_infeasible }
}

fn solve_scaled(
    lc: &LinearConic,
    orig: &LinearConic,
    eq: &Equilibration,
    settings: &SolverSettings,
    extra: Option<GapCheck<'_>>,
) -> LinearSolution {
    let (m, n) = lc.a.shape();
    let segs = segments(&lc.cones);
    let nu: usize = lc.cones.iter().map(degree).sum();
    let trouble = |it: Option<&Iterate>, iters: u32, why: &str| {
        let (x, s, z) = match it {
            Some(it) => (&it.x / it.tau, &it.s / it.tau, &it.z / it.tau),
            None => (Vector::zeros(n), Vector::zeros(m), Vector::zeros(m)),
        };
        LinearSolution { status: SolveStatus::NumericalTrouble, x, s, z, iterations: iters, backend_status: why.to_string() }
    };
    let Some(mut it) = initial_point(lc, &segs) else {
        return trouble(None, 0, "initialization failed");
    };
    let tol_feas = 0.1 * settings.feas_tol;
    let tol_gap = 0.1 * settings.gap_tol;
    let e_vec = {
        let mut e = Vector::zeros(m);
        for seg in &segs {
            e.rows_mut(seg.start, seg.dim).copy_from(&identity_element(&seg.cone));
        }
        e
    };
    for iter in 0..settings.max_iter {
        let res = measure(orig, eq, &it);
        if settings.verbose {
            eprintln!(
                "{iter:3} pres {:.2e} dres {:.2e} gap {:.2e} tau {:.2e} kappa {:.2e}",
                res.primal, res.dual, res.gap, it.tau, it.kappa
            );
        }
        let extra_ok = || {
            extra.is_none_or(|f| {
                let x = it.x.component_mul(&eq.d) / it.tau;
                let z = it.z.component_mul(&eq.e) / it.tau;
                f(&x, &z) <= tol_gap
            })
        };
        if res.primal <= tol_feas && res.dual <= tol_feas && res.gap <= tol_gap && extra_ok() {
            return LinearSolution {
                status: SolveStatus::Optimal,
                x: &it.x / it.tau,
                s: &it.s / it.tau,
                z: &it.z / it.tau,
                iterations: iter,
                backend_status: "solved".into(),
            };
        }
        if res.primal_infeasible {
            return LinearSolution {
                status: SolveStatus::Infeasible,
                x: it.x.clone(),
                s: it.s.clone(),
                z: it.z.clone(),
                iterations: iter,
                backend_status: "primal infeasible".into(),
            };
        }
        if res.dual_infeasible {
            return LinearSolution {
                status: SolveStatus::Unbounded,
                x: it.x.clone(),
                s: it.s.clone(),
                z: it.z.clone(),
                iterations: iter,
                backend_status: "dual infeasible".into(),
            };
        }

        let r_x = lc.a.transpose() * &it.z + &lc.c * it.tau;
        let r_z = &lc.a * &it.x + &it.s - &lc.b * it.tau;
        let r_tau = it.kappa + lc.c.dot(&it.x) + lc.b.dot(&it.z);
        let mu = (it.s.dot(&it.z) + it.tau * it.kappa) / (nu as f64 + 1.0);

        let mut scalings = Vec::with_capacity(segs.len());
        for seg in &segs {
            let s = it.s.rows(seg.start, seg.dim).into_owned();
            let z = it.z.rows(seg.start, seg.dim).into_owned();
            match nt_scaling(&seg.cone, &s, &z) {
                Some(sc) => scalings.push(sc),
                None => return trouble(Some(&it), iter, "scaling failed"),
            }
        }
        let mut h = Matrix::zeros(m, m);
        let mut lambda = Vector::zeros(m);
        for (seg, sc) in segs.iter().zip(&scalings) {
            if matches!(seg.cone, Cone::Zero(_)) {
                continue;
            }
            h.view_mut((seg.start, seg.start), (seg.dim, seg.dim)).copy_from(&(sc.w.transpose() * &sc.w));
            lambda.rows_mut(seg.start, seg.dim).copy_from(&sc.lambda);
        }
        let kkt = Kkt::factor(&lc.a, &h);
        let Some((x1, z1)) = kkt.solve(&-&lc.c, &lc.b) else {
            return trouble(Some(&it), iter, "KKT solve failed");
        };
        let denom_base = lc.c.dot(&x1) + lc.b.dot(&z1);

        let direction = |d_s: &Vector, d_kappa: f64, eta: f64| -> Option<(Vector, Vector, Vector, f64, f64)> {
            let v = block_cone_op(&segs, &lambda, d_s, jordan_divide);
            let wt_v = block_apply(&segs, &scalings, &v, |sc, p| sc.w.transpose() * p);
            let rhs1 = -&r_x * eta;
            let rhs2 = -&r_z * eta - &wt_v;
            let (x2, z2) = kkt.solve(&rhs1, &rhs2)?;
            let dtau = (-eta * r_tau - lc.c.dot(&x2) - lc.b.dot(&z2) - d_kappa / it.tau)
                / (denom_base - it.kappa / it.tau);
            let dx = &x2 + &x1 * dtau;
            let dz = &z2 + &z1 * dtau;
            let ds = &wt_v - &h * &dz;
            let dkappa = (d_kappa - it.kappa * dtau) / it.tau;
            Some((dx, dz, ds, dtau, dkappa))
        };
        let step_to_boundary = |ds: &Vector, dz: &Vector, dtau: f64, dkappa: f64| {
            let mut a = cone_step(&segs, &it.s, ds).min(cone_step(&segs, &it.z, dz));
            if dtau < 0.0 {
                a = a.min(-it.tau / dtau);
            }
            if dkappa < 0.0 {
                a = a.min(-it.kappa / dkappa);
            }
            a
        };

        let lam_sq = block_cone_op(&segs, &lambda, &lambda, jordan_product);
        let d_s_aff = -&lam_sq;
        let d_k_aff = -it.tau * it.kappa;
        let Some((_, dz_a, ds_a, dtau_a, dkappa_a)) = direction(&d_s_aff, d_k_aff, 1.0) else {
            return trouble(Some(&it), iter, "KKT solve failed");
        };
        if settings.verbose {
            eprintln!("    mu {mu:.2e}");
        }
        let alpha_aff = step_to_boundary(&ds_a, &dz_a, dtau_a, dkappa_a).min(1.0);
        let sigma = (1.0 - alpha_aff).powi(3);

        let w_inv_t_ds = block_apply(&segs, &scalings, &ds_a, |sc, p| &sc.w_inv_t * p);
        let w_dz = block_apply(&segs, &scalings, &dz_a, |sc, p| &sc.w * p);
        let corr = block_cone_op(&segs, &w_inv_t_ds, &w_dz, jordan_product);
        let d_s = -&lam_sq + &e_vec * (sigma * mu) - corr;
        let d_k = -it.tau * it.kappa + sigma * mu - dtau_a * dkappa_a;
        let Some((dx, dz, ds, dtau, dkappa)) = direction(&d_s, d_k, 1.0 - sigma) else {
            return trouble(Some(&it), iter, "KKT solve failed");
        };
        let mut alpha = (STEP_FRACTION * step_to_boundary(&ds, &dz, dtau, dkappa)).min(1.0);
        // Rounding can put a step computed exactly to the boundary outside
        // the cone when a block is nearly singular; back off until strictly
        // interior.
        let mut backtracks = 0;
        while !(strictly_interior(&segs, &(&it.s + &ds * alpha)) && strictly_interior(&segs, &(&it.z + &dz * alpha))) {
            alpha *= 0.8;
            backtracks += 1;
            if backtracks > 60 {
                break;
            }
        }
        if !(alpha > 1e-14) {
            return trouble(Some(&it), iter, "step too small");
        }
        it.x += &dx * alpha;
        it.s += &ds * alpha;
        it.z += &dz * alpha;
        it.tau += dtau * alpha;
        it.kappa += dkappa * alpha;
        for seg in &segs {
            if matches!(seg.cone, Cone::Zero(_)) {
                it.s.rows_mut(seg.start, seg.dim).fill(0.0);
            }
        }
        if !(it.tau.is_finite() && it.kappa.is_finite()) {
            return trouble(None, iter, "diverged");
        }
    }
    trouble(Some(&it), settings.max_iter, "iteration limit")
}
