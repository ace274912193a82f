//! Exact forward propagation of mode probabilities and partial moments of
//! the jump system under a mode-dependent affine policy, plus cost
//! evaluation and policy extraction.
//!
//! Notation: `q_k(i) = E[x_k 1{r_k=i}]`, `x̄_k(i) = q_k(i)/ρ_k(i)`,
//! `S_k(i) = E[(x_k − x̄_k(i))(x_k − x̄_k(i))ᵀ 1{r_k=i}]`,
//! `L_k(i) = K_k(i) S_k(i)` and `Y_k(i) = K_k(i) S_k(i) K_k(i)ᵀ`.
//!
//! When `ρ_k(i) = 0` exactly the conditional mean `x̄_k(i)` is undefined and
//! is stored as zero.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{frobenius, matrix_from_rows, matrix_to_rows, min_eigenvalue, Matrix, Vector};
use crate::model::{MarkovChain, MjlsModel};

/// Minimum eigenvalue below which `S_k(i)` is treated as singular.
pub const SINGULAR_TOL: f64 = 1e-10;
/// Minimum eigenvalue below which `S_k(i)` is reported as not PSD.
pub const NON_PSD_TOL: f64 = -1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum PropagationError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("S_{k}({i}) is not positive semidefinite (min eigenvalue {min_eig:.3e})")]
    NonPsdCovariance { k: usize, i: usize, min_eig: f64 },
    #[error("S_{k}({i}) is singular (min eigenvalue {min_eig:.3e}); cannot recover the gain")]
    SingularCovariance { k: usize, i: usize, min_eig: f64 },
}

/// `ρ_k = ρ_0 P^k` for `k = 0..=horizon`.
pub fn propagate_mode_distribution(chain: &MarkovChain, horizon: usize) -> Vec<Vector> {
    let n = chain.num_modes();
    let mut out = Vec::with_capacity(horizon + 1);
    out.push(chain.rho0.clone());
    for k in 0..horizon {
        let prev = &out[k];
        let next = Vector::from_fn(n, |j, _| (0..n).map(|i| prev[i] * chain.transition[(i, j)]).sum());
        out.push(next);
    }
    out
}

/// Mean trajectory `τ`: `ρ_k`, `μ_k`, `q_k(i)`, `x̄_k(i)` for `k = 0..=T`
/// and `ū_k(i)` for `k = 0..T`.
#[derive(Clone, Debug, PartialEq)]
pub struct MeanTrajectory {
    pub rho: Vec<Vector>,
    pub mu: Vec<Vector>,
    pub q: Vec<Vec<Vector>>,
    pub xbar: Vec<Vec<Vector>>,
    pub ubar: Vec<Vec<Vector>>,
}

impl MeanTrajectory {
    pub fn horizon(&self) -> usize {
        self.ubar.len()
    }

    pub fn num_modes(&self) -> usize {
        self.rho[0].len()
    }

    /// Mean-spread term `Σ_i ρ_k(i)(x̄_k(i) − μ_k)(x̄_k(i) − μ_k)ᵀ`.
    pub fn spread(&self, k: usize) -> Matrix {
        let n = self.mu[k].len();
        let mut out = Matrix::zeros(n, n);
        for (i, xb) in self.xbar[k].iter().enumerate() {
            let d = xb - &self.mu[k];
            out += (&d * d.transpose()) * self.rho[k][i];
        }
        out
    }
}

/// Covariance trajectory `Ξ`: `S_k(i)`, `Σ_k` for `k = 0..=T` and
/// `L_k(i)`, `Y_k(i)` for `k = 0..T`.
#[derive(Clone, Debug, PartialEq)]
pub struct CovarianceTrajectory {
    pub s: Vec<Vec<Matrix>>,
    pub sigma: Vec<Matrix>,
    pub l: Vec<Vec<Matrix>>,
    pub y: Vec<Vec<Matrix>>,
}

/// Output of [`propagate_covariance`]: the trajectory and every `(k, i)`
/// whose `S_k(i)` has minimum eigenvalue below [`SINGULAR_TOL`].
#[derive(Clone, Debug)]
pub struct CovariancePropagation {
    pub trajectory: CovarianceTrajectory,
    pub degenerate: Vec<(usize, usize, f64)>,
}

/// Mode-dependent affine policy `u = ū_k(i) + K_k(i)(x − x̄_k(i))`.
#[derive(Clone, Debug, PartialEq)]
pub struct Policy {
    pub gains: Vec<Vec<Matrix>>,
    pub feedforward: Vec<Vec<Vector>>,
    pub anchors: Vec<Vec<Vector>>,
}

impl Policy {
    pub fn horizon(&self) -> usize {
        self.gains.len()
    }

    pub fn num_modes(&self) -> usize {
        self.gains.first().map_or(0, Vec::len)
    }

    /// Control applied in mode `i` at step `k`.
    pub fn control(&self, k: usize, i: usize, x: &Vector) -> Vector {
        &self.feedforward[k][i] + &self.gains[k][i] * (x - &self.anchors[k][i])
    }

    /// `ū = 0`, `K = 0`, anchored at the open-loop conditional means.
    pub fn zero(model: &MjlsModel) -> Self {
        let ubar = zero_feedforward(model);
        let tau = propagate_mean(model, &ubar).expect("zero feedforward has model dimensions");
        let gains = vec![vec![Matrix::zeros(model.n_u, model.n_x); model.num_modes()]; model.horizon];
        Self { gains, feedforward: ubar, anchors: tau.xbar[..model.horizon].to_vec() }
    }

    /// Feedback gains `K` around the exact conditional means produced by `ubar`.
    pub fn with_gains(model: &MjlsModel, ubar: Vec<Vec<Vector>>, gains: Vec<Vec<Matrix>>) -> Result<Self, PropagationError> {
        let tau = propagate_mean(model, &ubar)?;
        Ok(Self { gains, feedforward: ubar, anchors: tau.xbar[..model.horizon].to_vec() })
    }

    pub fn check_dimensions(&self, model: &MjlsModel) -> Result<(), PropagationError> {
        let (t, n) = (model.horizon, model.num_modes());
        let bad = |what: &str| Err(PropagationError::DimensionMismatch(what.to_string()));
        if self.gains.len() != t || self.feedforward.len() != t || self.anchors.len() != t {
            return bad("policy horizon differs from model horizon");
        }
        for k in 0..t {
            if self.gains[k].len() != n || self.feedforward[k].len() != n || self.anchors[k].len() != n {
                return bad("policy mode count differs from model");
            }
            for i in 0..n {
                if self.gains[k][i].shape() != (model.n_u, model.n_x)
                    || self.feedforward[k][i].len() != model.n_u
                    || self.anchors[k][i].len() != model.n_x
                {
                    return bad("policy matrix shapes differ from model");
                }
            }
        }
        Ok(())
    }
}

pub fn zero_feedforward(model: &MjlsModel) -> Vec<Vec<Vector>> {
    vec![vec![Vector::zeros(model.n_u); model.num_modes()]; model.horizon]
}

fn conditional_mean(q: &Vector, rho: f64) -> Vector {
    if rho == 0.0 {
        Vector::zeros(q.len())
    } else {
        q / rho
    }
}

/// One step of `q_{k+1}(j) = Σ_i p_ij (A q_k(i) + ρ_k(i)(B ū_k(i) + c_k))`.
fn mean_step(model: &MjlsModel, k: usize, q: &[Vector], rho: &Vector, ubar: &[Vector]) -> Vec<Vector> {
    let n = model.num_modes();
    let c = model.bias_at(k);
    let terms: Vec<Vector> = (0..n)
        .map(|i| {
            let md = model.mode(k, i);
            &md.a * &q[i] + (&md.b * &ubar[i] + c) * rho[i]
        })
        .collect();
    (0..n)
        .map(|j| {
            let mut acc = Vector::zeros(model.n_x);
            for (i, t) in terms.iter().enumerate() {
                acc += t * model.p(i, j);
            }
            acc
        })
        .collect()
}

fn check_feedforward(model: &MjlsModel, ubar: &[Vec<Vector>]) -> Result<(), PropagationError> {
    if ubar.len() != model.horizon {
        return Err(PropagationError::DimensionMismatch(format!(
            "expected {} feedforward steps, got {}",
            model.horizon,
            ubar.len()
        )));
    }
    for (k, step) in ubar.iter().enumerate() {
        if step.len() != model.num_modes() || step.iter().any(|u| u.len() != model.n_u) {
            return Err(PropagationError::DimensionMismatch(format!("feedforward at step {k}")));
        }
    }
    Ok(())
}

fn mean_from_partials(q: &[Vector], n_x: usize) -> Vector {
    let mut mu = Vector::zeros(n_x);
    for qi in q {
        mu += qi;
    }
    mu
}

/// Propagates the partial means from `q_0(i) = ρ_0(i) μ_0` under `ū`.
pub fn propagate_mean(model: &MjlsModel, ubar: &[Vec<Vector>]) -> Result<MeanTrajectory, PropagationError> {
    check_feedforward(model, ubar)?;
    if model.mu0.len() != model.n_x {
        return Err(PropagationError::DimensionMismatch("mu0".into()));
    }
    let rho = model.mode_probabilities();
    let mut q = vec![rho[0].iter().map(|r| &model.mu0 * *r).collect::<Vec<_>>()];
    for k in 0..model.horizon {
        let next = mean_step(model, k, &q[k], &rho[k], &ubar[k]);
        q.push(next);
    }
    Ok(assemble_mean(model.n_x, rho, q, ubar.to_vec()))
}

fn assemble_mean(n_x: usize, rho: Vec<Vector>, q: Vec<Vec<Vector>>, ubar: Vec<Vec<Vector>>) -> MeanTrajectory {
    let xbar = q
        .iter()
        .zip(&rho)
        .map(|(qk, rk)| qk.iter().enumerate().map(|(i, qi)| conditional_mean(qi, rk[i])).collect())
        .collect();
    let mu = q.iter().map(|qk| mean_from_partials(qk, n_x)).collect();
    MeanTrajectory { rho, mu, q, xbar, ubar }
}

/// One step of the `S` recursion in its `(L, Y)` form:
///
/// `S_{k+1}(j) = Σ_i p_ij [A S Aᵀ + A Lᵀ Bᵀ + B L Aᵀ + B Y Bᵀ + ρ_k(i)(m mᵀ + G Gᵀ)]
///               − ρ_{k+1}(j) x̄_{k+1}(j) x̄_{k+1}(j)ᵀ`
///
/// with `m = A x̄_k(i) + B ū_k(i) + c_k`.
fn covariance_step(
    model: &MjlsModel,
    tau: &MeanTrajectory,
    k: usize,
    s: &[Matrix],
    l: &[Matrix],
    y: &[Matrix],
) -> Vec<Matrix> {
    let n = model.num_modes();
    let nx = model.n_x;
    let c = model.bias_at(k);
    let inner: Vec<Matrix> = (0..n)
        .map(|i| {
            let md = model.mode(k, i);
            let a_lt_bt = &md.a * l[i].transpose() * md.b.transpose();
            let m = &md.a * &tau.xbar[k][i] + (&md.b * &tau.ubar[k][i] + c);
            let mean_part = (&m * m.transpose() + &md.g * md.g.transpose()) * tau.rho[k][i];
            &md.a * &s[i] * md.a.transpose()
                + &a_lt_bt
                + a_lt_bt.transpose()
                + &md.b * &y[i] * md.b.transpose()
                + mean_part
        })
        .collect();
    (0..n)
        .map(|j| {
            let mut acc = Matrix::zeros(nx, nx);
            for (i, term) in inner.iter().enumerate() {
                acc += term * model.p(i, j);
            }
            let xb = &tau.xbar[k + 1][j];
            acc -= (xb * xb.transpose()) * tau.rho[k + 1][j];
            (&acc + acc.transpose()) * 0.5
        })
        .collect()
}

/// `Σ_k = Σ_i [S_k(i) + ρ_k(i)(x̄_k(i) − μ_k)(x̄_k(i) − μ_k)ᵀ]` for every `k`.
pub fn assemble_total_covariance(s: &[Vec<Matrix>], tau: &MeanTrajectory) -> Vec<Matrix> {
    s.iter()
        .enumerate()
        .map(|(k, sk)| {
            let mut acc = tau.spread(k);
            for si in sk {
                acc += si;
            }
            acc
        })
        .collect()
}

fn scan_psd(s: &[Matrix], k: usize, degenerate: &mut Vec<(usize, usize, f64)>) -> Result<(), PropagationError> {
    for (i, si) in s.iter().enumerate() {
        let lo = min_eigenvalue(si);
        let scale = si.amax().max(1.0);
        if lo < NON_PSD_TOL * scale {
            return Err(PropagationError::NonPsdCovariance { k, i, min_eig: lo });
        }
        if lo < SINGULAR_TOL {
            degenerate.push((k, i, lo));
        }
    }
    Ok(())
}

/// Propagates `S_k(i)` from `S_0(i)` under given `L`, `Y` and mean
/// trajectory, and assembles `Σ_k`.
pub fn propagate_covariance(
    model: &MjlsModel,
    tau: &MeanTrajectory,
    l: &[Vec<Matrix>],
    y: &[Vec<Matrix>],
    s0: &[Matrix],
) -> Result<CovariancePropagation, PropagationError> {
    let (t, n) = (model.horizon, model.num_modes());
    if l.len() != t || y.len() != t || s0.len() != n || tau.horizon() != t {
        return Err(PropagationError::DimensionMismatch("covariance inputs vs horizon/modes".into()));
    }
    for k in 0..t {
        if l[k].len() != n
            || y[k].len() != n
            || l[k].iter().any(|m| m.shape() != (model.n_u, model.n_x))
            || y[k].iter().any(|m| m.shape() != (model.n_u, model.n_u))
        {
            return Err(PropagationError::DimensionMismatch(format!("L/Y at step {k}")));
        }
    }
    if s0.iter().any(|m| m.shape() != (model.n_x, model.n_x)) {
        return Err(PropagationError::DimensionMismatch("S_0".into()));
    }
    let mut degenerate = Vec::new();
    let mut s = vec![s0.to_vec()];
    scan_psd(&s[0], 0, &mut degenerate)?;
    for k in 0..t {
        let next = covariance_step(model, tau, k, &s[k], &l[k], &y[k]);
        scan_psd(&next, k + 1, &mut degenerate)?;
        s.push(next);
    }
    let sigma = assemble_total_covariance(&s, tau);
    Ok(CovariancePropagation {
        trajectory: CovarianceTrajectory { s, sigma, l: l.to_vec(), y: y.to_vec() },
        degenerate,
    })
}

/// `S_0(i) = ρ_0(i) Σ_0`.
pub fn initial_partial_covariances(model: &MjlsModel) -> Vec<Matrix> {
    model.chain.rho0.iter().map(|r| &model.sigma0 * *r).collect()
}

/// Exact moments of the closed loop under `policy`, with `L = K S` and
/// `Y = K S Kᵀ` formed step by step. Anchors that differ from the true
/// conditional means shift the effective feedforward by `K (x̄ − anchor)`;
/// the returned `ū` is that effective conditional mean control.
pub fn propagate_policy(
    model: &MjlsModel,
    policy: &Policy,
) -> Result<(MeanTrajectory, CovarianceTrajectory), PropagationError> {
    policy.check_dimensions(model)?;
    let (t, n) = (model.horizon, model.num_modes());
    let rho = model.mode_probabilities();
    let mut q = vec![rho[0].iter().map(|r| &model.mu0 * *r).collect::<Vec<_>>()];
    let mut ubar = Vec::with_capacity(t);
    let mut s = vec![initial_partial_covariances(model)];
    let mut l = Vec::with_capacity(t);
    let mut y = Vec::with_capacity(t);
    let mut degenerate = Vec::new();
    scan_psd(&s[0], 0, &mut degenerate)?;
    for k in 0..t {
        let xbar_k: Vec<Vector> = (0..n).map(|i| conditional_mean(&q[k][i], rho[k][i])).collect();
        let u_k: Vec<Vector> = (0..n)
            .map(|i| &policy.feedforward[k][i] + &policy.gains[k][i] * (&xbar_k[i] - &policy.anchors[k][i]))
            .collect();
        let next_q = mean_step(model, k, &q[k], &rho[k], &u_k);
        q.push(next_q);
        ubar.push(u_k);
        let l_k: Vec<Matrix> = (0..n).map(|i| &policy.gains[k][i] * &s[k][i]).collect();
        let y_k: Vec<Matrix> = (0..n)
            .map(|i| {
                let m = &l_k[i] * policy.gains[k][i].transpose();
                (&m + m.transpose()) * 0.5
            })
            .collect();
        // The step only reads x̄ up to k+1 and ū up to k.
        let partial = assemble_mean(model.n_x, rho[..k + 2].to_vec(), q.clone(), ubar.clone());
        let next_s = covariance_step(model, &partial, k, &s[k], &l_k, &y_k);
        scan_psd(&next_s, k + 1, &mut degenerate)?;
        s.push(next_s);
        l.push(l_k);
        y.push(y_k);
    }
    let tau = assemble_mean(model.n_x, rho, q, ubar);
    let sigma = assemble_total_covariance(&s, &tau);
    Ok((tau, CovarianceTrajectory { s, sigma, l, y }))
}

/// Cost split into the mean part `J(τ)` and the covariance part `J(Ξ)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub total: f64,
    pub mean: f64,
    pub covariance: f64,
}

/// `J(τ) = Σ_{k<T} Σ_i ρ_k(i)(x̄ᵀ Q x̄ + ūᵀ R ū)`,
/// `J(Ξ) = Σ_{k<T} Σ_i Tr(S_k(i) Q_k + Y_k(i) R_k)`.
pub fn evaluate_cost(tau: &MeanTrajectory, xi: &CovarianceTrajectory, model: &MjlsModel) -> CostBreakdown {
    let mut mean = 0.0;
    let mut covariance = 0.0;
    for k in 0..model.horizon {
        let (q, r) = (model.q_at(k), model.r_at(k));
        for i in 0..model.num_modes() {
            let xb = &tau.xbar[k][i];
            let ub = &tau.ubar[k][i];
            mean += tau.rho[k][i] * ((xb.transpose() * q * xb)[0] + (ub.transpose() * r * ub)[0]);
            covariance += (&xi.s[k][i] * q).trace() + (&xi.y[k][i] * r).trace();
        }
    }
    CostBreakdown { total: mean + covariance, mean, covariance }
}

/// `K_k(i) = L_k(i) S_k(i)⁻¹`, packaged with `ū` and `x̄` for playback.
pub fn extract_policy(xi: &CovarianceTrajectory, tau: &MeanTrajectory) -> Result<Policy, PropagationError> {
    let t = xi.l.len();
    let mut gains = Vec::with_capacity(t);
    for k in 0..t {
        let mut row = Vec::with_capacity(xi.l[k].len());
        for (i, l) in xi.l[k].iter().enumerate() {
            let s = &xi.s[k][i];
            let lo = min_eigenvalue(s);
            if lo <= SINGULAR_TOL {
                return Err(PropagationError::SingularCovariance { k, i, min_eig: lo });
            }
            let chol = s.clone().cholesky().ok_or(PropagationError::SingularCovariance { k, i, min_eig: lo })?;
            // K S = L  ⇔  S Kᵀ = Lᵀ.
            row.push(chol.solve(&l.transpose()).transpose());
        }
        gains.push(row);
    }
    Ok(Policy { gains, feedforward: tau.ubar.clone(), anchors: tau.xbar[..t].to_vec() })
}

/// Relative Frobenius residual `‖K S − L‖ / max(1, ‖L‖)`, maximized over `(k, i)`.
pub fn gain_residual(policy: &Policy, xi: &CovarianceTrajectory) -> f64 {
    let mut worst = 0.0_f64;
    for (k, row) in policy.gains.iter().enumerate() {
        for (i, gain) in row.iter().enumerate() {
            let r = frobenius(&(gain * &xi.s[k][i] - &xi.l[k][i])) / frobenius(&xi.l[k][i]).max(1.0);
            worst = worst.max(r);
        }
    }
    worst
}

// ---------------------------------------------------------------------------
// JSON form of a policy

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PolicyFile {
    horizon: usize,
    num_modes: usize,
    n_x: usize,
    n_u: usize,
    /// `[k][i]` row-major gain matrices.
    gains: Vec<Vec<Vec<Vec<f64>>>>,
    feedforward: Vec<Vec<Vec<f64>>>,
    anchors: Vec<Vec<Vec<f64>>>,
}

impl Policy {
    pub fn to_json(&self) -> String {
        let file = PolicyFile {
            horizon: self.horizon(),
            num_modes: self.num_modes(),
            n_x: self.anchors.first().and_then(|r| r.first()).map_or(0, |v| v.len()),
            n_u: self.feedforward.first().and_then(|r| r.first()).map_or(0, |v| v.len()),
            gains: self.gains.iter().map(|r| r.iter().map(matrix_to_rows).collect()).collect(),
            feedforward: self.feedforward.iter().map(|r| r.iter().map(|v| v.iter().copied().collect()).collect()).collect(),
            anchors: self.anchors.iter().map(|r| r.iter().map(|v| v.iter().copied().collect()).collect()).collect(),
        };
        serde_json::to_string_pretty(&file).expect("policy serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<Self, String> {
        let file: PolicyFile = serde_json::from_str(text).map_err(|e| e.to_string())?;
        let gains = file
            .gains
            .iter()
            .map(|r| r.iter().map(|m| matrix_from_rows(m)).collect::<Result<Vec<_>, _>>())
            .collect::<Result<Vec<_>, _>>()?;
        let vecs = |src: &Vec<Vec<Vec<f64>>>| -> Vec<Vec<Vector>> {
            src.iter().map(|r| r.iter().map(|v| Vector::from_vec(v.clone())).collect()).collect()
        };
        let policy = Policy { gains, feedforward: vecs(&file.feedforward), anchors: vecs(&file.anchors) };
        if policy.horizon() != file.horizon || policy.num_modes() != file.num_modes {
            return Err("policy header does not match its contents".into());
        }
        Ok(policy)
    }
}
