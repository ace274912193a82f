//! Mean and covariance subproblems, chance-constraint tightenings, the
//! slack-penalized refinement loop and the losslessness certificate.
//!
//! The mean problem optimizes `ū_k(i)` (and the partial means it induces)
//! for a fixed covariance trajectory; the covariance problem optimizes
//! `(S, L, Y)` for a fixed mean trajectory, with the nonconvex
//! `Y = L S⁻¹ Lᵀ` relaxed to the Schur complement LMI
//! `[[Y, L], [Lᵀ, S]] ⪰ 0`. At an optimum the relaxation is tight, which
//! [`certify_losslessness`] checks numerically.
//!
//! Chance constraints become deterministic moment constraints:
//!
//! * half-plane `P(aᵀv + b ≤ 0) ≥ 1 − ε` ⇐ `aᵀv̄ + b + √((1−ε)/ε)·√(aᵀV a) ≤ 0` (Cantelli);
//! * norm ball `P(‖v‖ ≤ v_max) ≥ 1 − ε` ⇐ `‖v̄‖ + √((n/ε)·λ_max(V)) ≤ v_max` (Chebyshev).

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::conic::{ConicProblem, ConstraintId, LinExpr, MatExpr, SolveResult, SolveStats, SolveStatus, SolverSettings};
use crate::linalg::{frobenius, max_eigenvalue, Matrix, Vector};
use crate::model::{ChanceConstraintSet, HalfPlane, MjlsModel};
use crate::propagation::{
    evaluate_cost, extract_policy, initial_partial_covariances, propagate_covariance, propagate_mean, CostBreakdown,
    CovarianceTrajectory, MeanTrajectory, Policy, PropagationError,
};

/// Pass threshold of the losslessness certificate.
pub const LOSSLESS_TOL: f64 = 1e-5;
/// Tolerance relaxation factor for the single retry after numerical trouble.
pub const RETRY_RELAXATION: f64 = 10.0;

#[derive(Debug, Error)]
pub enum SteeringError {
    #[error("{stage}: problem is infeasible")]
    Infeasible { stage: String },
    #[error("{stage}: problem is unbounded")]
    Unbounded { stage: String },
    #[error("{stage}: solver reported numerical trouble after retry ({detail})")]
    NumericalTrouble { stage: String, detail: String },
    #[error("risk level {0} outside (0, 1)")]
    InvalidRisk(f64),
    #[error("invalid options: {0}")]
    InvalidOptions(String),
    #[error(transparent)]
    Propagation(#[from] PropagationError),
}

// ---------------------------------------------------------------------------
// Tightenings

/// `√((1−ε)/ε)`.
pub fn cantelli_coefficient(eps: f64) -> Result<f64, SteeringError> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(SteeringError::InvalidRisk(eps));
    }
    Ok(((1.0 - eps) / eps).sqrt())
}

/// `√(n/ε)`.
pub fn chebyshev_coefficient(n: usize, eps: f64) -> Result<f64, SteeringError> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(SteeringError::InvalidRisk(eps));
    }
    Ok((n as f64 / eps).sqrt())
}

/// `aᵀv̄ + b + √((1−ε)/ε · aᵀVa)`; the chance constraint holds if this is `≤ 0`.
pub fn tighten_halfplane(v_mean: &Vector, v_cov: &Matrix, h: &HalfPlane, eps: f64) -> Result<f64, SteeringError> {
    let kappa = cantelli_coefficient(eps)?;
    let a = h.normal_vector();
    let var = a.dot(&(v_cov * &a)).max(0.0);
    Ok(h.evaluate(v_mean) + kappa * var.sqrt())
}

/// `‖v̄‖ + √((n/ε)·λ_max(V)) − v_max`; the chance constraint holds if this is `≤ 0`.
pub fn tighten_norm(v_mean: &Vector, v_cov: &Matrix, v_max: f64, eps: f64) -> Result<f64, SteeringError> {
    let kappa = chebyshev_coefficient(v_mean.len(), eps)?;
    Ok(v_mean.norm() + kappa * max_eigenvalue(v_cov).max(0.0).sqrt() - v_max)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HalfPlaneTightening {
    pub plane: HalfPlane,
    pub risk: f64,
    /// `√((1−ε)/ε)`.
    pub kappa: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormTightening {
    pub bound: f64,
    pub risk: f64,
    /// `n/ε`, the factor multiplying `λ_max`.
    pub factor: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TighteningCoefficients {
    pub state: Vec<HalfPlaneTightening>,
    /// Indexed `[mode][hyperplane]`.
    pub control: Vec<Vec<HalfPlaneTightening>>,
    pub tube: Option<NormTightening>,
    /// One entry per mode when a control-norm constraint is present.
    pub control_norm: Vec<NormTightening>,
    pub include_terminal: bool,
}

impl TighteningCoefficients {
    pub fn is_empty(&self) -> bool {
        self.state.is_empty()
            && self.control.iter().all(Vec::is_empty)
            && self.tube.is_none()
            && self.control_norm.is_empty()
    }

    /// Time steps carrying state constraints.
    pub fn state_steps(&self, horizon: usize) -> std::ops::Range<usize> {
        0..if self.include_terminal { horizon + 1 } else { horizon }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RiskStrategy {
    #[default]
    Uniform,
}

/// Splits joint risk budgets over the individual hyperplanes (uniformly,
/// unless the constraint set carries an explicit split) and computes the
/// tightening coefficients. `n_x`, `n_u` size the Chebyshev factors.
pub fn allocate_risk(
    cc: &ChanceConstraintSet,
    n_x: usize,
    n_u: usize,
    num_modes: usize,
    _strategy: RiskStrategy,
) -> Result<TighteningCoefficients, SteeringError> {
    let mut out = TighteningCoefficients { include_terminal: cc.include_terminal, ..Default::default() };
    let js = cc.state_halfplanes.len();
    for (j, h) in cc.state_halfplanes.iter().enumerate() {
        let risk = match &cc.risk_split {
            Some(split) => split.state[j],
            None => cc.state_risk / js as f64,
        };
        out.state.push(HalfPlaneTightening { plane: h.clone(), risk, kappa: cantelli_coefficient(risk)? });
    }
    let ju = cc.control_halfplanes.len();
    out.control = vec![Vec::new(); num_modes];
    if ju > 0 {
        for (i, per_mode) in out.control.iter_mut().enumerate() {
            for (j, h) in cc.control_halfplanes.iter().enumerate() {
                let risk = match &cc.risk_split {
                    Some(split) => split.control[i][j],
                    None => cc.control_risk[i] / ju as f64,
                };
                per_mode.push(HalfPlaneTightening { plane: h.clone(), risk, kappa: cantelli_coefficient(risk)? });
            }
        }
    }
    if let Some(t) = &cc.state_tube {
        chebyshev_coefficient(n_x, t.risk)?;
        out.tube = Some(NormTightening { bound: t.d_max, risk: t.risk, factor: n_x as f64 / t.risk });
    }
    if let Some(norm) = &cc.control_norm {
        for i in 0..num_modes {
            chebyshev_coefficient(n_u, norm.risk[i])?;
            out.control_norm.push(NormTightening {
                bound: norm.u_max[i],
                risk: norm.risk[i],
                factor: n_u as f64 / norm.risk[i],
            });
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Options and results

/// Slack family index. The mean problem uses the state half-plane,
/// control half-plane and control-norm families; the covariance problem
/// uses all four.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    StateHalfplane,
    ControlHalfplane,
    Tube,
    ControlNorm,
}

pub const FAMILIES: [Family; 4] = [Family::StateHalfplane, Family::ControlHalfplane, Family::Tube, Family::ControlNorm];

/// Per-family, per-step slack values.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FamilySlacks {
    pub state_halfplane: Vec<f64>,
    pub control_halfplane: Vec<f64>,
    pub tube: Vec<f64>,
    pub control_norm: Vec<f64>,
}

impl FamilySlacks {
    pub fn get(&self, f: Family) -> &[f64] {
        match f {
            Family::StateHalfplane => &self.state_halfplane,
            Family::ControlHalfplane => &self.control_halfplane,
            Family::Tube => &self.tube,
            Family::ControlNorm => &self.control_norm,
        }
    }

    fn get_mut(&mut self, f: Family) -> &mut Vec<f64> {
        match f {
            Family::StateHalfplane => &mut self.state_halfplane,
            Family::ControlHalfplane => &mut self.control_halfplane,
            Family::Tube => &mut self.tube,
            Family::ControlNorm => &mut self.control_norm,
        }
    }

    pub fn family_max(&self, f: Family) -> f64 {
        self.get(f).iter().fold(0.0, |a, &b| a.max(b))
    }

    pub fn max(&self) -> f64 {
        FAMILIES.iter().map(|&f| self.family_max(f)).fold(0.0, f64::max)
    }
}

/// Penalty weights `α_m`, one per family.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Weights(pub [f64; 4]);

impl Weights {
    pub fn uniform(alpha: f64) -> Self {
        Self([alpha; 4])
    }

    pub fn get(&self, f: Family) -> f64 {
        self.0[f as usize]
    }
}

/// How slack variables enter the chance-constrained programs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SlackMode {
    Penalized(Weights),
    /// Slacks pinned to zero: the tightened constraints are hard.
    Hard,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SteeringOptions {
    /// Slack tolerance for convergence.
    pub tol: f64,
    pub alpha_init: f64,
    pub eta: f64,
    pub max_iter: usize,
    pub solver: SolverSettings,
    /// Escalate only families whose slack exceeds `tol`.
    pub per_family_escalation: bool,
    /// Tighten control constraints with the mode-conditioned covariance
    /// `Y_k(i)/ρ_k(i)` instead of `Y_k(i)`.
    pub mode_conditioned_control: bool,
    pub risk_strategy: RiskStrategy,
}

impl Default for SteeringOptions {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            alpha_init: 1e2,
            eta: 1.5,
            max_iter: 50,
            solver: SolverSettings::default(),
            per_family_escalation: false,
            mode_conditioned_control: false,
            risk_strategy: RiskStrategy::Uniform,
        }
    }
}

impl SteeringOptions {
    fn check(&self) -> Result<(), SteeringError> {
        if !(self.tol > 0.0) {
            return Err(SteeringError::InvalidOptions("tol must be positive".into()));
        }
        if !(self.alpha_init > 0.0) {
            return Err(SteeringError::InvalidOptions("alpha must be positive".into()));
        }
        if !(self.eta > 1.0) {
            return Err(SteeringError::InvalidOptions("eta must exceed 1".into()));
        }
        if self.max_iter == 0 {
            return Err(SteeringError::InvalidOptions("max_iter must be at least 1".into()));
        }
        Ok(())
    }
}

/// Slacks recorded after one refinement iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlackReport {
    pub iteration: usize,
    pub weights: Weights,
    /// Mean-problem slacks `β`.
    pub beta: FamilySlacks,
    /// Covariance-problem slacks `ζ`.
    pub zeta: FamilySlacks,
}

impl SlackReport {
    pub fn max(&self) -> f64 {
        self.beta.max().max(self.zeta.max())
    }
}

/// Per-`(k, i)` residuals `‖L S⁻¹ Lᵀ − Y‖_F / (1 + ‖Y‖_F)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LosslessnessReport {
    pub residuals: Vec<Vec<f64>>,
    pub max: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub iteration: usize,
    pub status: SolveStatus,
    pub retried: bool,
    pub stats: SolveStats,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SteeringStatus {
    Converged,
    MaxIterations,
}

#[derive(Clone, Debug)]
pub struct SteeringSolution {
    pub status: SteeringStatus,
    pub tau: MeanTrajectory,
    pub xi: CovarianceTrajectory,
    pub policy: Policy,
    pub cost: CostBreakdown,
    pub losslessness: LosslessnessReport,
    pub slack_history: Vec<SlackReport>,
    /// Refinement iterations (1 for the unconstrained pipeline).
    pub iterations: usize,
    pub stages: Vec<StageRecord>,
    /// One JSON object per refinement iteration.
    pub run_log: Vec<serde_json::Value>,
    /// Diagnostics such as mean trajectories that already exhaust a norm budget.
    pub flags: Vec<String>,
    /// Objective of the last covariance program (including slack penalties).
    pub covariance_objective: f64,
    /// Objective of the last mean program (including slack penalties).
    pub mean_objective: f64,
}

impl SteeringSolution {
    pub fn converged(&self) -> bool {
        self.status == SteeringStatus::Converged
    }

    pub fn terminal_mean_error(&self, model: &MjlsModel) -> f64 {
        (&self.tau.mu[model.horizon] - &model.mu_f).norm()
    }

    /// `λ_max(Σ_T − Σ_f)`.
    pub fn terminal_covariance_excess(&self, model: &MjlsModel) -> f64 {
        max_eigenvalue(&(&self.xi.sigma[model.horizon] - &model.sigma_f))
    }
}

// ---------------------------------------------------------------------------
// Losslessness

/// `‖L S⁻¹ Lᵀ − Y‖_F / (1 + ‖Y‖_F)` for every `(k, i)`; singular `S` gives `∞`.
pub fn certify_losslessness(xi: &CovarianceTrajectory) -> LosslessnessReport {
    let mut residuals = Vec::with_capacity(xi.l.len());
    let mut worst = 0.0_f64;
    for k in 0..xi.l.len() {
        let mut row = Vec::with_capacity(xi.l[k].len());
        for i in 0..xi.l[k].len() {
            let s = &xi.s[k][i];
            let r = match s.clone().cholesky() {
                Some(ch) if crate::linalg::min_eigenvalue(s) > crate::propagation::SINGULAR_TOL => {
                    let l = &xi.l[k][i];
                    let sinv_lt = ch.solve(&l.transpose());
                    let y = &xi.y[k][i];
                    frobenius(&(l * sinv_lt - y)) / (1.0 + frobenius(y))
                }
                _ => f64::INFINITY,
            };
            worst = worst.max(r);
            row.push(r);
        }
        residuals.push(row);
    }
    LosslessnessReport { residuals, max: worst, passed: worst <= LOSSLESS_TOL }
}

// ---------------------------------------------------------------------------
// Program builders

fn mat_vec(a: &Matrix, v: &[LinExpr]) -> Vec<LinExpr> {
    (0..a.nrows()).map(|r| LinExpr::combine((0..a.ncols()).map(|c| (a[(r, c)], &v[c])))).collect()
}

fn scalar_identity(t: &LinExpr, n: usize) -> MatExpr {
    MatExpr::from_fn(n, n, |i, j| if i == j { t.clone() } else { LinExpr::zero() })
}

/// Slack variable handles, per family and step.
#[derive(Clone, Debug, Default)]
struct SlackVars {
    vars: [Vec<LinExpr>; 4],
}

impl SlackVars {
    fn new(p: &mut ConicProblem, families: &[(Family, usize)], mode: SlackMode) -> Self {
        let mut out = SlackVars::default();
        if let SlackMode::Penalized(w) = mode {
            for &(f, steps) in families {
                if steps == 0 {
                    continue;
                }
                let v = p.vector(&format!("slack {f:?}"), steps);
                p.add_nonneg(&format!("slack {f:?} >= 0"), v.clone());
                let penalty = LinExpr::combine(v.iter().map(|e| (w.get(f), e)));
                p.add_objective(&penalty);
                out.vars[f as usize] = v;
            }
        }
        out
    }

    /// Slack expression for family `f` at step `k` (zero in hard mode).
    fn at(&self, f: Family, k: usize) -> LinExpr {
        self.vars[f as usize].get(k).cloned().unwrap_or_else(LinExpr::zero)
    }

    fn values(&self, r: &SolveResult) -> FamilySlacks {
        let mut out = FamilySlacks::default();
        for f in FAMILIES {
            *out.get_mut(f) = self.vars[f as usize].iter().map(|e| r.value(e).max(0.0)).collect();
        }
        out
    }
}

/// Mean program (unconstrained or chance-constrained) with variable handles.
pub struct MeanProgram {
    pub problem: ConicProblem,
    pub q: Vec<Vec<Vec<LinExpr>>>,
    pub xbar: Vec<Vec<Vec<LinExpr>>>,
    pub ubar: Vec<Vec<Vec<LinExpr>>>,
    pub mu: Vec<Vec<LinExpr>>,
    slacks: SlackVars,
}

impl MeanProgram {
    /// Feedforward at the solution, re-propagated exactly.
    pub fn extract(&self, model: &MjlsModel, r: &SolveResult) -> Result<MeanTrajectory, SteeringError> {
        let ubar: Vec<Vec<Vector>> = self.ubar.iter().map(|row| row.iter().map(|u| r.values(u)).collect()).collect();
        Ok(propagate_mean(model, &ubar)?)
    }

    pub fn slack_values(&self, r: &SolveResult) -> FamilySlacks {
        self.slacks.values(r)
    }
}

fn mean_core(model: &MjlsModel) -> MeanProgram {
    let (t, n, nx, nu) = (model.horizon, model.num_modes(), model.n_x, model.n_u);
    let rho = model.mode_probabilities();
    let mut p = ConicProblem::new();
    let mut q = Vec::with_capacity(t + 1);
    let mut xbar = Vec::with_capacity(t + 1);
    let mut mu = Vec::with_capacity(t + 1);
    let mut ubar = Vec::with_capacity(t);
    for k in 0..=t {
        q.push((0..n).map(|i| p.vector(&format!("q[{k}][{i}]"), nx)).collect::<Vec<_>>());
        xbar.push((0..n).map(|i| p.vector(&format!("xbar[{k}][{i}]"), nx)).collect::<Vec<_>>());
        mu.push(p.vector(&format!("mu[{k}]"), nx));
    }
    for k in 0..t {
        ubar.push((0..n).map(|i| p.vector(&format!("ubar[{k}][{i}]"), nu)).collect::<Vec<_>>());
    }
    for i in 0..n {
        let rows = (0..nx).map(|r| &q[0][i][r] - rho[0][i] * model.mu0[r]).collect();
        p.add_equalities(&format!("q[0][{i}] = rho0 mu0"), rows);
    }
    for k in 0..t {
        let c = model.bias_at(k);
        let terms: Vec<Vec<LinExpr>> = (0..n)
            .map(|i| {
                let md = model.mode(k, i);
                let aq = mat_vec(&md.a, &q[k][i]);
                let bu = mat_vec(&md.b, &ubar[k][i]);
                (0..nx).map(|r| &aq[r] + &((&bu[r] + c[r]) * rho[k][i])).collect()
            })
            .collect();
        for j in 0..n {
            let rows = (0..nx)
                .map(|r| {
                    let rhs = LinExpr::combine((0..n).map(|i| (model.p(i, j), &terms[i][r])));
                    &q[k + 1][j][r] - &rhs
                })
                .collect();
            p.add_equalities(&format!("mean dynamics k={k} j={j}"), rows);
        }
    }
    for k in 0..=t {
        for i in 0..n {
            let rows = (0..nx).map(|r| &(&xbar[k][i][r] * rho[k][i]) - &q[k][i][r]).collect();
            p.add_equalities(&format!("rho xbar = q k={k} i={i}"), rows);
        }
        let rows = (0..nx)
            .map(|r| {
                let total = LinExpr::combine((0..n).map(|i| (1.0, &q[k][i][r])));
                &mu[k][r] - &total
            })
            .collect();
        p.add_equalities(&format!("mu[{k}]"), rows);
    }
    let rows = (0..nx).map(|r| &mu[t][r] - model.mu_f[r]).collect();
    p.add_equalities("terminal mean", rows);
    for k in 0..t {
        for i in 0..n {
            p.add_quadratic(xbar[k][i].clone(), &(model.q_at(k) * rho[k][i])).expect("Q is PSD");
            p.add_quadratic(ubar[k][i].clone(), &(model.r_at(k) * rho[k][i])).expect("R is PSD");
        }
    }
    MeanProgram { problem: p, q, xbar, ubar, mu, slacks: SlackVars::default() }
}

/// Mean steering program without chance constraints.
pub fn build_mean_unconstrained(model: &MjlsModel) -> MeanProgram {
    mean_core(model)
}

/// Effective control covariance used in control tightenings.
fn control_cov(y: &Matrix, rho: f64, mode_conditioned: bool) -> Matrix {
    if mode_conditioned {
        y / rho
    } else {
        y.clone()
    }
}

/// Mean program with tightened chance constraints for a fixed covariance
/// trajectory `xi`.
pub fn build_mean_cc(
    model: &MjlsModel,
    coeffs: &TighteningCoefficients,
    xi: &CovarianceTrajectory,
    mode: SlackMode,
    mode_conditioned_control: bool,
) -> MeanProgram {
    let mut prog = mean_core(model);
    let (t, n) = (model.horizon, model.num_modes());
    let rho = model.mode_probabilities();
    let state_steps = coeffs.state_steps(t);
    let has_control_hp = coeffs.control.iter().any(|c| !c.is_empty());
    let families = [
        (Family::StateHalfplane, if coeffs.state.is_empty() { 0 } else { state_steps.len() }),
        (Family::ControlHalfplane, if has_control_hp { t } else { 0 }),
        (Family::ControlNorm, if coeffs.control_norm.is_empty() { 0 } else { t }),
    ];
    let slacks = SlackVars::new(&mut prog.problem, &families, mode);
    let p = &mut prog.problem;
    for k in state_steps.clone() {
        for (j, h) in coeffs.state.iter().enumerate() {
            let a = h.plane.normal_vector();
            let sd = a.dot(&(&xi.sigma[k] * &a)).max(0.0).sqrt();
            let lhs = &LinExpr::dot(a.as_slice(), &prog.mu[k]) + (h.plane.offset + h.kappa * sd);
            p.add_nonneg(&format!("state halfplane k={k} j={j}"), vec![&slacks.at(Family::StateHalfplane, k) - &lhs]);
        }
    }
    for k in 0..t {
        for i in 0..n {
            let y = control_cov(&xi.y[k][i], rho[k][i], mode_conditioned_control);
            for (j, h) in coeffs.control[i].iter().enumerate() {
                let f = h.plane.normal_vector();
                let sd = f.dot(&(&y * &f)).max(0.0).sqrt();
                let lhs = &LinExpr::dot(f.as_slice(), &prog.ubar[k][i]) + (h.plane.offset + h.kappa * sd);
                p.add_nonneg(
                    &format!("control halfplane k={k} i={i} j={j}"),
                    vec![&slacks.at(Family::ControlHalfplane, k) - &lhs],
                );
            }
            if let Some(nt) = coeffs.control_norm.get(i) {
                let margin = (nt.factor * max_eigenvalue(&y).max(0.0)).sqrt();
                let t_expr = &slacks.at(Family::ControlNorm, k) + (nt.bound - margin);
                p.add_soc(&format!("control norm k={k} i={i}"), t_expr, prog.ubar[k][i].clone());
            }
        }
    }
    prog.slacks = slacks;
    prog
}

/// Covariance program (unconstrained or chance-constrained) with handles.
pub struct CovProgram {
    pub problem: ConicProblem,
    pub s: Vec<Vec<MatExpr>>,
    pub l: Vec<Vec<MatExpr>>,
    pub y: Vec<Vec<MatExpr>>,
    slacks: SlackVars,
    /// Diagnostics raised while building (e.g. exhausted norm budgets).
    pub flags: Vec<String>,
    /// `(k, j, row)` for every squared state half-plane row.
    pub state_rows: Vec<(usize, usize, ConstraintId)>,
}

impl CovProgram {
    /// `(L, Y)` at the solution with `S` re-propagated exactly from them.
    pub fn extract(&self, model: &MjlsModel, tau: &MeanTrajectory, r: &SolveResult) -> Result<CovarianceTrajectory, SteeringError> {
        let sym = |m: Matrix| (&m + m.transpose()) * 0.5;
        let l: Vec<Vec<Matrix>> = self.l.iter().map(|row| row.iter().map(|e| r.matrix(e)).collect()).collect();
        let y: Vec<Vec<Matrix>> = self.y.iter().map(|row| row.iter().map(|e| sym(r.matrix(e))).collect()).collect();
        let prop = propagate_covariance(model, tau, &l, &y, &initial_partial_covariances(model))?;
        Ok(prop.trajectory)
    }

    /// `S_k(i)` exactly as returned by the solver.
    pub fn raw_s(&self, r: &SolveResult) -> Vec<Vec<Matrix>> {
        self.s.iter().map(|row| row.iter().map(|e| r.matrix(e)).collect()).collect()
    }

    pub fn slack_values(&self, r: &SolveResult) -> FamilySlacks {
        self.slacks.values(r)
    }
}

/// `Σ_k = Σ_i S_k(i) + spread_k(τ)` as an expression.
fn total_covariance(s: &[MatExpr], tau: &MeanTrajectory, k: usize) -> MatExpr {
    let mut acc = MatExpr::constant(&tau.spread(k));
    for si in s {
        acc = &acc + si;
    }
    acc
}

fn cov_core(model: &MjlsModel, tau: &MeanTrajectory) -> CovProgram {
    let (t, n, nx, nu) = (model.horizon, model.num_modes(), model.n_x, model.n_u);
    let mut p = ConicProblem::new();
    let s: Vec<Vec<MatExpr>> =
        (0..=t).map(|k| (0..n).map(|i| p.symmetric(&format!("S[{k}][{i}]"), nx)).collect()).collect();
    let l: Vec<Vec<MatExpr>> =
        (0..t).map(|k| (0..n).map(|i| p.matrix(&format!("L[{k}][{i}]"), nu, nx)).collect()).collect();
    let y: Vec<Vec<MatExpr>> =
        (0..t).map(|k| (0..n).map(|i| p.symmetric(&format!("Y[{k}][{i}]"), nu)).collect()).collect();
    for (i, s0) in initial_partial_covariances(model).iter().enumerate() {
        p.add_symmetric_equality(&format!("S[0][{i}]"), &s[0][i], &MatExpr::constant(s0)).expect("symmetric");
    }
    for k in 0..t {
        let c = model.bias_at(k);
        let inner: Vec<MatExpr> = (0..n)
            .map(|i| {
                let md = model.mode(k, i);
                let alb = l[k][i].transpose().left_mul(&md.a).right_mul(&md.b.transpose());
                let m = &md.a * &tau.xbar[k][i] + (&md.b * &tau.ubar[k][i] + c);
                let constant = (&m * m.transpose() + &md.g * md.g.transpose()) * tau.rho[k][i];
                let mut e = s[k][i].left_mul(&md.a).right_mul(&md.a.transpose());
                e = &e + &alb;
                e = &e + &alb.transpose();
                e = &e + &y[k][i].left_mul(&md.b).right_mul(&md.b.transpose());
                &e + &constant
            })
            .collect();
        for j in 0..n {
            let mut rhs = MatExpr::zeros(nx, nx);
            for (i, term) in inner.iter().enumerate() {
                rhs = &rhs + &term.scale(model.p(i, j));
            }
            let xb = &tau.xbar[k + 1][j];
            rhs = &rhs - &((xb * xb.transpose()) * tau.rho[k + 1][j]);
            // Exact symmetrization of rounding-level coefficient mismatches.
            let rhs = (&rhs + &rhs.transpose()).scale(0.5);
            p.add_symmetric_equality(&format!("covariance dynamics k={k} j={j}"), &s[k + 1][j], &rhs)
                .expect("symmetric by construction");
        }
        for i in 0..n {
            p.add_psd_block_2x2(&format!("schur k={k} i={i}"), &y[k][i], &l[k][i], &s[k][i]).expect("square blocks");
        }
    }
    let sigma_t = total_covariance(&s[t], tau, t);
    let slack_t = &MatExpr::constant(&model.sigma_f) - &sigma_t;
    p.add_psd("terminal covariance", &slack_t).expect("symmetric");
    for k in 0..t {
        for i in 0..n {
            p.add_objective(&s[k][i].inner(model.q_at(k)));
            p.add_objective(&y[k][i].inner(model.r_at(k)));
        }
    }
    CovProgram { problem: p, s, l, y, slacks: SlackVars::default(), flags: Vec::new(), state_rows: Vec::new() }
}

/// Covariance steering program without chance constraints, for fixed `τ`.
pub fn build_cov_unconstrained(model: &MjlsModel, tau: &MeanTrajectory) -> CovProgram {
    cov_core(model, tau)
}

/// Covariance program with squared-form chance constraints for fixed `τ`.
pub fn build_cov_cc(
    model: &MjlsModel,
    coeffs: &TighteningCoefficients,
    tau: &MeanTrajectory,
    mode: SlackMode,
    mode_conditioned_control: bool,
) -> CovProgram {
    let mut prog = cov_core(model, tau);
    let (t, n, nx, nu) = (model.horizon, model.num_modes(), model.n_x, model.n_u);
    let state_steps = coeffs.state_steps(t);
    let has_control_hp = coeffs.control.iter().any(|c| !c.is_empty());
    let families = [
        (Family::StateHalfplane, if coeffs.state.is_empty() { 0 } else { state_steps.len() }),
        (Family::ControlHalfplane, if has_control_hp { t } else { 0 }),
        (Family::Tube, if coeffs.tube.is_some() { state_steps.len() } else { 0 }),
        (Family::ControlNorm, if coeffs.control_norm.is_empty() { 0 } else { t }),
    ];
    let slacks = SlackVars::new(&mut prog.problem, &families, mode);
    let mut flags = Vec::new();
    for k in state_steps.clone() {
        let sigma = total_covariance(&prog.s[k], tau, k);
        for (j, h) in coeffs.state.iter().enumerate() {
            let a = h.plane.normal_vector();
            let mean_term = h.plane.evaluate(&tau.mu[k]);
            if mean_term > 0.0 {
                flags.push(format!("state halfplane {j} violated by the mean at k={k} ({mean_term:.3e})"));
            }
            let room = (-mean_term).max(0.0);
            let var = sigma.quad_form(&a);
            let coef = h.kappa * h.kappa;
            // ζ − (coef·aᵀΣa − room²) ≥ 0
            let row = &slacks.at(Family::StateHalfplane, k) - &(&(&var * coef) - room * room);
            let id = prog.problem.add_nonneg(&format!("state halfplane k={k} j={j}"), vec![row]);
            prog.state_rows.push((k, j, id));
        }
        if let Some(tube) = &coeffs.tube {
            let rhs = scalar_identity(&(&slacks.at(Family::Tube, k) + tube.bound * tube.bound), nx);
            let m = &rhs - &sigma.scale(tube.factor);
            prog.problem.add_psd(&format!("tube k={k}"), &m).expect("symmetric");
        }
    }
    for k in 0..t {
        for i in 0..n {
            let scale = if mode_conditioned_control { 1.0 / tau.rho[k][i] } else { 1.0 };
            let y = prog.y[k][i].scale(scale);
            for (j, h) in coeffs.control[i].iter().enumerate() {
                let f = h.plane.normal_vector();
                let mean_term = h.plane.evaluate(&tau.ubar[k][i]);
                if mean_term > 0.0 {
                    flags.push(format!("control halfplane {j} violated by the mean at k={k} i={i} ({mean_term:.3e})"));
                }
                let room = (-mean_term).max(0.0);
                let coef = h.kappa * h.kappa;
                let row = &slacks.at(Family::ControlHalfplane, k) - &(&(&y.quad_form(&f) * coef) - room * room);
                prog.problem.add_nonneg(&format!("control halfplane k={k} i={i} j={j}"), vec![row]);
            }
            if let Some(nt) = coeffs.control_norm.get(i) {
                let raw = nt.bound - tau.ubar[k][i].norm();
                if raw < 0.0 {
                    flags.push(format!("control norm budget exhausted by the mean at k={k} i={i} (u_m = {raw:.3e})"));
                }
                let um = raw.max(0.0);
                let rhs = scalar_identity(&(&slacks.at(Family::ControlNorm, k) + um * um), nu);
                let m = &rhs - &y.scale(nt.factor);
                prog.problem.add_psd(&format!("control norm k={k} i={i}"), &m).expect("symmetric");
            }
        }
    }
    prog.slacks = slacks;
    prog.flags = flags;
    prog
}

// ---------------------------------------------------------------------------
// Pipelines

fn solve_stage(
    problem: &ConicProblem,
    stage: &str,
    iteration: usize,
    settings: &SolverSettings,
    stages: &mut Vec<StageRecord>,
) -> Result<SolveResult, SteeringError> {
    let mut r = problem.solve(settings);
    let mut retried = false;
    if r.status == SolveStatus::NumericalTrouble {
        retried = true;
        let first = r.stats.clone();
        r = problem.solve(&settings.relaxed(RETRY_RELAXATION));
        if r.status == SolveStatus::NumericalTrouble {
            stages.push(StageRecord { stage: stage.into(), iteration, status: r.status, retried, stats: r.stats.clone() });
            return Err(SteeringError::NumericalTrouble {
                stage: stage.into(),
                detail: format!(
                    "first attempt: {} (pres {:.2e}, gap {:.2e}); retry: {} (pres {:.2e}, gap {:.2e})",
                    first.backend_status, first.primal_residual, first.gap, r.stats.backend_status, r.stats.primal_residual, r.stats.gap
                ),
            });
        }
    }
    stages.push(StageRecord { stage: stage.into(), iteration, status: r.status, retried, stats: r.stats.clone() });
    match r.status {
        SolveStatus::Optimal => Ok(r),
        SolveStatus::Infeasible => Err(SteeringError::Infeasible { stage: format!("{stage}, iteration {iteration}") }),
        SolveStatus::Unbounded => Err(SteeringError::Unbounded { stage: stage.into() }),
        SolveStatus::NumericalTrouble => unreachable!("handled above"),
    }
}

fn finish(
    model: &MjlsModel,
    status: SteeringStatus,
    tau: MeanTrajectory,
    xi: CovarianceTrajectory,
    iterations: usize,
    mut bookkeeping: Bookkeeping,
) -> Result<SteeringSolution, SteeringError> {
    let policy = match extract_policy(&xi, &tau) {
        Ok(p) => p,
        Err(PropagationError::SingularCovariance { k, i, min_eig }) => {
            bookkeeping.flags.push(format!("S_{k}({i}) singular (min eigenvalue {min_eig:.3e}); gains use a pseudo-inverse"));
            pseudo_inverse_policy(&xi, &tau)
        }
        Err(e) => return Err(e.into()),
    };
    let cost = evaluate_cost(&tau, &xi, model);
    let losslessness = certify_losslessness(&xi);
    Ok(SteeringSolution {
        status,
        tau,
        xi,
        policy,
        cost,
        losslessness,
        slack_history: bookkeeping.slack_history,
        iterations,
        stages: bookkeeping.stages,
        run_log: bookkeeping.run_log,
        flags: bookkeeping.flags,
        covariance_objective: bookkeeping.covariance_objective,
        mean_objective: bookkeeping.mean_objective,
    })
}

fn pseudo_inverse_policy(xi: &CovarianceTrajectory, tau: &MeanTrajectory) -> Policy {
    let t = xi.l.len();
    let gains = (0..t)
        .map(|k| {
            (0..xi.l[k].len())
                .map(|i| {
                    let pinv = xi.s[k][i].clone().pseudo_inverse(crate::propagation::SINGULAR_TOL).expect("eps is positive");
                    &xi.l[k][i] * pinv
                })
                .collect()
        })
        .collect();
    Policy { gains, feedforward: tau.ubar.clone(), anchors: tau.xbar[..t].to_vec() }
}

#[derive(Default)]
struct Bookkeeping {
    slack_history: Vec<SlackReport>,
    stages: Vec<StageRecord>,
    run_log: Vec<serde_json::Value>,
    flags: Vec<String>,
    covariance_objective: f64,
    mean_objective: f64,
}

fn stats_json(s: &SolveStats) -> serde_json::Value {
    // Timings are left out so that logs are reproducible.
    json!({
        "backend": s.backend,
        "backend_status": s.backend_status,
        "iterations": s.iterations,
        "primal_residual": s.primal_residual,
        "gap": s.gap,
        "downgraded": s.downgraded,
    })
}

fn slacks_json(s: &FamilySlacks) -> serde_json::Value {
    json!({
        "state_halfplane": s.family_max(Family::StateHalfplane),
        "control_halfplane": s.family_max(Family::ControlHalfplane),
        "tube": s.family_max(Family::Tube),
        "control_norm": s.family_max(Family::ControlNorm),
    })
}

/// Mean program then covariance program, no chance constraints.
pub fn solve_two_step(model: &MjlsModel, options: &SteeringOptions) -> Result<SteeringSolution, SteeringError> {
    let mut book = Bookkeeping::default();
    let mean = build_mean_unconstrained(model);
    let rm = solve_stage(&mean.problem, "mean", 1, &options.solver, &mut book.stages)?;
    let tau = mean.extract(model, &rm)?;
    let cov = build_cov_unconstrained(model, &tau);
    let rc = solve_stage(&cov.problem, "covariance", 1, &options.solver, &mut book.stages)?;
    let xi = cov.extract(model, &tau, &rc)?;
    book.mean_objective = rm.objective.unwrap_or(f64::NAN);
    book.covariance_objective = rc.objective.unwrap_or(f64::NAN);
    let lossless = certify_losslessness(&xi);
    book.run_log.push(json!({
        "iteration": 1,
        "pipeline": "two_step",
        "mean_objective": book.mean_objective,
        "covariance_objective": book.covariance_objective,
        "mean_solver": stats_json(&rm.stats),
        "covariance_solver": stats_json(&rc.stats),
        "losslessness_max": lossless.max,
    }));
    finish(model, SteeringStatus::Converged, tau, xi, 1, book)
}

/// Alternating slack-penalized refinement: covariance program given the
/// current mean, then mean program given that covariance, escalating the
/// slack weights by `η` until all slacks fall below `tol`.
///
/// Once the slacks vanish, the covariance program is solved once more
/// with the final mean trajectory so that the returned `(τ, Ξ)` pair is
/// mutually consistent; it is accepted only if its own slacks are below
/// `tol`, otherwise the loop continues.
pub fn run_algorithm1(
    model: &MjlsModel,
    cc: &ChanceConstraintSet,
    options: &SteeringOptions,
) -> Result<SteeringSolution, SteeringError> {
    options.check()?;
    let coeffs = allocate_risk(cc, model.n_x, model.n_u, model.num_modes(), options.risk_strategy)?;
    if coeffs.is_empty() {
        return solve_two_step(model, options);
    }
    let mut book = Bookkeeping::default();
    let decisions = active_decisions(&coeffs);
    let mean = build_mean_unconstrained(model);
    let rm = solve_stage(&mean.problem, "mean (initial)", 0, &options.solver, &mut book.stages)?;
    let mut tau = mean.extract(model, &rm)?;
    book.mean_objective = rm.objective.unwrap_or(f64::NAN);
    let mut weights = Weights::uniform(options.alpha_init);
    let mut last_xi = None;
    let mc = options.mode_conditioned_control;

    for iteration in 1..=options.max_iter {
        let cov = build_cov_cc(model, &coeffs, &tau, SlackMode::Penalized(weights), mc);
        let rc = solve_stage(&cov.problem, "covariance", iteration, &options.solver, &mut book.stages)?;
        let xi = cov.extract(model, &tau, &rc)?;
        let zeta = cov.slack_values(&rc);

        let mean = build_mean_cc(model, &coeffs, &xi, SlackMode::Penalized(weights), mc);
        let rm = solve_stage(&mean.problem, "mean", iteration, &options.solver, &mut book.stages)?;
        let tau_next = mean.extract(model, &rm)?;
        let beta = mean.slack_values(&rm);
        book.mean_objective = rm.objective.unwrap_or(f64::NAN);
        book.covariance_objective = rc.objective.unwrap_or(f64::NAN);

        let report = SlackReport { iteration, weights, beta: beta.clone(), zeta: zeta.clone() };
        let max_slack = report.max();
        let mut entry = json!({
            "iteration": iteration,
            "weights": weights.0,
            "beta_inf": slacks_json(&beta),
            "zeta_inf": slacks_json(&zeta),
            "max_slack": max_slack,
            "covariance_objective": book.covariance_objective,
            "mean_objective": book.mean_objective,
            "covariance_solver": stats_json(&rc.stats),
            "mean_solver": stats_json(&rm.stats),
            "losslessness_max": certify_losslessness(&xi).max,
            "decisions": decisions,
            "flags": cov.flags,
        });
        book.slack_history.push(report);
        tau = tau_next;

        if max_slack <= options.tol {
            let check = build_cov_cc(model, &coeffs, &tau, SlackMode::Penalized(weights), mc);
            let rcc = solve_stage(&check.problem, "covariance (final)", iteration, &options.solver, &mut book.stages)?;
            let xi_final = check.extract(model, &tau, &rcc)?;
            let zeta_final = check.slack_values(&rcc);
            entry["final_zeta_inf"] = slacks_json(&zeta_final);
            entry["final_losslessness_max"] = json!(certify_losslessness(&xi_final).max);
            if zeta_final.max() <= options.tol {
                entry["converged"] = json!(true);
                book.run_log.push(entry);
                book.covariance_objective = rcc.objective.unwrap_or(f64::NAN);
                book.flags.extend(check.flags);
                return finish(model, SteeringStatus::Converged, tau, xi_final, iteration, book);
            }
            entry["converged"] = json!(false);
            escalate(&mut weights, &zeta_final, &FamilySlacks::default(), options);
        } else {
            entry["converged"] = json!(false);
            escalate(&mut weights, &zeta, &beta, options);
        }
        book.run_log.push(entry);
        last_xi = Some(xi);
    }
    // Pair the last mean iterate with a covariance solved for it.
    let cov = build_cov_cc(model, &coeffs, &tau, SlackMode::Penalized(weights), mc);
    let xi = match solve_stage(&cov.problem, "covariance (final)", options.max_iter, &options.solver, &mut book.stages) {
        Ok(r) => cov.extract(model, &tau, &r)?,
        Err(_) => last_xi.expect("at least one iteration ran"),
    };
    finish(model, SteeringStatus::MaxIterations, tau, xi, options.max_iter, book)
}

fn escalate(weights: &mut Weights, zeta: &FamilySlacks, beta: &FamilySlacks, options: &SteeringOptions) {
    for f in FAMILIES {
        let hot = zeta.family_max(f).max(beta.family_max(f)) > options.tol;
        if !options.per_family_escalation || hot {
            weights.0[f as usize] *= options.eta;
        }
    }
}

/// Modelling choices that are in effect for this constraint set.
fn active_decisions(coeffs: &TighteningCoefficients) -> Vec<&'static str> {
    let mut out = Vec::new();
    if coeffs.tube.is_some() {
        out.push("tube rows carry the d_max^2 offset: (n_x/eps) Sigma_k <= (d_max^2 + zeta) I");
    }
    if coeffs.control.iter().any(|c| !c.is_empty()) {
        out.push("control half-plane rows square the mode-conditioned mean f^T ubar_k(i) + g");
    }
    out
}
