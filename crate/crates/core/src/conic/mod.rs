//! A small conic-program IR.
//!
//! Problems are built from variable blocks and affine expressions, compiled
//! to the standard form
//!
//! ```text
//! minimize   ½ xᵀ P x + qᵀ x
//! subject to A x + s = b,   s ∈ K
//! ```
//!
//! with `K` a product of zero, nonnegative, second-order and PSD cones, and
//! handed to a backend. PSD blocks use the scaled upper-triangle vectorization
//! ([`svec`]) so that `⟨svec X, svec Y⟩ = Tr(XY)`.
//!
//! Every `optimal` result returned by [`ConicProblem::solve`] has been
//! re-checked against the primal residual and duality gap tolerances in
//! [`SolverSettings`]; a backend claim that fails the check is downgraded to
//! [`SolveStatus::NumericalTrouble`].

mod clarabel_backend;
mod expr;
pub mod native;

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use expr::{LinExpr, MatExpr};

use crate::linalg::{Matrix, Vector};

/// Storage index of `X[i, j]` (`i ≤ j`) in [`svec`] order.
pub fn svec_index(i: usize, j: usize) -> usize {
    let (i, j) = if i <= j { (i, j) } else { (j, i) };
    j * (j + 1) / 2 + i
}

/// Length of the svec of an `n × n` symmetric matrix.
pub fn svec_len(n: usize) -> usize {
    n * (n + 1) / 2
}

/// Side of the symmetric matrix whose svec has length `len`.
pub fn svec_side(len: usize) -> Option<usize> {
    let n = ((((8 * len + 1) as f64).sqrt() - 1.0) / 2.0).round() as usize;
    (svec_len(n) == len).then_some(n)
}

/// Upper triangle, column-major, off-diagonal entries scaled by `√2`.
pub fn svec(m: &Matrix) -> Vector {
    let n = m.nrows();
    let mut out = Vector::zeros(svec_len(n));
    for j in 0..n {
        for i in 0..=j {
            let v = if i == j { m[(i, j)] } else { 0.5 * (m[(i, j)] + m[(j, i)]) * std::f64::consts::SQRT_2 };
            out[svec_index(i, j)] = v;
        }
    }
    out
}

/// Inverse of [`svec`].
pub fn smat(v: &Vector) -> Matrix {
    let n = svec_side(v.len()).expect("length is not triangular");
    let mut m = Matrix::zeros(n, n);
    for j in 0..n {
        for i in 0..=j {
            let x = v[svec_index(i, j)];
            if i == j {
                m[(i, i)] = x;
            } else {
                m[(i, j)] = x / std::f64::consts::SQRT_2;
                m[(j, i)] = m[(i, j)];
            }
        }
    }
    m
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BlockKind {
    Scalar,
    Vector(usize),
    /// Symmetric `n × n`; stores the `n(n+1)/2` upper-triangle entries unscaled.
    Symmetric(usize),
    Matrix { rows: usize, cols: usize },
}

impl BlockKind {
    pub fn size(&self) -> usize {
        match *self {
            BlockKind::Scalar => 1,
            BlockKind::Vector(n) => n,
            BlockKind::Symmetric(n) => svec_len(n),
            BlockKind::Matrix { rows, cols } => rows * cols,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Block {
    pub name: String,
    pub kind: BlockKind,
    pub offset: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Cone {
    Zero(usize),
    Nonneg(usize),
    /// `{(t, x) : ‖x‖ ≤ t}`, dimension including `t`.
    SecondOrder(usize),
    /// Side length; the cone occupies `n(n+1)/2` svec rows.
    Psd(usize),
}

impl Cone {
    pub fn dim(&self) -> usize {
        match *self {
            Cone::Zero(n) | Cone::Nonneg(n) | Cone::SecondOrder(n) => n,
            Cone::Psd(n) => svec_len(n),
        }
    }
}

/// Handle to a constraint group; indexes its dual values.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ConstraintId(pub usize);

#[derive(Clone, Debug)]
struct ConstraintGroup {
    name: String,
    cone: Cone,
    /// Each row is an affine expression that must lie in the cone.
    rows: Vec<LinExpr>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    Unbounded,
    NumericalTrouble,
}

impl SolveStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            SolveStatus::Optimal => "optimal",
            SolveStatus::Infeasible => "infeasible",
            SolveStatus::Unbounded => "unbounded",
            SolveStatus::NumericalTrouble => "numerical_trouble",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    Clarabel,
    Native,
}

impl Backend {
    pub const ENV: &'static str = "COVSTEER_BACKEND";

    /// Reads [`Backend::ENV`]; anything other than `native` selects Clarabel.
    pub fn from_env() -> Self {
        match std::env::var(Self::ENV).map(|s| s.to_ascii_lowercase()) {
            Ok(s) if s == "native" => Backend::Native,
            _ => Backend::Clarabel,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Backend::Clarabel => "clarabel",
            Backend::Native => "native",
        }
    }
}

impl std::str::FromStr for Backend {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "clarabel" => Ok(Backend::Clarabel),
            "native" => Ok(Backend::Native),
            other => Err(format!("unknown backend `{other}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverSettings {
    pub backend: Backend,
    pub feas_tol: f64,
    pub gap_tol: f64,
    pub max_iter: u32,
    pub verbose: bool,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self { backend: Backend::from_env(), feas_tol: 1e-8, gap_tol: 1e-8, max_iter: 200, verbose: false }
    }
}

impl SolverSettings {
    pub fn with_backend(backend: Backend) -> Self {
        Self { backend, ..Self::default() }
    }

    pub fn relaxed(&self, factor: f64) -> Self {
        Self { feas_tol: self.feas_tol * factor, gap_tol: self.gap_tol * factor, ..self.clone() }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SolveStats {
    pub backend: String,
    pub iterations: u32,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub gap: f64,
    pub solve_seconds: f64,
    /// Set when the backend reported success but the contract check failed.
    pub downgraded: bool,
    pub backend_status: String,
}

#[derive(Clone, Debug)]
pub struct SolveResult {
    pub status: SolveStatus,
    /// Primal solution; present only when `status` is optimal.
    pub x: Option<Vector>,
    /// Objective including the constant term; present only when optimal.
    pub objective: Option<f64>,
    duals: Vec<Vec<f64>>,
    pub stats: SolveStats,
}

impl SolveResult {
    pub fn is_optimal(&self) -> bool {
        self.status == SolveStatus::Optimal
    }

    /// Value of an affine expression at the solution.
    ///
    /// # Panics
    /// If the result is not optimal.
    pub fn value(&self, e: &LinExpr) -> f64 {
        e.eval(self.x.as_ref().expect("no primal solution"))
    }

    pub fn values(&self, es: &[LinExpr]) -> Vector {
        Vector::from_iterator(es.len(), es.iter().map(|e| self.value(e)))
    }

    pub fn matrix(&self, m: &MatExpr) -> Matrix {
        m.eval(self.x.as_ref().expect("no primal solution"))
    }

    /// Dual variables of a constraint group, in row order (svec for PSD).
    pub fn dual(&self, id: ConstraintId) -> &[f64] {
        self.duals.get(id.0).map(Vec::as_slice).unwrap_or(&[])
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ConicError {
    #[error("matrix expression is not symmetric (max mismatch {0:.3e})")]
    NotSymmetric(f64),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("quadratic weight is not symmetric positive semidefinite")]
    BadWeight,
}

/// Problem in standard form. `a` is dense (`m × n`); `p` is dense symmetric.
#[derive(Clone, Debug)]
pub struct StandardForm {
    pub p: Matrix,
    pub q: Vector,
    pub constant: f64,
    pub a: Matrix,
    pub b: Vector,
    pub cones: Vec<Cone>,
}

impl StandardForm {
    pub fn num_vars(&self) -> usize {
        self.q.len()
    }

    pub fn num_rows(&self) -> usize {
        self.b.len()
    }

    pub fn objective(&self, x: &Vector) -> f64 {
        0.5 * x.dot(&(&self.p * x)) + self.q.dot(x) + self.constant
    }
}

/// Raw backend output, before the contract check.
#[derive(Clone, Debug)]
pub(crate) struct BackendOutput {
    pub status: SolveStatus,
    pub x: Vector,
    pub s: Vector,
    pub z: Vector,
    pub iterations: u32,
    pub backend_status: String,
    /// Valid dual bound when the backend solved an equivalent reformulation
    /// whose dual objective is not `−½xᵀPx − bᵀz`.
    pub dual_objective: Option<f64>,
}

#[derive(Clone, Debug, Default)]
pub struct ConicProblem {
    blocks: Vec<Block>,
    num_vars: usize,
    groups: Vec<ConstraintGroup>,
    linear: LinExpr,
    /// Quadratic terms `vᵀ W v`.
    quadratic: Vec<(Vec<LinExpr>, Matrix)>,
}

impl ConicProblem {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn num_vars(&self) -> usize {
        self.num_vars
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    fn push_block(&mut self, name: &str, kind: BlockKind) -> usize {
        let offset = self.num_vars;
        self.blocks.push(Block { name: name.to_string(), kind, offset });
        self.num_vars += kind.size();
        offset
    }

    pub fn scalar(&mut self, name: &str) -> LinExpr {
        let off = self.push_block(name, BlockKind::Scalar);
        LinExpr::var(off)
    }

    pub fn vector(&mut self, name: &str, n: usize) -> Vec<LinExpr> {
        let off = self.push_block(name, BlockKind::Vector(n));
        (0..n).map(|i| LinExpr::var(off + i)).collect()
    }

    /// Symmetric matrix variable; `X[i, j]` and `X[j, i]` share one entry.
    pub fn symmetric(&mut self, name: &str, n: usize) -> MatExpr {
        let off = self.push_block(name, BlockKind::Symmetric(n));
        MatExpr::from_fn(n, n, |i, j| LinExpr::var(off + svec_index(i, j)))
    }

    pub fn matrix(&mut self, name: &str, rows: usize, cols: usize) -> MatExpr {
        let off = self.push_block(name, BlockKind::Matrix { rows, cols });
        MatExpr::from_fn(rows, cols, |i, j| LinExpr::var(off + j * rows + i))
    }

    fn push_group(&mut self, name: &str, cone: Cone, rows: Vec<LinExpr>) -> ConstraintId {
        debug_assert_eq!(cone.dim(), rows.len());
        self.groups.push(ConstraintGroup { name: name.to_string(), cone, rows });
        ConstraintId(self.groups.len() - 1)
    }

    /// `e = 0` for every expression.
    pub fn add_equalities(&mut self, name: &str, es: Vec<LinExpr>) -> ConstraintId {
        let n = es.len();
        self.push_group(name, Cone::Zero(n), es)
    }

    pub fn add_equality(&mut self, name: &str, e: LinExpr) -> ConstraintId {
        self.add_equalities(name, vec![e])
    }

    /// Entrywise `lhs = rhs` for matrices of equal shape.
    pub fn add_matrix_equality(&mut self, name: &str, lhs: &MatExpr, rhs: &MatExpr) -> Result<ConstraintId, ConicError> {
        if lhs.shape() != rhs.shape() {
            return Err(ConicError::Shape(format!("{:?} vs {:?}", lhs.shape(), rhs.shape())));
        }
        let d = lhs - rhs;
        Ok(self.add_equalities(name, d.entries().to_vec()))
    }

    /// Symmetric `lhs = rhs`, one row per upper-triangle entry.
    pub fn add_symmetric_equality(&mut self, name: &str, lhs: &MatExpr, rhs: &MatExpr) -> Result<ConstraintId, ConicError> {
        let d = lhs - rhs;
        check_symmetric(&d)?;
        let n = d.rows();
        let mut rows = Vec::with_capacity(svec_len(n));
        for j in 0..n {
            for i in 0..=j {
                rows.push(d.at(i, j).clone());
            }
        }
        Ok(self.add_equalities(name, rows))
    }

    /// `e ≥ 0` for every expression.
    pub fn add_nonneg(&mut self, name: &str, es: Vec<LinExpr>) -> ConstraintId {
        let n = es.len();
        self.push_group(name, Cone::Nonneg(n), es)
    }

    /// `‖x‖₂ ≤ t`.
    pub fn add_soc(&mut self, name: &str, t: LinExpr, x: Vec<LinExpr>) -> ConstraintId {
        let mut rows = Vec::with_capacity(x.len() + 1);
        rows.push(t);
        rows.extend(x);
        let n = rows.len();
        self.push_group(name, Cone::SecondOrder(n), rows)
    }

    /// `M ⪰ 0` for a symmetric matrix expression.
    pub fn add_psd(&mut self, name: &str, m: &MatExpr) -> Result<ConstraintId, ConicError> {
        check_symmetric(m)?;
        let n = m.rows();
        let mut rows = Vec::with_capacity(svec_len(n));
        for j in 0..n {
            for i in 0..=j {
                let e = m.at(i, j);
                rows.push(if i == j { e.clone() } else { e * std::f64::consts::SQRT_2 });
            }
        }
        Ok(self.push_group(name, Cone::Psd(n), rows))
    }

    /// `[[A, B], [Bᵀ, C]] ⪰ 0`.
    pub fn add_psd_block_2x2(&mut self, name: &str, a: &MatExpr, b: &MatExpr, c: &MatExpr) -> Result<ConstraintId, ConicError> {
        if a.rows() != b.rows() || c.rows() != b.cols() {
            return Err(ConicError::Shape("2×2 block dimensions".into()));
        }
        let m = MatExpr::block_2x2(a, b, &b.transpose(), c);
        self.add_psd(name, &m)
    }

    /// Adds a linear term to the objective.
    pub fn add_objective(&mut self, e: &LinExpr) {
        self.linear = &self.linear + e;
    }

    /// Adds `vᵀ W v` to the objective, `W` symmetric PSD.
    pub fn add_quadratic(&mut self, v: Vec<LinExpr>, w: &Matrix) -> Result<(), ConicError> {
        if w.nrows() != v.len() || w.ncols() != v.len() {
            return Err(ConicError::Shape("quadratic weight".into()));
        }
        if crate::linalg::asymmetry(w) > 1e-12 || (w.nrows() > 0 && crate::linalg::min_eigenvalue(w) < -1e-12) {
            return Err(ConicError::BadWeight);
        }
        self.quadratic.push((v, w.clone()));
        Ok(())
    }

    /// Compiles to dense standard form.
    pub fn standard_form(&self) -> StandardForm {
        let n = self.num_vars;
        let mut p = Matrix::zeros(n, n);
        let mut q = Vector::zeros(n);
        let mut constant = self.linear.constant();
        for (idx, c) in self.linear.terms() {
            q[*idx] += c;
        }
        for (v, w) in &self.quadratic {
            // v = G x + h:  vᵀWv = xᵀ GᵀWG x + 2 hᵀWG x + hᵀWh.
            let k = v.len();
            let mut g = Matrix::zeros(k, n);
            let mut h = Vector::zeros(k);
            for (r, e) in v.iter().enumerate() {
                h[r] = e.constant();
                for (idx, c) in e.terms() {
                    g[(r, *idx)] += c;
                }
            }
            let wg = w * &g;
            p += g.transpose() * &wg * 2.0;
            q += wg.transpose() * &h * 2.0;
            constant += h.dot(&(w * &h));
        }
        let p = (&p + p.transpose()) * 0.5;
        let m: usize = self.groups.iter().map(|g| g.cone.dim()).sum();
        let mut a = Matrix::zeros(m, n);
        let mut b = Vector::zeros(m);
        let mut cones = Vec::with_capacity(self.groups.len());
        let mut row = 0;
        for g in &self.groups {
            for e in &g.rows {
                // e = G x + h ∈ K  ⇔  (−G) x + s = h.
                b[row] = e.constant();
                for (idx, c) in e.terms() {
                    a[(row, *idx)] -= c;
                }
                row += 1;
            }
            cones.push(g.cone);
        }
        StandardForm { p, q, constant, a, b, cones }
    }

    pub fn solve(&self, settings: &SolverSettings) -> SolveResult {
        let sf = self.standard_form();
        let start = Instant::now();
        let out = match settings.backend {
            Backend::Clarabel => clarabel_backend::solve(&sf, settings),
            Backend::Native => native::solve(&sf, settings),
        };
        let elapsed = start.elapsed().as_secs_f64();
        self.finish(&sf, out, settings, elapsed)
    }

    fn finish(&self, sf: &StandardForm, out: BackendOutput, settings: &SolverSettings, elapsed: f64) -> SolveResult {
        let check = contract_check(sf, &out.x, &out.s, &out.z, out.dual_objective);
        let mut stats = SolveStats {
            backend: settings.backend.as_str().to_string(),
            iterations: out.iterations,
            primal_residual: check.primal_residual,
            dual_residual: check.dual_residual,
            gap: check.gap,
            solve_seconds: elapsed,
            downgraded: false,
            backend_status: out.backend_status.clone(),
        };
        let mut status = out.status;
        if status == SolveStatus::Optimal
            && !(check.primal_residual <= settings.feas_tol
                && check.gap <= settings.gap_tol
                && check.cone_violation <= settings.feas_tol)
        {
            status = SolveStatus::NumericalTrouble;
            stats.downgraded = true;
        }
        let duals = self.split_duals(&out.z);
        if status == SolveStatus::Optimal {
            let objective = sf.objective(&out.x);
            SolveResult { status, x: Some(out.x), objective: Some(objective), duals, stats }
        } else {
            SolveResult { status, x: None, objective: None, duals, stats }
        }
    }

    fn split_duals(&self, z: &Vector) -> Vec<Vec<f64>> {
        let mut out = Vec::with_capacity(self.groups.len());
        let mut row = 0;
        for g in &self.groups {
            let d = g.cone.dim();
            if z.len() >= row + d {
                out.push(z.rows(row, d).iter().copied().collect());
            } else {
                out.push(Vec::new());
            }
            row += d;
        }
        out
    }

    /// Plain-text listing of blocks, objective and constraint rows.
    pub fn debug_dump(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "variables: {}", self.num_vars);
        for b in &self.blocks {
            let _ = writeln!(s, "  block {} {:?} offset {} size {}", b.name, b.kind, b.offset, b.kind.size());
        }
        let _ = writeln!(s, "objective:");
        let _ = writeln!(s, "  linear {}", self.linear);
        for (v, w) in &self.quadratic {
            let _ = writeln!(s, "  quadratic over {} terms, weight diag {:?}", v.len(), w.diagonal().as_slice());
            for e in v {
                let _ = writeln!(s, "    v: {e}");
            }
        }
        let _ = writeln!(s, "constraints: {}", self.groups.len());
        for (gi, g) in self.groups.iter().enumerate() {
            let _ = writeln!(s, "  [{gi}] {} {:?}", g.name, g.cone);
            for e in &g.rows {
                let _ = writeln!(s, "    {e}");
            }
        }
        s
    }
}

fn check_symmetric(m: &MatExpr) -> Result<(), ConicError> {
    if m.rows() != m.cols() {
        return Err(ConicError::Shape(format!("{}×{} is not square", m.rows(), m.cols())));
    }
    let mut worst = 0.0_f64;
    for i in 0..m.rows() {
        for j in (i + 1)..m.cols() {
            worst = worst.max((m.at(i, j) - m.at(j, i)).max_abs_coefficient());
        }
    }
    if worst > 1e-12 {
        Err(ConicError::NotSymmetric(worst))
    } else {
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ContractCheck {
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub gap: f64,
    pub cone_violation: f64,
}

/// Relative primal residual, dual residual, duality gap and slack cone
/// violation of a candidate `(x, s, z)`.
pub(crate) fn contract_check(
    sf: &StandardForm,
    x: &Vector,
    s: &Vector,
    z: &Vector,
    dual_objective: Option<f64>,
) -> ContractCheck {
    let inf = |v: &Vector| v.amax();
    if x.len() != sf.num_vars() || s.len() != sf.num_rows() || z.len() != sf.num_rows() {
        return ContractCheck {
            primal_residual: f64::INFINITY,
            dual_residual: f64::INFINITY,
            gap: f64::INFINITY,
            cone_violation: f64::INFINITY,
        };
    }
    let r = &sf.a * x + s - &sf.b;
    let primal_residual = inf(&r) / (1.0f64).max(inf(&sf.b) + inf(x) + inf(s));
    let px = &sf.p * x;
    let rd = &px + &sf.q + sf.a.transpose() * z;
    let dual_residual = inf(&rd) / (1.0f64).max(inf(&sf.q) + inf(&px) + inf(z));
    let xpx = x.dot(&px);
    let p = 0.5 * xpx + sf.q.dot(x);
    let d = dual_objective.unwrap_or(-0.5 * xpx - sf.b.dot(z));
    let gap = (p - d).abs() / (1.0f64).max(p.abs().min(d.abs()));
    let scale = (1.0f64).max(inf(s));
    let cone_violation = cone_violation(&sf.cones, s) / scale;
    ContractCheck { primal_residual, dual_residual, gap, cone_violation }
}

/// Distance-like measure of how far `v` is outside the product cone.
pub(crate) fn cone_violation(cones: &[Cone], v: &Vector) -> f64 {
    let mut worst = 0.0_f64;
    let mut row = 0;
    for cone in cones {
        let d = cone.dim();
        let seg = v.rows(row, d);
        let viol = match *cone {
            Cone::Zero(_) => seg.amax(),
            Cone::Nonneg(_) => seg.iter().fold(0.0_f64, |a, &x| a.max(-x)),
            Cone::SecondOrder(_) => (seg.rows(1, d - 1).norm() - seg[0]).max(0.0),
            Cone::Psd(_) => (-crate::linalg::min_eigenvalue(&smat(&seg.into_owned()))).max(0.0),
        };
        worst = worst.max(viol);
        row += d;
    }
    worst
}

#[cfg(test)]
mod tests;
