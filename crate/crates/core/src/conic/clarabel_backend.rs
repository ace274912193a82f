use clarabel::algebra::CscMatrix;
use clarabel::solver::{DefaultSettingsBuilder, DefaultSolver, IPSolver, SolverStatus, SupportedConeT};

use super::{BackendOutput, Cone, SolveStatus, SolverSettings, StandardForm};
use crate::linalg::{Matrix, Vector};

/// The backend is asked for more than the contract so that its answers
/// clear the independent re-check.
const BACKEND_MARGIN: f64 = 0.1;

fn to_csc(m: &Matrix, upper_only: bool) -> CscMatrix<f64> {
    let (rows, cols) = m.shape();
    let mut colptr = Vec::with_capacity(cols + 1);
    let mut rowval = Vec::new();
    let mut nzval = Vec::new();
    colptr.push(0);
    for j in 0..cols {
        let end = if upper_only { (j + 1).min(rows) } else { rows };
        for i in 0..end {
            let v = m[(i, j)];
            if v != 0.0 {
                rowval.push(i);
                nzval.push(v);
            }
        }
        colptr.push(rowval.len());
    }
    CscMatrix::new(rows, cols, colptr, rowval, nzval)
}

fn to_cone(c: &Cone) -> SupportedConeT<f64> {
    match *c {
        Cone::Zero(n) => SupportedConeT::ZeroConeT(n),
        Cone::Nonneg(n) => SupportedConeT::NonnegativeConeT(n),
        Cone::SecondOrder(n) => SupportedConeT::SecondOrderConeT(n),
        Cone::Psd(n) => SupportedConeT::PSDTriangleConeT(n),
    }
}

pub(crate) fn solve(sf: &StandardForm, settings: &SolverSettings) -> BackendOutput {
    let (m, n) = (sf.num_rows(), sf.num_vars());
    let failed = |status: String| BackendOutput {
        status: SolveStatus::NumericalTrouble,
        x: Vector::zeros(n),
        s: Vector::zeros(m),
        z: Vector::zeros(m),
        iterations: 0,
        backend_status: status,
        dual_objective: None,
    };
    let opts = match DefaultSettingsBuilder::default()
        .verbose(settings.verbose)
        .max_iter(settings.max_iter)
        .tol_feas(BACKEND_MARGIN * settings.feas_tol)
        .tol_gap_abs(BACKEND_MARGIN * settings.gap_tol)
        .tol_gap_rel(BACKEND_MARGIN * settings.gap_tol)
        .presolve_enable(false)
        .build()
    {
        Ok(o) => o,
        Err(e) => return failed(format!("settings: {e}")),
    };
    let p = to_csc(&sf.p, true);
    let a = to_csc(&sf.a, false);
    let cones: Vec<SupportedConeT<f64>> = sf.cones.iter().map(to_cone).collect();
    let mut solver = match DefaultSolver::new(&p, sf.q.as_slice(), &a, sf.b.as_slice(), &cones, opts) {
        Ok(s) => s,
        Err(e) => return failed(format!("setup: {e}")),
    };
    solver.solve();
    let sol = &solver.solution;
    let status = match sol.status {
        SolverStatus::Solved => SolveStatus::Optimal,
        SolverStatus::PrimalInfeasible => SolveStatus::Infeasible,
        SolverStatus::DualInfeasible => SolveStatus::Unbounded,
        _ => SolveStatus::NumericalTrouble,
    };
    BackendOutput {
        status,
        x: Vector::from_column_slice(&sol.x),
        s: Vector::from_column_slice(&sol.s),
        z: Vector::from_column_slice(&sol.z),
        iterations: sol.iterations,
        backend_status: format!("{:?}", sol.status),
        dual_objective: None,
    }
}
