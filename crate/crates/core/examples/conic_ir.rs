//! Builds a small semidefinite program with the conic IR and solves it on
//! both backends.

use covsteer::conic::{Backend, ConicProblem, LinExpr, MatExpr, SolverSettings};
use covsteer::linalg::Matrix;

fn main() {
    // min t  s.t.  t·I − C ⪰ 0,  ‖(x, 1)‖ ≤ t,  x ≥ 1
    let c = Matrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
    let mut p = ConicProblem::new();
    let t = p.scalar("t");
    let x = p.scalar("x");
    let ti = MatExpr::from_fn(2, 2, |i, j| if i == j { t.clone() } else { LinExpr::zero() });
    p.add_psd("tI - C", &(&ti - &c)).expect("symmetric");
    p.add_soc("norm", t.clone(), vec![x.clone(), LinExpr::from(1.0)]);
    p.add_nonneg("x >= 1", vec![&x - 1.0]);
    p.add_objective(&t);
    for backend in [Backend::Clarabel, Backend::Native] {
        let r = p.solve(&SolverSettings::with_backend(backend));
        println!(
            "{:>8}: {} objective {:.9} x = {:.6} ({} iterations)",
            backend.as_str(),
            r.status.as_str(),
            r.objective.unwrap_or(f64::NAN),
            r.value(&x),
            r.stats.iterations
        );
    }
}
