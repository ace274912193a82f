//! The two-mode, two-state benchmark instance used throughout the examples
//! and the acceptance suite.
//!
//! Cost weights are not part of the published instance; identity weights
//! `Q_k = I`, `R_k = I` are used here.

use crate::linalg::{Matrix, Vector};
use crate::model::{
    ChanceConstraintSet, ControlNorm, HalfPlane, MarkovChain, MjlsModel, ModeDynamics, PerStep,
};

/// Horizon of the benchmark.
pub const HORIZON: usize = 6;
/// Risk level of every benchmark chance constraint.
pub const RISK: f64 = 0.05;
/// Control-norm bound of the benchmark.
pub const U_MAX: f64 = 8.0;

fn m2(a: f64, b: f64, c: f64, d: f64) -> Matrix {
    Matrix::from_row_slice(2, 2, &[a, b, c, d])
}

pub fn two_mode_dynamics() -> Vec<ModeDynamics> {
    vec![
        ModeDynamics { a: m2(-0.2, 1.0, -0.1, 0.1), b: m2(1.0, 0.5, 2.0, 0.0), g: m2(1.0, 0.0, 0.0, 1.0) },
        ModeDynamics { a: m2(0.2, 0.1, -0.5, 0.1), b: m2(0.0, 1.0, -1.0, 2.0), g: m2(0.5, 0.0, 0.0, 0.5) },
    ]
}

/// The benchmark MJLS without chance constraints.
pub fn two_mode_model() -> MjlsModel {
    MjlsModel {
        n_x: 2,
        n_u: 2,
        n_w: 2,
        horizon: HORIZON,
        modes: PerStep::Constant(two_mode_dynamics()),
        chain: MarkovChain {
            transition: m2(0.8, 0.2, 0.9, 0.1),
            rho0: Vector::from_vec(vec![0.3, 0.7]),
        },
        bias: PerStep::Constant(Vector::from_vec(vec![0.01, 0.01])),
        q_weight: PerStep::Constant(Matrix::identity(2, 2)),
        r_weight: PerStep::Constant(Matrix::identity(2, 2)),
        mu0: Vector::from_vec(vec![25.0, 40.0]),
        sigma0: Matrix::identity(2, 2) * 6.0,
        mu_f: Vector::from_vec(vec![5.0, 10.0]),
        sigma_f: Matrix::identity(2, 2) * 3.0,
    }
}

/// `P(x[2] ≥ −10) ≥ 0.95` and `P(‖u_k(i)‖ ≤ 8) ≥ 0.95` in both modes.
pub fn two_mode_constraints() -> ChanceConstraintSet {
    ChanceConstraintSet {
        state_halfplanes: vec![HalfPlane::new(vec![0.0, -1.0], -10.0)],
        state_risk: RISK,
        control_norm: Some(ControlNorm { u_max: vec![U_MAX; 2], risk: vec![RISK; 2] }),
        ..ChanceConstraintSet::default()
    }
}

/// Only the control-norm constraint (the "unconstrained state" variant).
pub fn two_mode_control_only_constraints() -> ChanceConstraintSet {
    ChanceConstraintSet {
        control_norm: Some(ControlNorm { u_max: vec![U_MAX; 2], risk: vec![RISK; 2] }),
        ..ChanceConstraintSet::default()
    }
}
