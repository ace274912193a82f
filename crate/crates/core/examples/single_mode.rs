//! With a single mode the problem is classical covariance steering; the
//! terminal covariance bound is met exactly in the directions where it binds.

use covsteer::linalg::{sym_eigenvalues, Matrix, Vector};
use covsteer::model::{MarkovChain, MjlsModel, ModeDynamics, PerStep};
use covsteer::steering::solve_two_step;
use covsteer::SteeringOptions;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let m2 = |a, b, c, d| Matrix::from_row_slice(2, 2, &[a, b, c, d]);
    let model = MjlsModel {
        n_x: 2,
        n_u: 1,
        n_w: 2,
        horizon: 8,
        modes: PerStep::Constant(vec![ModeDynamics {
            a: m2(1.0, 0.1, 0.0, 1.0),
            b: Matrix::from_column_slice(2, 1, &[0.005, 0.1]),
            g: Matrix::identity(2, 2) * 0.05,
        }]),
        chain: MarkovChain { transition: Matrix::identity(1, 1), rho0: Vector::from_vec(vec![1.0]) },
        bias: PerStep::Constant(Vector::zeros(2)),
        q_weight: PerStep::Constant(Matrix::identity(2, 2) * 0.1),
        r_weight: PerStep::Constant(Matrix::identity(1, 1)),
        mu0: Vector::from_vec(vec![1.0, 0.0]),
        sigma0: Matrix::identity(2, 2) * 0.5,
        mu_f: Vector::zeros(2),
        sigma_f: Matrix::identity(2, 2) * 0.2,
    };
    let sol = solve_two_step(&model, &SteeringOptions::default())?;
    println!("cost {:.6}", sol.cost.total);
    println!("eigenvalues of Sigma_f - Sigma_T: {:.4?}", sym_eigenvalues(&(&model.sigma_f - &sol.xi.sigma[model.horizon])).as_slice());
    for (k, g) in sol.policy.gains.iter().enumerate() {
        println!("K_{k} = {:.4?}", g[0].as_slice());
    }
    Ok(())
}
