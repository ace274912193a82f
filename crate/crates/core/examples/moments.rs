//! Exact moment propagation of the benchmark under a hand-written policy,
//! including the covariance response to a mean-only change.

use covsteer::benchmark;
use covsteer::linalg::{Matrix, Vector};
use covsteer::propagation::{evaluate_cost, propagate_mode_distribution, propagate_policy};
use covsteer::Policy;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let model = benchmark::two_mode_model();
    let rho = propagate_mode_distribution(&model.chain, model.horizon);
    for (k, r) in rho.iter().enumerate() {
        println!("rho_{k} = [{:.4}, {:.4}]", r[0], r[1]);
    }

    let gains = vec![vec![Matrix::identity(2, 2) * -0.2; 2]; model.horizon];
    let ubar = vec![vec![Vector::zeros(2); 2]; model.horizon];
    let policy = Policy::with_gains(&model, ubar.clone(), gains.clone())?;
    let (tau, xi) = propagate_policy(&model, &policy)?;
    let t = model.horizon;
    println!("mu_T = {:.4?}", tau.mu[t].as_slice());
    println!("Sigma_T = {:.4?}", xi.sigma[t].as_slice());
    println!("cost = {:?}", evaluate_cost(&tau, &xi, &model));

    // Shifting the feedforward changes the conditional means, and through
    // the mixture spread the total covariance as well.
    let shifted: Vec<Vec<Vector>> = ubar.iter().map(|r| r.iter().map(|u| u.add_scalar(1.0)).collect()).collect();
    let (_, xi2) = propagate_policy(&model, &Policy::with_gains(&model, shifted, gains)?)?;
    println!("|dSigma_T| after a feedforward shift = {:.4e}", (&xi2.sigma[t] - &xi.sigma[t]).norm());
    Ok(())
}
