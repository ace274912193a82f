//! Unconstrained covariance steering of the benchmark: one mean program,
//! one covariance program, then a losslessness check.

use covsteer::steering::solve_two_step;
use covsteer::{benchmark, SteeringOptions};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let model = benchmark::two_mode_model();
    let sol = solve_two_step(&model, &SteeringOptions::default())?;
    println!("cost {:.4} (mean {:.4}, covariance {:.4})", sol.cost.total, sol.cost.mean, sol.cost.covariance);
    println!("|mu_T - mu_f| = {:.2e}", sol.terminal_mean_error(&model));
    println!("lambda_max(Sigma_T - Sigma_f) = {:.4}", sol.terminal_covariance_excess(&model));
    println!("losslessness residual = {:.2e} (passed: {})", sol.losslessness.max, sol.losslessness.passed);
    for (k, row) in sol.policy.gains.iter().enumerate() {
        println!("K_{k}(1) = {:.4?}", row[0].as_slice());
    }
    Ok(())
}
