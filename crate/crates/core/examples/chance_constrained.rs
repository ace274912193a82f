//! Penalized refinement on the benchmark with a state half-plane and a
//! control-norm bound, printing the slack history.

use covsteer::steering::run_algorithm1;
use covsteer::{benchmark, SteeringOptions};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let model = benchmark::two_mode_model();
    let cc = benchmark::two_mode_constraints();
    let sol = run_algorithm1(&model, &cc, &SteeringOptions::default())?;
    for r in &sol.slack_history {
        println!(
            "iter {:>2}  weight {:>10.2}  max beta {:.3e}  max zeta {:.3e}",
            r.iteration,
            r.weights.0[0],
            r.beta.max(),
            r.zeta.max()
        );
    }
    println!("status {:?} after {} iterations", sol.status, sol.iterations);
    println!("cost {:.4}", sol.cost.total);
    println!("|mu_T - mu_f| = {:.2e}", sol.terminal_mean_error(&model));
    println!("lambda_max(Sigma_T - Sigma_f) = {:.4}", sol.terminal_covariance_excess(&model));
    println!("losslessness residual = {:.2e}", sol.losslessness.max);
    for k in 0..model.horizon {
        let n: Vec<String> = sol.tau.ubar[k].iter().map(|u| format!("{:.3}", u.norm())).collect();
        println!("|ubar_{k}| = [{}]", n.join(", "));
    }
    Ok(())
}
