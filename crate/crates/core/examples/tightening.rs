//! Distribution-free tightenings and an empirical look at their margin
//! under Gaussian noise.

use covsteer::linalg::{psd_factor, Matrix, Vector};
use covsteer::model::HalfPlane;
use covsteer::steering::{cantelli_coefficient, chebyshev_coefficient, tighten_halfplane, tighten_norm};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let eps = 0.05;
    println!("Cantelli coefficient at eps={eps}: {:.6}", cantelli_coefficient(eps)?);
    println!("Chebyshev coefficient (n=2) at eps={eps}: {:.6}", chebyshev_coefficient(2, eps)?);

    let cov = Matrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
    let h = HalfPlane::new(vec![0.0, -1.0], -10.0);
    // Put the mean exactly on the tightened boundary.
    let margin = tighten_halfplane(&Vector::from_vec(vec![0.0, 10.0]), &cov, &h, eps)?;
    let mean = Vector::from_vec(vec![0.0, 10.0 + margin]);
    println!("tightened half-plane value at the mean: {:.2e}", tighten_halfplane(&mean, &cov, &h, eps)?);
    let f = psd_factor(&cov);
    let mut rng = ChaCha20Rng::seed_from_u64(1);
    let n = 200_000;
    let ok = (0..n)
        .filter(|_| {
            let z = Vector::from_fn(2, |_, _| rng.sample(StandardNormal));
            h.evaluate(&(&mean + &f * z)) <= 0.0
        })
        .count();
    println!("half-plane satisfied in {:.4} of Gaussian draws (required {:.2})", ok as f64 / n as f64, 1.0 - eps);

    let u_mean = Vector::from_vec(vec![1.0, 0.5]);
    let slack = tighten_norm(&u_mean, &cov, 0.0, eps)?;
    let u_max = slack;
    let ok = (0..n)
        .filter(|_| {
            let z = Vector::from_fn(2, |_, _| rng.sample(StandardNormal));
            (&u_mean + &f * z).norm() <= u_max
        })
        .count();
    println!("norm bound {u_max:.4} satisfied in {:.4} of draws", ok as f64 / n as f64);
    Ok(())
}
