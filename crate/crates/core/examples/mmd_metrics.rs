//! Posterior accuracy metrics: squared MMD against reference draws, MSE
//! around a true parameter and credible-region coverage.

use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal};

use nsm_bayes::metrics::{
    empirical_coverage, gaussian_summary, median_heuristic, mmd2, mse_samples, Mmd2Config,
};
use nsm_bayes::rng::seeded;

fn main() -> nsm_bayes::Result<()> {
    let mut rng = seeded(17);
    let mut draws = |shift: f64| {
        DMatrix::from_fn(1000, 2, |_, _| {
            let z: f64 = StandardNormal.sample(&mut rng);
            shift + z
        })
    };
    let reference = draws(0.0);
    let theta_star = [0.0, 0.0];
    for shift in [0.0, 0.1, 0.5, 2.0] {
        let samples = draws(shift);
        let l = median_heuristic(&samples, &reference)?;
        let m = mmd2(&samples, &reference, &Mmd2Config::default())?;
        let post = gaussian_summary(&samples, 1.0);
        let cov = empirical_coverage(&[post], &theta_star, 0.05)?;
        println!(
            "shift {shift:<4} lengthscale {l:.3}  mmd² {m:.5}  mse {:.3}  covered {cov}",
            mse_samples(&samples, &theta_star)?
        );
    }
    Ok(())
}
