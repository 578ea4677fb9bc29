//! Robust centring of the IMQ weight: FAST-MCD and median/MAD against the
//! sample mean on contaminated data.

use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal};

use nsm_bayes::rng::seeded;
use nsm_bayes::stats::sample_moments;
use nsm_bayes::weights::{robust_location_scatter, ImqWeight, ScatterMethod};

fn main() -> nsm_bayes::Result<()> {
    let mut rng = seeded(9);
    let data = DMatrix::from_fn(300, 2, |i, j| {
        let z: f64 = StandardNormal.sample(&mut rng);
        z * [1.0, 2.0][j] + if i < 30 { 12.0 } else { 0.0 }
    });
    let (mean, _) = sample_moments(&data);
    println!("sample mean      [{:.3}, {:.3}]", mean[0], mean[1]);
    for method in [ScatterMethod::Mcd, ScatterMethod::MedianMad] {
        let est = robust_location_scatter(&data, method, &mut rng)?;
        println!(
            "{method:<10} loc [{:.3}, {:.3}], scatter diag [{:.3}, {:.3}]",
            est.location[0],
            est.location[1],
            est.scatter[(0, 0)],
            est.scatter[(1, 1)]
        );
        let w = ImqWeight::from_estimate(1.0, &est)?;
        println!(
            "           w(inlier) {:.3}, w(outlier) {:.4}",
            w.weight(&[0.0, 0.0]),
            w.weight(&[12.0, 12.0])
        );
    }
    Ok(())
}
