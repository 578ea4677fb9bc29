//! Coordinate-wise slice sampling of a banana-shaped density.

use nsm_bayes::rng::seeded;
use nsm_bayes::sampler::{slice_sample, SliceConfig};
use nsm_bayes::stats::{batch_means_se, sample_moments};

fn main() -> nsm_bayes::Result<()> {
    // x₁ ~ N(0, 4), x₂ | x₁ ~ N(x₁²/4, 1)
    let target = |x: &[f64]| Ok(-x[0] * x[0] / 8.0 - 0.5 * (x[1] - x[0] * x[0] / 4.0).powi(2));
    let cfg = SliceConfig::new(vec![2.0, 2.0]);
    let draws = slice_sample(target, &[0.0, 0.0], 20_000, &cfg, &mut seeded(3))?;
    let (mean, cov) = sample_moments(&draws);
    let x2: Vec<f64> = draws.column(1).iter().copied().collect();
    println!("mean [{:.3}, {:.3}] (exact [0, 1])", mean[0], mean[1]);
    println!("var(x₁) {:.3} (exact 4)", cov[(0, 0)]);
    println!("batch-means SE of mean(x₂): {:.4}", batch_means_se(&x2, 50));
    Ok(())
}
