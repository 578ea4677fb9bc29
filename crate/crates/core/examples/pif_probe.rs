//! Posterior influence of a single contaminant: KL between the clean and
//! contaminated closed-form posteriors as the contaminant moves away.
//!
//! For `q(x | θ) = N(x; θ, 1)` the sufficient statistic is unbounded, so the
//! unweighted KL grows without limit while the IMQ-weighted one levels off.

use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal};

use nsm_bayes::dataset::Dataset;
use nsm_bayes::metrics::pif_kl_probe;
use nsm_bayes::posterior::GaussianPrior;
use nsm_bayes::rng::seeded;
use nsm_bayes::surrogate::GaussianLinearModel;
use nsm_bayes::weights::{ImqWeight, WeightFunction};

fn main() -> nsm_bayes::Result<()> {
    let mut rng = seeded(13);
    let data = Dataset::new(DMatrix::from_fn(100, 1, |_, _| {
        StandardNormal.sample(&mut rng)
    }));
    let model = GaussianLinearModel::location(1);
    let prior = GaussianPrior::diagonal(&[0.0], &[10.0])?;
    let grid: Vec<Vec<f64>> = (0..=6).map(|k| vec![10f64.powi(k)]).collect();
    let imq = WeightFunction::Imq(ImqWeight::fit(&data.values, 1.0, None, &mut rng)?);
    let unit = pif_kl_probe(&prior, &data, &model, &WeightFunction::Unit, 1.0, 0, &grid)?;
    let robust = pif_kl_probe(&prior, &data, &model, &imq, 1.0, 0, &grid)?;
    println!("{:>10} {:>14} {:>14}", "x_c", "KL unweighted", "KL imq");
    for (u, r) in unit.iter().zip(&robust) {
        println!(
            "{:>10.0e} {:>14.4e} {:>14.4e}",
            u.contaminant[0], u.kl, r.kl
        );
    }
    Ok(())
}
