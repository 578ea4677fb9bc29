//! Turin radio-channel simulations summarised by log temporal moments, next
//! to the noise-only traces a faulty receiver produces.

use nsm_bayes::rng::seeded;
use nsm_bayes::simulators::{turin_noise_only, turin_simulate, TurinConstants, TURIN_PRIOR_MEAN};

fn main() -> nsm_bayes::Result<()> {
    let c = TurinConstants::default();
    println!(
        "Δf = {:.0} Hz over {} frequency points",
        c.delta_f(),
        c.frequency_points
    );
    let mut rng = seeded(7);
    for k in 0..3 {
        let x = turin_simulate(&TURIN_PRIOR_MEAN, &c, &mut rng)?;
        println!("channel {k}:    {:>8.3?}", x);
    }
    for k in 0..3 {
        let x = turin_noise_only(&TURIN_PRIOR_MEAN, &c, &mut rng)?;
        println!("noise only {k}: {:>8.3?}", x);
    }
    Ok(())
}
