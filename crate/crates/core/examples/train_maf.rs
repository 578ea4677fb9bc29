//! Trains a masked autoregressive flow on SIR simulations by maximum
//! likelihood and draws from it at the reference parameter.

use nsm_bayes::rng::seeded;
use nsm_bayes::simulators::{simulate_bank, sir_theta_star, Simulator, SirConstants};
use nsm_bayes::surrogate::{ConditionalDensitySurrogate, Surrogate};
use nsm_bayes::train::{fit_nle, SurrogateSpec, TrainConfig};

fn main() -> nsm_bayes::Result<()> {
    let sim = Simulator::Sir(SirConstants::default());
    let bank = simulate_bank(&sim, 4000, 1)?;
    let cfg = TrainConfig {
        max_epochs: 150,
        learning_rate: 1e-3,
        ..TrainConfig::default()
    };
    let (model, report) = fit_nle(&SurrogateSpec::default_maf(), &bank.theta, &bank.x, &cfg)?;
    println!(
        "{} epochs, best validation NLL {:.4} at epoch {}",
        report.epochs_run, report.best_val_loss, report.best_epoch
    );
    let theta = sir_theta_star();
    let Surrogate::Maf(maf) = &model else {
        unreachable!("a MAF was requested")
    };
    let draws = maf.sample(&theta, 5, &mut seeded(2))?;
    for row in draws.row_iter() {
        let x: Vec<f64> = row.iter().copied().collect();
        println!(
            "x = {:>8.4?}  log q = {:.3}",
            x,
            model.log_density(&x, &theta)?
        );
    }
    Ok(())
}
