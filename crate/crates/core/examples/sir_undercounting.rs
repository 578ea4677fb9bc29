//! SIR epidemics with reporting noise, and the effect of under-counting on
//! the three summaries (attack rate, peak time, peak height).

use nsm_bayes::rng::seeded;
use nsm_bayes::simulators::{
    observe, sir_simulate, sir_summaries, sir_theta_star, sir_undercount, Contamination, Simulator,
    SirConstants,
};

fn main() -> nsm_bayes::Result<()> {
    let c = SirConstants::default();
    let theta = sir_theta_star();
    let mut rng = seeded(5);
    let traj = sir_simulate(&theta, &c, &mut rng)?;
    let thinned = sir_undercount(&traj.reported, 0.2, &mut rng)?;
    println!(
        "reported  {:?}",
        sir_summaries(&traj.reported, c.population)
    );
    println!("thinned   {:?}", sir_summaries(&thinned, c.population));
    println!(
        "final S, I, R = {}, {}, {}",
        traj.s[c.horizon], traj.i[c.horizon], traj.r[c.horizon]
    );

    let sim = Simulator::Sir(c);
    let data = observe(
        &sim,
        &theta,
        50,
        &Contamination::Undercount {
            eps: 0.1,
            retention: 0.2,
        },
        6,
    )?;
    let mean = |clean: bool| {
        let rows: Vec<usize> = (0..data.len())
            .filter(|&i| data.contaminated[i] != clean)
            .collect();
        rows.iter().map(|&i| data.values[(i, 0)]).sum::<f64>() / rows.len() as f64
    };
    println!(
        "{} of {} under-counted; mean attack rate clean {:.3}, under-counted {:.3}",
        data.contamination_count(),
        data.len(),
        mean(true),
        mean(false)
    );
    Ok(())
}
