//! Benchmark simulators, contamination mechanisms and simulation banks.
//!
//! Every call that runs a simulator forward increments a process-wide
//! counter, so amortised stages can prove they never simulate.

pub mod gandk;
pub mod sir;
pub mod turin;

use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Cauchy, Distribution};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::posterior::GaussianPrior;
use crate::rng::{substream, Stage};

pub use gandk::{gandk_simulate, GandkParams, GANDK_PRIOR_MEAN, GANDK_PRIOR_VAR, GANDK_THETA_STAR};
pub use sir::{
    sir_prior_mean, sir_simulate, sir_summaries, sir_theta_star, sir_undercount, SirConstants,
    SirParams, SirTrajectory, SIR_PRIOR_VAR,
};
pub use turin::{
    temporal_moments, turin_noise_only, turin_simulate, TurinConstants, TurinParams,
    TURIN_PRIOR_MEAN, TURIN_PRIOR_VAR,
};

static SIMULATOR_CALLS: AtomicU64 = AtomicU64::new(0);

/// Forward simulations run by this process so far.
pub fn simulator_calls() -> u64 {
    SIMULATOR_CALLS.load(Ordering::SeqCst)
}

fn count_call() {
    SIMULATOR_CALLS.fetch_add(1, Ordering::SeqCst);
}

/// A simulator with its constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "id", rename_all = "kebab-case")]
pub enum Simulator {
    GAndK,
    Sir(SirConstants),
    Turin(TurinConstants),
}

impl Simulator {
    pub fn id(&self) -> &'static str {
        match self {
            Simulator::GAndK => "g-and-k",
            Simulator::Sir(_) => "sir",
            Simulator::Turin(_) => "turin",
        }
    }

    pub fn theta_dim(&self) -> usize {
        4
    }

    pub fn x_dim(&self) -> usize {
        match self {
            Simulator::GAndK => 1,
            Simulator::Sir(_) => 3,
            Simulator::Turin(c) => c.moments + 1,
        }
    }

    pub fn param_names(&self) -> Vec<String> {
        let names: [&str; 4] = match self {
            Simulator::GAndK => ["theta1", "log_theta2", "theta3", "log_theta4"],
            Simulator::Sir(_) => [
                "log_transmission",
                "log_recovery",
                "logit_reporting",
                "log_initial_infected",
            ],
            Simulator::Turin(_) => ["log_gain", "log_decay", "log_rate", "log_noise_var"],
        };
        names.iter().map(|s| s.to_string()).collect()
    }

    pub fn summary_names(&self) -> Vec<String> {
        match self {
            Simulator::GAndK => vec!["x".into()],
            Simulator::Sir(_) => vec![
                "attack_rate".into(),
                "peak_time".into(),
                "peak_height".into(),
            ],
            Simulator::Turin(c) => (0..=c.moments).map(|j| format!("log_moment_{j}")).collect(),
        }
    }

    pub fn prior(&self) -> GaussianPrior {
        let (mean, var): ([f64; 4], [f64; 4]) = match self {
            Simulator::GAndK => (GANDK_PRIOR_MEAN, GANDK_PRIOR_VAR),
            Simulator::Sir(_) => (sir_prior_mean(), SIR_PRIOR_VAR),
            Simulator::Turin(_) => (TURIN_PRIOR_MEAN, TURIN_PRIOR_VAR),
        };
        GaussianPrior::diagonal(&mean, &var).expect("positive prior variances")
    }

    /// The benchmark's data-generating parameter, when it has one.
    pub fn theta_star(&self) -> Option<Vec<f64>> {
        match self {
            Simulator::GAndK => Some(GANDK_THETA_STAR.to_vec()),
            Simulator::Sir(_) => Some(sir_theta_star().to_vec()),
            Simulator::Turin(_) => None,
        }
    }

    /// One observation `x ~ p(· | θ)`.
    pub fn simulate(&self, theta: &[f64], rng: &mut impl Rng) -> Result<Vec<f64>> {
        self.simulate_with(theta, None, rng)
    }

    /// One observation, optionally from a contamination mechanism. The clean
    /// draw consumes the stream first, so a shifted or perturbed row is its
    /// clean counterpart plus noise.
    pub fn simulate_with(
        &self,
        theta: &[f64],
        contamination: Option<&Contamination>,
        rng: &mut impl Rng,
    ) -> Result<Vec<f64>> {
        if theta.len() != self.theta_dim() {
            return Err(Error::dim("simulator θ", self.theta_dim(), theta.len()));
        }
        count_call();
        let mut x = match (self, contamination) {
            (Simulator::Sir(c), Some(Contamination::Undercount { retention, .. })) => {
                let traj = sir_simulate(theta, c, rng)?;
                sir_summaries(
                    &sir_undercount(&traj.reported, *retention, rng)?,
                    c.population,
                )
                .to_vec()
            }
            (Simulator::Turin(c), Some(Contamination::NoiseOnly { .. })) => {
                turin_noise_only(theta, c, rng)?
            }
            (_, Some(Contamination::Undercount { .. }))
            | (_, Some(Contamination::NoiseOnly { .. })) => {
                return Err(Error::Config(format!(
                    "contamination {:?} is not defined for simulator {}",
                    contamination,
                    self.id()
                )))
            }
            (Simulator::GAndK, _) => vec![gandk_simulate(theta, 1, rng)?[(0, 0)]],
            (Simulator::Sir(c), _) => {
                let traj = sir_simulate(theta, c, rng)?;
                sir_summaries(&traj.reported, c.population).to_vec()
            }
            (Simulator::Turin(c), _) => turin_simulate(theta, c, rng)?,
        };
        match contamination {
            Some(Contamination::HuberShift { shift, .. }) => x.iter_mut().for_each(|v| *v += shift),
            Some(Contamination::Cauchy { scale, .. }) => {
                let cauchy = Cauchy::new(0.0, *scale).map_err(|e| Error::Config(e.to_string()))?;
                x.iter_mut().for_each(|v| *v += cauchy.sample(rng));
            }
            _ => {}
        }
        Ok(x)
    }
}

/// Outlier process applied to an `ε` fraction of observed rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Contamination {
    None,
    /// Draws from `P_θ` translated by `shift`.
    HuberShift {
        eps: f64,
        shift: f64,
    },
    /// Reported cases thinned with retention probability `retention`.
    Undercount {
        eps: f64,
        retention: f64,
    },
    /// Summaries perturbed by centred Cauchy noise.
    Cauchy {
        eps: f64,
        scale: f64,
    },
    /// Transfer function zeroed, leaving receiver noise.
    NoiseOnly {
        eps: f64,
    },
}

impl Contamination {
    pub fn eps(&self) -> f64 {
        match self {
            Contamination::None => 0.0,
            Contamination::HuberShift { eps, .. }
            | Contamination::Undercount { eps, .. }
            | Contamination::Cauchy { eps, .. }
            | Contamination::NoiseOnly { eps } => *eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let eps = self.eps();
        if !(0.0..=1.0).contains(&eps) {
            return Err(Error::Config(format!(
                "contamination fraction {eps} outside [0, 1]"
            )));
        }
        match self {
            Contamination::Undercount { retention, .. }
                if !(*retention > 0.0 && *retention <= 1.0) =>
            {
                Err(Error::Config(format!(
                    "retention {retention} outside (0, 1]"
                )))
            }
            Contamination::Cauchy { scale, .. } if !(*scale > 0.0) => Err(Error::Config(format!(
                "Cauchy scale {scale} must be positive"
            ))),
            _ => Ok(()),
        }
    }
}

/// Exactly `round(εn)` flags set, at positions chosen by `rng`.
pub fn contaminated_indices(n: usize, eps: f64, rng: &mut impl Rng) -> Vec<bool> {
    let k = ((eps * n as f64).round() as usize).min(n);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let mut flags = vec![false; n];
    for &i in &idx[..k] {
        flags[i] = true;
    }
    flags
}

/// `n` observations at θ with an `ε` fraction drawn from the contamination
/// mechanism. Row `i` uses stream `(seed, Observe, i)`.
pub fn observe(
    sim: &Simulator,
    theta: &[f64],
    n: usize,
    contamination: &Contamination,
    seed: u64,
) -> Result<Dataset> {
    contamination.validate()?;
    let flags = contaminated_indices(
        n,
        contamination.eps(),
        &mut substream(seed, Stage::Observe, u64::MAX),
    );
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = substream(seed, Stage::Observe, i as u64);
            sim.simulate_with(theta, flags[i].then_some(contamination), &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    let values = DMatrix::from_fn(n, sim.x_dim(), |i, j| rows[i][j]);
    Dataset::with_flags(values, flags, Some(seed))
}

/// Replaces an `ε` fraction of g-and-k samples with draws from `P_θ + shift`.
pub fn gandk_contaminate(
    samples: &Dataset,
    theta: &[f64],
    eps: f64,
    shift: f64,
    rng: &mut impl Rng,
) -> Result<Dataset> {
    let flags = contaminated_indices(samples.len(), eps, rng);
    let mut values = samples.values.clone();
    for (i, f) in flags.iter().enumerate() {
        if *f {
            values[(i, 0)] = gandk_simulate(theta, 1, rng)?[(0, 0)] + shift;
        }
    }
    let merged = flags
        .iter()
        .zip(&samples.contaminated)
        .map(|(a, b)| *a || *b)
        .collect();
    Dataset::with_flags(values, merged, samples.seed)
}

/// Adds `scale`-Cauchy noise to an `ε` fraction of summary rows.
pub fn sir_cauchy_contaminate(
    summaries: &Dataset,
    eps: f64,
    scale: f64,
    rng: &mut impl Rng,
) -> Result<Dataset> {
    Contamination::Cauchy { eps, scale }.validate()?;
    let flags = contaminated_indices(summaries.len(), eps, rng);
    let cauchy = Cauchy::new(0.0, scale).map_err(|e| Error::Config(e.to_string()))?;
    let mut values = summaries.values.clone();
    for (i, f) in flags.iter().enumerate() {
        if *f {
            values
                .row_mut(i)
                .iter_mut()
                .for_each(|v| *v += cauchy.sample(rng));
        }
    }
    let merged = flags
        .iter()
        .zip(&summaries.contaminated)
        .map(|(a, b)| *a || *b)
        .collect();
    Dataset::with_flags(values, merged, summaries.seed)
}

/// Pairs `(θᵢ, xᵢ)` with `θᵢ` from the prior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationBank {
    pub simulator: Simulator,
    pub theta: DMatrix<f64>,
    pub x: DMatrix<f64>,
    pub seed: u64,
}

impl SimulationBank {
    pub fn len(&self) -> usize {
        self.theta.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.theta.nrows() == 0
    }
}

/// `m` prior-predictive simulations; pair `i` uses stream `(seed, Simulate, i)`.
pub fn simulate_bank(sim: &Simulator, m: usize, seed: u64) -> Result<SimulationBank> {
    let prior = sim.prior();
    let pairs: Vec<(Vec<f64>, Vec<f64>)> = (0..m)
        .into_par_iter()
        .map(|i| {
            let mut rng = substream(seed, Stage::Simulate, i as u64);
            let theta: Vec<f64> = prior.sample(1, &mut rng).iter().copied().collect();
            let x = sim.simulate(&theta, &mut rng)?;
            Ok((theta, x))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SimulationBank {
        simulator: sim.clone(),
        theta: DMatrix::from_fn(m, sim.theta_dim(), |i, j| pairs[i].0[j]),
        x: DMatrix::from_fn(m, sim.x_dim(), |i, j| pairs[i].1[j]),
        seed,
    })
}
