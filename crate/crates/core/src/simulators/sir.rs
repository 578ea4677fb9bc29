//! Discrete-time stochastic SIR epidemic with Poisson reporting.

use rand::Rng;
use rand_distr::{Binomial, Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::{logit, sigmoid};

/// `(log θ₁, log θ₂, logit θ₃, log θ₄)` of the benchmark.
pub fn sir_theta_star() -> [f64; 4] {
    [0.6f64.ln(), 0.15f64.ln(), logit(0.6), 20f64.ln()]
}

pub fn sir_prior_mean() -> [f64; 4] {
    [0.5f64.ln(), 0.2f64.ln(), logit(0.5), 20f64.ln()]
}

pub const SIR_PRIOR_VAR: [f64; 4] = [0.25, 0.25, 1.0, 0.49];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SirConstants {
    pub population: u64,
    pub horizon: usize,
    pub dt: f64,
}

impl Default for SirConstants {
    fn default() -> Self {
        Self {
            population: 1000,
            horizon: 150,
            dt: 1.0,
        }
    }
}

/// Natural-scale parameters decoded from `(log, log, logit, log)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SirParams {
    pub transmission: f64,
    pub recovery: f64,
    pub reporting: f64,
    pub initial_infected: u64,
}

impl SirParams {
    pub fn from_slice(theta: &[f64], population: u64) -> Result<Self> {
        if theta.len() != 4 {
            return Err(Error::dim("SIR θ", 4, theta.len()));
        }
        if theta.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
            return Err(Error::non_finite("SIR θ"));
        }
        let i0 = theta[3].exp().round();
        if i0 > population as f64 {
            return Err(Error::InvalidArgument(format!(
                "initial infected {i0} exceeds population {population}"
            )));
        }
        Ok(Self {
            transmission: theta[0].exp(),
            recovery: theta[1].exp(),
            reporting: sigmoid(theta[2]),
            initial_infected: i0 as u64,
        })
    }
}

/// Compartment counts after every step (index 0 is the initial state) and
/// the reported cases `y₁..y_T`.
#[derive(Debug, Clone, PartialEq)]
pub struct SirTrajectory {
    pub s: Vec<u64>,
    pub i: Vec<u64>,
    pub r: Vec<u64>,
    pub new_infections: Vec<u64>,
    pub reported: Vec<u64>,
}

fn binomial(n: u64, p: f64, rng: &mut impl Rng) -> u64 {
    if n == 0 || p <= 0.0 {
        return 0;
    }
    if p >= 1.0 {
        return n;
    }
    Binomial::new(n, p)
        .expect("valid binomial parameters")
        .sample(rng)
}

fn poisson(lambda: f64, rng: &mut impl Rng) -> u64 {
    if lambda <= 0.0 {
        return 0;
    }
    let v: f64 = Poisson::new(lambda)
        .expect("valid poisson rate")
        .sample(rng);
    v as u64
}

/// One epidemic: `ΔI ~ Bin(S, 1 − e^{−θ₁ I/N Δt})`, `ΔR ~ Bin(I, 1 − e^{−θ₂Δt})`,
/// `y ~ Poisson(θ₃ ΔI)`.
pub fn sir_simulate(theta: &[f64], c: &SirConstants, rng: &mut impl Rng) -> Result<SirTrajectory> {
    let p = SirParams::from_slice(theta, c.population)?;
    let n = c.population;
    let (mut s, mut i, mut r) = (n - p.initial_infected, p.initial_infected, 0u64);
    let mut traj = SirTrajectory {
        s: vec![s],
        i: vec![i],
        r: vec![r],
        new_infections: Vec::with_capacity(c.horizon),
        reported: Vec::with_capacity(c.horizon),
    };
    let p_recover = 1.0 - (-p.recovery * c.dt).exp();
    for _ in 0..c.horizon {
        let p_infect = 1.0 - (-p.transmission * (i as f64 / n as f64) * c.dt).exp();
        let di = binomial(s, p_infect, rng);
        let dr = binomial(i, p_recover, rng);
        s -= di;
        i = i + di - dr;
        r += dr;
        traj.s.push(s);
        traj.i.push(i);
        traj.r.push(r);
        traj.new_infections.push(di);
        traj.reported.push(poisson(p.reporting * di as f64, rng));
    }
    Ok(traj)
}

/// `(Σy/N, argmax y/(T − 1), max y/N)`; ties resolve to the first index.
pub fn sir_summaries(y: &[u64], population: u64) -> [f64; 3] {
    let n = population as f64;
    let total: u64 = y.iter().sum();
    let (mut peak_t, mut peak) = (0usize, 0u64);
    for (t, &v) in y.iter().enumerate() {
        if v > peak {
            peak = v;
            peak_t = t;
        }
    }
    let span = (y.len().max(2) - 1) as f64;
    [total as f64 / n, peak_t as f64 / span, peak as f64 / n]
}

/// Binomial thinning `ỹ_t ~ Bin(y_t, r)`.
pub fn sir_undercount(y: &[u64], retention: f64, rng: &mut impl Rng) -> Result<Vec<u64>> {
    if !(retention > 0.0 && retention <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "retention must lie in (0, 1], got {retention}"
        )));
    }
    Ok(y.iter().map(|&v| binomial(v, retention, rng)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{substream, Stage};

    const GOLDEN_ATTACK_RATE: f64 = 0.579887;

    fn mean_attack_rate(seed: u64, runs: u64) -> f64 {
        let c = SirConstants::default();
        (0..runs)
            .map(|i| {
                let mut rng = substream(seed, Stage::Custom(11), i);
                let t = sir_simulate(&sir_theta_star(), &c, &mut rng).unwrap();
                sir_summaries(&t.reported, c.population)[0]
            })
            .sum::<f64>()
            / runs as f64
    }

    #[test]
    fn compartments_are_conserved() {
        let c = SirConstants::default();
        let prior = crate::simulators::Simulator::Sir(c).prior();
        for i in 0..1000 {
            let mut rng = substream(3, Stage::Custom(12), i);
            let theta: Vec<f64> = prior.sample(1, &mut rng).iter().copied().collect();
            let t = sir_simulate(&theta, &c, &mut rng).unwrap();
            for k in 0..t.s.len() {
                assert_eq!(t.s[k] + t.i[k] + t.r[k], c.population);
            }
            let x = sir_summaries(&t.reported, c.population);
            assert!((0.0..=1.0).contains(&x[1]) && (0.0..=1.0).contains(&x[2]) && x[2] <= x[0]);
        }
    }

    #[test]
    fn no_transmission_means_no_cases() {
        let mut rng = crate::rng::seeded(1);
        let theta = [f64::NEG_INFINITY, 0.15f64.ln(), logit(0.6), 20f64.ln()];
        let t = sir_simulate(&theta, &SirConstants::default(), &mut rng).unwrap();
        assert!(t.new_infections.iter().all(|v| *v == 0));
        assert!(t.reported.iter().all(|v| *v == 0));
    }

    #[test]
    fn full_reporting_is_unbiased() {
        let c = SirConstants {
            population: 100_000,
            ..SirConstants::default()
        };
        let theta = [0.6f64.ln(), 0.15f64.ln(), 40.0, 200f64.ln()];
        let diffs: Vec<f64> = (0..400)
            .map(|i| {
                let mut rng = substream(4, Stage::Custom(13), i);
                let t = sir_simulate(&theta, &c, &mut rng).unwrap();
                t.reported.iter().sum::<u64>() as f64 - t.new_infections.iter().sum::<u64>() as f64
            })
            .collect();
        let m = diffs.iter().sum::<f64>() / diffs.len() as f64;
        let sd =
            (diffs.iter().map(|d| (d - m).powi(2)).sum::<f64>() / (diffs.len() - 1) as f64).sqrt();
        assert!(
            m.abs() < 4.0 * sd / (diffs.len() as f64).sqrt(),
            "{m} ± {sd}"
        );
    }

    #[test]
    fn initial_infected_cannot_exceed_population() {
        let mut rng = crate::rng::seeded(2);
        let theta = [0.0, 0.0, 0.0, 2000f64.ln()];
        assert!(sir_simulate(&theta, &SirConstants::default(), &mut rng).is_err());
    }

    #[test]
    fn summary_edge_cases() {
        assert_eq!(sir_summaries(&[0; 150], 1000), [0.0, 0.0, 0.0]);
        let mut y = vec![0u64; 150];
        y[37] = 1000;
        assert_eq!(sir_summaries(&y, 1000), [1.0, 37.0 / 149.0, 1.0]);
    }

    #[test]
    fn thinning_is_unbiased_and_bounded() {
        let y: Vec<u64> = (0..20).map(|t| 5 * t).collect();
        let mut rng = crate::rng::seeded(5);
        assert_eq!(sir_undercount(&y, 1.0, &mut rng).unwrap(), y);
        let reps = 100_000;
        let mut sums = vec![0.0; y.len()];
        for _ in 0..reps {
            let z = sir_undercount(&y, 0.5, &mut rng).unwrap();
            for (t, v) in z.iter().enumerate() {
                assert!(*v <= y[t]);
                sums[t] += *v as f64;
            }
        }
        for (t, s) in sums.iter().enumerate() {
            let mean = s / reps as f64;
            let se = (y[t] as f64 * 0.25 / reps as f64).sqrt();
            assert!(
                (mean - 0.5 * y[t] as f64).abs() <= 4.0 * se + 1e-12,
                "t={t}: {mean}"
            );
        }
        assert!(sir_undercount(&y, 0.0, &mut rng).is_err());
    }

    #[test]
    fn attack_rate_matches_golden_value() {
        assert!((mean_attack_rate(0, 10_000) - GOLDEN_ATTACK_RATE).abs() < 1e-6);
        for seed in 1..3 {
            let m = mean_attack_rate(seed, 10_000);
            assert!((m - GOLDEN_ATTACK_RATE).abs() < 1e-3, "seed {seed}: {m}");
        }
    }
}
