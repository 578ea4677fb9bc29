//! Coordinate-wise slice sampling with stepping-out and shrinkage.

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceConfig {
    /// Initial bracket width per coordinate.
    pub widths: Vec<f64>,
    /// Step-out budget per side and update.
    pub max_steps_out: usize,
    pub warmup: usize,
    pub thin: usize,
}

impl SliceConfig {
    pub fn new(widths: Vec<f64>) -> Self {
        Self {
            widths,
            max_steps_out: 10,
            warmup: 500,
            thin: 1,
        }
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.widths.len() != dim {
            return Err(Error::dim("slice widths", dim, self.widths.len()));
        }
        if !self.widths.iter().all(|w| *w > 0.0 && w.is_finite()) || self.thin == 0 {
            return Err(Error::InvalidArgument(
                "slice widths must be positive and thinning ≥ 1".into(),
            ));
        }
        Ok(())
    }
}

const MAX_SHRINKS: usize = 200;

struct Target<F> {
    f: F,
}

impl<F: FnMut(&[f64]) -> Result<f64>> Target<F> {
    /// NaN counts as outside the support.
    fn eval(&mut self, x: &[f64]) -> Result<f64> {
        let v = (self.f)(x)?;
        Ok(if v.is_nan() { f64::NEG_INFINITY } else { v })
    }
}

/// Draws `count` states from the density `∝ exp(log_density)` after
/// `cfg.warmup` discarded sweeps, keeping every `cfg.thin`-th sweep.
pub fn slice_sample<F>(
    log_density: F,
    init: &[f64],
    count: usize,
    cfg: &SliceConfig,
    rng: &mut impl Rng,
) -> Result<DMatrix<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let d = init.len();
    cfg.validate(d)?;
    let mut target = Target { f: log_density };
    let mut x = init.to_vec();
    let mut fx = target.eval(&x)?;
    if fx.is_infinite() {
        return Err(Error::InvalidInitialPoint);
    }
    let mut out = DMatrix::zeros(count, d);
    let mut warned = false;
    let sweeps = cfg.warmup + count * cfg.thin;
    let mut kept = 0;
    for sweep in 0..sweeps {
        for j in 0..d {
            let (xj, fj, hit) = update_coordinate(&mut target, &mut x, fx, j, cfg, rng)?;
            x[j] = xj;
            fx = fj;
            if hit && !warned {
                log::warn!("slice step-out budget exhausted on coordinate {j}; accepting bracket");
                warned = true;
            }
        }
        if sweep >= cfg.warmup && (sweep - cfg.warmup) % cfg.thin == cfg.thin - 1 {
            out.row_mut(kept).copy_from_slice(&x);
            kept += 1;
        }
    }
    Ok(out)
}

/// One slice update of coordinate `j`; returns the new value, its log-density
/// and whether the step-out budget ran out.
fn update_coordinate<F: FnMut(&[f64]) -> Result<f64>>(
    target: &mut Target<F>,
    x: &mut [f64],
    fx: f64,
    j: usize,
    cfg: &SliceConfig,
    rng: &mut impl Rng,
) -> Result<(f64, f64, bool)> {
    let x0 = x[j];
    let w = cfg.widths[j];
    let level = fx + rng.random::<f64>().ln();
    let mut lo = x0 - w * rng.random::<f64>();
    let mut hi = lo + w;
    let mut left = (cfg.max_steps_out as f64 * rng.random::<f64>()).floor() as usize;
    let mut right = cfg.max_steps_out.saturating_sub(1 + left);
    let at = |v: f64, x: &mut [f64], target: &mut Target<F>| -> Result<f64> {
        x[j] = v;
        target.eval(x)
    };
    let mut exhausted = false;
    while at(lo, x, target)? > level {
        if left == 0 {
            exhausted = true;
            break;
        }
        lo -= w;
        left -= 1;
    }
    while at(hi, x, target)? > level {
        if right == 0 {
            exhausted = true;
            break;
        }
        hi += w;
        right -= 1;
    }
    for _ in 0..MAX_SHRINKS {
        let cand = lo + (hi - lo) * rng.random::<f64>();
        let fc = at(cand, x, target)?;
        if fc > level {
            return Ok((cand, fc, exhausted));
        }
        if cand < x0 {
            lo = cand;
        } else {
            hi = cand;
        }
    }
    log::warn!("slice shrinkage did not terminate on coordinate {j}; keeping the current state");
    x[j] = x0;
    Ok((x0, fx, exhausted))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::{batch_means_se, chi2_cdf, gamma_p};

    fn normal_cdf(x: f64) -> f64 {
        let p = gamma_p(0.5, 0.5 * x * x);
        if x >= 0.0 {
            0.5 * (1.0 + p)
        } else {
            0.5 * (1.0 - p)
        }
    }

    fn cfg(d: usize) -> SliceConfig {
        SliceConfig {
            warmup: 500,
            ..SliceConfig::new(vec![1.0; d])
        }
    }

    #[test]
    fn standard_normal_moments() {
        let mut rng = crate::rng::seeded(1);
        let s = slice_sample(
            |x| Ok(-0.5 * x[0] * x[0]),
            &[0.0],
            50_000,
            &cfg(1),
            &mut rng,
        )
        .unwrap();
        let col: Vec<f64> = s.column(0).iter().copied().collect();
        let mean = col.iter().sum::<f64>() / col.len() as f64;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (col.len() - 1) as f64;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }

    #[test]
    fn shifted_bivariate_normal_means() {
        let mu = [3.0, -1.5];
        let mut rng = crate::rng::seeded(2);
        let s = slice_sample(
            |x| Ok(-0.5 * ((x[0] - mu[0]).powi(2) + (x[1] - mu[1]).powi(2))),
            &[0.0, 0.0],
            20_000,
            &cfg(2),
            &mut rng,
        )
        .unwrap();
        for j in 0..2 {
            let col: Vec<f64> = s.column(j).iter().copied().collect();
            let mean = col.iter().sum::<f64>() / col.len() as f64;
            let se = batch_means_se(&col, 50);
            assert!(
                (mean - mu[j]).abs() < 4.0 * se,
                "coordinate {j}: {mean} ± {se}"
            );
        }
    }

    #[test]
    fn identical_seeds_give_identical_chains() {
        let run = || {
            let mut rng = crate::rng::seeded(3);
            slice_sample(
                |x| Ok(-x[0].abs() - 0.5 * x[1] * x[1]),
                &[0.1, 0.2],
                300,
                &cfg(2),
                &mut rng,
            )
            .unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn rejects_initial_point_outside_support() {
        let mut rng = crate::rng::seeded(4);
        let r = slice_sample(
            |x| Ok(if x[0] > 0.0 { 0.0 } else { f64::NEG_INFINITY }),
            &[-1.0],
            10,
            &cfg(1),
            &mut rng,
        );
        assert!(matches!(r, Err(Error::InvalidInitialPoint)));
    }

    #[test]
    fn truncated_support_is_respected() {
        let mut rng = crate::rng::seeded(5);
        let s = slice_sample(
            |x| Ok(if x[0] > 0.0 { -x[0] } else { f64::NEG_INFINITY }),
            &[1.0],
            5000,
            &cfg(1),
            &mut rng,
        )
        .unwrap();
        assert!(s.iter().all(|v| *v > 0.0));
        let mean = s.iter().sum::<f64>() / 5000.0;
        assert!((mean - 1.0).abs() < 0.1, "exponential mean {mean}");
    }

    #[test]
    fn histogram_matches_bimodal_target() {
        let log_p = |x: f64| {
            let a = 0.3 * (-0.5 * ((x + 1.5) / 0.5).powi(2)).exp() / 0.5;
            let b = 0.7 * (-0.5 * ((x - 1.0) / 0.8).powi(2)).exp() / 0.8;
            (a + b).ln()
        };
        let cdf = |x: f64| 0.3 * normal_cdf((x + 1.5) / 0.5) + 0.7 * normal_cdf((x - 1.0) / 0.8);
        let edges: Vec<f64> = (0..=12).map(|i| -3.0 + 0.5 * i as f64).collect();
        let mut probs: Vec<f64> = edges.windows(2).map(|e| cdf(e[1]) - cdf(e[0])).collect();
        probs[0] += cdf(edges[0]);
        *probs.last_mut().unwrap() += 1.0 - cdf(edges[12]);
        let mut passes = 0;
        for seed in 0..20 {
            let mut rng = crate::rng::substream(seed, crate::rng::Stage::Custom(7), 0);
            let c = SliceConfig {
                thin: 10,
                warmup: 200,
                ..SliceConfig::new(vec![1.0])
            };
            let s = slice_sample(|x| Ok(log_p(x[0])), &[0.0], 3000, &c, &mut rng).unwrap();
            let mut counts = vec![0.0; probs.len()];
            for v in s.iter() {
                let k = (((v - edges[0]) / 0.5).floor().max(0.0) as usize).min(probs.len() - 1);
                counts[k] += 1.0;
            }
            let n = s.nrows() as f64;
            let stat: f64 = counts
                .iter()
                .zip(&probs)
                .map(|(o, p)| (o - n * p).powi(2) / (n * p))
                .sum();
            if 1.0 - chi2_cdf(stat, probs.len() - 1) > 0.01 {
                passes += 1;
            }
        }
        assert!(passes >= 19, "{passes}/20 seeds passed");
    }
}
