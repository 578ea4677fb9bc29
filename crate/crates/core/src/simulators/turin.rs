//! Stochastic radio-channel model with log temporal-moment summaries.

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const TURIN_PRIOR_MEAN: [f64; 4] = [-19.0, -19.0, 22.0, -22.0];
pub const TURIN_PRIOR_VAR: [f64; 4] = [1.0, 1.0, 1.0, 1.0];
/// Standard-normal 0.999 quantile.
const Z_999: f64 = 3.090_232_306_167_813;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TurinConstants {
    pub bandwidth_hz: f64,
    pub frequency_points: usize,
    /// Highest moment order `J`.
    pub moments: usize,
}

impl Default for TurinConstants {
    fn default() -> Self {
        Self {
            bandwidth_hz: 4e9,
            frequency_points: 801,
            moments: 2,
        }
    }
}

impl TurinConstants {
    /// `Δf = B/(K − 1)`.
    pub fn delta_f(&self) -> f64 {
        self.bandwidth_hz / (self.frequency_points - 1) as f64
    }

    /// Delays are drawn on `[0, 10 T_max]`, `T_max` the prior 0.999 quantile of `T`.
    pub fn delay_window(&self) -> f64 {
        10.0 * (TURIN_PRIOR_MEAN[1] + Z_999 * TURIN_PRIOR_VAR[1].sqrt()).exp()
    }
}

/// Natural-scale `(G₀, T, λ, σ²)` from `(log G₀, log T, log λ, log σ²)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TurinParams {
    pub gain: f64,
    pub decay: f64,
    pub rate: f64,
    pub noise_var: f64,
}

impl TurinParams {
    pub fn from_slice(theta: &[f64]) -> Result<Self> {
        if theta.len() != 4 {
            return Err(Error::dim("radio θ", 4, theta.len()));
        }
        if theta.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
            return Err(Error::non_finite("radio θ"));
        }
        Ok(Self {
            gain: theta[0].exp(),
            decay: theta[1].exp(),
            rate: theta[2].exp(),
            noise_var: theta[3].exp(),
        })
    }
}

fn complex_normal(var: f64, rng: &mut impl Rng) -> Complex64 {
    let s = (0.5 * var).sqrt();
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    Complex64::new(s * re, s * im)
}

/// Transfer function `H_k = Σ_l α_l e^{−j2πΔf k τ_l}` for Poisson delays on
/// the window and gains `α_l ~ CN(0, B G₀ e^{−τ_l/T}/λ)`.
///
/// `G₀ e^{−τ/T}/λ` is a power density; sampling over bandwidth `B` scales it
/// by `B`, which puts the channel above the noise floor at the prior mean.
pub fn transfer_function(
    p: &TurinParams,
    c: &TurinConstants,
    rng: &mut impl Rng,
) -> Vec<Complex64> {
    let k = c.frequency_points;
    let mut h = vec![Complex64::new(0.0, 0.0); k];
    let window = c.delay_window();
    let mean_paths = p.rate * window;
    if !(mean_paths > 0.0) || p.gain == 0.0 {
        return h;
    }
    let paths: f64 = Poisson::new(mean_paths).expect("positive rate").sample(rng);
    let df = c.delta_f();
    for _ in 0..paths as u64 {
        let tau = window * rng.random::<f64>();
        let alpha = complex_normal(
            c.bandwidth_hz * p.gain * (-tau / p.decay).exp() / p.rate,
            rng,
        );
        // z^k by recurrence, renormalised against drift
        let z = Complex64::from_polar(1.0, -2.0 * std::f64::consts::PI * df * tau);
        let mut phase = Complex64::new(1.0, 0.0);
        for (idx, hk) in h.iter_mut().enumerate() {
            *hk += alpha * phase;
            phase *= z;
            if idx % 64 == 63 {
                phase /= phase.norm();
            }
        }
    }
    h
}

/// `x_j = log Σ_n |y_n|² t_nʲ/(KΔf)`, `t_n = n/(KΔf)`, `y = IDFT(Y)`, `j = 0..J`.
pub fn temporal_moments(y_freq: &[Complex64], c: &TurinConstants) -> Vec<f64> {
    let k = y_freq.len();
    let mut buf = y_freq.to_vec();
    FftPlanner::new().plan_fft_inverse(k).process(&mut buf);
    let kdf = k as f64 * c.delta_f();
    (0..=c.moments)
        .map(|j| {
            let m: f64 = buf
                .iter()
                .enumerate()
                .map(|(n, v)| (v.norm_sqr() / (k * k) as f64) * (n as f64 / kdf).powi(j as i32))
                .sum::<f64>()
                / kdf;
            m.ln()
        })
        .collect()
}

/// Received spectrum `Y_k = H_k + Z_k`, `Z_k ~ CN(0, σ²)`; `faulty` zeroes `H`.
pub fn turin_spectrum(
    theta: &[f64],
    c: &TurinConstants,
    faulty: bool,
    rng: &mut impl Rng,
) -> Result<Vec<Complex64>> {
    let p = TurinParams::from_slice(theta)?;
    let mut y = if faulty {
        vec![Complex64::new(0.0, 0.0); c.frequency_points]
    } else {
        transfer_function(&p, c, rng)
    };
    for v in &mut y {
        *v += complex_normal(p.noise_var, rng);
    }
    Ok(y)
}

pub fn turin_simulate(theta: &[f64], c: &TurinConstants, rng: &mut impl Rng) -> Result<Vec<f64>> {
    Ok(temporal_moments(&turin_spectrum(theta, c, false, rng)?, c))
}

/// Moments of a noise-only trace, as recorded by a faulty antenna.
pub fn turin_noise_only(theta: &[f64], c: &TurinConstants, rng: &mut impl Rng) -> Result<Vec<f64>> {
    Ok(temporal_moments(&turin_spectrum(theta, c, true, rng)?, c))
}
