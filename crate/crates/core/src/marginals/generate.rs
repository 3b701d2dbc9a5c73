//! Synthetic marginals from GBM, Merton jump-diffusion and Heston.
//!
//! All laws are expressed for the de-drifted price `S_t e^{-r t}`, so the
//! resulting sequence has a common mean `S0`. GBM uses the closed-form
//! lognormal law; the jump and stochastic-volatility models are simulated
//! and smoothed with a Gaussian kernel of bandwidth `0.05 * std`.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use super::{hat_project, require_convex_order, Marginal, MarginalSequence};
use crate::error::{Error, Result};
use crate::grid::Grid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Model {
    Gbm,
    Merton,
    Heston,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelParams {
    pub model: Model,
    pub spot: f64,
    pub rate: f64,
    pub vol: f64,
    pub jump_intensity: f64,
    pub jump_mean: f64,
    pub jump_sd: f64,
    pub kappa: f64,
    pub theta: f64,
    pub vol_of_vol: f64,
    pub rho: f64,
    pub v0: f64,
    pub horizon: f64,
    pub paths: usize,
    pub seed: u64,
}

impl Default for ModelParams {
    fn default() -> Self {
        Self {
            model: Model::Gbm,
            spot: 1.0,
            rate: 0.0,
            vol: 0.2,
            jump_intensity: 5.0,
            jump_mean: -0.1,
            jump_sd: 0.1,
            kappa: 2.0,
            theta: 0.04,
            vol_of_vol: 0.3,
            rho: -0.5,
            v0: 0.04,
            horizon: 0.2,
            paths: 10_000,
            seed: 42,
        }
    }
}

const PATH_CHUNK: usize = 1000;
const HESTON_MAX_DT: f64 = 1.0 / 250.0;
/// Kernel bandwidth as a fraction of the sample standard deviation.
pub const KDE_BANDWIDTH_FRACTION: f64 = 0.05;

impl ModelParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidInput(msg.to_string()));
        if !(self.spot > 0.0) {
            return bad("spot must be positive");
        }
        if !(self.vol > 0.0) && self.model != Model::Heston {
            return bad("vol must be positive");
        }
        if !(self.v0 > 0.0) {
            return bad("v0 must be positive");
        }
        if !(self.rho.abs() <= 1.0) {
            return bad("|rho| must be at most 1");
        }
        if self.model != Model::Gbm && self.paths < 2 {
            return bad("need at least 2 paths");
        }
        if !(self.jump_intensity >= 0.0) || !(self.jump_sd >= 0.0) {
            return bad("jump intensity and jump sd must be non-negative");
        }
        if self.model == Model::Heston && !(self.kappa > 0.0 && self.theta > 0.0 && self.vol_of_vol > 0.0) {
            return bad("heston kappa, theta and vol_of_vol must be positive");
        }
        Ok(())
    }

    /// Parameter choices outside the range the method is usually run with.
    pub fn warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.model != Model::Heston && !(0.15..=0.35).contains(&self.vol) {
            out.push(format!("vol {} outside the usual [0.15, 0.35] range", self.vol));
        }
        out
    }

    fn jump_compensator(&self) -> f64 {
        (self.jump_mean + 0.5 * self.jump_sd * self.jump_sd).exp() - 1.0
    }
}

fn norm_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

fn norm_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

fn lognormal_weights(grid: &Grid, spot: f64, total_var: f64) -> Vec<f64> {
    let s = total_var.sqrt();
    let nu = spot.ln() - 0.5 * total_var;
    let scale = (nu + 0.5 * total_var).exp();
    hat_project(grid.points(), |p| {
        if p <= 0.0 {
            return (0.0, 0.0);
        }
        let z = (p.ln() - nu) / s;
        (norm_cdf(z), scale * norm_cdf(z - s))
    })
}

/// Hat-projected Gaussian kernel density of `samples` with bandwidth `h`.
/// A zero bandwidth projects the empirical law itself.
fn kde_weights(grid: &Grid, samples: &[f64], h: f64) -> Vec<f64> {
    let mut xs = samples.to_vec();
    xs.sort_by(|a, b| a.total_cmp(b));
    let n = xs.len() as f64;
    let prefix: Vec<f64> = xs
        .iter()
        .scan(0.0, |acc, v| {
            *acc += v;
            Some(*acc)
        })
        .collect();
    let reach = 9.0 * h;
    hat_project(grid.points(), |p| {
        // Samples far below p count fully, far above not at all.
        let full = xs.partition_point(|&v| v < p - reach);
        let stop = if h > 0.0 {
            xs.partition_point(|&v| v <= p + reach)
        } else {
            xs.partition_point(|&v| v <= p)
        };
        let mut f = full as f64;
        let mut g = if full > 0 { prefix[full - 1] } else { 0.0 };
        for &v in &xs[full..stop] {
            if h > 0.0 {
                let z = (p - v) / h;
                let c = norm_cdf(z);
                f += c;
                g += v * c - h * norm_pdf(z);
            } else {
                f += 1.0;
                g += v;
            }
        }
        (f / n, g / n)
    })
}

/// De-drifted price samples at each requested time, `paths` per time.
/// Paths are simulated in fixed chunks with one RNG stream per chunk, so the
/// output does not depend on the thread count.
pub fn simulate_paths(params: &ModelParams, times: &[f64]) -> Result<Vec<Vec<f64>>> {
    params.validate()?;
    let n_chunks = params.paths.div_ceil(PATH_CHUNK);
    let chunks: Vec<Vec<Vec<f64>>> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
            rng.set_stream(c as u64);
            let count = PATH_CHUNK.min(params.paths - c * PATH_CHUNK);
            let mut out = vec![Vec::with_capacity(count); times.len()];
            for _ in 0..count {
                let path = match params.model {
                    Model::Gbm | Model::Merton => jump_diffusion_path(params, times, &mut rng),
                    Model::Heston => heston_path(params, times, &mut rng),
                };
                for (slot, v) in out.iter_mut().zip(path) {
                    slot.push(v);
                }
            }
            out
        })
        .collect();
    let mut merged = vec![Vec::with_capacity(params.paths); times.len()];
    for chunk in chunks {
        for (slot, part) in merged.iter_mut().zip(chunk) {
            slot.extend(part);
        }
    }
    Ok(merged)
}

fn jump_diffusion_path(p: &ModelParams, times: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
    let jumps = p.model == Model::Merton && p.jump_intensity > 0.0;
    let comp = if jumps { p.jump_compensator() } else { 0.0 };
    let mut log_s = p.spot.ln();
    let mut prev = 0.0;
    let mut out = Vec::with_capacity(times.len());
    for &t in times {
        let dt = t - prev;
        if dt > 0.0 {
            let z: f64 = rng.sample(StandardNormal);
            log_s += (p.rate - 0.5 * p.vol * p.vol - p.jump_intensity * comp * jumps as u8 as f64) * dt
                + p.vol * dt.sqrt() * z;
            if jumps {
                let count = Poisson::new(p.jump_intensity * dt)
                    .map(|d| d.sample(rng))
                    .unwrap_or(0.0);
                if count > 0.0 {
                    let zj: f64 = rng.sample(StandardNormal);
                    log_s += count * p.jump_mean + count.sqrt() * p.jump_sd * zj;
                }
            }
        }
        prev = t;
        out.push((log_s - p.rate * t).exp());
    }
    out
}

/// Andersen's quadratic-exponential scheme for the variance with the
/// matching log-price update (gamma1 = gamma2 = 1/2).
fn heston_path(p: &ModelParams, times: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
    let (kappa, theta, sv, rho) = (p.kappa, p.theta, p.vol_of_vol, p.rho);
    let mut v = p.v0;
    let mut log_s = p.spot.ln();
    let mut prev = 0.0;
    let mut out = Vec::with_capacity(times.len());
    for &t in times {
        let span = t - prev;
        if span > 0.0 {
            let n_sub = (span / HESTON_MAX_DT).ceil().max(1.0) as usize;
            let dt = span / n_sub as f64;
            let e = (-kappa * dt).exp();
            let k0 = -rho * kappa * theta * dt / sv;
            let k1 = 0.5 * dt * (kappa * rho / sv - 0.5) - rho / sv;
            let k2 = 0.5 * dt * (kappa * rho / sv - 0.5) + rho / sv;
            let k3 = 0.5 * dt * (1.0 - rho * rho);
            for _ in 0..n_sub {
                let m = theta + (v - theta) * e;
                let s2 = v * sv * sv * e * (1.0 - e) / kappa
                    + theta * sv * sv * (1.0 - e) * (1.0 - e) / (2.0 * kappa);
                let psi = s2 / (m * m);
                let v_next = if psi <= 1.5 {
                    let inv = 2.0 / psi;
                    let b2 = inv - 1.0 + (inv * (inv - 1.0)).sqrt();
                    let a = m / (1.0 + b2);
                    let zv: f64 = rng.sample(StandardNormal);
                    a * (b2.sqrt() + zv).powi(2)
                } else {
                    let pz = (psi - 1.0) / (psi + 1.0);
                    let beta = (1.0 - pz) / m;
                    let u: f64 = rng.random();
                    if u <= pz {
                        0.0
                    } else {
                        ((1.0 - pz) / (1.0 - u)).ln() / beta
                    }
                };
                let z: f64 = rng.sample(StandardNormal);
                log_s += p.rate * dt
                    + k0
                    + k1 * v
                    + k2 * v_next
                    + (k3 * (v + v_next)).max(0.0).sqrt() * z;
                v = v_next;
            }
        }
        prev = t;
        out.push((log_s - p.rate * t).exp());
    }
    out
}

fn sample_std(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// Kernel bandwidth used for the smoothed Monte Carlo marginals.
pub fn kde_bandwidth(samples: &[f64]) -> f64 {
    KDE_BANDWIDTH_FRACTION * sample_std(samples)
}

/// Marginals of the de-drifted price at `times` on `grid`, mean-corrected
/// to `spot` by exponential tilting and checked for convex order.
pub fn generate(params: &ModelParams, times: &[f64], grid: Arc<Grid>) -> Result<MarginalSequence> {
    params.validate()?;
    if times.is_empty() || times.windows(2).any(|w| !(w[0] < w[1])) || times[0] < 0.0 {
        return Err(Error::InvalidInput(
            "times must be non-negative and strictly increasing".into(),
        ));
    }
    if times[times.len() - 1] > params.horizon + 1e-12 {
        return Err(Error::InvalidInput(format!(
            "last time {} exceeds the horizon {}",
            times[times.len() - 1],
            params.horizon
        )));
    }
    if params.spot <= grid.lo() || params.spot >= grid.hi() {
        return Err(Error::InvalidInput("spot must lie inside the grid".into()));
    }

    let raw: Vec<Vec<f64>> = match params.model {
        Model::Gbm => times
            .iter()
            .map(|&t| {
                if t == 0.0 {
                    lognormal_or_point(&grid, params.spot, 0.0)
                } else {
                    lognormal_or_point(&grid, params.spot, params.vol * params.vol * t)
                }
            })
            .collect(),
        Model::Merton | Model::Heston => {
            let samples = simulate_paths(params, times)?;
            samples
                .par_iter()
                .map(|xs| kde_weights(&grid, xs, kde_bandwidth(xs)))
                .collect()
        }
    };

    let marginals = raw
        .into_iter()
        .map(|w| {
            let m = Marginal::from_unnormalized(grid.clone(), w)?;
            if m.weights().iter().filter(|w| **w > 0.0).count() <= 2 {
                // Degenerate laws (t = 0) are already exact point masses.
                Ok(m)
            } else {
                m.tilt_to_mean(params.spot)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let seq = MarginalSequence::new(times.to_vec(), marginals)?;
    require_convex_order(&seq, 1e-6)?;
    Ok(seq)
}

fn lognormal_or_point(grid: &Grid, spot: f64, total_var: f64) -> Vec<f64> {
    if total_var <= 0.0 {
        hat_project(grid.points(), |p| if p >= spot { (1.0, spot) } else { (0.0, 0.0) })
    } else {
        lognormal_weights(grid, spot, total_var)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::marginals::check_convex_order;

    fn grid(lo: f64, hi: f64, m: usize) -> Arc<Grid> {
        Arc::new(Grid::uniform(lo, hi, m).unwrap())
    }

    #[test]
    fn gbm_zero_drift_mean_is_spot() {
        let params = ModelParams {
            spot: 100.0,
            rate: 0.0,
            vol: 0.2,
            horizon: 1.0,
            ..Default::default()
        };
        let seq = generate(&params, &[0.1], grid(50.0, 150.0, 201)).unwrap();
        assert!((seq.marginal(0).mean() - 100.0).abs() < 1e-6);
    }

    #[test]
    fn gbm_is_convex_ordered_for_several_vols() {
        for (vol, horizon) in [(0.15, 0.5), (0.2, 0.2), (0.35, 1.0)] {
            let params = ModelParams {
                vol,
                horizon,
                rate: 0.03,
                ..Default::default()
            };
            let times: Vec<f64> = (0..=5).map(|k| horizon * k as f64 / 5.0).collect();
            let seq = generate(&params, &times, grid(0.1, 3.0, 120)).unwrap();
            let r = check_convex_order(&seq, 1e-8);
            assert!(r.ok, "vol {vol}: {r:?}");
        }
    }

    #[test]
    fn kde_bandwidth_is_five_percent_of_std() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        let std = (5.0f64 / 3.0).sqrt();
        assert_eq!(kde_bandwidth(&xs), 0.05 * std);
    }

    #[test]
    fn merton_has_heavier_left_tail_than_gbm() {
        let g = grid(0.3, 1.8, 301);
        let base = ModelParams {
            horizon: 1.0,
            paths: 10_000,
            seed: 7,
            ..Default::default()
        };
        let gbm = generate(&base, &[1.0], g.clone()).unwrap();
        let merton = generate(
            &ModelParams {
                model: Model::Merton,
                ..base.clone()
            },
            &[1.0],
            g,
        )
        .unwrap();
        let q_gbm = gbm.marginal(0).quantile(0.01);
        let q_mer = merton.marginal(0).quantile(0.01);
        assert!(q_mer < q_gbm, "merton {q_mer} vs gbm {q_gbm}");
    }

    #[test]
    fn heston_log_returns_have_excess_kurtosis() {
        let params = ModelParams {
            model: Model::Heston,
            horizon: 1.0,
            paths: 10_000,
            seed: 11,
            ..Default::default()
        };
        let samples = simulate_paths(&params, &[1.0]).unwrap();
        let r: Vec<f64> = samples[0].iter().map(|x| x.ln()).collect();
        let n = r.len() as f64;
        let mean = r.iter().sum::<f64>() / n;
        let m2 = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let m4 = r.iter().map(|v| (v - mean).powi(4)).sum::<f64>() / n;
        let excess = m4 / (m2 * m2) - 3.0;
        assert!(excess > 0.0, "excess kurtosis {excess}");
    }

    #[test]
    fn simulation_is_reproducible_across_thread_counts() {
        let params = ModelParams {
            model: Model::Merton,
            paths: 2500,
            seed: 3,
            ..Default::default()
        };
        let a = simulate_paths(&params, &[0.1, 0.2]).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let b = pool.install(|| simulate_paths(&params, &[0.1, 0.2]).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn merton_marginals_are_mean_corrected() {
        let params = ModelParams {
            model: Model::Merton,
            rate: 0.05,
            ..Default::default()
        };
        let seq = generate(&params, &[0.05, 0.1, 0.2], grid(0.3, 1.8, 151)).unwrap();
        for m in seq.marginals() {
            assert!((m.mean() - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn times_past_horizon_rejected() {
        let params = ModelParams::default();
        assert!(generate(&params, &[0.1, 0.5], grid(0.3, 1.8, 51)).is_err());
    }
}
