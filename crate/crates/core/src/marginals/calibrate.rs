//! Implied marginals from call quotes.
//!
//! Each maturity is fitted independently by minimising the squared repricing
//! error plus a total-variation penalty over the probability simplex with the
//! mean pinned to the forward. The feasible set is handled by an exact
//! Euclidean projection; see [`project_simplex_mean`].

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{Marginal, MarginalSequence};
use crate::error::{Error, Result};
use crate::grid::Grid;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptionQuote {
    pub maturity: f64,
    pub strike: f64,
    pub mid: f64,
    pub spread: f64,
}

impl OptionQuote {
    fn validate(&self) -> Result<()> {
        let ok = self.maturity.is_finite()
            && self.maturity >= 0.0
            && self.strike.is_finite()
            && self.spread >= 0.0
            && self.mid - 0.5 * self.spread >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!("bad quote {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibrationConfig {
    /// Weight of the total-variation penalty.
    pub tv_weight: f64,
    pub max_iters: usize,
    /// Stop once the sup-norm change of the density falls below this.
    pub step_tol: f64,
    /// Forward (common mean) of every calibrated marginal.
    pub forward: f64,
    /// Confidence level used for the calibration radius.
    pub alpha: f64,
    /// Numerator of the diminishing step rule used with a TV penalty.
    pub step_scale: f64,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            tv_weight: 1e-4,
            max_iters: 1_000_000,
            step_tol: 1e-9,
            forward: 1.0,
            alpha: 0.05,
            step_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CalibrationResult {
    pub marginals: MarginalSequence,
    /// Per-maturity Wasserstein radius from bid-ask noise.
    pub deltas: Vec<f64>,
    pub iters: Vec<usize>,
    /// Largest absolute repricing error per maturity.
    pub max_abs_error: Vec<f64>,
}

/// Radius `(s/2) sqrt(2 (1 + ln(2/alpha)) / M_q)` implied by an average
/// spread `s` over `m_q` quotes at confidence `alpha`.
pub fn calibration_delta(spread: f64, m_q: usize, alpha: f64) -> f64 {
    0.5 * spread * (2.0 * (1.0 + (2.0 / alpha).ln()) / m_q as f64).sqrt()
}

/// Quotes grouped by maturity, maturities ascending, strikes ascending.
pub fn group_quotes(quotes: &[OptionQuote]) -> Vec<(f64, Vec<OptionQuote>)> {
    let mut sorted = quotes.to_vec();
    sorted.sort_by(|a, b| {
        a.maturity
            .total_cmp(&b.maturity)
            .then(a.strike.total_cmp(&b.strike))
    });
    let mut out: Vec<(f64, Vec<OptionQuote>)> = Vec::new();
    for q in sorted {
        match out.last_mut() {
            Some((t, group)) if *t == q.maturity => group.push(q),
            _ => out.push((q.maturity, vec![q])),
        }
    }
    out
}

/// Euclidean projection of `v` onto `{p >= 0, sum p = 1, sum x p = mean}`.
///
/// The projection has the form `p = max(0, v - a - b x)`. For fixed `b` the
/// shift `a` follows from the usual sorted simplex rule, and the resulting
/// mean is non-increasing and piecewise linear in `b`, so a safeguarded
/// Newton iteration on `b` terminates in a handful of steps.
pub fn project_simplex_mean(v: &[f64], x: &[f64], mean: f64, out: &mut [f64]) -> Result<()> {
    let n = v.len();
    let (lo, hi) = (x[0], x[n - 1]);
    if !(mean > lo && mean < hi) {
        if mean == lo || mean == hi {
            out.fill(0.0);
            out[if mean == lo { 0 } else { n - 1 }] = 1.0;
            return Ok(());
        }
        return Err(Error::Infeasible(format!(
            "forward {mean} outside the grid hull [{lo}, {hi}]"
        )));
    }
    let mut w = vec![0.0; n];
    let mut idx: Vec<usize> = (0..n).collect();
    // Returns (mean, slope) of the projection for the given b and fills out.
    let mut eval = |b: f64, out: &mut [f64]| -> (f64, f64) {
        for i in 0..n {
            w[i] = v[i] - b * x[i];
        }
        idx.sort_unstable_by(|&i, &j| w[j].total_cmp(&w[i]));
        let mut sum = 0.0;
        let mut a = 0.0;
        for (k, &i) in idx.iter().enumerate() {
            sum += w[i];
            let cand = (sum - 1.0) / (k + 1) as f64;
            if k + 1 == n || w[idx[k + 1]] <= cand {
                a = cand;
                break;
            }
        }
        let (mut s0, mut s1, mut s2, mut m) = (0.0, 0.0, 0.0, 0.0);
        for i in 0..n {
            let p = (w[i] - a).max(0.0);
            out[i] = p;
            m += p * x[i];
            if p > 0.0 {
                s0 += 1.0;
                s1 += x[i];
                s2 += x[i] * x[i];
            }
        }
        let slope = if s0 > 0.0 { -(s2 - s1 * s1 / s0) } else { 0.0 };
        (m, slope)
    };

    let scale = hi - lo;
    let tol = 1e-15 * hi.abs().max(lo.abs()).max(1.0);
    let mut b = 0.0;
    let mut b_lo = f64::NEG_INFINITY; // mean(b_lo) > target
    let mut b_hi = f64::INFINITY; // mean(b_hi) < target
    for _ in 0..500 {
        let (m, slope) = eval(b, out);
        let r = m - mean;
        if r.abs() <= tol {
            return Ok(());
        }
        if r > 0.0 {
            b_lo = b;
        } else {
            b_hi = b;
        }
        let mut next = if slope < 0.0 { b - r / slope } else { f64::NAN };
        if !(next > b_lo && next < b_hi) {
            next = match (b_lo.is_finite(), b_hi.is_finite()) {
                (true, true) => 0.5 * (b_lo + b_hi),
                (true, false) => b_lo + (2.0 * b_lo.abs()).max(1.0 / scale),
                (false, true) => b_hi - (2.0 * b_hi.abs()).max(1.0 / scale),
                (false, false) => unreachable!(),
            };
        }
        if next == b {
            break;
        }
        b = next;
    }
    let (m, _) = eval(b, out);
    if (m - mean).abs() <= 1e-12 * scale.max(1.0) {
        Ok(())
    } else {
        Err(Error::Infeasible(format!(
            "mean projection stalled at residual {:.3e}",
            m - mean
        )))
    }
}

struct Fit {
    density: Vec<f64>,
    iters: usize,
    max_abs_error: f64,
}

fn call_matrix(x: &[f64], strikes: &[f64]) -> Vec<Vec<f64>> {
    strikes
        .iter()
        .map(|&k| x.iter().map(|&xi| (xi - k).max(0.0)).collect())
        .collect()
}

fn apply(a: &[Vec<f64>], p: &[f64]) -> Vec<f64> {
    a.iter()
        .map(|row| row.iter().zip(p).map(|(r, q)| r * q).sum())
        .collect()
}

fn apply_t(a: &[Vec<f64>], r: &[f64], out: &mut [f64]) {
    out.fill(0.0);
    for (row, ri) in a.iter().zip(r) {
        for (o, aij) in out.iter_mut().zip(row) {
            *o += aij * ri;
        }
    }
}

/// Largest eigenvalue of `A^T A` by power iteration.
fn gram_norm(a: &[Vec<f64>], m: usize) -> f64 {
    let mut v = vec![1.0 / (m as f64).sqrt(); m];
    let mut w = vec![0.0; m];
    let mut lambda = 0.0;
    for _ in 0..200 {
        let av = apply(a, &v);
        apply_t(a, &av, &mut w);
        let norm = w.iter().map(|z| z * z).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        let next = norm;
        for (vi, wi) in v.iter_mut().zip(&w) {
            *vi = wi / norm;
        }
        if (next - lambda).abs() <= 1e-12 * next {
            return next;
        }
        lambda = next;
    }
    lambda
}

fn total_variation(p: &[f64]) -> f64 {
    p.windows(2).map(|w| (w[1] - w[0]).abs()).sum()
}

fn fit_maturity(x: &[f64], quotes: &[OptionQuote], cfg: &CalibrationConfig) -> Result<Fit> {
    let m = x.len();
    let strikes: Vec<f64> = quotes.iter().map(|q| q.strike).collect();
    let target: Vec<f64> = quotes.iter().map(|q| q.mid).collect();
    let a = call_matrix(x, &strikes);
    let lip = 2.0 * gram_norm(&a, m) * 1.000_001 + f64::MIN_POSITIVE;
    let lam = cfg.tv_weight;

    let objective = |p: &[f64]| -> f64 {
        let r = apply(&a, p);
        r.iter().zip(&target).map(|(ri, ci)| (ri - ci).powi(2)).sum::<f64>()
            + lam * total_variation(p)
    };

    let mut p = vec![0.0; m];
    project_simplex_mean(&vec![1.0 / m as f64; m], x, cfg.forward, &mut p)?;
    let mut y = p.clone();
    let mut t_mom = 1.0f64;
    let mut grad = vec![0.0; m];
    let mut next = vec![0.0; m];
    let mut trial = vec![0.0; m];
    let mut best = p.clone();
    let mut best_obj = objective(&p);
    let mut prev_obj = best_obj;
    let mut last_change = f64::NAN;

    for k in 0..cfg.max_iters {
        let point = if lam == 0.0 { &y } else { &p };
        let r: Vec<f64> = apply(&a, point)
            .iter()
            .zip(&target)
            .map(|(ri, ci)| 2.0 * (ri - ci))
            .collect();
        apply_t(&a, &r, &mut grad);
        if lam > 0.0 {
            for i in 0..m {
                let left = if i > 0 { (point[i] - point[i - 1]).signum() } else { 0.0 };
                let right = if i + 1 < m { (point[i + 1] - point[i]).signum() } else { 0.0 };
                grad[i] += lam * (left - right);
            }
        }
        let step = if lam == 0.0 {
            1.0 / lip
        } else {
            (1.0 / lip).min(cfg.step_scale / (k + 1) as f64)
        };
        for i in 0..m {
            trial[i] = point[i] - step * grad[i];
        }
        project_simplex_mean(&trial, x, cfg.forward, &mut next)?;

        let change = next
            .iter()
            .zip(&p)
            .map(|(u, v)| (u - v).abs())
            .fold(0.0, f64::max);
        last_change = change;
        let obj = objective(&next);
        if lam == 0.0 {
            // Accelerated step with function-value restart.
            if obj > prev_obj {
                t_mom = 1.0;
                y.copy_from_slice(&p);
                continue;
            }
            let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t_mom * t_mom).sqrt());
            let beta = (t_mom - 1.0) / t_next;
            for i in 0..m {
                y[i] = next[i] + beta * (next[i] - p[i]);
            }
            t_mom = t_next;
        }
        p.copy_from_slice(&next);
        prev_obj = obj;
        if obj <= best_obj {
            best_obj = obj;
            best.copy_from_slice(&p);
        }
        if change < cfg.step_tol {
            let err = max_abs_error(&a, &best, &target);
            return Ok(Fit {
                density: best,
                iters: k + 1,
                max_abs_error: err,
            });
        }
    }
    Err(Error::NotConverged {
        iters: cfg.max_iters,
        last_step: last_change,
    })
}

fn max_abs_error(a: &[Vec<f64>], p: &[f64], target: &[f64]) -> f64 {
    apply(a, p)
        .iter()
        .zip(target)
        .map(|(r, c)| (r - c).abs())
        .fold(0.0, f64::max)
}

/// Calibrate one marginal per maturity from call quotes.
pub fn calibrate(
    quotes: &[OptionQuote],
    grid: Arc<Grid>,
    cfg: &CalibrationConfig,
) -> Result<CalibrationResult> {
    if quotes.is_empty() {
        return Err(Error::Infeasible("no quotes to calibrate".into()));
    }
    if !(cfg.tv_weight >= 0.0) || !(cfg.alpha > 0.0 && cfg.alpha < 1.0) || !(cfg.step_tol > 0.0) {
        return Err(Error::InvalidInput("bad calibration configuration".into()));
    }
    for q in quotes {
        q.validate()?;
        if q.strike < grid.lo() || q.strike > grid.hi() {
            return Err(Error::InvalidInput(format!(
                "strike {} outside the grid [{}, {}]",
                q.strike,
                grid.lo(),
                grid.hi()
            )));
        }
    }
    let groups = group_quotes(quotes);
    let mut times = Vec::new();
    let mut marginals = Vec::new();
    let mut deltas = Vec::new();
    let mut iters = Vec::new();
    let mut errors = Vec::new();
    for (t, group) in &groups {
        let mut distinct: Vec<f64> = group.iter().map(|q| q.strike).collect();
        distinct.dedup();
        if distinct.len() < 2 {
            return Err(Error::InvalidInput(format!(
                "maturity {t} has fewer than 2 strikes"
            )));
        }
        let fit = fit_maturity(grid.points(), group, cfg)?;
        let mean_spread = group.iter().map(|q| q.spread).sum::<f64>() / group.len() as f64;
        deltas.push(calibration_delta(mean_spread, group.len(), cfg.alpha));
        iters.push(fit.iters);
        errors.push(fit.max_abs_error);
        times.push(*t);
        marginals.push(Marginal::new(grid.clone(), fit.density)?);
    }
    Ok(CalibrationResult {
        marginals: MarginalSequence::new(times, marginals)?,
        deltas,
        iters,
        max_abs_error: errors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn planted_quotes(x: &[f64], p: &[f64], t: f64) -> Vec<OptionQuote> {
        x.iter()
            .map(|&k| OptionQuote {
                maturity: t,
                strike: k,
                mid: x.iter().zip(p).map(|(xi, pi)| (xi - k).max(0.0) * pi).sum(),
                spread: 0.0,
            })
            .collect()
    }

    #[test]
    fn planted_density_is_recovered() {
        let grid = Arc::new(Grid::uniform(0.6, 1.4, 9).unwrap());
        let x = grid.points().to_vec();
        let mut p = vec![0.0; 9];
        for (i, w) in [(1, 0.1), (3, 0.25), (4, 0.3), (5, 0.2), (7, 0.15)] {
            p[i] = w;
        }
        let forward: f64 = x.iter().zip(&p).map(|(a, b)| a * b).sum();
        let cfg = CalibrationConfig {
            tv_weight: 0.0,
            step_tol: 1e-13,
            forward,
            ..Default::default()
        };
        let res = calibrate(&planted_quotes(&x, &p, 0.5), grid, &cfg).unwrap();
        assert!(res.max_abs_error[0] < 1e-8, "{:?}", res.max_abs_error);
        let m = res.marginals.marginal(0);
        assert!((m.mean() - forward).abs() < 1e-10);
    }

    #[test]
    fn delta_closed_form() {
        let d = calibration_delta(0.02, 100, 0.05);
        let expect = 0.01 * (2.0 * (1.0 + 40f64.ln()) / 100.0).sqrt();
        assert!((d - expect).abs() < 1e-15);
    }

    #[test]
    fn delta_monotone_on_lattice() {
        let spreads = [0.01, 0.02, 0.05];
        let counts = [10, 50, 200];
        for (i, &s) in spreads.iter().enumerate() {
            for (j, &n) in counts.iter().enumerate() {
                let d = calibration_delta(s, n, 0.05);
                if i + 1 < spreads.len() {
                    assert!(calibration_delta(spreads[i + 1], n, 0.05) > d);
                }
                if j + 1 < counts.len() {
                    assert!(calibration_delta(s, counts[j + 1], 0.05) < d);
                }
            }
        }
    }

    #[test]
    fn empty_quotes_infeasible() {
        let grid = Arc::new(Grid::uniform(0.5, 1.5, 11).unwrap());
        let err = calibrate(&[], grid, &CalibrationConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Infeasible(_)));
    }

    #[test]
    fn forward_outside_hull_infeasible() {
        let grid = Arc::new(Grid::uniform(0.5, 1.5, 11).unwrap());
        let quotes = planted_quotes(grid.points(), &[1.0 / 11.0; 11], 1.0);
        let cfg = CalibrationConfig {
            forward: 2.0,
            ..Default::default()
        };
        assert!(matches!(
            calibrate(&quotes, grid, &cfg).unwrap_err(),
            Error::Infeasible(_)
        ));
    }

    #[test]
    fn tv_regularized_output_is_on_the_simplex() {
        let grid = Arc::new(Grid::uniform(0.5, 1.5, 21).unwrap());
        let x = grid.points().to_vec();
        let raw: Vec<f64> = x.iter().map(|v| (-(v - 1.0f64).powi(2) / 0.02).exp()).collect();
        let z: f64 = raw.iter().sum();
        let p: Vec<f64> = raw.iter().map(|r| r / z).collect();
        let mut quotes = planted_quotes(&x, &p, 0.25);
        for q in &mut quotes {
            q.spread = 0.004;
            q.mid += 0.002;
        }
        let cfg = CalibrationConfig {
            tv_weight: 1e-4,
            step_tol: 1e-8,
            ..Default::default()
        };
        let res = calibrate(&quotes, grid, &cfg).unwrap();
        let m = res.marginals.marginal(0);
        assert!(m.weights().iter().all(|w| *w >= 0.0));
        assert!((m.weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((m.mean() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn projection_satisfies_constraints() {
        let x: Vec<f64> = (0..30).map(|i| i as f64 * 0.1).collect();
        let v: Vec<f64> = (0..30).map(|i| ((i * 7919) % 13) as f64 * 0.05 - 0.2).collect();
        let mut out = vec![0.0; 30];
        project_simplex_mean(&v, &x, 1.7, &mut out).unwrap();
        assert!(out.iter().all(|p| *p >= 0.0));
        assert!((out.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let mean: f64 = out.iter().zip(&x).map(|(p, xi)| p * xi).sum();
        assert!((mean - 1.7).abs() < 1e-12);
    }
}
