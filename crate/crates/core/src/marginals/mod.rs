//! Marginal laws on a grid, convex-order diagnostics, synthetic generation
//! and calibration from call quotes.

mod calibrate;
mod generate;

pub use calibrate::{
    calibrate, calibration_delta, group_quotes, CalibrationConfig, CalibrationResult, OptionQuote,
};
pub use generate::{generate, simulate_paths, Model, ModelParams};

use std::sync::Arc;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::tilt::{solve_tilt, TiltStatus};

pub const PROBABILITY_TOL: f64 = 1e-12;
/// Mean agreement required inside a sequence, relative to the grid scale.
pub const MEAN_TOL_REL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct Marginal {
    grid: Arc<Grid>,
    weights: Vec<f64>,
}

impl Marginal {
    pub fn new(grid: Arc<Grid>, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != grid.len() {
            return Err(Error::InvalidInput(format!(
                "marginal has {} weights for a grid of {} points",
                weights.len(),
                grid.len()
            )));
        }
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::InvalidInput(
                "marginal weights must be finite and non-negative".into(),
            ));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > PROBABILITY_TOL {
            return Err(Error::InvalidInput(format!(
                "marginal weights sum to {total}, expected 1"
            )));
        }
        Ok(Self { grid, weights })
    }

    /// Normalizes `weights` to unit mass.
    pub fn from_unnormalized(grid: Arc<Grid>, weights: Vec<f64>) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) || !total.is_finite() {
            return Err(Error::InvalidInput("marginal has no mass".into()));
        }
        Self::new(grid, weights.into_iter().map(|w| w / total).collect())
    }

    /// Unit mass at `x`, split linearly between the two neighbouring points
    /// so that the mean is exactly `x`.
    pub fn point_mass(grid: Arc<Grid>, x: f64) -> Result<Self> {
        if x < grid.lo() || x > grid.hi() {
            return Err(Error::InvalidInput(format!(
                "point mass at {x} outside the grid"
            )));
        }
        let w = hat_project(grid.points(), |p| {
            if p >= x {
                (1.0, x)
            } else {
                (0.0, 0.0)
            }
        });
        Self::from_unnormalized(grid, w)
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn mean(&self) -> f64 {
        self.weights
            .iter()
            .zip(self.grid.points())
            .map(|(w, x)| w * x)
            .sum()
    }

    pub fn variance(&self) -> f64 {
        let m = self.mean();
        self.weights
            .iter()
            .zip(self.grid.points())
            .map(|(w, x)| w * (x - m) * (x - m))
            .sum()
    }

    pub fn call_price(&self, strike: f64) -> f64 {
        self.weights
            .iter()
            .zip(self.grid.points())
            .map(|(w, x)| w * (x - strike).max(0.0))
            .sum()
    }

    /// Call prices struck at every grid point, via suffix sums.
    pub fn call_curve(&self) -> Vec<f64> {
        let x = self.grid.points();
        let m = x.len();
        let mut out = vec![0.0; m];
        let (mut s0, mut s1) = (0.0, 0.0);
        for j in (0..m).rev() {
            out[j] = s1 - x[j] * s0;
            s0 += self.weights[j];
            s1 += self.weights[j] * x[j];
        }
        out
    }

    pub fn cdf(&self) -> Vec<f64> {
        let mut acc = 0.0;
        self.weights
            .iter()
            .map(|w| {
                acc += w;
                acc
            })
            .collect()
    }

    /// Smallest grid point whose cumulative mass reaches `p`.
    pub fn quantile(&self, p: f64) -> f64 {
        let mut acc = 0.0;
        for (w, x) in self.weights.iter().zip(self.grid.points()) {
            acc += w;
            if acc >= p {
                return *x;
            }
        }
        self.grid.hi()
    }

    /// Moves the law onto another grid with the linear-interpolation (hat)
    /// kernel. Means and call prices at target nodes are preserved for mass
    /// inside the target hull; mass outside is clamped to the end points.
    pub fn transfer_to(&self, target: Arc<Grid>) -> Result<Marginal> {
        let src = self.grid.points();
        let w = &self.weights;
        let mut order: Vec<usize> = (0..src.len()).filter(|&i| w[i] > 0.0).collect();
        order.sort_by(|&a, &b| src[a].total_cmp(&src[b]));
        let prefix_p: Vec<f64> = order
            .iter()
            .scan(0.0, |acc, &i| {
                *acc += w[i];
                Some(*acc)
            })
            .collect();
        let prefix_e: Vec<f64> = order
            .iter()
            .scan(0.0, |acc, &i| {
                *acc += w[i] * src[i];
                Some(*acc)
            })
            .collect();
        let weights = hat_project(target.points(), |p| {
            let k = order.partition_point(|&i| src[i] <= p);
            if k == 0 {
                (0.0, 0.0)
            } else {
                (prefix_p[k - 1], prefix_e[k - 1])
            }
        });
        Marginal::from_unnormalized(target, weights)
    }

    /// Exponentially tilts the weights so the mean equals `target`.
    pub fn tilt_to_mean(&self, target: f64) -> Result<Marginal> {
        let x = self.grid.points();
        let logw: Vec<f64> = self.weights.iter().map(|w| w.ln()).collect();
        let z: Vec<f64> = x.iter().map(|xi| xi - target).collect();
        let scale = 1.0 / self.grid.diameter();
        let t = solve_tilt(
            &logw,
            &z,
            0.0,
            0.0,
            1e-14 * self.grid.hi().abs().max(1.0),
            1e4 * scale,
            200,
        );
        if t.status != TiltStatus::Converged {
            return Err(Error::Infeasible(format!(
                "cannot tilt marginal to mean {target}"
            )));
        }
        let raw: Vec<f64> = logw
            .iter()
            .zip(&z)
            .map(|(l, zi)| (l + t.s * zi).exp())
            .collect();
        Marginal::from_unnormalized(self.grid.clone(), raw)
    }
}

/// Projects a law given by its running totals `F(p) = P(X <= p)` and
/// `G(p) = E[X; X <= p]` onto grid nodes with hat functions. Mass below the
/// first node goes to the first node and mass above the last to the last.
pub(crate) fn hat_project(points: &[f64], totals: impl Fn(f64) -> (f64, f64)) -> Vec<f64> {
    let m = points.len();
    let ft: Vec<(f64, f64)> = points.iter().map(|&p| totals(p)).collect();
    let mut w = vec![0.0; m];
    w[0] += ft[0].0;
    for i in 0..m - 1 {
        let (a, b) = (points[i], points[i + 1]);
        let p = ft[i + 1].0 - ft[i].0;
        let e = ft[i + 1].1 - ft[i].1;
        let h = b - a;
        w[i] += ((b * p - e) / h).max(0.0);
        w[i + 1] += ((e - a * p) / h).max(0.0);
    }
    w[m - 1] += (1.0 - ft[m - 1].0).max(0.0);
    w
}

#[derive(Debug, Clone, PartialEq)]
pub struct MarginalSequence {
    times: Vec<f64>,
    marginals: Vec<Marginal>,
}

impl MarginalSequence {
    pub fn new(times: Vec<f64>, marginals: Vec<Marginal>) -> Result<Self> {
        if marginals.is_empty() || times.len() != marginals.len() {
            return Err(Error::InvalidInput(format!(
                "{} times for {} marginals",
                times.len(),
                marginals.len()
            )));
        }
        if times.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::InvalidInput(
                "marginal times must be strictly increasing".into(),
            ));
        }
        let grid = marginals[0].grid.clone();
        for m in &marginals[1..] {
            if !Arc::ptr_eq(&grid, &m.grid) && *grid != *m.grid {
                return Err(Error::GridMismatch);
            }
        }
        let tol = MEAN_TOL_REL * grid.hi().abs().max(grid.lo().abs()).max(1.0);
        let m0 = marginals[0].mean();
        for (t, m) in marginals.iter().enumerate() {
            if (m.mean() - m0).abs() > tol {
                return Err(Error::InvalidInput(format!(
                    "mean of marginal {t} is {} but marginal 0 has {m0}",
                    m.mean()
                )));
            }
        }
        // Share one allocation for the grid.
        let marginals = marginals
            .into_iter()
            .map(|m| Marginal {
                grid: grid.clone(),
                weights: m.weights,
            })
            .collect();
        Ok(Self { times, marginals })
    }

    pub fn from_weights(grid: Arc<Grid>, times: Vec<f64>, weights: Vec<Vec<f64>>) -> Result<Self> {
        let marginals = weights
            .into_iter()
            .map(|w| Marginal::new(grid.clone(), w))
            .collect::<Result<Vec<_>>>()?;
        Self::new(times, marginals)
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.marginals[0].grid
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn marginals(&self) -> &[Marginal] {
        &self.marginals
    }

    pub fn marginal(&self, t: usize) -> &Marginal {
        &self.marginals[t]
    }

    /// Number of transition steps (number of marginals minus one).
    pub fn steps(&self) -> usize {
        self.marginals.len() - 1
    }

    pub fn push(&self, time: f64, marginal: Marginal) -> Result<Self> {
        let mut times = self.times.clone();
        let mut ms = self.marginals.clone();
        times.push(time);
        ms.push(marginal);
        Self::new(times, ms)
    }

    /// First `n` marginals.
    pub fn prefix(&self, n: usize) -> Result<Self> {
        Self::new(self.times[..n].to_vec(), self.marginals[..n].to_vec())
    }

    pub fn transfer_to(&self, target: Arc<Grid>) -> Result<Self> {
        let ms = self
            .marginals
            .iter()
            .map(|m| m.transfer_to(target.clone()))
            .collect::<Result<Vec<_>>>()?;
        Self::new(self.times.clone(), ms)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvexOrderReport {
    pub ok: bool,
    /// Largest `|mean_t - mean_0|`.
    pub max_mean_gap: f64,
    /// Step `t` (comparing marginal `t-1` with `t`) of the worst call-curve violation.
    pub worst_step: usize,
    pub worst_strike: f64,
    /// Largest `C_{t-1}(K) - C_t(K)`; positive means the order fails there.
    pub worst_violation: f64,
}

/// Checks equal means and pointwise-dominating call curves at every grid
/// strike, which together characterize convex order on a grid.
pub fn check_convex_order(seq: &MarginalSequence, tol: f64) -> ConvexOrderReport {
    let x = seq.grid().points();
    let m0 = seq.marginal(0).mean();
    let max_mean_gap = seq
        .marginals()
        .iter()
        .map(|m| (m.mean() - m0).abs())
        .fold(0.0, f64::max);
    let curves: Vec<Vec<f64>> = seq.marginals().iter().map(|m| m.call_curve()).collect();
    let mut worst = (0usize, x[0], f64::NEG_INFINITY);
    for t in 1..curves.len() {
        for (j, k) in x.iter().enumerate() {
            let v = curves[t - 1][j] - curves[t][j];
            if v > worst.2 {
                worst = (t, *k, v);
            }
        }
    }
    if curves.len() < 2 {
        worst.2 = 0.0;
    }
    ConvexOrderReport {
        ok: max_mean_gap <= tol && worst.2 <= tol,
        max_mean_gap,
        worst_step: worst.0,
        worst_strike: worst.1,
        worst_violation: worst.2,
    }
}

/// Returns an error describing the worst violation when the sequence is
/// not in convex order at `tol`.
pub fn require_convex_order(seq: &MarginalSequence, tol: f64) -> Result<()> {
    let r = check_convex_order(seq, tol);
    if r.ok {
        Ok(())
    } else if r.max_mean_gap > tol {
        Err(Error::ConvexOrderViolation {
            time_index: 0,
            strike: f64::NAN,
            violation: r.max_mean_gap,
        })
    } else {
        Err(Error::ConvexOrderViolation {
            time_index: r.worst_step,
            strike: r.worst_strike,
            violation: r.worst_violation,
        })
    }
}
