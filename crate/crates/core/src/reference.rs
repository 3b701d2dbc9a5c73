//! The reference martingale chain `Q`.
//!
//! Each transition row is a discretised Gaussian centred at the current
//! point, mixed with a uniform floor so that every entry is strictly
//! positive, and exponentially tilted so that the row mean equals the
//! current point. Rows whose point sits on (or too close to) the edge of the
//! grid cannot be centred exactly; they keep the closest achievable mean and
//! the residual is reported per row.
//!
//! A banded variant truncates each row at a fixed number of standard
//! deviations instead of flooring it. Its kernels are sparse, which makes
//! long chains with many short steps affordable; it is a discretised random
//! walk rather than a full-support reference.

use std::collections::HashMap;
use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::tilt::{solve_tilt, tilted_moments, TiltStatus};

/// Default reference volatility (annualised, relative to the spot level).
pub const DEFAULT_REF_VOL: f64 = 0.2;
/// Default uniform floor added to every reference transition.
pub const DEFAULT_FLOOR: f64 = 1e-9;

const ROW_TILT_MAX_ITER: usize = 100;

/// One transition matrix of the reference chain, row-major.
#[derive(Debug, Clone)]
pub struct RefKernel {
    m: usize,
    probs: Vec<f64>,
    log_probs: Vec<f64>,
    /// Row mean minus the row's point.
    defect: Vec<f64>,
    /// Tilt applied to the Gaussian part of each row.
    tilt: Vec<f64>,
}

impl RefKernel {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.probs[i * self.m..(i + 1) * self.m]
    }

    pub fn log_row(&self, i: usize) -> &[f64] {
        &self.log_probs[i * self.m..(i + 1) * self.m]
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn defects(&self) -> &[f64] {
        &self.defect
    }

    pub fn tilts(&self) -> &[f64] {
        &self.tilt
    }
}

#[derive(Debug, Clone)]
pub struct ReferenceChain {
    grid: Arc<Grid>,
    times: Vec<f64>,
    sigma: f64,
    floor: f64,
    band: Option<f64>,
    init: Vec<f64>,
    kernels: Vec<Arc<RefKernel>>,
}

#[derive(Debug, Clone, Copy)]
enum RowShape {
    Floored(f64),
    /// Keep `|y - x| <= width * sd`, and at least the nearest neighbours.
    Banded(f64),
}

/// Build the reference chain for `times` on `grid`.
///
/// `sigma` is an absolute volatility in grid units per square-root year: a
/// step of length `dt` uses a Gaussian of variance `sigma^2 dt`.
pub fn build_reference(grid: Arc<Grid>, times: &[f64], sigma: f64, floor: f64) -> Result<ReferenceChain> {
    ReferenceChain::build(grid, times, sigma, floor)
}

impl ReferenceChain {
    pub fn build(grid: Arc<Grid>, times: &[f64], sigma: f64, floor: f64) -> Result<Self> {
        let m = grid.len();
        if !(floor > 0.0 && floor <= 1e-6) || floor * m as f64 >= 1.0 {
            return Err(Error::InvalidInput(format!(
                "reference floor {floor} must lie in (0, 1e-6] with M * floor < 1"
            )));
        }
        Self::build_shaped(grid, times, sigma, RowShape::Floored(floor))
    }

    /// Sparse reference: Gaussian rows truncated at `width` standard
    /// deviations (always keeping the nearest neighbours), without a floor.
    pub fn build_banded(grid: Arc<Grid>, times: &[f64], sigma: f64, width: f64) -> Result<Self> {
        if !(width >= 1.0) || !width.is_finite() {
            return Err(Error::InvalidInput("band width must be at least one standard deviation".into()));
        }
        Self::build_shaped(grid, times, sigma, RowShape::Banded(width))
    }

    fn build_shaped(grid: Arc<Grid>, times: &[f64], sigma: f64, shape: RowShape) -> Result<Self> {
        let m = grid.len();
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(Error::InvalidInput("reference volatility must be positive".into()));
        }
        if times.is_empty() || times.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::InvalidInput("times must be strictly increasing".into()));
        }
        // Steps whose lengths agree to 1e-12 share one kernel.
        let mut cache: HashMap<i64, Arc<RefKernel>> = HashMap::new();
        let mut kernels = Vec::with_capacity(times.len() - 1);
        for w in times.windows(2) {
            let dt = w[1] - w[0];
            let key = (dt * 1e12).round() as i64;
            let kernel = match cache.get(&key) {
                Some(k) => k.clone(),
                None => {
                    let k = Arc::new(build_kernel(&grid, sigma * sigma * dt, shape)?);
                    cache.insert(key, k.clone());
                    k
                }
            };
            kernels.push(kernel);
        }
        Ok(Self {
            init: vec![1.0 / m as f64; m],
            grid,
            times: times.to_vec(),
            sigma,
            floor: match shape {
                RowShape::Floored(f) => f,
                RowShape::Banded(_) => 0.0,
            },
            band: match shape {
                RowShape::Floored(_) => None,
                RowShape::Banded(w) => Some(w),
            },
            kernels,
        })
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    /// Uniform floor of every row; zero for a banded reference.
    pub fn floor(&self) -> f64 {
        self.floor
    }

    /// Truncation width in standard deviations, for a banded reference.
    pub fn band(&self) -> Option<f64> {
        self.band
    }

    pub fn init(&self) -> &[f64] {
        &self.init
    }

    /// Number of transitions.
    pub fn steps(&self) -> usize {
        self.kernels.len()
    }

    /// Transition from time index `t` to `t + 1`.
    pub fn kernel(&self, t: usize) -> &Arc<RefKernel> {
        &self.kernels[t]
    }

    /// Largest |row mean - x| over all rows of transition `t`.
    pub fn max_defect(&self, t: usize) -> f64 {
        self.kernels[t].defect.iter().fold(0.0, |a, d| a.max(d.abs()))
    }

    /// Largest |row mean - x| over rows at least `3 sigma sqrt(dt)` away
    /// from both grid edges.
    pub fn interior_defect(&self, t: usize) -> f64 {
        let dt = self.times[t + 1] - self.times[t];
        let reach = 3.0 * self.sigma * dt.sqrt();
        let x = self.grid.points();
        let (lo, hi) = (self.grid.lo(), self.grid.hi());
        let k = &self.kernels[t];
        (0..x.len())
            .filter(|&i| x[i] - lo >= reach && hi - x[i] >= reach)
            .fold(0.0, |a, i| a.max(k.defect[i].abs()))
    }

    /// Reference chain for the same grid and volatility on new times.
    pub fn with_times(&self, times: &[f64]) -> Result<Self> {
        match self.band {
            Some(w) => Self::build_banded(self.grid.clone(), times, self.sigma, w),
            None => Self::build(self.grid.clone(), times, self.sigma, self.floor),
        }
    }
}

fn build_kernel(grid: &Grid, var: f64, shape: RowShape) -> Result<RefKernel> {
    let x = grid.points();
    let m = x.len();
    let mf = m as f64;
    let sum_y: f64 = x.iter().sum();
    let tol = 1e-13 * grid.diameter();
    let s_max = 1e6 / grid.min_spacing();
    let rows: Vec<(Vec<f64>, f64, f64)> = (0..m)
        .into_par_iter()
        .map(|i| {
            let xi = x[i];
            let reach = match shape {
                RowShape::Floored(_) => f64::INFINITY,
                RowShape::Banded(w) => {
                    let below = if i > 0 { xi - x[i - 1] } else { 0.0 };
                    let above = if i + 1 < m { x[i + 1] - xi } else { 0.0 };
                    (w * var.sqrt()).max(below).max(above)
                }
            };
            let logw: Vec<f64> = x
                .iter()
                .map(|y| {
                    if (y - xi).abs() <= reach {
                        -(y - xi) * (y - xi) / (2.0 * var)
                    } else {
                        f64::NEG_INFINITY
                    }
                })
                .collect();
            let floor = match shape {
                RowShape::Floored(f) => f,
                RowShape::Banded(_) => 0.0,
            };
            // Mean the Gaussian part needs so that the floored row is centred.
            let target = (xi - floor * sum_y) / (1.0 - mf * floor);
            let z: Vec<f64> = x.iter().map(|y| y - target).collect();
            let t = solve_tilt(&logw, &z, 0.0, 0.0, tol, s_max, ROW_TILT_MAX_ITER);
            if t.status == TiltStatus::Stalled {
                return Err(Error::TiltDiverged { row: i });
            }
            let (log_z, _, _) = tilted_moments(&logw, &z, t.s);
            let row: Vec<f64> = logw
                .iter()
                .zip(&z)
                .map(|(l, zi)| floor + (1.0 - mf * floor) * (l + t.s * zi - log_z).exp())
                .collect();
            let mean: f64 = row.iter().zip(x).map(|(p, y)| p * y).sum();
            Ok((row, mean - xi, t.s))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut probs = Vec::with_capacity(m * m);
    let mut defect = Vec::with_capacity(m);
    let mut tilt = Vec::with_capacity(m);
    for (row, d, s) in rows {
        probs.extend(row);
        defect.push(d);
        tilt.push(s);
    }
    let log_probs = probs.iter().map(|p| p.ln()).collect();
    Ok(RefKernel {
        m,
        probs,
        log_probs,
        defect,
        tilt,
    })
}

/// Exponentially tilt the probability row `row` on points `y` so that its
/// mean equals `x`. Fails if `x` is outside the open hull of the support.
pub fn tilt_row(y: &[f64], x: f64, row: &[f64]) -> Result<Vec<f64>> {
    let logw: Vec<f64> = row.iter().map(|p| p.ln()).collect();
    let z: Vec<f64> = y.iter().map(|v| v - x).collect();
    let scale = y.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1.0);
    let t = solve_tilt(&logw, &z, 0.0, 0.0, 1e-15 * scale, 1e12, ROW_TILT_MAX_ITER);
    if t.status != TiltStatus::Converged {
        return Err(Error::TiltDiverged { row: 0 });
    }
    let (log_z, _, _) = tilted_moments(&logw, &z, t.s);
    Ok(logw
        .iter()
        .zip(&z)
        .map(|(l, zi)| (l + t.s * zi - log_z).exp())
        .collect())
}
