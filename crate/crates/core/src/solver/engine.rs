//! Log-domain alternating projections on a layered chain.
//!
//! With `phi_t = u_t / eps` lifted to states (minus infinity where the
//! target marginal vanishes) and `s = h / eps`, the Gibbs measure weights a
//! path by
//!
//! ```text
//! init(s_0) exp(phi_0(s_0)) prod_t Q_t(s_{t-1}, s_t) exp(phi_t(s_t) + s_{t-1} dx - c_t / eps)
//! ```
//!
//! Forward messages `alpha_t` and backward messages `beta_t` make every
//! marginal and every conditional row available in one pass each. An outer
//! iteration runs the marginal updates forward (`u_0 .. u_N`, reusing the
//! backward messages, which do not depend on earlier times) and then the
//! martingale updates backward (`h_N .. h_1`), rebuilding the backward
//! messages as it goes. Sweeping the tilts backward means every row sees the
//! final downstream messages, so the plan is exactly martingale at the end
//! of each iteration.

use std::sync::Arc;

use rayon::prelude::*;

use super::{DualPotentials, SolverConfig, TransportPlan};
use crate::chain::{log_sum_exp, Chain, Lse};
use crate::error::{Error, Result};
use crate::marginals::MarginalSequence;
use crate::tilt::{solve_tilt, tilted_moments, TiltStatus};

/// Source mass above which an infeasible martingale row aborts the solve.
pub const ROW_MASS_TOL: f64 = 1e-10;
/// Potentials beyond this size (in units of eps) have lost all precision.
const PHI_LIMIT: f64 = 1e12;

pub struct ChainSolver {
    chain: Arc<Chain>,
    x: Vec<f64>,
    mu: Vec<Vec<f64>>,
    log_mu: Vec<Vec<f64>>,
    free: Vec<bool>,
    eps: f64,
    cfg: SolverConfig,
    u: Vec<Vec<f64>>,
    h: Vec<Vec<f64>>,
    phi: Vec<Vec<f64>>,
    alpha: Vec<Vec<f64>>,
    beta: Vec<Vec<f64>>,
    s_max: f64,
    newton_tol: f64,
}

impl ChainSolver {
    pub fn new(
        chain: Arc<Chain>,
        marginals: &MarginalSequence,
        cfg: &SolverConfig,
        warm: Option<&DualPotentials>,
    ) -> Result<Self> {
        let n = chain.steps();
        if marginals.steps() != n {
            return Err(Error::InvalidInput(format!(
                "{} marginals for a chain with {} steps",
                marginals.marginals().len(),
                n
            )));
        }
        let layers: Vec<usize> = (0..=n).collect();
        Self::with_layers(chain, marginals, &layers, cfg, warm)
    }

    /// Solver whose `k`-th marginal constrains chain layer `layers[k]`.
    /// Layers without a marginal are free: their potential stays zero and
    /// only the martingale tilts act on them.
    pub fn with_layers(
        chain: Arc<Chain>,
        marginals: &MarginalSequence,
        layers: &[usize],
        cfg: &SolverConfig,
        warm: Option<&DualPotentials>,
    ) -> Result<Self> {
        cfg.validate()?;
        let grid = chain.grid().clone();
        if marginals.grid().points() != grid.points() {
            return Err(Error::GridMismatch);
        }
        let n = chain.steps();
        let ok = layers.len() == marginals.marginals().len()
            && layers.first() == Some(&0)
            && layers.last() == Some(&n)
            && layers.windows(2).all(|w| w[0] < w[1]);
        if !ok {
            return Err(Error::InvalidInput(
                "constrained layers must increase from 0 to the last layer".into(),
            ));
        }
        let m = grid.len();
        let mut mu = vec![vec![1.0; m]; n + 1];
        let mut free = vec![true; n + 1];
        for (k, &t) in layers.iter().enumerate() {
            mu[t] = marginals.marginal(k).weights().to_vec();
            free[t] = false;
        }
        let log_mu = mu.iter().map(|w| w.iter().map(|p| p.ln()).collect()).collect();
        let potentials = match warm {
            Some(p) => {
                p.check_shape(&chain)?;
                p.clone()
            }
            None => DualPotentials::zeros(&chain),
        };
        let DualPotentials { mut u, h } = potentials;
        for (t, ut) in u.iter_mut().enumerate() {
            if free[t] {
                ut.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let mut s = Self {
            x: grid.points().to_vec(),
            s_max: 1e6 / grid.min_spacing(),
            newton_tol: cfg.h_newton_tol * grid.diameter(),
            eps: cfg.epsilon,
            cfg: cfg.clone(),
            mu,
            log_mu,
            free,
            phi: Vec::new(),
            alpha: Vec::new(),
            beta: Vec::new(),
            u,
            h,
            chain,
        };
        s.phi = (0..=n).map(|t| s.lift(t)).collect();
        s.refresh();
        Ok(s)
    }

    pub fn chain(&self) -> &Arc<Chain> {
        &self.chain
    }

    pub fn epsilon(&self) -> f64 {
        self.eps
    }

    fn lift(&self, t: usize) -> Vec<f64> {
        self.chain
            .layer(t)
            .iter()
            .map(|&g| {
                let g = g as usize;
                if self.mu[t][g] > 0.0 {
                    self.u[t][g] / self.eps
                } else {
                    f64::NEG_INFINITY
                }
            })
            .collect()
    }

    /// Forward message into layer `t` without layer `t`'s own potential.
    fn forward_messages(&self, t: usize, alpha_prev: &[f64]) -> Vec<f64> {
        let step = self.chain.step(t);
        let from = self.chain.layer(t - 1);
        let to = self.chain.layer(t);
        let inv_eps = 1.0 / self.eps;
        let sig: Vec<f64> = self.h[t - 1].iter().map(|h| h * inv_eps).collect();
        let xf: Vec<f64> = from.iter().map(|&g| self.x[g as usize]).collect();
        (0..step.n_to())
            .into_par_iter()
            .with_min_len(32)
            .map(|j| {
                let xj = self.x[to[j] as usize];
                let mut acc = Lse::new();
                for &e in step.column(j) {
                    let e = e as usize;
                    let i = step.row_of(e);
                    let a = alpha_prev[i];
                    if a == f64::NEG_INFINITY {
                        continue;
                    }
                    acc.add(a + step.log_ref(e) - step.cost(e) * inv_eps + sig[i] * (xj - xf[i]));
                }
                acc.value()
            })
            .collect()
    }

    /// Backward message out of layer `t - 1` with the current tilts.
    fn backward_messages(&self, t: usize) -> Vec<f64> {
        let step = self.chain.step(t);
        let from = self.chain.layer(t - 1);
        let to = self.chain.layer(t);
        let inv_eps = 1.0 / self.eps;
        let phi = &self.phi[t];
        let beta = &self.beta[t];
        (0..step.n_from())
            .into_par_iter()
            .with_min_len(32)
            .map(|i| {
                let xi = self.x[from[i] as usize];
                let s = self.h[t - 1][i] * inv_eps;
                let mut acc = Lse::new();
                for e in step.row(i) {
                    let j = step.col(e);
                    let tail = phi[j] + beta[j];
                    if tail == f64::NEG_INFINITY {
                        continue;
                    }
                    acc.add(
                        step.log_ref(e) - step.cost(e) * inv_eps
                            + s * (self.x[to[j] as usize] - xi)
                            + tail,
                    );
                }
                acc.value()
            })
            .collect()
    }

    /// Recompute every forward and backward message from the potentials.
    pub fn refresh(&mut self) {
        let n = self.chain.steps();
        self.beta = vec![Vec::new(); n + 1];
        self.beta[n] = vec![0.0; self.chain.layer(n).len()];
        for t in (1..=n).rev() {
            self.beta[t - 1] = self.backward_messages(t);
        }
        self.alpha = vec![Vec::new(); n + 1];
        self.alpha[0] = self.alpha_zero();
        for t in 1..=n {
            let at = self.forward_messages(t, &self.alpha[t - 1]);
            self.alpha[t] = at.iter().zip(&self.phi[t]).map(|(a, p)| a + p).collect();
        }
    }

    fn alpha_zero(&self) -> Vec<f64> {
        self.chain
            .init_log()
            .iter()
            .zip(&self.phi[0])
            .map(|(a, p)| a + p)
            .collect()
    }

    /// Closed-form marginal update at time `t` given the forward message
    /// `at` (without layer `t`'s potential) and the current backward message.
    fn update_u(&mut self, t: usize, at: Vec<f64>) -> Result<()> {
        if self.free[t] {
            self.alpha[t] = at.iter().zip(&self.phi[t]).map(|(a, p)| a + p).collect();
            return Ok(());
        }
        let layer = self.chain.layer(t);
        let m = self.x.len();
        let mut acc = vec![Lse::new(); m];
        for (s, &g) in layer.iter().enumerate() {
            acc[g as usize].add(at[s] + self.beta[t][s]);
        }
        for g in 0..m {
            if self.mu[t][g] > 0.0 {
                let lm = acc[g].value();
                if lm == f64::NEG_INFINITY {
                    return Err(Error::Infeasible(format!(
                        "grid point {} is unreachable at time index {t}",
                        self.x[g]
                    )));
                }
                self.u[t][g] = self.eps * (self.log_mu[t][g] - lm);
            } else {
                self.u[t][g] = 0.0;
            }
        }
        self.phi[t] = self.lift(t);
        self.alpha[t] = at.iter().zip(&self.phi[t]).map(|(a, p)| a + p).collect();
        Ok(())
    }

    /// Tilt of row `i` of step `t` and the resulting backward message.
    fn solve_row(&self, t: usize, i: usize, logw: &mut Vec<f64>, z: &mut Vec<f64>) -> Result<(f64, f64)> {
        let step = self.chain.step(t);
        let from = self.chain.layer(t - 1);
        let to = self.chain.layer(t);
        let inv_eps = 1.0 / self.eps;
        let xi = self.x[from[i] as usize];
        logw.clear();
        z.clear();
        let mut zmin = f64::INFINITY;
        let mut zmax = f64::NEG_INFINITY;
        for e in step.row(i) {
            let j = step.col(e);
            let v = step.log_ref(e) - step.cost(e) * inv_eps + self.phi[t][j] + self.beta[t][j];
            let dz = self.x[to[j] as usize] - xi;
            if v > f64::NEG_INFINITY {
                zmin = zmin.min(dz);
                zmax = zmax.max(dz);
            }
            logw.push(v);
            z.push(dz);
        }
        if zmin > zmax {
            return Ok((0.0, f64::NEG_INFINITY));
        }
        let active = self.phi[t - 1][i] > f64::NEG_INFINITY && self.alpha[t - 1][i] > f64::NEG_INFINITY;
        let s = if active {
            // Infeasible rows on free layers are tolerated: the clamped tilt
            // starves them of mass.
            if (zmin > 0.0 || zmax < 0.0) && !self.free[t - 1] {
                let mass = self.mu[t - 1][from[i] as usize];
                if mass >= ROW_MASS_TOL {
                    return Err(Error::RowInfeasible {
                        step: t,
                        state: i,
                        x: xi,
                        mass,
                    });
                }
            }
            let start = self.h[t - 1][i] * inv_eps;
            let tilt = solve_tilt(
                logw,
                z,
                0.0,
                start,
                self.newton_tol,
                self.s_max,
                self.cfg.h_newton_max,
            );
            if tilt.status == TiltStatus::Stalled && !self.free[t - 1] {
                return Err(Error::TiltDiverged { row: i });
            }
            tilt.s
        } else {
            0.0
        };
        let (lz, _, _) = tilted_moments(logw, z, s);
        Ok((s, lz))
    }

    /// Re-solve every martingale row of step `t`; refreshes `beta_{t-1}`.
    fn h_sweep_step(&mut self, t: usize) -> Result<f64> {
        let n_from = self.chain.step(t).n_from();
        let rows: Vec<(f64, f64)> = (0..n_from)
            .into_par_iter()
            .with_min_len(8)
            .map_init(
                || (Vec::new(), Vec::new()),
                |(logw, z), i| self.solve_row(t, i, logw, z),
            )
            .collect::<Result<Vec<_>>>()?;
        let mut change = 0.0f64;
        let mut beta = Vec::with_capacity(n_from);
        for (i, (s, lz)) in rows.into_iter().enumerate() {
            let h = s * self.eps;
            change = change.max((h - self.h[t - 1][i]).abs());
            self.h[t - 1][i] = h;
            beta.push(lz);
        }
        self.beta[t - 1] = beta;
        Ok(change)
    }

    /// Pin both gauge freedoms of the dual. Adding `a_t + b_t x` to `u_t`
    /// with `sum a_t = sum b_t = 0`, together with the constant shift
    /// `-sum_{t' >= t} b_t'` of `h_t`, leaves every path weight unchanged.
    /// The slopes are chosen so each `u_t` (t >= 1) is mu_t-uncorrelated with
    /// `x`, the intercepts so it has mu_t-mean zero; both are folded into `u_0`.
    fn gauge_fix(&mut self) {
        let n = self.chain.steps();
        let inv_eps = 1.0 / self.eps;
        let mut b = vec![0.0; n + 1];
        for t in 1..=n {
            if !self.free[t] {
                b[t] = self.linear_part(t);
            }
        }
        // later[t] = sum of b over times t..=N (t >= 1).
        let mut later = vec![0.0; n + 2];
        for t in (1..=n).rev() {
            later[t] = later[t + 1] + b[t];
        }
        if b.iter().any(|v| *v != 0.0) {
            for t in 0..=n {
                let slope = if t == 0 { -later[1] } else { b[t] };
                if self.free[t] {
                    continue;
                }
                for ((u, m), x) in self.u[t].iter_mut().zip(&self.mu[t]).zip(&self.x) {
                    if *m > 0.0 {
                        *u -= slope * x;
                    }
                }
            }
            for s in 1..=n {
                let shift = later[s];
                for i in 0..self.h[s - 1].len() {
                    let live = self.phi[s - 1][i] > f64::NEG_INFINITY
                        && self.alpha[s - 1][i] > f64::NEG_INFINITY
                        && self.beta[s - 1][i] > f64::NEG_INFINITY;
                    if live {
                        self.h[s - 1][i] += shift;
                    }
                }
            }
            for t in 0..=n {
                let layer = self.chain.layer(t);
                let k = later[t + 1] * inv_eps;
                for (s, &g) in layer.iter().enumerate() {
                    let d = k * self.x[g as usize];
                    self.alpha[t][s] += d;
                    self.beta[t][s] -= d;
                }
            }
        }

        let mut c = vec![0.0; n + 1];
        for t in 1..=n {
            if !self.free[t] {
                c[t] = self.u[t].iter().zip(&self.mu[t]).map(|(u, m)| u * m).sum();
            }
        }
        let total: f64 = c.iter().sum();
        for t in 1..=n {
            if self.free[t] {
                continue;
            }
            for (u, m) in self.u[t].iter_mut().zip(&self.mu[t]) {
                if *m > 0.0 {
                    *u -= c[t];
                }
            }
        }
        for (u, m) in self.u[0].iter_mut().zip(&self.mu[0]) {
            if *m > 0.0 {
                *u += total;
            }
        }
        for t in 0..=n {
            self.phi[t] = self.lift(t);
        }
        // alpha_t gains, and beta_t loses, the constants of later times.
        let mut after = 0.0;
        for t in (0..=n).rev() {
            let shift = after * inv_eps;
            for a in self.alpha[t].iter_mut() {
                *a += shift;
            }
            for b in self.beta[t].iter_mut() {
                *b -= shift;
            }
            after += c[t];
        }
        self.alpha[0] = self.alpha_zero();
    }

    /// mu_t-weighted regression slope of `u_t` on `x`.
    fn linear_part(&self, t: usize) -> f64 {
        let mu = &self.mu[t];
        let mean_x: f64 = mu.iter().zip(&self.x).map(|(m, x)| m * x).sum();
        let mean_u: f64 = mu.iter().zip(&self.u[t]).map(|(m, u)| m * u).sum();
        let mut cov = 0.0;
        let mut var = 0.0;
        for ((m, x), u) in mu.iter().zip(&self.x).zip(&self.u[t]) {
            if *m > 0.0 {
                let dx = x - mean_x;
                cov += m * dx * (u - mean_u);
                var += m * dx * dx;
            }
        }
        let scale = self.x.iter().fold(0.0f64, |a, x| a.max(x.abs())).max(1.0);
        if var > 1e-20 * scale * scale {
            cov / var
        } else {
            0.0
        }
    }

    /// One outer iteration. Returns the sup-norm change of `u` plus that of
    /// `h`.
    pub fn iterate(&mut self) -> Result<f64> {
        let n = self.chain.steps();
        let u_old = self.u.clone();
        self.update_u(0, self.chain.init_log().to_vec())?;
        for t in 1..=n {
            let at = self.forward_messages(t, &self.alpha[t - 1]);
            self.update_u(t, at)?;
        }
        let mut dh = 0.0f64;
        for t in (1..=n).rev() {
            dh = dh.max(self.h_sweep_step(t)?);
        }
        self.gauge_fix();
        self.check_finite()?;
        let du = sup_change(&self.u, &u_old);
        Ok(du + dh)
    }

    fn check_finite(&self) -> Result<()> {
        for t in 0..self.u.len() {
            if self.u[t].iter().any(|u| !u.is_finite() || (u / self.eps).abs() > PHI_LIMIT) {
                return Err(Error::NumericalOverflow { step: t });
            }
        }
        for t in 0..self.h.len() {
            if self.h[t].iter().any(|h| !h.is_finite()) {
                return Err(Error::NumericalOverflow { step: t + 1 });
            }
        }
        for (t, b) in self.beta.iter().enumerate() {
            if b.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
                return Err(Error::NumericalOverflow { step: t });
            }
        }
        Ok(())
    }

    /// Frozen-prefix iteration: with `alpha_prev` the cached forward message
    /// into the second-to-last layer, update only `u_N` and `h_N`.
    pub(crate) fn frozen_iterate(&mut self, alpha_prev: &[f64]) -> Result<f64> {
        let n = self.chain.steps();
        let u_old = self.u[n].clone();
        let at = self.forward_messages(n, alpha_prev);
        self.update_u(n, at)?;
        let dh = self.h_sweep_step(n)?;
        self.check_finite()?;
        let du = u_old
            .iter()
            .zip(&self.u[n])
            .fold(0.0f64, |a, (x, y)| a.max((x - y).abs()));
        Ok(du + dh)
    }

    /// Forward message into layer `t` under the current potentials.
    pub(crate) fn alpha(&self, t: usize) -> &[f64] {
        &self.alpha[t]
    }

    /// Apply the closed-form marginal update at time `t` alone, with all
    /// messages recomputed first. Afterwards the Gibbs marginal at `t` equals
    /// the target.
    pub fn u_step(&mut self, t: usize) -> Result<()> {
        self.refresh();
        let at = if t == 0 {
            self.chain.init_log().to_vec()
        } else {
            self.forward_messages(t, &self.alpha[t - 1])
        };
        self.update_u(t, at)?;
        self.refresh();
        Ok(())
    }

    /// Solve the martingale tilt of state `i` at step `t` alone and return
    /// the new `h`.
    pub fn h_step(&mut self, t: usize, i: usize) -> Result<f64> {
        self.refresh();
        let (s, _) = self.solve_row(t, i, &mut Vec::new(), &mut Vec::new())?;
        self.h[t - 1][i] = s * self.eps;
        self.refresh();
        Ok(self.h[t - 1][i])
    }

    pub fn log_partition(&self) -> f64 {
        log_sum_exp(self.alpha[0].iter().zip(&self.beta[0]).map(|(a, b)| a + b))
    }

    /// `sum_t <u_t, mu_t> - eps log Z` at the current potentials.
    pub fn dual_value(&self) -> f64 {
        let lin: f64 = self
            .u
            .iter()
            .zip(&self.mu)
            .zip(&self.free)
            .filter(|(_, free)| !**free)
            .map(|((u, m), _)| u.iter().zip(m).map(|(a, b)| a * b).sum::<f64>())
            .sum();
        lin - self.eps * self.log_partition()
    }

    pub fn potentials(&self) -> DualPotentials {
        DualPotentials {
            u: self.u.clone(),
            h: self.h.clone(),
        }
    }

    /// Gibbs marginals on the grid (messages are refreshed first).
    pub fn gibbs_marginals(&mut self) -> Vec<Vec<f64>> {
        self.refresh();
        self.plan().marginals()
    }

    /// The Gibbs plan of the current potentials. Requires current backward
    /// messages, which hold after [`ChainSolver::iterate`] or
    /// [`ChainSolver::refresh`].
    pub fn plan(&self) -> TransportPlan {
        let n = self.chain.steps();
        let inv_eps = 1.0 / self.eps;
        let a0 = self.alpha_zero();
        let lz = log_sum_exp(a0.iter().zip(&self.beta[0]).map(|(a, b)| a + b));
        let init: Vec<f64> = a0
            .iter()
            .zip(&self.beta[0])
            .map(|(a, b)| (a + b - lz).exp())
            .collect();
        let kernels = (1..=n)
            .map(|t| {
                let step = self.chain.step(t);
                let from = self.chain.layer(t - 1);
                let to = self.chain.layer(t);
                let mut k = vec![0.0; step.nnz()];
                let chunks: Vec<(usize, Vec<f64>)> = (0..step.n_from())
                    .into_par_iter()
                    .with_min_len(16)
                    .map(|i| {
                        let r = step.row(i);
                        let xi = self.x[from[i] as usize];
                        let s = self.h[t - 1][i] * inv_eps;
                        let mut vals: Vec<f64> = r
                            .clone()
                            .map(|e| {
                                let j = step.col(e);
                                step.log_ref(e) - step.cost(e) * inv_eps
                                    + s * (self.x[to[j] as usize] - xi)
                                    + self.phi[t][j]
                                    + self.beta[t][j]
                            })
                            .collect();
                        let mut norm = log_sum_exp(vals.iter().copied());
                        if norm == f64::NEG_INFINITY {
                            // No admissible continuation: the row carries no
                            // mass, fall back to the reference transition.
                            vals = r.clone().map(|e| step.log_ref(e)).collect();
                            norm = log_sum_exp(vals.iter().copied());
                        }
                        let mut p: Vec<f64> = vals.iter().map(|v| (v - norm).exp()).collect();
                        let total: f64 = p.iter().sum();
                        p.iter_mut().for_each(|v| *v /= total);
                        (r.start, p)
                    })
                    .collect();
                for (start, p) in chunks {
                    k[start..start + p.len()].copy_from_slice(&p);
                }
                k
            })
            .collect();
        TransportPlan::new(self.chain.clone(), init, kernels).expect("plan matches its chain")
    }
}

fn sup_change(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.iter().zip(y))
        .fold(0.0f64, |m, (p, q)| m.max((p - q).abs()))
}

/// Martingale tilt `h` of a single row: the value with
/// `sum_y y rho(y) e^{h (y - x) / eps} / sum_y rho(y) e^{h (y - x) / eps} = x`.
/// `log_rho` may contain minus infinity for excluded points.
pub fn martingale_tilt(log_rho: &[f64], y: &[f64], x: f64, eps: f64) -> Result<f64> {
    let z: Vec<f64> = y.iter().map(|v| v - x).collect();
    let (mut zmin, mut zmax) = (f64::INFINITY, f64::NEG_INFINITY);
    for (l, zi) in log_rho.iter().zip(&z) {
        if *l > f64::NEG_INFINITY {
            zmin = zmin.min(*zi);
            zmax = zmax.max(*zi);
        }
    }
    if zmin > 0.0 || zmax < 0.0 || zmin > zmax {
        return Err(Error::RowInfeasible {
            step: 0,
            state: 0,
            x,
            mass: 1.0,
        });
    }
    let scale = z.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(f64::MIN_POSITIVE);
    let t = solve_tilt(log_rho, &z, 0.0, 0.0, 1e-15 * scale, 1e8 / scale, 400);
    match t.status {
        TiltStatus::Stalled => Err(Error::TiltDiverged { row: 0 }),
        _ => Ok(t.s * eps),
    }
}
