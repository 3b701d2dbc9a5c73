//! Delta hedging under a solved plan.
//!
//! Continuation values come from backward induction on the plan's kernels.
//! Deltas are per-state hedge ratios; the default is the conditional
//! minimum-variance ratio `Cov(V_{t+1}, X_{t+1}) / Var(X_{t+1})`, which is the
//! textbook binomial delta on two-point rows and exact for linear payoffs.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::solver::TransportPlan;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeltaRule {
    /// Conditional regression slope of the next value on the next price.
    #[default]
    Regression,
    /// Central finite difference of the grid continuation value (one-sided at
    /// the ends of the support).
    FiniteDifference,
}

#[derive(Debug, Clone)]
pub struct HedgePolicy {
    /// Continuation value per state, `V_t(s)`, t = 0..N.
    pub state_values: Vec<Vec<f64>>,
    /// Hedge ratio per state of layer t, t = 0..N-1.
    pub state_deltas: Vec<Vec<f64>>,
    /// Mass-weighted grid views of the two tables above.
    pub values: Vec<Vec<f64>>,
    pub deltas: Vec<Vec<f64>>,
    /// Largest slope of a grid delta between adjacent charged points.
    pub delta_lipschitz: f64,
    /// Payoff collected along every transition, aligned with the chain.
    edge_payoff: Vec<Vec<f64>>,
    terminal: Vec<f64>,
}

impl HedgePolicy {
    /// Policy for a payoff `g(X_N)` given on the grid.
    pub fn terminal(plan: &TransportPlan, payoff: &[f64], rule: DeltaRule) -> Result<Self> {
        if payoff.len() != plan.grid().len() {
            return Err(Error::InvalidInput("terminal payoff must live on the grid".into()));
        }
        let chain = plan.chain();
        let n = plan.steps();
        let terminal = chain.layer(n).iter().map(|&g| payoff[g as usize]).collect();
        let edge_payoff = (1..=n).map(|t| vec![0.0; chain.step(t).nnz()]).collect();
        Self::build(plan, edge_payoff, terminal, rule)
    }

    /// Policy for the payoff encoded in the plan's own transition costs,
    /// multiplied by `sign` (use -1 for a plan solved with negated costs).
    pub fn from_costs(plan: &TransportPlan, sign: f64, rule: DeltaRule) -> Result<Self> {
        let chain = plan.chain();
        let n = plan.steps();
        let edge_payoff = (1..=n)
            .map(|t| {
                let step = chain.step(t);
                (0..step.nnz()).map(|e| sign * step.cost(e)).collect()
            })
            .collect();
        let terminal = vec![0.0; chain.layer(n).len()];
        Self::build(plan, edge_payoff, terminal, rule)
    }

    fn build(plan: &TransportPlan, edge_payoff: Vec<Vec<f64>>, terminal: Vec<f64>, rule: DeltaRule) -> Result<Self> {
        let chain = plan.chain();
        let n = plan.steps();
        let x = plan.grid().points();
        let m = x.len();
        let mass = plan.state_marginals();

        let mut state_values = vec![Vec::new(); n + 1];
        state_values[n] = terminal.clone();
        let mut state_deltas = vec![Vec::new(); n];
        for t in (1..=n).rev() {
            let step = chain.step(t);
            let k = plan.kernel_entries(t);
            let to = chain.layer(t);
            let next = &state_values[t];
            let pay = &edge_payoff[t - 1];
            let from = chain.layer(t - 1);
            let rows: Vec<(f64, f64)> = (0..step.n_from())
                .into_par_iter()
                .with_min_len(64)
                .map(|i| {
                    let (mut ev, mut ey, mut eyy, mut evy) = (0.0, 0.0, 0.0, 0.0);
                    for e in step.row(i) {
                        let p = k[e];
                        let j = step.col(e);
                        let v = pay[e] + next[j];
                        let y = x[to[j] as usize] - x[from[i] as usize];
                        ev += p * v;
                        ey += p * y;
                        eyy += p * y * y;
                        evy += p * v * y;
                    }
                    let var = eyy - ey * ey;
                    let slope = if var > 1e-14 * eyy.max(1e-300) {
                        (evy - ev * ey) / var
                    } else {
                        f64::NAN
                    };
                    (ev, slope)
                })
                .collect();
            state_values[t - 1] = rows.iter().map(|r| r.0).collect();
            state_deltas[t - 1] = rows.iter().map(|r| r.1).collect();
        }

        let to_grid = |t: usize, v: &[f64]| -> Vec<f64> {
            let mut num = vec![0.0; m];
            let mut den = vec![0.0; m];
            let mut plain = vec![0.0; m];
            let mut count = vec![0usize; m];
            for (s, &g) in chain.layer(t).iter().enumerate() {
                let g = g as usize;
                if v[s].is_finite() {
                    num[g] += mass[t][s] * v[s];
                    den[g] += mass[t][s];
                    plain[g] += v[s];
                    count[g] += 1;
                }
            }
            (0..m)
                .map(|g| {
                    if den[g] > 0.0 {
                        num[g] / den[g]
                    } else if count[g] > 0 {
                        plain[g] / count[g] as f64
                    } else {
                        f64::NAN
                    }
                })
                .collect()
        };
        let values: Vec<Vec<f64>> = (0..=n).map(|t| to_grid(t, &state_values[t])).collect();

        let charged: Vec<Vec<bool>> = plan
            .marginals()
            .iter()
            .map(|w| w.iter().map(|p| *p > 0.0).collect())
            .collect();
        if rule == DeltaRule::FiniteDifference {
            for t in 0..n {
                let fd = finite_difference(x, &values[t], &charged[t]);
                state_deltas[t] = chain.layer(t).iter().map(|&g| fd[g as usize]).collect();
            }
        } else {
            // Degenerate rows (no spread) fall back to the grid difference.
            for t in 0..n {
                if state_deltas[t].iter().any(|d| d.is_nan()) {
                    let fd = finite_difference(x, &values[t], &charged[t]);
                    for (s, &g) in chain.layer(t).iter().enumerate() {
                        if state_deltas[t][s].is_nan() {
                            state_deltas[t][s] = fd[g as usize];
                        }
                    }
                }
            }
        }
        let deltas: Vec<Vec<f64>> = (0..n).map(|t| to_grid(t, &state_deltas[t])).collect();

        let mut lip = 0.0f64;
        for t in 0..n {
            for g in 0..m - 1 {
                if charged[t][g] && charged[t][g + 1] {
                    let (a, b) = (deltas[t][g], deltas[t][g + 1]);
                    if a.is_finite() && b.is_finite() {
                        lip = lip.max((b - a).abs() / (x[g + 1] - x[g]));
                    }
                }
            }
        }
        Ok(Self {
            state_values,
            state_deltas,
            values,
            deltas,
            delta_lipschitz: lip,
            edge_payoff,
            terminal,
        })
    }

    /// `E_P[payoff]` from the time-0 values.
    pub fn price(&self, plan: &TransportPlan) -> f64 {
        plan.init().iter().zip(&self.state_values[0]).map(|(p, v)| p * v).sum()
    }
}

/// Central differences on charged points, one-sided at the support ends, zero
/// where there is no charged neighbour.
fn finite_difference(x: &[f64], v: &[f64], charged: &[bool]) -> Vec<f64> {
    let m = x.len();
    (0..m)
        .map(|g| {
            let left = (g > 0 && charged[g - 1] && v[g - 1].is_finite()).then(|| g - 1);
            let right = (g + 1 < m && charged[g + 1] && v[g + 1].is_finite()).then(|| g + 1);
            let here = v[g].is_finite();
            match (left, right) {
                (Some(a), Some(b)) => (v[b] - v[a]) / (x[b] - x[a]),
                (Some(a), None) if here => (v[g] - v[a]) / (x[g] - x[a]),
                (None, Some(b)) if here => (v[b] - v[g]) / (x[b] - x[g]),
                _ => 0.0,
            }
        })
        .collect()
}

/// `C L_Delta sqrt(dt) ln(1/dt)`.
pub fn bound_proxy(constant: f64, delta_lipschitz: f64, dt: f64) -> f64 {
    constant * delta_lipschitz * dt.sqrt() * (1.0 / dt).ln()
}

#[derive(Debug, Clone, Serialize)]
pub struct HedgeReport {
    pub paths: usize,
    pub rmse: f64,
    pub mean_error: f64,
    pub unhedged_std: f64,
    pub bound: f64,
    pub frac_within: f64,
    pub price: f64,
    #[serde(skip)]
    pub terminal_errors: Vec<f64>,
}

/// Sample paths from `plan`, hedge along each with `policy`, and compare the
/// terminal tracking errors with the bound proxy.
pub fn simulate_hedge(
    plan: &TransportPlan,
    policy: &HedgePolicy,
    n_paths: usize,
    seed: u64,
    dt: f64,
    constant: f64,
) -> Result<HedgeReport> {
    if n_paths == 0 {
        return Err(Error::InvalidInput("need at least one path".into()));
    }
    if !(dt > 0.0 && dt < 1.0) {
        return Err(Error::InvalidInput("time step must lie in (0, 1)".into()));
    }
    let chain = plan.chain();
    let x = plan.grid().points();
    let n = plan.steps();
    let paths = plan.sample_paths(n_paths, seed);
    let (errors, payoffs): (Vec<f64>, Vec<f64>) = paths
        .par_iter()
        .map(|path| {
            let mut payoff = policy.terminal[path[n] as usize];
            let mut gains = 0.0;
            for t in 1..=n {
                let (s, s2) = (path[t - 1] as usize, path[t] as usize);
                let step = chain.step(t);
                let e = step
                    .row(s)
                    .find(|&e| step.col(e) == s2)
                    .expect("sampled transition exists");
                payoff += policy.edge_payoff[t - 1][e];
                let dx = x[chain.layer(t)[s2] as usize] - x[chain.layer(t - 1)[s] as usize];
                gains += policy.state_deltas[t - 1][s] * dx;
            }
            let start = policy.state_values[0][path[0] as usize];
            (payoff - start - gains, payoff)
        })
        .unzip();
    let k = n_paths as f64;
    let mean_error = errors.iter().sum::<f64>() / k;
    let rmse = (errors.iter().map(|e| e * e).sum::<f64>() / k).sqrt();
    let mean_pay = payoffs.iter().sum::<f64>() / k;
    let unhedged_std = (payoffs.iter().map(|p| (p - mean_pay).powi(2)).sum::<f64>() / k).sqrt();
    let bound = bound_proxy(constant, policy.delta_lipschitz, dt);
    let frac_within = errors.iter().filter(|e| e.abs() <= bound).count() as f64 / k;
    Ok(HedgeReport {
        paths: n_paths,
        rmse,
        mean_error,
        unhedged_std,
        bound,
        frac_within,
        price: policy.price(plan),
        terminal_errors: errors,
    })
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::grid::Grid;
    use crate::marginals::{generate, MarginalSequence, ModelParams};
    use crate::pricing::{price_bounds, PayoffSpec};
    use crate::reference::build_reference;
    use crate::solver::{solve, CostSpec, SolverConfig};

    fn solved(n: usize, m: usize) -> (MarginalSequence, TransportPlan) {
        let grid = Arc::new(Grid::uniform(0.7, 1.3, m).unwrap());
        let times: Vec<f64> = (0..=n).map(|k| 0.02 + 0.04 * k as f64).collect();
        let seq = generate(&ModelParams::default(), &times, grid.clone()).unwrap();
        let q = build_reference(grid.clone(), &times, 0.2, 1e-9).unwrap();
        let sol = solve(&seq, &q, &CostSpec::pairwise_abs(&grid, n), &SolverConfig::with_epsilon(0.2), None).unwrap();
        (seq, sol.plan)
    }

    #[test]
    fn linear_payoff_is_replicated_exactly() {
        let (seq, plan) = solved(3, 40);
        let x = seq.grid().points().to_vec();
        for rule in [DeltaRule::Regression, DeltaRule::FiniteDifference] {
            let policy = HedgePolicy::terminal(&plan, &x, rule).unwrap();
            let rep = simulate_hedge(&plan, &policy, 2000, 7, 0.04, 1.0).unwrap();
            if rule == DeltaRule::Regression {
                assert!(rep.terminal_errors.iter().all(|e| e.abs() < 1e-6), "{}", rep.rmse);
            }
            let charged = plan.marginal(1);
            for (g, p) in charged.iter().enumerate() {
                if *p > 1e-6 && g > 0 && g + 1 < x.len() && charged[g - 1] > 0.0 && charged[g + 1] > 0.0 {
                    assert!((policy.values[1][g] - x[g]).abs() < 1e-6);
                    assert!((policy.deltas[1][g] - 1.0).abs() < 1e-4, "{rule:?} {}", policy.deltas[1][g]);
                }
            }
        }
    }

    #[test]
    fn constant_payoff_has_zero_delta() {
        let (seq, plan) = solved(2, 30);
        let ones = vec![1.0; seq.grid().len()];
        let policy = HedgePolicy::terminal(&plan, &ones, DeltaRule::Regression).unwrap();
        assert!(policy.state_deltas.iter().flatten().all(|d| d.abs() < 1e-9));
        assert!((policy.price(&plan) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn binomial_delta_on_two_point_rows() {
        let grid = Arc::new(Grid::from_points(vec![0.8, 1.0, 1.3]).unwrap());
        let seq = MarginalSequence::from_weights(
            grid.clone(),
            vec![0.0, 1.0],
            vec![vec![0.0, 1.0, 0.0], vec![0.6, 0.0, 0.4]],
        )
        .unwrap();
        let q = build_reference(grid.clone(), &[0.0, 1.0], 0.5, 1e-9).unwrap();
        let sol = solve(&seq, &q, &CostSpec::pairwise_abs(&grid, 1), &SolverConfig::with_epsilon(0.3), None).unwrap();
        let strike = 0.9;
        let pay: Vec<f64> = grid.points().iter().map(|x| (x - strike).max(0.0)).collect();
        let policy = HedgePolicy::terminal(&sol.plan, &pay, DeltaRule::Regression).unwrap();
        let binomial = (0.4 - 0.0) / (1.3 - 0.8);
        assert!((policy.deltas[0][1] - binomial).abs() < 1e-9, "{}", policy.deltas[0][1]);
        let rep = simulate_hedge(&sol.plan, &policy, 500, 1, 0.5, 1.0).unwrap();
        assert!(rep.rmse < 1e-9);
        assert!((rep.price - (0.6 * 0.0 + 0.4 * 0.4)).abs() < 1e-9);
    }

    #[test]
    fn call_hedge_beats_no_hedge_and_prices_consistently() {
        let (seq, plan) = solved(4, 40);
        let pay: Vec<f64> = seq.grid().points().iter().map(|x| (x - 1.0).max(0.0)).collect();
        let policy = HedgePolicy::terminal(&plan, &pay, DeltaRule::Regression).unwrap();
        let rep = simulate_hedge(&plan, &policy, 5000, 3, 0.04, 1.0).unwrap();
        assert!(rep.rmse < rep.unhedged_std, "{} vs {}", rep.rmse, rep.unhedged_std);
        assert!((policy.price(&plan) - seq.marginal(4).call_price(1.0)).abs() < 1e-8);

        let doubled: Vec<f64> = pay.iter().map(|p| 2.0 * p).collect();
        let p2 = HedgePolicy::terminal(&plan, &doubled, DeltaRule::Regression).unwrap();
        let r2 = simulate_hedge(&plan, &p2, 5000, 3, 0.04, 1.0).unwrap();
        assert!((r2.rmse - 2.0 * rep.rmse).abs() < 1e-12);
        assert!((r2.bound - 2.0 * rep.bound).abs() < 1e-12);
    }

    #[test]
    fn asian_policy_from_costs_matches_price() {
        let grid = Arc::new(Grid::uniform(0.7, 1.3, 25).unwrap());
        let times = [0.02, 0.06, 0.10, 0.14];
        let seq = generate(&ModelParams::default(), &times, grid.clone()).unwrap();
        let q = build_reference(grid, &times, 0.2, 1e-9).unwrap();
        let out = price_bounds(&seq, &q, &PayoffSpec::asian_call(1.0), &SolverConfig::with_epsilon(0.1)).unwrap();
        let policy = HedgePolicy::from_costs(&out.lower.plan, 1.0, DeltaRule::Regression).unwrap();
        assert!((policy.price(&out.lower.plan) - out.bounds.lower).abs() < 1e-10);
        let up = HedgePolicy::from_costs(&out.upper.plan, -1.0, DeltaRule::Regression).unwrap();
        assert!((up.price(&out.upper.plan) - out.bounds.upper).abs() < 1e-10);
    }

    #[test]
    fn bound_proxy_arithmetic() {
        let v = bound_proxy(1.0, 1.0, 0.004);
        let expect = 0.004f64.sqrt() * 250f64.ln();
        assert!((v - expect).abs() < 1e-15);
        assert!((bound_proxy(2.0, 3.0, 0.004) - 6.0 * expect).abs() < 1e-14);
    }
}
