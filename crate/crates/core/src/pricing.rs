//! Model-free price bounds for path payoffs and their widening for
//! transaction costs and calibration error.
//!
//! The lower bound solves the entropic problem with the payoff as cost, the
//! upper bound with the negated payoff. Payoffs that are not pairwise in
//! `(X_{t-1}, X_t)` are priced on a state-augmented chain.

use std::collections::HashMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::chain::{Chain, Step, StepBuilder};
use crate::error::{Error, Result};
use crate::marginals::MarginalSequence;
use crate::reference::ReferenceChain;
use crate::solver::{solve_chain, CostSpec, Solution, SolverConfig, TransportPlan};

/// Number of running-average buckets used for Asian payoffs.
pub const ASIAN_BUCKETS: usize = 40;

/// Largest path table accepted for custom payoffs.
pub const MAX_CUSTOM_PATHS: usize = 2_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PayoffKind {
    /// `((1/N) sum_{t=1..N} X_t - K)^+`.
    AsianCall { strike: f64 },
    /// `(X_N - K X_{N-1})^+`.
    ForwardStart { strike: f64 },
    /// `(X_t - K)^+` at time index `t`.
    VanillaCall { strike: f64, t: usize },
    /// `|X_N - X_0|`.
    SpreadAbs,
    /// `(max_t X_t - K)^+`.
    LookbackCall { strike: f64 },
    /// Value for every grid path, indexed by `sum_t i_t M^t`.
    Custom { table: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PayoffSpec {
    #[serde(flatten)]
    pub kind: PayoffKind,
    pub lipschitz: f64,
}

impl PayoffSpec {
    pub fn asian_call(strike: f64) -> Self {
        Self {
            kind: PayoffKind::AsianCall { strike },
            lipschitz: 1.0,
        }
    }

    pub fn forward_start(strike: f64) -> Self {
        Self {
            kind: PayoffKind::ForwardStart { strike },
            lipschitz: strike.abs().max(1.0),
        }
    }

    pub fn vanilla_call(strike: f64, t: usize) -> Self {
        Self {
            kind: PayoffKind::VanillaCall { strike, t },
            lipschitz: 1.0,
        }
    }

    pub fn spread_abs() -> Self {
        Self {
            kind: PayoffKind::SpreadAbs,
            lipschitz: 1.0,
        }
    }

    pub fn lookback_call(strike: f64) -> Self {
        Self {
            kind: PayoffKind::LookbackCall { strike },
            lipschitz: 1.0,
        }
    }

    pub fn custom(table: Vec<f64>, lipschitz: f64) -> Self {
        Self {
            kind: PayoffKind::Custom { table },
            lipschitz,
        }
    }

    /// Payoff of a path of prices `x_0..x_N`. Custom tables need grid
    /// indices instead; see [`PayoffSpec::evaluate_indices`].
    pub fn evaluate(&self, x: &[f64]) -> Result<f64> {
        let n = x.len() - 1;
        Ok(match &self.kind {
            PayoffKind::AsianCall { strike } => {
                (x[1..].iter().sum::<f64>() / n as f64 - strike).max(0.0)
            }
            PayoffKind::ForwardStart { strike } => (x[n] - strike * x[n - 1]).max(0.0),
            PayoffKind::VanillaCall { strike, t } => (x[*t] - strike).max(0.0),
            PayoffKind::SpreadAbs => (x[n] - x[0]).abs(),
            PayoffKind::LookbackCall { strike } => {
                (x.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - strike).max(0.0)
            }
            PayoffKind::Custom { .. } => {
                return Err(Error::UnsupportedPayoff(
                    "custom payoffs are defined on grid indices".into(),
                ))
            }
        })
    }

    /// Payoff of a path of grid indices.
    pub fn evaluate_indices(&self, idx: &[usize], points: &[f64]) -> Result<f64> {
        match &self.kind {
            PayoffKind::Custom { table } => {
                let m = points.len();
                let code = idx.iter().rev().fold(0usize, |c, &i| c * m + i);
                table
                    .get(code)
                    .copied()
                    .ok_or_else(|| Error::InvalidInput("path outside the custom table".into()))
            }
            _ => {
                let x: Vec<f64> = idx.iter().map(|&i| points[i]).collect();
                self.evaluate(&x)
            }
        }
    }

    fn validate(&self, steps: usize, m: usize) -> Result<()> {
        if !(self.lipschitz > 0.0) || !self.lipschitz.is_finite() {
            return Err(Error::InvalidInput("payoff Lipschitz constant must be positive".into()));
        }
        match &self.kind {
            PayoffKind::VanillaCall { t, .. } if *t > steps => Err(Error::InvalidInput(format!(
                "vanilla maturity index {t} beyond the last time {steps}"
            ))),
            PayoffKind::Custom { table } => {
                let paths = (m as f64).powi(steps as i32 + 1);
                if steps > 3 || paths > MAX_CUSTOM_PATHS as f64 {
                    return Err(Error::UnsupportedPayoff(format!(
                        "custom path tables need N <= 3 and at most {MAX_CUSTOM_PATHS} paths"
                    )));
                }
                if table.len() != paths as usize {
                    return Err(Error::InvalidInput(format!(
                        "custom table has {} entries, expected {}",
                        table.len(),
                        paths as usize
                    )));
                }
                if table.iter().any(|v| !v.is_finite()) {
                    return Err(Error::InvalidInput("custom table has non-finite entries".into()));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

/// Proportional transaction cost rate per step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransactionCostSpec {
    pub rates: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriceBounds {
    pub lower: f64,
    pub upper: f64,
    pub gamma: f64,
    pub delta: f64,
    pub widened: [f64; 2],
    pub mid: f64,
}

impl PriceBounds {
    pub fn new(lower: f64, upper: f64) -> Self {
        let mut b = Self {
            lower,
            upper,
            gamma: 0.0,
            delta: 0.0,
            widened: [lower, upper],
            mid: 0.0,
        };
        b.rewiden();
        b
    }

    /// Transaction costs move each side by `gamma`, calibration error by
    /// half of `delta`, so the total calibration band is `delta` wide.
    fn rewiden(&mut self) {
        let pad = self.gamma + 0.5 * self.delta;
        self.widened = [self.lower - pad, self.upper + pad];
        self.mid = 0.5 * (self.widened[0] + self.widened[1]);
    }

    pub fn with_gamma(mut self, gamma: f64) -> Self {
        self.gamma = gamma;
        self.rewiden();
        self
    }

    pub fn with_delta(mut self, delta: f64) -> Self {
        self.delta = delta;
        self.rewiden();
        self
    }
}

#[derive(Debug, Clone)]
pub struct PricingOutcome {
    pub bounds: PriceBounds,
    pub lower: Solution,
    pub upper: Solution,
}

/// The chain on which `payoff` (times `sign`) is a sum of transition costs.
pub fn payoff_chain(reference: &ReferenceChain, payoff: &PayoffSpec, sign: f64) -> Result<Chain> {
    let n = reference.steps();
    let grid = reference.grid();
    let m = grid.len();
    payoff.validate(n, m)?;
    let x = grid.points().to_vec();
    match &payoff.kind {
        PayoffKind::ForwardStart { strike } => {
            let spec = CostSpec::forward_start_call(grid, n, *strike);
            Chain::plain(reference, Some(&scaled(&spec.tables, sign)))
        }
        PayoffKind::VanillaCall { strike, t } => {
            let mut tables = vec![vec![0.0; m * m]; n];
            // Charge time 0 on the first step through its origin.
            let (step, on_origin) = if *t == 0 { (0, true) } else { (t - 1, false) };
            for i in 0..m {
                for j in 0..m {
                    let v = if on_origin { x[i] } else { x[j] };
                    tables[step][i * m + j] = sign * (v - strike).max(0.0);
                }
            }
            Chain::plain(reference, Some(&tables))
        }
        PayoffKind::AsianCall { strike } => {
            let (lo, hi) = (grid.lo(), grid.hi());
            let b = ASIAN_BUCKETS;
            let width = (hi - lo) / (b - 1) as f64;
            let value = |k: u32| lo + width * k as f64;
            let bucket = |a: f64| (((a - lo) / width).round().clamp(0.0, (b - 1) as f64)) as u32;
            augmented_chain(
                reference,
                |_| 0,
                |t, _i, a, j| {
                    let prev = if t == 1 { 0.0 } else { value(a) };
                    let avg = (prev * (t - 1) as f64 + x[j]) / t as f64;
                    bucket(avg)
                },
                |t, _i, _a, _j, a2| {
                    if t == n {
                        sign * (value(a2) - strike).max(0.0)
                    } else {
                        0.0
                    }
                },
            )
        }
        PayoffKind::SpreadAbs => augmented_chain(
            reference,
            |i| i as u32,
            |_, _, a, _| a,
            |t, _i, a, j, _| {
                if t == n {
                    sign * (x[j] - x[a as usize]).abs()
                } else {
                    0.0
                }
            },
        ),
        PayoffKind::LookbackCall { strike } => augmented_chain(
            reference,
            |i| i as u32,
            |_, _, a, j| a.max(j as u32),
            |t, _i, _a, _j, a2| {
                if t == n {
                    sign * (x[a2 as usize] - strike).max(0.0)
                } else {
                    0.0
                }
            },
        ),
        PayoffKind::Custom { table } => {
            let pow: Vec<u32> = (0..=n).map(|t| (m as u32).pow(t as u32)).collect();
            augmented_chain(
                reference,
                |i| i as u32,
                |t, _, a, j| a + j as u32 * pow[t],
                |t, _i, _a, _j, a2| if t == n { sign * table[a2 as usize] } else { 0.0 },
            )
        }
    }
}

fn scaled(tables: &[Vec<f64>], sign: f64) -> Vec<Vec<f64>> {
    tables.iter().map(|t| t.iter().map(|v| sign * v).collect()).collect()
}

/// Build a chain whose states are `(grid index, aux)` pairs reachable from
/// layer 0, where `aux` evolves deterministically with every transition.
fn augmented_chain(
    reference: &ReferenceChain,
    init_aux: impl Fn(usize) -> u32,
    next_aux: impl Fn(usize, usize, u32, usize) -> u32,
    cost: impl Fn(usize, usize, u32, usize, u32) -> f64,
) -> Result<Chain> {
    let grid = reference.grid().clone();
    let m = grid.len();
    let n = reference.steps();
    let mut states: Vec<(u32, u32)> = (0..m).map(|i| (i as u32, init_aux(i))).collect();
    let init_log: Vec<f64> = reference.init().iter().map(|p| p.ln()).collect();
    let mut layers = vec![Arc::new(states.iter().map(|s| s.0).collect::<Vec<u32>>())];
    let mut steps: Vec<Arc<Step>> = Vec::with_capacity(n);
    for t in 1..=n {
        let kernel = reference.kernel(t - 1);
        let mut next: Vec<(u32, u32)> = Vec::new();
        for &(g, a) in &states {
            for j in 0..m {
                next.push((j as u32, next_aux(t, g as usize, a, j)));
            }
        }
        next.sort_unstable();
        next.dedup();
        let index: HashMap<(u32, u32), u32> =
            next.iter().enumerate().map(|(k, s)| (*s, k as u32)).collect();
        let mut builder = StepBuilder::new(states.len());
        for &(g, a) in &states {
            let row = kernel.log_row(g as usize);
            for (j, &lq) in row.iter().enumerate() {
                if lq == f64::NEG_INFINITY {
                    continue;
                }
                let a2 = next_aux(t, g as usize, a, j);
                let col = index[&(j as u32, a2)] as usize;
                builder.push(col, lq, cost(t, g as usize, a, j, a2));
            }
            builder.end_row();
        }
        steps.push(Arc::new(builder.finish(next.len())));
        layers.push(Arc::new(next.iter().map(|s| s.0).collect()));
        states = next;
    }
    Chain::new(grid, layers, steps, init_log)
}

/// Lower and upper entropic bounds for `payoff`. Both values are
/// expectations of the payoff under the respective optimal plans.
pub fn price_bounds(
    marginals: &MarginalSequence,
    reference: &ReferenceChain,
    payoff: &PayoffSpec,
    cfg: &SolverConfig,
) -> Result<PricingOutcome> {
    if reference.grid().points() != marginals.grid().points() {
        return Err(Error::GridMismatch);
    }
    if reference.steps() != marginals.steps() {
        return Err(Error::InvalidInput("reference and marginals disagree on N".into()));
    }
    let lower_chain = Arc::new(payoff_chain(reference, payoff, 1.0)?);
    let upper_chain = Arc::new(payoff_chain(reference, payoff, -1.0)?);
    let (lower, upper) = rayon::join(
        || solve_chain(lower_chain, marginals, cfg, None),
        || solve_chain(upper_chain, marginals, cfg, None),
    );
    let (lower, upper) = (lower?, upper?);
    let lo = lower.plan.expected_cost();
    let hi = -upper.plan.expected_cost();
    Ok(PricingOutcome {
        bounds: PriceBounds::new(lo, hi),
        lower,
        upper,
    })
}

/// `E_P[payoff]` under a plan on a plain chain, by forward propagation of
/// the joint law of the current state and the path statistic the payoff
/// needs. Asian averages are bucketed exactly as in [`payoff_chain`].
pub fn expected_payoff(plan: &TransportPlan, payoff: &PayoffSpec) -> Result<f64> {
    let chain = plan.chain();
    if !chain.is_plain() {
        return Err(Error::InvalidInput("expected_payoff needs a plain chain".into()));
    }
    let n = plan.steps();
    let grid = plan.grid();
    let m = grid.len();
    payoff.validate(n, m)?;
    let x = grid.points();
    let (lo, hi) = (grid.lo(), grid.hi());
    let width = (hi - lo) / (ASIAN_BUCKETS - 1) as f64;
    let bucket_value = |k: u32| lo + width * k as f64;
    let bucket = |a: f64| (((a - lo) / width).round().clamp(0.0, (ASIAN_BUCKETS - 1) as f64)) as u32;
    let pow: Vec<u32> = (0..=n).map(|t| (m as u32).saturating_pow(t as u32)).collect();

    let init_aux = |i: usize| -> u32 {
        match &payoff.kind {
            PayoffKind::AsianCall { .. } => 0,
            PayoffKind::VanillaCall { t, .. } if *t > 0 => 0,
            _ => i as u32,
        }
    };
    let next_aux = |t: usize, i: usize, a: u32, j: usize| -> u32 {
        match &payoff.kind {
            PayoffKind::AsianCall { .. } => {
                let prev = if t == 1 { 0.0 } else { bucket_value(a) };
                bucket((prev * (t - 1) as f64 + x[j]) / t as f64)
            }
            PayoffKind::ForwardStart { .. } => i as u32,
            PayoffKind::VanillaCall { t: tv, .. } => {
                if t == *tv {
                    j as u32
                } else {
                    a
                }
            }
            PayoffKind::SpreadAbs => a,
            PayoffKind::LookbackCall { .. } => a.max(j as u32),
            PayoffKind::Custom { .. } => a + j as u32 * pow[t],
        }
    };
    let value = |j: usize, a: u32| -> f64 {
        match &payoff.kind {
            PayoffKind::AsianCall { strike } => (bucket_value(a) - strike).max(0.0),
            PayoffKind::ForwardStart { strike } => (x[j] - strike * x[a as usize]).max(0.0),
            PayoffKind::VanillaCall { strike, .. } => (x[a as usize] - strike).max(0.0),
            PayoffKind::SpreadAbs => (x[j] - x[a as usize]).abs(),
            PayoffKind::LookbackCall { strike } => (x[a as usize] - strike).max(0.0),
            PayoffKind::Custom { table } => table[a as usize],
        }
    };

    let mut law: HashMap<(u32, u32), f64> = HashMap::new();
    for (i, &p) in plan.init().iter().enumerate() {
        if p > 0.0 {
            *law.entry((i as u32, init_aux(i))).or_default() += p;
        }
    }
    for t in 1..=n {
        let step = chain.step(t);
        let k = plan.kernel_entries(t);
        let mut next: HashMap<(u32, u32), f64> = HashMap::with_capacity(law.len());
        for (&(i, a), &p) in &law {
            for e in step.row(i as usize) {
                let q = k[e];
                if q > 0.0 {
                    let j = step.col(e);
                    *next.entry((j as u32, next_aux(t, i as usize, a, j))).or_default() += p * q;
                }
            }
        }
        law = next;
    }
    Ok(law.iter().map(|(&(j, a), &p)| p * value(j as usize, a)).sum())
}

/// `Gamma = sum_t k_t E_P|X_t - X_{t-1}|` under `plan`.
pub fn transaction_gamma(plan: &TransportPlan, tc: &TransactionCostSpec) -> Result<f64> {
    if tc.rates.len() != plan.steps() {
        return Err(Error::InvalidInput(format!(
            "{} transaction rates for {} steps",
            tc.rates.len(),
            plan.steps()
        )));
    }
    if tc.rates.iter().any(|k| !(*k >= 0.0)) {
        return Err(Error::InvalidInput("transaction rates must be non-negative".into()));
    }
    Ok(plan.pairwise_expectation(|t, a, b| tc.rates[t - 1] * (b - a).abs()))
}

pub fn widen_transaction(bounds: PriceBounds, plan: &TransportPlan, tc: &TransactionCostSpec) -> Result<PriceBounds> {
    Ok(bounds.with_gamma(transaction_gamma(plan, tc)?))
}

/// `Delta = L_phi (L_c + eps D) / eps * max_t delta_t`.
pub fn calibration_delta(deltas: &[f64], payoff_lipschitz: f64, cost_lipschitz: f64, epsilon: f64, diameter: f64) -> Result<f64> {
    if deltas.iter().any(|d| !(*d >= 0.0)) {
        return Err(Error::InvalidInput("calibration errors must be non-negative".into()));
    }
    if !(epsilon > 0.0) {
        return Err(Error::InvalidInput("epsilon must be positive".into()));
    }
    let worst = deltas.iter().cloned().fold(0.0, f64::max);
    Ok(payoff_lipschitz * (cost_lipschitz + epsilon * diameter) / epsilon * worst)
}

pub fn widen_calibration(
    bounds: PriceBounds,
    deltas: &[f64],
    payoff_lipschitz: f64,
    cost_lipschitz: f64,
    epsilon: f64,
    diameter: f64,
) -> Result<PriceBounds> {
    Ok(bounds.with_delta(calibration_delta(deltas, payoff_lipschitz, cost_lipschitz, epsilon, diameter)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;
    use crate::marginals::{generate, ModelParams};
    use crate::reference::build_reference;

    fn fixture(n: usize, m: usize) -> (MarginalSequence, ReferenceChain) {
        let grid = Arc::new(Grid::uniform(0.7, 1.3, m).unwrap());
        let times: Vec<f64> = (0..=n).map(|k| 0.02 + 0.04 * k as f64).collect();
        let seq = generate(&ModelParams::default(), &times, grid.clone()).unwrap();
        let q = build_reference(grid, &times, 0.2, 1e-9).unwrap();
        (seq, q)
    }

    #[test]
    fn widening_arithmetic_reproduces_the_worked_example() {
        let b = PriceBounds::new(4.23, 4.57);
        let b = b.with_gamma(0.05);
        assert!((b.widened[0] - 4.18).abs() < 1e-12 && (b.widened[1] - 4.62).abs() < 1e-12);
        let b = b.with_delta(0.10);
        assert!((b.widened[0] - 4.13).abs() < 1e-12 && (b.widened[1] - 4.67).abs() < 1e-12);
        assert!((b.mid - 4.40).abs() < 1e-12);
    }

    #[test]
    fn calibration_delta_is_linear_and_zero_at_zero() {
        let d1 = calibration_delta(&[0.01, 0.02], 1.0, 1.0, 0.1, 0.6).unwrap();
        let d2 = calibration_delta(&[0.01, 0.04], 1.0, 1.0, 0.1, 0.6).unwrap();
        assert!((d2 - 2.0 * d1).abs() < 1e-15);
        assert!((d1 - (1.0 + 0.06) / 0.1 * 0.02).abs() < 1e-15);
        assert_eq!(calibration_delta(&[0.0, 0.0], 1.0, 1.0, 0.1, 0.6).unwrap(), 0.0);
    }

    #[test]
    fn vanilla_and_linear_payoffs_are_pinned_by_marginals() {
        let (seq, q) = fixture(2, 40);
        let cfg = SolverConfig::with_epsilon(0.2);
        let call = price_bounds(&seq, &q, &PayoffSpec::vanilla_call(1.0, 2), &cfg).unwrap();
        let exact = seq.marginal(2).call_price(1.0);
        assert!((call.bounds.lower - exact).abs() < 1e-8, "{:?} {exact}", call.bounds);
        assert!((call.bounds.upper - exact).abs() < 1e-8);

        let linear = price_bounds(&seq, &q, &PayoffSpec::vanilla_call(0.5, 2), &cfg).unwrap();
        let mean = seq.marginal(0).mean() - 0.5;
        assert!((linear.bounds.lower - mean).abs() < 1e-8);
        assert!((linear.bounds.upper - mean).abs() < 1e-8);
    }

    #[test]
    fn asian_bounds_are_ordered_and_bracket_the_reference_model() {
        let (seq, q) = fixture(3, 30);
        let cfg = SolverConfig::with_epsilon(0.05);
        let out = price_bounds(&seq, &q, &PayoffSpec::asian_call(1.0), &cfg).unwrap();
        assert!(out.bounds.lower < out.bounds.upper, "{:?}", out.bounds);
        assert!(out.lower.report.max_drift < 1e-6);
        assert!(out.upper.report.marginal_defect < 1e-8);
        // A call on the average is cheaper than the average of calls.
        let avg_calls: f64 = (1..=3).map(|t| seq.marginal(t).call_price(1.0)).sum::<f64>() / 3.0;
        assert!(out.bounds.upper <= avg_calls + 0.02, "{} vs {avg_calls}", out.bounds.upper);
    }

    #[test]
    fn augmented_chain_matches_brute_force_expectation() {
        // E_P[payoff] from the augmented plan must equal the explicit sum
        // over (x_0, x_1, x_2) paths with the same kernels.
        let (seq, q) = fixture(2, 6);
        let cfg = SolverConfig::with_epsilon(0.5);
        let out = price_bounds(&seq, &q, &PayoffSpec::spread_abs(), &cfg).unwrap();
        let plan = &out.lower.plan;
        let x = seq.grid().points();
        let mut total = 0.0;
        let chain = plan.chain();
        for s1 in 0..chain.layer(1).len() {
            for e in chain.step(2).row(s1) {
                let s2 = chain.step(2).col(e);
                let x2 = x[chain.layer(2)[s2] as usize];
                let k = plan.kernel_entries(2)[e];
                // aux of layer 1 is x_0; recover it from the layer-0 parent.
                for e0 in chain.step(1).column(s1) {
                    let s0 = chain.step(1).row_of(*e0 as usize);
                    let x0 = x[chain.layer(0)[s0] as usize];
                    let w = plan.init()[s0] * plan.kernel_entries(1)[*e0 as usize];
                    total += w * k * (x2 - x0).abs();
                }
            }
        }
        assert!((total - out.bounds.lower).abs() < 1e-12, "{total} vs {}", out.bounds.lower);
    }

    #[test]
    fn gamma_is_additive_and_homogeneous() {
        let (seq, q) = fixture(2, 30);
        let cfg = SolverConfig::with_epsilon(0.2);
        let out = price_bounds(&seq, &q, &PayoffSpec::forward_start(1.0), &cfg).unwrap();
        let plan = &out.lower.plan;
        let g1 = transaction_gamma(plan, &TransactionCostSpec { rates: vec![0.001, 0.0] }).unwrap();
        let g2 = transaction_gamma(plan, &TransactionCostSpec { rates: vec![0.0, 0.001] }).unwrap();
        let g = transaction_gamma(plan, &TransactionCostSpec { rates: vec![0.001, 0.001] }).unwrap();
        assert!((g - g1 - g2).abs() < 1e-15);
        let g3 = transaction_gamma(plan, &TransactionCostSpec { rates: vec![0.003, 0.003] }).unwrap();
        assert!((g3 - 3.0 * g).abs() < 1e-14);
        let zero = transaction_gamma(plan, &TransactionCostSpec { rates: vec![0.0, 0.0] }).unwrap();
        assert_eq!(zero, 0.0);
        let b = widen_transaction(out.bounds, plan, &TransactionCostSpec { rates: vec![0.0, 0.0] }).unwrap();
        assert_eq!(b.widened, [out.bounds.lower, out.bounds.upper]);
    }

    #[test]
    fn plan_expectation_matches_the_augmented_bounds() {
        // Forward propagation must agree with an explicit sum over every
        // grid path under the same kernels.
        let (seq, q) = fixture(2, 7);
        let cfg = SolverConfig::with_epsilon(0.4);
        let sol = crate::solver::solve(&seq, &q, &CostSpec::pairwise_abs(seq.grid(), 2), &cfg, None).unwrap();
        let plan = &sol.plan;
        let x = seq.grid().points();
        let k1 = plan.dense_kernel(1).unwrap();
        let k2 = plan.dense_kernel(2).unwrap();
        let payoffs = [
            PayoffSpec::lookback_call(1.0),
            PayoffSpec::spread_abs(),
            PayoffSpec::forward_start(1.0),
            PayoffSpec::vanilla_call(1.0, 1),
            PayoffSpec::vanilla_call(0.9, 0),
        ];
        for p in &payoffs {
            let mut brute = 0.0;
            for i in 0..7 {
                for j in 0..7 {
                    for l in 0..7 {
                        let w = plan.init()[i] * k1[i][j] * k2[j][l];
                        brute += w * p.evaluate(&[x[i], x[j], x[l]]).unwrap();
                    }
                }
            }
            let fwd = expected_payoff(plan, p).unwrap();
            assert!((fwd - brute).abs() < 1e-13, "{p:?}: {fwd} vs {brute}");
        }
    }

    #[test]
    fn custom_tables_are_limited_to_short_horizons() {
        let (_, q) = fixture(4, 6);
        let p = PayoffSpec::custom(vec![0.0; 6usize.pow(5)], 1.0);
        assert!(matches!(payoff_chain(&q, &p, 1.0), Err(Error::UnsupportedPayoff(_))));
    }

    #[test]
    fn custom_table_agrees_with_builtin_spread() {
        let (seq, q) = fixture(2, 5);
        let x = seq.grid().points();
        let mut table = vec![0.0; 125];
        for (code, v) in table.iter_mut().enumerate() {
            let (i0, i2) = (code % 5, code / 25);
            *v = (x[i2] - x[i0]).abs();
        }
        let cfg = SolverConfig::with_epsilon(0.3);
        let a = price_bounds(&seq, &q, &PayoffSpec::custom(table, 1.0), &cfg).unwrap();
        let b = price_bounds(&seq, &q, &PayoffSpec::spread_abs(), &cfg).unwrap();
        assert!((a.bounds.lower - b.bounds.lower).abs() < 1e-8);
        assert!((a.bounds.upper - b.bounds.upper).abs() < 1e-8);
    }
}
