//! Entropic martingale Sinkhorn: alternating marginal (u) and martingale (h)
//! updates on the chain-structured Gibbs measure, with duality diagnostics.

mod cost;
mod engine;
mod plan;

pub use cost::{CostKind, CostSpec};
pub use engine::{martingale_tilt, ChainSolver, ROW_MASS_TOL};
pub use plan::TransportPlan;

use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::chain::Chain;
use crate::error::{Error, Result};
use crate::marginals::{require_convex_order, Marginal, MarginalSequence};
use crate::reference::ReferenceChain;

/// Convex-order tolerance applied to solver inputs.
pub const INPUT_ORDER_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub epsilon: f64,
    /// Stop when `|u' - u|_inf + |h' - h|_inf < tol`.
    pub tol: f64,
    pub drift_tol: f64,
    pub max_iters: usize,
    /// Row tilt tolerance relative to the grid diameter.
    pub h_newton_tol: f64,
    pub h_newton_max: usize,
    /// Keep every iterate to report distances to the final potentials.
    pub record_history: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.1,
            tol: 1e-10,
            drift_tol: 1e-6,
            max_iters: 20_000,
            h_newton_tol: 1e-13,
            h_newton_max: 200,
            record_history: true,
        }
    }
}

impl SolverConfig {
    pub fn with_epsilon(epsilon: f64) -> Self {
        Self {
            epsilon,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(Error::InvalidInput("epsilon must be positive".into()));
        }
        if !(self.tol > 0.0) || !(self.drift_tol > 0.0) || !(self.h_newton_tol > 0.0) {
            return Err(Error::InvalidInput("tolerances must be positive".into()));
        }
        if self.max_iters == 0 || self.h_newton_max == 0 {
            return Err(Error::InvalidInput("iteration caps must be positive".into()));
        }
        Ok(())
    }
}

/// Marginal potentials `u_t` on the grid (t = 0..N) and martingale
/// potentials `h_t` on the states of layer `t - 1` (stored at index t - 1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualPotentials {
    pub u: Vec<Vec<f64>>,
    pub h: Vec<Vec<f64>>,
}

impl DualPotentials {
    pub fn zeros(chain: &Chain) -> Self {
        let m = chain.grid().len();
        Self {
            u: vec![vec![0.0; m]; chain.steps() + 1],
            h: (0..chain.steps()).map(|t| vec![0.0; chain.layer(t).len()]).collect(),
        }
    }

    pub fn check_shape(&self, chain: &Chain) -> Result<()> {
        let m = chain.grid().len();
        let ok = self.u.len() == chain.steps() + 1
            && self.u.iter().all(|u| u.len() == m)
            && self.h.len() == chain.steps()
            && self.h.iter().enumerate().all(|(t, h)| h.len() == chain.layer(t).len());
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput("potentials do not match the problem shape".into()))
        }
    }

    /// `|u - u'|_inf + |h - h'|_inf`.
    pub fn distance(&self, other: &DualPotentials) -> f64 {
        let sup = |a: &[Vec<f64>], b: &[Vec<f64>]| {
            a.iter()
                .zip(b)
                .flat_map(|(x, y)| x.iter().zip(y))
                .fold(0.0f64, |m, (p, q)| m.max((p - q).abs()))
        };
        sup(&self.u, &other.u) + sup(&self.h, &other.h)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub iters: usize,
    pub converged: bool,
    pub final_sup_change: f64,
    pub max_drift: f64,
    pub marginal_defect: f64,
    pub dual_value: f64,
    pub primal_value: f64,
    pub duality_gap: f64,
    /// Expected transition cost under the plan (no entropy term).
    pub expected_cost: f64,
    /// Distance of each iterate to the final potentials (empty unless
    /// history was recorded).
    pub per_iter_error: Vec<f64>,
    pub per_iter_change: Vec<f64>,
    pub per_iter_dual: Vec<f64>,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone)]
pub struct Solution {
    pub potentials: DualPotentials,
    pub plan: TransportPlan,
    pub report: SolveReport,
    pub epsilon: f64,
}

/// Solve the entropic problem for a pairwise cost on the plain chain.
pub fn solve(
    marginals: &MarginalSequence,
    reference: &ReferenceChain,
    cost: &CostSpec,
    cfg: &SolverConfig,
    warm: Option<&DualPotentials>,
) -> Result<Solution> {
    if reference.grid().points() != marginals.grid().points() {
        return Err(Error::GridMismatch);
    }
    if reference.steps() != marginals.steps() || cost.steps() != marginals.steps() {
        return Err(Error::InvalidInput(
            "marginals, reference and cost disagree on the number of steps".into(),
        ));
    }
    cost.validate(marginals.grid())?;
    let chain = Arc::new(Chain::plain(reference, Some(&cost.tables))?);
    solve_chain(chain, marginals, cfg, warm)
}

/// Solve on an arbitrary (possibly state-augmented) chain.
pub fn solve_chain(
    chain: Arc<Chain>,
    marginals: &MarginalSequence,
    cfg: &SolverConfig,
    warm: Option<&DualPotentials>,
) -> Result<Solution> {
    require_convex_order(marginals, INPUT_ORDER_TOL * marginals.grid().hi().abs().max(1.0))?;
    let solver = ChainSolver::new(chain, marginals, cfg, warm)?;
    run(solver, marginals, cfg)
}

/// Solve on a reference whose time grid refines the marginal dates. Every
/// marginal time must appear among the reference times; the layers in
/// between carry no marginal constraint, only the martingale one.
pub fn solve_refined(
    marginals: &MarginalSequence,
    reference: &ReferenceChain,
    cost: Option<&CostSpec>,
    cfg: &SolverConfig,
    warm: Option<&DualPotentials>,
) -> Result<Solution> {
    if reference.grid().points() != marginals.grid().points() {
        return Err(Error::GridMismatch);
    }
    let layers = layers_of(marginals.times(), reference.times())?;
    if let Some(c) = cost {
        if c.steps() != reference.steps() {
            return Err(Error::InvalidInput("cost must cover every reference step".into()));
        }
        c.validate(marginals.grid())?;
    }
    require_convex_order(marginals, INPUT_ORDER_TOL * marginals.grid().hi().abs().max(1.0))?;
    let chain = Arc::new(Chain::plain(reference, cost.map(|c| c.tables.as_slice()))?);
    let solver = ChainSolver::with_layers(chain, marginals, &layers, cfg, warm)?;
    run_layers(solver, marginals, &layers, cfg)
}

/// Index of each marginal time within the reference times.
pub fn layers_of(marginal_times: &[f64], reference_times: &[f64]) -> Result<Vec<usize>> {
    let tol = 1e-9 * reference_times.last().map_or(1.0, |t| t.abs().max(1.0));
    let layers = marginal_times
        .iter()
        .map(|t| {
            reference_times
                .iter()
                .position(|r| (r - t).abs() <= tol)
                .ok_or_else(|| Error::InvalidInput(format!("marginal time {t} is not a reference time")))
        })
        .collect::<Result<Vec<_>>>()?;
    if layers.first() != Some(&0) || layers.last() != Some(&(reference_times.len() - 1)) {
        return Err(Error::InvalidInput(
            "marginal dates must include the first and last reference times".into(),
        ));
    }
    Ok(layers)
}

/// Iterate an initialised solver to convergence and assemble the solution.
pub(crate) fn run(solver: ChainSolver, marginals: &MarginalSequence, cfg: &SolverConfig) -> Result<Solution> {
    let layers: Vec<usize> = (0..marginals.marginals().len()).collect();
    run_layers(solver, marginals, &layers, cfg)
}

fn run_layers(
    mut solver: ChainSolver,
    marginals: &MarginalSequence,
    layers: &[usize],
    cfg: &SolverConfig,
) -> Result<Solution> {
    let start = Instant::now();
    let mut history = Vec::new();
    let mut changes = Vec::new();
    let mut duals = Vec::new();
    let mut converged = false;
    for _ in 0..cfg.max_iters {
        let change = solver.iterate()?;
        changes.push(change);
        duals.push(solver.dual_value());
        if cfg.record_history {
            history.push(solver.potentials());
        }
        if change < cfg.tol {
            converged = true;
            break;
        }
    }
    let solution = assemble_layers(&solver, marginals, layers, changes, duals, &history, converged, start);
    if converged {
        Ok(solution)
    } else {
        Err(Error::MaxItersExceeded(Box::new(solution)))
    }
}

pub(crate) fn assemble(
    solver: &ChainSolver,
    marginals: &MarginalSequence,
    changes: Vec<f64>,
    duals: Vec<f64>,
    history: &[DualPotentials],
    converged: bool,
    start: Instant,
) -> Solution {
    let layers: Vec<usize> = (0..marginals.marginals().len()).collect();
    assemble_layers(solver, marginals, &layers, changes, duals, history, converged, start)
}

#[allow(clippy::too_many_arguments)]
fn assemble_layers(
    solver: &ChainSolver,
    marginals: &MarginalSequence,
    layers: &[usize],
    changes: Vec<f64>,
    duals: Vec<f64>,
    history: &[DualPotentials],
    converged: bool,
    start: Instant,
) -> Solution {
    let potentials = solver.potentials();
    let plan = solver.plan();
    let eps = solver.epsilon();
    let expected_cost = plan.expected_cost();
    let primal = expected_cost + eps * plan.kl_to_reference();
    let dual = solver.dual_value();
    let report = SolveReport {
        iters: changes.len(),
        converged,
        final_sup_change: changes.last().copied().unwrap_or(f64::NAN),
        max_drift: layered_drift(&plan, marginals, layers),
        marginal_defect: layered_defect(&plan, marginals, layers),
        dual_value: dual,
        primal_value: primal,
        duality_gap: primal - dual,
        expected_cost,
        per_iter_error: history.iter().map(|p| p.distance(&potentials)).collect(),
        per_iter_change: changes,
        per_iter_dual: duals,
        wall_seconds: start.elapsed().as_secs_f64(),
    };
    Solution {
        potentials,
        plan,
        report,
        epsilon: eps,
    }
}

/// Largest drift over states carrying mass; on constrained layers only at
/// points of positive target mass.
fn layered_drift(plan: &TransportPlan, marginals: &MarginalSequence, layers: &[usize]) -> f64 {
    let states = plan.state_marginals();
    let layer_of = |t: usize| layers.iter().position(|&l| l == t);
    let mut worst = 0.0f64;
    for t in 1..=plan.steps() {
        let drift = plan.conditional_drift(t);
        let layer = plan.chain().layer(t - 1);
        let target = layer_of(t - 1).map(|k| marginals.marginal(k).weights());
        for (i, d) in drift.iter().enumerate() {
            let carries = match target {
                Some(w) => w[layer[i] as usize] > 0.0 && states[t - 1][i] > 0.0,
                None => states[t - 1][i] > ROW_MASS_TOL,
            };
            if carries {
                worst = worst.max(d.abs());
            }
        }
    }
    worst
}

fn layered_defect(plan: &TransportPlan, marginals: &MarginalSequence, layers: &[usize]) -> f64 {
    let all = plan.marginals();
    layers
        .iter()
        .zip(marginals.marginals())
        .map(|(&t, m)| all[t].iter().zip(m.weights()).map(|(a, b)| (a - b).abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// `sum_t <u_t, mu_t> - eps log E_Q[exp(G / eps)]` for arbitrary potentials.
pub fn dual_objective(
    chain: Arc<Chain>,
    marginals: &MarginalSequence,
    potentials: &DualPotentials,
    epsilon: f64,
) -> Result<f64> {
    let cfg = SolverConfig::with_epsilon(epsilon);
    let solver = ChainSolver::new(chain, marginals, &cfg, Some(potentials))?;
    Ok(solver.dual_value())
}

/// `E_P[c] + eps KL(P | Q)` for a plan on its chain.
pub fn primal_objective(plan: &TransportPlan, epsilon: f64) -> f64 {
    plan.expected_cost() + epsilon * plan.kl_to_reference()
}

/// W1 between two marginals on the same grid.
pub fn wasserstein1(a: &Marginal, b: &Marginal) -> Result<f64> {
    if a.grid().points() != b.grid().points() {
        return Err(Error::GridMismatch);
    }
    Ok(plan::w1_weights(a.grid().points(), a.weights(), b.weights()))
}
