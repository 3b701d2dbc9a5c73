//! Appending a maturity to a solved problem.
//!
//! The new period starts from zero potentials. A frozen phase updates only
//! the last marginal potential and the last martingale potential against a
//! cached forward message of the old prefix, which costs one `M x M` step per
//! iteration. A warm-started joint refinement then polishes every block.

use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::chain::Chain;
use crate::error::{Error, Result};
use crate::marginals::{require_convex_order, Marginal, MarginalSequence};
use crate::reference::ReferenceChain;
use crate::solver::{self, ChainSolver, CostSpec, DualPotentials, SolveReport, SolverConfig, TransportPlan};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IncrementalConfig {
    pub k_warm: usize,
    pub k_refine: usize,
    #[serde(flatten)]
    pub solver: SolverConfig,
}

impl Default for IncrementalConfig {
    fn default() -> Self {
        Self {
            k_warm: 50,
            k_refine: 100,
            solver: SolverConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct AppendReport {
    pub frozen_iters: usize,
    pub refine_iters: usize,
    pub frozen_seconds: f64,
    pub refine_seconds: f64,
    /// Diagnostics of the final joint state. `converged` is false when the
    /// refinement budget ran out before the tolerance was met.
    pub solve: SolveReport,
}

impl AppendReport {
    pub fn total_iters(&self) -> usize {
        self.frozen_iters + self.refine_iters
    }
}

#[derive(Debug, Clone)]
pub struct AppendOutcome {
    pub marginals: MarginalSequence,
    pub potentials: DualPotentials,
    pub plan: TransportPlan,
    pub report: AppendReport,
}

/// Extend `prev` (solved on `old`) by one maturity.
///
/// `reference` and `cost` must already describe the extended problem
/// (one more step than `old`).
pub fn append_period(
    prev: &DualPotentials,
    old: &MarginalSequence,
    new_marginal: Marginal,
    new_time: f64,
    reference: &ReferenceChain,
    cost: &CostSpec,
    cfg: &IncrementalConfig,
) -> Result<AppendOutcome> {
    cfg.solver.validate()?;
    let last = *old.times().last().ok_or_else(|| Error::InvalidInput("empty sequence".into()))?;
    if !(new_time > last) {
        return Err(Error::InvalidInput(format!(
            "new maturity {new_time} must come after {last}"
        )));
    }
    if new_marginal.grid().points() != old.grid().points() {
        return Err(Error::GridMismatch);
    }
    let seq = old.push(new_time, new_marginal)?;
    require_convex_order(&seq, solver::INPUT_ORDER_TOL * seq.grid().hi().abs().max(1.0))?;
    let n = seq.steps();
    if reference.steps() != n || cost.steps() != n {
        return Err(Error::InvalidInput(
            "reference and cost must cover the extended horizon".into(),
        ));
    }
    if reference.grid().points() != seq.grid().points() {
        return Err(Error::GridMismatch);
    }
    cost.validate(seq.grid())?;
    let chain = Arc::new(Chain::plain(reference, Some(&cost.tables))?);
    if prev.u.len() != n || prev.h.len() != n - 1 {
        return Err(Error::InvalidInput("previous potentials do not match the old sequence".into()));
    }

    let m = seq.grid().len();
    let mut warm = prev.clone();
    warm.u.push(vec![0.0; m]);
    warm.h.push(vec![0.0; chain.layer(n - 1).len()]);
    let mut engine = ChainSolver::new(chain, &seq, &cfg.solver, Some(&warm))?;

    let frozen_start = Instant::now();
    let alpha_prev = engine.alpha(n - 1).to_vec();
    let mut frozen_iters = 0;
    for _ in 0..cfg.k_warm {
        let change = engine.frozen_iterate(&alpha_prev)?;
        frozen_iters += 1;
        if change < cfg.solver.tol {
            break;
        }
    }
    let frozen_seconds = frozen_start.elapsed().as_secs_f64();

    let refine_start = Instant::now();
    engine.refresh();
    let mut changes = Vec::new();
    let mut duals = Vec::new();
    let mut history = Vec::new();
    let mut converged = false;
    for _ in 0..cfg.k_refine {
        let change = engine.iterate()?;
        changes.push(change);
        duals.push(engine.dual_value());
        if cfg.solver.record_history {
            history.push(engine.potentials());
        }
        if change < cfg.solver.tol {
            converged = true;
            break;
        }
    }
    let refine_iters = changes.len();
    let sol = solver::assemble(&engine, &seq, changes, duals, &history, converged, refine_start);
    let refine_seconds = refine_start.elapsed().as_secs_f64();
    Ok(AppendOutcome {
        marginals: seq,
        potentials: sol.potentials,
        plan: sol.plan,
        report: AppendReport {
            frozen_iters,
            refine_iters,
            frozen_seconds,
            refine_seconds,
            solve: sol.report,
        },
    })
}
