//! Layered Markov chain structure shared by plain and state-augmented solves.
//!
//! Layer `t` is a list of states, each pinned to a grid point. Step `t`
//! (for `t = 1..=N`) holds the admissible transitions from layer `t - 1` to
//! layer `t` in compressed-row form, together with the reference
//! log-probability and the cost of every transition. A column index is kept
//! alongside so forward messages can be gathered per target state without
//! scattered writes, which keeps parallel sweeps deterministic.
//!
//! A plain chain has one state per grid point in every layer. Path-dependent
//! payoffs add an auxiliary coordinate to the state (running average,
//! running maximum, initial point, ...), which only changes the layers and
//! the sparsity pattern of the steps.

use std::ops::Range;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::reference::{RefKernel, ReferenceChain};

/// Streaming log-sum-exp accumulator.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Lse {
    max: f64,
    sum: f64,
}

impl Lse {
    #[inline]
    pub fn new() -> Self {
        Self {
            max: f64::NEG_INFINITY,
            sum: 0.0,
        }
    }

    #[inline]
    pub fn add(&mut self, v: f64) {
        if v == f64::NEG_INFINITY {
            return;
        }
        if v <= self.max {
            self.sum += (v - self.max).exp();
        } else {
            self.sum = self.sum * (self.max - v).exp() + 1.0;
            self.max = v;
        }
    }

    #[inline]
    pub fn value(self) -> f64 {
        if self.sum == 0.0 {
            f64::NEG_INFINITY
        } else {
            self.max + self.sum.ln()
        }
    }
}

pub(crate) fn log_sum_exp(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut acc = Lse::new();
    for v in values {
        acc.add(v);
    }
    acc.value()
}

/// Transitions between two consecutive layers.
#[derive(Debug)]
pub struct Step {
    n_from: usize,
    n_to: usize,
    row_ptr: Vec<usize>,
    col: Vec<u32>,
    log_ref: Vec<f64>,
    cost: Option<Vec<f64>>,
    col_ptr: Vec<usize>,
    by_col: Vec<u32>,
    row_of: Vec<u32>,
}

impl Step {
    pub fn n_from(&self) -> usize {
        self.n_from
    }

    pub fn n_to(&self) -> usize {
        self.n_to
    }

    pub fn nnz(&self) -> usize {
        self.col.len()
    }

    #[inline]
    pub fn row(&self, i: usize) -> Range<usize> {
        self.row_ptr[i]..self.row_ptr[i + 1]
    }

    #[inline]
    pub fn col(&self, e: usize) -> usize {
        self.col[e] as usize
    }

    #[inline]
    pub fn log_ref(&self, e: usize) -> f64 {
        self.log_ref[e]
    }

    #[inline]
    pub fn cost(&self, e: usize) -> f64 {
        match &self.cost {
            Some(c) => c[e],
            None => 0.0,
        }
    }

    pub fn has_cost(&self) -> bool {
        self.cost.is_some()
    }

    /// Entry ids that end in state `j`, in row order.
    #[inline]
    pub fn column(&self, j: usize) -> &[u32] {
        &self.by_col[self.col_ptr[j]..self.col_ptr[j + 1]]
    }

    #[inline]
    pub fn row_of(&self, e: usize) -> usize {
        self.row_of[e] as usize
    }

    /// Step over grid states from a reference kernel and an optional
    /// row-major cost table; zero reference entries are left out.
    pub fn dense(kernel: &RefKernel, m: usize, cost: Option<&[f64]>) -> Step {
        let mut b = StepBuilder::new(m);
        for i in 0..m {
            let lr = kernel.log_row(i);
            for j in 0..m {
                if lr[j] > f64::NEG_INFINITY {
                    b.push(j, lr[j], cost.map_or(0.0, |c| c[i * m + j]));
                }
            }
            b.end_row();
        }
        b.finish(m)
    }
}

/// Incremental row-by-row construction of a [`Step`].
pub struct StepBuilder {
    row_ptr: Vec<usize>,
    col: Vec<u32>,
    log_ref: Vec<f64>,
    cost: Vec<f64>,
    any_cost: bool,
}

impl StepBuilder {
    pub fn new(rows_hint: usize) -> Self {
        let mut row_ptr = Vec::with_capacity(rows_hint + 1);
        row_ptr.push(0);
        Self {
            row_ptr,
            col: Vec::new(),
            log_ref: Vec::new(),
            cost: Vec::new(),
            any_cost: false,
        }
    }

    #[inline]
    pub fn push(&mut self, col: usize, log_ref: f64, cost: f64) {
        self.col.push(col as u32);
        self.log_ref.push(log_ref);
        self.cost.push(cost);
        self.any_cost |= cost != 0.0;
    }

    pub fn end_row(&mut self) {
        self.row_ptr.push(self.col.len());
    }

    pub fn finish(self, n_to: usize) -> Step {
        let n_from = self.row_ptr.len() - 1;
        let nnz = self.col.len();
        let mut row_of = vec![0u32; nnz];
        for i in 0..n_from {
            for e in self.row_ptr[i]..self.row_ptr[i + 1] {
                row_of[e] = i as u32;
            }
        }
        let mut col_ptr = vec![0usize; n_to + 1];
        for &c in &self.col {
            col_ptr[c as usize + 1] += 1;
        }
        for j in 0..n_to {
            col_ptr[j + 1] += col_ptr[j];
        }
        let mut fill = col_ptr.clone();
        let mut by_col = vec![0u32; nnz];
        for (e, &c) in self.col.iter().enumerate() {
            by_col[fill[c as usize]] = e as u32;
            fill[c as usize] += 1;
        }
        Step {
            n_from,
            n_to,
            row_ptr: self.row_ptr,
            col: self.col,
            log_ref: self.log_ref,
            cost: if self.any_cost { Some(self.cost) } else { None },
            col_ptr,
            by_col,
            row_of,
        }
    }
}

/// A layered chain over a grid.
#[derive(Debug, Clone)]
pub struct Chain {
    grid: Arc<Grid>,
    layers: Vec<Arc<Vec<u32>>>,
    steps: Vec<Arc<Step>>,
    init_log: Vec<f64>,
}

impl Chain {
    pub fn new(
        grid: Arc<Grid>,
        layers: Vec<Arc<Vec<u32>>>,
        steps: Vec<Arc<Step>>,
        init_log: Vec<f64>,
    ) -> Result<Self> {
        if layers.len() != steps.len() + 1 || steps.is_empty() {
            return Err(Error::InvalidInput("chain needs N >= 1 steps and N + 1 layers".into()));
        }
        if init_log.len() != layers[0].len() {
            return Err(Error::InvalidInput("initial law does not match layer 0".into()));
        }
        let m = grid.len() as u32;
        if layers.iter().any(|l| l.is_empty() || l.iter().any(|&g| g >= m)) {
            return Err(Error::InvalidInput("layer state outside the grid".into()));
        }
        for (t, s) in steps.iter().enumerate() {
            if s.n_from != layers[t].len() || s.n_to != layers[t + 1].len() {
                return Err(Error::InvalidInput(format!("step {} has wrong shape", t + 1)));
            }
        }
        Ok(Self {
            grid,
            layers,
            steps,
            init_log,
        })
    }

    /// One state per grid point; step costs from optional row-major tables.
    pub fn plain(reference: &ReferenceChain, costs: Option<&[Vec<f64>]>) -> Result<Self> {
        let grid = reference.grid().clone();
        let m = grid.len();
        let n = reference.steps();
        if let Some(c) = costs {
            if c.len() != n || c.iter().any(|t| t.len() != m * m) {
                return Err(Error::InvalidInput("cost tables do not match the chain".into()));
            }
        }
        let identity: Arc<Vec<u32>> = Arc::new((0..m as u32).collect());
        let mut steps: Vec<Arc<Step>> = Vec::with_capacity(n);
        for t in 0..n {
            let kernel = reference.kernel(t);
            let cost = costs.map(|c| c[t].as_slice());
            // Cost-free steps over the same reference kernel are shared.
            let shared = if cost.map_or(true, |c| c.iter().all(|v| *v == 0.0)) {
                (0..t).find(|&s| {
                    Arc::ptr_eq(reference.kernel(s), kernel) && !steps[s].has_cost()
                })
            } else {
                None
            };
            let step = match shared {
                Some(s) => steps[s].clone(),
                None => Arc::new(Step::dense(kernel, m, cost)),
            };
            steps.push(step);
        }
        let init_log = reference.init().iter().map(|p| p.ln()).collect();
        Self::new(grid, vec![identity; n + 1], steps, init_log)
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    /// Number of steps N.
    pub fn steps(&self) -> usize {
        self.steps.len()
    }

    /// Grid index of each state of layer `t`.
    pub fn layer(&self, t: usize) -> &[u32] {
        &self.layers[t]
    }

    /// Step `t` connects layer `t - 1` to layer `t`, for `t = 1..=N`.
    pub fn step(&self, t: usize) -> &Step {
        &self.steps[t - 1]
    }

    pub fn init_log(&self) -> &[f64] {
        &self.init_log
    }

    /// True when every layer is exactly the grid in order.
    pub fn is_plain(&self) -> bool {
        let m = self.grid.len();
        self.layers
            .iter()
            .all(|l| l.len() == m && l.iter().enumerate().all(|(i, &g)| g as usize == i))
    }

    pub fn total_states(&self) -> usize {
        self.layers.iter().map(|l| l.len()).sum()
    }

    pub fn total_transitions(&self) -> usize {
        self.steps.iter().map(|s| s.nnz()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lse_matches_direct_sum() {
        let v = [0.3, -2.0, 1.7, f64::NEG_INFINITY, 0.0];
        let direct: f64 = v.iter().map(|x| x.exp()).sum::<f64>().ln();
        assert!((log_sum_exp(v) - direct).abs() < 1e-15);
        assert_eq!(log_sum_exp([f64::NEG_INFINITY]), f64::NEG_INFINITY);
    }

    #[test]
    fn lse_is_stable_for_large_inputs() {
        let v = [1000.0, 1000.0];
        assert!((log_sum_exp(v) - (1000.0 + 2f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn builder_column_index_is_consistent() {
        let mut b = StepBuilder::new(2);
        b.push(1, -0.1, 0.0);
        b.push(2, -0.2, 1.0);
        b.end_row();
        b.push(0, -0.3, 0.0);
        b.push(2, -0.4, 0.0);
        b.end_row();
        let s = b.finish(3);
        assert_eq!(s.nnz(), 4);
        assert!(s.has_cost());
        let col2: Vec<usize> = s.column(2).iter().map(|&e| s.row_of(e as usize)).collect();
        assert_eq!(col2, vec![0, 1]);
        assert_eq!(s.column(0), &[2]);
        assert_eq!(s.cost(1), 1.0);
    }

    #[test]
    fn plain_chain_shares_cost_free_steps() {
        let grid = Arc::new(Grid::uniform(0.5, 1.5, 11).unwrap());
        let q = ReferenceChain::build(grid, &[0.0, 0.1, 0.2, 0.3], 0.2, 1e-9).unwrap();
        let c = Chain::plain(&q, None).unwrap();
        assert!(c.is_plain());
        assert!(Arc::ptr_eq(&c.steps[0], &c.steps[2]));
        assert_eq!(c.total_transitions(), 3 * 121);
    }
}
