use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::chain::Chain;
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::marginals::MarginalSequence;

const SAMPLE_CHUNK: usize = 1000;

/// A Markov measure on a chain: initial law on layer 0 plus one conditional
/// distribution per state and step, aligned with the step's transitions.
#[derive(Debug, Clone)]
pub struct TransportPlan {
    chain: Arc<Chain>,
    init: Vec<f64>,
    kernels: Vec<Vec<f64>>,
}

impl TransportPlan {
    pub fn new(chain: Arc<Chain>, init: Vec<f64>, kernels: Vec<Vec<f64>>) -> Result<Self> {
        if init.len() != chain.layer(0).len() || kernels.len() != chain.steps() {
            return Err(Error::InvalidInput("plan does not match chain".into()));
        }
        for (t, k) in kernels.iter().enumerate() {
            if k.len() != chain.step(t + 1).nnz() {
                return Err(Error::InvalidInput(format!("kernel {} has wrong size", t + 1)));
            }
        }
        Ok(Self {
            chain,
            init,
            kernels,
        })
    }

    pub fn chain(&self) -> &Arc<Chain> {
        &self.chain
    }

    pub fn grid(&self) -> &Arc<Grid> {
        self.chain.grid()
    }

    pub fn steps(&self) -> usize {
        self.chain.steps()
    }

    /// Law of the layer-0 state.
    pub fn init(&self) -> &[f64] {
        &self.init
    }

    /// Conditional probabilities of step `t`, aligned with its transitions.
    pub fn kernel_entries(&self, t: usize) -> &[f64] {
        &self.kernels[t - 1]
    }

    fn propagate(&self, t: usize, prev: &[f64]) -> Vec<f64> {
        let step = self.chain.step(t);
        let k = &self.kernels[t - 1];
        (0..step.n_to())
            .into_par_iter()
            .with_min_len(64)
            .map(|j| {
                step.column(j)
                    .iter()
                    .map(|&e| prev[step.row_of(e as usize)] * k[e as usize])
                    .sum()
            })
            .collect()
    }

    /// Law of the state at every layer.
    pub fn state_marginals(&self) -> Vec<Vec<f64>> {
        let mut out = Vec::with_capacity(self.steps() + 1);
        out.push(self.init.clone());
        for t in 1..=self.steps() {
            let next = self.propagate(t, &out[t - 1]);
            out.push(next);
        }
        out
    }

    fn to_grid(&self, t: usize, states: &[f64]) -> Vec<f64> {
        let mut w = vec![0.0; self.grid().len()];
        for (s, &g) in self.chain.layer(t).iter().enumerate() {
            w[g as usize] += states[s];
        }
        w
    }

    /// Grid marginal at every time.
    pub fn marginals(&self) -> Vec<Vec<f64>> {
        self.state_marginals()
            .iter()
            .enumerate()
            .map(|(t, s)| self.to_grid(t, s))
            .collect()
    }

    pub fn marginal(&self, t: usize) -> Vec<f64> {
        self.marginals().swap_remove(t)
    }

    /// `E[X_t - X_{t-1} | state]` for every state of layer `t - 1`.
    pub fn conditional_drift(&self, t: usize) -> Vec<f64> {
        let step = self.chain.step(t);
        let x = self.grid().points();
        let from = self.chain.layer(t - 1);
        let to = self.chain.layer(t);
        let k = &self.kernels[t - 1];
        (0..step.n_from())
            .map(|i| {
                let xi = x[from[i] as usize];
                step.row(i)
                    .map(|e| k[e] * (x[to[step.col(e)] as usize] - xi))
                    .sum()
            })
            .collect()
    }

    /// Largest |conditional drift| over states that carry mass and, when
    /// marginals are given, sit on a point of positive target mass.
    pub fn max_drift(&self, marginals: Option<&MarginalSequence>) -> f64 {
        let states = self.state_marginals();
        let mut worst = 0.0f64;
        for t in 1..=self.steps() {
            let drift = self.conditional_drift(t);
            let layer = self.chain.layer(t - 1);
            for (i, d) in drift.iter().enumerate() {
                let on_support = marginals
                    .map_or(true, |m| m.marginal(t - 1).weights()[layer[i] as usize] > 0.0);
                if states[t - 1][i] > 0.0 && on_support {
                    worst = worst.max(d.abs());
                }
            }
        }
        worst
    }

    /// Largest L1 distance between the plan's marginals and the targets.
    pub fn marginal_defect(&self, marginals: &MarginalSequence) -> f64 {
        self.marginals()
            .iter()
            .zip(marginals.marginals())
            .map(|(p, m)| p.iter().zip(m.weights()).map(|(a, b)| (a - b).abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    /// Sum over steps of `E[f(t, X_{t-1}, X_t)]`.
    pub fn pairwise_expectation(&self, f: impl Fn(usize, f64, f64) -> f64) -> f64 {
        let states = self.state_marginals();
        let x = self.grid().points();
        let mut total = 0.0;
        for t in 1..=self.steps() {
            let step = self.chain.step(t);
            let from = self.chain.layer(t - 1);
            let to = self.chain.layer(t);
            let k = &self.kernels[t - 1];
            for i in 0..step.n_from() {
                let p = states[t - 1][i];
                if p == 0.0 {
                    continue;
                }
                let xi = x[from[i] as usize];
                let row: f64 = step
                    .row(i)
                    .map(|e| k[e] * f(t, xi, x[to[step.col(e)] as usize]))
                    .sum();
                total += p * row;
            }
        }
        total
    }

    /// `E|X_t - X_{t-1}|` for step `t`.
    pub fn expected_abs_increment(&self, t: usize) -> f64 {
        self.pairwise_expectation(|s, a, b| if s == t { (b - a).abs() } else { 0.0 })
    }

    /// Expected total transition cost of the chain.
    pub fn expected_cost(&self) -> f64 {
        let states = self.state_marginals();
        let mut total = 0.0;
        for t in 1..=self.steps() {
            let step = self.chain.step(t);
            if !step.has_cost() {
                continue;
            }
            let k = &self.kernels[t - 1];
            for i in 0..step.n_from() {
                let p = states[t - 1][i];
                if p > 0.0 {
                    total += p * step.row(i).map(|e| k[e] * step.cost(e)).sum::<f64>();
                }
            }
        }
        total
    }

    /// KL divergence from the chain's reference measure.
    pub fn kl_to_reference(&self) -> f64 {
        let states = self.state_marginals();
        let mut kl = 0.0;
        for (p, lq) in self.init.iter().zip(self.chain.init_log()) {
            if *p > 0.0 {
                kl += p * (p.ln() - lq);
            }
        }
        for t in 1..=self.steps() {
            let step = self.chain.step(t);
            let k = &self.kernels[t - 1];
            for i in 0..step.n_from() {
                let p = states[t - 1][i];
                if p == 0.0 {
                    continue;
                }
                let row: f64 = step
                    .row(i)
                    .filter(|&e| k[e] > 0.0)
                    .map(|e| k[e] * (k[e].ln() - step.log_ref(e)))
                    .sum();
                kl += p * row;
            }
        }
        kl
    }

    /// Conditional law of step `t` from state `i`, aggregated onto the grid.
    pub fn row_on_grid(&self, t: usize, i: usize) -> Vec<f64> {
        let step = self.chain.step(t);
        let to = self.chain.layer(t);
        let k = &self.kernels[t - 1];
        let mut w = vec![0.0; self.grid().len()];
        for e in step.row(i) {
            w[to[step.col(e)] as usize] += k[e];
        }
        w
    }

    /// Dense `M x M` transition matrix of step `t` for plain chains.
    pub fn dense_kernel(&self, t: usize) -> Result<Vec<Vec<f64>>> {
        if !self.chain.is_plain() {
            return Err(Error::InvalidInput("dense kernels exist only for plain chains".into()));
        }
        Ok((0..self.grid().len()).map(|i| self.row_on_grid(t, i)).collect())
    }

    /// Sample `n` state paths. Chunks of paths use independent RNG streams
    /// derived from `seed`, so the result does not depend on thread count.
    pub fn sample_paths(&self, n: usize, seed: u64) -> Vec<Vec<u32>> {
        let cum: Vec<Vec<f64>> = (1..=self.steps())
            .map(|t| {
                let step = self.chain.step(t);
                let k = &self.kernels[t - 1];
                let mut c = vec![0.0; k.len()];
                for i in 0..step.n_from() {
                    let mut acc = 0.0;
                    for e in step.row(i) {
                        acc += k[e];
                        c[e] = acc;
                    }
                }
                c
            })
            .collect();
        let init_cum: Vec<f64> = self
            .init
            .iter()
            .scan(0.0, |a, p| {
                *a += p;
                Some(*a)
            })
            .collect();
        let chunks = n.div_ceil(SAMPLE_CHUNK);
        (0..chunks)
            .into_par_iter()
            .flat_map_iter(|c| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(c as u64);
                let count = SAMPLE_CHUNK.min(n - c * SAMPLE_CHUNK);
                let mut out = Vec::with_capacity(count);
                for _ in 0..count {
                    let mut path = Vec::with_capacity(self.steps() + 1);
                    let u: f64 = rng.random::<f64>() * init_cum[init_cum.len() - 1];
                    let mut s = init_cum.partition_point(|&v| v <= u).min(init_cum.len() - 1);
                    path.push(s as u32);
                    for t in 1..=self.steps() {
                        let step = self.chain.step(t);
                        let r = step.row(s);
                        let c = &cum[t - 1][r.clone()];
                        let u: f64 = rng.random::<f64>() * c[c.len() - 1];
                        let k = c.partition_point(|&v| v <= u).min(c.len() - 1);
                        s = step.col(r.start + k);
                        path.push(s as u32);
                    }
                    out.push(path);
                }
                out
            })
            .collect()
    }

    /// Path metric between two plans on the same chain: W1 between the
    /// initial laws plus, for every step, the W1 distance between the
    /// conditional laws of each state weighted by the average state mass.
    pub fn path_distance(&self, other: &TransportPlan) -> Result<f64> {
        let same = self.grid().points() == other.grid().points()
            && (0..=self.steps()).all(|t| {
                t <= other.steps() && self.chain.layer(t) == other.chain.layer(t)
            })
            && self.steps() == other.steps();
        if !same {
            return Err(Error::GridMismatch);
        }
        let x = self.grid().points();
        let sa = self.state_marginals();
        let sb = other.state_marginals();
        let mut d = w1_weights(x, &self.to_grid(0, &sa[0]), &other.to_grid(0, &sb[0]));
        for t in 1..=self.steps() {
            for i in 0..self.chain.step(t).n_from() {
                let w = 0.5 * (sa[t - 1][i] + sb[t - 1][i]);
                if w > 0.0 {
                    d += w * w1_weights(x, &self.row_on_grid(t, i), &other.row_on_grid(t, i));
                }
            }
        }
        Ok(d)
    }
}

/// W1 between two weight vectors on the same sorted points.
pub(crate) fn w1_weights(x: &[f64], a: &[f64], b: &[f64]) -> f64 {
    let mut fa = 0.0;
    let mut fb = 0.0;
    let mut d = 0.0;
    for m in 0..x.len() - 1 {
        fa += a[m];
        fb += b[m];
        d += (fa - fb).abs() * (x[m + 1] - x[m]);
    }
    d
}
