//! Exact unregularized bounds for tiny instances.
//!
//! The linear program over full path probabilities is built explicitly and
//! solved with a dense two-phase simplex method using Bland's rule, which
//! cannot cycle. This is deliberately independent of the entropic solver.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_POINTS: usize = 8;
pub const MAX_STEPS: usize = 3;
pub const MAX_PATHS: usize = 4096;

const PIVOT_TOL: f64 = 1e-11;
const FEAS_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TinyInstance {
    pub grid: Vec<f64>,
    /// `N + 1` weight vectors on the grid.
    pub marginals: Vec<Vec<f64>>,
    /// Cost of every path, indexed by `sum_t i_t M^t`.
    pub cost: Vec<f64>,
}

impl TinyInstance {
    /// Instance with cost `sum_t c(x_{t-1}, x_t)`.
    pub fn pairwise(grid: Vec<f64>, marginals: Vec<Vec<f64>>, c: impl Fn(usize, f64, f64) -> f64) -> Result<Self> {
        let m = grid.len();
        let n = marginals.len().saturating_sub(1);
        let paths = m.checked_pow(n as u32 + 1).unwrap_or(usize::MAX);
        if paths > MAX_PATHS {
            return Err(Error::InvalidInput(format!("{paths} paths exceed the oracle cap")));
        }
        let cost = (0..paths)
            .map(|code| {
                let idx = decode(code, m, n + 1);
                (1..=n).map(|t| c(t, grid[idx[t - 1]], grid[idx[t]])).sum()
            })
            .collect();
        Ok(Self { grid, marginals, cost })
    }

    pub fn steps(&self) -> usize {
        self.marginals.len() - 1
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.grid.len();
        if m < 2 || m > MAX_POINTS {
            return Err(Error::InvalidInput(format!("oracle grids have 2..={MAX_POINTS} points")));
        }
        if self.marginals.len() < 2 || self.steps() > MAX_STEPS {
            return Err(Error::InvalidInput(format!("oracle horizons have 1..={MAX_STEPS} steps")));
        }
        if self.grid.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::InvalidInput("oracle grid must be strictly increasing".into()));
        }
        if self.marginals.iter().any(|w| w.len() != m || w.iter().any(|p| !(*p >= 0.0))) {
            return Err(Error::InvalidInput("oracle marginals must be non-negative grid vectors".into()));
        }
        let paths = m.pow(self.marginals.len() as u32);
        if paths > MAX_PATHS || self.cost.len() != paths {
            return Err(Error::InvalidInput(format!(
                "oracle cost table must have {paths} <= {MAX_PATHS} entries"
            )));
        }
        Ok(())
    }
}

fn decode(mut code: usize, m: usize, len: usize) -> Vec<usize> {
    let mut idx = vec![0; len];
    for slot in idx.iter_mut() {
        *slot = code % m;
        code /= m;
    }
    idx
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LpBounds {
    pub min_value: f64,
    pub max_value: f64,
    /// Optimal path probabilities of the minimisation, full table.
    pub argmin: Vec<f64>,
    pub pivots: usize,
}

/// Equality-form LP `A p = b, p >= 0` over the paths that avoid zero-mass
/// points.
struct PathLp {
    a: Vec<Vec<f64>>,
    b: Vec<f64>,
    paths: Vec<usize>,
}

fn build_lp(inst: &TinyInstance) -> PathLp {
    let m = inst.grid.len();
    let n = inst.steps();
    let total = m.pow(n as u32 + 1);
    let paths: Vec<usize> = (0..total)
        .filter(|&code| {
            decode(code, m, n + 1)
                .iter()
                .enumerate()
                .all(|(t, &i)| inst.marginals[t][i] > 0.0)
        })
        .collect();
    let idx: Vec<Vec<usize>> = paths.iter().map(|&c| decode(c, m, n + 1)).collect();
    let mut a = Vec::new();
    let mut b = Vec::new();
    for t in 0..=n {
        for i in 0..m {
            if inst.marginals[t][i] > 0.0 {
                a.push(idx.iter().map(|p| if p[t] == i { 1.0 } else { 0.0 }).collect());
                b.push(inst.marginals[t][i]);
            }
        }
    }
    for t in 1..=n {
        for i in 0..m {
            if inst.marginals[t - 1][i] > 0.0 {
                a.push(
                    idx.iter()
                        .map(|p| if p[t - 1] == i { inst.grid[p[t]] - inst.grid[i] } else { 0.0 })
                        .collect(),
                );
                b.push(0.0);
            }
        }
    }
    PathLp { a, b, paths }
}

/// Dense simplex tableau with artificial columns after the structural ones.
struct Tableau {
    rows: Vec<Vec<f64>>,
    rhs: Vec<f64>,
    basis: Vec<usize>,
    n_struct: usize,
    pivots: usize,
}

impl Tableau {
    fn new(a: &[Vec<f64>], b: &[f64]) -> Self {
        let r = a.len();
        let n = a.first().map_or(0, |row| row.len());
        let mut rows = Vec::with_capacity(r);
        let mut rhs = Vec::with_capacity(r);
        for (k, (row, &bk)) in a.iter().zip(b).enumerate() {
            let sign = if bk < 0.0 { -1.0 } else { 1.0 };
            let mut full: Vec<f64> = row.iter().map(|v| sign * v).collect();
            full.extend((0..r).map(|j| if j == k { 1.0 } else { 0.0 }));
            rows.push(full);
            rhs.push(sign * bk);
        }
        Self {
            rows,
            rhs,
            basis: (n..n + r).collect(),
            n_struct: n,
            pivots: 0,
        }
    }

    fn pivot(&mut self, r: usize, c: usize) {
        let p = self.rows[r][c];
        for v in self.rows[r].iter_mut() {
            *v /= p;
        }
        self.rhs[r] /= p;
        let pivot_row = self.rows[r].clone();
        let pivot_rhs = self.rhs[r];
        for k in 0..self.rows.len() {
            if k == r {
                continue;
            }
            let f = self.rows[k][c];
            if f != 0.0 {
                for (v, pv) in self.rows[k].iter_mut().zip(&pivot_row) {
                    *v -= f * pv;
                }
                self.rhs[k] -= f * pivot_rhs;
            }
        }
        self.basis[r] = c;
        self.pivots += 1;
    }

    /// Minimise `cost . x` over the allowed columns with Bland's rule.
    fn optimise(&mut self, cost: &[f64], allowed: impl Fn(usize) -> bool) -> Result<()> {
        let width = self.rows.first().map_or(0, |r| r.len());
        loop {
            // Reduced costs.
            let mut entering = None;
            for c in 0..width {
                if !allowed(c) || self.basis.contains(&c) {
                    continue;
                }
                let mut rc = cost[c];
                for (k, &bk) in self.basis.iter().enumerate() {
                    rc -= cost[bk] * self.rows[k][c];
                }
                if rc < -PIVOT_TOL {
                    entering = Some(c);
                    break;
                }
            }
            let Some(c) = entering else {
                return Ok(());
            };
            let mut leave: Option<(usize, f64)> = None;
            for k in 0..self.rows.len() {
                let a = self.rows[k][c];
                if a > PIVOT_TOL {
                    let ratio = self.rhs[k] / a;
                    let better = match leave {
                        None => true,
                        Some((l, best)) => {
                            ratio < best - 1e-14 || (ratio <= best + 1e-14 && self.basis[k] < self.basis[l])
                        }
                    };
                    if better {
                        leave = Some((k, ratio));
                    }
                }
            }
            let Some((r, _)) = leave else {
                return Err(Error::InfeasibleLp("objective is unbounded".into()));
            };
            self.pivot(r, c);
        }
    }

    fn solution(&self) -> Vec<f64> {
        let mut x = vec![0.0; self.n_struct];
        for (k, &c) in self.basis.iter().enumerate() {
            if c < self.n_struct {
                x[c] = self.rhs[k].max(0.0);
            }
        }
        x
    }
}

/// Phase one: find a basic feasible solution and drop redundant rows.
fn feasible_tableau(lp: &PathLp) -> Result<Tableau> {
    let mut tab = Tableau::new(&lp.a, &lp.b);
    let n = tab.n_struct;
    let width = n + lp.a.len();
    let phase1: Vec<f64> = (0..width).map(|c| if c >= n { 1.0 } else { 0.0 }).collect();
    tab.optimise(&phase1, |_| true)?;
    let infeas: f64 = tab
        .basis
        .iter()
        .zip(&tab.rhs)
        .filter(|(c, _)| **c >= n)
        .map(|(_, v)| *v)
        .sum();
    if infeas > FEAS_TOL {
        return Err(Error::InfeasibleLp(format!(
            "no martingale coupling of the marginals (residual {infeas:.3e})"
        )));
    }
    // Drive artificial variables out of the basis; rows where that is
    // impossible are linear combinations of the others.
    let mut k = 0;
    while k < tab.rows.len() {
        if tab.basis[k] >= n {
            if let Some(c) = (0..n).find(|&c| tab.rows[k][c].abs() > PIVOT_TOL && !tab.basis.contains(&c)) {
                tab.pivot(k, c);
            } else {
                tab.rows.remove(k);
                tab.rhs.remove(k);
                tab.basis.remove(k);
                continue;
            }
        }
        k += 1;
    }
    Ok(tab)
}

fn minimise(lp: &PathLp, tab: &Tableau, cost: &[f64]) -> Result<(f64, Vec<f64>, usize)> {
    let mut t = Tableau {
        rows: tab.rows.clone(),
        rhs: tab.rhs.clone(),
        basis: tab.basis.clone(),
        n_struct: tab.n_struct,
        pivots: 0,
    };
    let n = t.n_struct;
    let width = t.rows.first().map_or(n, |r| r.len());
    let full: Vec<f64> = (0..width).map(|c| if c < n { cost[c] } else { 0.0 }).collect();
    t.optimise(&full, |c| c < n)?;
    let x = t.solution();
    let value = x.iter().zip(cost).map(|(p, c)| p * c).sum();
    let _ = lp;
    Ok((value, x, t.pivots))
}

/// Minimum and maximum of `E[cost]` over martingale couplings of the
/// marginals.
pub fn lp_bounds(inst: &TinyInstance) -> Result<LpBounds> {
    inst.validate()?;
    let lp = build_lp(inst);
    if lp.paths.is_empty() {
        return Err(Error::InfeasibleLp("no path avoids zero-mass points".into()));
    }
    let tab = feasible_tableau(&lp)?;
    let cost: Vec<f64> = lp.paths.iter().map(|&c| inst.cost[c]).collect();
    let neg: Vec<f64> = cost.iter().map(|c| -c).collect();
    let (min_value, x, p1) = minimise(&lp, &tab, &cost)?;
    let (neg_max, _, p2) = minimise(&lp, &tab, &neg)?;
    let mut argmin = vec![0.0; inst.cost.len()];
    for (k, &code) in lp.paths.iter().enumerate() {
        argmin[code] = x[k];
    }
    Ok(LpBounds {
        min_value,
        max_value: -neg_max,
        argmin,
        pivots: tab.pivots + p1 + p2,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Exhaustive enumeration of basic feasible solutions.
    fn vertex_enumeration(inst: &TinyInstance) -> (f64, f64) {
        let lp = build_lp(inst);
        // Independent rows by Gaussian elimination.
        let mut rows: Vec<(Vec<f64>, f64)> = Vec::new();
        let mut reduced: Vec<Vec<f64>> = Vec::new();
        for (row, &b) in lp.a.iter().zip(&lp.b) {
            let mut r = row.clone();
            for red in &reduced {
                let lead = red.iter().position(|v| v.abs() > 1e-12).unwrap();
                let f = r[lead] / red[lead];
                for (v, w) in r.iter_mut().zip(red) {
                    *v -= f * w;
                }
            }
            if r.iter().any(|v| v.abs() > 1e-9) {
                reduced.push(r);
                rows.push((row.clone(), b));
            }
        }
        let k = rows.len();
        let n = lp.paths.len();
        let cost: Vec<f64> = lp.paths.iter().map(|&c| inst.cost[c]).collect();
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        let mut subset: Vec<usize> = (0..k).collect();
        loop {
            // Solve the k x k system on the chosen columns.
            let mut mat: Vec<Vec<f64>> = rows
                .iter()
                .map(|(r, b)| {
                    let mut v: Vec<f64> = subset.iter().map(|&c| r[c]).collect();
                    v.push(*b);
                    v
                })
                .collect();
            let mut ok = true;
            for col in 0..k {
                let piv = (col..k).max_by(|&a, &b| mat[a][col].abs().total_cmp(&mat[b][col].abs())).unwrap();
                if mat[piv][col].abs() < 1e-10 {
                    ok = false;
                    break;
                }
                mat.swap(col, piv);
                for r in 0..k {
                    if r != col {
                        let f = mat[r][col] / mat[col][col];
                        for c in col..=k {
                            mat[r][c] -= f * mat[col][c];
                        }
                    }
                }
            }
            if ok {
                let xs: Vec<f64> = (0..k).map(|r| mat[r][k] / mat[r][r]).collect();
                if xs.iter().all(|v| *v >= -1e-10) {
                    let val: f64 = xs.iter().zip(&subset).map(|(x, &c)| x * cost[c]).sum();
                    lo = lo.min(val);
                    hi = hi.max(val);
                }
            }
            // Next combination.
            let mut i = k;
            loop {
                if i == 0 {
                    return (lo, hi);
                }
                i -= 1;
                if subset[i] < n - k + i {
                    subset[i] += 1;
                    for j in i + 1..k {
                        subset[j] = subset[j - 1] + 1;
                    }
                    break;
                }
            }
        }
    }

    fn random_instance(rng: &mut ChaCha8Rng, m: usize, n: usize) -> TinyInstance {
        let grid: Vec<f64> = (0..m).map(|i| i as f64).collect();
        // A random martingale: start at a point mass, spread by random
        // mean-preserving splits.
        let center = (m - 1) as f64 / 2.0;
        let mut w = vec![0.0; m];
        let c0 = center.floor() as usize;
        w[c0] = 1.0 - (center - c0 as f64);
        if c0 + 1 < m {
            w[c0 + 1] += center - c0 as f64;
        }
        let mut marginals = vec![w.clone()];
        for _ in 0..n {
            let mut next = w.clone();
            for i in 1..m - 1 {
                let moved = w[i] * rng.random_range(0.0..0.6);
                next[i] -= moved;
                next[i - 1] += moved / 2.0;
                next[i + 1] += moved / 2.0;
            }
            w = next;
            marginals.push(w.clone());
        }
        let table: Vec<f64> = (0..m.pow(n as u32 + 1)).map(|_| rng.random_range(0.0..1.0)).collect();
        TinyInstance {
            grid,
            marginals,
            cost: table,
        }
    }

    #[test]
    fn forced_split_is_the_only_vertex() {
        let inst = TinyInstance::pairwise(
            vec![1.0, 2.0, 3.0],
            vec![vec![0.0, 1.0, 0.0], vec![0.5, 0.0, 0.5]],
            |_, a, b| (b - a).powi(2) + a,
        )
        .unwrap();
        let lp = lp_bounds(&inst).unwrap();
        assert!((lp.min_value - 3.0).abs() < 1e-12);
        assert!((lp.max_value - 3.0).abs() < 1e-12);
        assert!((lp.argmin[1 + 0] - 0.5).abs() < 1e-12);
        assert!((lp.argmin[1 + 2 * 3] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn identical_marginals_cost_nothing() {
        let w = vec![0.2, 0.3, 0.1, 0.4];
        let inst = TinyInstance::pairwise(vec![0.0, 1.0, 2.0, 3.0], vec![w.clone(), w], |_, a, b| (b - a).abs()).unwrap();
        let lp = lp_bounds(&inst).unwrap();
        assert!(lp.min_value.abs() < 1e-12);
    }

    #[test]
    fn simplex_matches_vertex_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..12 {
            let inst = random_instance(&mut rng, 4, 1);
            let lp = lp_bounds(&inst).unwrap();
            let (lo, hi) = vertex_enumeration(&inst);
            assert!((lp.min_value - lo).abs() < 1e-9, "{} vs {lo}", lp.min_value);
            assert!((lp.max_value - hi).abs() < 1e-9, "{} vs {hi}", lp.max_value);
        }
    }

    #[test]
    fn simplex_handles_two_steps() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..5 {
            let inst = random_instance(&mut rng, 5, 2);
            let lp = lp_bounds(&inst).unwrap();
            assert!(lp.min_value <= lp.max_value + 1e-12);
            // The optimal table is a martingale coupling of the marginals.
            let m = 5;
            for t in 0..=2 {
                for i in 0..m {
                    let mass: f64 = lp
                        .argmin
                        .iter()
                        .enumerate()
                        .filter(|(c, _)| decode(*c, m, 3)[t] == i)
                        .map(|(_, p)| p)
                        .sum();
                    assert!((mass - inst.marginals[t][i]).abs() < 1e-9);
                }
            }
            for t in 1..=2 {
                for i in 0..m {
                    let drift: f64 = lp
                        .argmin
                        .iter()
                        .enumerate()
                        .map(|(c, p)| {
                            let d = decode(c, m, 3);
                            if d[t - 1] == i { p * (inst.grid[d[t]] - inst.grid[i]) } else { 0.0 }
                        })
                        .sum();
                    assert!(drift.abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn order_violation_is_infeasible() {
        let inst = TinyInstance::pairwise(
            vec![0.0, 1.0, 2.0],
            vec![vec![0.5, 0.0, 0.5], vec![0.0, 1.0, 0.0]],
            |_, a, b| (b - a).abs(),
        )
        .unwrap();
        assert!(matches!(lp_bounds(&inst), Err(Error::InfeasibleLp(_))));
    }

    #[test]
    fn caps_are_enforced() {
        let inst = TinyInstance {
            grid: (0..9).map(|i| i as f64).collect(),
            marginals: vec![vec![1.0 / 9.0; 9]; 2],
            cost: vec![0.0; 81],
        };
        assert!(lp_bounds(&inst).is_err());
    }
}
