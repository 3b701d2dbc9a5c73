use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CostKind {
    /// `|x_t - x_{t-1}|` on every step.
    PairwiseAbs,
    /// `(x_t - x_{t-1})^2` on every step.
    PairwiseSquare,
    /// `(x_N - K x_{N-1})^+` on the last step only.
    ForwardStartCall { strike: f64 },
    Custom,
}

/// Per-step pairwise cost tables `c_t(x, y)`, row-major `M x M`.
#[derive(Debug, Clone, PartialEq)]
pub struct CostSpec {
    pub kind: CostKind,
    pub tables: Vec<Vec<f64>>,
    /// Lipschitz constant in the first argument.
    pub lipschitz: f64,
}

const LIPSCHITZ_SAMPLES: usize = 100;

fn table(grid: &Grid, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    let x = grid.points();
    x.iter().flat_map(|&a| x.iter().map(move |&b| (a, b))).map(|(a, b)| f(a, b)).collect()
}

impl CostSpec {
    pub fn pairwise_abs(grid: &Grid, steps: usize) -> Self {
        Self {
            kind: CostKind::PairwiseAbs,
            tables: vec![table(grid, |a, b| (b - a).abs()); steps],
            lipschitz: 1.0,
        }
    }

    pub fn pairwise_square(grid: &Grid, steps: usize) -> Self {
        Self {
            kind: CostKind::PairwiseSquare,
            tables: vec![table(grid, |a, b| (b - a) * (b - a)); steps],
            lipschitz: 2.0 * grid.diameter(),
        }
    }

    pub fn forward_start_call(grid: &Grid, steps: usize, strike: f64) -> Self {
        let m = grid.len();
        let mut tables = vec![vec![0.0; m * m]; steps];
        tables[steps - 1] = table(grid, |a, b| (b - strike * a).max(0.0));
        Self {
            kind: CostKind::ForwardStartCall { strike },
            tables,
            lipschitz: strike.abs().max(f64::MIN_POSITIVE),
        }
    }

    /// Arbitrary tables with a declared Lipschitz constant, checked on a
    /// fixed random sample of triples.
    pub fn custom(grid: &Grid, tables: Vec<Vec<f64>>, lipschitz: f64) -> Result<Self> {
        let spec = Self {
            kind: CostKind::Custom,
            tables,
            lipschitz,
        };
        spec.validate(grid)?;
        Ok(spec)
    }

    pub fn steps(&self) -> usize {
        self.tables.len()
    }

    /// The cost with every entry negated (used for upper bounds).
    pub fn negated(&self) -> Self {
        Self {
            kind: CostKind::Custom,
            tables: self
                .tables
                .iter()
                .map(|t| t.iter().map(|v| -v).collect())
                .collect(),
            lipschitz: self.lipschitz,
        }
    }

    /// Shape check plus `|c(x, y) - c(x', y)| <= L |x - x'|` on 100 sampled
    /// triples per step.
    pub fn validate(&self, grid: &Grid) -> Result<()> {
        let m = grid.len();
        if self.tables.iter().any(|t| t.len() != m * m) {
            return Err(Error::InvalidInput("cost table size does not match the grid".into()));
        }
        if !(self.lipschitz > 0.0) {
            return Err(Error::InvalidInput("cost Lipschitz constant must be positive".into()));
        }
        if self.tables.iter().any(|t| t.iter().any(|v| !v.is_finite())) {
            return Err(Error::InvalidInput("cost table has non-finite entries".into()));
        }
        let x = grid.points();
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
        for (t, tab) in self.tables.iter().enumerate() {
            for _ in 0..LIPSCHITZ_SAMPLES {
                let i = rng.random_range(0..m);
                let k = rng.random_range(0..m);
                let j = rng.random_range(0..m);
                let lhs = (tab[i * m + j] - tab[k * m + j]).abs();
                let rhs = self.lipschitz * (x[i] - x[k]).abs();
                if lhs > rhs * (1.0 + 1e-9) + 1e-12 {
                    return Err(Error::InvalidInput(format!(
                        "cost at step {} is not {}-Lipschitz",
                        t + 1,
                        self.lipschitz
                    )));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_costs_pass_their_lipschitz_check() {
        let g = Grid::uniform(0.5, 1.5, 31).unwrap();
        CostSpec::pairwise_abs(&g, 3).validate(&g).unwrap();
        CostSpec::pairwise_square(&g, 3).validate(&g).unwrap();
        CostSpec::forward_start_call(&g, 3, 1.1).validate(&g).unwrap();
    }

    #[test]
    fn understated_lipschitz_is_rejected() {
        let g = Grid::uniform(0.0, 1.0, 21).unwrap();
        let tables = CostSpec::pairwise_square(&g, 1).tables;
        assert!(CostSpec::custom(&g, tables, 0.1).is_err());
    }

    #[test]
    fn forward_start_only_charges_last_step() {
        let g = Grid::uniform(0.5, 1.5, 5).unwrap();
        let c = CostSpec::forward_start_call(&g, 2, 1.0);
        assert!(c.tables[0].iter().all(|v| *v == 0.0));
        // x = 0.75 -> y = 1.25
        assert!((c.tables[1][5 + 3] - 0.5).abs() < 1e-15);
    }
}
