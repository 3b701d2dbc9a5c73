//! Discrete 1-D state spaces.
//!
//! A [`Grid`] is a strictly increasing list of asset levels. Uniform grids
//! come from [`Grid::uniform`]; [`make_sparse`] refines a binary interval
//! tree where the marginals put their mass and returns the leaf centroids.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::marginals::MarginalSequence;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Grid {
    points: Vec<f64>,
}

impl TryFrom<Vec<f64>> for Grid {
    type Error = Error;
    fn try_from(points: Vec<f64>) -> Result<Self> {
        Grid::from_points(points)
    }
}

impl From<Grid> for Vec<f64> {
    fn from(g: Grid) -> Self {
        g.points
    }
}

impl Grid {
    /// `m` equally spaced points on `[lo, hi]`, endpoints included.
    pub fn uniform(lo: f64, hi: f64, m: usize) -> Result<Self> {
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() || m < 2 {
            return Err(Error::InvalidBounds { lo, hi, m });
        }
        let step = (hi - lo) / (m - 1) as f64;
        let mut points: Vec<f64> = (0..m).map(|i| lo + step * i as f64).collect();
        points[m - 1] = hi;
        Ok(Grid { points })
    }

    pub fn from_points(points: Vec<f64>) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::InvalidInput(format!(
                "grid needs at least 2 points, got {}",
                points.len()
            )));
        }
        if points.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidInput("grid points must be finite".into()));
        }
        if points.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidInput(
                "grid points must be strictly increasing".into(),
            ));
        }
        Ok(Grid { points })
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn lo(&self) -> f64 {
        self.points[0]
    }

    pub fn hi(&self) -> f64 {
        self.points[self.points.len() - 1]
    }

    pub fn diameter(&self) -> f64 {
        self.hi() - self.lo()
    }

    pub fn min_spacing(&self) -> f64 {
        self.points
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(f64::INFINITY, f64::min)
    }

    pub fn max_spacing(&self) -> f64 {
        self.points
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(0.0, f64::max)
    }

    /// Index of the grid point closest to `x`.
    pub fn nearest(&self, x: f64) -> usize {
        match self.points.binary_search_by(|p| p.total_cmp(&x)) {
            Ok(i) => i,
            Err(0) => 0,
            Err(i) if i >= self.points.len() => self.points.len() - 1,
            Err(i) => {
                if x - self.points[i - 1] <= self.points[i] - x {
                    i - 1
                } else {
                    i
                }
            }
        }
    }

    /// Same grid with `lo`/`hi` added when they are not already endpoints.
    pub fn with_endpoints(&self, lo: f64, hi: f64) -> Result<Self> {
        let mut pts = self.points.clone();
        if lo < pts[0] {
            pts.insert(0, lo);
        }
        if hi > pts[pts.len() - 1] {
            pts.push(hi);
        }
        Grid::from_points(pts)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SparseGridConfig {
    /// Split threshold on `max_t mu_t(C) * diam(C) / diam(X)`.
    pub threshold: f64,
    /// Number of refinement passes over the leaves.
    pub max_depth: usize,
}

pub const MAX_SPARSE_DEPTH: usize = 30;

impl SparseGridConfig {
    pub fn new(threshold: f64, max_depth: usize) -> Result<Self> {
        if !(threshold >= 0.0) {
            return Err(Error::InvalidInput(format!(
                "sparse threshold must be >= 0, got {threshold}"
            )));
        }
        if max_depth > MAX_SPARSE_DEPTH {
            return Err(Error::InvalidInput(format!(
                "sparse max_depth {max_depth} exceeds {MAX_SPARSE_DEPTH}"
            )));
        }
        Ok(Self {
            threshold,
            max_depth,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Cell {
    lo: f64,
    hi: f64,
}

/// Leaf cells of the refinement tree, in increasing order.
fn sparse_leaves(marginals: &MarginalSequence, cfg: &SparseGridConfig) -> Vec<Cell> {
    let grid = marginals.grid();
    let pts = grid.points();
    let domain_hi = grid.hi();
    let diam = grid.diameter();

    // Mass of a cell: right-open, except the cell that touches the domain top.
    let cell_score = |c: &Cell| -> f64 {
        let closed = c.hi >= domain_hi;
        let start = pts.partition_point(|&x| x < c.lo);
        let end = if closed {
            pts.partition_point(|&x| x <= c.hi)
        } else {
            pts.partition_point(|&x| x < c.hi)
        };
        let mass = marginals
            .marginals()
            .iter()
            .map(|m| m.weights()[start..end].iter().sum::<f64>())
            .fold(0.0, f64::max);
        mass * (c.hi - c.lo) / diam
    };

    let mut leaves = vec![Cell {
        lo: grid.lo(),
        hi: domain_hi,
    }];
    for _ in 0..cfg.max_depth {
        let mut next = Vec::with_capacity(leaves.len() * 2);
        let mut split_any = false;
        for c in leaves {
            if cell_score(&c) > cfg.threshold {
                let mid = 0.5 * (c.lo + c.hi);
                next.push(Cell { lo: c.lo, hi: mid });
                next.push(Cell { lo: mid, hi: c.hi });
                split_any = true;
            } else {
                next.push(c);
            }
        }
        leaves = next;
        if !split_any {
            break;
        }
    }
    leaves
}

/// Adaptive sparse grid: centroids of the leaves of a binary interval tree
/// whose cells are split while `max_t mu_t(C) * diam(C) / diam(X) > threshold`.
pub fn make_sparse(marginals: &MarginalSequence, cfg: &SparseGridConfig) -> Result<Grid> {
    let leaves = sparse_leaves(marginals, cfg);
    if leaves.len() < 2 {
        return Err(Error::EmptyGrid {
            leaves: leaves.len(),
        });
    }
    Grid::from_points(leaves.iter().map(|c| 0.5 * (c.lo + c.hi)).collect())
}

/// Split boundaries produced by the refinement tree (interior cell edges).
pub fn sparse_split_points(marginals: &MarginalSequence, cfg: &SparseGridConfig) -> Vec<f64> {
    let leaves = sparse_leaves(marginals, cfg);
    leaves.iter().skip(1).map(|c| c.lo).collect()
}
