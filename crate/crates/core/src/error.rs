use thiserror::Error;

use crate::solver::Solution;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid bounds: lo={lo}, hi={hi}, m={m}")]
    InvalidBounds { lo: f64, hi: f64, m: usize },

    #[error("sparse grid has {leaves} leaf cells, need at least 2")]
    EmptyGrid { leaves: usize },

    #[error("inputs live on different grids")]
    GridMismatch,

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("convex order violated at t={time_index}, strike {strike}: violation {violation:.3e}")]
    ConvexOrderViolation {
        time_index: usize,
        strike: f64,
        violation: f64,
    },

    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error("calibration did not reach step tolerance in {iters} iterations (last step {last_step:.3e})")]
    NotConverged { iters: usize, last_step: f64 },

    #[error("exponential tilt diverged on row {row}")]
    TiltDiverged { row: usize },

    #[error("solver hit the iteration cap ({}) with sup change {:.3e}", .0.report.iters, .0.report.final_sup_change)]
    MaxItersExceeded(Box<Solution>),

    #[error("numerical overflow in log-domain kernels at step {step}: epsilon too small for the cost scale")]
    NumericalOverflow { step: usize },

    #[error("martingale row infeasible at step {step}, state {state} (x = {x}) carrying mass {mass:.3e}")]
    RowInfeasible {
        step: usize,
        state: usize,
        x: f64,
        mass: f64,
    },

    #[error("payoff {0} is not expressible as a chain cost for this horizon")]
    UnsupportedPayoff(String),

    #[error("linear program: {0}")]
    InfeasibleLp(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Validation problems (bad files, bad parameters, infeasible data) as
    /// opposed to numerical failures inside a solve.
    pub fn is_validation(&self) -> bool {
        !matches!(
            self,
            Error::NotConverged { .. }
                | Error::TiltDiverged { .. }
                | Error::MaxItersExceeded(_)
                | Error::NumericalOverflow { .. }
                | Error::RowInfeasible { .. }
        )
    }
}
