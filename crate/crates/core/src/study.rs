//! Numerical studies: iteration-level convergence, the time-discretisation
//! rate, the regularisation sweep, incremental appends, sparse grids and a
//! runtime table.
//!
//! Every study returns a [`StudyReport`] whose rows depend only on the
//! fixture and its seeds. Wall-clock measurements are kept apart in
//! `timings` so the tabular output stays reproducible.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{make_sparse, Grid, SparseGridConfig};
use crate::incremental::{append_period, IncrementalConfig};
use crate::marginals::{generate, simulate_paths, Marginal, MarginalSequence, ModelParams};
use crate::pricing::{expected_payoff, price_bounds, PayoffSpec};
use crate::reference::{build_reference, ReferenceChain, DEFAULT_FLOOR};
use crate::solver::{solve, solve_refined, CostSpec, SolveReport, Solution, SolverConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StudyKind {
    Convergence,
    Donsker,
    Epsilon,
    Incremental,
    Sparse,
    Runtime,
}

impl fmt::Display for StudyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            StudyKind::Convergence => "convergence",
            StudyKind::Donsker => "donsker",
            StudyKind::Epsilon => "epsilon",
            StudyKind::Incremental => "incremental",
            StudyKind::Sparse => "sparse",
            StudyKind::Runtime => "runtime",
        };
        f.write_str(s)
    }
}

/// One CSV cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Field {
    Num(f64),
    Text(String),
}

impl Field {
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Field::Num(v) => Some(*v),
            Field::Text(_) => None,
        }
    }
}

impl fmt::Display for Field {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Field::Num(v) => write!(f, "{v}"),
            Field::Text(s) => f.write_str(s),
        }
    }
}

impl From<f64> for Field {
    fn from(v: f64) -> Self {
        Field::Num(v)
    }
}

impl From<usize> for Field {
    fn from(v: usize) -> Self {
        Field::Num(v as f64)
    }
}

impl From<&str> for Field {
    fn from(v: &str) -> Self {
        Field::Text(v.to_string())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StudyReport {
    pub kind: StudyKind,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Field>>,
    /// Slope of the study's headline regression, if one was fitted.
    pub fitted_slope: Option<f64>,
    pub fitted_constant: Option<f64>,
    /// Further named scalars (theoretical candidates, diagnostics).
    pub extras: BTreeMap<String, f64>,
    /// Conditions worth flagging, e.g. `insufficient` for a tail fit with too
    /// few points.
    pub flags: Vec<String>,
    /// Wall-clock seconds by label. Not part of the CSV.
    pub timings: BTreeMap<String, f64>,
}

impl StudyReport {
    fn new(kind: StudyKind, columns: &[&str]) -> Self {
        Self {
            kind,
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
            fitted_slope: None,
            fitted_constant: None,
            extras: BTreeMap::new(),
            flags: Vec::new(),
            timings: BTreeMap::new(),
        }
    }

    fn push(&mut self, row: Vec<Field>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    /// Index of a column by name.
    pub fn column(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    /// Numeric values of a column, skipping text cells.
    pub fn values(&self, name: &str) -> Vec<f64> {
        match self.column(name) {
            Some(c) => self.rows.iter().filter_map(|r| r[c].as_f64()).collect(),
            None => Vec::new(),
        }
    }

    /// Header plus rows, comma-separated, LF line ends.
    pub fn to_csv(&self) -> String {
        let mut out = self.columns.join(",");
        out.push('\n');
        for row in &self.rows {
            let cells: Vec<String> = row.iter().map(|f| f.to_string()).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }

    /// A gnuplot script drawing the study from its CSV file.
    pub fn gnuplot_script(&self, csv_path: &str) -> String {
        let head = format!(
            "set datafile separator ','\nset key autotitle columnhead\nset title '{} study'\n",
            self.kind
        );
        let body = match self.kind {
            StudyKind::Convergence => format!(
                "set logscale y\nset xlabel 'iteration'\nset ylabel 'distance to final potentials'\nplot '{csv_path}' using 1:2 with lines\n"
            ),
            StudyKind::Donsker => format!(
                "set logscale xy\nset xlabel 'N'\nset ylabel 'price error'\nplot '{csv_path}' using 1:4 with linespoints\n"
            ),
            StudyKind::Epsilon => format!(
                "set logscale x\nset xlabel 'epsilon'\nset ylabel 'price error (%)'\nset y2label 'iterations'\nset y2tics\nplot '{csv_path}' using 1:7 with linespoints, '' using 1:2 axes x1y2 with linespoints\n"
            ),
            StudyKind::Incremental => format!(
                "set xlabel 'steps after append'\nset ylabel 'iterations'\nplot '{csv_path}' using 1:2 with linespoints, '' using 1:5 with linespoints\n"
            ),
            StudyKind::Sparse => format!(
                "set logscale x\nset xlabel 'points'\nset ylabel 'lower bound'\nplot '{csv_path}' using 2:3 with points\n"
            ),
            StudyKind::Runtime => format!(
                "set style data histograms\nset ylabel 'seconds'\nplot '{csv_path}' using 4:xtic(1)\n"
            ),
        };
        head + &body
    }
}

/// Least-squares line through `(x, y)`: `(slope, intercept)`.
pub fn fit_line(x: &[f64], y: &[f64]) -> Option<(f64, f64)> {
    let n = x.len();
    if n < 2 || y.len() != n {
        return None;
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    Some((slope, my - slope * mx))
}

fn uniform_times(horizon: f64, n: usize) -> Vec<f64> {
    (0..=n).map(|k| horizon * k as f64 / n as f64).collect()
}

fn allow_unconverged(r: Result<Solution>) -> Result<Solution> {
    match r {
        Err(Error::MaxItersExceeded(s)) => Ok(*s),
        other => other,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConvergenceFixture {
    pub steps: usize,
    pub points: usize,
    pub epsilon: f64,
    pub vol: f64,
    pub horizon: f64,
    pub lo: f64,
    pub hi: f64,
    pub seed: u64,
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for ConvergenceFixture {
    fn default() -> Self {
        Self {
            steps: 10,
            points: 150,
            epsilon: 0.5,
            vol: 0.2,
            horizon: 0.2,
            lo: 0.655,
            hi: 1.345,
            seed: 42,
            tol: 1e-10,
            max_iters: 20_000,
        }
    }
}

/// Points of the per-iteration error curve entering the tail fit: the middle
/// third, restricted to positive errors.
pub fn tail_window(errors: &[f64]) -> Vec<(usize, f64)> {
    let k = errors.len();
    (k / 3..2 * k / 3)
        .filter(|&i| errors[i] > 0.0)
        .map(|i| (i, errors[i]))
        .collect()
}

/// Minimum number of points for a tail fit.
pub const MIN_TAIL_POINTS: usize = 3;

/// Slope of `ln(error)` per iteration over [`tail_window`], or `None` when the
/// window is too short.
pub fn tail_slope(errors: &[f64]) -> Option<(f64, f64)> {
    let w = tail_window(errors);
    if w.len() < MIN_TAIL_POINTS {
        return None;
    }
    let x: Vec<f64> = w.iter().map(|(i, _)| *i as f64).collect();
    let y: Vec<f64> = w.iter().map(|(_, e)| e.ln()).collect();
    fit_line(&x, &y)
}

/// Report for a finished solve: per-iteration rows, the tail slope and the
/// two theoretical contraction candidates.
pub fn convergence_report(report: &SolveReport, epsilon: f64, cost_lipschitz: f64, diameter: f64) -> StudyReport {
    let mut out = StudyReport::new(StudyKind::Convergence, &["iter", "error", "sup_change", "dual"]);
    for (k, e) in report.per_iter_error.iter().enumerate() {
        out.push(vec![
            (k + 1).into(),
            (*e).into(),
            report.per_iter_change.get(k).copied().unwrap_or(f64::NAN).into(),
            report.per_iter_dual.get(k).copied().unwrap_or(f64::NAN).into(),
        ]);
    }
    match tail_slope(&report.per_iter_error) {
        Some((slope, intercept)) => {
            out.fitted_slope = Some(slope);
            out.fitted_constant = Some(intercept.exp());
        }
        None => out.flags.push("insufficient".into()),
    }
    let kappa = epsilon / (cost_lipschitz * diameter + epsilon);
    let a = (1.0 - kappa).powf(2.0 / 3.0);
    let b = (1.0 - kappa * kappa).powf(1.0 / 3.0);
    out.extras.insert("kappa".into(), kappa);
    out.extras.insert("candidate_(1-kappa)^(2/3)".into(), a);
    out.extras.insert("candidate_(1-kappa^2)^(1/3)".into(), b);
    out.extras.insert("ln_candidate_(1-kappa)^(2/3)".into(), a.ln());
    out.extras.insert("ln_candidate_(1-kappa^2)^(1/3)".into(), b.ln());
    out.extras.insert("iterations".into(), report.iters as f64);
    out.extras.insert("max_drift".into(), report.max_drift);
    out.extras.insert("duality_gap".into(), report.duality_gap);
    out.timings.insert("solve".into(), report.wall_seconds);
    out
}

/// Solve the fixture (absolute-increment cost on GBM marginals) with history
/// recording and report the convergence curve.
pub fn study_convergence(fx: &ConvergenceFixture) -> Result<StudyReport> {
    let grid = Arc::new(Grid::uniform(fx.lo, fx.hi, fx.points)?);
    let times = uniform_times(fx.horizon, fx.steps);
    let params = ModelParams {
        vol: fx.vol,
        horizon: fx.horizon,
        seed: fx.seed,
        ..Default::default()
    };
    let seq = generate(&params, &times, grid.clone())?;
    let q = build_reference(grid.clone(), &times, fx.vol, DEFAULT_FLOOR)?;
    let cost = CostSpec::pairwise_abs(&grid, fx.steps);
    let cfg = SolverConfig {
        epsilon: fx.epsilon,
        tol: fx.tol,
        max_iters: fx.max_iters,
        record_history: true,
        ..Default::default()
    };
    let sol = allow_unconverged(solve(&seq, &q, &cost, &cfg, None))?;
    let mut out = convergence_report(&sol.report, fx.epsilon, cost.lipschitz, grid.diameter());
    if !sol.report.converged {
        out.flags.push("not_converged".into());
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum DonskerReference {
    /// Gaussian rows truncated at `width` standard deviations (always
    /// reaching the nearest neighbours). Width 1 on a coarse grid is a
    /// nearest-neighbour random walk.
    Banded { width: f64 },
    /// Full-support Gaussian rows with a probability floor.
    Gaussian { floor: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DonskerFixture {
    pub points: usize,
    pub lo: f64,
    pub hi: f64,
    pub vol: f64,
    pub horizon: f64,
    /// Number of equal periods carrying a marginal constraint.
    pub dates: usize,
    pub steps: Vec<usize>,
    pub reference_steps: usize,
    pub strike: f64,
    pub epsilon: f64,
    pub tol: f64,
    pub max_iters: usize,
    pub reference: DonskerReference,
    pub seed: u64,
}

impl Default for DonskerFixture {
    fn default() -> Self {
        Self {
            points: 120,
            lo: 0.6,
            hi: 1.5,
            vol: 0.2,
            horizon: 0.2,
            dates: 5,
            steps: vec![5, 10, 20, 50],
            reference_steps: 200,
            strike: 1.0,
            epsilon: 0.1,
            tol: 1e-3,
            max_iters: 20_000,
            reference: DonskerReference::Banded { width: 12.0 },
            seed: 42,
        }
    }
}

/// Fit `P_N = P_inf - b N^(-a)` by scanning `a` (golden section on the
/// residual, linear least squares for `P_inf` and `b`). Returns `(a, P_inf, b)`.
pub fn fit_power_limit(ns: &[f64], prices: &[f64]) -> Option<(f64, f64, f64)> {
    if ns.len() < 3 {
        return None;
    }
    let residual = |a: f64| -> (f64, f64, f64) {
        let z: Vec<f64> = ns.iter().map(|n| n.powf(-a)).collect();
        match fit_line(&z, prices) {
            Some((slope, icpt)) => {
                let r = z
                    .iter()
                    .zip(prices)
                    .map(|(zi, p)| (p - icpt - slope * zi).powi(2))
                    .sum();
                (r, icpt, -slope)
            }
            None => (f64::INFINITY, f64::NAN, f64::NAN),
        }
    };
    let (mut lo, mut hi) = (0.01, 3.0);
    let g = 0.5 * (5f64.sqrt() - 1.0);
    for _ in 0..100 {
        let a = hi - g * (hi - lo);
        let b = lo + g * (hi - lo);
        if residual(a).0 < residual(b).0 {
            hi = b;
        } else {
            lo = a;
        }
    }
    let a = 0.5 * (lo + hi);
    let (_, p_inf, b) = residual(a);
    Some((a, p_inf, b))
}

/// Lookback price under the regularised projection of a refined reference
/// onto the fixture's marginals, for every refinement level and a fine
/// reference level. Reports the slope of `ln |P_N - P_ref|` against `ln N`
/// and the constant `C` of `|P_N - P_ref| ~ C sqrt(dt) ln(1/dt)`.
pub fn study_donsker(fx: &DonskerFixture) -> Result<StudyReport> {
    if fx.dates == 0 || fx.steps.is_empty() {
        return Err(Error::InvalidInput("need at least one date and one refinement".into()));
    }
    for &n in fx.steps.iter().chain(std::iter::once(&fx.reference_steps)) {
        if n == 0 || n % fx.dates != 0 {
            return Err(Error::InvalidInput(format!(
                "refinement {n} is not a positive multiple of the {} dates",
                fx.dates
            )));
        }
    }
    let grid = Arc::new(Grid::uniform(fx.lo, fx.hi, fx.points)?);
    let date_times = uniform_times(fx.horizon, fx.dates);
    let params = ModelParams {
        vol: fx.vol,
        horizon: fx.horizon,
        seed: fx.seed,
        ..Default::default()
    };
    let seq = generate(&params, &date_times, grid.clone())?;
    let cfg = SolverConfig {
        epsilon: fx.epsilon,
        tol: fx.tol,
        max_iters: fx.max_iters,
        record_history: false,
        ..Default::default()
    };
    let payoff = PayoffSpec::lookback_call(fx.strike);
    let mut timings = BTreeMap::new();
    let mut price_at = |n: usize| -> Result<(f64, SolveReport)> {
        let times = uniform_times(fx.horizon, n);
        let q = match fx.reference {
            DonskerReference::Banded { width } => ReferenceChain::build_banded(grid.clone(), &times, fx.vol, width)?,
            DonskerReference::Gaussian { floor } => build_reference(grid.clone(), &times, fx.vol, floor)?,
        };
        let start = Instant::now();
        let sol = allow_unconverged(solve_refined(&seq, &q, None, &cfg, None))?;
        let price = expected_payoff(&sol.plan, &payoff)?;
        timings.insert(format!("N={n}"), start.elapsed().as_secs_f64());
        Ok((price, sol.report))
    };
    let (p_ref, ref_report) = price_at(fx.reference_steps)?;
    let mut out = StudyReport::new(
        StudyKind::Donsker,
        &["N", "dt", "price", "abs_error", "iterations", "converged"],
    );
    let mut flagged = !ref_report.converged;
    let mut ns = Vec::new();
    let mut prices = Vec::new();
    for &n in &fx.steps {
        let (p, rep) = price_at(n)?;
        flagged |= !rep.converged;
        let dt = fx.horizon / n as f64;
        out.push(vec![
            n.into(),
            dt.into(),
            p.into(),
            (p - p_ref).abs().into(),
            rep.iters.into(),
            (rep.converged as usize).into(),
        ]);
        ns.push(n as f64);
        prices.push(p);
    }
    out.push(vec![
        fx.reference_steps.into(),
        (fx.horizon / fx.reference_steps as f64).into(),
        p_ref.into(),
        0.0.into(),
        ref_report.iters.into(),
        (ref_report.converged as usize).into(),
    ]);
    if flagged {
        out.flags.push("not_converged".into());
    }
    let errs: Vec<f64> = prices.iter().map(|p| (p - p_ref).abs()).collect();
    if errs.iter().all(|e| *e > 0.0) {
        let lx: Vec<f64> = ns.iter().map(|n| n.ln()).collect();
        let ly: Vec<f64> = errs.iter().map(|e| e.ln()).collect();
        if let Some((slope, icpt)) = fit_line(&lx, &ly) {
            out.fitted_slope = Some(slope);
            out.extras.insert("loglog_intercept".into(), icpt);
        }
        // Least squares through the origin for err = C g(dt).
        let g: Vec<f64> = ns
            .iter()
            .map(|n| {
                let dt = fx.horizon / n;
                dt.sqrt() * (1.0 / dt).ln()
            })
            .collect();
        let c = g.iter().zip(&errs).map(|(a, b)| a * b).sum::<f64>() / g.iter().map(|a| a * a).sum::<f64>();
        out.fitted_constant = Some(c);
    } else {
        out.flags.push("zero_error".into());
    }
    let mut all_n = ns.clone();
    all_n.push(fx.reference_steps as f64);
    let mut all_p = prices.clone();
    all_p.push(p_ref);
    if let Some((a, p_inf, b)) = fit_power_limit(&all_n, &all_p) {
        out.extras.insert("extrapolated_exponent".into(), a);
        out.extras.insert("extrapolated_limit".into(), p_inf);
        out.extras.insert("extrapolated_scale".into(), b);
    }
    out.extras.insert("reference_price".into(), p_ref);
    out.timings = timings;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EpsilonFixture {
    pub points: usize,
    pub lo: f64,
    pub hi: f64,
    pub vol: f64,
    /// Maturities in days; time 0 carries a point mass at the spot.
    pub maturity_days: Vec<f64>,
    pub strike: f64,
    pub epsilons: Vec<f64>,
    pub tol: f64,
    pub max_iters: usize,
    /// Paths of the Monte Carlo model price.
    pub model_paths: usize,
    pub seed: u64,
}

impl Default for EpsilonFixture {
    fn default() -> Self {
        Self {
            points: 60,
            lo: 0.55,
            hi: 1.65,
            vol: 0.2,
            maturity_days: vec![30.0, 60.0, 90.0, 120.0, 150.0],
            strike: 1.0,
            epsilons: vec![0.01, 0.1, 0.5],
            tol: 1e-6,
            max_iters: 20_000,
            model_paths: 1_000_000,
            seed: 42,
        }
    }
}

/// Asian call bounds on GBM marginals for each epsilon. The error column is
/// the distance of the mid of the two bounds to the Monte Carlo price of the
/// generating model; iterations are those of the lower-bound solve.
pub fn study_epsilon(fx: &EpsilonFixture) -> Result<StudyReport> {
    if fx.maturity_days.is_empty() || fx.epsilons.is_empty() {
        return Err(Error::InvalidInput("need maturities and epsilons".into()));
    }
    let grid = Arc::new(Grid::uniform(fx.lo, fx.hi, fx.points)?);
    let mut times = vec![0.0];
    times.extend(fx.maturity_days.iter().map(|d| d / 365.0));
    let horizon = *times.last().unwrap_or(&1.0);
    let params = ModelParams {
        vol: fx.vol,
        horizon,
        seed: fx.seed,
        ..Default::default()
    };
    let later = generate(&params, &times[1..], grid.clone())?;
    let mut marginals = vec![Marginal::point_mass(grid.clone(), params.spot)?];
    marginals.extend(later.marginals().iter().cloned());
    let seq = MarginalSequence::new(times.clone(), marginals)?;

    let mc = ModelParams {
        paths: fx.model_paths,
        ..params.clone()
    };
    let paths = simulate_paths(&mc, &times)?;
    let n = times.len() - 1;
    let count = paths[0].len();
    let model = (0..count)
        .map(|k| {
            let avg = (1..=n).map(|t| paths[t][k]).sum::<f64>() / n as f64;
            (avg - fx.strike).max(0.0)
        })
        .sum::<f64>()
        / count as f64;

    let q = build_reference(grid.clone(), &times, fx.vol, DEFAULT_FLOOR)?;
    let payoff = PayoffSpec::asian_call(fx.strike);
    let mut out = StudyReport::new(
        StudyKind::Epsilon,
        &["epsilon", "iterations", "upper_iterations", "lower", "upper", "mid", "price_error_pct"],
    );
    for &eps in &fx.epsilons {
        let cfg = SolverConfig {
            epsilon: eps,
            tol: fx.tol,
            max_iters: fx.max_iters,
            record_history: false,
            ..Default::default()
        };
        let start = Instant::now();
        let res = price_bounds(&seq, &q, &payoff, &cfg)?;
        out.timings.insert(format!("epsilon={eps}"), start.elapsed().as_secs_f64());
        let b = res.bounds;
        let mid = 0.5 * (b.lower + b.upper);
        out.push(vec![
            eps.into(),
            res.lower.report.iters.into(),
            res.upper.report.iters.into(),
            b.lower.into(),
            b.upper.into(),
            mid.into(),
            (100.0 * (mid - model).abs() / model).into(),
        ]);
    }
    out.extras.insert("model_price".into(), model);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IncrementalFixture {
    pub points: usize,
    pub lo: f64,
    pub hi: f64,
    pub first_time: f64,
    pub period: f64,
    /// Sizes `N` of the extended problems; each appends step `N` to `N - 1`.
    pub appended_steps: Vec<usize>,
    pub epsilon: f64,
    pub tol: f64,
    pub k_warm: usize,
    pub k_refine: usize,
    pub seed: u64,
}

impl Default for IncrementalFixture {
    fn default() -> Self {
        Self {
            points: 100,
            lo: 0.5,
            hi: 1.6,
            first_time: 0.02,
            period: 0.04,
            appended_steps: vec![2, 3, 4, 5, 6],
            epsilon: 0.1,
            tol: 1e-8,
            k_warm: 50,
            k_refine: 20_000,
            seed: 42,
        }
    }
}

fn incremental_case(fx: &IncrementalFixture, n: usize) -> Result<(MarginalSequence, Vec<f64>)> {
    if n < 2 {
        return Err(Error::InvalidInput("appends need at least two steps".into()));
    }
    let grid = Arc::new(Grid::uniform(fx.lo, fx.hi, fx.points)?);
    let times: Vec<f64> = (0..=n).map(|k| fx.first_time + fx.period * k as f64).collect();
    let params = ModelParams {
        horizon: *times.last().unwrap_or(&1.0),
        seed: fx.seed,
        ..Default::default()
    };
    Ok((generate(&params, &times, grid)?, times))
}

/// Cold solve versus append on each fixture: iterations, wall times and the
/// path distance between the two plans.
pub fn study_incremental(fx: &IncrementalFixture) -> Result<StudyReport> {
    let mut out = StudyReport::new(
        StudyKind::Incremental,
        &["N", "cold_iterations", "frozen_iterations", "refine_iterations", "append_iterations", "append_converged", "plan_distance"],
    );
    let cfg = SolverConfig {
        epsilon: fx.epsilon,
        tol: fx.tol,
        record_history: false,
        ..Default::default()
    };
    for &n in &fx.appended_steps {
        let (full, times) = incremental_case(fx, n)?;
        let grid = full.grid().clone();
        let old = full.prefix(n)?;
        let q_old = build_reference(grid.clone(), &times[..n], 0.2, DEFAULT_FLOOR)?;
        let prev = solve(&old, &q_old, &CostSpec::pairwise_abs(&grid, n - 1), &cfg, None)?;
        let q = build_reference(grid.clone(), &times, 0.2, DEFAULT_FLOOR)?;
        let cost = CostSpec::pairwise_abs(&grid, n);
        let start = Instant::now();
        let cold = solve(&full, &q, &cost, &cfg, None)?;
        out.timings.insert(format!("cold N={n}"), start.elapsed().as_secs_f64());
        let icfg = IncrementalConfig {
            k_warm: fx.k_warm,
            k_refine: fx.k_refine,
            solver: cfg.clone(),
        };
        let start = Instant::now();
        let app = append_period(&prev.potentials, &old, full.marginal(n).clone(), times[n], &q, &cost, &icfg)?;
        out.timings.insert(format!("append N={n}"), start.elapsed().as_secs_f64());
        out.push(vec![
            n.into(),
            cold.report.iters.into(),
            app.report.frozen_iters.into(),
            app.report.refine_iters.into(),
            app.report.total_iters().into(),
            (app.report.solve.converged as usize).into(),
            app.plan.path_distance(&cold.plan)?.into(),
        ]);
    }
    Ok(out)
}

/// Wall time of one append at a fixed iteration budget (`k_warm` frozen
/// plus `k_refine` joint iterations, no early stop), summed over the
/// fixture's append cases; the minimum over `repeats` runs is returned
/// together with the number of iterations performed.
pub fn append_budget_seconds(fx: &IncrementalFixture, repeats: usize) -> Result<(f64, usize)> {
    let cfg = SolverConfig {
        epsilon: fx.epsilon,
        tol: fx.tol,
        record_history: false,
        ..Default::default()
    };
    let budget = SolverConfig {
        tol: f64::MIN_POSITIVE,
        ..cfg.clone()
    };
    let icfg = IncrementalConfig {
        k_warm: fx.k_warm,
        k_refine: fx.k_refine,
        solver: budget,
    };
    let mut cases = Vec::new();
    for &n in &fx.appended_steps {
        let (full, times) = incremental_case(fx, n)?;
        let grid = full.grid().clone();
        let old = full.prefix(n)?;
        let q_old = build_reference(grid.clone(), &times[..n], 0.2, DEFAULT_FLOOR)?;
        let prev = solve(&old, &q_old, &CostSpec::pairwise_abs(&grid, n - 1), &cfg, None)?;
        let q = build_reference(grid.clone(), &times, 0.2, DEFAULT_FLOOR)?;
        cases.push((full, times, old, prev, q, n));
    }
    let mut best = f64::INFINITY;
    let mut iters = 0;
    for _ in 0..repeats.max(1) {
        let mut total = 0.0;
        iters = 0;
        for (full, times, old, prev, q, n) in &cases {
            let cost = CostSpec::pairwise_abs(full.grid(), *n);
            let start = Instant::now();
            let app = append_period(&prev.potentials, old, full.marginal(*n).clone(), times[*n], q, &cost, &icfg)?;
            total += start.elapsed().as_secs_f64();
            iters += app.report.total_iters();
        }
        best = best.min(total);
    }
    Ok((best, iters))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SparseFixture {
    pub points: usize,
    pub lo: f64,
    pub hi: f64,
    pub steps: usize,
    pub horizon: f64,
    pub epsilon: f64,
    pub tol: f64,
    /// Largest sparse grid, as a fraction of the uniform one.
    pub budget_fraction: f64,
    pub max_depth: usize,
    pub seed: u64,
}

impl Default for SparseFixture {
    fn default() -> Self {
        Self {
            points: 200,
            lo: 0.2,
            hi: 3.0,
            steps: 4,
            horizon: 0.1,
            epsilon: 0.1,
            tol: 1e-8,
            budget_fraction: 0.25,
            max_depth: 12,
            seed: 42,
        }
    }
}

/// Split thresholds tried, coarse to fine: `1e-2 * 2^(-k/2)`.
fn threshold_ladder() -> impl Iterator<Item = f64> {
    (0..40).map(|k| 1e-2 * 2f64.powf(-0.5 * k as f64))
}

/// Lower bound of `sum_t E|X_t - X_{t-1}|` on a wide uniform grid and on the
/// finest sparse grid within the point budget (marginals moved over with the
/// hat kernel).
pub fn study_sparse(fx: &SparseFixture) -> Result<StudyReport> {
    let grid = Arc::new(Grid::uniform(fx.lo, fx.hi, fx.points)?);
    let times: Vec<f64> = (0..=fx.steps)
        .map(|k| fx.horizon * (0.1 + 0.9 * k as f64 / fx.steps as f64))
        .collect();
    let params = ModelParams {
        horizon: fx.horizon,
        seed: fx.seed,
        ..Default::default()
    };
    let seq = generate(&params, &times, grid.clone())?;
    let budget = (fx.budget_fraction * fx.points as f64).floor() as usize;
    let mut chosen: Option<(f64, Grid)> = None;
    for tau in threshold_ladder() {
        let g = match make_sparse(&seq, &SparseGridConfig::new(tau, fx.max_depth)?) {
            Ok(g) => g,
            Err(Error::EmptyGrid { .. }) => continue,
            Err(e) => return Err(e),
        };
        if g.len() > budget {
            break;
        }
        chosen = Some((tau, g));
    }
    let (tau, sparse) = chosen.ok_or_else(|| Error::InvalidInput("no sparse grid fits the point budget".into()))?;
    let sparse = Arc::new(sparse);
    let sparse_seq = seq.transfer_to(sparse.clone())?;
    let cfg = SolverConfig {
        epsilon: fx.epsilon,
        tol: fx.tol,
        record_history: false,
        ..Default::default()
    };
    let mut out = StudyReport::new(StudyKind::Sparse, &["grid", "points", "lower_bound", "iterations"]);
    let mut values = Vec::new();
    for (name, s, g) in [("uniform", &seq, &grid), ("sparse", &sparse_seq, &sparse)] {
        let q = build_reference(g.clone(), &times, 0.2, DEFAULT_FLOOR)?;
        let cost = CostSpec::pairwise_abs(g, fx.steps);
        let start = Instant::now();
        let sol = solve(s, &q, &cost, &cfg, None)?;
        out.timings.insert(name.into(), start.elapsed().as_secs_f64());
        let v = sol.plan.expected_cost();
        values.push(v);
        out.push(vec![name.into(), g.len().into(), v.into(), sol.report.iters.into()]);
    }
    out.extras.insert("threshold".into(), tau);
    out.extras.insert("relative_difference".into(), (values[1] - values[0]).abs() / values[0].abs());
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RuntimeFixture {
    /// `(N, M)` rows.
    pub sizes: Vec<(usize, usize)>,
    pub epsilon: f64,
    pub tol: f64,
    /// Rows whose projected time exceeds this many seconds are skipped.
    pub budget_seconds: f64,
    pub seed: u64,
}

impl Default for RuntimeFixture {
    fn default() -> Self {
        Self {
            sizes: vec![(10, 100), (20, 500), (50, 1000)],
            epsilon: 0.1,
            tol: 1e-8,
            budget_seconds: 600.0,
            seed: 42,
        }
    }
}

/// Basic solve times for each `(N, M)` row. The cost of a row is projected
/// from the previous measured row as `seconds * (N M^2)/(N' M'^2) * (N/N')^2`
/// (work per iteration times the observed growth of iteration counts with
/// `N`); rows projected over budget are reported as `skipped`.
pub fn study_runtime(fx: &RuntimeFixture) -> Result<StudyReport> {
    let mut out = StudyReport::new(StudyKind::Runtime, &["N", "M", "status", "seconds", "iterations"]);
    let mut last: Option<(usize, usize, f64)> = None;
    for &(n, m) in &fx.sizes {
        if let Some((n0, m0, s0)) = last {
            let work = (n as f64 * (m * m) as f64) / (n0 as f64 * (m0 * m0) as f64);
            let iters = (n as f64 / n0 as f64).powi(2);
            let projected = s0 * work * iters;
            if projected > fx.budget_seconds {
                out.push(vec![n.into(), m.into(), "skipped".into(), projected.into(), f64::NAN.into()]);
                continue;
            }
        }
        let fixture = ConvergenceFixture {
            steps: n,
            points: m,
            epsilon: fx.epsilon,
            tol: fx.tol,
            seed: fx.seed,
            ..Default::default()
        };
        let grid = Arc::new(Grid::uniform(fixture.lo, fixture.hi, m)?);
        let times = uniform_times(fixture.horizon, n);
        let params = ModelParams {
            horizon: fixture.horizon,
            seed: fx.seed,
            ..Default::default()
        };
        let seq = generate(&params, &times, grid.clone())?;
        let q = build_reference(grid.clone(), &times, 0.2, DEFAULT_FLOOR)?;
        let cfg = SolverConfig {
            epsilon: fx.epsilon,
            tol: fx.tol,
            record_history: false,
            ..Default::default()
        };
        let start = Instant::now();
        let sol = allow_unconverged(solve(&seq, &q, &CostSpec::pairwise_abs(&grid, n), &cfg, None))?;
        let secs = start.elapsed().as_secs_f64();
        out.push(vec![n.into(), m.into(), "ran".into(), secs.into(), sol.report.iters.into()]);
        out.timings.insert(format!("N={n} M={m}"), secs);
        last = Some((n, m, secs));
    }
    out.flags.push("wall_clock_rows".into());
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn line_fit_recovers_exact_line() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let y: Vec<f64> = x.iter().map(|v| 0.5 - 2.0 * v).collect();
        let (s, c) = fit_line(&x, &y).unwrap();
        assert!((s + 2.0).abs() < 1e-14 && (c - 0.5).abs() < 1e-14);
        assert!(fit_line(&[1.0], &[2.0]).is_none());
        assert!(fit_line(&[1.0, 1.0], &[2.0, 3.0]).is_none());
    }

    #[test]
    fn tail_slope_of_geometric_sequence() {
        let e: Vec<f64> = (0..90).map(|k| 3.0 * 0.9f64.powi(k)).collect();
        let (s, _) = tail_slope(&e).unwrap();
        assert!((s - 0.9f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn single_iteration_fit_is_flagged_insufficient() {
        let report = SolveReport {
            iters: 1,
            converged: true,
            per_iter_error: vec![0.0],
            per_iter_change: vec![0.0],
            per_iter_dual: vec![0.0],
            ..Default::default()
        };
        let out = convergence_report(&report, 0.5, 1.0, 1.0);
        assert!(out.fitted_slope.is_none());
        assert_eq!(out.flags, vec!["insufficient".to_string()]);
        assert_eq!(out.rows.len(), 1);
    }

    #[test]
    fn candidates_follow_kappa() {
        let out = convergence_report(&SolveReport::default(), 0.5, 1.0, 0.69);
        let kappa = 0.5 / 1.19;
        assert!((out.extras["kappa"] - kappa).abs() < 1e-15);
        assert!((out.extras["candidate_(1-kappa)^(2/3)"] - (1.0 - kappa).powf(2.0 / 3.0)).abs() < 1e-15);
        assert!((out.extras["candidate_(1-kappa^2)^(1/3)"] - (1.0 - kappa * kappa).powf(1.0 / 3.0)).abs() < 1e-15);
    }

    #[test]
    fn power_fit_recovers_planted_rate() {
        let ns = [5.0, 10.0, 20.0, 50.0, 100.0, 200.0];
        let p: Vec<f64> = ns.iter().map(|n: &f64| 0.07 - 0.04 * n.powf(-0.45)).collect();
        let (a, p_inf, b) = fit_power_limit(&ns, &p).unwrap();
        assert!((a - 0.45).abs() < 1e-6, "{a}");
        assert!((p_inf - 0.07).abs() < 1e-8 && (b - 0.04).abs() < 1e-7);
    }

    #[test]
    fn convergence_slope_is_reproducible_across_seeds() {
        let slope = |seed| {
            let fx = ConvergenceFixture {
                steps: 3,
                points: 40,
                seed,
                ..Default::default()
            };
            study_convergence(&fx).unwrap().fitted_slope.unwrap()
        };
        let (a, b) = (slope(1), slope(2));
        assert!((a - b).abs() <= 0.01, "{a} vs {b}");
        assert!(a < 0.0);
    }

    #[test]
    fn csv_is_plain_and_stable() {
        let mut r = StudyReport::new(StudyKind::Runtime, &["N", "status"]);
        r.push(vec![10usize.into(), "ran".into()]);
        r.push(vec![0.25.into(), "skipped".into()]);
        assert_eq!(r.to_csv(), "N,status\n10,ran\n0.25,skipped\n");
        assert_eq!(r.values("N"), vec![10.0, 0.25]);
        assert!(r.gnuplot_script("x.csv").contains("x.csv"));
    }

    #[test]
    fn donsker_rejects_refinements_off_the_dates() {
        let fx = DonskerFixture {
            steps: vec![7],
            ..Default::default()
        };
        assert!(matches!(study_donsker(&fx), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn small_donsker_errors_shrink_with_refinement() {
        let fx = DonskerFixture {
            points: 40,
            dates: 2,
            steps: vec![2, 4, 8],
            reference_steps: 32,
            ..Default::default()
        };
        let out = study_donsker(&fx).unwrap();
        let err = out.values("abs_error");
        assert!(err[0] > err[1] && err[1] > err[2], "{err:?}");
        assert!(out.fitted_slope.unwrap() < 0.0);
        assert!(out.fitted_constant.unwrap() > 0.0);
    }
}
