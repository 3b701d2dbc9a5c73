use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use mmot::grid::Grid;
use mmot::hedging::{simulate_hedge, DeltaRule, HedgePolicy};
use mmot::incremental::{append_period, IncrementalConfig};
use mmot::io::{read_json, read_marginals, read_quotes, write_json, write_marginals, SolutionFile};
use mmot::marginals::{calibrate, generate, CalibrationConfig, MarginalSequence, Model, ModelParams};
use mmot::oracle::{lp_bounds, TinyInstance};
use mmot::pricing::{calibration_delta, price_bounds, transaction_gamma, PayoffSpec, TransactionCostSpec};
use mmot::reference::{build_reference, ReferenceChain, DEFAULT_FLOOR, DEFAULT_REF_VOL};
use mmot::solver::{solve, CostSpec, Solution, SolverConfig};
use mmot::study::{
    study_convergence, study_donsker, study_epsilon, study_incremental, study_runtime, study_sparse,
    ConvergenceFixture, DonskerFixture, EpsilonFixture, IncrementalFixture, RuntimeFixture, SparseFixture,
    StudyReport,
};
use mmot::{Error, Result};

const DEFAULT_SEED: u64 = 42;

/// Entropic multi-period martingale optimal transport.
#[derive(Parser)]
#[command(name = "mmot", version)]
struct Cli {
    /// Seed for every random draw [default: 42, or the fixture's own seed].
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true, env = "MMOT_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate model marginals on a uniform grid.
    Gen(GenArgs),
    /// Calibrate marginals from call quotes.
    Calibrate(CalibrateArgs),
    /// Solve the entropic problem for a pairwise cost.
    Solve(SolveArgs),
    /// Append one maturity to a solved problem.
    Append(AppendArgs),
    /// Lower and upper bounds of a path payoff, with widening.
    Price(PriceArgs),
    /// Simulate delta hedging under the lower-bound plan.
    Hedge(HedgeArgs),
    /// Run a numerical study and write its rows as CSV.
    Study(StudyArgs),
    /// Exact LP bounds of a tiny instance (debugging aid).
    #[command(hide = true)]
    Oracle(OracleArgs),
}

#[derive(Args)]
struct GridArgs {
    #[arg(long, default_value_t = 0.6)]
    lo: f64,
    #[arg(long, default_value_t = 1.5)]
    hi: f64,
    #[arg(long, default_value_t = 100)]
    points: usize,
}

impl GridArgs {
    fn grid(&self) -> Result<Arc<Grid>> {
        Ok(Arc::new(Grid::uniform(self.lo, self.hi, self.points)?))
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelArg {
    Gbm,
    Merton,
    Heston,
}

#[derive(Args)]
struct GenArgs {
    #[command(flatten)]
    grid: GridArgs,
    /// Comma-separated observation times.
    #[arg(long, value_delimiter = ',', required = true)]
    times: Vec<f64>,
    #[arg(long, value_enum, default_value_t = ModelArg::Gbm)]
    model: ModelArg,
    #[arg(long, default_value_t = 1.0)]
    spot: f64,
    #[arg(long, default_value_t = 0.2)]
    vol: f64,
    #[arg(long, default_value_t = 10_000)]
    paths: usize,
    /// JSON file overriding any model parameter.
    #[arg(long)]
    params: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CalibrateArgs {
    #[arg(long)]
    quotes: PathBuf,
    #[command(flatten)]
    grid: GridArgs,
    #[arg(long, default_value_t = 1e-4)]
    tv_weight: f64,
    #[arg(long, default_value_t = 1.0)]
    forward: f64,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SolverArgs {
    #[arg(long, default_value_t = 0.1)]
    epsilon: f64,
    #[arg(long, default_value_t = 1e-10)]
    tol: f64,
    #[arg(long, default_value_t = 20_000)]
    max_iters: usize,
    /// Volatility of the Gaussian reference kernel.
    #[arg(long, default_value_t = DEFAULT_REF_VOL)]
    ref_vol: f64,
    /// Probability floor of the reference rows.
    #[arg(long, default_value_t = DEFAULT_FLOOR)]
    floor: f64,
}

impl SolverArgs {
    fn config(&self) -> SolverConfig {
        SolverConfig {
            epsilon: self.epsilon,
            tol: self.tol,
            max_iters: self.max_iters,
            record_history: false,
            ..Default::default()
        }
    }

    fn reference(&self, seq: &MarginalSequence) -> Result<ReferenceChain> {
        build_reference(seq.grid().clone(), seq.times(), self.ref_vol, self.floor)
    }
}

#[derive(Args)]
struct SolveArgs {
    #[arg(long)]
    marginals: PathBuf,
    /// Pairwise cost: `abs`, `square` or `forward-start:K`.
    #[arg(long, default_value = "abs")]
    cost: String,
    #[command(flatten)]
    solver: SolverArgs,
    /// Start from the potentials of an earlier solution file.
    #[arg(long)]
    warm: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AppendArgs {
    /// Solution of the first N marginals.
    #[arg(long)]
    prev: PathBuf,
    /// Marginal file with N + 1 marginals; the last one is appended.
    #[arg(long)]
    marginals: PathBuf,
    #[arg(long, default_value = "abs")]
    cost: String,
    #[command(flatten)]
    solver: SolverArgs,
    #[arg(long, default_value_t = 50)]
    k_warm: usize,
    #[arg(long, default_value_t = 20_000)]
    k_refine: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PriceArgs {
    #[arg(long)]
    marginals: PathBuf,
    /// `asian:K`, `forward-start:K`, `vanilla:K:t`, `spread` or `lookback:K`.
    #[arg(long)]
    payoff: String,
    #[command(flatten)]
    solver: SolverArgs,
    /// Proportional transaction cost per step.
    #[arg(long, default_value_t = 0.0)]
    tc_rate: f64,
    /// Per-maturity calibration radii; enables the calibration widening.
    #[arg(long, value_delimiter = ',')]
    deltas: Vec<f64>,
}

#[derive(Args)]
struct HedgeArgs {
    #[arg(long)]
    marginals: PathBuf,
    #[arg(long)]
    payoff: String,
    #[command(flatten)]
    solver: SolverArgs,
    #[arg(long, default_value_t = 10_000)]
    paths: usize,
    /// Constant of the error bound proxy.
    #[arg(long, default_value_t = 1.0)]
    constant: f64,
    #[arg(long, value_enum, default_value_t = RuleArg::Regression)]
    rule: RuleArg,
    /// CSV of terminal errors per path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum RuleArg {
    Regression,
    FiniteDifference,
}

#[derive(Clone, Copy, ValueEnum)]
enum StudyArg {
    Convergence,
    Donsker,
    Epsilon,
    Incremental,
    Sparse,
    Runtime,
}

#[derive(Args)]
struct StudyArgs {
    #[arg(value_enum)]
    kind: StudyArg,
    /// JSON fixture overriding the study defaults.
    #[arg(long)]
    fixture: Option<PathBuf>,
    /// CSV output of the study rows.
    #[arg(long)]
    out: PathBuf,
    /// Also write a gnuplot script drawing the CSV.
    #[arg(long)]
    gnuplot: Option<PathBuf>,
}

#[derive(Args)]
struct OracleArgs {
    /// Marginal file with at most 8 points and 3 steps.
    #[arg(long)]
    marginals: PathBuf,
    #[arg(long, default_value = "abs")]
    cost: String,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            return fail(&Error::InvalidInput(format!("thread pool: {e}")));
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(&e),
    }
}

fn fail(e: &Error) -> ExitCode {
    let (kind, code) = if e.is_validation() { ("validation", 2) } else { ("numerical", 3) };
    let line = json!({"error": kind, "message": e.to_string()});
    eprintln!("{line}");
    ExitCode::from(code)
}

fn print_json(v: &serde_json::Value) -> Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, v)?;
    writeln!(out)?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let seed = cli.seed;
    match cli.cmd {
        Command::Gen(a) => cmd_gen(a, seed.unwrap_or(DEFAULT_SEED)),
        Command::Calibrate(a) => cmd_calibrate(a),
        Command::Solve(a) => cmd_solve(a),
        Command::Append(a) => cmd_append(a),
        Command::Price(a) => cmd_price(a),
        Command::Hedge(a) => cmd_hedge(a, seed.unwrap_or(DEFAULT_SEED)),
        Command::Study(a) => cmd_study(a, seed),
        Command::Oracle(a) => cmd_oracle(a),
    }
}

fn cmd_gen(a: GenArgs, seed: u64) -> Result<()> {
    let mut params = match &a.params {
        Some(p) => read_json::<ModelParams>(p)?,
        None => ModelParams::default(),
    };
    if a.params.is_none() {
        params.model = match a.model {
            ModelArg::Gbm => Model::Gbm,
            ModelArg::Merton => Model::Merton,
            ModelArg::Heston => Model::Heston,
        };
        params.spot = a.spot;
        params.vol = a.vol;
        params.paths = a.paths;
    }
    params.seed = seed;
    if let Some(&last) = a.times.last() {
        params.horizon = params.horizon.max(last);
    }
    for w in params.warnings() {
        eprintln!("{}", json!({"warning": w}));
    }
    let seq = generate(&params, &a.times, a.grid.grid()?)?;
    write_marginals(&a.out, &seq)?;
    print_json(&json!({"times": seq.times(), "means": seq.marginals().iter().map(|m| m.mean()).collect::<Vec<_>>()}))
}

fn cmd_calibrate(a: CalibrateArgs) -> Result<()> {
    let quotes = read_quotes(&a.quotes)?;
    let cfg = CalibrationConfig {
        tv_weight: a.tv_weight,
        forward: a.forward,
        alpha: a.alpha,
        ..Default::default()
    };
    let res = calibrate(&quotes, a.grid.grid()?, &cfg)?;
    write_marginals(&a.out, &res.marginals)?;
    print_json(&json!({
        "times": res.marginals.times(),
        "deltas": res.deltas,
        "iters": res.iters,
        "max_abs_error": res.max_abs_error,
    }))
}

fn parse_cost(spec: &str, grid: &Grid, steps: usize) -> Result<CostSpec> {
    let parts: Vec<&str> = spec.split(':').collect();
    match parts.as_slice() {
        ["abs"] => Ok(CostSpec::pairwise_abs(grid, steps)),
        ["square"] => Ok(CostSpec::pairwise_square(grid, steps)),
        ["forward-start", k] => Ok(CostSpec::forward_start_call(grid, steps, parse_num(k)?)),
        _ => Err(Error::InvalidInput(format!("unknown cost '{spec}'"))),
    }
}

fn parse_num(s: &str) -> Result<f64> {
    s.parse().map_err(|_| Error::InvalidInput(format!("not a number: '{s}'")))
}

fn parse_payoff(spec: &str) -> Result<PayoffSpec> {
    let parts: Vec<&str> = spec.split(':').collect();
    match parts.as_slice() {
        ["asian", k] => Ok(PayoffSpec::asian_call(parse_num(k)?)),
        ["forward-start", k] => Ok(PayoffSpec::forward_start(parse_num(k)?)),
        ["vanilla", k, t] => {
            let t = t
                .parse()
                .map_err(|_| Error::InvalidInput(format!("bad time index '{t}'")))?;
            Ok(PayoffSpec::vanilla_call(parse_num(k)?, t))
        }
        ["spread"] => Ok(PayoffSpec::spread_abs()),
        ["lookback", k] => Ok(PayoffSpec::lookback_call(parse_num(k)?)),
        _ => Err(Error::InvalidInput(format!("unknown payoff '{spec}'"))),
    }
}

/// A solve that ran out of iterations is still written out, then reported as
/// a numerical failure.
fn finish_solve(r: Result<Solution>, out: &Path) -> Result<()> {
    match r {
        Ok(sol) => {
            write_json(out, &SolutionFile::from_solution(&sol))?;
            print_json(&solve_summary(&sol))
        }
        Err(Error::MaxItersExceeded(sol)) => {
            write_json(out, &SolutionFile::from_solution(&sol))?;
            Err(Error::MaxItersExceeded(sol))
        }
        Err(e) => Err(e),
    }
}

fn solve_summary(sol: &Solution) -> serde_json::Value {
    let r = &sol.report;
    json!({
        "iters": r.iters,
        "converged": r.converged,
        "max_drift": r.max_drift,
        "marginal_defect": r.marginal_defect,
        "duality_gap": r.duality_gap,
        "expected_cost": r.expected_cost,
        "wall_seconds": r.wall_seconds,
    })
}

fn cmd_solve(a: SolveArgs) -> Result<()> {
    let seq = read_marginals(&a.marginals)?;
    let q = a.solver.reference(&seq)?;
    let cost = parse_cost(&a.cost, seq.grid(), seq.steps())?;
    let warm = match &a.warm {
        Some(p) => {
            let f: SolutionFile = read_json(p)?;
            f.check_grid(seq.grid())?;
            Some(f.potentials())
        }
        None => None,
    };
    let r = solve(&seq, &q, &cost, &a.solver.config(), warm.as_ref());
    finish_solve(r, &a.out)
}

fn cmd_append(a: AppendArgs) -> Result<()> {
    let full = read_marginals(&a.marginals)?;
    let n = full.steps();
    if n < 2 {
        return Err(Error::InvalidInput("append needs at least three marginals".into()));
    }
    let prev: SolutionFile = read_json(&a.prev)?;
    prev.check_grid(full.grid())?;
    let old = full.prefix(n)?;
    let q = a.solver.reference(&full)?;
    let cost = parse_cost(&a.cost, full.grid(), n)?;
    let cfg = IncrementalConfig {
        k_warm: a.k_warm,
        k_refine: a.k_refine,
        solver: a.solver.config(),
    };
    let out = append_period(
        &prev.potentials(),
        &old,
        full.marginal(n).clone(),
        full.times()[n],
        &q,
        &cost,
        &cfg,
    )?;
    let file = SolutionFile {
        u: out.potentials.u.clone(),
        h: out.potentials.h.clone(),
        epsilon: cfg.solver.epsilon,
        grid: full.grid().points().to_vec(),
        report: out.report.solve.clone(),
    };
    write_json(&a.out, &file)?;
    print_json(&json!({
        "frozen_iters": out.report.frozen_iters,
        "refine_iters": out.report.refine_iters,
        "converged": out.report.solve.converged,
        "max_drift": out.report.solve.max_drift,
        "marginal_defect": out.report.solve.marginal_defect,
        "frozen_seconds": out.report.frozen_seconds,
        "refine_seconds": out.report.refine_seconds,
    }))
}

fn cmd_price(a: PriceArgs) -> Result<()> {
    let seq = read_marginals(&a.marginals)?;
    let q = a.solver.reference(&seq)?;
    let payoff = parse_payoff(&a.payoff)?;
    let cfg = a.solver.config();
    let out = price_bounds(&seq, &q, &payoff, &cfg)?;
    let mut bounds = out.bounds;
    if a.tc_rate != 0.0 {
        let tc = TransactionCostSpec {
            rates: vec![a.tc_rate; seq.steps()],
        };
        // The wider of the two plans' turnover.
        let g = transaction_gamma(&out.lower.plan, &tc)?.max(transaction_gamma(&out.upper.plan, &tc)?);
        bounds = bounds.with_gamma(g);
    }
    if !a.deltas.is_empty() {
        let d = calibration_delta(&a.deltas, payoff.lipschitz, payoff.lipschitz, cfg.epsilon, seq.grid().diameter())?;
        bounds = bounds.with_delta(d);
    }
    print_json(&serde_json::to_value(bounds)?)
}

fn cmd_hedge(a: HedgeArgs, seed: u64) -> Result<()> {
    let seq = read_marginals(&a.marginals)?;
    let q = a.solver.reference(&seq)?;
    let payoff = parse_payoff(&a.payoff)?;
    let out = price_bounds(&seq, &q, &payoff, &a.solver.config())?;
    let rule = match a.rule {
        RuleArg::Regression => DeltaRule::Regression,
        RuleArg::FiniteDifference => DeltaRule::FiniteDifference,
    };
    let plan = &out.lower.plan;
    let policy = HedgePolicy::from_costs(plan, 1.0, rule)?;
    let times = seq.times();
    let dt = (times[times.len() - 1] - times[0]) / seq.steps() as f64;
    let rep = simulate_hedge(plan, &policy, a.paths, seed, dt, a.constant)?;
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(&a.out)?;
    w.write_record(["path_id", "terminal_error"])?;
    for (i, e) in rep.terminal_errors.iter().enumerate() {
        w.write_record([i.to_string(), e.to_string()])?;
    }
    w.flush()?;
    print_json(&serde_json::to_value(&rep)?)
}

fn fixture<T: Default + for<'de> serde::Deserialize<'de>>(path: &Option<PathBuf>) -> Result<T> {
    match path {
        Some(p) => read_json(p),
        None => Ok(T::default()),
    }
}

fn cmd_study(a: StudyArgs, seed: Option<u64>) -> Result<()> {
    macro_rules! with_seed {
        ($ty:ty) => {{
            let mut fx: $ty = fixture(&a.fixture)?;
            if let Some(s) = seed {
                fx.seed = s;
            }
            fx
        }};
    }
    let report: StudyReport = match a.kind {
        StudyArg::Convergence => study_convergence(&with_seed!(ConvergenceFixture))?,
        StudyArg::Donsker => study_donsker(&with_seed!(DonskerFixture))?,
        StudyArg::Epsilon => study_epsilon(&with_seed!(EpsilonFixture))?,
        StudyArg::Incremental => study_incremental(&with_seed!(IncrementalFixture))?,
        StudyArg::Sparse => study_sparse(&with_seed!(SparseFixture))?,
        StudyArg::Runtime => study_runtime(&with_seed!(RuntimeFixture))?,
    };
    fs::write(&a.out, report.to_csv())?;
    if let Some(g) = &a.gnuplot {
        fs::write(g, report.gnuplot_script(&a.out.to_string_lossy()))?;
    }
    print_json(&json!({
        "kind": report.kind,
        "fitted_slope": report.fitted_slope,
        "fitted_constant": report.fitted_constant,
        "extras": report.extras,
        "flags": report.flags,
        "timings": report.timings,
    }))
}

fn cmd_oracle(a: OracleArgs) -> Result<()> {
    let seq = read_marginals(&a.marginals)?;
    let grid = seq.grid().points().to_vec();
    let marginals = seq.marginals().iter().map(|m| m.weights().to_vec()).collect();
    let inst = match a.cost.as_str() {
        "abs" => TinyInstance::pairwise(grid, marginals, |_, x, y| (y - x).abs())?,
        "square" => TinyInstance::pairwise(grid, marginals, |_, x, y| (y - x).powi(2))?,
        other => return Err(Error::InvalidInput(format!("oracle cost must be abs or square, got '{other}'"))),
    };
    let b = lp_bounds(&inst)?;
    print_json(&json!({"min": b.min_value, "max": b.max_value, "pivots": b.pivots}))
}
