//! Command-line front end: scenario files in, JSON reports out.
//!
//! Reports go to stdout, a one-line summary to stderr. Exit codes:
//! 0 success or arbitrage-free, 1 internal failure, 2 unreadable input,
//! 3 arbitrage-prone, 4 solver diverged, 5 verification failed.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::arbitrage::{detect, ArbitrageCertificate, CycleHop, DetectOptions, DEFAULT_TOLERANCE};
use crate::decimal::to_significant;
use crate::model::{Basket, Configuration, Mode, TokenId};
use crate::planner::{plan, simulate, ExecutionPlan};
use crate::scenario::{parse_plan, parse_scenario, to_json, write_plan, write_scenario, Scenario, VERSION};
use crate::scenario_gen::{generate, GenSpec};
use crate::solver::{
    solve, verify_state, CheckResult, OracleHandling, RebalanceMode, RebalanceProblem,
    RebalanceSolution, SolverError, SolverOptions,
};
use crate::trade_only::{solve_trade_only, TradeOnlyOptions};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_PRONE: i32 = 3;
pub const EXIT_DIVERGED: i32 = 4;
pub const EXIT_UNVERIFIED: i32 = 5;

/// Significant digits of numbers in reports.
const DIGITS: usize = 12;
/// Absolute conservation tolerance used when verifying a plan.
const VERIFY_TOL: f64 = 1e-9;

#[derive(Parser, Debug)]
#[command(name = "rebalancer", version, about = "Arbitrage detection and liquidity rebalancing for CFMM networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Classify a scenario as arbitrage-free or arbitrage-prone.
    Detect {
        scenario: PathBuf,
        #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
        tol: f64,
        /// Discount marginal rates by each CFMM's fee.
        #[arg(long)]
        fee_aware: bool,
    },
    /// Solve for the optimal rebalancing and print it with its plan.
    Rebalance {
        scenario: PathBuf,
        #[command(flatten)]
        solve: SolveArgs,
        /// Also write the execution plan to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Reach an arbitrage-free state with trades and minimal injected slack.
    TradeOnly {
        scenario: PathBuf,
        #[arg(long, default_value_t = 16)]
        starts: usize,
        #[arg(long, default_value_t = 200)]
        max_iter: usize,
    },
    /// Solve and print only the execution plan.
    Plan {
        scenario: PathBuf,
        #[command(flatten)]
        solve: SolveArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Replay a plan against a scenario and check the outcome.
    Verify { scenario: PathBuf, plan: PathBuf },
    /// Generate a random scenario.
    Gen(GenArgs),
}

#[derive(Args, Debug)]
struct SolveArgs {
    /// Rebalance only CFMMs whose mode is active.
    #[arg(long)]
    restricted: bool,
    /// Comma-separated objective weights, one per CFMM.
    #[arg(long, value_delimiter = ',')]
    weights: Option<Vec<f64>>,
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
    #[arg(long, default_value_t = 200)]
    max_iter: usize,
    /// Charge passive CFMMs their fee on inflows.
    #[arg(long)]
    fees: bool,
    /// Let oracle pools go negative instead of backing them with reserves.
    #[arg(long)]
    oracle_negative_pools: bool,
}

#[derive(Args, Debug)]
struct GenArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 5)]
    cfmms: usize,
    #[arg(long, default_value_t = 4)]
    tokens: usize,
    #[arg(long, default_value_t = 0.1)]
    pool_min: f64,
    #[arg(long, default_value_t = 10.0)]
    pool_max: f64,
    #[arg(long, default_value_t = 1.0)]
    active_fraction: f64,
    #[arg(long, default_value_t = 0)]
    oracles: usize,
    #[arg(long, default_value_t = 1.0)]
    fee_min: f64,
    #[arg(long, default_value_t = 1.0)]
    fee_max: f64,
    /// Skip the spanning-tree construction.
    #[arg(long)]
    disconnected: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// A failure carrying its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    fn new(code: i32, message: impl Into<String>) -> Self {
        Failure { code, message: message.into() }
    }
}

struct Output {
    json: String,
    summary: String,
    code: i32,
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the exit code.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = write!(stderr, "{}", e.render());
            return if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
        }
    };
    match execute(cli.command) {
        Ok(out) => {
            let _ = stdout.write_all(out.json.as_bytes());
            let _ = writeln!(stderr, "{}", out.summary);
            out.code
        }
        Err(f) => {
            let _ = writeln!(stderr, "error: {}", f.message);
            f.code
        }
    }
}

fn execute(command: Command) -> Result<Output, Failure> {
    match command {
        Command::Detect { scenario, tol, fee_aware } => cmd_detect(&scenario, tol, fee_aware),
        Command::Rebalance { scenario, solve, out } => cmd_rebalance(&scenario, &solve, out.as_deref()),
        Command::TradeOnly { scenario, starts, max_iter } => cmd_trade_only(&scenario, starts, max_iter),
        Command::Plan { scenario, solve, out } => cmd_plan(&scenario, &solve, out.as_deref()),
        Command::Verify { scenario, plan } => cmd_verify(&scenario, &plan),
        Command::Gen(args) => cmd_gen(&args),
    }
}

fn sig(value: f64) -> String {
    to_significant(value, DIGITS)
}

fn sig_pair(p: [f64; 2]) -> [String; 2] {
    [sig(p[0]), sig(p[1])]
}

fn sig_basket(b: &Basket) -> BTreeMap<TokenId, String> {
    b.iter().map(|(t, v)| (t.clone(), sig(v))).collect()
}

fn read(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path).map_err(|e| Failure::new(EXIT_INPUT, format!("{}: {e}", path.display())))
}

fn write_file(path: &Path, text: &str) -> Result<(), Failure> {
    std::fs::write(path, text).map_err(|e| Failure::new(EXIT_FAILURE, format!("{}: {e}", path.display())))
}

fn load(path: &Path) -> Result<Scenario, Failure> {
    let text = read(path)?;
    let scenario = parse_scenario(&text).map_err(|e| Failure::new(EXIT_INPUT, format!("{}: {e}", path.display())))?;
    log::info!("loaded {} cfmms over {} tokens", scenario.config.len(), scenario.config.tokens().len());
    Ok(scenario)
}

#[derive(Serialize)]
struct DetectReport {
    version: &'static str,
    status: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    valuation: Option<BTreeMap<TokenId, String>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    cycle: Option<Vec<CycleHop>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    log_gain: Option<String>,
}

fn cmd_detect(path: &Path, tol: f64, fee_aware: bool) -> Result<Output, Failure> {
    let scenario = load(path)?;
    let cert = detect(&scenario.config, &DetectOptions { tol, fee_aware })
        .map_err(|e| Failure::new(EXIT_INPUT, e.to_string()))?;
    let (report, summary, code) = match cert {
        ArbitrageCertificate::Free { valuation } => (
            DetectReport {
                version: VERSION,
                status: "free",
                valuation: Some(valuation.iter().map(|(t, v)| (t.clone(), sig(v))).collect()),
                cycle: None,
                log_gain: None,
            },
            "arbitrage-free".to_string(),
            EXIT_OK,
        ),
        ArbitrageCertificate::Prone { cycle, log_gain } => {
            let route: Vec<String> = cycle.iter().map(|h| h.token_in.to_string()).collect();
            let summary = format!("arbitrage-prone: {} (log gain {})", route.join(" -> "), sig(log_gain));
            (
                DetectReport {
                    version: VERSION,
                    status: "prone",
                    valuation: None,
                    cycle: Some(cycle),
                    log_gain: Some(sig(log_gain)),
                },
                summary,
                EXIT_PRONE,
            )
        }
    };
    Ok(Output { json: to_json(&report), summary, code })
}

fn problem_for(scenario: &Scenario, args: &SolveArgs) -> RebalanceProblem {
    let config = scenario.config.clone();
    let mut problem = if args.restricted {
        RebalanceProblem::restricted(config)
    } else {
        RebalanceProblem::full(config)
    };
    if let Some(edges) = &scenario.edges {
        problem = problem.with_edges(edges.clone());
    }
    if let Some(w) = &args.weights {
        problem = problem.with_weights(w.clone());
    }
    problem.with_fees(args.fees)
}

fn solve_and_plan(problem: &RebalanceProblem, args: &SolveArgs) -> Result<(RebalanceSolution, ExecutionPlan), Failure> {
    let opts = SolverOptions {
        tol: args.tol,
        max_iter: args.max_iter,
        oracle_handling: if args.oracle_negative_pools {
            OracleHandling::NegativePools
        } else {
            OracleHandling::SyntheticReserves
        },
        ..SolverOptions::default()
    };
    let solution = solve(problem, &opts).map_err(|e| match e {
        SolverError::SolverDiverged { .. } => Failure::new(EXIT_DIVERGED, e.to_string()),
        SolverError::InvalidProblem(_) => Failure::new(EXIT_INPUT, e.to_string()),
        SolverError::NonPositiveLiquidity { .. } => Failure::new(EXIT_INPUT, e.to_string()),
    })?;
    log::info!("solved in {} iterations, kkt {:e}", solution.iterations, solution.kkt_residual);
    let plan = plan(problem, &solution).map_err(|e| Failure::new(EXIT_FAILURE, format!("planning failed: {e}")))?;
    Ok((solution, plan))
}

#[derive(Serialize)]
struct CfmmReport {
    index: usize,
    tokens: [TokenId; 2],
    mode: Mode,
    pools_before: [String; 2],
    pools_after: [String; 2],
    liquidity_before: String,
    liquidity_after: String,
}

#[derive(Serialize)]
struct RebalanceReport {
    version: &'static str,
    status: crate::solver::SolveStatus,
    mode: &'static str,
    fee_mode: bool,
    objective_before: String,
    objective_after: String,
    improvement: String,
    kkt_residual: String,
    cfmms: Vec<CfmmReport>,
    fee_revenue: BTreeMap<TokenId, String>,
    plan: ExecutionPlan,
}

fn cmd_rebalance(path: &Path, args: &SolveArgs, out: Option<&Path>) -> Result<Output, Failure> {
    let scenario = load(path)?;
    let problem = problem_for(&scenario, args);
    let (solution, plan) = solve_and_plan(&problem, args)?;
    if let Some(out) = out {
        write_file(out, &write_plan(&plan))?;
    }
    let cfmms = problem
        .config
        .cfmms()
        .iter()
        .enumerate()
        .map(|(i, c)| CfmmReport {
            index: i,
            tokens: c.tokens.clone(),
            mode: c.mode,
            pools_before: sig_pair(c.pools),
            pools_after: sig_pair(solution.final_pools[i]),
            liquidity_before: sig(solution.liquidity_before[i]),
            liquidity_after: sig(solution.liquidity_after[i]),
        })
        .collect();
    let report = RebalanceReport {
        version: VERSION,
        status: solution.status,
        mode: match problem.mode {
            RebalanceMode::Full => "full",
            RebalanceMode::Restricted { .. } => "restricted",
        },
        fee_mode: problem.fee_mode,
        objective_before: sig(solution.initial_objective),
        objective_after: sig(solution.objective_value),
        improvement: sig(solution.improvement),
        kkt_residual: sig(solution.kkt_residual),
        cfmms,
        fee_revenue: sig_basket(&solution.fee_revenue),
        plan,
    };
    let summary = format!(
        "improvement {} over {} cfmms, {} plan steps",
        sig(solution.improvement),
        problem.config.len(),
        report.plan.steps.len()
    );
    Ok(Output { json: to_json(&report), summary, code: EXIT_OK })
}

fn cmd_plan(path: &Path, args: &SolveArgs, out: Option<&Path>) -> Result<Output, Failure> {
    let scenario = load(path)?;
    let problem = problem_for(&scenario, args);
    let (_, plan) = solve_and_plan(&problem, args)?;
    let json = write_plan(&plan);
    if let Some(out) = out {
        write_file(out, &json)?;
    }
    let summary = format!("{} steps, borrowing {} tokens", plan.steps.len(), plan.borrow_basket.iter().count());
    Ok(Output { json, summary, code: EXIT_OK })
}

#[derive(Serialize)]
struct TradeOnlyReport {
    version: &'static str,
    objective: String,
    sigma: BTreeMap<TokenId, String>,
    valuation: BTreeMap<TokenId, String>,
    final_pools: Vec<[String; 2]>,
    start: usize,
    iterations: usize,
}

fn cmd_trade_only(path: &Path, starts: usize, max_iter: usize) -> Result<Output, Failure> {
    let scenario = load(path)?;
    let opts = TradeOnlyOptions { starts, max_iter, ..TradeOnlyOptions::default() };
    let s = solve_trade_only(&scenario.config, &opts).map_err(|e| Failure::new(EXIT_INPUT, e.to_string()))?;
    let report = TradeOnlyReport {
        version: VERSION,
        objective: sig(s.objective),
        sigma: sig_basket(&s.sigma),
        valuation: s.valuation.iter().map(|(t, v)| (t.clone(), sig(v))).collect(),
        final_pools: s.final_pools.iter().map(|&p| sig_pair(p)).collect(),
        start: s.start,
        iterations: s.iterations,
    };
    let summary = format!("sum of squared slack {} (start {})", sig(s.objective), s.start);
    Ok(Output { json: to_json(&report), summary, code: EXIT_OK })
}

#[derive(Serialize)]
struct ReportedCheck {
    name: String,
    passed: bool,
    residual: String,
    detail: String,
}

impl From<CheckResult> for ReportedCheck {
    fn from(c: CheckResult) -> Self {
        ReportedCheck { name: c.name, passed: c.passed, residual: sig(c.residual), detail: c.detail }
    }
}

#[derive(Serialize)]
struct VerifyReport {
    version: &'static str,
    passed: bool,
    checks: Vec<ReportedCheck>,
}

fn failed(name: &str, detail: String) -> CheckResult {
    CheckResult { name: name.into(), passed: false, residual: f64::INFINITY, detail }
}

fn verify_plan(config: &Configuration, plan: &ExecutionPlan) -> Vec<CheckResult> {
    let n = config.len();
    if let Some(&i) = plan.active.iter().find(|&&i| i >= n) {
        return vec![failed("shape", format!("plan names cfmm {i} but the scenario has {n}"))];
    }
    let sim = match simulate(config, plan) {
        Ok(sim) => sim,
        Err(e) => return vec![failed("replay", e.to_string())],
    };
    let problem = if plan.active.len() == n {
        RebalanceProblem::full(config.clone())
    } else {
        RebalanceProblem::restricted_to(config.clone(), plan.active.clone())
    }
    .with_fees(plan.fee_mode);
    if let Err(e) = problem.validate() {
        return vec![failed("scope", e.to_string())];
    }
    let mut checks = vec![CheckResult { name: "replay".into(), passed: true, residual: 0.0, detail: "every step executed".into() }];
    let residue = sim.residue.iter().map(|(_, v)| v.abs()).fold(0.0, f64::max);
    checks.push(CheckResult {
        name: "self_funding".into(),
        passed: residue <= VERIFY_TOL,
        residual: residue,
        detail: "largest agent balance left after repayment".into(),
    });
    let pools = sim.config.pool_pairs();
    checks.extend(verify_state(&problem, &pools, &sim.fee_revenue, VERIFY_TOL).checks);
    checks
}

fn cmd_verify(scenario_path: &Path, plan_path: &Path) -> Result<Output, Failure> {
    let scenario = load(scenario_path)?;
    let text = read(plan_path)?;
    let plan = parse_plan(&text).map_err(|e| Failure::new(EXIT_INPUT, format!("{}: {e}", plan_path.display())))?;
    let checks = verify_plan(&scenario.config, &plan);
    let passed = checks.iter().all(|c| c.passed);
    let failing: Vec<&str> = checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
    let summary = if passed { "all checks passed".to_string() } else { format!("failed: {}", failing.join(", ")) };
    let report = VerifyReport { version: VERSION, passed, checks: checks.into_iter().map(Into::into).collect() };
    Ok(Output { json: to_json(&report), summary, code: if passed { EXIT_OK } else { EXIT_UNVERIFIED } })
}

fn cmd_gen(args: &GenArgs) -> Result<Output, Failure> {
    let spec = GenSpec {
        seed: args.seed,
        n_cfmms: args.cfmms,
        n_tokens: args.tokens,
        pool_range: (args.pool_min, args.pool_max),
        active_fraction: args.active_fraction,
        oracle_count: args.oracles,
        fee_range: (args.fee_min, args.fee_max),
        ensure_connected: !args.disconnected,
    };
    let config = generate(&spec).map_err(|e| Failure::new(EXIT_INPUT, e.to_string()))?;
    let json = write_scenario(&config, None);
    if let Some(out) = &args.out {
        write_file(out, &json)?;
    }
    let summary = format!("generated {} cfmms over {} tokens", config.len(), config.tokens().len());
    Ok(Output { json, summary, code: EXIT_OK })
}
