//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the test fails if any criterion does.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use serde_json::Value;

use rebalancer::arbitrage::{
    arbitrage_to_rebalancing, cycle_profit, cycle_trades, detect, optimal_cycle_arbitrage, ArbitrageCertificate,
    CycleHop, DepositPolicy, DetectOptions,
};
use rebalancer::planner::{plan, simulate};
use rebalancer::scenario::parse_scenario;
use rebalancer::scenario_gen::{generate, GenSpec};
use rebalancer::solver::{solve, RebalanceProblem, RebalanceSolution, SolverOptions};
use rebalancer::trade_only::{solve_trade_only, TradeOnlyOptions};
use rebalancer::{Configuration, Mode};

const SEEDS: std::ops::RangeInclusive<u64> = 1..=500;
const FIXTURES: [&str; 4] = ["triangle", "triangle_rebalanced", "mixed_triangle", "oracle_triangle"];

fn fixture_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(format!("{name}.json"))
}

fn fixture(name: &str) -> Configuration {
    parse_scenario(&std::fs::read_to_string(fixture_path(name)).unwrap()).unwrap().config
}

fn full_spec(seed: u64) -> GenSpec {
    GenSpec { seed, n_cfmms: 4 + (seed as usize % 5), n_tokens: 5, ..Default::default() }
}

/// Same networks with about half the CFMMs passive, an oracle on odd seeds
/// and fees on every pool.
fn restricted_spec(seed: u64) -> GenSpec {
    GenSpec { active_fraction: 0.5, oracle_count: (seed % 2) as usize, fee_range: (0.99, 1.0), ..full_spec(seed) }
}

fn restricted_problems(seed: u64) -> Vec<RebalanceProblem> {
    let problem = RebalanceProblem::restricted(generate(&restricted_spec(seed)).unwrap());
    vec![problem.clone(), problem.with_fees(true)]
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
}

struct Outcome {
    results: Vec<(u32, bool)>,
}

impl Outcome {
    fn record(&mut self, id: u32, passed: bool, detail: String) {
        println!("{} criterion {id}: {detail}", if passed { "PASS" } else { "FAIL" });
        self.results.push((id, passed));
    }
}

fn binary(args: &[&str]) -> (Option<i32>, Vec<u8>, Duration) {
    let start = Instant::now();
    let out = Command::new(env!("CARGO_BIN_EXE_rebalancer")).args(args).output().expect("binary runs");
    (out.status.code(), out.stdout, start.elapsed())
}

fn triangle_rebalancing() -> (bool, String) {
    let path = fixture_path("triangle");
    let (code, stdout, elapsed) = binary(&["rebalance", path.to_str().unwrap()]);
    if code != Some(0) {
        return (false, format!("rebalance exited with {code:?}"));
    }
    let report: Value = serde_json::from_slice(&stdout).unwrap();
    let num = |v: &Value| v.as_str().unwrap().parse::<f64>().unwrap();
    let mut worst: f64 = 0.0;
    for c in report["cfmms"].as_array().unwrap() {
        for x in c["pools_after"].as_array().unwrap() {
            worst = worst.max((num(x) - 2.0).abs());
        }
        worst = worst.max((num(&c["liquidity_after"]) - 4.0).abs());
    }
    // Full precision through the library as well.
    let problem = RebalanceProblem::full(fixture("triangle"));
    let s = solve(&problem, &SolverOptions::default()).unwrap();
    for (p, k) in s.final_pools.iter().zip(&s.liquidity_after) {
        worst = worst.max((p[0] - 2.0).abs()).max((p[1] - 2.0).abs()).max((k - 4.0).abs());
    }
    (
        worst <= 1e-6 && elapsed < Duration::from_secs(1),
        format!("pools (2,2) and liquidity 4 to {worst:.1e}, cli run {elapsed:?}"),
    )
}

fn triangle_profit() -> (bool, String) {
    let config = fixture("triangle");
    // Dollars into C, pounds into B, euros into A.
    let cycle = vec![
        CycleHop { cfmm: 2, token_in: "USD".into(), token_out: "GBP".into() },
        CycleHop { cfmm: 1, token_in: "GBP".into(), token_out: "EUR".into() },
        CycleHop { cfmm: 0, token_in: "EUR".into(), token_out: "USD".into() },
    ];
    let at_one = cycle_profit(&config, &cycle, 1.0).unwrap();
    let best = optimal_cycle_arbitrage(&config, &cycle, &"USD".into()).unwrap();
    let err = (at_one - 13.0 / 14.0).abs();
    (
        err <= 1e-9 && best.profit >= at_one,
        format!("profit at $1 = {at_one:.12} (error {err:.1e}); optimal {:.9} at input {:.6}", best.profit, best.input),
    )
}

fn oracle_rebalancing() -> (bool, String) {
    let config = fixture("oracle_triangle");
    let problem = RebalanceProblem::restricted(config.clone());
    let s = solve(&problem, &SolverOptions::default()).unwrap();
    let r3 = 3f64.sqrt();
    let a_err = (s.liquidity_after[0] - (19.0 - 8.0 * r3)).abs();
    let b_err = (s.final_pools[1][0] - r3).abs().max((s.final_pools[1][1] - r3).abs());
    let free = detect(&config.with_pools(&s.final_pools).unwrap(), &DetectOptions::default()).unwrap().is_free();
    (
        a_err <= 1e-6 && b_err <= 1e-6 && free,
        format!("A liquidity {:.9} (error {a_err:.1e}), B pools error {b_err:.1e}, detect free: {free}", s.liquidity_after[0]),
    )
}

/// Routes `d` dollars out of A through C and B and deposits the euros into
/// A; returns A's liquidity.
fn mixed_liquidity(d: f64) -> f64 {
    let pounds = 3.0 * d / (1.0 + d);
    let euros = 3.0 * pounds / (1.0 + pounds);
    (1.0 + euros) * (3.0 - d)
}

fn mixed_rebalancing() -> (bool, String) {
    let (mut best_d, mut best) = (0.0, f64::NEG_INFINITY);
    for k in 1..3_000_000 {
        let d = k as f64 * 1e-6;
        let v = mixed_liquidity(d);
        if v > best {
            best = v;
            best_d = d;
        }
    }
    let problem = RebalanceProblem::restricted(fixture("mixed_triangle"));
    let s = solve(&problem, &SolverOptions::default()).unwrap();
    let err = (s.liquidity_after[0] - 6.25).abs();
    let oracle_err = (best - 6.25).abs();
    (
        err <= 1e-6 && oracle_err <= 1e-6 && (best_d - 0.5).abs() <= 1e-5,
        format!(
            "A liquidity {:.9} (error {err:.1e}); brute force {best:.9} at d = {best_d:.6}",
            s.liquidity_after[0]
        ),
    )
}

fn trade_only_protection() -> (bool, String) {
    let s = solve_trade_only(&fixture("triangle"), &TradeOnlyOptions::default()).unwrap();
    let target = 4.0 - 2.0 * 3f64.sqrt();
    let err = s.sigma.iter().map(|(_, v)| (v - target).abs()).fold(0.0, f64::max);
    let count = s.sigma.iter().count();
    (
        count == 3 && err <= 1e-4 && s.objective > 0.0,
        format!("sigma error {err:.1e} over {count} tokens, objective {:.9}", s.objective),
    )
}

#[test]
fn acceptance() {
    let mut outcome = Outcome { results: Vec::new() };
    let (ok, detail) = triangle_rebalancing();
    outcome.record(1, ok, detail);
    let (ok, detail) = triangle_profit();
    outcome.record(2, ok, detail);
    let (ok, detail) = oracle_rebalancing();
    outcome.record(3, ok, detail);
    let (ok, detail) = mixed_rebalancing();
    outcome.record(4, ok, detail);
    let (ok, detail) = trade_only_protection();
    outcome.record(5, ok, detail);

    // Equivalence over the generated corpus; solutions are kept for the
    // plan checks below.
    let opts = SolverOptions::default();
    let start = Instant::now();
    let mut mismatches = Vec::new();
    let mut full: Vec<(u64, RebalanceProblem, RebalanceSolution)> = Vec::new();
    let mut prone = Vec::new();
    let mut min_prone = f64::INFINITY;
    let mut max_free: f64 = 0.0;
    for seed in SEEDS {
        let config = generate(&full_spec(seed)).unwrap();
        let cert = detect(&config, &DetectOptions::default()).unwrap();
        let problem = RebalanceProblem::full(config.clone());
        match solve(&problem, &opts) {
            Ok(s) => {
                if cert.is_free() != (s.improvement <= 1e-7) {
                    mismatches.push(seed);
                }
                if cert.is_free() {
                    max_free = max_free.max(s.improvement);
                } else {
                    min_prone = min_prone.min(s.improvement);
                }
                full.push((seed, problem, s));
            }
            Err(_) => mismatches.push(seed),
        }
        if let ArbitrageCertificate::Prone { cycle, .. } = cert {
            prone.push((seed, config, cycle));
        }
    }
    let elapsed = start.elapsed();
    outcome.record(
        6,
        mismatches.is_empty() && elapsed < Duration::from_secs(60),
        format!(
            "{} scenarios, {} prone, counterexamples {mismatches:?}, max free improvement {max_free:.1e}, \
             min prone improvement {min_prone:.1e}, {elapsed:?}",
            SEEDS.count(),
            prone.len()
        ),
    );

    let mut failures = Vec::new();
    for (seed, config, cycle) in &prone {
        let start_token = cycle[0].token_in.clone();
        let ok = optimal_cycle_arbitrage(config, cycle, &start_token)
            .and_then(|best| cycle_trades(config, cycle, best.input))
            .and_then(|(trades, _)| arbitrage_to_rebalancing(config, &trades, DepositPolicy::default()))
            .map(|r| {
                let before = config.liquidities();
                let after = r.config.liquidities();
                let none_lower = before.iter().zip(&after).all(|(b, a)| *a >= b * (1.0 - 1e-10));
                let one_higher = before.iter().zip(&after).any(|(b, a)| a > b);
                none_lower && one_higher
            })
            .unwrap_or(false);
        if !ok {
            failures.push(*seed);
        }
    }
    outcome.record(7, failures.is_empty(), format!("{} prone scenarios, failures {failures:?}", prone.len()));

    let mut restricted: Vec<(u64, RebalanceProblem, RebalanceSolution)> = Vec::new();
    let mut failures = Vec::new();
    let mut worst: f64 = 0.0;
    let mut passive_count = 0;
    for seed in SEEDS {
        for problem in restricted_problems(seed) {
            match solve(&problem, &opts) {
                Ok(s) => {
                    let mut ok = true;
                    for (i, c) in problem.config.cfmms().iter().enumerate() {
                        if problem.is_active(i) {
                            continue;
                        }
                        passive_count += 1;
                        let drift = rel(s.liquidity_after[i], c.liquidity());
                        worst = worst.max(drift);
                        ok &= drift <= 1e-7;
                    }
                    if !ok {
                        failures.push((seed, problem.fee_mode));
                    }
                    restricted.push((seed, problem, s));
                }
                Err(_) => failures.push((seed, problem.fee_mode)),
            }
        }
    }
    outcome.record(
        8,
        failures.is_empty(),
        format!(
            "{} restricted solves, {passive_count} passive cfmms, worst drift {worst:.1e}, failures {failures:?}",
            restricted.len()
        ),
    );

    let mut differing = Vec::new();
    for name in FIXTURES {
        let path = fixture_path(name);
        let restricted_modes = fixture(name).cfmms().iter().any(|c| c.mode != Mode::Active);
        let mut args = vec!["rebalance", path.to_str().unwrap()];
        if restricted_modes {
            args.push("--restricted");
        }
        let (c1, a, _) = binary(&args);
        let (c2, b, _) = binary(&args);
        if c1 != Some(0) || c2 != Some(0) || a != b || a.is_empty() {
            differing.push(name);
        }
    }
    outcome.record(9, differing.is_empty(), format!("{} fixtures, differing or failing {differing:?}", FIXTURES.len()));

    let mut failures = Vec::new();
    let (mut worst_dev, mut worst_res): (f64, f64) = (0.0, 0.0);
    let mut borrowing = 0;
    for (seed, problem, s) in full.iter().chain(&restricted) {
        let result = plan(problem, s).map_err(|e| e.to_string()).and_then(|pl| {
            let borrowed = !pl.borrow_basket.is_zero(0.0);
            simulate(&problem.config, &pl).map(|sim| (sim, borrowed)).map_err(|e| e.to_string())
        });
        match result {
            Ok((sim, borrowed)) => {
                let dev = sim.deviation_from(&s.final_pools);
                let res = sim.residue.iter().map(|(_, v)| v.abs()).fold(0.0, f64::max);
                worst_dev = worst_dev.max(dev);
                worst_res = worst_res.max(res);
                borrowing += borrowed as usize;
                if dev > 1e-7 || res > 1e-9 {
                    failures.push((*seed, problem.is_restricted(), problem.fee_mode));
                }
            }
            Err(_) => failures.push((*seed, problem.is_restricted(), problem.fee_mode)),
        }
    }
    outcome.record(
        10,
        failures.is_empty(),
        format!(
            "{} plans, worst deviation {worst_dev:.1e}, worst residue {worst_res:.1e}, {borrowing} borrow up front, \
             failures {failures:?}",
            full.len() + restricted.len()
        ),
    );

    let failed: Vec<u32> = outcome.results.iter().filter(|(_, ok)| !ok).map(|(id, _)| *id).collect();
    assert_eq!(outcome.results.len(), 10);
    assert!(failed.is_empty(), "failing criteria: {failed:?}");
}
