use serde::Serialize;

use super::{RebalanceProblem, RebalanceSolution};
use crate::arbitrage::{detect, DetectOptions};
use crate::model::Basket;

/// Allowed relative drop of any CFMM's liquidity.
const NON_REDUCTION_SLACK: f64 = 1e-10;
/// Allowed relative drift of a passive CFMM's liquidity.
const PASSIVE_DRIFT: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub residual: f64,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerificationReport {
    pub checks: Vec<CheckResult>,
}

impl VerificationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&CheckResult> {
        self.checks.iter().find(|c| c.name == name)
    }
}

fn check(name: &str, residual: f64, limit: f64, detail: String) -> CheckResult {
    CheckResult { name: name.into(), passed: residual <= limit, residual, detail }
}

/// Participant-side checks of a proposed solution. `tol` bounds the
/// absolute per-token conservation residual.
pub fn verify(problem: &RebalanceProblem, solution: &RebalanceSolution, tol: f64) -> VerificationReport {
    verify_state(problem, &solution.final_pools, &solution.fee_revenue, tol)
}

/// Same checks for a bare final state, e.g. one obtained by replaying a plan.
pub fn verify_state(
    problem: &RebalanceProblem,
    final_pools: &[[f64; 2]],
    fee_revenue: &Basket,
    tol: f64,
) -> VerificationReport {
    let config = &problem.config;
    let mut checks = Vec::new();
    if final_pools.len() != config.len() {
        checks.push(CheckResult {
            name: "shape".into(),
            passed: false,
            residual: f64::INFINITY,
            detail: format!("{} pool pairs for {} cfmms", final_pools.len(), config.len()),
        });
        return VerificationReport { checks };
    }

    let mut worst = (0.0f64, None);
    let mut passive_drift = (0.0f64, None);
    for (i, (c, after)) in config.cfmms().iter().zip(final_pools).enumerate() {
        let before = c.liquidity();
        let now = c.function.value(*after);
        let drop = (before - now) / before.abs().max(f64::MIN_POSITIVE);
        if drop > worst.0 {
            worst = (drop, Some(i));
        }
        if !problem.is_active(i) {
            let drift = (now - before).abs() / before.abs().max(f64::MIN_POSITIVE);
            if drift > passive_drift.0 {
                passive_drift = (drift, Some(i));
            }
        }
    }
    checks.push(check(
        "liquidity_non_reduction",
        worst.0,
        NON_REDUCTION_SLACK,
        worst.1.map_or("no cfmm lost liquidity".into(), |i| format!("largest relative drop at cfmm {i}")),
    ));

    let mut conservation = (0.0f64, String::from("all tokens balance"));
    for token in config.tokens() {
        let after: f64 = config
            .pools()
            .filter(|&p| config.token_of(p) == token)
            .map(|p| final_pools[p.cfmm][p.pool.index()])
            .sum();
        let residual = (after + fee_revenue.get(token) - config.token_total(token)).abs();
        if residual > conservation.0 {
            conservation = (residual, format!("largest imbalance in {token}"));
        }
    }
    checks.push(check("conservation", conservation.0, tol, conservation.1));

    let min_pool = config
        .cfmms()
        .iter()
        .zip(final_pools)
        .filter(|(c, _)| !c.is_oracle())
        .flat_map(|(_, p)| *p)
        .fold(f64::INFINITY, f64::min);
    checks.push(CheckResult {
        name: "positivity".into(),
        passed: min_pool > 0.0,
        residual: if min_pool > 0.0 { 0.0 } else { -min_pool },
        detail: format!("smallest pool {min_pool}"),
    });

    if problem.is_restricted() {
        checks.push(check(
            "passive_equality",
            passive_drift.0,
            PASSIVE_DRIFT,
            passive_drift
                .1
                .map_or("passive liquidities unchanged".into(), |i| format!("largest drift at cfmm {i}")),
        ));
    }

    let arbitrage = match config.with_pools(final_pools) {
        Ok(final_config) => {
            let opts = DetectOptions { fee_aware: problem.fee_mode, ..DetectOptions::default() };
            match detect(&final_config, &opts) {
                Ok(cert) if cert.is_free() => (0.0, "final configuration is arbitrage-free".into()),
                Ok(_) => (1.0, "final configuration admits an arbitrage cycle".into()),
                Err(e) => (f64::INFINITY, e.to_string()),
            }
        }
        Err(e) => (f64::INFINITY, e.to_string()),
    };
    checks.push(check("arbitrage_free", arbitrage.0, 0.0, arbitrage.1));

    VerificationReport { checks }
}
