//! Executable, self-funding plans for rebalancing solutions.
//!
//! Active CFMMs change through direct transfers, either pool to pool or via
//! the agent's account. Every other CFMM that moved is traded against once,
//! selling into the pool that grew. Steps are ordered greedily so the agent
//! never goes negative; whatever cannot be unlocked from pool outflows is
//! borrowed up front and repaid at the end.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Basket, Configuration, ModelError, PoolRef, PoolSide, TokenId};
use crate::solver::{RebalanceProblem, RebalanceSolution};

/// Relative liquidity drift allowed in a passive CFMM's net change.
const PASSIVE_CONSISTENCY: f64 = 1e-7;
/// Changes below this fraction of the pool are treated as zero.
const NEGLIGIBLE_CHANGE: f64 = 1e-13;
/// Absolute slack for balances and expected outputs during replay.
const BALANCE_SLACK: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlanError {
    #[error("cfmm {cfmm}: pool changes ({d0}, {d1}) do not preserve liquidity")]
    InconsistentPassiveDelta { cfmm: usize, d0: f64, d1: f64 },
    #[error("solution has {got} pool pairs for {expected} cfmms")]
    ShapeMismatch { got: usize, expected: usize },
    #[error("step {step} is infeasible: {reason}")]
    StepInfeasible { step: usize, reason: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Step {
    /// Moves `amount` of `token`; `None` on either side is the agent.
    Transfer {
        from: Option<PoolRef>,
        to: Option<PoolRef>,
        token: TokenId,
        #[serde(with = "crate::decimal")]
        amount: f64,
    },
    Trade {
        cfmm: usize,
        token_in: TokenId,
        #[serde(with = "crate::decimal")]
        amount_in: f64,
        token_out: TokenId,
        #[serde(with = "crate::decimal")]
        expected_out: f64,
        /// Fee factor the expected output was computed with.
        #[serde(with = "crate::decimal")]
        fee: f64,
    },
    Borrow {
        basket: Basket,
    },
    Repay {
        basket: Basket,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionPlan {
    pub steps: Vec<Step>,
    pub borrow_basket: Basket,
    /// CFMMs that were rebalanced by transfers.
    pub active: Vec<usize>,
    pub fee_mode: bool,
}

impl ExecutionPlan {
    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// Outcome of replaying a plan.
#[derive(Debug, Clone, PartialEq)]
pub struct Simulation {
    pub config: Configuration,
    pub fee_revenue: Basket,
    /// Agent holdings left after repayment.
    pub residue: Basket,
}

impl Simulation {
    /// Largest relative deviation of the replayed pools from `pools`.
    pub fn deviation_from(&self, pools: &[[f64; 2]]) -> f64 {
        self.config
            .cfmms()
            .iter()
            .zip(pools)
            .flat_map(|(c, p)| (0..2).map(move |j| (c.pools[j] - p[j]).abs() / p[j].abs().max(1.0)))
            .fold(0.0, f64::max)
    }
}

type Amounts = Vec<(TokenId, f64)>;

/// What a step takes from and gives to the agent.
fn agent_flows(step: &Step) -> (Amounts, Amounts) {
    match step {
        Step::Transfer { from, to, token, amount } => {
            let takes = if from.is_none() { vec![(token.clone(), *amount)] } else { vec![] };
            let gives = if to.is_none() { vec![(token.clone(), *amount)] } else { vec![] };
            (takes, gives)
        }
        Step::Trade { token_in, amount_in, token_out, expected_out, .. } => {
            (vec![(token_in.clone(), *amount_in)], vec![(token_out.clone(), *expected_out)])
        }
        Step::Borrow { basket } => (vec![], basket.iter().map(|(t, v)| (t.clone(), v)).collect()),
        Step::Repay { basket } => (basket.iter().map(|(t, v)| (t.clone(), v)).collect(), vec![]),
    }
}

fn negligible(change: f64, pool: f64) -> bool {
    change.abs() <= NEGLIGIBLE_CHANGE * pool.abs().max(1.0)
}

/// Trade of `amount_in` into the pool on `into`, quoted by the invariant.
fn trade_step(config: &Configuration, i: usize, into: PoolSide, amount_in: f64, fee_mode: bool) -> Result<Step, PlanError> {
    let mut c = config.cfmm(i).clone();
    if !fee_mode {
        c.fee = 1.0;
    }
    let outcome = c.apply_trade(amount_in, into)?;
    Ok(Step::Trade {
        cfmm: i,
        token_in: c.tokens[into.index()].clone(),
        amount_in,
        token_out: c.tokens[into.other().index()].clone(),
        expected_out: outcome.amount_out,
        fee: c.fee,
    })
}

/// Single trade realizing a non-active CFMM's net pool change.
fn passive_trade(config: &Configuration, i: usize, d: [f64; 2], fee_mode: bool) -> Result<Option<Step>, PlanError> {
    let c = config.cfmm(i);
    let small = [negligible(d[0], c.pools[0]), negligible(d[1], c.pools[1])];
    if small[0] && small[1] {
        return Ok(None);
    }
    let inconsistent = PlanError::InconsistentPassiveDelta { cfmm: i, d0: d[0], d1: d[1] };
    let into = match (d[0] > 0.0 && !small[0], d[1] > 0.0 && !small[1]) {
        (true, false) if d[1] < 0.0 => PoolSide::First,
        (false, true) if d[0] < 0.0 => PoolSide::Second,
        _ => return Err(inconsistent),
    };
    let fee = if fee_mode { c.fee } else { 1.0 };
    let drift = c.function.value([c.pools[0] + d[0], c.pools[1] + d[1]]) / c.liquidity() - 1.0;
    if !(drift.abs() <= PASSIVE_CONSISTENCY) {
        return Err(inconsistent);
    }
    let step = trade_step(config, i, into, d[into.index()] / fee, fee_mode)?;
    Ok(Some(step))
}

/// Agent's net holding of `token` after `steps` and the active pool changes.
fn leftover(token: &TokenId, changes: &[(PoolRef, f64)], steps: &[Step]) -> f64 {
    let mut left: f64 = -changes.iter().map(|c| c.1).sum::<f64>();
    for step in steps {
        let (takes, gives) = agent_flows(step);
        left += gives.iter().filter(|g| g.0 == *token).map(|g| g.1).sum::<f64>();
        left -= takes.iter().filter(|g| g.0 == *token).map(|g| g.1).sum::<f64>();
    }
    left
}

/// Transfers for the active pools of one token: outflows are matched to
/// inflows in pool order, and the remainder goes through the agent.
/// Rounding leftovers below `NEGLIGIBLE_CHANGE` of the total are dropped.
fn token_transfers(token: &TokenId, changes: &[(PoolRef, f64)]) -> Vec<Step> {
    let scale = changes.iter().map(|c| c.1.abs()).sum::<f64>().max(1.0);
    let spent = |left: f64| left <= NEGLIGIBLE_CHANGE * scale;
    let mut sources: Vec<(PoolRef, f64)> = changes.iter().filter(|c| c.1 < 0.0).map(|&(p, d)| (p, -d)).collect();
    let mut sinks: Vec<(PoolRef, f64)> = changes.iter().filter(|c| c.1 > 0.0).copied().collect();
    let mut steps = Vec::new();
    let (mut a, mut b) = (0, 0);
    while a < sources.len() && b < sinks.len() {
        let amount = sources[a].1.min(sinks[b].1);
        steps.push(Step::Transfer { from: Some(sources[a].0), to: Some(sinks[b].0), token: token.clone(), amount });
        sources[a].1 -= amount;
        sinks[b].1 -= amount;
        if spent(sources[a].1) {
            a += 1;
        }
        if spent(sinks[b].1) {
            b += 1;
        }
    }
    for &(pool, amount) in &sources[a.min(sources.len())..] {
        if !spent(amount) {
            steps.push(Step::Transfer { from: Some(pool), to: None, token: token.clone(), amount });
        }
    }
    for &(pool, amount) in &sinks[b.min(sinks.len())..] {
        if !spent(amount) {
            steps.push(Step::Transfer { from: None, to: Some(pool), token: token.clone(), amount });
        }
    }
    steps
}

/// Repeatedly emits the first step the agent can pay for; when none
/// qualifies, borrows the smallest shortfall that unlocks a step.
fn order(steps: Vec<Step>) -> (Vec<Step>, Basket) {
    let mut pending = steps;
    let mut ordered = Vec::with_capacity(pending.len());
    let mut balance = Basket::new();
    let mut borrowed = Basket::new();
    let shortfall = |step: &Step, balance: &Basket| -> Vec<(TokenId, f64)> {
        let (takes, _) = agent_flows(step);
        takes
            .into_iter()
            .filter_map(|(t, v)| {
                let missing = v - balance.get(&t);
                (missing > NEGLIGIBLE_CHANGE * v.abs().max(1.0)).then_some((t, missing))
            })
            .collect()
    };
    while !pending.is_empty() {
        let next = match pending.iter().position(|s| shortfall(s, &balance).is_empty()) {
            Some(k) => k,
            None => {
                let (k, missing) = pending
                    .iter()
                    .map(|s| shortfall(s, &balance))
                    .enumerate()
                    .min_by(|(_, x), (_, y)| {
                        let total = |m: &Vec<(TokenId, f64)>| m.iter().map(|(_, v)| v).sum::<f64>();
                        total(x).total_cmp(&total(y))
                    })
                    .expect("pending is not empty");
                for (t, v) in missing {
                    borrowed.add(&t, v);
                    balance.add(&t, v);
                }
                k
            }
        };
        let step = pending.remove(next);
        let (takes, gives) = agent_flows(&step);
        for (t, v) in takes {
            balance.add(&t, -v);
        }
        for (t, v) in gives {
            balance.add(&t, v);
        }
        ordered.push(step);
    }
    (ordered, borrowed.pruned())
}

/// Turns a verified solution into an ordered plan.
pub fn plan(problem: &RebalanceProblem, solution: &RebalanceSolution) -> Result<ExecutionPlan, PlanError> {
    let config = &problem.config;
    if solution.final_pools.len() != config.len() {
        return Err(PlanError::ShapeMismatch { got: solution.final_pools.len(), expected: config.len() });
    }
    let active: Vec<usize> = (0..config.len()).filter(|&i| problem.is_active(i)).collect();
    let mut steps = Vec::new();
    let mut transfers = Vec::new();
    let mut by_token: Vec<(TokenId, Vec<(PoolRef, f64)>)> =
        config.tokens().iter().map(|t| (t.clone(), Vec::new())).collect();
    for (i, c) in config.cfmms().iter().enumerate() {
        let d = [solution.final_pools[i][0] - c.pools[0], solution.final_pools[i][1] - c.pools[1]];
        if problem.is_active(i) {
            for side in [PoolSide::First, PoolSide::Second] {
                let j = side.index();
                if !negligible(d[j], c.pools[j]) {
                    let slot = by_token.iter_mut().find(|(t, _)| *t == c.tokens[j]).expect("token listed");
                    slot.1.push((PoolRef::new(i, side), d[j]));
                }
            }
        } else if let Some(step) = passive_trade(config, i, d, problem.fee_mode)? {
            steps.push(step);
        }
    }
    // Trades pay out what the invariant dictates, which can differ from the
    // solution by rounding. Leftovers in tokens without an active pool are
    // passed on through trades leading towards one, farthest token first;
    // the rest settle with the deepest active pool of each token so the
    // agent ends with nothing.
    // Trade hops from each token to one with an active pool.
    let mut hops: BTreeMap<TokenId, usize> = BTreeMap::new();
    for &i in &active {
        for t in &config.cfmm(i).tokens {
            hops.insert(t.clone(), 0);
        }
    }
    for _ in 0..config.tokens().len() {
        for step in &steps {
            if let Step::Trade { token_in, token_out, .. } = step {
                if let Some(&h) = hops.get(token_out) {
                    let entry = hops.entry(token_in.clone()).or_insert(usize::MAX);
                    *entry = (*entry).min(h + 1);
                }
            }
        }
    }
    let mut relay: Vec<(usize, TokenId)> =
        hops.iter().filter(|&(_, &h)| h > 0).map(|(t, &h)| (h, t.clone())).collect();
    relay.sort_by(|a, b| b.cmp(a));
    for (h, token) in relay {
        let changes = &by_token.iter().find(|(t, _)| *t == token).expect("token listed").1;
        let left = leftover(&token, changes, &steps);
        let seller = steps.iter().position(|s| {
            matches!(s, Step::Trade { token_in, token_out, .. } if *token_in == token && hops.get(token_out) == Some(&(h - 1)))
        });
        let Some(k) = seller else { continue };
        let Step::Trade { cfmm, amount_in, .. } = steps[k] else { unreachable!("seller is a trade") };
        let into = config.cfmm(cfmm).side_of(&token).expect("trade sells a listed token");
        if left != 0.0 && amount_in + left > 0.0 {
            steps[k] = trade_step(config, cfmm, into, amount_in + left, problem.fee_mode)?;
        }
    }
    for (token, changes) in &mut by_token {
        let left = leftover(token, changes, &steps);
        let deepest = active
            .iter()
            .flat_map(|&i| config.cfmm(i).side_of(token).map(|side| PoolRef::new(i, side)))
            .max_by(|a, b| solution.final_pools[a.cfmm][a.pool.index()].total_cmp(&solution.final_pools[b.cfmm][b.pool.index()]));
        if let (Some(pool), true) = (deepest, left != 0.0) {
            match changes.iter_mut().find(|c| c.0 == pool) {
                Some(c) => c.1 += left,
                None => changes.push((pool, left)),
            }
        }
        transfers.extend(token_transfers(token, changes));
    }
    steps.append(&mut transfers);
    let (mut steps, borrow_basket) = order(steps);
    if borrow_basket.iter().next().is_some() {
        steps.insert(0, Step::Borrow { basket: borrow_basket.clone() });
        steps.push(Step::Repay { basket: borrow_basket.clone() });
    }
    Ok(ExecutionPlan { steps, borrow_basket, active, fee_mode: problem.fee_mode })
}

/// Replays a plan against `config`, checking the agent's balance and every
/// expected trade output along the way.
pub fn simulate(config: &Configuration, plan: &ExecutionPlan) -> Result<Simulation, PlanError> {
    let mut state = config.clone();
    let mut balance = Basket::new();
    let mut fee_revenue = Basket::new();
    for (k, step) in plan.steps.iter().enumerate() {
        let fail = |reason: String| PlanError::StepInfeasible { step: k, reason };
        let pool_of = |p: &PoolRef, token: &TokenId| -> Result<(), PlanError> {
            if p.cfmm >= state.len() {
                return Err(fail(format!("cfmm {} does not exist", p.cfmm)));
            }
            if state.token_of(*p) != token {
                return Err(fail(format!("pool {} of cfmm {} does not hold {token}", p.pool.index(), p.cfmm)));
            }
            Ok(())
        };
        match step {
            Step::Transfer { from, to, token, amount } => {
                if !(*amount > 0.0 && amount.is_finite()) {
                    return Err(fail(format!("transfer amount {amount} must be positive")));
                }
                let mut pools = state.pool_pairs();
                if let Some(p) = from {
                    pool_of(p, token)?;
                    let left = pools[p.cfmm][p.pool.index()] - amount;
                    if !state.cfmm(p.cfmm).is_oracle() && left <= 0.0 {
                        return Err(fail(format!("cfmm {} pool {} would be exhausted", p.cfmm, p.pool.index())));
                    }
                    pools[p.cfmm][p.pool.index()] = left;
                } else {
                    balance.add(token, -amount);
                }
                if let Some(p) = to {
                    pool_of(p, token)?;
                    pools[p.cfmm][p.pool.index()] += amount;
                } else {
                    balance.add(token, *amount);
                }
                state = state.with_pools(&pools).map_err(|e| fail(e.to_string()))?;
            }
            Step::Trade { cfmm, token_in, amount_in, token_out, expected_out, fee } => {
                if *cfmm >= state.len() {
                    return Err(fail(format!("cfmm {cfmm} does not exist")));
                }
                let mut c = state.cfmm(*cfmm).clone();
                let into = c.side_of(token_in).ok_or_else(|| fail(format!("cfmm {cfmm} does not trade {token_in}")))?;
                if c.tokens[into.other().index()] != *token_out {
                    return Err(fail(format!("cfmm {cfmm} does not pay out {token_out}")));
                }
                let charged = if plan.fee_mode { c.fee } else { 1.0 };
                if *fee != charged {
                    return Err(fail(format!("plan assumes fee {fee}, cfmm {cfmm} charges {charged}")));
                }
                let stored = c.fee;
                c.fee = charged;
                let mut outcome = c.apply_trade(*amount_in, into).map_err(|e| fail(e.to_string()))?;
                outcome.state.fee = stored;
                if (outcome.amount_out - expected_out).abs() > BALANCE_SLACK * expected_out.abs().max(1.0) {
                    return Err(fail(format!("trade pays {} instead of {expected_out}", outcome.amount_out)));
                }
                balance.add(token_in, -amount_in);
                balance.add(token_out, outcome.amount_out);
                fee_revenue.add(token_in, outcome.fee_revenue);
                state = state.with_cfmm(*cfmm, outcome.state).map_err(|e| fail(e.to_string()))?;
            }
            Step::Borrow { basket } => {
                for (t, v) in basket.iter() {
                    balance.add(t, v);
                }
            }
            Step::Repay { basket } => {
                for (t, v) in basket.iter() {
                    balance.add(t, -v);
                }
            }
        }
        if let Some((t, v)) = balance.iter().find(|&(_, v)| v < -BALANCE_SLACK) {
            return Err(fail(format!("agent balance of {t} would be {v}")));
        }
    }
    Ok(Simulation { config: state, fee_revenue: fee_revenue.pruned(), residue: balance.pruned() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Cfmm, Mode, TradingFunction};
    use crate::solver::{solve, SolverOptions};

    fn triangle() -> Configuration {
        Configuration::from_cfmms(vec![
            Cfmm::constant_product("EUR", 1.0, "USD", 3.0),
            Cfmm::constant_product("GBP", 1.0, "EUR", 3.0),
            Cfmm::constant_product("USD", 1.0, "GBP", 3.0),
        ])
        .unwrap()
    }

    fn oracle_triangle() -> Configuration {
        let oracle = Cfmm::new(["USD".into(), "GBP".into()], [1.0, 3.0], TradingFunction::Linear { a: 1.0, b: 1.0 })
            .with_mode(Mode::Oracle);
        Configuration::from_cfmms(vec![
            Cfmm::constant_product("EUR", 1.0, "USD", 3.0),
            Cfmm::constant_product("GBP", 1.0, "EUR", 3.0).with_mode(Mode::Passive),
            oracle,
        ])
        .unwrap()
    }

    fn solved(problem: &RebalanceProblem) -> (RebalanceSolution, ExecutionPlan) {
        let sol = solve(problem, &SolverOptions::default()).unwrap();
        let plan = plan(problem, &sol).unwrap();
        (sol, plan)
    }

    #[test]
    fn triangle_plan_is_three_direct_transfers() {
        let problem = RebalanceProblem::full(triangle());
        let (sol, plan) = solved(&problem);
        assert_eq!(plan.steps.len(), 3);
        assert!(plan.borrow_basket.iter().next().is_none());
        for step in &plan.steps {
            match step {
                Step::Transfer { from: Some(_), to: Some(_), amount, .. } => assert!((amount - 1.0).abs() < 1e-6),
                other => panic!("unexpected step {other:?}"),
            }
        }
        let sim = simulate(&problem.config, &plan).unwrap();
        assert!(sim.deviation_from(&sol.final_pools) < 1e-12);
        assert!(sim.residue.is_zero(1e-9));
    }

    #[test]
    fn oracle_plan_drains_a_first_and_borrows_nothing() {
        let s3 = 3f64.sqrt();
        let problem = RebalanceProblem::restricted(oracle_triangle());
        let (sol, plan) = solved(&problem);
        assert!(plan.borrow_basket.iter().next().is_none(), "{plan:?}");
        assert_eq!(plan.steps.len(), 4);
        match &plan.steps[0] {
            Step::Transfer { from: Some(p), to: None, token, amount } => {
                assert_eq!((p.cfmm, token.as_str()), (0, "USD"));
                assert!((amount - (s3 - 1.0)).abs() < 1e-6);
            }
            other => panic!("unexpected first step {other:?}"),
        }
        match (&plan.steps[1], &plan.steps[2]) {
            (Step::Trade { cfmm: 2, amount_in, .. }, Step::Trade { cfmm: 1, expected_out, .. }) => {
                assert!((amount_in - (s3 - 1.0)).abs() < 1e-6);
                assert!((expected_out - (3.0 - s3)).abs() < 1e-6);
            }
            other => panic!("unexpected trades {other:?}"),
        }
        let sim = simulate(&problem.config, &plan).unwrap();
        assert!((sim.config.cfmm(0).pools[0] - (4.0 - s3)).abs() < 1e-6);
        assert!((sim.config.cfmm(0).pools[1] - (4.0 - s3)).abs() < 1e-6);
        assert!(sim.deviation_from(&sol.final_pools) < 1e-7);
        assert!(sim.residue.is_zero(1e-9));
    }

    #[test]
    fn fixed_point_gives_empty_plan() {
        let problem = RebalanceProblem::full(triangle().with_pools(&[[2.0, 2.0]; 3]).unwrap());
        let (_, plan) = solved(&problem);
        assert!(plan.is_empty());
        let sim = simulate(&problem.config, &plan).unwrap();
        assert_eq!(sim.config, problem.config);
    }

    #[test]
    fn replay_on_wrong_configuration_fails() {
        let problem = RebalanceProblem::restricted(oracle_triangle());
        let (_, plan) = solved(&problem);
        let wrong = oracle_triangle().with_pools(&[[1.0, 3.0], [2.0, 3.0], [1.0, 3.0]]).unwrap();
        assert!(matches!(simulate(&wrong, &plan), Err(PlanError::StepInfeasible { .. })));
    }

    #[test]
    fn borrowing_covers_a_step_nobody_funds() {
        let steps = vec![
            Step::Transfer { from: None, to: Some(PoolRef::new(0, PoolSide::First)), token: "EUR".into(), amount: 2.0 },
            Step::Transfer { from: Some(PoolRef::new(1, PoolSide::Second)), to: None, token: "EUR".into(), amount: 2.0 },
        ];
        let (ordered, borrowed) = order(steps.clone());
        assert!(borrowed.iter().next().is_none());
        assert_eq!(ordered[0], steps[1]);

        let lonely = vec![Step::Transfer {
            from: None,
            to: Some(PoolRef::new(0, PoolSide::First)),
            token: "EUR".into(),
            amount: 2.0,
        }];
        let (_, borrowed) = order(lonely);
        assert_eq!(borrowed.get(&"EUR".into()), 2.0);
    }

    #[test]
    fn inconsistent_passive_change_is_rejected() {
        let problem = RebalanceProblem::restricted(oracle_triangle());
        let mut sol = solve(&problem, &SolverOptions::default()).unwrap();
        sol.final_pools[1][0] += 0.01;
        assert!(matches!(plan(&problem, &sol), Err(PlanError::InconsistentPassiveDelta { cfmm: 1, .. })));
    }

    #[test]
    fn plan_round_trips_through_json() {
        let problem = RebalanceProblem::restricted(oracle_triangle());
        let (_, plan) = solved(&problem);
        let text = serde_json::to_string(&plan).unwrap();
        let back: ExecutionPlan = serde_json::from_str(&text).unwrap();
        assert_eq!(back, plan);
    }
}
