//! Arbitrage detection on the token exchange-rate graph.
//!
//! Every CFMM contributes two directed edges between its tokens, weighted by
//! the negative log of the marginal exchange rate. A configuration is
//! arbitrage-prone exactly when some cycle has negative total weight; when no
//! such cycle exists, propagating rates along a spanning tree yields a
//! valuation consistent with every spot price.
//!
//! Detection works on spot prices only. For smooth fee-free CFMMs with
//! strictly convex level sets an inconsistent set of spot prices always
//! admits a profitable simple cycle of small trades, so searching simple
//! cycles is enough even though arbitrage is defined over arbitrary trade
//! sequences.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Basket, Configuration, ModelError, PoolRef, PoolSide, TokenId};

pub const DEFAULT_TOLERANCE: f64 = 1e-7;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ArbitrageError {
    #[error("cycle is not profitable")]
    NotProfitable,
    #[error("trade sequence is not an arbitrage: {0}")]
    NotAnArbitrage(String),
    #[error("invalid cycle: {0}")]
    InvalidCycle(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Numéraire prices per token. Each connected component has its own
/// numéraire: its lexicographically first token is worth 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Valuation(#[serde(with = "crate::decimal::map")] BTreeMap<TokenId, f64>);

impl Valuation {
    pub fn from_map(prices: BTreeMap<TokenId, f64>) -> Self {
        Valuation(prices)
    }

    pub fn get(&self, token: &TokenId) -> Option<f64> {
        self.0.get(token).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&TokenId, f64)> {
        self.0.iter().map(|(k, &v)| (k, v))
    }
}

/// One leg of a trade cycle: sell `token_in` to `cfmm` for `token_out`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CycleHop {
    pub cfmm: usize,
    pub token_in: TokenId,
    pub token_out: TokenId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum ArbitrageCertificate {
    Free {
        valuation: Valuation,
    },
    Prone {
        cycle: Vec<CycleHop>,
        #[serde(with = "crate::decimal")]
        log_gain: f64,
    },
}

impl ArbitrageCertificate {
    pub fn is_free(&self) -> bool {
        matches!(self, ArbitrageCertificate::Free { .. })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DetectOptions {
    /// Minimum log gain per cycle hop that counts as arbitrage.
    pub tol: f64,
    /// Discount marginal rates by each CFMM's fee.
    pub fee_aware: bool,
}

impl Default for DetectOptions {
    fn default() -> Self {
        DetectOptions {
            tol: DEFAULT_TOLERANCE,
            fee_aware: false,
        }
    }
}

struct RateEdge {
    from: usize,
    to: usize,
    // -ln(marginal rate)
    weight: f64,
    cfmm: usize,
}

fn rate_edges(config: &Configuration, fee_aware: bool) -> Result<Vec<RateEdge>, ModelError> {
    let index: BTreeMap<&TokenId, usize> =
        config.tokens().iter().enumerate().map(|(n, t)| (t, n)).collect();
    let mut edges = Vec::with_capacity(2 * config.len());
    for (i, c) in config.cfmms().iter().enumerate() {
        let log_p = c.spot_price()?.ln();
        let log_fee = if fee_aware { c.fee.ln() } else { 0.0 };
        let (a, b) = (index[&c.tokens[0]], index[&c.tokens[1]]);
        edges.push(RateEdge { from: a, to: b, weight: -(log_p + log_fee), cfmm: i });
        edges.push(RateEdge { from: b, to: a, weight: log_p - log_fee, cfmm: i });
    }
    Ok(edges)
}

/// Classifies a configuration as arbitrage-free (with a valuation) or
/// arbitrage-prone (with a profitable cycle).
pub fn detect(
    config: &Configuration,
    opts: &DetectOptions,
) -> Result<ArbitrageCertificate, ArbitrageError> {
    let tokens = config.tokens();
    let n = tokens.len();
    let edges = rate_edges(config, opts.fee_aware)?;

    // Bellman-Ford from a virtual source on weights shifted by `tol`, so only
    // cycles with gain above tol per hop register as negative.
    let mut dist = vec![0.0f64; n];
    let mut pred: Vec<Option<usize>> = vec![None; n];
    let mut last_relaxed = None;
    for _ in 0..=n {
        last_relaxed = None;
        for (e, edge) in edges.iter().enumerate() {
            let candidate = dist[edge.from] + edge.weight + opts.tol;
            if candidate < dist[edge.to] {
                dist[edge.to] = candidate;
                pred[edge.to] = Some(e);
                last_relaxed = Some(edge.to);
            }
        }
        if last_relaxed.is_none() {
            break;
        }
    }

    if let Some(start) = last_relaxed {
        if let Some((cycle, log_gain)) = extract_cycle(start, &pred, &edges, tokens, n) {
            if log_gain > opts.tol * cycle.len() as f64 {
                return Ok(ArbitrageCertificate::Prone { cycle, log_gain });
            }
        }
    }

    // Potentials by spanning-tree propagation from the lexicographically
    // first token of each component. With fees the rates are not reciprocal,
    // so the Bellman-Ford distances (which satisfy every edge) are used.
    let mut adjacency = vec![Vec::new(); n];
    for edge in &edges {
        adjacency[edge.from].push((edge.to, edge.weight));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| tokens[a].cmp(&tokens[b]));
    let mut potential = vec![f64::NAN; n];
    for root in order {
        if !potential[root].is_nan() {
            continue;
        }
        potential[root] = 0.0;
        let mut queue = VecDeque::from([root]);
        while let Some(u) = queue.pop_front() {
            for &(v, w) in &adjacency[u] {
                if potential[v].is_nan() {
                    potential[v] = if opts.fee_aware {
                        potential[root] + dist[v] - dist[root]
                    } else {
                        potential[u] + w
                    };
                    queue.push_back(v);
                }
            }
        }
    }
    let slack = opts.tol * n.max(1) as f64;
    debug_assert!(
        edges
            .iter()
            .all(|e| potential[e.to] <= potential[e.from] + e.weight + slack),
        "valuation inconsistent with spot prices"
    );
    Ok(ArbitrageCertificate::Free {
        valuation: Valuation(
            tokens
                .iter()
                .cloned()
                .zip(potential.into_iter().map(f64::exp))
                .collect(),
        ),
    })
}

fn extract_cycle(
    start: usize,
    pred: &[Option<usize>],
    edges: &[RateEdge],
    tokens: &[TokenId],
    n: usize,
) -> Option<(Vec<CycleHop>, f64)> {
    // Walk back n steps to land inside the cycle.
    let mut v = start;
    for _ in 0..n {
        v = edges[pred[v]?].from;
    }
    let anchor = v;
    let mut rev = Vec::new();
    loop {
        let e = pred[v]?;
        rev.push(e);
        v = edges[e].from;
        if v == anchor {
            break;
        }
        if rev.len() > n {
            return None;
        }
    }
    rev.reverse();
    let log_gain = -rev.iter().map(|&e| edges[e].weight).sum::<f64>();
    let cycle = rev
        .into_iter()
        .map(|e| CycleHop {
            cfmm: edges[e].cfmm,
            token_in: tokens[edges[e].from].clone(),
            token_out: tokens[edges[e].to].clone(),
        })
        .collect();
    Some((cycle, log_gain))
}

/// A trade: sell `amount_in` into pool `into` of CFMM `cfmm`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TradeStep {
    pub cfmm: usize,
    #[serde(with = "crate::decimal")]
    pub amount_in: f64,
    pub into: PoolSide,
}

fn validate_cycle(config: &Configuration, cycle: &[CycleHop]) -> Result<(), ArbitrageError> {
    if cycle.is_empty() {
        return Err(ArbitrageError::InvalidCycle("empty cycle".into()));
    }
    for (k, hop) in cycle.iter().enumerate() {
        let c = config
            .cfmms()
            .get(hop.cfmm)
            .ok_or_else(|| ArbitrageError::InvalidCycle(format!("no cfmm {}", hop.cfmm)))?;
        let trades_pair = (c.tokens[0] == hop.token_in && c.tokens[1] == hop.token_out)
            || (c.tokens[1] == hop.token_in && c.tokens[0] == hop.token_out);
        if !trades_pair {
            return Err(ArbitrageError::InvalidCycle(format!(
                "cfmm {} does not trade {} for {}",
                hop.cfmm, hop.token_in, hop.token_out
            )));
        }
        let next = &cycle[(k + 1) % cycle.len()];
        if hop.token_out != next.token_in {
            return Err(ArbitrageError::InvalidCycle(format!(
                "hop {k} ends in {} but the next hop sells {}",
                hop.token_out, next.token_in
            )));
        }
    }
    Ok(())
}

/// Chains `input` units through the cycle, feeding each output into the
/// next hop. Returns the trades and the final amount received.
pub fn cycle_trades(
    config: &Configuration,
    cycle: &[CycleHop],
    input: f64,
) -> Result<(Vec<TradeStep>, f64), ArbitrageError> {
    validate_cycle(config, cycle)?;
    let mut states: BTreeMap<usize, crate::model::Cfmm> = BTreeMap::new();
    let mut amount = input;
    let mut trades = Vec::with_capacity(cycle.len());
    for hop in cycle {
        let state = states
            .entry(hop.cfmm)
            .or_insert_with(|| config.cfmm(hop.cfmm).clone());
        let into = state.side_of(&hop.token_in).expect("validated");
        let outcome = state.apply_trade(amount, into)?;
        trades.push(TradeStep { cfmm: hop.cfmm, amount_in: amount, into });
        *state = outcome.state;
        amount = outcome.amount_out;
    }
    Ok((trades, amount))
}

/// Profit (in the cycle's first token) of pushing `input` through the cycle.
pub fn cycle_profit(
    config: &Configuration,
    cycle: &[CycleHop],
    input: f64,
) -> Result<f64, ArbitrageError> {
    let (_, out) = cycle_trades(config, cycle, input)?;
    Ok(out - input)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CycleArbitrage {
    pub input: f64,
    pub profit: f64,
}

/// Rotates `cycle` to begin by selling `start`.
pub fn rotate_cycle(cycle: &[CycleHop], start: &TokenId) -> Result<Vec<CycleHop>, ArbitrageError> {
    let k = cycle
        .iter()
        .position(|h| &h.token_in == start)
        .ok_or_else(|| ArbitrageError::InvalidCycle(format!("cycle never sells {start}")))?;
    Ok(cycle[k..].iter().chain(&cycle[..k]).cloned().collect())
}

/// Best single input amount for a cycle, found by a coarse grid followed by
/// golden-section search. Profit is concave in the input for chains of
/// CFMM trades, so the grid only needs to bracket the maximum.
pub fn optimal_cycle_arbitrage(
    config: &Configuration,
    cycle: &[CycleHop],
    start: &TokenId,
) -> Result<CycleArbitrage, ArbitrageError> {
    let cycle = rotate_cycle(cycle, start)?;
    validate_cycle(config, &cycle)?;
    let profit = |x: f64| cycle_profit(config, &cycle, x).ok();

    let first = config.cfmm(cycle[0].cfmm);
    let side = first.side_of(start).expect("validated").index();
    let mut upper = first.pools[side].abs().max(1e-9);

    // Shrink until feasible, then grow until the profit turns down.
    let mut shrinks = 0;
    while profit(upper).is_none() {
        upper *= 0.5;
        shrinks += 1;
        if shrinks > 200 {
            return Err(ArbitrageError::NotProfitable);
        }
    }
    if shrinks == 0 {
        for _ in 0..200 {
            match (profit(upper), profit(2.0 * upper)) {
                (Some(a), Some(b)) if b > a => upper *= 2.0,
                (Some(_), None) => {
                    // Exhaustion boundary lies in (upper, 2 upper).
                    let (mut lo, mut hi) = (upper, 2.0 * upper);
                    for _ in 0..100 {
                        let mid = 0.5 * (lo + hi);
                        if profit(mid).is_some() {
                            lo = mid;
                        } else {
                            hi = mid;
                        }
                    }
                    upper = lo;
                    break;
                }
                _ => {
                    upper *= 2.0;
                    break;
                }
            }
        }
    }

    const GRID: usize = 64;
    let eval = |x: f64| profit(x).unwrap_or(f64::NEG_INFINITY);
    let step = upper / GRID as f64;
    let best = (1..=GRID)
        .map(|k| (k, eval(k as f64 * step)))
        .fold((1, f64::NEG_INFINITY), |acc, cur| if cur.1 > acc.1 { cur } else { acc });

    let mut lo = (best.0 - 1) as f64 * step;
    let mut hi = ((best.0 + 1) as f64 * step).min(upper);
    let ratio = 0.5 * (5f64.sqrt() - 1.0);
    let mut x1 = hi - ratio * (hi - lo);
    let mut x2 = lo + ratio * (hi - lo);
    let (mut f1, mut f2) = (eval(x1), eval(x2));
    while hi - lo > 1e-14 * upper.max(1e-300) {
        if f1 < f2 {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + ratio * (hi - lo);
            f2 = eval(x2);
        } else {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - ratio * (hi - lo);
            f1 = eval(x1);
        }
    }
    let (input, value) = [(x1, f1), (x2, f2), (best.0 as f64 * step, best.1)]
        .into_iter()
        .fold((0.0, f64::NEG_INFINITY), |acc, cur| if cur.1 > acc.1 { cur } else { acc });
    if !(value > 0.0) {
        return Err(ArbitrageError::NotProfitable);
    }
    Ok(CycleArbitrage { input, profit: value })
}

/// Where profit tokens are deposited when converting an arbitrage into a
/// rebalancing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DepositPolicy {
    /// The matching pool whose CFMM has the smallest liquidity, ties by index.
    #[default]
    SmallestLiquidity,
    /// The matching pool of the lowest-indexed CFMM.
    FirstMatch,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArbitrageRebalancing {
    pub config: Configuration,
    pub profit: Basket,
    pub deposits: Vec<(PoolRef, f64)>,
}

/// Replays a profitable trade sequence as direct pool transfers and deposits
/// the profit back into pools, producing a configuration where no CFMM has
/// lost liquidity and at least one has gained.
///
/// Trading fees withheld from a pool are returned to the same pool, so the
/// result conserves every token exactly.
pub fn arbitrage_to_rebalancing(
    config: &Configuration,
    trades: &[TradeStep],
    policy: DepositPolicy,
) -> Result<ArbitrageRebalancing, ArbitrageError> {
    let mut pools = config.pool_pairs();
    let mut basket = Basket::new();
    let mut scale: f64 = 0.0;
    for (k, t) in trades.iter().enumerate() {
        let mut state = config
            .cfmms()
            .get(t.cfmm)
            .ok_or_else(|| ArbitrageError::NotAnArbitrage(format!("trade {k}: no cfmm {}", t.cfmm)))?
            .clone();
        state.pools = pools[t.cfmm];
        let outcome = state.apply_trade(t.amount_in, t.into)?;
        let i = t.into.index();
        pools[t.cfmm] = outcome.state.pools;
        pools[t.cfmm][i] += outcome.fee_revenue;
        basket.add(&state.tokens[i], -t.amount_in);
        basket.add(&state.tokens[1 - i], outcome.amount_out);
        scale = scale.max(t.amount_in).max(outcome.amount_out);
    }
    let dust = 1e-12 * scale;

    let liquidity = |pools: &[[f64; 2]], i: usize| config.cfmm(i).function.value(pools[i]);
    let matching = |token: &TokenId| -> Vec<PoolRef> {
        config
            .pools()
            .filter(|&p| config.token_of(p) == token && !config.cfmm(p.cfmm).is_oracle())
            .collect()
    };

    let mut deposits = Vec::new();
    let mut profitable = false;
    let mut profit = Basket::new();
    for (token, amount) in basket.iter() {
        if amount < -dust {
            return Err(ArbitrageError::NotAnArbitrage(format!(
                "ends short {} of {token}",
                -amount
            )));
        }
        if amount == 0.0 {
            continue;
        }
        let candidates = matching(token);
        if candidates.is_empty() {
            return Err(ArbitrageError::NotAnArbitrage(format!("no pool holds {token}")));
        }
        if amount < 0.0 {
            // Rounding shortfall: settle it from the deepest matching pool.
            let target = candidates
                .iter()
                .copied()
                .max_by(|a, b| liquidity(&pools, a.cfmm).total_cmp(&liquidity(&pools, b.cfmm)))
                .expect("non-empty");
            pools[target.cfmm][target.pool.index()] += amount;
            continue;
        }
        if amount > dust {
            profitable = true;
        }
        profit.set(token, amount);
        let target = match policy {
            DepositPolicy::FirstMatch => candidates[0],
            DepositPolicy::SmallestLiquidity => candidates
                .iter()
                .copied()
                .min_by(|a, b| {
                    liquidity(&pools, a.cfmm)
                        .total_cmp(&liquidity(&pools, b.cfmm))
                        .then(a.cmp(b))
                })
                .expect("non-empty"),
        };
        pools[target.cfmm][target.pool.index()] += amount;
        deposits.push((target, amount));
    }
    if !profitable {
        return Err(ArbitrageError::NotAnArbitrage("no token ends in profit".into()));
    }
    let next = config.with_pools(&pools)?;
    Ok(ArbitrageRebalancing { config: next, profit, deposits })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Cfmm;

    fn triangle() -> Configuration {
        Configuration::from_cfmms(vec![
            Cfmm::constant_product("EUR", 1.0, "USD", 3.0),
            Cfmm::constant_product("GBP", 1.0, "EUR", 3.0),
            Cfmm::constant_product("USD", 1.0, "GBP", 3.0),
        ])
        .unwrap()
    }

    fn hop(cfmm: usize, a: &str, b: &str) -> CycleHop {
        CycleHop { cfmm, token_in: a.into(), token_out: b.into() }
    }

    fn alice() -> Vec<CycleHop> {
        vec![hop(2, "USD", "GBP"), hop(1, "GBP", "EUR"), hop(0, "EUR", "USD")]
    }

    #[test]
    fn triangle_is_prone_with_rate_27() {
        let cert = detect(&triangle(), &DetectOptions::default()).unwrap();
        let ArbitrageCertificate::Prone { cycle, log_gain } = cert else {
            panic!("expected prone");
        };
        assert!((log_gain - 27f64.ln()).abs() < 1e-12);
        let rotated = rotate_cycle(&cycle, &"USD".into()).unwrap();
        assert_eq!(rotated, alice());
    }

    #[test]
    fn rebalanced_triangle_is_free() {
        let config = Configuration::from_cfmms(vec![
            Cfmm::constant_product("EUR", 2.0, "USD", 2.0),
            Cfmm::constant_product("GBP", 2.0, "EUR", 2.0),
            Cfmm::constant_product("USD", 2.0, "GBP", 2.0),
        ])
        .unwrap();
        let ArbitrageCertificate::Free { valuation } =
            detect(&config, &DetectOptions::default()).unwrap()
        else {
            panic!("expected free");
        };
        for t in ["EUR", "GBP", "USD"] {
            assert!((valuation.get(&t.into()).unwrap() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn single_cfmm_valuation_matches_spot() {
        let config =
            Configuration::from_cfmms(vec![Cfmm::constant_product("A", 2.0, "B", 5.0)]).unwrap();
        let ArbitrageCertificate::Free { valuation } =
            detect(&config, &DetectOptions::default()).unwrap()
        else {
            panic!("expected free");
        };
        assert_eq!(valuation.get(&"A".into()), Some(1.0));
        let ratio = valuation.get(&"A".into()).unwrap() / valuation.get(&"B".into()).unwrap();
        assert!((ratio - 2.5).abs() < 1e-12);
    }

    #[test]
    fn components_get_independent_numeraires() {
        let config = Configuration::from_cfmms(vec![
            Cfmm::constant_product("A", 1.0, "B", 4.0),
            Cfmm::constant_product("C", 3.0, "D", 1.0),
        ])
        .unwrap();
        let ArbitrageCertificate::Free { valuation } =
            detect(&config, &DetectOptions::default()).unwrap()
        else {
            panic!("expected free");
        };
        assert_eq!(valuation.get(&"A".into()), Some(1.0));
        assert_eq!(valuation.get(&"C".into()), Some(1.0));
        assert!((valuation.get(&"B".into()).unwrap() - 0.25).abs() < 1e-12);
        assert!((valuation.get(&"D".into()).unwrap() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn parallel_pools_at_different_prices_are_prone() {
        let config = Configuration::from_cfmms(vec![
            Cfmm::constant_product("A", 1.0, "B", 1.0),
            Cfmm::constant_product("A", 1.0, "B", 1.1),
        ])
        .unwrap();
        let ArbitrageCertificate::Prone { cycle, log_gain } =
            detect(&config, &DetectOptions::default()).unwrap()
        else {
            panic!("expected prone");
        };
        assert_eq!(cycle.len(), 2);
        assert!((log_gain - 1.1f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn fees_can_hide_small_mispricings() {
        let config = Configuration::from_cfmms(vec![
            Cfmm::constant_product("A", 1.0, "B", 1.0).with_fee(0.99),
            Cfmm::constant_product("A", 1.0, "B", 1.015).with_fee(0.99),
        ])
        .unwrap();
        assert!(!detect(&config, &DetectOptions::default()).unwrap().is_free());
        let fee_aware = DetectOptions { fee_aware: true, ..Default::default() };
        assert!(detect(&config, &fee_aware).unwrap().is_free());
    }

    #[test]
    fn alice_profit_at_one_dollar() {
        let profit = cycle_profit(&triangle(), &alice(), 1.0).unwrap();
        assert!((profit - 13.0 / 14.0).abs() < 1e-12);
    }

    #[test]
    fn optimal_cycle_input_matches_brute_force() {
        // Brute-force oracle on the explicit chain of constant-product trades.
        let chain = |x: f64| {
            let gbp = 3.0 * x / (1.0 + x);
            let eur = 3.0 * gbp / (1.0 + gbp);
            3.0 * eur / (1.0 + eur) - x
        };
        let (mut best_x, mut best) = (0.0, f64::NEG_INFINITY);
        for k in 1..=2_000_000 {
            let x = k as f64 * 1e-6;
            let p = chain(x);
            if p > best {
                best = p;
                best_x = x;
            }
        }
        let found = optimal_cycle_arbitrage(&triangle(), &alice(), &"USD".into()).unwrap();
        assert!(found.profit >= 13.0 / 14.0);
        assert!((found.profit - best).abs() < 1e-9 * best, "{} vs {best}", found.profit);
        assert!((found.input - best_x).abs() < 2e-6);
        // Frozen from the grid above.
        assert!((found.profit - 1.354_438_088_814_364).abs() < 1e-9);
    }

    #[test]
    fn consistent_prices_are_not_profitable() {
        let config = Configuration::from_cfmms(vec![
            Cfmm::constant_product("EUR", 2.0, "USD", 2.0),
            Cfmm::constant_product("GBP", 2.0, "EUR", 2.0),
            Cfmm::constant_product("USD", 2.0, "GBP", 2.0),
        ])
        .unwrap();
        assert_eq!(
            optimal_cycle_arbitrage(&config, &alice(), &"USD".into()),
            Err(ArbitrageError::NotProfitable)
        );
    }

    #[test]
    fn rejects_broken_cycles() {
        let bad = vec![hop(2, "USD", "GBP"), hop(0, "EUR", "USD")];
        assert!(matches!(
            cycle_profit(&triangle(), &bad, 1.0),
            Err(ArbitrageError::InvalidCycle(_))
        ));
        assert!(matches!(
            optimal_cycle_arbitrage(&triangle(), &alice(), &"JPY".into()),
            Err(ArbitrageError::InvalidCycle(_))
        ));
    }

    #[test]
    fn alice_sequence_improves_liquidity() {
        let config = triangle();
        let (trades, _) = cycle_trades(&config, &alice(), 1.0).unwrap();
        let result = arbitrage_to_rebalancing(&config, &trades, DepositPolicy::default()).unwrap();
        let after = result.config.liquidities();
        assert!(after.iter().all(|&k| k >= 3.0 * (1.0 - 1e-10)));
        assert!(after.iter().any(|&k| k > 3.0 + 1e-9));
        assert!((result.profit.get(&"USD".into()) - 13.0 / 14.0).abs() < 1e-12);
        for t in config.tokens() {
            assert!((result.config.token_total(t) - config.token_total(t)).abs() < 1e-12);
        }
    }

    #[test]
    fn literal_trade_amounts_are_accepted() {
        let trades = [
            TradeStep { cfmm: 2, amount_in: 1.0, into: PoolSide::First },
            TradeStep { cfmm: 1, amount_in: 1.5, into: PoolSide::First },
            TradeStep { cfmm: 0, amount_in: 1.8, into: PoolSide::First },
        ];
        let result =
            arbitrage_to_rebalancing(&triangle(), &trades, DepositPolicy::FirstMatch).unwrap();
        assert!(result.config.liquidities().iter().all(|&k| k >= 3.0 * (1.0 - 1e-10)));
        assert_eq!(result.deposits.len(), 1);
        assert_eq!(result.deposits[0].0, PoolRef::new(0, PoolSide::Second));
    }

    #[test]
    fn non_arbitrage_sequences_are_rejected() {
        let config = triangle();
        assert!(matches!(
            arbitrage_to_rebalancing(&config, &[], DepositPolicy::default()),
            Err(ArbitrageError::NotAnArbitrage(_))
        ));
        // The reverse cycle $ -> € -> £ -> $ loses money.
        let reverse = vec![hop(0, "USD", "EUR"), hop(1, "EUR", "GBP"), hop(2, "GBP", "USD")];
        assert!(cycle_profit(&config, &reverse, 1.0).unwrap() < 0.0);
        let (trades, _) = cycle_trades(&config, &reverse, 1.0).unwrap();
        assert!(matches!(
            arbitrage_to_rebalancing(&config, &trades, DepositPolicy::default()),
            Err(ArbitrageError::NotAnArbitrage(_))
        ));
    }
}
