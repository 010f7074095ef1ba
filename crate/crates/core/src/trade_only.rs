//! Arbitrage protection using liquidity-preserving trades alone.
//!
//! Each CFMM is moved along its level set to a point whose spot price
//! matches a common valuation `V`. Tokens that the trades cannot cover are
//! injected or withdrawn through per-token slack `σ` (positive means
//! withdrawn), and the sum of squared slacks is minimized. Parameterizing by
//! `u = ln V` turns the constrained program into an unconstrained one over
//! `u`, with the reference token's `u` fixed at zero.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use thiserror::Error;

use crate::arbitrage::Valuation;
use crate::model::{Basket, Configuration, TokenId, TradingFunction};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TradeOnlyError {
    #[error("invalid problem: {0}")]
    InvalidProblem(String),
    #[error("no start reached a feasible point")]
    NoFeasiblePoint,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TradeOnlyOptions {
    pub starts: usize,
    pub max_iter: usize,
    /// Half-width of the start box around the current prices, in log units.
    pub spread: f64,
    /// Gradient norm at which a start counts as converged.
    pub tol: f64,
}

impl Default for TradeOnlyOptions {
    fn default() -> Self {
        TradeOnlyOptions { starts: 16, max_iter: 200, spread: 2.0, tol: 1e-12 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TradeOnlySolution {
    #[serde(with = "pool_list")]
    pub final_pools: Vec<[f64; 2]>,
    pub sigma: Basket,
    pub valuation: Valuation,
    #[serde(with = "crate::decimal")]
    pub objective: f64,
    /// Index of the start that produced the reported optimum.
    pub start: usize,
    pub iterations: usize,
    #[serde(with = "crate::decimal")]
    pub gradient_norm: f64,
}

mod pool_list {
    use serde::ser::SerializeSeq;
    use serde::Serializer;

    pub fn serialize<S: Serializer>(pools: &[[f64; 2]], s: S) -> Result<S::Ok, S::Error> {
        let mut seq = s.serialize_seq(Some(pools.len()))?;
        for p in pools {
            seq.serialize_element(&[crate::decimal::to_string(p[0]), crate::decimal::to_string(p[1])])?;
        }
        seq.end()
    }
}

struct Network<'a> {
    config: &'a Configuration,
    /// Token index of both pools of each CFMM.
    sides: Vec<[usize; 2]>,
    totals: Vec<f64>,
    /// Token whose log valuation stays at zero.
    reference: usize,
}

struct Eval {
    value: f64,
    grad: DVector<f64>,
    hess: DMatrix<f64>,
    pools: Vec<[f64; 2]>,
    sigma: Vec<f64>,
}

impl<'a> Network<'a> {
    fn new(config: &'a Configuration) -> Result<Self, TradeOnlyError> {
        if config.is_empty() {
            return Err(TradeOnlyError::InvalidProblem("no cfmms".into()));
        }
        let tokens = config.tokens();
        let index: BTreeMap<&TokenId, usize> = tokens.iter().enumerate().map(|(n, t)| (t, n)).collect();
        let mut sides = Vec::with_capacity(config.len());
        for (i, c) in config.cfmms().iter().enumerate() {
            if matches!(c.function, TradingFunction::Linear { .. }) {
                return Err(TradeOnlyError::InvalidProblem(format!(
                    "cfmm {i} has a linear trading function, whose price cannot move"
                )));
            }
            sides.push([index[&c.tokens[0]], index[&c.tokens[1]]]);
        }

        let mut parent: Vec<usize> = (0..tokens.len()).collect();
        fn root(parent: &mut [usize], mut x: usize) -> usize {
            while parent[x] != x {
                parent[x] = parent[parent[x]];
                x = parent[x];
            }
            x
        }
        for &[a, b] in &sides {
            let (ra, rb) = (root(&mut parent, a), root(&mut parent, b));
            parent[ra] = rb;
        }
        let used: Vec<usize> = (0..tokens.len()).filter(|&t| sides.iter().any(|s| s.contains(&t))).collect();
        let first = root(&mut parent, used[0]);
        if used.iter().any(|&t| root(&mut parent, t) != first) {
            return Err(TradeOnlyError::InvalidProblem("cfmm graph is not connected".into()));
        }
        let reference = *used.iter().min_by_key(|&&t| &tokens[t]).expect("some token is used");
        let totals = tokens.iter().map(|t| config.token_total(t)).collect();
        Ok(Network { config, sides, totals, reference })
    }

    fn dim(&self) -> usize {
        self.totals.len()
    }

    /// Objective, gradient and Hessian over all log valuations; the
    /// reference coordinate is removed by the caller.
    fn eval(&self, u: &[f64]) -> Option<Eval> {
        let n = self.dim();
        let mut sigma = self.totals.clone();
        // d sigma_t / d u, and per-CFMM curvature terms d^2 x / d lp^2
        let mut jac: DMatrix<f64> = DMatrix::zeros(n, n);
        let mut curvature: Vec<(usize, [usize; 2], f64)> = Vec::new();
        let mut pools = Vec::with_capacity(self.sides.len());
        for (c, &[a, b]) in self.config.cfmms().iter().zip(&self.sides) {
            let (x, d) = c.function.point_at_price(c.liquidity(), u[a] - u[b])?;
            if !x.iter().all(|v| v.is_finite() && *v > 0.0) {
                return None;
            }
            for (j, token) in [(0, a), (1, b)] {
                sigma[token] -= x[j];
                let slope = x[j] * d[j];
                jac[(token, a)] -= slope;
                jac[(token, b)] += slope;
                curvature.push((token, [a, b], x[j] * d[j] * d[j]));
            }
            pools.push(x);
        }
        let s = DVector::from_vec(sigma.clone());
        let value = s.norm_squared();
        let grad = 2.0 * jac.transpose() * &s;
        let mut hess = 2.0 * jac.transpose() * &jac;
        for (token, [a, b], second) in curvature {
            // d^2 sigma_t = -second * e e^T with e = e_a - e_b
            let w = -2.0 * sigma[token] * second;
            hess[(a, a)] += w;
            hess[(b, b)] += w;
            hess[(a, b)] -= w;
            hess[(b, a)] -= w;
        }
        value.is_finite().then_some(Eval { value, grad, hess, pools, sigma })
    }

    fn reduce(&self, e: &Eval) -> (DVector<f64>, DMatrix<f64>) {
        let keep: Vec<usize> = (0..self.dim()).filter(|&t| t != self.reference).collect();
        let g = DVector::from_iterator(keep.len(), keep.iter().map(|&t| e.grad[t]));
        let h = DMatrix::from_fn(keep.len(), keep.len(), |r, c| e.hess[(keep[r], keep[c])]);
        (g, h)
    }

    fn expand(&self, reduced: &DVector<f64>) -> Vec<f64> {
        let mut u = Vec::with_capacity(self.dim());
        let mut it = reduced.iter();
        for t in 0..self.dim() {
            u.push(if t == self.reference { 0.0 } else { *it.next().expect("reduced length") });
        }
        u
    }

    /// Log valuation that best fits the current spot prices.
    fn current_prices(&self) -> Vec<f64> {
        let keep: Vec<usize> = (0..self.dim()).filter(|&t| t != self.reference).collect();
        let col = |t: usize| keep.iter().position(|&k| k == t);
        let mut m = DMatrix::zeros(self.sides.len(), keep.len());
        let mut rhs = DVector::zeros(self.sides.len());
        for (row, (c, &[a, b])) in self.config.cfmms().iter().zip(&self.sides).enumerate() {
            if let Some(j) = col(a) {
                m[(row, j)] += 1.0;
            }
            if let Some(j) = col(b) {
                m[(row, j)] -= 1.0;
            }
            rhs[row] = c.spot_price().map_or(0.0, f64::ln);
        }
        let fit = m.svd(true, true).solve(&rhs, 1e-12).unwrap_or_else(|_| DVector::zeros(keep.len()));
        self.expand(&fit)
    }
}

/// Van der Corput radical inverse of `k` in base `base`.
fn radical_inverse(mut k: usize, base: usize) -> f64 {
    let mut inv = 1.0 / base as f64;
    let mut out = 0.0;
    while k > 0 {
        out += (k % base) as f64 * inv;
        k /= base;
        inv /= base as f64;
    }
    out
}

fn primes(count: usize) -> Vec<usize> {
    let mut found: Vec<usize> = Vec::with_capacity(count);
    let mut candidate = 2;
    while found.len() < count {
        if found.iter().all(|p| candidate % p != 0) {
            found.push(candidate);
        }
        candidate += 1;
    }
    found
}

struct Local {
    value: f64,
    u: Vec<f64>,
    iterations: usize,
    gradient_norm: f64,
}

/// Damped Newton descent from `u0`; the Hessian is shifted until it is
/// positive definite and the step decreases the objective.
fn descend(net: &Network, u0: Vec<f64>, opts: &TradeOnlyOptions) -> Option<Local> {
    let mut u = u0;
    let mut e = net.eval(&u)?;
    let mut iterations = 0;
    let mut shift = 0.0f64;
    for _ in 0..opts.max_iter {
        let (g, h) = net.reduce(&e);
        if g.amax() <= opts.tol * e.value.max(1.0) {
            break;
        }
        iterations += 1;
        let scale = h.diagonal().amax().max(1e-12);
        let mut moved = false;
        while shift <= 1e12 * scale {
            let shifted = &h + DMatrix::identity(h.nrows(), h.ncols()) * shift;
            if let Some(chol) = shifted.cholesky() {
                let step = chol.solve(&(-&g));
                let mut alpha = 1.0;
                while alpha > 1e-10 {
                    let reduced: Vec<f64> = u.iter().enumerate().filter(|&(t, _)| t != net.reference).map(|(_, v)| *v).collect();
                    let trial = net.expand(&(DVector::from_vec(reduced) + alpha * &step));
                    if let Some(te) = net.eval(&trial) {
                        if te.value <= e.value + 1e-4 * alpha * g.dot(&step) {
                            u = trial;
                            e = te;
                            moved = true;
                            break;
                        }
                    }
                    alpha *= 0.5;
                }
                if moved {
                    shift /= 10.0;
                    if shift < 1e-14 * scale {
                        shift = 0.0;
                    }
                    break;
                }
            }
            shift = if shift == 0.0 { 1e-10 * scale } else { shift * 10.0 };
        }
        if !moved {
            break;
        }
    }
    let (g, _) = net.reduce(&e);
    Some(Local { value: e.value, u, iterations, gradient_norm: g.amax() })
}

/// Minimizes the squared slack needed to reach an arbitrage-free
/// configuration by trades. Starts follow a Halton sequence around the
/// current prices; the best local optimum wins, ties going to the earlier
/// start.
pub fn solve_trade_only(config: &Configuration, opts: &TradeOnlyOptions) -> Result<TradeOnlySolution, TradeOnlyError> {
    if opts.starts == 0 {
        return Err(TradeOnlyError::InvalidProblem("at least one start is required".into()));
    }
    let net = Network::new(config)?;
    let base = net.current_prices();
    let bases = primes(net.dim());
    let mut best: Option<(usize, Local)> = None;
    for start in 0..opts.starts {
        let u0: Vec<f64> = base
            .iter()
            .enumerate()
            .map(|(t, &v)| {
                if t == net.reference || start == 0 {
                    v
                } else {
                    v + opts.spread * (2.0 * radical_inverse(start, bases[t]) - 1.0)
                }
            })
            .collect();
        let Some(local) = descend(&net, u0, opts) else { continue };
        log::debug!("trade-only start {start}: objective {:e} after {} steps", local.value, local.iterations);
        if best.as_ref().is_none_or(|(_, b)| local.value < b.value) {
            best = Some((start, local));
        }
    }
    let (start, local) = best.ok_or(TradeOnlyError::NoFeasiblePoint)?;
    let e = net.eval(&local.u).ok_or(TradeOnlyError::NoFeasiblePoint)?;
    let tokens = config.tokens();
    let mut sigma = Basket::new();
    for (t, s) in tokens.iter().zip(&e.sigma) {
        sigma.set(t, *s);
    }
    let prices = tokens
        .iter()
        .enumerate()
        .filter(|&(t, _)| net.sides.iter().any(|s| s.contains(&t)))
        .map(|(t, token)| (token.clone(), local.u[t].exp()))
        .collect();
    Ok(TradeOnlySolution {
        final_pools: e.pools,
        sigma,
        valuation: Valuation::from_map(prices),
        objective: e.value,
        start,
        iterations: local.iterations,
        gradient_norm: local.gradient_norm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arbitrage::{detect, DetectOptions};
    use crate::model::{Cfmm, Mode};

    fn triangle() -> Configuration {
        Configuration::from_cfmms(vec![
            Cfmm::constant_product("EUR", 1.0, "USD", 3.0),
            Cfmm::constant_product("GBP", 1.0, "EUR", 3.0),
            Cfmm::constant_product("USD", 1.0, "GBP", 3.0),
        ])
        .unwrap()
    }

    #[test]
    fn triangle_needs_symmetric_withdrawal() {
        let expected = 4.0 - 2.0 * 3f64.sqrt();
        let sol = solve_trade_only(&triangle(), &TradeOnlyOptions::default()).unwrap();
        for (_, s) in sol.sigma.iter() {
            assert!((s - expected).abs() < 1e-9, "{:?}", sol.sigma);
        }
        assert!((sol.objective - 3.0 * expected * expected).abs() < 1e-9);
        assert!(sol.objective > 0.1);
    }

    /// Independent grid over the two free log prices: each CFMM's pools
    /// follow from the price and its invariant, slack from conservation.
    #[test]
    fn triangle_optimum_matches_grid_search() {
        let objective = |ue: f64, ug: f64| -> f64 {
            // USD is the reference; prices of EUR and GBP in USD
            let point = |k: f64, lp: f64| {
                let x1 = (k / lp.exp()).sqrt();
                [x1, k / x1]
            };
            let a = point(3.0, ue);
            let b = point(3.0, ug - ue);
            let c = point(3.0, -ug);
            let eur = 1.0 + 3.0 - a[0] - b[1];
            let usd = 3.0 + 1.0 - a[1] - c[0];
            let gbp = 1.0 + 3.0 - b[0] - c[1];
            eur * eur + usd * usd + gbp * gbp
        };
        let mut best = f64::INFINITY;
        let n = 600;
        for i in 0..=n {
            for j in 0..=n {
                let ue = -3.0 + 6.0 * i as f64 / n as f64;
                let ug = -3.0 + 6.0 * j as f64 / n as f64;
                best = best.min(objective(ue, ug));
            }
        }
        let sol = solve_trade_only(&triangle(), &TradeOnlyOptions::default()).unwrap();
        assert!(sol.objective <= best + 1e-12);
        assert!(best - sol.objective < 1e-3);
    }

    #[test]
    fn trades_preserve_liquidity_and_remove_arbitrage() {
        let config = triangle();
        let sol = solve_trade_only(&config, &TradeOnlyOptions::default()).unwrap();
        for (c, p) in config.cfmms().iter().zip(&sol.final_pools) {
            assert!((c.function.value(*p) / c.liquidity() - 1.0).abs() < 1e-12);
        }
        let done = config.with_pools(&sol.final_pools).unwrap();
        let opts = DetectOptions { tol: 1e-6, ..DetectOptions::default() };
        assert!(detect(&done, &opts).unwrap().is_free());
    }

    #[test]
    fn arbitrage_free_configuration_needs_no_slack() {
        let config = triangle().with_pools(&[[2.0, 2.0]; 3]).unwrap();
        let sol = solve_trade_only(&config, &TradeOnlyOptions::default()).unwrap();
        assert!(sol.objective < 1e-20);
        for (c, p) in config.cfmms().iter().zip(&sol.final_pools) {
            assert!((p[0] - c.pools[0]).abs() < 1e-9 && (p[1] - c.pools[1]).abs() < 1e-9);
        }
    }

    #[test]
    fn same_pair_at_equal_prices_needs_no_slack() {
        let config = Configuration::from_cfmms(vec![
            Cfmm::constant_product("USD", 1.0, "EUR", 2.0),
            Cfmm::constant_product("USD", 5.0, "EUR", 10.0),
        ])
        .unwrap();
        assert!(detect(&config, &DetectOptions::default()).unwrap().is_free());
        let sol = solve_trade_only(&config, &TradeOnlyOptions::default()).unwrap();
        assert!(sol.objective < 1e-20);
    }

    #[test]
    fn deterministic_and_below_trivial_bound() {
        let config = triangle();
        let a = solve_trade_only(&config, &TradeOnlyOptions::default()).unwrap();
        let b = solve_trade_only(&config, &TradeOnlyOptions::default()).unwrap();
        assert_eq!(a, b);
        let bound: f64 = config.tokens().iter().map(|t| config.token_total(t).powi(2)).sum();
        assert!(a.objective <= bound);
    }

    #[test]
    fn linear_and_disconnected_inputs_are_rejected() {
        let oracle = Cfmm::new(["USD".into(), "GBP".into()], [1.0, 3.0], TradingFunction::Linear { a: 1.0, b: 1.0 })
            .with_mode(Mode::Oracle);
        let config = Configuration::from_cfmms(vec![Cfmm::constant_product("EUR", 1.0, "USD", 3.0), oracle]).unwrap();
        assert!(matches!(
            solve_trade_only(&config, &TradeOnlyOptions::default()),
            Err(TradeOnlyError::InvalidProblem(_))
        ));
        let split = Configuration::from_cfmms(vec![
            Cfmm::constant_product("A", 1.0, "B", 3.0),
            Cfmm::constant_product("C", 1.0, "D", 3.0),
        ])
        .unwrap();
        assert!(solve_trade_only(&split, &TradeOnlyOptions::default()).is_err());
    }
}
