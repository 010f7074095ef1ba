//! Tokens, trading functions, CFMM states and configurations.
//!
//! Amounts are `f64` token units. A CFMM always owns exactly two pools; pool
//! indices are zero-based (`PoolSide::First` is pool 0).

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid configuration: {0}")]
    InvalidConfiguration(String),
    #[error("gradient undefined or non-positive for cfmm state ({0}, {1})")]
    UndefinedGradient(f64, f64),
    #[error("trade would exhaust the output pool (need {needed}, pool holds {available})")]
    PoolExhausted { needed: f64, available: f64 },
    #[error("trade amount must be positive and finite, got {0}")]
    InvalidAmount(f64),
    #[error("infeasible rebalancing: {0}")]
    InfeasibleRebalancing(String),
    #[error("edge {0} is not valid for this configuration")]
    InvalidEdge(Edge),
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenId(String);

impl TokenId {
    pub fn new(symbol: impl Into<String>) -> Self {
        TokenId(symbol.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for TokenId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for TokenId {
    fn from(s: &str) -> Self {
        TokenId::new(s)
    }
}

/// Invariant `F(x1, x2)` of a two-pool market maker.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TradingFunction {
    /// `x1 * x2`
    ConstantProduct,
    /// `x1^w1 * x2^w2` with `w1 + w2 = 1`
    WeightedGeometricMean { w1: f64, w2: f64 },
    /// `a * x1 + b * x2`, used for price oracles
    Linear { a: f64, b: f64 },
}

impl TradingFunction {
    pub fn validate(&self) -> Result<(), ModelError> {
        match *self {
            TradingFunction::ConstantProduct => Ok(()),
            TradingFunction::WeightedGeometricMean { w1, w2 } => {
                if !(w1 > 0.0 && w2 > 0.0) || ((w1 + w2) - 1.0).abs() > 1e-12 {
                    return Err(ModelError::InvalidConfiguration(format!(
                        "weighted geometric mean needs positive weights summing to 1, got ({w1}, {w2})"
                    )));
                }
                Ok(())
            }
            TradingFunction::Linear { a, b } => {
                if !(a > 0.0 && b > 0.0 && a.is_finite() && b.is_finite()) {
                    return Err(ModelError::InvalidConfiguration(format!(
                        "linear coefficients must be positive, got ({a}, {b})"
                    )));
                }
                Ok(())
            }
        }
    }

    pub fn value(&self, x: [f64; 2]) -> f64 {
        match *self {
            TradingFunction::ConstantProduct => x[0] * x[1],
            TradingFunction::WeightedGeometricMean { w1, w2 } => x[0].powf(w1) * x[1].powf(w2),
            TradingFunction::Linear { a, b } => a * x[0] + b * x[1],
        }
    }

    pub fn gradient(&self, x: [f64; 2]) -> [f64; 2] {
        match *self {
            TradingFunction::ConstantProduct => [x[1], x[0]],
            TradingFunction::WeightedGeometricMean { w1, w2 } => {
                let f = self.value(x);
                [w1 * f / x[0], w2 * f / x[1]]
            }
            TradingFunction::Linear { a, b } => [a, b],
        }
    }

    pub fn log_value(&self, x: [f64; 2]) -> f64 {
        match *self {
            TradingFunction::ConstantProduct => x[0].ln() + x[1].ln(),
            TradingFunction::WeightedGeometricMean { w1, w2 } => w1 * x[0].ln() + w2 * x[1].ln(),
            TradingFunction::Linear { .. } => self.value(x).ln(),
        }
    }

    pub fn log_gradient(&self, x: [f64; 2]) -> [f64; 2] {
        match *self {
            TradingFunction::ConstantProduct => [1.0 / x[0], 1.0 / x[1]],
            TradingFunction::WeightedGeometricMean { w1, w2 } => [w1 / x[0], w2 / x[1]],
            TradingFunction::Linear { a, b } => {
                let f = self.value(x);
                [a / f, b / f]
            }
        }
    }

    pub fn log_hessian(&self, x: [f64; 2]) -> [[f64; 2]; 2] {
        match *self {
            TradingFunction::ConstantProduct => {
                [[-1.0 / (x[0] * x[0]), 0.0], [0.0, -1.0 / (x[1] * x[1])]]
            }
            TradingFunction::WeightedGeometricMean { w1, w2 } => {
                [[-w1 / (x[0] * x[0]), 0.0], [0.0, -w2 / (x[1] * x[1])]]
            }
            TradingFunction::Linear { a, b } => {
                let f = self.value(x);
                let f2 = f * f;
                [[-a * a / f2, -a * b / f2], [-a * b / f2, -b * b / f2]]
            }
        }
    }

    /// Point on the level set `F = liquidity` whose spot price (token 1 in
    /// token 2) is `exp(log_price)`, together with `d log x_j / d log_price`.
    /// Undefined for linear functions, whose price never moves.
    pub fn point_at_price(&self, liquidity: f64, log_price: f64) -> Option<([f64; 2], [f64; 2])> {
        let (w1, w2) = match *self {
            TradingFunction::ConstantProduct => (1.0, 1.0),
            TradingFunction::WeightedGeometricMean { w1, w2 } => (w1, w2),
            TradingFunction::Linear { .. } => return None,
        };
        // x2 / x1 = p * w2 / w1, and x1^w1 x2^w2 = k.
        let log_ratio = log_price + (w2 / w1).ln();
        let total = w1 + w2;
        let log_x1 = (liquidity.ln() - w2 * log_ratio) / total;
        let log_x2 = log_x1 + log_ratio;
        Some(([log_x1.exp(), log_x2.exp()], [-w2 / total, w1 / total]))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Active,
    Passive,
    Oracle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum PoolSide {
    First,
    Second,
}

impl PoolSide {
    pub fn index(self) -> usize {
        match self {
            PoolSide::First => 0,
            PoolSide::Second => 1,
        }
    }

    pub fn from_index(index: usize) -> Option<Self> {
        match index {
            0 => Some(PoolSide::First),
            1 => Some(PoolSide::Second),
            _ => None,
        }
    }

    pub fn other(self) -> Self {
        match self {
            PoolSide::First => PoolSide::Second,
            PoolSide::Second => PoolSide::First,
        }
    }
}

impl Serialize for PoolSide {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_u8(self.index() as u8)
    }
}

impl<'de> Deserialize<'de> for PoolSide {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let raw = u8::deserialize(deserializer)?;
        PoolSide::from_index(raw as usize)
            .ok_or_else(|| serde::de::Error::custom(format!("pool index must be 0 or 1, got {raw}")))
    }
}

/// State of one CFMM.
#[derive(Debug, Clone, PartialEq)]
pub struct Cfmm {
    pub pools: [f64; 2],
    pub tokens: [TokenId; 2],
    pub function: TradingFunction,
    /// Fraction of an incoming amount credited to the pool, in `(0, 1]`.
    pub fee: f64,
    pub mode: Mode,
}

/// Result of a trade against a CFMM.
#[derive(Debug, Clone, PartialEq)]
pub struct TradeOutcome {
    pub amount_out: f64,
    /// `(1 - fee) * amount_in`, kept outside the pools.
    pub fee_revenue: f64,
    pub state: Cfmm,
}

impl Cfmm {
    pub fn new(
        tokens: [TokenId; 2],
        pools: [f64; 2],
        function: TradingFunction,
    ) -> Self {
        Cfmm {
            pools,
            tokens,
            function,
            fee: 1.0,
            mode: Mode::Active,
        }
    }

    pub fn constant_product(t1: &str, x1: f64, t2: &str, x2: f64) -> Self {
        Cfmm::new([t1.into(), t2.into()], [x1, x2], TradingFunction::ConstantProduct)
    }

    pub fn with_mode(mut self, mode: Mode) -> Self {
        self.mode = mode;
        self
    }

    pub fn with_fee(mut self, fee: f64) -> Self {
        self.fee = fee;
        self
    }

    pub fn is_oracle(&self) -> bool {
        self.mode == Mode::Oracle
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        self.function.validate()?;
        if self.tokens[0] == self.tokens[1] {
            return Err(ModelError::InvalidConfiguration(format!(
                "cfmm trades {} against itself",
                self.tokens[0]
            )));
        }
        if !(self.fee > 0.0 && self.fee <= 1.0) {
            return Err(ModelError::InvalidConfiguration(format!(
                "fee must lie in (0, 1], got {}",
                self.fee
            )));
        }
        if self.pools.iter().any(|x| !x.is_finite()) {
            return Err(ModelError::InvalidConfiguration("non-finite pool".into()));
        }
        if self.is_oracle() {
            if !matches!(self.function, TradingFunction::Linear { .. }) {
                return Err(ModelError::InvalidConfiguration(
                    "oracle market makers must use a linear trading function".into(),
                ));
            }
        } else {
            if self.pools.iter().any(|&x| x <= 0.0) {
                return Err(ModelError::InvalidConfiguration(format!(
                    "pools must be strictly positive, got ({}, {})",
                    self.pools[0], self.pools[1]
                )));
            }
            if self.liquidity() <= 0.0 {
                return Err(ModelError::InvalidConfiguration("non-positive liquidity".into()));
            }
        }
        Ok(())
    }

    pub fn liquidity(&self) -> f64 {
        self.function.value(self.pools)
    }

    /// Units of token 2 per unit of token 1 at the margin.
    pub fn spot_price(&self) -> Result<f64, ModelError> {
        let [g1, g2] = self.function.gradient(self.pools);
        if !(g1 > 0.0 && g2 > 0.0 && g1.is_finite() && g2.is_finite()) {
            return Err(ModelError::UndefinedGradient(self.pools[0], self.pools[1]));
        }
        Ok(g1 / g2)
    }

    pub fn side_of(&self, token: &TokenId) -> Option<PoolSide> {
        if &self.tokens[0] == token {
            Some(PoolSide::First)
        } else if &self.tokens[1] == token {
            Some(PoolSide::Second)
        } else {
            None
        }
    }

    /// Sells `amount_in` into the pool on `into`; the pool is credited
    /// `fee * amount_in` and the invariant is held fixed.
    pub fn apply_trade(&self, amount_in: f64, into: PoolSide) -> Result<TradeOutcome, ModelError> {
        if !(amount_in > 0.0 && amount_in.is_finite()) {
            return Err(ModelError::InvalidAmount(amount_in));
        }
        let i = into.index();
        let o = into.other().index();
        let x_in = self.pools[i];
        let x_out = self.pools[o];
        let credited = self.fee * amount_in;

        let amount_out = match self.function {
            TradingFunction::ConstantProduct => x_out * credited / (x_in + credited),
            TradingFunction::Linear { a, b } => {
                let (c_in, c_out) = if i == 0 { (a, b) } else { (b, a) };
                c_in * credited / c_out
            }
            TradingFunction::WeightedGeometricMean { .. } => {
                self.solve_output(x_in + credited, into)?
            }
        };

        if !self.is_oracle() && amount_out >= x_out {
            return Err(ModelError::PoolExhausted {
                needed: amount_out,
                available: x_out,
            });
        }

        let mut state = self.clone();
        state.pools[i] = x_in + credited;
        state.pools[o] = x_out - amount_out;
        Ok(TradeOutcome {
            amount_out,
            fee_revenue: amount_in - credited,
            state,
        })
    }

    // Bisection on (0, x_out) followed by Newton polishing.
    fn solve_output(&self, new_in: f64, into: PoolSide) -> Result<f64, ModelError> {
        let i = into.index();
        let x_out = self.pools[1 - i];
        let target = self.function.log_value(self.pools);
        let arrange = |out: f64| {
            let mut x = [0.0; 2];
            x[i] = new_in;
            x[1 - i] = x_out - out;
            x
        };
        // Decreasing in `out`; positive at 0, -inf at x_out.
        let residual = |out: f64| self.function.log_value(arrange(out)) - target;

        let (mut lo, mut hi) = (0.0, x_out);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if residual(mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo <= 1e-10 * x_out {
                break;
            }
        }
        let mut out = 0.5 * (lo + hi);
        for _ in 0..20 {
            let r = residual(out);
            let slope = -self.function.log_gradient(arrange(out))[1 - i];
            if slope == 0.0 || !slope.is_finite() {
                break;
            }
            let next = (out - r / slope).clamp(lo, hi);
            let done = (next - out).abs() <= 1e-15 * x_out.max(1.0);
            out = next;
            if done {
                break;
            }
        }
        if out >= x_out {
            return Err(ModelError::PoolExhausted {
                needed: out,
                available: x_out,
            });
        }
        Ok(out)
    }
}

/// A specific pool: `pool` is 0 or 1 within CFMM `cfmm`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PoolRef {
    pub cfmm: usize,
    pub pool: PoolSide,
}

impl PoolRef {
    pub fn new(cfmm: usize, pool: PoolSide) -> Self {
        PoolRef { cfmm, pool }
    }
}

/// Transfer route between two pools of the same token, `from.cfmm < to.cfmm`.
/// A positive amount moves tokens from `from` to `to`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Edge {
    pub from: PoolRef,
    pub to: PoolRef,
}

impl Edge {
    pub fn quad(&self) -> [usize; 4] {
        [
            self.from.cfmm,
            self.from.pool.index(),
            self.to.cfmm,
            self.to.pool.index(),
        ]
    }

    pub fn from_quad(q: [usize; 4]) -> Option<Self> {
        Some(Edge {
            from: PoolRef::new(q[0], PoolSide::from_index(q[1])?),
            to: PoolRef::new(q[2], PoolSide::from_index(q[3])?),
        })
    }
}

impl fmt::Display for Edge {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [i, j, k, l] = self.quad();
        write!(f, "({i},{j},{k},{l})")
    }
}

impl Serialize for Edge {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.quad().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Edge {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let q = <[usize; 4]>::deserialize(deserializer)?;
        Edge::from_quad(q).ok_or_else(|| serde::de::Error::custom(format!("bad edge {q:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EdgeSet(Vec<Edge>);

impl EdgeSet {
    /// Validates and canonicalizes (sorted, deduplicated) a list of edges.
    pub fn new(config: &Configuration, mut edges: Vec<Edge>) -> Result<Self, ModelError> {
        for e in &edges {
            let valid = e.from.cfmm < e.to.cfmm
                && e.to.cfmm < config.cfmms.len()
                && config.token_of(e.from) == config.token_of(e.to);
            if !valid {
                return Err(ModelError::InvalidEdge(*e));
            }
        }
        edges.sort();
        edges.dedup();
        Ok(EdgeSet(edges))
    }

    pub fn edges(&self) -> &[Edge] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, edge: &Edge) -> bool {
        self.0.binary_search(edge).is_ok()
    }
}

/// Signed transfer amounts keyed by edge.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Rebalancing {
    #[serde(with = "edge_amounts")]
    pub deltas: BTreeMap<Edge, f64>,
}

mod edge_amounts {
    use super::*;

    #[derive(Serialize, Deserialize)]
    struct Entry {
        edge: Edge,
        #[serde(with = "crate::decimal")]
        amount: f64,
    }

    pub fn serialize<S: Serializer>(v: &BTreeMap<Edge, f64>, s: S) -> Result<S::Ok, S::Error> {
        v.iter()
            .map(|(&edge, &amount)| Entry { edge, amount })
            .collect::<Vec<_>>()
            .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<Edge, f64>, D::Error> {
        Ok(Vec::<Entry>::deserialize(d)?
            .into_iter()
            .map(|e| (e.edge, e.amount))
            .collect())
    }
}

impl Rebalancing {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, edge: Edge, amount: f64) {
        self.deltas.insert(edge, amount);
    }

    pub fn is_empty(&self) -> bool {
        self.deltas.values().all(|&d| d == 0.0)
    }

    pub fn negated(&self) -> Self {
        Rebalancing {
            deltas: self.deltas.iter().map(|(&e, &d)| (e, -d)).collect(),
        }
    }
}

/// Signed amounts of tokens held by an agent.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Basket(#[serde(with = "crate::decimal::map")] BTreeMap<TokenId, f64>);

impl Basket {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, token: &TokenId) -> f64 {
        self.0.get(token).copied().unwrap_or(0.0)
    }

    pub fn add(&mut self, token: &TokenId, amount: f64) {
        *self.0.entry(token.clone()).or_insert(0.0) += amount;
    }

    pub fn set(&mut self, token: &TokenId, amount: f64) {
        self.0.insert(token.clone(), amount);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&TokenId, f64)> {
        self.0.iter().map(|(k, &v)| (k, v))
    }

    /// True when every component is within `tol` of zero.
    pub fn is_zero(&self, tol: f64) -> bool {
        self.0.values().all(|v| v.abs() <= tol)
    }

    /// Removes components that are exactly zero.
    pub fn pruned(mut self) -> Self {
        self.0.retain(|_, v| *v != 0.0);
        self
    }
}

/// Ordered list of CFMMs over a token universe.
#[derive(Debug, Clone, PartialEq)]
pub struct Configuration {
    tokens: Vec<TokenId>,
    cfmms: Vec<Cfmm>,
}

impl Configuration {
    pub fn new(tokens: Vec<TokenId>, cfmms: Vec<Cfmm>) -> Result<Self, ModelError> {
        for (n, t) in tokens.iter().enumerate() {
            if t.as_str().is_empty() {
                return Err(ModelError::InvalidConfiguration("empty token symbol".into()));
            }
            if tokens[..n].contains(t) {
                return Err(ModelError::InvalidConfiguration(format!("duplicate token {t}")));
            }
        }
        for (i, c) in cfmms.iter().enumerate() {
            c.validate()
                .map_err(|e| ModelError::InvalidConfiguration(format!("cfmm {i}: {e}")))?;
            for t in &c.tokens {
                if !tokens.contains(t) {
                    return Err(ModelError::InvalidConfiguration(format!(
                        "cfmm {i} uses token {t} outside the universe"
                    )));
                }
            }
        }
        Ok(Configuration { tokens, cfmms })
    }

    /// Builds a configuration whose universe is every token the CFMMs use,
    /// sorted by symbol.
    pub fn from_cfmms(cfmms: Vec<Cfmm>) -> Result<Self, ModelError> {
        let mut tokens: Vec<TokenId> = cfmms.iter().flat_map(|c| c.tokens.clone()).collect();
        tokens.sort();
        tokens.dedup();
        Configuration::new(tokens, cfmms)
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    pub fn cfmms(&self) -> &[Cfmm] {
        &self.cfmms
    }

    pub fn cfmm(&self, index: usize) -> &Cfmm {
        &self.cfmms[index]
    }

    pub fn len(&self) -> usize {
        self.cfmms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cfmms.is_empty()
    }

    pub fn token_of(&self, pool: PoolRef) -> &TokenId {
        &self.cfmms[pool.cfmm].tokens[pool.pool.index()]
    }

    pub fn pool(&self, pool: PoolRef) -> f64 {
        self.cfmms[pool.cfmm].pools[pool.pool.index()]
    }

    pub fn pools(&self) -> impl Iterator<Item = PoolRef> + '_ {
        (0..self.cfmms.len()).flat_map(|i| {
            [PoolSide::First, PoolSide::Second]
                .into_iter()
                .map(move |s| PoolRef::new(i, s))
        })
    }

    pub fn liquidities(&self) -> Vec<f64> {
        self.cfmms.iter().map(Cfmm::liquidity).collect()
    }

    /// Sum of a token over every pool (oracles included).
    pub fn token_total(&self, token: &TokenId) -> f64 {
        self.pools()
            .filter(|&p| self.token_of(p) == token)
            .map(|p| self.pool(p))
            .sum()
    }

    /// Copy with replaced pool amounts, re-validated.
    pub fn with_pools(&self, pools: &[[f64; 2]]) -> Result<Self, ModelError> {
        if pools.len() != self.cfmms.len() {
            return Err(ModelError::InvalidConfiguration(format!(
                "expected {} pool pairs, got {}",
                self.cfmms.len(),
                pools.len()
            )));
        }
        let mut next = self.clone();
        for (c, p) in next.cfmms.iter_mut().zip(pools) {
            c.pools = *p;
        }
        for (i, c) in next.cfmms.iter().enumerate() {
            c.validate()
                .map_err(|e| ModelError::InvalidConfiguration(format!("cfmm {i}: {e}")))?;
        }
        Ok(next)
    }

    /// Replaces one CFMM without validation of the rest.
    pub fn with_cfmm(&self, index: usize, cfmm: Cfmm) -> Result<Self, ModelError> {
        cfmm.validate()?;
        let mut next = self.clone();
        next.cfmms[index] = cfmm;
        Ok(next)
    }

    pub fn pool_pairs(&self) -> Vec<[f64; 2]> {
        self.cfmms.iter().map(|c| c.pools).collect()
    }
}

/// All pool pairs that hold the same token, one edge per unordered pair.
/// With `restrict_to_active` both endpoints must belong to active CFMMs.
pub fn build_edges(config: &Configuration, restrict_to_active: bool) -> EdgeSet {
    let pools: Vec<PoolRef> = config.pools().collect();
    let mut edges = Vec::new();
    for (n, &a) in pools.iter().enumerate() {
        for &b in &pools[n + 1..] {
            if a.cfmm == b.cfmm || config.token_of(a) != config.token_of(b) {
                continue;
            }
            if restrict_to_active
                && (config.cfmm(a.cfmm).mode != Mode::Active
                    || config.cfmm(b.cfmm).mode != Mode::Active)
            {
                continue;
            }
            edges.push(Edge { from: a, to: b });
        }
    }
    edges.sort();
    EdgeSet(edges)
}

/// Applies signed edge transfers. Per-token totals are unchanged.
pub fn apply_rebalancing(
    config: &Configuration,
    rebalancing: &Rebalancing,
) -> Result<Configuration, ModelError> {
    if rebalancing.is_empty() {
        return Err(ModelError::InfeasibleRebalancing(
            "a rebalancing must move some tokens".into(),
        ));
    }
    let mut pools = config.pool_pairs();
    for (edge, &delta) in &rebalancing.deltas {
        let valid = edge.from.cfmm < edge.to.cfmm
            && edge.to.cfmm < config.len()
            && config.token_of(edge.from) == config.token_of(edge.to);
        if !valid {
            return Err(ModelError::InvalidEdge(*edge));
        }
        if !delta.is_finite() {
            return Err(ModelError::InfeasibleRebalancing(format!(
                "non-finite transfer on {edge}"
            )));
        }
        pools[edge.from.cfmm][edge.from.pool.index()] -= delta;
        pools[edge.to.cfmm][edge.to.pool.index()] += delta;
    }
    for (i, p) in pools.iter().enumerate() {
        if !config.cfmm(i).is_oracle() && (p[0] <= 0.0 || p[1] <= 0.0) {
            return Err(ModelError::InfeasibleRebalancing(format!(
                "cfmm {i} would end with pools ({}, {})",
                p[0], p[1]
            )));
        }
    }
    config
        .with_pools(&pools)
        .map_err(|e| ModelError::InfeasibleRebalancing(e.to_string()))
}
