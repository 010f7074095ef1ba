//! Seeded random CFMM networks.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::model::{Cfmm, Configuration, Mode, TokenId, TradingFunction};

#[derive(Debug, Error, PartialEq)]
pub enum GenError {
    #[error("infeasible generator settings: {0}")]
    InfeasibleSpec(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenSpec {
    pub seed: u64,
    pub n_cfmms: usize,
    pub n_tokens: usize,
    /// Pools are drawn log-uniformly from this range.
    pub pool_range: (f64, f64),
    /// Probability that a non-oracle CFMM is active.
    pub active_fraction: f64,
    pub oracle_count: usize,
    pub fee_range: (f64, f64),
    pub ensure_connected: bool,
}

impl Default for GenSpec {
    fn default() -> Self {
        GenSpec {
            seed: 0,
            n_cfmms: 5,
            n_tokens: 4,
            pool_range: (0.1, 10.0),
            active_fraction: 1.0,
            oracle_count: 0,
            fee_range: (1.0, 1.0),
            ensure_connected: true,
        }
    }
}

impl GenSpec {
    pub fn validate(&self) -> Result<(), GenError> {
        let fail = |m: String| Err(GenError::InfeasibleSpec(m));
        if self.n_tokens < 2 {
            return fail(format!("need at least 2 tokens, got {}", self.n_tokens));
        }
        if self.ensure_connected && self.n_cfmms + 1 < self.n_tokens {
            return fail(format!(
                "{} cfmms cannot connect {} tokens",
                self.n_cfmms, self.n_tokens
            ));
        }
        let (lo, hi) = self.pool_range;
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
            return fail(format!("pool range ({lo}, {hi}) must be positive and ordered"));
        }
        if !(0.0..=1.0).contains(&self.active_fraction) {
            return fail(format!("active fraction {} outside [0, 1]", self.active_fraction));
        }
        let (glo, ghi) = self.fee_range;
        if !(glo > 0.0 && ghi <= 1.0 && glo <= ghi) {
            return fail(format!("fee range ({glo}, {ghi}) must lie in (0, 1]"));
        }
        if self.oracle_count > self.n_cfmms {
            return fail(format!(
                "{} oracles requested among {} cfmms",
                self.oracle_count, self.n_cfmms
            ));
        }
        Ok(())
    }
}

pub fn token_names(n: usize) -> Vec<TokenId> {
    let width = (n.saturating_sub(1)).to_string().len().max(2);
    (0..n).map(|i| TokenId::new(format!("T{i:0width$}"))).collect()
}

fn log_uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi == lo {
        return lo;
    }
    rng.random_range(lo.ln()..hi.ln()).exp()
}

/// Token index pairs: a random spanning tree first (when connecting), then
/// further pairs, preferring pairs not yet used.
fn token_pairs(rng: &mut ChaCha8Rng, spec: &GenSpec) -> Vec<(usize, usize)> {
    let n = spec.n_tokens;
    let mut pairs = Vec::with_capacity(spec.n_cfmms);
    if spec.ensure_connected {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        for k in 1..n {
            let parent = order[rng.random_range(0..k)];
            pairs.push((parent, order[k]));
        }
    }
    while pairs.len() < spec.n_cfmms {
        let unused: Vec<(usize, usize)> = (0..n)
            .flat_map(|a| (a + 1..n).map(move |b| (a, b)))
            .filter(|&(a, b)| !pairs.iter().any(|&(x, y)| (x, y) == (a, b) || (x, y) == (b, a)))
            .collect();
        let pair = if unused.is_empty() {
            let a = rng.random_range(0..n);
            let b = (a + rng.random_range(1..n)) % n;
            (a, b)
        } else {
            unused[rng.random_range(0..unused.len())]
        };
        pairs.push(if rng.random_bool(0.5) { pair } else { (pair.1, pair.0) });
    }
    pairs
}

/// Deterministic configuration for a spec. Oracles quote prices from one
/// hidden valuation, so they never disagree with each other.
pub fn generate(spec: &GenSpec) -> Result<Configuration, GenError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let tokens = token_names(spec.n_tokens);
    let pairs = token_pairs(&mut rng, spec);
    let valuation: Vec<f64> = (0..spec.n_tokens).map(|_| log_uniform(&mut rng, (0.5, 2.0))).collect();

    let mut indices: Vec<usize> = (0..spec.n_cfmms).collect();
    indices.shuffle(&mut rng);
    let oracles = &indices[..spec.oracle_count];

    let mut cfmms = Vec::with_capacity(spec.n_cfmms);
    for (i, &(a, b)) in pairs.iter().enumerate() {
        let pools = [log_uniform(&mut rng, spec.pool_range), log_uniform(&mut rng, spec.pool_range)];
        let fee = if spec.fee_range.0 == spec.fee_range.1 {
            spec.fee_range.0
        } else {
            rng.random_range(spec.fee_range.0..=spec.fee_range.1)
        };
        let active = rng.random_bool(spec.active_fraction);
        let pair = [tokens[a].clone(), tokens[b].clone()];
        let cfmm = if oracles.contains(&i) {
            let function = TradingFunction::Linear { a: valuation[a], b: valuation[b] };
            Cfmm::new(pair, pools, function).with_mode(Mode::Oracle)
        } else {
            let mode = if active { Mode::Active } else { Mode::Passive };
            Cfmm::new(pair, pools, TradingFunction::ConstantProduct).with_mode(mode)
        };
        cfmms.push(cfmm.with_fee(fee));
    }

    if spec.active_fraction > 0.0 && !cfmms.iter().any(|c| c.mode == Mode::Active) {
        if let Some(c) = cfmms.iter_mut().find(|c| c.mode == Mode::Passive) {
            c.mode = Mode::Active;
        }
    }

    Configuration::new(tokens, cfmms).map_err(|e| GenError::InfeasibleSpec(e.to_string()))
}
