//! Liquidity rebalancing: find pool-to-pool transfers that maximize the
//! weighted sum of log-liquidities without reducing any CFMM's liquidity.
//!
//! Variables are per-pool changes. A pool that only trades under a fee gets
//! two nonnegative variables, an inflow `a` and an outflow `v`: the pool
//! moves by `fee * a - v` while the agent supplies `a - v`. Conservation is
//! imposed on agent-level changes, per group of pools linked by edges.

mod barrier;
mod layout;
mod verify;

use std::collections::BTreeMap;

use serde::Serialize;
use thiserror::Error;

use crate::model::{
    build_edges, Basket, Configuration, EdgeSet, Mode, PoolRef, Rebalancing, TradingFunction,
};

pub use verify::{verify, verify_state, CheckResult, VerificationReport};

#[derive(Debug, Error, PartialEq)]
pub enum SolverError {
    #[error("invalid problem: {0}")]
    InvalidProblem(String),
    #[error("non-positive liquidity {value} at cfmm {cfmm}")]
    NonPositiveLiquidity { cfmm: usize, value: f64 },
    #[error("solver did not converge: kkt residual {residual:e} above {tol:e}")]
    SolverDiverged { residual: f64, tol: f64 },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RebalanceMode {
    Full,
    Restricted { active: Vec<usize> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleHandling {
    /// Oracle pools are backed by large internal reserves.
    #[default]
    SyntheticReserves,
    /// Oracle pools may go negative; no positivity constraint applies.
    NegativePools,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RebalanceProblem {
    pub config: Configuration,
    pub edges: EdgeSet,
    pub weights: Vec<f64>,
    pub mode: RebalanceMode,
    /// Charge each passive CFMM's fee on its inflow legs.
    pub fee_mode: bool,
}

impl RebalanceProblem {
    /// Every CFMM accepts direct transfers and counts in the objective.
    pub fn full(config: Configuration) -> Self {
        let edges = build_edges(&config, false);
        let weights = vec![1.0; config.len()];
        RebalanceProblem { config, edges, weights, mode: RebalanceMode::Full, fee_mode: false }
    }

    /// Active set taken from each CFMM's mode.
    pub fn restricted(config: Configuration) -> Self {
        let active = (0..config.len())
            .filter(|&i| config.cfmm(i).mode == Mode::Active)
            .collect();
        RebalanceProblem::restricted_to(config, active)
    }

    pub fn restricted_to(config: Configuration, active: Vec<usize>) -> Self {
        let edges = build_edges(&config, false);
        let weights = vec![1.0; config.len()];
        RebalanceProblem {
            config,
            edges,
            weights,
            mode: RebalanceMode::Restricted { active },
            fee_mode: false,
        }
    }

    pub fn with_weights(mut self, weights: Vec<f64>) -> Self {
        self.weights = weights;
        self
    }

    pub fn with_fees(mut self, fee_mode: bool) -> Self {
        self.fee_mode = fee_mode;
        self
    }

    pub fn with_edges(mut self, edges: EdgeSet) -> Self {
        self.edges = edges;
        self
    }

    pub fn is_active(&self, cfmm: usize) -> bool {
        match &self.mode {
            RebalanceMode::Full => true,
            RebalanceMode::Restricted { active } => active.contains(&cfmm),
        }
    }

    pub fn is_restricted(&self) -> bool {
        matches!(self.mode, RebalanceMode::Restricted { .. })
    }

    /// CFMMs whose liquidity enters the objective.
    pub fn scope(&self) -> Vec<bool> {
        (0..self.config.len()).map(|i| self.is_active(i)).collect()
    }

    /// Fee applied to inflows of a CFMM, or `None` when transfers are free.
    pub(crate) fn inflow_fee(&self, cfmm: usize) -> Option<f64> {
        let fee = self.config.cfmm(cfmm).fee;
        (self.fee_mode && !self.is_active(cfmm) && fee < 1.0).then_some(fee)
    }

    pub fn validate(&self) -> Result<(), SolverError> {
        let n = self.config.len();
        if self.weights.len() != n {
            return Err(SolverError::InvalidProblem(format!(
                "expected {n} weights, got {}",
                self.weights.len()
            )));
        }
        if let Some(w) = self.weights.iter().find(|w| !(**w > 0.0 && w.is_finite())) {
            return Err(SolverError::InvalidProblem(format!("weights must be positive, got {w}")));
        }
        for e in self.edges.edges() {
            if e.to.cfmm >= n || self.config.token_of(e.from) != self.config.token_of(e.to) {
                return Err(SolverError::InvalidProblem(format!("edge {:?} is invalid", e.quad())));
            }
        }
        match &self.mode {
            RebalanceMode::Full => {
                if let Some(i) = (0..n).find(|&i| self.config.cfmm(i).is_oracle()) {
                    return Err(SolverError::InvalidProblem(format!(
                        "cfmm {i} is an oracle; oracles require restricted mode"
                    )));
                }
            }
            RebalanceMode::Restricted { active } => {
                if active.is_empty() {
                    return Err(SolverError::InvalidProblem(
                        "restricted mode needs at least one active cfmm".into(),
                    ));
                }
                for &i in active {
                    if i >= n {
                        return Err(SolverError::InvalidProblem(format!("active index {i} out of range")));
                    }
                    if self.config.cfmm(i).is_oracle() {
                        return Err(SolverError::InvalidProblem(format!(
                            "oracle cfmm {i} cannot be active"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverOptions {
    /// Bound on the KKT residual (stationarity and complementarity).
    pub tol: f64,
    /// Newton iterations per barrier stage.
    pub max_iter: usize,
    pub stages: usize,
    pub oracle_handling: OracleHandling,
    /// Interior starting pools for the optimization phase. Fee-free only.
    pub initial_pools: Option<Vec<[f64; 2]>>,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            tol: 1e-8,
            max_iter: 200,
            stages: 12,
            oracle_handling: OracleHandling::SyntheticReserves,
            initial_pools: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Improved,
    NoImprovement,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RebalanceSolution {
    pub status: SolveStatus,
    pub final_pools: Vec<[f64; 2]>,
    /// Net change of each pool as supplied by the agent (before fees).
    pub agent_changes: Vec<[f64; 2]>,
    pub canonical_deltas: Rebalancing,
    pub fee_revenue: Basket,
    pub initial_objective: f64,
    pub objective_value: f64,
    pub improvement: f64,
    pub liquidity_before: Vec<f64>,
    pub liquidity_after: Vec<f64>,
    pub kkt_residual: f64,
    pub iterations: usize,
}

/// `sum w_i log F_i` over the CFMMs flagged in `scope`.
pub fn objective_value(
    config: &Configuration,
    weights: &[f64],
    scope: &[bool],
) -> Result<f64, SolverError> {
    let mut total = 0.0;
    for (i, c) in config.cfmms().iter().enumerate() {
        if !scope.get(i).copied().unwrap_or(false) {
            continue;
        }
        let value = c.liquidity();
        if !(value > 0.0) || c.pools.iter().any(|&x| x <= 0.0) {
            return Err(SolverError::NonPositiveLiquidity { cfmm: i, value });
        }
        total += weights[i] * c.function.log_value(c.pools);
    }
    Ok(total)
}

/// Maximizes the weighted log-liquidity of the problem's scope.
pub fn solve(problem: &RebalanceProblem, opts: &SolverOptions) -> Result<RebalanceSolution, SolverError> {
    problem.validate()?;
    if opts.initial_pools.is_some() && problem.fee_mode {
        return Err(SolverError::InvalidProblem("warm starts are not supported with fees".into()));
    }
    let config = &problem.config;
    let scope = problem.scope();
    let initial_objective = objective_value(config, &problem.weights, &scope)?;

    let mut pool_changes = vec![[0.0; 2]; config.len()];
    let mut agent_changes = vec![[0.0; 2]; config.len()];
    let mut inflows = vec![[0.0; 2]; config.len()];
    let mut kkt_residual: f64 = 0.0;
    let mut iterations = 0;
    let mut improved = false;

    for component in layout::components(problem) {
        let Some((layout, result)) = layout::Layout::solve(problem, &component, opts)? else {
            continue;
        };
        improved = true;
        kkt_residual = kkt_residual.max(result.kkt_residual);
        iterations += result.iterations;
        for (k, pool) in layout.pools.iter().enumerate() {
            let j = pool.pool.index();
            pool_changes[pool.cfmm][j] = result.pool_change[k];
            agent_changes[pool.cfmm][j] = result.agent_change[k];
            inflows[pool.cfmm][j] = result.inflow[k];
        }
    }

    let liquidity_before = config.liquidities();
    if !improved {
        return Ok(RebalanceSolution {
            status: SolveStatus::NoImprovement,
            final_pools: config.pool_pairs(),
            agent_changes,
            canonical_deltas: Rebalancing::new(),
            fee_revenue: Basket::new(),
            initial_objective,
            objective_value: initial_objective,
            improvement: 0.0,
            liquidity_after: liquidity_before.clone(),
            liquidity_before,
            kkt_residual: 0.0,
            iterations,
        });
    }

    if problem.fee_mode {
        net_passive_flows(problem, &mut pool_changes, &mut agent_changes, &mut inflows);
    }
    pin_passive(problem, &mut pool_changes, &mut agent_changes, &mut inflows);
    let final_pools: Vec<[f64; 2]> = config
        .cfmms()
        .iter()
        .zip(&pool_changes)
        .map(|(c, d)| [c.pools[0] + d[0], c.pools[1] + d[1]])
        .collect();
    let final_config = config
        .with_pools(&final_pools)
        .map_err(|e| SolverError::InvalidProblem(format!("solution left the domain: {e}")))?;
    let objective = objective_value(&final_config, &problem.weights, &scope)?;

    let mut fee_revenue = Basket::new();
    for (i, c) in config.cfmms().iter().enumerate() {
        for (token, inflow) in c.tokens.iter().zip(inflows[i]) {
            let fee = (1.0 - c.fee) * inflow;
            if fee > 0.0 {
                fee_revenue.add(token, fee);
            }
        }
    }

    Ok(RebalanceSolution {
        status: SolveStatus::Improved,
        canonical_deltas: canonical_deltas(problem, &agent_changes),
        final_pools,
        agent_changes,
        fee_revenue,
        initial_objective,
        objective_value: objective,
        improvement: objective - initial_objective,
        liquidity_before,
        liquidity_after: final_config.liquidities(),
        kkt_residual,
        iterations,
    })
}

/// Pool indices `2 * cfmm + side` grouped by the edges that join them.
fn pool_groups(problem: &RebalanceProblem) -> Vec<usize> {
    let index_of = |p: PoolRef| p.cfmm * 2 + p.pool.index();
    let mut parent: Vec<usize> = (0..2 * problem.config.len()).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for e in problem.edges.edges() {
        let (a, b) = (find(&mut parent, index_of(e.from)), find(&mut parent, index_of(e.to)));
        if a != b {
            parent[a.max(b)] = a.min(b);
        }
    }
    (0..parent.len()).map(|k| find(&mut parent, k)).collect()
}

/// Deepest active pool, other than those of `exclude`, in the same edge group
/// as pool index `k` (`2 * cfmm + side`) under the current changes.
fn deepest_active(
    problem: &RebalanceProblem,
    groups: &[usize],
    pool_changes: &[[f64; 2]],
    k: usize,
    exclude: usize,
) -> Option<usize> {
    let config = &problem.config;
    (0..2 * config.len())
        .filter(|&r| r / 2 != exclude && groups[r] == groups[k] && problem.is_active(r / 2))
        .max_by(|&a, &b| {
            let pa = config.cfmm(a / 2).pools[a % 2] + pool_changes[a / 2][a % 2];
            let pb = config.cfmm(b / 2).pools[b % 2] + pool_changes[b / 2][b % 2];
            pa.total_cmp(&pb).then(b.cmp(&a))
        })
}

/// Replaces simultaneous inflow and outflow on a fee-charging pool by their
/// net, which pays less fee; the agent's saving goes to the deepest active
/// pool of the group.
fn net_passive_flows(
    problem: &RebalanceProblem,
    pool_changes: &mut [[f64; 2]],
    agent_changes: &mut [[f64; 2]],
    inflows: &mut [[f64; 2]],
) {
    let config = &problem.config;
    let groups = pool_groups(problem);
    for (i, c) in config.cfmms().iter().enumerate() {
        for j in 0..2 {
            if problem.is_active(i) || inflows[i][j] <= 0.0 {
                continue;
            }
            let net = pool_changes[i][j];
            let inflow = (net / c.fee).max(0.0);
            let agent = if net > 0.0 { inflow } else { net };
            let saved = agent_changes[i][j] - agent;
            if !(saved > 0.0) {
                continue;
            }
            let Some(r) = deepest_active(problem, &groups, pool_changes, 2 * i + j, i) else { continue };
            inflows[i][j] = inflow;
            agent_changes[i][j] = agent;
            pool_changes[r / 2][r % 2] += saved;
            agent_changes[r / 2][r % 2] += saved;
        }
    }
}

/// Puts every changed passive CFMM exactly back on its level set by
/// adjusting its outgoing pool; the difference is settled with the deepest
/// active pool of the same token group. The barrier leaves passive
/// liquidities above their initial values by roughly the duality gap.
fn pin_passive(
    problem: &RebalanceProblem,
    pool_changes: &mut [[f64; 2]],
    agent_changes: &mut [[f64; 2]],
    inflows: &mut [[f64; 2]],
) {
    let config = &problem.config;
    let groups = pool_groups(problem);
    for (i, c) in config.cfmms().iter().enumerate() {
        let d = pool_changes[i];
        if problem.is_active(i) || (d[0] == 0.0 && d[1] == 0.0) {
            continue;
        }
        let x = c.pools;
        let smaller = if d[0] <= d[1] { 0 } else { 1 };
        // Prefer adjusting the outgoing pool; fall back to the other one
        // when the outgoing pool's group has no active pool.
        for adjust in [smaller, 1 - smaller] {
            let keep = 1 - adjust;
            let pinned = match c.function {
                TradingFunction::Linear { a, b } => {
                    let coef = [a, b];
                    -coef[keep] * d[keep] / coef[adjust]
                }
                TradingFunction::ConstantProduct | TradingFunction::WeightedGeometricMean { .. } => {
                    let w = match c.function {
                        TradingFunction::WeightedGeometricMean { w1, w2 } => [w1, w2],
                        _ => [1.0, 1.0],
                    };
                    let kept = x[keep] + d[keep];
                    if !(kept > 0.0) {
                        continue;
                    }
                    // x_adjust^w_adjust * kept^w_keep = x_adjust0^w_adjust * x_keep0^w_keep
                    let ratio = (w[keep] / w[adjust] * (x[keep] / kept).ln()).exp();
                    x[adjust] * ratio - x[adjust]
                }
            };
            let shift = pinned - d[adjust];
            if shift == 0.0 || !shift.is_finite() {
                break;
            }
            // An inflow leg pays the fee on top of what the pool keeps.
            let paid = if inflows[i][adjust] > 0.0 { shift / c.fee } else { shift };
            let Some(r) = deepest_active(problem, &groups, pool_changes, 2 * i + adjust, i) else { continue };
            if !(config.cfmm(r / 2).pools[r % 2] + pool_changes[r / 2][r % 2] - paid > 0.0) {
                continue;
            }
            if inflows[i][adjust] > 0.0 {
                inflows[i][adjust] += paid;
            }
            pool_changes[i][adjust] += shift;
            agent_changes[i][adjust] += paid;
            pool_changes[r / 2][r % 2] -= paid;
            agent_changes[r / 2][r % 2] -= paid;
            break;
        }
    }
}

/// Minimum-norm edge amounts whose net effect on each pool equals the
/// agent-level change, solved per connected group of pools.
pub fn canonical_deltas(problem: &RebalanceProblem, changes: &[[f64; 2]]) -> Rebalancing {
    use nalgebra::{DMatrix, DVector};

    let edges = problem.edges.edges();
    let index_of = |p: PoolRef| p.cfmm * 2 + p.pool.index();
    let roots = pool_groups(problem);
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (n, e) in edges.iter().enumerate() {
        groups.entry(roots[index_of(e.from)]).or_default().push(n);
    }

    let mut out = Rebalancing::new();
    for edge_ids in groups.values() {
        let mut members: Vec<usize> = edge_ids
            .iter()
            .flat_map(|&n| [index_of(edges[n].from), index_of(edges[n].to)])
            .collect();
        members.sort_unstable();
        members.dedup();
        let row = |p: usize| members.binary_search(&p).unwrap();
        let mut m = DMatrix::zeros(members.len(), edge_ids.len());
        for (col, &n) in edge_ids.iter().enumerate() {
            m[(row(index_of(edges[n].from)), col)] = -1.0;
            m[(row(index_of(edges[n].to)), col)] = 1.0;
        }
        let b = DVector::from_iterator(members.len(), members.iter().map(|&p| changes[p / 2][p % 2]));
        let scale = b.amax();
        if scale == 0.0 {
            continue;
        }
        let Ok(pinv) = m.pseudo_inverse(1e-12) else {
            continue;
        };
        let delta = pinv * b;
        for (col, &n) in edge_ids.iter().enumerate() {
            if delta[col].abs() > 1e-14 * scale {
                out.insert(edges[n], delta[col]);
            }
        }
    }
    out
}
