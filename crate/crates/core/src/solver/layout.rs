//! Variable layout of one connected component and its two barrier programs:
//! a feasibility phase that finds a point strictly improving every CFMM, and
//! the log-liquidity maximization itself.

use nalgebra::DMatrix;

use super::barrier::{self, BarrierError, Program, Schedule, Term};
use super::{OracleHandling, RebalanceProblem, SolverError, SolverOptions};
use crate::model::{PoolRef, PoolSide, TradingFunction};

/// Stages allowed beyond the nominal schedule while passive CFMMs still
/// hold more than `PASSIVE_SLACK` of relative liquidity gain.
const EXTRA_STAGES: usize = 8;
const PASSIVE_SLACK: f64 = 1e-9;

/// Phase-one margins: stop once every constraint clears `READY`; below
/// `NEGLIGIBLE` the component is treated as already optimal.
const READY: f64 = 1e-8;
const NEGLIGIBLE: f64 = 1e-10;

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

fn union(parent: &mut [usize], a: usize, b: usize) {
    let (ra, rb) = (find(parent, a), find(parent, b));
    if ra != rb {
        parent[ra.max(rb)] = ra.min(rb);
    }
}

/// CFMM index sets linked by edges that contain at least one objective CFMM.
pub(super) fn components(problem: &RebalanceProblem) -> Vec<Vec<usize>> {
    let n = problem.config.len();
    let mut parent: Vec<usize> = (0..n).collect();
    let mut linked = vec![false; n];
    for e in problem.edges.edges() {
        union(&mut parent, e.from.cfmm, e.to.cfmm);
        linked[e.from.cfmm] = true;
        linked[e.to.cfmm] = true;
    }
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut roots: Vec<usize> = Vec::new();
    for i in (0..n).filter(|&i| linked[i]) {
        let r = find(&mut parent, i);
        match roots.iter().position(|&x| x == r) {
            Some(k) => groups[k].push(i),
            None => {
                roots.push(r);
                groups.push(vec![i]);
            }
        }
    }
    groups.retain(|g| g.iter().any(|&i| problem.is_active(i)));
    groups
}

/// Allowed direction of a fee-charged pool's change.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(super) enum Flow {
    Both,
    Inflow,
    Outflow,
    Fixed,
}

struct CfmmInfo {
    pools: [usize; 2],
    function: TradingFunction,
    weight: Option<f64>,
    /// Normalizer of the linear non-reduction form; `None` for log form.
    linear_scale: Option<f64>,
    base_value: f64,
}

pub(super) struct Layout {
    pub pools: Vec<PoolRef>,
    original: Vec<f64>,
    base: Vec<f64>,
    pool_coef: Vec<Vec<(usize, f64)>>,
    agent_coef: Vec<Vec<(usize, f64)>>,
    inflow_var: Vec<Option<usize>>,
    /// Variables constrained to be positive (inflow and outflow amounts).
    sign_vars: Vec<Vec<usize>>,
    positive: Vec<bool>,
    cfmms: Vec<CfmmInfo>,
    n: usize,
    eq: DMatrix<f64>,
}

pub(super) struct ComponentResult {
    pub pool_change: Vec<f64>,
    pub agent_change: Vec<f64>,
    pub inflow: Vec<f64>,
    pub kkt_residual: f64,
    pub iterations: usize,
}

/// Flow of every pool of `members` (two per CFMM, in order) after freezing
/// pools that cannot move: pools without edges, a non-active CFMM's pool
/// whose sibling is frozen, the only moving pool of its group, and
/// one-way pools in a group that cannot balance them.
fn settle(problem: &RebalanceProblem, members: &[usize], flow: &dyn Fn(PoolRef) -> Flow) -> Vec<Flow> {
    let pools: Vec<PoolRef> = members
        .iter()
        .flat_map(|&i| [PoolRef::new(i, PoolSide::First), PoolRef::new(i, PoolSide::Second)])
        .collect();
    let local = |p: PoolRef| pools.iter().position(|&q| q == p);
    let mut parent: Vec<usize> = (0..pools.len()).collect();
    let mut linked = vec![false; pools.len()];
    for e in problem.edges.edges() {
        if let (Some(a), Some(b)) = (local(e.from), local(e.to)) {
            union(&mut parent, a, b);
            linked[a] = true;
            linked[b] = true;
        }
    }
    let group: Vec<usize> = (0..pools.len()).map(|k| find(&mut parent, k)).collect();
    let mut flows: Vec<Flow> = pools
        .iter()
        .zip(&linked)
        .map(|(&p, &l)| if l { flow(p) } else { Flow::Fixed })
        .collect();
    loop {
        let mut changed = false;
        for k in 0..flows.len() {
            if flows[k] == Flow::Fixed {
                continue;
            }
            let in_group = || (0..flows.len()).filter(|&j| group[j] == group[k]);
            let has = |f: Flow| in_group().any(|j| flows[j] == f);
            let moving = in_group().filter(|&j| flows[j] != Flow::Fixed).count();
            let two_way = has(Flow::Both) || (has(Flow::Inflow) && has(Flow::Outflow));
            let directed = matches!(flows[k], Flow::Inflow | Flow::Outflow);
            let pinned_sibling = !problem.is_active(pools[k].cfmm) && flows[k ^ 1] == Flow::Fixed;
            if pinned_sibling || moving == 1 || (directed && !two_way) {
                flows[k] = Flow::Fixed;
                changed = true;
            }
        }
        if !changed {
            return flows;
        }
    }
}

impl Layout {
    pub fn new(
        problem: &RebalanceProblem,
        members: &[usize],
        oracles: OracleHandling,
        flow: &dyn Fn(PoolRef) -> Flow,
    ) -> Self {
        let config = &problem.config;
        let supply = |pool: PoolRef| -> f64 {
            let token = config.token_of(pool);
            let total: f64 = config
                .pools()
                .filter(|&p| !config.cfmm(p.cfmm).is_oracle() && config.token_of(p) == token)
                .map(|p| config.pool(p))
                .sum();
            total.max(1.0)
        };

        let mut layout = Layout {
            pools: Vec::new(),
            original: Vec::new(),
            base: Vec::new(),
            pool_coef: Vec::new(),
            agent_coef: Vec::new(),
            inflow_var: Vec::new(),
            sign_vars: Vec::new(),
            positive: Vec::new(),
            cfmms: Vec::new(),
            n: 0,
            eq: DMatrix::zeros(0, 0),
        };
        let settled = settle(problem, members, flow);
        for &i in members {
            let c = config.cfmm(i);
            let first = layout.pools.len();
            for side in [PoolSide::First, PoolSide::Second] {
                let pool = PoolRef::new(i, side);
                let original = config.pool(pool);
                let base = if c.is_oracle() && oracles == OracleHandling::SyntheticReserves {
                    1e3 * supply(pool)
                } else {
                    original
                };
                let (pc, ac, inflow, signs) = match (problem.inflow_fee(i), settled[layout.pools.len()]) {
                    (_, Flow::Fixed) => (Vec::new(), Vec::new(), None, Vec::new()),
                    (Some(fee), Flow::Both) => {
                        let (a, v) = (layout.n, layout.n + 1);
                        layout.n += 2;
                        (vec![(a, fee), (v, -1.0)], vec![(a, 1.0), (v, -1.0)], Some(a), vec![a, v])
                    }
                    (Some(fee), Flow::Inflow) => {
                        let a = layout.n;
                        layout.n += 1;
                        (vec![(a, fee)], vec![(a, 1.0)], Some(a), vec![a])
                    }
                    (Some(_), Flow::Outflow) => {
                        let v = layout.n;
                        layout.n += 1;
                        (vec![(v, -1.0)], vec![(v, -1.0)], None, vec![v])
                    }
                    (None, _) => {
                        let v = layout.n;
                        layout.n += 1;
                        (vec![(v, 1.0)], vec![(v, 1.0)], None, Vec::new())
                    }
                };
                layout.pools.push(pool);
                layout.original.push(original);
                layout.base.push(base);
                layout.pool_coef.push(pc);
                layout.agent_coef.push(ac);
                layout.inflow_var.push(inflow);
                layout.sign_vars.push(signs);
                layout
                    .positive
                    .push(!(c.is_oracle() && oracles == OracleHandling::NegativePools));
            }
            if layout.pool_coef[first].is_empty() && layout.pool_coef[first + 1].is_empty() {
                continue;
            }
            let pools = [first, first + 1];
            let base = [layout.base[first], layout.base[first + 1]];
            let linear_scale = c.is_oracle().then(|| match c.function {
                TradingFunction::Linear { a, b } => {
                    a * supply(PoolRef::new(i, PoolSide::First))
                        + b * supply(PoolRef::new(i, PoolSide::Second))
                }
                _ => 1.0,
            });
            layout.cfmms.push(CfmmInfo {
                pools,
                function: c.function,
                weight: (problem.is_active(i)).then_some(problem.weights[i]),
                linear_scale,
                base_value: c.function.value(base),
            });
        }

        // Conservation rows: one per group of pools joined by edges.
        let local = |p: PoolRef| layout.pools.iter().position(|&q| q == p);
        let mut parent: Vec<usize> = (0..layout.pools.len()).collect();
        for e in problem.edges.edges() {
            if let (Some(a), Some(b)) = (local(e.from), local(e.to)) {
                union(&mut parent, a, b);
            }
        }
        let mut roots: Vec<usize> = Vec::new();
        for k in 0..layout.pools.len() {
            if layout.agent_coef[k].is_empty() {
                continue;
            }
            let r = find(&mut parent, k);
            if !roots.contains(&r) {
                roots.push(r);
            }
        }
        let mut eq = DMatrix::zeros(roots.len(), layout.n);
        for k in 0..layout.pools.len() {
            if layout.agent_coef[k].is_empty() {
                continue;
            }
            let row = roots.iter().position(|&r| r == find(&mut parent, k)).unwrap();
            for &(v, c) in &layout.agent_coef[k] {
                eq[(row, v)] += c;
            }
        }
        layout.eq = eq;
        layout
    }

    fn pool_value(&self, k: usize, z: &[f64]) -> f64 {
        self.base[k] + self.pool_coef[k].iter().map(|&(v, c)| c * z[v]).sum::<f64>()
    }

    fn agent_value(&self, k: usize, z: &[f64]) -> f64 {
        self.agent_coef[k].iter().map(|&(v, c)| c * z[v]).sum()
    }

    /// Second-order expansion of `phi(x')` for one CFMM, given its value,
    /// gradient and Hessian in pool coordinates.
    fn lift(&self, info: &CfmmInfo, value: f64, g: [f64; 2], h: [[f64; 2]; 2]) -> Term {
        let entries: Vec<(usize, usize, f64)> = (0..2)
            .flat_map(|j| self.pool_coef[info.pools[j]].iter().map(move |&(v, c)| (v, j, c)))
            .collect();
        let grad = entries.iter().map(|&(v, j, c)| (v, g[j] * c)).collect();
        let mut hess = Vec::new();
        for (a, &(va, ja, ca)) in entries.iter().enumerate() {
            for &(vb, jb, cb) in &entries[a..] {
                let d = h[ja][jb] * ca * cb;
                if d != 0.0 {
                    hess.push((va, vb, d));
                }
            }
        }
        Term { value, grad, hess }
    }

    fn local_pools(&self, info: &CfmmInfo, z: &[f64]) -> [f64; 2] {
        [self.pool_value(info.pools[0], z), self.pool_value(info.pools[1], z)]
    }

    fn log_liquidity(&self, info: &CfmmInfo, z: &[f64]) -> Term {
        let x = self.local_pools(info, z);
        let f = &info.function;
        self.lift(info, f.log_value(x), f.log_gradient(x), f.log_hessian(x))
    }

    /// `log F(x') - log F(x)` evaluated from the pool changes, avoiding the
    /// cancellation of two nearly equal logarithms.
    fn log_growth(&self, info: &CfmmInfo, z: &[f64]) -> f64 {
        let base = [self.base[info.pools[0]], self.base[info.pools[1]]];
        let change = [0, 1].map(|j| {
            self.pool_coef[info.pools[j]].iter().map(|&(v, c)| c * z[v]).sum::<f64>()
        });
        match info.function {
            TradingFunction::ConstantProduct => {
                (change[0] / base[0]).ln_1p() + (change[1] / base[1]).ln_1p()
            }
            TradingFunction::WeightedGeometricMean { w1, w2 } => {
                w1 * (change[0] / base[0]).ln_1p() + w2 * (change[1] / base[1]).ln_1p()
            }
            TradingFunction::Linear { a, b } => {
                ((a * change[0] + b * change[1]) / info.base_value).ln_1p()
            }
        }
    }

    fn non_reduction(&self, info: &CfmmInfo, z: &[f64]) -> Term {
        match info.linear_scale {
            Some(scale) => {
                let x = self.local_pools(info, z);
                let g = info.function.gradient(x);
                let value = (info.function.value(x) - info.base_value) / scale;
                self.lift(info, value, [g[0] / scale, g[1] / scale], [[0.0; 2]; 2])
            }
            None => {
                let mut t = self.log_liquidity(info, z);
                t.value = self.log_growth(info, z);
                t
            }
        }
    }

    fn constraint_terms(&self, z: &[f64], slack: Option<usize>) -> Vec<Term> {
        let mut out = Vec::new();
        for info in &self.cfmms {
            let mut t = self.non_reduction(info, z);
            if let Some(s) = slack {
                t.value -= z[s];
                t.grad.push((s, -1.0));
            }
            out.push(t);
        }
        for k in 0..self.pools.len() {
            if self.positive[k] {
                out.push(Term {
                    value: self.pool_value(k, z),
                    grad: self.pool_coef[k].clone(),
                    hess: Vec::new(),
                });
            }
            for &v in &self.sign_vars[k] {
                let mut t = Term { value: z[v], grad: vec![(v, 1.0)], hess: Vec::new() };
                if let Some(s) = slack {
                    t.value -= z[s];
                    t.grad.push((s, -1.0));
                }
                out.push(t);
            }
        }
        out
    }

    fn warm_start(&self, pools: &[[f64; 2]]) -> Result<Vec<f64>, SolverError> {
        let mut z = vec![0.0; self.n];
        for (k, p) in self.pools.iter().enumerate() {
            let target = pools
                .get(p.cfmm)
                .ok_or_else(|| SolverError::InvalidProblem("warm start has too few pools".into()))?
                [p.pool.index()];
            match self.pool_coef[k].first() {
                Some(&(v, _)) => z[v] = target - self.original[k],
                None if target != self.original[k] => {
                    return Err(SolverError::InvalidProblem(format!(
                        "warm start moves pool {:?} which has no edges",
                        (p.cfmm, p.pool.index())
                    )))
                }
                None => {}
            }
        }
        let residual = (&self.eq * nalgebra::DVector::from_column_slice(&z)).amax();
        let scale = self.original.iter().fold(1.0f64, |m, x| m.max(x.abs()));
        if residual > 1e-9 * scale {
            return Err(SolverError::InvalidProblem(format!(
                "warm start violates conservation by {residual:e}"
            )));
        }
        if self.constraint_terms(&z, None).iter().any(|t| !(t.value > 0.0)) {
            return Err(SolverError::InvalidProblem(
                "warm start is not strictly feasible".into(),
            ));
        }
        Ok(z)
    }

    /// Direction of each fee-charged pool at `z`: a flow is kept when one
    /// side dominates the other, otherwise the pool is frozen.
    fn flows(&self, z: &[f64]) -> Vec<(PoolRef, Flow)> {
        let classify = |k: usize| match self.pool_coef[k].as_slice() {
            [] => Flow::Fixed,
            &[(a, fee), (v, _)] => {
                let (inflow, outflow) = (fee * z[a], z[v]);
                if inflow > 100.0 * outflow {
                    Flow::Inflow
                } else if outflow > 100.0 * inflow {
                    Flow::Outflow
                } else {
                    Flow::Fixed
                }
            }
            _ => Flow::Both,
        };
        self.pools.iter().enumerate().map(|(k, &p)| (p, classify(k))).collect()
    }

    /// Returns `None` when no point improves every CFMM at once. Fee-charged
    /// pools whose direction is undetermined make the optimum degenerate;
    /// if the first attempt misses the tolerance their directions are read
    /// off its result and the component is solved again.
    pub fn solve(
        problem: &RebalanceProblem,
        members: &[usize],
        opts: &SolverOptions,
    ) -> Result<Option<(Layout, ComponentResult)>, SolverError> {
        let layout = Layout::new(problem, members, opts.oracle_handling, &|_| Flow::Both);
        let Some((first, z)) = layout.attempt(opts)? else {
            return Ok(None);
        };
        let has_split = layout.pool_coef.iter().any(|c| c.len() == 2);
        if first.kkt_residual <= opts.tol || !has_split {
            return layout.accept(first, opts).map(|r| Some((layout, r)));
        }
        let flows = layout.flows(&z);
        let refined = Layout::new(problem, members, opts.oracle_handling, &|p| {
            flows.iter().find(|(q, _)| *q == p).map_or(Flow::Both, |(_, f)| *f)
        });
        match refined.attempt(opts)? {
            Some((second, _)) if second.kkt_residual < first.kkt_residual => {
                refined.accept(second, opts).map(|r| Some((refined, r)))
            }
            _ => layout.accept(first, opts).map(|r| Some((layout, r))),
        }
    }

    fn accept(&self, result: ComponentResult, opts: &SolverOptions) -> Result<ComponentResult, SolverError> {
        if result.kkt_residual <= opts.tol {
            Ok(result)
        } else {
            Err(SolverError::SolverDiverged { residual: result.kkt_residual, tol: opts.tol })
        }
    }

    fn attempt(&self, opts: &SolverOptions) -> Result<Option<(ComponentResult, Vec<f64>)>, SolverError> {
        let n = self.n;
        if n == 0 || self.cfmms.is_empty() {
            return Ok(None);
        }
        let diverged = |_: BarrierError| SolverError::SolverDiverged {
            residual: f64::INFINITY,
            tol: opts.tol,
        };
        let mut eq1 = DMatrix::zeros(self.eq.nrows(), n + 1);
        eq1.view_mut((0, 0), (self.eq.nrows(), n)).copy_from(&self.eq);
        let feasibility = Phase { layout: self, eq: eq1, slack: Some(n) };

        let mut z = vec![0.0; n];
        let worst = self
            .cfmms
            .iter()
            .map(|c| self.non_reduction(c, &z).value)
            .fold(0.0, f64::min);
        z.push(worst - 1.0);
        let schedule = Schedule {
            t0: 1.0,
            factor: 5.0,
            gap_tol: NEGLIGIBLE,
            max_stages: 40,
            max_newton: opts.max_iter,
            kkt_tol: None,
        };
        let found = barrier::run(&feasibility, z, schedule, &|z| z[n] >= READY, &|_| true)
            .map_err(diverged)?;
        if found.z[n] < NEGLIGIBLE {
            return Ok(None);
        }
        let mut z = found.z[..n].to_vec();
        if let Some(pools) = &opts.initial_pools {
            z = self.warm_start(pools)?;
        }

        let program = Phase { layout: self, eq: self.eq.clone(), slack: None };
        let m = program.constraints(&z).len() as f64;
        let growth = 5f64.powi(opts.stages.saturating_sub(1) as i32);
        let schedule = Schedule {
            t0: (m / (opts.tol * growth) * (1.0 + 1e-9)).max(1.0),
            factor: 5.0,
            gap_tol: opts.tol,
            max_stages: opts.stages.max(1) + EXTRA_STAGES,
            max_newton: opts.max_iter,
            kkt_tol: Some(opts.tol),
        };
        let settled = |z: &[f64]| {
            self.cfmms
                .iter()
                .filter(|c| c.weight.is_none())
                .all(|c| self.non_reduction(c, z).value <= PASSIVE_SLACK)
        };
        let out = barrier::run(&program, z, schedule, &|_| false, &settled).map_err(diverged)?;
        let k = self.pools.len();
        let result = ComponentResult {
            pool_change: (0..k).map(|p| self.pool_value(p, &out.z) - self.base[p]).collect(),
            agent_change: (0..k).map(|p| self.agent_value(p, &out.z)).collect(),
            inflow: (0..k).map(|p| self.inflow_var[p].map_or(0.0, |v| out.z[v])).collect(),
            kkt_residual: out.kkt_residual,
            iterations: found.iterations + out.iterations,
        };
        Ok(Some((result, out.z)))
    }
}

struct Phase<'a> {
    layout: &'a Layout,
    eq: DMatrix<f64>,
    /// Index of the shared margin variable during the feasibility phase.
    slack: Option<usize>,
}

impl Program for Phase<'_> {
    fn dim(&self) -> usize {
        self.eq.ncols()
    }

    fn equality(&self) -> &DMatrix<f64> {
        &self.eq
    }

    fn objective(&self, z: &[f64]) -> Term {
        if let Some(s) = self.slack {
            return Term { value: z[s], grad: vec![(s, 1.0)], hess: Vec::new() };
        }
        let mut total = Term::default();
        for info in &self.layout.cfmms {
            let Some(w) = info.weight else { continue };
            let t = self.layout.log_liquidity(info, z);
            total.value += w * t.value;
            total.grad.extend(t.grad.into_iter().map(|(v, d)| (v, w * d)));
            total.hess.extend(t.hess.into_iter().map(|(a, b, d)| (a, b, w * d)));
        }
        total
    }

    fn constraints(&self, z: &[f64]) -> Vec<Term> {
        self.layout.constraint_terms(z, self.slack)
    }
}
