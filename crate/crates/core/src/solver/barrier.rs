//! Equality-constrained log-barrier method with Newton centering.

use nalgebra::{DMatrix, DVector};

/// A scalar function of the variables with sparse first and second
/// derivatives. Hessian entries are listed once per unordered pair.
#[derive(Debug, Clone, Default)]
pub(crate) struct Term {
    pub value: f64,
    pub grad: Vec<(usize, f64)>,
    pub hess: Vec<(usize, usize, f64)>,
}

/// Maximize `objective(z)` subject to `equality * z = 0` and every
/// constraint term strictly positive.
pub(crate) trait Program {
    fn dim(&self) -> usize;
    fn equality(&self) -> &DMatrix<f64>;
    fn objective(&self, z: &[f64]) -> Term;
    fn constraints(&self, z: &[f64]) -> Vec<Term>;
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Schedule {
    pub t0: f64,
    pub factor: f64,
    pub gap_tol: f64,
    pub max_stages: usize,
    pub max_newton: usize,
    /// When set, convergence also requires this KKT residual, and the stage
    /// with the smallest residual is returned instead of the last one.
    pub kkt_tol: Option<f64>,
}

#[derive(Debug, Clone)]
pub(crate) struct Outcome {
    pub z: Vec<f64>,
    pub iterations: usize,
    pub kkt_residual: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum BarrierError {
    Infeasible,
    Singular,
}

/// Barrier value `-t f(z) - sum ln c_i(z)`, or `None` outside the domain.
fn value<P: Program>(p: &P, z: &[f64], t: f64) -> Option<f64> {
    let mut v = -t * p.objective(z).value;
    for c in p.constraints(z) {
        if !(c.value > 0.0) || !c.value.is_finite() {
            return None;
        }
        v -= c.value.ln();
    }
    v.is_finite().then_some(v)
}

fn derivatives<P: Program>(p: &P, z: &[f64], t: f64) -> Option<(f64, DVector<f64>, DMatrix<f64>)> {
    let n = p.dim();
    let mut g = DVector::zeros(n);
    let mut h = DMatrix::zeros(n, n);
    let obj = p.objective(z);
    let mut v = -t * obj.value;
    for &(i, d) in &obj.grad {
        g[i] -= t * d;
    }
    for &(i, j, d) in &obj.hess {
        h[(i, j)] -= t * d;
        if i != j {
            h[(j, i)] -= t * d;
        }
    }
    for c in p.constraints(z) {
        let u = c.value;
        if !(u > 0.0) || !u.is_finite() {
            return None;
        }
        v -= u.ln();
        for &(i, d) in &c.grad {
            g[i] -= d / u;
        }
        for &(i, j, d) in &c.hess {
            h[(i, j)] -= d / u;
            if i != j {
                h[(j, i)] -= d / u;
            }
        }
        let u2 = u * u;
        for &(i, a) in &c.grad {
            for &(j, b) in &c.grad {
                h[(i, j)] += a * b / u2;
            }
        }
    }
    v.is_finite().then_some((v, g, h))
}

/// Solves `[H A^T; A 0] [dz; w] = [-g; 0]`.
fn newton_step(h: &DMatrix<f64>, g: &DVector<f64>, a: &DMatrix<f64>) -> Option<DVector<f64>> {
    let n = h.nrows();
    let m = a.nrows();
    let mut k = DMatrix::zeros(n + m, n + m);
    k.view_mut((0, 0), (n, n)).copy_from(h);
    k.view_mut((n, 0), (m, n)).copy_from(a);
    k.view_mut((0, n), (n, m)).copy_from(&a.transpose());
    let mut rhs = DVector::zeros(n + m);
    rhs.rows_mut(0, n).copy_from(&(-g));
    let scale = h.diagonal().amax().max(1e-300);
    for attempt in 0..4 {
        if attempt > 0 {
            let reg = scale * 1e-14 * 100f64.powi(attempt);
            for i in 0..n {
                k[(i, i)] += reg;
            }
        }
        if let Some(sol) = k.clone().lu().solve(&rhs) {
            if sol.iter().all(|x| x.is_finite()) {
                return Some(sol.rows(0, n).into_owned());
            }
        }
    }
    None
}

/// Orthogonal projector onto `{d : a d = 0}`; keeps rounding errors of
/// the KKT solve from accumulating into the equality constraints.
fn null_space_projector(a: &DMatrix<f64>) -> Option<(DMatrix<f64>, DMatrix<f64>)> {
    if a.nrows() == 0 {
        return None;
    }
    let pinv = a.clone().pseudo_inverse(1e-12).ok()?;
    let proj = DMatrix::identity(a.ncols(), a.ncols()) - &pinv * a;
    Some((proj, pinv))
}

/// Removes the equality residual that long steps pick up through rounding,
/// provided the corrected point stays strictly feasible.
fn restore_equality<P: Program>(p: &P, z: &mut Vec<f64>, pinv: &DMatrix<f64>, t: f64) {
    let r = p.equality() * DVector::from_column_slice(z);
    if r.amax() == 0.0 {
        return;
    }
    let fix = pinv * r;
    let trial: Vec<f64> = z.iter().zip(fix.iter()).map(|(x, d)| x - d).collect();
    if value(p, &trial, t).is_some() {
        *z = trial;
    }
}

/// Newton iterations at fixed `t`. Returns the iteration count.
fn center<P: Program>(
    p: &P,
    z: &mut Vec<f64>,
    t: f64,
    max_newton: usize,
) -> Result<usize, BarrierError> {
    let a = p.equality();
    let projector = null_space_projector(a);
    for it in 0..max_newton {
        let (v, g, h) = derivatives(p, z, t).ok_or(BarrierError::Infeasible)?;
        let dz = newton_step(&h, &g, a).ok_or(BarrierError::Singular)?;
        let dz = match &projector {
            Some((proj, _)) => proj * dz,
            None => dz,
        };
        let slope = g.dot(&dz);
        let z_scale = z.iter().fold(1.0f64, |m, x| m.max(x.abs()));
        if -slope / 2.0 <= 1e-20 * v.abs().max(1.0)
            || !(slope < 0.0)
            || dz.amax() <= 1e-12 * z_scale
        {
            return Ok(it);
        }
        // Near the optimum the decrease falls below the rounding error of
        // the barrier value; plain Newton steps are then taken if feasible.
        if -slope <= 1e-11 * v.abs().max(1.0) {
            let trial: Vec<f64> = z.iter().zip(dz.iter()).map(|(x, d)| x + d).collect();
            if value(p, &trial, t).is_some() {
                *z = trial;
                if let Some((_, pinv)) = &projector {
                    restore_equality(p, z, pinv, t);
                }
                continue;
            }
        }
        let mut alpha = 1.0;
        let mut moved = false;
        while alpha > 1e-16 {
            let trial: Vec<f64> = z.iter().zip(dz.iter()).map(|(x, d)| x + alpha * d).collect();
            if let Some(tv) = value(p, &trial, t) {
                if tv <= v + 0.25 * alpha * slope {
                    *z = trial;
                    if let Some((_, pinv)) = &projector {
                        restore_equality(p, z, pinv, t);
                    }
                    moved = true;
                    break;
                }
            }
            alpha *= 0.5;
        }
        if !moved {
            return Ok(it + 1);
        }
    }
    Ok(max_newton)
}

/// Runs the barrier schedule from a strictly feasible `z0`. `stop` is
/// checked after each centering and ends the run early when it holds;
/// convergence additionally requires `settled`.
pub(crate) fn run<P: Program>(
    p: &P,
    z0: Vec<f64>,
    schedule: Schedule,
    stop: &dyn Fn(&[f64]) -> bool,
    settled: &dyn Fn(&[f64]) -> bool,
) -> Result<Outcome, BarrierError> {
    let mut z = z0;
    if value(p, &z, schedule.t0).is_none() {
        return Err(BarrierError::Infeasible);
    }
    let m = p.constraints(&z).len().max(1) as f64;
    let mut t = schedule.t0;
    let mut iterations = 0;
    let mut best: Option<(bool, Outcome)> = None;
    for stage in 0..schedule.max_stages {
        iterations += center(p, &mut z, t, schedule.max_newton)?;
        let kkt = kkt_residual(p, &z, t).ok_or(BarrierError::Infeasible)?;
        let accurate = schedule.kkt_tol.is_none_or(|tol| kkt <= tol);
        let good = accurate && settled(&z);
        if best.as_ref().is_none_or(|(g, b)| (good && !g) || (good == *g && kkt < b.kkt_residual)) {
            best = Some((good, Outcome { z: z.clone(), iterations, kkt_residual: kkt }));
        }
        let converged = m / t <= schedule.gap_tol && good;
        if stop(&z) || converged || stage + 1 == schedule.max_stages {
            break;
        }
        t *= schedule.factor;
    }
    let (_, mut out) = best.expect("at least one stage runs");
    if schedule.kkt_tol.is_none() {
        out.z = z;
    }
    out.iterations = iterations;
    Ok(out)
}

/// KKT residual of `z` with multipliers `1 / (t c_i)`, refined by least
/// squares on constraints that are nearly binding. Returns the larger of the
/// stationarity and complementarity residuals.
fn kkt_residual<P: Program>(p: &P, z: &[f64], t: f64) -> Option<f64> {
    let n = p.dim();
    let mut r: DVector<f64> = DVector::zeros(n);
    for &(i, d) in &p.objective(z).grad {
        r[i] += d;
    }
    let constraints = p.constraints(z);
    let mut tight = Vec::new();
    for (k, c) in constraints.iter().enumerate() {
        if !(c.value > 0.0) {
            return None;
        }
        for &(i, d) in &c.grad {
            r[i] += d / (t * c.value);
        }
        if c.value < t.sqrt().recip() {
            tight.push(k);
        }
    }
    let eq = p.equality();
    let mut basis = DMatrix::zeros(n, eq.nrows() + tight.len());
    basis.view_mut((0, 0), (n, eq.nrows())).copy_from(&eq.transpose());
    for (col, &k) in tight.iter().enumerate() {
        for &(i, d) in &constraints[k].grad {
            basis[(i, eq.nrows() + col)] += d;
        }
    }
    let plain = residual_with(&r, &basis.columns(0, eq.nrows()).into_owned(), t.recip());
    if tight.is_empty() {
        return Some(plain);
    }
    let mut complementarity = t.recip();
    let Ok(w) = basis.clone().svd(true, true).solve(&(-&r), 1e-12) else {
        return Some(plain);
    };
    let mut w_clipped = w.clone();
    for (col, &k) in tight.iter().enumerate() {
        let j = eq.nrows() + col;
        let base = 1.0 / (t * constraints[k].value);
        let refined = (base + w[j]).max(0.0);
        w_clipped[j] = refined - base;
        complementarity = complementarity.max(refined * constraints[k].value);
    }
    let refined = (r + basis * w_clipped).amax().max(complementarity);
    Some(plain.min(refined))
}

/// Stationarity after eliminating the equality multipliers, combined with
/// a given complementarity residual.
fn residual_with(r: &DVector<f64>, eq_t: &DMatrix<f64>, complementarity: f64) -> f64 {
    if eq_t.ncols() == 0 {
        return r.amax().max(complementarity);
    }
    let stationarity = match eq_t.clone().svd(true, true).solve(&(-r), 1e-12) {
        Ok(nu) => (r + eq_t * nu).amax(),
        Err(_) => r.amax(),
    };
    stationarity.max(complementarity)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// maximize ln x + ln y subject to x + y = 2 (via z = (x, y) shifted).
    struct Simplex {
        eq: DMatrix<f64>,
    }

    impl Program for Simplex {
        fn dim(&self) -> usize {
            2
        }
        fn equality(&self) -> &DMatrix<f64> {
            &self.eq
        }
        fn objective(&self, z: &[f64]) -> Term {
            let (x, y) = (0.5 + z[0], 1.5 + z[1]);
            Term {
                value: x.ln() + y.ln(),
                grad: vec![(0, 1.0 / x), (1, 1.0 / y)],
                hess: vec![(0, 0, -1.0 / (x * x)), (1, 1, -1.0 / (y * y))],
            }
        }
        fn constraints(&self, z: &[f64]) -> Vec<Term> {
            vec![
                Term { value: 0.5 + z[0], grad: vec![(0, 1.0)], hess: vec![] },
                Term { value: 1.5 + z[1], grad: vec![(1, 1.0)], hess: vec![] },
            ]
        }
    }

    #[test]
    fn balances_two_logs() {
        let p = Simplex { eq: DMatrix::from_row_slice(1, 2, &[1.0, 1.0]) };
        let schedule = Schedule { t0: 1.0, factor: 5.0, gap_tol: 1e-9, max_stages: 30, max_newton: 100, kkt_tol: None };
        let out = run(&p, vec![0.0, 0.0], schedule, &|_| false, &|_| true).unwrap();
        assert!((out.z[0] - 0.5).abs() < 1e-8, "{:?}", out.z);
        assert!(out.kkt_residual <= 1e-8);
    }
}
