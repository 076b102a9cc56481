use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::banded::SymBand;
use super::{EvalError, NlpProblem};
use crate::model::Matrix;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NlpError {
    #[error("inconsistent problem dimensions: {0}")]
    Dimension(String),
    #[error("initial guess is outside the domain of element {element}")]
    InitialInfeasible { element: usize },
    #[error("non-finite value in element {element}")]
    NonFinite { element: usize },
}

/// Bound-constrained minimizer used for the augmented Lagrangian subproblems.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InnerSolver {
    /// Projected Newton with a banded Cholesky factorization.
    #[default]
    ProjectedNewton,
    /// Projected limited-memory BFGS.
    ProjectedLbfgs,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NlpOptions {
    pub constraint_tol: f64,
    pub stationarity_tol: f64,
    pub max_outer: usize,
    pub max_inner: usize,
    pub initial_penalty: f64,
    pub max_penalty: f64,
    pub inner_solver: InnerSolver,
    pub lbfgs_memory: usize,
}

impl Default for NlpOptions {
    fn default() -> Self {
        NlpOptions {
            constraint_tol: 1e-8,
            stationarity_tol: 1e-6,
            max_outer: 50,
            max_inner: 500,
            initial_penalty: 100.0,
            max_penalty: 1e10,
            inner_solver: InnerSolver::ProjectedNewton,
            lbfgs_memory: 10,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum NlpStatus {
    Converged,
    MaxIterations,
}

#[derive(Clone, Debug)]
pub struct NlpSolution {
    pub z: Vec<f64>,
    pub objective: f64,
    pub constraints: Vec<f64>,
    pub multipliers: Vec<f64>,
    pub status: NlpStatus,
    pub outer_iterations: usize,
    pub inner_iterations: usize,
    pub constraint_violation: f64,
    pub projected_gradient: f64,
    pub penalty: f64,
    /// Augmented Lagrangian values at accepted steps, one list per outer iteration.
    pub merit_history: Vec<Vec<f64>>,
}

/// Augmented Lagrangian values and first derivatives at one point.
struct Linearization {
    merit: f64,
    objective: f64,
    c: Vec<f64>,
    grad: Vec<f64>,
    obj_grads: Vec<Vec<f64>>,
    jacs: Vec<Matrix>,
}

struct Context<'a> {
    p: &'a NlpProblem,
    y: Vec<f64>,
    mu: f64,
}

fn abort(k: usize, e: EvalError) -> NlpError {
    match e {
        EvalError::Domain => NlpError::InitialInfeasible { element: k },
        EvalError::NonFinite => NlpError::NonFinite { element: k },
    }
}

impl Context<'_> {
    fn merit(&self, z: &[f64]) -> Result<(f64, f64, Vec<f64>), (usize, EvalError)> {
        let (f, c) = self.p.evaluate(z)?;
        let mut m = f;
        for (ci, yi) in c.iter().zip(&self.y) {
            m += yi * ci + 0.5 * self.mu * ci * ci;
        }
        Ok((m, f, c))
    }

    fn linearize(&self, z: &[f64]) -> Result<Linearization, NlpError> {
        let (merit, objective, c) = self.merit(z).map_err(|(k, e)| abort(k, e))?;
        let mut grad = vec![0.0; self.p.num_vars()];
        let mut obj_grads = Vec::with_capacity(self.p.elements().len());
        let mut jacs = Vec::with_capacity(self.p.elements().len());
        for (k, e) in self.p.elements().iter().enumerate() {
            let (off, w) = (e.offset(), e.width());
            let nc = e.num_constraints();
            let co = self.p.constraint_offset(k);
            let mut g = vec![0.0; w];
            let mut jac = Matrix::zeros(nc, w);
            e.first_order(&z[off..off + w], &mut g, &mut jac)
                .map_err(|_| NlpError::NonFinite { element: k })?;
            for j in 0..w {
                let mut s = g[j];
                for r in 0..nc {
                    s += jac[(r, j)] * (self.y[co + r] + self.mu * c[co + r]);
                }
                grad[off + j] += s;
            }
            obj_grads.push(g);
            jacs.push(jac);
        }
        Ok(Linearization {
            merit,
            objective,
            c,
            grad,
            obj_grads,
            jacs,
        })
    }

    fn hessian(&self, z: &[f64], lin: &Linearization) -> SymBand {
        let mut h = SymBand::zeros(self.p.num_vars(), self.p.bandwidth());
        for (k, e) in self.p.elements().iter().enumerate() {
            let (off, w) = (e.offset(), e.width());
            let nc = e.num_constraints();
            let co = self.p.constraint_offset(k);
            let lambda: Vec<f64> = (0..nc)
                .map(|r| self.y[co + r] + self.mu * lin.c[co + r])
                .collect();
            let mut he = Matrix::zeros(w, w);
            if e.curvature(&z[off..off + w], &lambda, &mut he).is_err() {
                he.fill(0.0);
            }
            let jac = &lin.jacs[k];
            let gn = jac.tr_mul(jac) * self.mu;
            for i in 0..w {
                for j in 0..=i {
                    h.add(
                        off + i,
                        off + j,
                        0.5 * (he[(i, j)] + he[(j, i)]) + gn[(i, j)],
                    );
                }
            }
        }
        h
    }

    fn clamp(&self, i: usize, v: f64) -> f64 {
        v.max(self.p.lower()[i]).min(self.p.upper()[i])
    }

    fn projected_gradient(&self, z: &[f64], g: &[f64]) -> f64 {
        (0..z.len())
            .map(|i| (z[i] - self.clamp(i, z[i] - g[i])).abs())
            .fold(0.0, f64::max)
    }
}

/// Solve `min f(z)` subject to `c(z) = 0` and `lower <= z <= upper`.
pub fn solve(problem: &NlpProblem, z0: &[f64], opts: &NlpOptions) -> Result<NlpSolution, NlpError> {
    if z0.len() != problem.num_vars() {
        return Err(NlpError::Dimension(format!(
            "initial guess has {} entries, problem has {}",
            z0.len(),
            problem.num_vars()
        )));
    }
    let mut ctx = Context {
        p: problem,
        y: vec![0.0; problem.num_constraints()],
        mu: 0.0,
    };
    let mut z: Vec<f64> = z0
        .iter()
        .enumerate()
        .map(|(i, &v)| ctx.clamp(i, v))
        .collect();
    let lin0 = ctx.linearize(&z)?;
    ctx.y = least_squares_multipliers(problem, &z, &lin0);
    ctx.mu = opts.initial_penalty;

    let inner_tol = 0.5 * opts.stationarity_tol;
    let mut merit_history = Vec::new();
    let mut inner_total = 0;
    let mut prev_violation = f64::INFINITY;
    let mut outer = 0;
    let mut status = NlpStatus::MaxIterations;
    let mut pg = f64::INFINITY;
    let mut last_c = lin0.c.clone();
    let mut objective = lin0.objective;

    while outer < opts.max_outer {
        outer += 1;
        let mut history = Vec::new();
        let (iters, lin) = match opts.inner_solver {
            InnerSolver::ProjectedNewton => {
                projected_newton(&ctx, &mut z, inner_tol, opts.max_inner, &mut history)?
            }
            InnerSolver::ProjectedLbfgs => projected_lbfgs(
                &ctx,
                &mut z,
                inner_tol,
                opts.max_inner,
                opts.lbfgs_memory,
                &mut history,
            )?,
        };
        inner_total += iters;
        merit_history.push(history);
        pg = ctx.projected_gradient(&z, &lin.grad);
        let violation = lin.c.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        for (yi, ci) in ctx.y.iter_mut().zip(&lin.c) {
            *yi += ctx.mu * ci;
        }
        last_c = lin.c;
        objective = lin.objective;
        if violation <= opts.constraint_tol && pg <= opts.stationarity_tol {
            status = NlpStatus::Converged;
            break;
        }
        if violation > 0.25 * prev_violation {
            ctx.mu = (ctx.mu * 10.0).min(opts.max_penalty);
        }
        prev_violation = violation;
    }
    let violation = last_c.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    Ok(NlpSolution {
        z,
        objective,
        constraints: last_c,
        multipliers: ctx.y,
        status,
        outer_iterations: outer,
        inner_iterations: inner_total,
        constraint_violation: violation,
        projected_gradient: pg,
        penalty: ctx.mu,
        merit_history,
    })
}

/// `y = -(J Jᵀ)⁻¹ J ∇f` over the variables strictly inside their bounds.
fn least_squares_multipliers(p: &NlpProblem, z: &[f64], lin: &Linearization) -> Vec<f64> {
    let m = p.num_constraints();
    if m == 0 {
        return Vec::new();
    }
    let free: Vec<bool> = (0..z.len())
        .map(|i| z[i] > p.lower()[i] && z[i] < p.upper()[i])
        .collect();
    let elements = p.elements();
    let mut fgrad = vec![0.0; z.len()];
    for (k, e) in elements.iter().enumerate() {
        for (j, g) in lin.obj_grads[k].iter().enumerate() {
            fgrad[e.offset() + j] += g;
        }
    }
    let mut bw = 0;
    for a in 0..elements.len() {
        let end = elements[a].offset() + elements[a].width();
        let mut b = a;
        while b < elements.len() && elements[b].offset() < end {
            let last = p.constraint_offset(b) + elements[b].num_constraints();
            if last > 0 {
                bw = bw.max((last - 1).saturating_sub(p.constraint_offset(a)));
            }
            b += 1;
        }
    }
    let mut jjt = SymBand::zeros(m, bw);
    let mut rhs = vec![0.0; m];
    for a in 0..elements.len() {
        let ea = &elements[a];
        let (oa, wa, ca) = (ea.offset(), ea.width(), p.constraint_offset(a));
        let ja = &lin.jacs[a];
        for r in 0..ea.num_constraints() {
            let mut s = 0.0;
            for j in 0..wa {
                if free[oa + j] {
                    s += ja[(r, j)] * fgrad[oa + j];
                }
            }
            rhs[ca + r] = -s;
        }
        let end = oa + wa;
        let mut b = a;
        while b < elements.len() && elements[b].offset() < end {
            let eb = &elements[b];
            let (ob, wb, cb) = (eb.offset(), eb.width(), p.constraint_offset(b));
            let jb = &lin.jacs[b];
            let lo = oa.max(ob);
            let hi = end.min(ob + wb);
            for r in 0..ea.num_constraints() {
                for q in 0..eb.num_constraints() {
                    if cb + q < ca + r {
                        continue;
                    }
                    let mut s = 0.0;
                    for col in lo..hi {
                        if free[col] {
                            s += ja[(r, col - oa)] * jb[(q, col - ob)];
                        }
                    }
                    if s != 0.0 {
                        jjt.add(cb + q, ca + r, s);
                    }
                }
            }
            b += 1;
        }
    }
    let scale = (0..m)
        .map(|i| jjt.diag(i))
        .fold(0.0f64, f64::max)
        .max(1e-300);
    jjt.add_diag(1e-12 * scale);
    match jjt.cholesky() {
        Some(ch) => {
            let y = ch.solve(&rhs);
            if y.iter().all(|v| v.is_finite()) {
                y
            } else {
                vec![0.0; m]
            }
        }
        None => vec![0.0; m],
    }
}

const ARMIJO: f64 = 1e-4;
const MAX_BACKTRACK: usize = 40;

/// Backtracking along the projection arc `P(z + α d)`.
fn arc_search(
    ctx: &Context<'_>,
    z: &[f64],
    d: &[f64],
    g: &[f64],
    merit: f64,
    alpha0: f64,
) -> Option<(Vec<f64>, f64)> {
    let mut alpha = alpha0;
    let mut trial = vec![0.0; z.len()];
    for _ in 0..MAX_BACKTRACK {
        let mut pred = 0.0;
        for i in 0..z.len() {
            trial[i] = ctx.clamp(i, z[i] + alpha * d[i]);
            pred += g[i] * (trial[i] - z[i]);
        }
        if let Ok((mt, _, _)) = ctx.merit(&trial) {
            if mt <= merit + ARMIJO * pred.min(0.0) && mt <= merit {
                return Some((trial, mt));
            }
        }
        alpha *= 0.5;
    }
    None
}

fn projected_newton(
    ctx: &Context<'_>,
    z: &mut Vec<f64>,
    tol: f64,
    max_iter: usize,
    history: &mut Vec<f64>,
) -> Result<(usize, Linearization), NlpError> {
    let n = z.len();
    let mut lin = ctx.linearize(z)?;
    let mut shift = 0.0f64;
    let mut iters = 0;
    while iters < max_iter {
        let pg = ctx.projected_gradient(z, &lin.grad);
        if pg <= tol {
            break;
        }
        iters += 1;
        let eps = pg.min(1e-3);
        let g = &lin.grad;
        let active: Vec<bool> = (0..n)
            .map(|i| {
                (z[i] <= ctx.p.lower()[i] + eps && g[i] > 0.0)
                    || (z[i] >= ctx.p.upper()[i] - eps && g[i] < 0.0)
            })
            .collect();
        let mut h = ctx.hessian(z, &lin);
        let scale = (0..n)
            .map(|i| h.diag(i).abs())
            .fold(0.0f64, f64::max)
            .max(1e-12);
        for i in 0..n {
            if active[i] {
                let d = h.diag(i).max(1e-8 * scale);
                h.isolate(i, d);
            }
        }
        let mut chol = None;
        let mut tau = if shift > 0.0 { shift * 0.1 } else { 0.0 };
        for _ in 0..60 {
            let mut hs = h.clone();
            if tau > 0.0 {
                hs.add_diag(tau);
            }
            if let Some(c) = hs.cholesky() {
                chol = Some(c);
                break;
            }
            tau = if tau == 0.0 {
                1e-10 * scale
            } else {
                tau * 10.0
            };
        }
        shift = tau;
        let neg: Vec<f64> = g.iter().map(|v| -v).collect();
        let mut d = match chol {
            Some(c) => c.solve(&neg),
            None => neg.clone(),
        };
        if d.iter().zip(g).map(|(a, b)| a * b).sum::<f64>() >= 0.0 {
            d = neg.clone();
        }
        let step = arc_search(ctx, z, &d, g, lin.merit, 1.0).or_else(|| {
            let gn = g.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1e-300);
            arc_search(ctx, z, &neg, g, lin.merit, 1.0 / gn)
        });
        match step {
            Some((zt, mt)) => {
                let stalled = zt
                    .iter()
                    .zip(z.iter())
                    .all(|(a, b)| (a - b).abs() <= 1e-15 * (1.0 + b.abs()));
                *z = zt;
                history.push(mt);
                lin = ctx.linearize(z)?;
                if stalled {
                    break;
                }
            }
            None => break,
        }
    }
    Ok((iters, lin))
}

fn projected_lbfgs(
    ctx: &Context<'_>,
    z: &mut Vec<f64>,
    tol: f64,
    max_iter: usize,
    memory: usize,
    history: &mut Vec<f64>,
) -> Result<(usize, Linearization), NlpError> {
    let n = z.len();
    let mut lin = ctx.linearize(z)?;
    let mut pairs: std::collections::VecDeque<(Vec<f64>, Vec<f64>, f64)> = Default::default();
    let mut iters = 0;
    while iters < max_iter {
        let pg = ctx.projected_gradient(z, &lin.grad);
        if pg <= tol {
            break;
        }
        iters += 1;
        let g = &lin.grad;
        let eps = pg.min(1e-3);
        let free: Vec<bool> = (0..n)
            .map(|i| {
                !((z[i] <= ctx.p.lower()[i] + eps && g[i] > 0.0)
                    || (z[i] >= ctx.p.upper()[i] - eps && g[i] < 0.0))
            })
            .collect();
        let mut q: Vec<f64> = (0..n).map(|i| if free[i] { g[i] } else { 0.0 }).collect();
        let mut alphas = Vec::with_capacity(pairs.len());
        for (s, y, rho) in pairs.iter().rev() {
            let a = rho * dot_free(s, &q, &free);
            for i in 0..n {
                if free[i] {
                    q[i] -= a * y[i];
                }
            }
            alphas.push(a);
        }
        let gamma = pairs
            .back()
            .map(|(s, y, _)| dot_free(s, y, &free) / dot_free(y, y, &free).max(1e-300))
            .filter(|v| *v > 0.0 && v.is_finite())
            .unwrap_or(1.0);
        for v in q.iter_mut() {
            *v *= gamma;
        }
        for ((s, y, rho), a) in pairs.iter().zip(alphas.iter().rev()) {
            let b = rho * dot_free(y, &q, &free);
            for i in 0..n {
                if free[i] {
                    q[i] += (a - b) * s[i];
                }
            }
        }
        let mut d: Vec<f64> = (0..n)
            .map(|i| if free[i] { -q[i] } else { -g[i] })
            .collect();
        if d.iter().zip(g).map(|(a, b)| a * b).sum::<f64>() >= 0.0 {
            d = g.iter().map(|v| -v).collect();
            pairs.clear();
        }
        let alpha0 = if pairs.is_empty() {
            1.0 / d.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1.0)
        } else {
            1.0
        };
        match arc_search(ctx, z, &d, g, lin.merit, alpha0) {
            Some((zt, mt)) => {
                let new_lin = ctx.linearize(&zt)?;
                let s: Vec<f64> = zt.iter().zip(z.iter()).map(|(a, b)| a - b).collect();
                let y: Vec<f64> = new_lin
                    .grad
                    .iter()
                    .zip(&lin.grad)
                    .map(|(a, b)| a - b)
                    .collect();
                let sy: f64 = s.iter().zip(&y).map(|(a, b)| a * b).sum();
                let ss: f64 = s.iter().map(|v| v * v).sum();
                if sy > 1e-12 * ss && sy.is_finite() {
                    pairs.push_back((s, y, 1.0 / sy));
                    if pairs.len() > memory {
                        pairs.pop_front();
                    }
                }
                *z = zt;
                history.push(mt);
                lin = new_lin;
            }
            None => break,
        }
    }
    Ok((iters, lin))
}

fn dot_free(a: &[f64], b: &[f64], free: &[bool]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        if free[i] {
            s += a[i] * b[i];
        }
    }
    s
}
