//! Implicit midpoint time stepping.

use std::time::Instant;

use serde::Serialize;
use thiserror::Error;

use crate::model::{Matrix, ModelError, RiphsModel, Vector};
use crate::trajectory::{SolverMetadata, TrajectorySolution};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IntegrateError {
    #[error("invalid horizon: {0}")]
    InvalidHorizon(String),
    #[error("expected {expected} controls, got {got}")]
    ControlCount { expected: usize, got: usize },
    #[error("initial state: {0}")]
    Initial(ModelError),
    #[error("step {index} failed: {reason}")]
    Step { index: usize, reason: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Final time and step size; `t_f` is snapped to `K·dt` with `K = round(t_f/dt)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct HorizonSpec {
    pub t_f: f64,
    pub dt: f64,
    pub steps: usize,
}

impl HorizonSpec {
    pub fn new(t_f: f64, dt: f64) -> Result<Self, IntegrateError> {
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(IntegrateError::InvalidHorizon(format!("dt = {dt}")));
        }
        if !(t_f > 0.0) || !t_f.is_finite() {
            return Err(IntegrateError::InvalidHorizon(format!("t_f = {t_f}")));
        }
        let steps = (t_f / dt).round() as usize;
        if steps == 0 {
            return Err(IntegrateError::InvalidHorizon(format!(
                "t_f = {t_f} is shorter than half a step"
            )));
        }
        Ok(HorizonSpec {
            t_f: steps as f64 * dt,
            dt,
            steps,
        })
    }

    pub fn grid(&self) -> Vec<f64> {
        (0..=self.steps).map(|i| i as f64 * self.dt).collect()
    }
}

/// Newton settings for a single step.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct StepOptions {
    pub tolerance: f64,
    pub max_iterations: usize,
    pub max_halvings: usize,
    pub max_bisections: usize,
}

impl Default for StepOptions {
    fn default() -> Self {
        StepOptions {
            tolerance: 1e-12,
            max_iterations: 25,
            max_halvings: 8,
            max_bisections: 4,
        }
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct StepStats {
    pub newton_iterations: usize,
    pub bisections: usize,
}

/// Solve `y = x + dt·f((x+y)/2, u)` for one step.
pub fn step_implicit_midpoint(
    model: &RiphsModel,
    x: &Vector,
    u: &Vector,
    dt: f64,
) -> Result<Vector, IntegrateError> {
    step_with_stats(model, x, u, dt, &StepOptions::default()).map(|(y, _)| y)
}

/// Like [`step_implicit_midpoint`], also reporting Newton statistics.
pub fn step_with_stats(
    model: &RiphsModel,
    x: &Vector,
    u: &Vector,
    dt: f64,
    opts: &StepOptions,
) -> Result<(Vector, StepStats), IntegrateError> {
    if !model.contains(x) {
        return Err(IntegrateError::Initial(ModelError::OutsideDomain));
    }
    let mut stats = StepStats::default();
    let y = bisecting_step(model, x, u, dt, opts, opts.max_bisections, &mut stats)?;
    Ok((y, stats))
}

fn bisecting_step(
    model: &RiphsModel,
    x: &Vector,
    u: &Vector,
    dt: f64,
    opts: &StepOptions,
    depth: usize,
    stats: &mut StepStats,
) -> Result<Vector, IntegrateError> {
    match newton_step(model, x, u, dt, opts, stats) {
        Ok(y) => Ok(y),
        Err(reason) if depth == 0 => Err(IntegrateError::Step { index: 0, reason }),
        Err(_) => {
            stats.bisections += 1;
            let half = bisecting_step(model, x, u, 0.5 * dt, opts, depth - 1, stats)?;
            bisecting_step(model, &half, u, 0.5 * dt, opts, depth - 1, stats)
        }
    }
}

fn newton_step(
    model: &RiphsModel,
    x: &Vector,
    u: &Vector,
    dt: f64,
    opts: &StepOptions,
    stats: &mut StepStats,
) -> Result<Vector, String> {
    let n = x.len();
    let tol = opts.tolerance * (1.0 + x.norm());
    let residual = |y: &Vector| -> Result<Vector, ModelError> {
        let mid = (x + y) * 0.5;
        Ok(y - x - model.rhs(&mid, u)? * dt)
    };

    let fx = model.rhs(x, u).map_err(|e| e.to_string())?;
    if fx.norm() * dt <= tol {
        return Ok(x.clone());
    }
    let predictor = x + &fx * dt;
    let mut y = if model.contains(&predictor) {
        predictor
    } else {
        x.clone()
    };
    let mut r = match residual(&y) {
        Ok(r) => r,
        Err(_) => {
            y = x.clone();
            residual(&y).map_err(|e| e.to_string())?
        }
    };
    let mut rnorm = r.norm();

    for _ in 0..opts.max_iterations {
        if rnorm <= tol {
            return Ok(y);
        }
        stats.newton_iterations += 1;
        let mid = (x + &y) * 0.5;
        let fj = rhs_jacobian(model, &mid, u).map_err(|e| e.to_string())?;
        let jac = Matrix::identity(n, n) - fj * (0.5 * dt);
        let delta = jac
            .lu()
            .solve(&(-&r))
            .ok_or_else(|| "singular Newton matrix".to_string())?;
        if delta.norm() <= f64::EPSILON * (1.0 + y.norm()) {
            return Ok(y);
        }
        let mut alpha = 1.0;
        let mut accepted = false;
        for _ in 0..=opts.max_halvings {
            let trial = &y + &delta * alpha;
            if let Ok(rt) = residual(&trial) {
                let nt = rt.norm();
                if nt < rnorm || nt <= tol {
                    y = trial;
                    r = rt;
                    rnorm = nt;
                    accepted = true;
                    break;
                }
            }
            alpha *= 0.5;
        }
        if !accepted {
            return Err(format!("no residual decrease (|R| = {rnorm:e})"));
        }
    }
    if rnorm <= tol {
        Ok(y)
    } else {
        Err(format!("Newton did not converge (|R| = {rnorm:e})"))
    }
}

/// Forward-difference Jacobian of `f(·, u)` with step `1e-7·(1+|x_j|)`.
pub fn rhs_jacobian(model: &RiphsModel, x: &Vector, u: &Vector) -> Result<Matrix, ModelError> {
    let n = x.len();
    let f0 = model.rhs(x, u)?;
    let mut jac = Matrix::zeros(n, n);
    let mut xp = x.clone();
    for j in 0..n {
        let h = 1e-7 * (1.0 + x[j].abs());
        xp[j] = x[j] + h;
        let fp = match model.rhs(&xp, u) {
            Ok(f) => (f - &f0) / h,
            Err(_) => {
                xp[j] = x[j] - h;
                (&f0 - model.rhs(&xp, u)?) / h
            }
        };
        xp[j] = x[j];
        jac.set_column(j, &fp);
    }
    Ok(jac)
}

/// Integrate with piecewise-constant controls on the grid of `horizon`.
pub fn simulate(
    model: &RiphsModel,
    x0: &Vector,
    controls: &[Vector],
    horizon: &HorizonSpec,
) -> Result<TrajectorySolution, IntegrateError> {
    simulate_with(model, x0, controls, horizon, &StepOptions::default())
}

pub fn simulate_with(
    model: &RiphsModel,
    x0: &Vector,
    controls: &[Vector],
    horizon: &HorizonSpec,
    opts: &StepOptions,
) -> Result<TrajectorySolution, IntegrateError> {
    let start = Instant::now();
    if controls.len() != horizon.steps {
        return Err(IntegrateError::ControlCount {
            expected: horizon.steps,
            got: controls.len(),
        });
    }
    if !model.contains(x0) {
        return Err(IntegrateError::Initial(ModelError::OutsideDomain));
    }
    let mut states = Vec::with_capacity(horizon.steps + 1);
    states.push(x0.clone());
    let mut meta = SolverMetadata {
        status: "simulated".into(),
        ..Default::default()
    };
    for (i, u) in controls.iter().enumerate() {
        let mut stats = StepStats::default();
        let y = bisecting_step(
            model,
            &states[i],
            u,
            horizon.dt,
            opts,
            opts.max_bisections,
            &mut stats,
        )
        .map_err(|e| match e {
            IntegrateError::Step { reason, .. } => IntegrateError::Step { index: i, reason },
            other => other,
        })?;
        meta.newton_iterations += stats.newton_iterations;
        meta.bisections += stats.bisections;
        states.push(y);
    }
    meta.wall_time_s = start.elapsed().as_secs_f64();
    Ok(TrajectorySolution::assemble(
        model,
        horizon.grid(),
        states,
        controls.to_vec(),
        meta,
    )?)
}
