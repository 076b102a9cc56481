//! Energy, entropy and exergy optimal control by direct transcription.
//!
//! States and controls live on the grid of a [`HorizonSpec`]. The dynamics
//! are imposed through implicit midpoint steps and the running cost is
//! summed with the left-endpoint rectangular rule. Decision variables are
//! stored as `[u_0, x_1, u_1, x_2, …, u_{K-1}, x_K]` so every stage reads a
//! contiguous window `[x_i, u_i, x_{i+1}]`.

use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::integrate::HorizonSpec;
use crate::model::{Matrix, ModelError, RiphsModel, Vector};
use crate::nlp::{
    self, fd_curvature, Element, EvalError, NlpError, NlpOptions, NlpProblem, NlpStatus,
};
use crate::trajectory::{SolverMetadata, TrajectorySolution};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OcpError {
    #[error("invalid problem: {0}")]
    Invalid(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Nlp(#[from] NlpError),
}

/// `α₁`, `α₂` and the reference temperature `T₀` of the stage cost
/// `[α₁ y_H - α₂ T₀ y_S]ᵀ u`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostWeights {
    pub alpha1: f64,
    pub alpha2: f64,
    #[serde(rename = "T0")]
    pub t0: f64,
}

impl CostWeights {
    pub fn new(alpha1: f64, alpha2: f64, t0: f64) -> Result<Self, OcpError> {
        let w = CostWeights { alpha1, alpha2, t0 };
        w.validate()?;
        Ok(w)
    }

    /// Minimal energy supply.
    pub fn energy_supply(t0: f64) -> Self {
        CostWeights {
            alpha1: 1.0,
            alpha2: 0.0,
            t0,
        }
    }

    /// Minimal entropy extraction.
    pub fn entropy_extraction(t0: f64) -> Self {
        CostWeights {
            alpha1: 0.0,
            alpha2: 1.0,
            t0,
        }
    }

    /// Minimal exergy supply.
    pub fn exergy(t0: f64) -> Self {
        CostWeights {
            alpha1: 1.0,
            alpha2: 1.0,
            t0,
        }
    }

    pub fn validate(&self) -> Result<(), OcpError> {
        if !(self.alpha1 >= 0.0 && self.alpha2 >= 0.0) {
            return Err(OcpError::Invalid("cost weights must be nonnegative".into()));
        }
        if !(self.t0 > 0.0) || !self.t0.is_finite() {
            return Err(OcpError::Invalid(
                "reference temperature must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Output tracking term `weight·‖C x - y_ref‖²`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OutputSpec {
    pub c: Matrix,
    pub y_ref: Vector,
    pub weight: f64,
}

impl OutputSpec {
    /// Checks `y_ref ∈ im(C)` by a least-squares residual of at most `1e-10`.
    pub fn new(c: Matrix, y_ref: Vector, weight: f64) -> Result<Self, OcpError> {
        if c.nrows() != y_ref.len() || c.nrows() == 0 {
            return Err(OcpError::Invalid(
                "output matrix and reference disagree".into(),
            ));
        }
        if !(weight >= 0.0) {
            return Err(OcpError::Invalid(
                "output weight must be nonnegative".into(),
            ));
        }
        let spec = OutputSpec { c, y_ref, weight };
        let residual = (&spec.c * spec.preimage_point()? - &spec.y_ref).norm();
        if residual > 1e-10 * spec.y_ref.norm().max(1.0) {
            return Err(OcpError::Invalid(format!(
                "reference is not in the image of C (residual {residual:e})"
            )));
        }
        Ok(spec)
    }

    fn pinv(&self) -> Result<Matrix, OcpError> {
        self.c
            .clone()
            .pseudo_inverse(1e-12)
            .map_err(|e| OcpError::Invalid(e.to_string()))
    }

    /// Minimum-norm point of `C⁻¹{y_ref}`.
    pub fn preimage_point(&self) -> Result<Vector, OcpError> {
        Ok(self.pinv()? * &self.y_ref)
    }

    /// Orthogonal distance from `x` to the affine set `C⁻¹{y_ref}`.
    pub fn preimage_distance(&self, x: &Vector) -> f64 {
        match self.pinv() {
            Ok(p) => (p * (&self.c * x - &self.y_ref)).norm(),
            Err(_) => f64::NAN,
        }
    }

    pub fn tracking(&self, x: &Vector) -> f64 {
        self.weight * (&self.c * x - &self.y_ref).norm_squared()
    }
}

/// Terminal set Φ.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum TerminalSpec {
    Free,
    Point {
        target: Vec<f64>,
    },
    /// Fix the listed coordinates (zero-based) to the given values.
    Componentwise {
        indices: Vec<usize>,
        values: Vec<f64>,
    },
}

impl TerminalSpec {
    /// `(index, value)` pairs of the fixed components.
    pub fn fixed(&self) -> Vec<(usize, f64)> {
        match self {
            TerminalSpec::Free => Vec::new(),
            TerminalSpec::Point { target } => target.iter().copied().enumerate().collect(),
            TerminalSpec::Componentwise { indices, values } => indices
                .iter()
                .copied()
                .zip(values.iter().copied())
                .collect(),
        }
    }

    pub fn is_free(&self) -> bool {
        self.fixed().is_empty()
    }

    fn validate(&self, n: usize) -> Result<(), OcpError> {
        match self {
            TerminalSpec::Free => Ok(()),
            TerminalSpec::Point { target } if target.len() != n => Err(OcpError::Invalid(format!(
                "terminal point has {} entries, expected {n}",
                target.len()
            ))),
            TerminalSpec::Componentwise { indices, values } if indices.len() != values.len() => {
                Err(OcpError::Invalid(
                    "terminal indices and values differ in length".into(),
                ))
            }
            _ => {
                let fixed = self.fixed();
                if fixed.iter().any(|(i, v)| *i >= n || !v.is_finite()) {
                    return Err(OcpError::Invalid("terminal component out of range".into()));
                }
                let mut seen = vec![false; n];
                for (i, _) in &fixed {
                    if std::mem::replace(&mut seen[*i], true) {
                        return Err(OcpError::Invalid(format!(
                            "terminal component {i} repeated"
                        )));
                    }
                }
                Ok(())
            }
        }
    }
}

/// Box of admissible controls.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlBounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl ControlBounds {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self, OcpError> {
        let b = ControlBounds { lower, upper };
        b.validate()?;
        Ok(b)
    }

    pub fn uniform(m: usize, lo: f64, hi: f64) -> Self {
        ControlBounds {
            lower: vec![lo; m],
            upper: vec![hi; m],
        }
    }

    pub fn validate(&self) -> Result<(), OcpError> {
        if self.lower.len() != self.upper.len() || self.lower.is_empty() {
            return Err(OcpError::Invalid("control bounds dimension".into()));
        }
        if self.lower.iter().zip(&self.upper).any(|(l, u)| !(l < u)) {
            return Err(OcpError::Invalid(
                "control bounds need lower < upper".into(),
            ));
        }
        Ok(())
    }

    pub fn contains_origin_in_interior(&self) -> bool {
        self.lower
            .iter()
            .zip(&self.upper)
            .all(|(l, u)| *l < 0.0 && *u > 0.0)
    }

    pub fn clamp(&self, u: &Vector) -> Vector {
        Vector::from_iterator(
            u.len(),
            u.iter()
                .enumerate()
                .map(|(j, v)| v.max(self.lower[j]).min(self.upper[j])),
        )
    }
}

/// Starting point of the solver.
#[derive(Clone, Debug, Default)]
pub enum InitialGuess {
    /// States interpolated linearly from `x0` to the terminal target (or held
    /// at `x0` when the terminal state is free), controls zero.
    #[default]
    Interpolate,
    /// Stretch a solution on another horizon: keep its first half, hold its
    /// midpoint through the middle and append its second half.
    WarmStart(Box<TrajectorySolution>),
}

#[derive(Clone, Debug, Default)]
pub struct OcpOptions {
    pub nlp: NlpOptions,
    /// Weight `ρ` of `Σ ρ‖u_i‖²`; `None` selects `1e-6·Δt`.
    pub tikhonov: Option<f64>,
    pub initial_guess: InitialGuess,
    /// Extra box `(lower, upper)` on the states, intersected with the domain.
    pub state_bounds: Option<(Vec<f64>, Vec<f64>)>,
}

/// A complete optimal control problem.
#[derive(Clone, Debug)]
pub struct OcpSpec {
    pub model: RiphsModel,
    pub x0: Vector,
    pub horizon: HorizonSpec,
    pub weights: CostWeights,
    pub output: Option<OutputSpec>,
    pub terminal: TerminalSpec,
    pub bounds: ControlBounds,
    pub options: OcpOptions,
}

impl OcpSpec {
    pub fn validate(&self) -> Result<(), OcpError> {
        let n = self.model.state_dim();
        let m = self.model.input_dim();
        if self.x0.len() != n {
            return Err(OcpError::Invalid(format!(
                "x0 has {} entries, expected {n}",
                self.x0.len()
            )));
        }
        if !self.model.contains(&self.x0) {
            return Err(OcpError::Invalid("x0 lies outside the state domain".into()));
        }
        self.weights.validate()?;
        self.bounds.validate()?;
        if self.bounds.lower.len() != m {
            return Err(OcpError::Invalid(format!(
                "control bounds have {} channels, model has {m}",
                self.bounds.lower.len()
            )));
        }
        self.terminal.validate(n)?;
        if !self.terminal.is_free() && !self.bounds.contains_origin_in_interior() {
            return Err(OcpError::Invalid(
                "state-transition problems need 0 in the interior of the control bounds".into(),
            ));
        }
        if let Some(out) = &self.output {
            if out.c.ncols() != n {
                return Err(OcpError::Invalid("output matrix has wrong width".into()));
            }
        }
        if self.weights.alpha1 == 0.0 && self.weights.alpha2 == 0.0 && self.output.is_none() {
            return Err(OcpError::Invalid(
                "cost functional is identically zero".into(),
            ));
        }
        Ok(())
    }

    pub fn tikhonov_weight(&self) -> f64 {
        self.options.tikhonov.unwrap_or(1e-6 * self.horizon.dt)
    }
}

/// `[α₁ y_H - α₂ T₀ y_S]ᵀ u`, plus `weight·‖C x - y_ref‖²` when an output
/// term is given.
pub fn stage_cost(
    model: &RiphsModel,
    weights: &CostWeights,
    output: Option<&OutputSpec>,
    x: &Vector,
    u: &Vector,
) -> Result<f64, ModelError> {
    let (y_h, y_s) = model.outputs(x)?;
    let supply = (y_h * weights.alpha1 - y_s * (weights.alpha2 * weights.t0)).dot(u);
    Ok(supply + output.map_or(0.0, |o| o.tracking(x)))
}

/// Position of the blocks in the decision vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Layout {
    pub n: usize,
    pub m: usize,
    pub steps: usize,
}

impl Layout {
    pub fn num_vars(&self) -> usize {
        self.steps * (self.n + self.m)
    }

    /// Start of `u_i`, `0 <= i < K`.
    pub fn control(&self, i: usize) -> usize {
        i * (self.n + self.m)
    }

    /// Start of `x_i`, `1 <= i <= K`.
    pub fn state(&self, i: usize) -> usize {
        debug_assert!(i >= 1);
        (i - 1) * (self.n + self.m) + self.m
    }

    pub fn pack(&self, states: &[Vector], controls: &[Vector]) -> Vec<f64> {
        let mut z = vec![0.0; self.num_vars()];
        for i in 0..self.steps {
            z[self.control(i)..self.control(i) + self.m].copy_from_slice(controls[i].as_slice());
            z[self.state(i + 1)..self.state(i + 1) + self.n]
                .copy_from_slice(states[i + 1].as_slice());
        }
        z
    }

    pub fn unpack(&self, z: &[f64], x0: &Vector) -> (Vec<Vector>, Vec<Vector>) {
        let mut states = vec![x0.clone()];
        let mut controls = Vec::with_capacity(self.steps);
        for i in 0..self.steps {
            controls.push(Vector::from_column_slice(
                &z[self.control(i)..self.control(i) + self.m],
            ));
            states.push(Vector::from_column_slice(
                &z[self.state(i + 1)..self.state(i + 1) + self.n],
            ));
        }
        (states, controls)
    }
}

struct StageData {
    model: RiphsModel,
    weights: CostWeights,
    output: Option<OutputSpec>,
    dt: f64,
    rho: f64,
    n: usize,
    m: usize,
}

fn eval_err(e: ModelError) -> EvalError {
    match e {
        ModelError::OutsideDomain => EvalError::Domain,
        _ => EvalError::NonFinite,
    }
}

impl StageData {
    /// Rectangular-rule cost without the energy supply, which is charged as
    /// the exact change `α₁(H(x_{i+1}) - H(x_i))` instead.
    fn cost(&self, x: &Vector, u: &Vector) -> Result<f64, EvalError> {
        let weights = CostWeights {
            alpha1: 0.0,
            ..self.weights
        };
        let l = stage_cost(&self.model, &weights, self.output.as_ref(), x, u).map_err(eval_err)?;
        Ok(l * self.dt + self.rho * u.norm_squared())
    }

    fn rhs(&self, xm: &Vector, u: &Vector) -> Result<Vector, EvalError> {
        self.model.rhs(xm, u).map_err(eval_err)
    }
}

/// One implicit midpoint step with its rectangular-rule cost.
struct StageElement {
    data: Arc<StageData>,
    offset: usize,
    /// Fixed initial state for the first stage, whose window is `[u_0, x_1]`.
    start: Option<Vector>,
}

impl StageElement {
    fn split(&self, w: &[f64]) -> (Vector, Vector, Vector) {
        let (n, m) = (self.data.n, self.data.m);
        match &self.start {
            Some(x0) => (
                x0.clone(),
                Vector::from_column_slice(&w[..m]),
                Vector::from_column_slice(&w[m..m + n]),
            ),
            None => (
                Vector::from_column_slice(&w[..n]),
                Vector::from_column_slice(&w[n..n + m]),
                Vector::from_column_slice(&w[n + m..]),
            ),
        }
    }

    /// Window positions of `x_i`, `u_i` and `x_{i+1}`.
    fn positions(&self) -> (Option<usize>, usize, usize) {
        let (n, m) = (self.data.n, self.data.m);
        match self.start {
            Some(_) => (None, 0, m),
            None => (Some(0), n, n + m),
        }
    }

    /// Cost in the local `(x_i, u_i)` coordinates (just `u_0` for the first stage).
    fn cost_local(&self, v: &[f64], x_fixed: &Vector) -> Result<f64, EvalError> {
        let (n, m) = (self.data.n, self.data.m);
        if self.start.is_some() {
            self.data.cost(x_fixed, &Vector::from_column_slice(&v[..m]))
        } else {
            self.data.cost(
                &Vector::from_column_slice(&v[..n]),
                &Vector::from_column_slice(&v[n..n + m]),
            )
        }
    }
}

/// Adapter exposing a scalar function of a small vector to [`fd_curvature`].
struct Scalar<'a, F: Fn(&[f64]) -> Result<f64, EvalError> + Send + Sync> {
    width: usize,
    f: &'a F,
}

impl<F: Fn(&[f64]) -> Result<f64, EvalError> + Send + Sync> Element for Scalar<'_, F> {
    fn offset(&self) -> usize {
        0
    }
    fn width(&self) -> usize {
        self.width
    }
    fn num_constraints(&self) -> usize {
        0
    }
    fn evaluate(&self, w: &[f64], _: &mut [f64]) -> Result<f64, EvalError> {
        (self.f)(w)
    }
}

impl Element for StageElement {
    fn offset(&self) -> usize {
        self.offset
    }

    fn width(&self) -> usize {
        let (n, m) = (self.data.n, self.data.m);
        if self.start.is_some() {
            n + m
        } else {
            2 * n + m
        }
    }

    fn num_constraints(&self) -> usize {
        self.data.n
    }

    fn evaluate(&self, w: &[f64], c: &mut [f64]) -> Result<f64, EvalError> {
        let (x, u, y) = self.split(w);
        let mid = (&x + &y) * 0.5;
        let f = self.data.rhs(&mid, &u)?;
        let r = &y - &x - f * self.data.dt;
        c.copy_from_slice(r.as_slice());
        let a1 = self.data.weights.alpha1;
        let energy = if a1 != 0.0 {
            a1 * (self.data.model.hamiltonian(&y) - self.data.model.hamiltonian(&x))
        } else {
            0.0
        };
        Ok(self.data.cost(&x, &u)? + energy)
    }

    fn first_order(&self, w: &[f64], grad: &mut [f64], jac: &mut Matrix) -> Result<(), EvalError> {
        let d = &self.data;
        let (n, m, dt) = (d.n, d.m, d.dt);
        let (x, u, y) = self.split(w);
        let (px, pu, py) = self.positions();
        grad.fill(0.0);
        jac.fill(0.0);

        // Cost: central differences in (x_i, u_i).
        let mut local: Vec<f64> = Vec::with_capacity(n + m);
        if px.is_some() {
            local.extend(x.iter());
        }
        local.extend(u.iter());
        let cost_pos: Vec<usize> = px
            .map(|p| (p..p + n).collect::<Vec<_>>())
            .unwrap_or_default()
            .into_iter()
            .chain(pu..pu + m)
            .collect();
        let c0 = self.cost_local(&local, &x)?;
        for (k, &pos) in cost_pos.iter().enumerate() {
            let h = 6e-6 * (1.0 + local[k].abs());
            let orig = local[k];
            local[k] = orig + h;
            let fp = self.cost_local(&local, &x);
            local[k] = orig - h;
            let fm = self.cost_local(&local, &x);
            local[k] = orig;
            grad[pos] = match (fp, fm) {
                (Ok(a), Ok(b)) => (a - b) / (2.0 * h),
                (Ok(a), Err(_)) => (a - c0) / h,
                (Err(_), Ok(b)) => (c0 - b) / h,
                (Err(e), Err(_)) => return Err(e),
            };
        }

        let a1 = d.weights.alpha1;
        if a1 != 0.0 {
            let ey = d.model.co_energy(&y);
            for j in 0..n {
                grad[py + j] += a1 * ey[j];
            }
            if let Some(p) = px {
                let ex = d.model.co_energy(&x);
                for j in 0..n {
                    grad[p + j] -= a1 * ex[j];
                }
            }
        }

        // Dynamics: Jacobian of f in (x̂, u), mapped to the window.
        let mid = (&x + &y) * 0.5;
        let f0 = d.rhs(&mid, &u)?;
        let mut q: Vec<f64> = mid.iter().chain(u.iter()).copied().collect();
        let mut fq = Matrix::zeros(n, n + m);
        for k in 0..n + m {
            let h = 6e-6 * (1.0 + q[k].abs());
            let orig = q[k];
            let eval = |q: &[f64]| {
                d.rhs(
                    &Vector::from_column_slice(&q[..n]),
                    &Vector::from_column_slice(&q[n..]),
                )
            };
            q[k] = orig + h;
            let fp = eval(&q);
            q[k] = orig - h;
            let fm = eval(&q);
            q[k] = orig;
            let col = match (fp, fm) {
                (Ok(a), Ok(b)) => (a - b) / (2.0 * h),
                (Ok(a), Err(_)) => (a - &f0) / h,
                (Err(_), Ok(b)) => (&f0 - b) / h,
                (Err(e), Err(_)) => return Err(e),
            };
            fq.set_column(k, &col);
        }
        for r in 0..n {
            for j in 0..n {
                let fx = fq[(r, j)];
                if let Some(p) = px {
                    jac[(r, p + j)] = -0.5 * dt * fx;
                }
                jac[(r, py + j)] = -0.5 * dt * fx;
            }
            if let Some(p) = px {
                jac[(r, p + r)] -= 1.0;
            }
            jac[(r, py + r)] += 1.0;
            for j in 0..m {
                jac[(r, pu + j)] = -dt * fq[(r, n + j)];
            }
        }
        if grad.iter().chain(jac.iter()).any(|v| !v.is_finite()) {
            return Err(EvalError::NonFinite);
        }
        Ok(())
    }

    fn curvature(&self, w: &[f64], lambda: &[f64], hess: &mut Matrix) -> Result<(), EvalError> {
        let d = &self.data;
        let (n, m, dt) = (d.n, d.m, d.dt);
        let (x, u, y) = self.split(w);
        let (px, pu, py) = self.positions();
        hess.fill(0.0);

        // Cost curvature in (x_i, u_i).
        let mut local: Vec<f64> = Vec::with_capacity(n + m);
        if px.is_some() {
            local.extend(x.iter());
        }
        local.extend(u.iter());
        let cost_pos: Vec<usize> = px
            .map(|p| (p..p + n).collect::<Vec<_>>())
            .unwrap_or_default()
            .into_iter()
            .chain(pu..pu + m)
            .collect();
        let cost_fn = |v: &[f64]| self.cost_local(v, &x);
        let mut hc = Matrix::zeros(local.len(), local.len());
        fd_curvature(
            &Scalar {
                width: local.len(),
                f: &cost_fn,
            },
            &local,
            &[],
            &mut hc,
        )?;
        for (a, &pa) in cost_pos.iter().enumerate() {
            for (b, &pb) in cost_pos.iter().enumerate() {
                hess[(pa, pb)] += hc[(a, b)];
            }
        }

        let a1 = d.weights.alpha1;
        if a1 != 0.0 {
            let hy = d.model.hessian(&y);
            let hx = px.map(|_| d.model.hessian(&x));
            for a in 0..n {
                for b in 0..n {
                    hess[(py + a, py + b)] += a1 * hy[(a, b)];
                    if let (Some(p), Some(h)) = (px, &hx) {
                        hess[(p + a, p + b)] -= a1 * h[(a, b)];
                    }
                }
            }
        }

        // Constraint curvature: -dt λᵀ f(x̂, u) in (x̂, u), pulled back through
        // x̂ = (x_i + x_{i+1}) / 2.
        let mid = (&x + &y) * 0.5;
        let q: Vec<f64> = mid.iter().chain(u.iter()).copied().collect();
        let lam = Vector::from_column_slice(lambda);
        let dyn_fn = |q: &[f64]| -> Result<f64, EvalError> {
            let f = d.rhs(
                &Vector::from_column_slice(&q[..n]),
                &Vector::from_column_slice(&q[n..]),
            )?;
            Ok(-dt * lam.dot(&f))
        };
        let mut hq = Matrix::zeros(n + m, n + m);
        fd_curvature(
            &Scalar {
                width: n + m,
                f: &dyn_fn,
            },
            &q,
            &[],
            &mut hq,
        )?;
        let mut map: Vec<(usize, usize, f64)> = Vec::with_capacity(2 * n + m);
        for j in 0..n {
            if let Some(p) = px {
                map.push((p + j, j, 0.5));
            }
            map.push((py + j, j, 0.5));
        }
        for j in 0..m {
            map.push((pu + j, n + j, 1.0));
        }
        for &(wa, qa, ca) in &map {
            for &(wb, qb, cb) in &map {
                hess[(wa, wb)] += ca * cb * hq[(qa, qb)];
            }
        }
        Ok(())
    }
}

/// Linear terminal constraints `x_K[j] = target_j`.
struct TerminalElement {
    offset: usize,
    width: usize,
    fixed: Vec<(usize, f64)>,
}

impl Element for TerminalElement {
    fn offset(&self) -> usize {
        self.offset
    }
    fn width(&self) -> usize {
        self.width
    }
    fn num_constraints(&self) -> usize {
        self.fixed.len()
    }
    fn evaluate(&self, w: &[f64], c: &mut [f64]) -> Result<f64, EvalError> {
        for (r, (j, v)) in self.fixed.iter().enumerate() {
            c[r] = w[*j] - v;
        }
        Ok(0.0)
    }
    fn first_order(&self, _: &[f64], grad: &mut [f64], jac: &mut Matrix) -> Result<(), EvalError> {
        grad.fill(0.0);
        jac.fill(0.0);
        for (r, (j, _)) in self.fixed.iter().enumerate() {
            jac[(r, *j)] = 1.0;
        }
        Ok(())
    }
    fn curvature(&self, _: &[f64], _: &[f64], hess: &mut Matrix) -> Result<(), EvalError> {
        hess.fill(0.0);
        Ok(())
    }
}

/// The transcribed problem and its variable layout.
pub struct Transcription {
    pub problem: NlpProblem,
    pub layout: Layout,
    pub tikhonov: f64,
}

/// Build the finite-dimensional program: implicit midpoint equalities for
/// every interval, terminal equalities, control bounds and, for box-shaped
/// domains, state bounds.
pub fn transcribe(spec: &OcpSpec) -> Result<Transcription, OcpError> {
    spec.validate()?;
    let n = spec.model.state_dim();
    let m = spec.model.input_dim();
    let k = spec.horizon.steps;
    let layout = Layout { n, m, steps: k };
    let rho = spec.tikhonov_weight();
    if !(rho >= 0.0) {
        return Err(OcpError::Invalid(
            "Tikhonov weight must be nonnegative".into(),
        ));
    }
    let data = Arc::new(StageData {
        model: spec.model.clone(),
        weights: spec.weights,
        output: spec.output.clone(),
        dt: spec.horizon.dt,
        rho,
        n,
        m,
    });
    let (xlo, xhi) = spec
        .model
        .domain()
        .coordinate_bounds()
        .unwrap_or((vec![f64::NEG_INFINITY; n], vec![f64::INFINITY; n]));
    let (xlo, xhi) = match &spec.options.state_bounds {
        None => (xlo, xhi),
        Some((lo, hi)) => {
            if lo.len() != n || hi.len() != n {
                return Err(OcpError::Invalid(format!("state bounds need {n} entries")));
            }
            let lo: Vec<f64> = lo.iter().zip(&xlo).map(|(a, b)| a.max(*b)).collect();
            let hi: Vec<f64> = hi.iter().zip(&xhi).map(|(a, b)| a.min(*b)).collect();
            if lo.iter().zip(&hi).any(|(a, b)| !(a < b)) {
                return Err(OcpError::Invalid("empty state box".into()));
            }
            (lo, hi)
        }
    };
    let mut lower = vec![0.0; layout.num_vars()];
    let mut upper = vec![0.0; layout.num_vars()];
    for i in 0..k {
        let c = layout.control(i);
        lower[c..c + m].copy_from_slice(&spec.bounds.lower);
        upper[c..c + m].copy_from_slice(&spec.bounds.upper);
        let s = layout.state(i + 1);
        lower[s..s + n].copy_from_slice(&xlo);
        upper[s..s + n].copy_from_slice(&xhi);
    }
    let mut elements: Vec<Box<dyn Element>> = Vec::with_capacity(k + 1);
    for i in 0..k {
        elements.push(Box::new(StageElement {
            data: data.clone(),
            offset: if i == 0 { 0 } else { layout.state(i) },
            start: (i == 0).then(|| spec.x0.clone()),
        }));
    }
    let fixed = spec.terminal.fixed();
    if !fixed.is_empty() {
        elements.push(Box::new(TerminalElement {
            offset: layout.state(k),
            width: n,
            fixed,
        }));
    }
    let problem = NlpProblem::new(layout.num_vars(), lower, upper, elements)?;
    Ok(Transcription {
        problem,
        layout,
        tikhonov: rho,
    })
}

fn interpolation_guess(spec: &OcpSpec) -> (Vec<Vector>, Vec<Vector>) {
    let k = spec.horizon.steps;
    let mut target = spec.x0.clone();
    for (j, v) in spec.terminal.fixed() {
        target[j] = v;
    }
    let states = (0..=k)
        .map(|i| {
            let s = i as f64 / k as f64;
            &spec.x0 * (1.0 - s) + &target * s
        })
        .collect();
    let zero = spec.bounds.clamp(&Vector::zeros(spec.model.input_dim()));
    (states, vec![zero; k])
}

/// Map a trajectory on `K'` intervals to `K` intervals: first half kept,
/// midpoint held, second half shifted to the end.
pub fn stretch_trajectory(prev: &TrajectorySolution, steps: usize) -> (Vec<Vector>, Vec<Vector>) {
    let kp = prev.steps();
    let half = kp / 2;
    let node = |j: usize| -> usize {
        if j <= half {
            j.min(kp)
        } else if steps - j <= kp - half {
            kp - (steps - j)
        } else {
            half
        }
    };
    let states = (0..=steps).map(|j| prev.states[node(j)].clone()).collect();
    let controls = (0..steps)
        .map(|j| prev.controls[node(j).min(kp - 1)].clone())
        .collect();
    (states, controls)
}

/// Cost identity check: supply part of the objective against its
/// balance-law form.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct CostIdentity {
    /// Supply part of the discrete objective:
    /// `α₁(H(x_K) - H(x_0)) - Σ α₂T₀ y_S(x_i)ᵀ u_i Δt`.
    pub supply: f64,
    /// Rectangular-rule energy supply `Σ α₁ y_H(x_i)ᵀ u_i Δt`, for comparison.
    pub energy_rectangle: f64,
    /// `α₁(H(x_K) - H(x_0)) + α₂T₀(S(x_0) - S(x_K) + Σ σ(x̂_i) Δt)`.
    pub balance: f64,
    pub residual: f64,
}

pub fn cost_identity(
    model: &RiphsModel,
    weights: &CostWeights,
    traj: &TrajectorySolution,
) -> Result<CostIdentity, ModelError> {
    let k = traj.steps();
    let entropy_only = CostWeights {
        alpha1: 0.0,
        ..*weights
    };
    let mut supply = 0.0;
    let mut energy_rectangle = 0.0;
    let mut production = 0.0;
    for i in 0..k {
        let dt = traj.time[i + 1] - traj.time[i];
        let (x, u) = (&traj.states[i], &traj.controls[i]);
        supply += stage_cost(model, &entropy_only, None, x, u)? * dt;
        energy_rectangle += weights.alpha1 * model.outputs(x)?.0.dot(u) * dt;
        let mid = (&traj.states[i] + &traj.states[i + 1]) * 0.5;
        production += model.entropy_production(&mid)? * dt;
    }
    let (x0, xk) = (&traj.states[0], &traj.states[k]);
    supply += weights.alpha1 * (model.hamiltonian(xk) - model.hamiltonian(x0));
    let balance = weights.alpha1 * (model.hamiltonian(xk) - model.hamiltonian(x0))
        + weights.alpha2 * weights.t0 * (model.entropy(x0) - model.entropy(xk) + production);
    Ok(CostIdentity {
        supply,
        energy_rectangle,
        balance,
        residual: (supply - balance).abs(),
    })
}

/// Running value of the discrete objective at every node, starting at 0:
/// rectangle-rule entropy supply and tracking, telescoped energy supply and
/// the Tikhonov term.
pub fn cumulative_cost(spec: &OcpSpec, traj: &TrajectorySolution) -> Result<Vec<f64>, ModelError> {
    let entropy_only = CostWeights {
        alpha1: 0.0,
        ..spec.weights
    };
    let rho = spec.tikhonov_weight();
    let mut acc = Vec::with_capacity(traj.states.len());
    acc.push(0.0);
    for i in 0..traj.steps() {
        let dt = traj.time[i + 1] - traj.time[i];
        let (x, y, u) = (&traj.states[i], &traj.states[i + 1], &traj.controls[i]);
        let step = stage_cost(&spec.model, &entropy_only, spec.output.as_ref(), x, u)? * dt
            + rho * u.norm_squared()
            + spec.weights.alpha1 * (spec.model.hamiltonian(y) - spec.model.hamiltonian(x));
        acc.push(acc[i] + step);
    }
    Ok(acc)
}

/// Transcribe, solve and unpack.
///
/// A solve that stops at an iteration cap still returns its last iterate,
/// with `metadata.status == "max_iterations"`.
pub fn solve_ocp(spec: &OcpSpec) -> Result<TrajectorySolution, OcpError> {
    let start = Instant::now();
    let tr = transcribe(spec)?;
    let (states, controls) = match &spec.options.initial_guess {
        InitialGuess::Interpolate => interpolation_guess(spec),
        InitialGuess::WarmStart(prev) => {
            if prev.states.first().map(|x| x.len()) != Some(spec.model.state_dim()) {
                return Err(OcpError::Invalid(
                    "warm start has the wrong state dimension".into(),
                ));
            }
            let (mut s, c) = stretch_trajectory(prev, spec.horizon.steps);
            s[0] = spec.x0.clone();
            (s, c)
        }
    };
    let z0 = tr.layout.pack(&states, &controls);
    let sol = nlp::solve(&tr.problem, &z0, &spec.options.nlp)?;
    let (states, controls) = tr.layout.unpack(&sol.z, &spec.x0);
    let metadata = SolverMetadata {
        status: match sol.status {
            NlpStatus::Converged => "converged".into(),
            NlpStatus::MaxIterations => "max_iterations".into(),
        },
        outer_iterations: sol.outer_iterations,
        inner_iterations: sol.inner_iterations,
        constraint_violation: sol.constraint_violation,
        projected_gradient: sol.projected_gradient,
        objective: Some(sol.objective),
        tikhonov_weight: tr.tikhonov,
        ..Default::default()
    };
    let mut traj =
        TrajectorySolution::assemble(&spec.model, spec.horizon.grid(), states, controls, metadata)?;
    traj.metadata.identity_residual =
        Some(cost_identity(&spec.model, &spec.weights, &traj)?.residual);
    traj.metadata.wall_time_s = start.elapsed().as_secs_f64();
    Ok(traj)
}
