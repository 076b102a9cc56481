//! Element-structured nonlinear programs with box bounds and equality
//! constraints, solved by an augmented Lagrangian method.
//!
//! The objective and constraints are sums over *elements*, each of which
//! reads a contiguous window of the decision vector. The Hessian of the
//! augmented Lagrangian is then banded with half-bandwidth `max width - 1`.

pub mod banded;
mod solver;

pub use solver::{solve, InnerSolver, NlpError, NlpOptions, NlpSolution, NlpStatus};

use crate::model::Matrix;

/// Why an element could not be evaluated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalError {
    /// The point lies outside the model domain; treated as an infeasible trial.
    Domain,
    /// A NaN or infinity appeared.
    NonFinite,
}

/// One additive piece of the problem.
pub trait Element: Send + Sync {
    /// Index of the first decision variable read by this element.
    fn offset(&self) -> usize;
    fn width(&self) -> usize;
    fn num_constraints(&self) -> usize;

    /// Objective contribution; constraint residuals are written to `c`.
    fn evaluate(&self, w: &[f64], c: &mut [f64]) -> Result<f64, EvalError>;

    /// Objective gradient and constraint Jacobian (`num_constraints × width`).
    fn first_order(&self, w: &[f64], grad: &mut [f64], jac: &mut Matrix) -> Result<(), EvalError> {
        fd_first_order(self, w, grad, jac)
    }

    /// Hessian of `objective + λᵀ constraints` on the window.
    fn curvature(&self, w: &[f64], lambda: &[f64], hess: &mut Matrix) -> Result<(), EvalError> {
        fd_curvature(self, w, lambda, hess)
    }
}

/// Central differences with step `6e-6·(1+|w_j|)`, one-sided next to the
/// domain boundary.
pub fn fd_first_order<E: Element + ?Sized>(
    e: &E,
    w: &[f64],
    grad: &mut [f64],
    jac: &mut Matrix,
) -> Result<(), EvalError> {
    let nc = e.num_constraints();
    let mut wp = w.to_vec();
    let mut cp = vec![0.0; nc];
    let mut cm = vec![0.0; nc];
    let mut base: Option<(f64, Vec<f64>)> = None;
    for j in 0..w.len() {
        let h = 6e-6 * (1.0 + w[j].abs());
        wp[j] = w[j] + h;
        let fp = e.evaluate(&wp, &mut cp);
        wp[j] = w[j] - h;
        let fm = e.evaluate(&wp, &mut cm);
        wp[j] = w[j];
        match (fp, fm) {
            (Ok(fp), Ok(fm)) => {
                grad[j] = (fp - fm) / (2.0 * h);
                for r in 0..nc {
                    jac[(r, j)] = (cp[r] - cm[r]) / (2.0 * h);
                }
            }
            (fp, fm) => {
                if base.is_none() {
                    let mut c0 = vec![0.0; nc];
                    let f0 = e.evaluate(w, &mut c0)?;
                    base = Some((f0, c0));
                }
                let (f0, c0) = base.as_ref().unwrap();
                match (fp, fm) {
                    (Ok(fp), _) => {
                        grad[j] = (fp - f0) / h;
                        for r in 0..nc {
                            jac[(r, j)] = (cp[r] - c0[r]) / h;
                        }
                    }
                    (_, Ok(fm)) => {
                        grad[j] = (f0 - fm) / h;
                        for r in 0..nc {
                            jac[(r, j)] = (c0[r] - cm[r]) / h;
                        }
                    }
                    (Err(err), _) => return Err(err),
                }
            }
        }
    }
    if grad.iter().chain(jac.iter()).any(|v| !v.is_finite()) {
        return Err(EvalError::NonFinite);
    }
    Ok(())
}

/// Second differences of `objective + λᵀ constraints` with step
/// `1e-4·(1+|w_i|)`.
pub fn fd_curvature<E: Element + ?Sized>(
    e: &E,
    w: &[f64],
    lambda: &[f64],
    hess: &mut Matrix,
) -> Result<(), EvalError> {
    let mut c = vec![0.0; e.num_constraints()];
    let mut phi = |v: &[f64]| -> Result<f64, EvalError> {
        let f = e.evaluate(v, &mut c)?;
        Ok(f + c.iter().zip(lambda).map(|(a, b)| a * b).sum::<f64>())
    };
    let n = w.len();
    let h: Vec<f64> = w.iter().map(|v| 1e-4 * (1.0 + v.abs())).collect();
    let p0 = phi(w)?;
    let mut v = w.to_vec();
    for i in 0..n {
        v[i] = w[i] + h[i];
        let pp = phi(&v)?;
        v[i] = w[i] - h[i];
        let pm = phi(&v)?;
        v[i] = w[i];
        hess[(i, i)] = (pp - 2.0 * p0 + pm) / (h[i] * h[i]);
        for j in 0..i {
            let mut quad = [0.0; 4];
            for (k, (si, sj)) in [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)]
                .into_iter()
                .enumerate()
            {
                v[i] = w[i] + si * h[i];
                v[j] = w[j] + sj * h[j];
                quad[k] = phi(&v)?;
            }
            v[i] = w[i];
            v[j] = w[j];
            let hij = (quad[0] - quad[1] - quad[2] + quad[3]) / (4.0 * h[i] * h[j]);
            hess[(i, j)] = hij;
            hess[(j, i)] = hij;
        }
    }
    if hess.iter().any(|v| !v.is_finite()) {
        return Err(EvalError::NonFinite);
    }
    Ok(())
}

type ElementFn = dyn Fn(&[f64], &mut [f64]) -> Result<f64, EvalError> + Send + Sync;

/// An element given by a closure, differentiated numerically.
pub struct FnElement {
    offset: usize,
    width: usize,
    num_constraints: usize,
    f: Box<ElementFn>,
}

impl FnElement {
    pub fn new(
        offset: usize,
        width: usize,
        num_constraints: usize,
        f: impl Fn(&[f64], &mut [f64]) -> Result<f64, EvalError> + Send + Sync + 'static,
    ) -> Self {
        FnElement {
            offset,
            width,
            num_constraints,
            f: Box::new(f),
        }
    }
}

impl Element for FnElement {
    fn offset(&self) -> usize {
        self.offset
    }
    fn width(&self) -> usize {
        self.width
    }
    fn num_constraints(&self) -> usize {
        self.num_constraints
    }
    fn evaluate(&self, w: &[f64], c: &mut [f64]) -> Result<f64, EvalError> {
        (self.f)(w, c)
    }
}

/// Decision vector layout, bounds and elements.
pub struct NlpProblem {
    num_vars: usize,
    lower: Vec<f64>,
    upper: Vec<f64>,
    elements: Vec<Box<dyn Element>>,
    con_offsets: Vec<usize>,
    num_constraints: usize,
}

impl NlpProblem {
    /// Elements are kept in order of their offsets; constraints are numbered
    /// in that order.
    pub fn new(
        num_vars: usize,
        lower: Vec<f64>,
        upper: Vec<f64>,
        mut elements: Vec<Box<dyn Element>>,
    ) -> Result<Self, NlpError> {
        if lower.len() != num_vars || upper.len() != num_vars {
            return Err(NlpError::Dimension("bound vectors".into()));
        }
        if let Some(i) = (0..num_vars).find(|&i| !(lower[i] <= upper[i])) {
            return Err(NlpError::Dimension(format!("empty bound interval at {i}")));
        }
        for (k, e) in elements.iter().enumerate() {
            if e.width() == 0 || e.offset() + e.width() > num_vars {
                return Err(NlpError::Dimension(format!(
                    "element {k} window out of range"
                )));
            }
        }
        elements.sort_by_key(|e| e.offset());
        let mut con_offsets = Vec::with_capacity(elements.len());
        let mut total = 0;
        for e in &elements {
            con_offsets.push(total);
            total += e.num_constraints();
        }
        Ok(NlpProblem {
            num_vars,
            lower,
            upper,
            elements,
            con_offsets,
            num_constraints: total,
        })
    }

    pub fn num_vars(&self) -> usize {
        self.num_vars
    }

    pub fn num_constraints(&self) -> usize {
        self.num_constraints
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn elements(&self) -> &[Box<dyn Element>] {
        &self.elements
    }

    /// Half-bandwidth of the Hessian.
    pub fn bandwidth(&self) -> usize {
        self.elements
            .iter()
            .map(|e| e.width() - 1)
            .max()
            .unwrap_or(0)
    }

    /// Objective and constraint residuals; errors carry the element index.
    pub fn evaluate(&self, z: &[f64]) -> Result<(f64, Vec<f64>), (usize, EvalError)> {
        let mut c = vec![0.0; self.num_constraints];
        let mut f = 0.0;
        for (k, e) in self.elements.iter().enumerate() {
            let w = &z[e.offset()..e.offset() + e.width()];
            let co = self.con_offsets[k];
            let fe = e
                .evaluate(w, &mut c[co..co + e.num_constraints()])
                .map_err(|err| (k, err))?;
            if !fe.is_finite()
                || c[co..co + e.num_constraints()]
                    .iter()
                    .any(|v| !v.is_finite())
            {
                return Err((k, EvalError::NonFinite));
            }
            f += fe;
        }
        Ok((f, c))
    }

    pub(crate) fn constraint_offset(&self, k: usize) -> usize {
        self.con_offsets[k]
    }
}
