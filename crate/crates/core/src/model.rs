//! The reversible-irreversible port-Hamiltonian system class.
//!
//! A model is described by a Poisson structure `J0(x)`, a Hamiltonian `H`
//! with analytic gradient, a linear entropy `S(x) = eᵀx`, constant
//! skew-symmetric structure matrices `J_k` with positive modulations `γ_k`,
//! and an input map `g` that is linear in the control. The state equation is
//!
//! ```text
//! ẋ = (J0(x) + Σ_k γ_k(x, H_x) {S,H}_{J_k} J_k) H_x(x) + g(x, H_x) u
//! ```
//!
//! with `{S,H}_{J_k} = eᵀ J_k H_x`.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::Serialize;
use thiserror::Error;

use crate::trajectory::TrajectorySolution;

pub type Vector = DVector<f64>;
pub type Matrix = DMatrix<f64>;

type ScalarFn = Arc<dyn Fn(&Vector) -> f64 + Send + Sync>;
type VectorFn = Arc<dyn Fn(&Vector) -> Vector + Send + Sync>;
type MatrixFn = Arc<dyn Fn(&Vector) -> Matrix + Send + Sync>;
type PairScalarFn = Arc<dyn Fn(&Vector, &Vector) -> f64 + Send + Sync>;
type PairMatrixFn = Arc<dyn Fn(&Vector, &Vector) -> Matrix + Send + Sync>;

/// Relative tolerance for skew-symmetry and Casimir checks.
pub const STRUCTURE_TOL: f64 = 1e-12;

/// Default safety margin applied to finite domain bounds.
pub const DOMAIN_MARGIN: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("structure matrix {name} is not skew-symmetric (defect {defect:e})")]
    NotSkew { name: String, defect: f64 },
    #[error("entropy is not a Casimir of J0 (|J0 e| = {0:e})")]
    NotCasimir(f64),
    #[error("modulation γ_{index} = {value} is not positive")]
    NonPositiveModulation { index: usize, value: f64 },
    #[error("state lies outside the model domain")]
    OutsideDomain,
    #[error("structure index {index} out of range (model has {count} irreversible structures)")]
    IndexOutOfRange { index: usize, count: usize },
    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),
    #[error("coordinate transform is singular")]
    SingularTransform,
    #[error("incomplete model: {0}")]
    Incomplete(&'static str),
}

/// The open state set 𝕏.
#[derive(Clone, Debug)]
pub enum StateDomain {
    /// Per-coordinate open intervals `(lower_i + margin, upper_i - margin)`;
    /// infinite bounds are allowed.
    Box {
        lower: Vec<f64>,
        upper: Vec<f64>,
        margin: f64,
    },
    /// Image of another domain under a linear map: `z ∈ D` iff `inverse·z ∈ inner`.
    Mapped {
        inner: Box<StateDomain>,
        inverse: Matrix,
    },
}

impl StateDomain {
    pub fn unbounded(n: usize) -> Self {
        StateDomain::Box {
            lower: vec![f64::NEG_INFINITY; n],
            upper: vec![f64::INFINITY; n],
            margin: DOMAIN_MARGIN,
        }
    }

    pub fn open_box(lower: Vec<f64>, upper: Vec<f64>) -> Self {
        StateDomain::Box {
            lower,
            upper,
            margin: DOMAIN_MARGIN,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            StateDomain::Box { lower, .. } => lower.len(),
            StateDomain::Mapped { inverse, .. } => inverse.ncols(),
        }
    }

    pub fn contains(&self, x: &Vector) -> bool {
        if x.iter().any(|v| !v.is_finite()) {
            return false;
        }
        match self {
            StateDomain::Box {
                lower,
                upper,
                margin,
            } => x
                .iter()
                .zip(lower.iter().zip(upper))
                .all(|(&v, (&lo, &hi))| v > lo + margin && v < hi - margin),
            StateDomain::Mapped { inner, inverse } => inner.contains(&(inverse * x)),
        }
    }

    /// Closed coordinate bounds inside the domain, usable as box constraints.
    /// Only available for the box kind.
    pub fn coordinate_bounds(&self) -> Option<(Vec<f64>, Vec<f64>)> {
        match self {
            StateDomain::Box {
                lower,
                upper,
                margin,
            } => {
                // Keep a little more than the margin so that iterates sitting
                // on a bound still evaluate.
                let pad = |b: f64| {
                    if b.is_finite() {
                        10.0 * margin * b.abs().max(1.0)
                    } else {
                        0.0
                    }
                };
                Some((
                    lower.iter().map(|&b| b + pad(b)).collect(),
                    upper.iter().map(|&b| b - pad(b)).collect(),
                ))
            }
            StateDomain::Mapped { .. } => None,
        }
    }
}

/// Finite region used to draw random test states: `map · uniform(lower, upper)`.
#[derive(Clone, Debug)]
pub struct SamplingRegion {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub map: Option<Matrix>,
}

impl SamplingRegion {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Self {
        SamplingRegion {
            lower,
            upper,
            map: None,
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vector {
        let raw = Vector::from_iterator(
            self.lower.len(),
            self.lower
                .iter()
                .zip(&self.upper)
                .map(|(&lo, &hi)| lo + (hi - lo) * rng.random::<f64>()),
        );
        match &self.map {
            Some(m) => m * raw,
            None => raw,
        }
    }
}

/// Reversible part `J0`.
#[derive(Clone)]
pub enum PoissonStructure {
    Zero,
    Constant(Matrix),
    StateDependent(MatrixFn),
}

/// Input map `g(x, H_x)`; always linear in the control.
#[derive(Clone)]
pub enum InputMap {
    Constant(Matrix),
    StateDependent(PairMatrixFn),
}

/// One irreversible interface: a constant skew-symmetric matrix and its
/// positive modulation `γ_k(x, H_x)`.
#[derive(Clone)]
pub struct IrreversibleCoupling {
    pub structure: Matrix,
    modulation: PairScalarFn,
}

impl IrreversibleCoupling {
    pub fn new(
        structure: Matrix,
        modulation: impl Fn(&Vector, &Vector) -> f64 + Send + Sync + 'static,
    ) -> Self {
        IrreversibleCoupling {
            structure,
            modulation: Arc::new(modulation),
        }
    }
}

/// Everything computed from a state once per right-hand-side evaluation.
#[derive(Clone, Debug)]
pub struct Evaluation {
    /// `H_x(x)`.
    pub co_energy: Vector,
    /// `{S,H}_{J_k}(x)` for every irreversible interface.
    pub brackets: Vec<f64>,
    /// `γ_k(x, H_x(x))`.
    pub modulations: Vec<f64>,
    /// `g(x, H_x(x))`.
    pub input_matrix: Matrix,
    /// Autonomous part `(J0 + Σ γ_k {S,H}_k J_k) H_x`.
    pub drift: Vector,
}

impl Evaluation {
    pub fn rhs(&self, u: &Vector) -> Vector {
        &self.drift + &self.input_matrix * u
    }

    /// `σ = Σ_k γ_k {S,H}_k²`.
    pub fn entropy_production(&self) -> f64 {
        self.brackets
            .iter()
            .zip(&self.modulations)
            .map(|(b, g)| g * b * b)
            .sum()
    }

    pub fn energy_output(&self) -> Vector {
        self.input_matrix.tr_mul(&self.co_energy)
    }
}

/// Result of [`RiphsModel::check_structure`].
#[derive(Clone, Debug, Serialize)]
pub struct StructureCheck {
    pub skew_defect: f64,
    pub casimir_defect: f64,
    pub min_modulation: f64,
    pub entropy_production: f64,
}

impl StructureCheck {
    pub fn passes(&self) -> bool {
        self.skew_defect <= STRUCTURE_TOL
            && self.casimir_defect <= STRUCTURE_TOL
            && self.min_modulation > 0.0
            && self.entropy_production >= 0.0
    }
}

/// Energy and entropy balance residuals of a simulated trajectory.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct BalanceResiduals {
    pub energy: f64,
    pub entropy: f64,
}

/// A reversible-irreversible port-Hamiltonian system.
#[derive(Clone)]
pub struct RiphsModel {
    name: String,
    state_dim: usize,
    input_dim: usize,
    poisson: PoissonStructure,
    hamiltonian: ScalarFn,
    gradient: VectorFn,
    hessian: Option<MatrixFn>,
    entropy: Vector,
    couplings: Vec<IrreversibleCoupling>,
    input_map: InputMap,
    domain: StateDomain,
    sampling: SamplingRegion,
}

impl fmt::Debug for RiphsModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RiphsModel")
            .field("name", &self.name)
            .field("state_dim", &self.state_dim)
            .field("input_dim", &self.input_dim)
            .field("irreversible", &self.couplings.len())
            .field("entropy", &self.entropy.as_slice())
            .finish()
    }
}

/// Builder for [`RiphsModel`]; see [`RiphsModel::builder`].
pub struct RiphsModelBuilder {
    name: String,
    state_dim: usize,
    input_dim: usize,
    poisson: PoissonStructure,
    hamiltonian: Option<(ScalarFn, VectorFn)>,
    hessian: Option<MatrixFn>,
    entropy: Option<Vector>,
    couplings: Vec<IrreversibleCoupling>,
    input_map: Option<InputMap>,
    domain: Option<StateDomain>,
    sampling: Option<SamplingRegion>,
}

impl RiphsModelBuilder {
    pub fn name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn hamiltonian(
        mut self,
        h: impl Fn(&Vector) -> f64 + Send + Sync + 'static,
        grad: impl Fn(&Vector) -> Vector + Send + Sync + 'static,
    ) -> Self {
        self.hamiltonian = Some((Arc::new(h), Arc::new(grad)));
        self
    }

    pub fn hessian(mut self, hess: impl Fn(&Vector) -> Matrix + Send + Sync + 'static) -> Self {
        self.hessian = Some(Arc::new(hess));
        self
    }

    pub fn entropy(mut self, e: Vector) -> Self {
        self.entropy = Some(e);
        self
    }

    pub fn poisson(mut self, j0: PoissonStructure) -> Self {
        self.poisson = j0;
        self
    }

    pub fn irreversible(
        mut self,
        structure: Matrix,
        modulation: impl Fn(&Vector, &Vector) -> f64 + Send + Sync + 'static,
    ) -> Self {
        self.couplings
            .push(IrreversibleCoupling::new(structure, modulation));
        self
    }

    pub fn input_map(mut self, g: InputMap) -> Self {
        self.input_map = Some(g);
        self
    }

    pub fn domain(mut self, domain: StateDomain) -> Self {
        self.domain = Some(domain);
        self
    }

    pub fn sampling(mut self, region: SamplingRegion) -> Self {
        self.sampling = Some(region);
        self
    }

    pub fn build(self) -> Result<RiphsModel, ModelError> {
        let n = self.state_dim;
        let m = self.input_dim;
        if n == 0 || m == 0 {
            return Err(ModelError::Dimension(
                "state and input dimensions must be positive".into(),
            ));
        }
        let (hamiltonian, gradient) = self
            .hamiltonian
            .ok_or(ModelError::Incomplete("hamiltonian"))?;
        let entropy = self.entropy.ok_or(ModelError::Incomplete("entropy"))?;
        if entropy.len() != n {
            return Err(ModelError::Dimension(format!(
                "entropy vector has length {}, expected {n}",
                entropy.len()
            )));
        }
        let input_map = self.input_map.ok_or(ModelError::Incomplete("input map"))?;
        if let InputMap::Constant(g) = &input_map {
            if g.shape() != (n, m) {
                return Err(ModelError::Dimension(format!(
                    "input matrix is {:?}, expected ({n}, {m})",
                    g.shape()
                )));
            }
        }
        for (k, c) in self.couplings.iter().enumerate() {
            if c.structure.shape() != (n, n) {
                return Err(ModelError::Dimension(format!("J{} is not {n}x{n}", k + 1)));
            }
            let defect = skew_defect(&c.structure);
            if defect > STRUCTURE_TOL {
                return Err(ModelError::NotSkew {
                    name: format!("J{}", k + 1),
                    defect,
                });
            }
        }
        if let PoissonStructure::Constant(j0) = &self.poisson {
            if j0.shape() != (n, n) {
                return Err(ModelError::Dimension(format!("J0 is not {n}x{n}")));
            }
            let defect = skew_defect(j0);
            if defect > STRUCTURE_TOL {
                return Err(ModelError::NotSkew {
                    name: "J0".into(),
                    defect,
                });
            }
            let cas = casimir_defect(j0, &entropy);
            if cas > STRUCTURE_TOL {
                return Err(ModelError::NotCasimir(cas));
            }
        }
        let domain = self.domain.unwrap_or_else(|| StateDomain::unbounded(n));
        if domain.dim() != n {
            return Err(ModelError::Dimension("domain dimension".into()));
        }
        let sampling = self
            .sampling
            .unwrap_or_else(|| SamplingRegion::new(vec![-1.0; n], vec![1.0; n]));
        Ok(RiphsModel {
            name: self.name,
            state_dim: n,
            input_dim: m,
            poisson: self.poisson,
            hamiltonian,
            gradient,
            hessian: self.hessian,
            entropy,
            couplings: self.couplings,
            input_map,
            domain,
            sampling,
        })
    }
}

/// `max|A + Aᵀ| / max(1, max|A|)`.
pub(crate) fn skew_defect(a: &Matrix) -> f64 {
    let scale = a.amax().max(1.0);
    (a + a.transpose()).amax() / scale
}

fn casimir_defect(j0: &Matrix, e: &Vector) -> f64 {
    let scale = (j0.norm() * e.norm()).max(f64::MIN_POSITIVE);
    let r = (j0 * e).norm();
    if r == 0.0 {
        0.0
    } else {
        r / scale
    }
}

impl RiphsModel {
    pub fn builder(state_dim: usize, input_dim: usize) -> RiphsModelBuilder {
        RiphsModelBuilder {
            name: "custom".into(),
            state_dim,
            input_dim,
            poisson: PoissonStructure::Zero,
            hamiltonian: None,
            hessian: None,
            entropy: None,
            couplings: Vec::new(),
            input_map: None,
            domain: None,
            sampling: None,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    /// Number `N` of irreversible interfaces.
    pub fn num_irreversible(&self) -> usize {
        self.couplings.len()
    }

    pub fn entropy_vector(&self) -> &Vector {
        &self.entropy
    }

    pub fn irreversible_structure(&self, k: usize) -> Option<&Matrix> {
        self.couplings.get(k).map(|c| &c.structure)
    }

    pub fn domain(&self) -> &StateDomain {
        &self.domain
    }

    pub fn sampling_region(&self) -> &SamplingRegion {
        &self.sampling
    }

    /// True when the model has no reversible part, i.e. `J0 ≡ 0`.
    pub fn is_purely_irreversible(&self) -> bool {
        matches!(self.poisson, PoissonStructure::Zero)
    }

    pub fn contains(&self, x: &Vector) -> bool {
        x.len() == self.state_dim && self.domain.contains(x)
    }

    fn check_state(&self, x: &Vector) -> Result<(), ModelError> {
        if x.len() != self.state_dim {
            return Err(ModelError::Dimension(format!(
                "state has length {}, expected {}",
                x.len(),
                self.state_dim
            )));
        }
        if !self.domain.contains(x) {
            return Err(ModelError::OutsideDomain);
        }
        Ok(())
    }

    pub fn hamiltonian(&self, x: &Vector) -> f64 {
        (self.hamiltonian)(x)
    }

    pub fn co_energy(&self, x: &Vector) -> Vector {
        (self.gradient)(x)
    }

    pub fn entropy(&self, x: &Vector) -> f64 {
        self.entropy.dot(x)
    }

    pub fn has_analytic_hessian(&self) -> bool {
        self.hessian.is_some()
    }

    /// `H_xx(x)`: analytic when supplied, otherwise central differences of
    /// the gradient with step `max(1e-6, 1e-8‖x‖)`.
    pub fn hessian(&self, x: &Vector) -> Matrix {
        match &self.hessian {
            Some(h) => h(x),
            None => self.hessian_fd(x),
        }
    }

    /// Central finite-difference Hessian, regardless of an analytic one.
    pub fn hessian_fd(&self, x: &Vector) -> Matrix {
        let n = self.state_dim;
        let h = (1e-8 * x.norm()).max(1e-6);
        let mut out = Matrix::zeros(n, n);
        let mut xp = x.clone();
        for j in 0..n {
            xp[j] = x[j] + h;
            let gp = (self.gradient)(&xp);
            xp[j] = x[j] - h;
            let gm = (self.gradient)(&xp);
            xp[j] = x[j];
            out.set_column(j, &((gp - gm) / (2.0 * h)));
        }
        (&out + out.transpose()) * 0.5
    }

    pub fn poisson_matrix(&self, x: &Vector) -> Matrix {
        match &self.poisson {
            PoissonStructure::Zero => Matrix::zeros(self.state_dim, self.state_dim),
            PoissonStructure::Constant(j) => j.clone(),
            PoissonStructure::StateDependent(f) => f(x),
        }
    }

    pub fn input_matrix(&self, x: &Vector, co_energy: &Vector) -> Matrix {
        match &self.input_map {
            InputMap::Constant(g) => g.clone(),
            InputMap::StateDependent(f) => f(x, co_energy),
        }
    }

    /// Evaluate all state-dependent quantities once.
    pub fn evaluate(&self, x: &Vector) -> Result<Evaluation, ModelError> {
        self.check_state(x)?;
        let hx = (self.gradient)(x);
        if hx.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite("co-energy"));
        }
        let mut drift = match &self.poisson {
            PoissonStructure::Zero => Vector::zeros(self.state_dim),
            PoissonStructure::Constant(j0) => j0 * &hx,
            PoissonStructure::StateDependent(f) => {
                let j0 = f(x);
                let defect = skew_defect(&j0);
                if defect > STRUCTURE_TOL {
                    return Err(ModelError::NotSkew {
                        name: "J0".into(),
                        defect,
                    });
                }
                let cas = casimir_defect(&j0, &self.entropy);
                if cas > STRUCTURE_TOL {
                    return Err(ModelError::NotCasimir(cas));
                }
                j0 * &hx
            }
        };
        let mut brackets = Vec::with_capacity(self.couplings.len());
        let mut modulations = Vec::with_capacity(self.couplings.len());
        for (k, c) in self.couplings.iter().enumerate() {
            let jh = &c.structure * &hx;
            let bracket = self.entropy.dot(&jh);
            let gamma = (c.modulation)(x, &hx);
            if !gamma.is_finite() {
                return Err(ModelError::NonFinite("modulation"));
            }
            if gamma <= 0.0 {
                return Err(ModelError::NonPositiveModulation {
                    index: k + 1,
                    value: gamma,
                });
            }
            drift.axpy(gamma * bracket, &jh, 1.0);
            brackets.push(bracket);
            modulations.push(gamma);
        }
        let input_matrix = self.input_matrix(x, &hx);
        if input_matrix.shape() != (self.state_dim, self.input_dim) {
            return Err(ModelError::Dimension("input map output shape".into()));
        }
        if drift.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite("drift"));
        }
        Ok(Evaluation {
            co_energy: hx,
            brackets,
            modulations,
            input_matrix,
            drift,
        })
    }

    /// `{S,H}_{J_k}(x) = eᵀ J_k H_x(x)`, with `k` counted from zero.
    pub fn poisson_bracket(&self, k: usize, x: &Vector) -> Result<f64, ModelError> {
        let c = self.couplings.get(k).ok_or(ModelError::IndexOutOfRange {
            index: k,
            count: self.couplings.len(),
        })?;
        self.check_state(x)?;
        let hx = (self.gradient)(x);
        Ok(self.entropy.dot(&(&c.structure * hx)))
    }

    /// `f(x, u)`.
    pub fn rhs(&self, x: &Vector, u: &Vector) -> Result<Vector, ModelError> {
        if u.len() != self.input_dim {
            return Err(ModelError::Dimension(format!(
                "control has length {}, expected {}",
                u.len(),
                self.input_dim
            )));
        }
        let f = self.evaluate(x)?.rhs(u);
        if f.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite("right-hand side"));
        }
        Ok(f)
    }

    /// Conjugate outputs `(y_H, y_S) = (gᵀH_x, gᵀe)`.
    pub fn outputs(&self, x: &Vector) -> Result<(Vector, Vector), ModelError> {
        self.check_state(x)?;
        let hx = (self.gradient)(x);
        let g = self.input_matrix(x, &hx);
        Ok((g.tr_mul(&hx), g.tr_mul(&self.entropy)))
    }

    pub fn entropy_production(&self, x: &Vector) -> Result<f64, ModelError> {
        Ok(self.evaluate(x)?.entropy_production())
    }

    /// Numerical check of the structural invariants at `x`.
    pub fn check_structure(&self, x: &Vector) -> Result<StructureCheck, ModelError> {
        self.check_state(x)?;
        let j0 = self.poisson_matrix(x);
        let mut skew = skew_defect(&j0);
        for c in &self.couplings {
            skew = skew.max(skew_defect(&c.structure));
        }
        let casimir = casimir_defect(&j0, &self.entropy);
        let hx = (self.gradient)(x);
        let mut min_gamma = f64::INFINITY;
        let mut sigma = 0.0;
        for c in &self.couplings {
            let gamma = (c.modulation)(x, &hx);
            let b = self.entropy.dot(&(&c.structure * &hx));
            min_gamma = min_gamma.min(gamma);
            sigma += gamma * b * b;
        }
        Ok(StructureCheck {
            skew_defect: skew,
            casimir_defect: casimir,
            min_modulation: min_gamma,
            entropy_production: sigma,
        })
    }

    /// The model in coordinates `z = V x`.
    ///
    /// Returns the transformed model and the 2-norm condition number of `V`.
    pub fn transform(&self, v: &Matrix) -> Result<(RiphsModel, f64), ModelError> {
        let n = self.state_dim;
        if v.shape() != (n, n) {
            return Err(ModelError::Dimension(format!("transform must be {n}x{n}")));
        }
        let sv = v.clone().singular_values();
        let smax = sv.max();
        let smin = sv.min();
        if smin <= f64::EPSILON * smax * n as f64 {
            return Err(ModelError::SingularTransform);
        }
        let cond = smax / smin;
        let vinv = v
            .clone()
            .try_inverse()
            .ok_or(ModelError::SingularTransform)?;
        let vinv_t = vinv.transpose();
        let vt = v.transpose();

        let base = Arc::new(self.clone());
        let (b, vi) = (base.clone(), vinv.clone());
        let hamiltonian: ScalarFn = Arc::new(move |z| b.hamiltonian(&(&vi * z)));
        let (b, vi, vit) = (base.clone(), vinv.clone(), vinv_t.clone());
        let gradient: VectorFn = Arc::new(move |z| &vit * b.co_energy(&(&vi * z)));
        let (b, vi, vit) = (base.clone(), vinv.clone(), vinv_t.clone());
        let hessian: MatrixFn = Arc::new(move |z| &vit * b.hessian(&(&vi * z)) * &vi);
        let poisson = match &self.poisson {
            PoissonStructure::Zero => PoissonStructure::Zero,
            PoissonStructure::Constant(j0) => PoissonStructure::Constant(v * j0 * &vt),
            PoissonStructure::StateDependent(f) => {
                let (f, v, vi, vt) = (f.clone(), v.clone(), vinv.clone(), vt.clone());
                PoissonStructure::StateDependent(Arc::new(move |z| &v * f(&(&vi * z)) * &vt))
            }
        };
        let couplings = self
            .couplings
            .iter()
            .map(|c| {
                let gamma = c.modulation.clone();
                let (vi, vt) = (vinv.clone(), vt.clone());
                IrreversibleCoupling {
                    structure: v * &c.structure * v.transpose(),
                    modulation: Arc::new(move |z: &Vector, w: &Vector| {
                        gamma(&(&vi * z), &(&vt * w))
                    }),
                }
            })
            .collect();
        let input_map = match &self.input_map {
            InputMap::Constant(g) => InputMap::Constant(v * g),
            InputMap::StateDependent(f) => {
                let (f, v, vi, vt) = (f.clone(), v.clone(), vinv.clone(), vt.clone());
                InputMap::StateDependent(Arc::new(move |z, w| &v * f(&(&vi * z), &(&vt * w))))
            }
        };
        let mut sampling = self.sampling.clone();
        sampling.map = Some(match &sampling.map {
            Some(m) => v * m,
            None => v.clone(),
        });
        let model = RiphsModel {
            name: format!("{} (transformed)", self.name),
            state_dim: n,
            input_dim: self.input_dim,
            poisson,
            hamiltonian,
            gradient,
            hessian: Some(hessian),
            entropy: &vinv_t * &self.entropy,
            couplings,
            input_map,
            domain: StateDomain::Mapped {
                inner: Box::new(self.domain.clone()),
                inverse: vinv,
            },
            sampling,
        };
        Ok((model, cond))
    }

    /// Discrete energy and entropy balance residuals of a trajectory,
    /// with supply and production evaluated at interval midpoints.
    pub fn balance_residuals(
        &self,
        traj: &TrajectorySolution,
    ) -> Result<BalanceResiduals, ModelError> {
        let k = traj.controls.len();
        if traj.states.len() != k + 1 || traj.time.len() != k + 1 {
            return Err(ModelError::Dimension(format!(
                "trajectory has {} states, {} times and {} controls",
                traj.states.len(),
                traj.time.len(),
                k
            )));
        }
        let mut energy_supply = 0.0;
        let mut entropy_supply = 0.0;
        for i in 0..k {
            let dt = traj.time[i + 1] - traj.time[i];
            let mid = (&traj.states[i] + &traj.states[i + 1]) * 0.5;
            let ev = self.evaluate(&mid)?;
            let u = &traj.controls[i];
            let y_h = ev.energy_output();
            let y_s = ev.input_matrix.tr_mul(&self.entropy);
            energy_supply += y_h.dot(u) * dt;
            entropy_supply += (ev.entropy_production() + y_s.dot(u)) * dt;
        }
        let first = &traj.states[0];
        let last = &traj.states[k];
        Ok(BalanceResiduals {
            energy: (self.hamiltonian(last) - self.hamiltonian(first) - energy_supply).abs(),
            entropy: (self.entropy(last) - self.entropy(first) - entropy_supply).abs(),
        })
    }
}
