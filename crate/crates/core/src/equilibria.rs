//! The set 𝒯 of thermodynamic equilibria and steady-state analysis.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;
use thiserror::Error;

use crate::model::{Matrix, ModelError, RiphsModel, Vector};
use crate::nlp::{self, Element, EvalError, FnElement, NlpOptions, NlpProblem, NlpStatus};
use crate::ocp::{ControlBounds, CostWeights};

/// Relative singular-value threshold for rank decisions.
pub const RANK_TOL: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EquilibriumError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("the equilibrium set is empty or could not be located")]
    Empty,
    #[error("affine representation does not consist of equilibria (residual {0:e})")]
    NotEquilibria(f64),
    #[error("(x, u) is not a steady state (|f| = {0:e})")]
    NotSteady(f64),
    #[error("steady-state cost identity violated: direct {direct}, closed form {closed_form}")]
    IdentityMismatch { direct: f64, closed_form: f64 },
    #[error("no steady state found inside the domain and control bounds (violation {0:e})")]
    Infeasible(f64),
    #[error("steady-state search did not converge")]
    NonConvergence,
    #[error("invalid input: {0}")]
    Invalid(String),
}

/// Gauss–Newton projection settings for the implicit representation.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct ProjectionOptions {
    pub max_iterations: usize,
    pub residual_tol: f64,
    pub step_tol: f64,
    /// Constant `c` in the fallback distance estimate `c·√σ(x)`.
    pub surrogate_scale: f64,
}

impl Default for ProjectionOptions {
    fn default() -> Self {
        ProjectionOptions {
            max_iterations: 50,
            residual_tol: 1e-10,
            step_tol: 1e-12,
            surrogate_scale: 1.0,
        }
    }
}

#[derive(Clone, Debug)]
pub enum EquilibriumKind {
    /// `offset + span(basis)`, basis with orthonormal columns.
    Affine { offset: Vector, basis: Matrix },
    /// Zero set of `r(x) = Wᵀ H_x(x)`.
    Implicit,
}

/// The set `𝒯 = {x : {S,H}_{J_k}(x) = 0 for all k}`.
#[derive(Clone, Debug)]
pub struct EquilibriumSet {
    kind: EquilibriumKind,
    codim_vectors: Vec<Vector>,
    normal_basis: Matrix,
    rank: usize,
    dimension: usize,
    pub options: ProjectionOptions,
}

/// Result of projecting a state onto 𝒯.
#[derive(Clone, Debug, Serialize)]
pub struct Projection {
    pub point: Vector,
    pub distance: f64,
    pub iterations: usize,
    /// True when the projection failed and `distance` is the surrogate `c·√σ`.
    pub fallback: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct DimensionReport {
    pub rank: usize,
    pub dimension: usize,
    pub singular_values: Vec<f64>,
    /// Sampled points at which `rank [H_xx; H_xᵀ] = n` was checked.
    pub regularity_samples: usize,
    /// How many of them satisfied it.
    pub regularity_holds: usize,
}

fn codim_analysis(model: &RiphsModel) -> (Vec<Vector>, Matrix, Vec<f64>) {
    let n = model.state_dim();
    let e = model.entropy_vector();
    let vecs: Vec<Vector> = (0..model.num_irreversible())
        .map(|k| model.irreversible_structure(k).unwrap() * e)
        .collect();
    if vecs.is_empty() {
        return (vecs, Matrix::zeros(n, 0), Vec::new());
    }
    let m = Matrix::from_columns(&vecs);
    let svd = m.svd(true, false);
    let u = svd.u.expect("requested U");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let sv: Vec<f64> = order.iter().map(|&i| svd.singular_values[i]).collect();
    let smax = sv.first().copied().unwrap_or(0.0);
    let rank = sv
        .iter()
        .filter(|&&s| smax > 0.0 && s > RANK_TOL * smax)
        .count();
    let cols: Vec<Vector> = order[..rank]
        .iter()
        .map(|&i| u.column(i).into_owned())
        .collect();
    let basis = if cols.is_empty() {
        Matrix::zeros(n, 0)
    } else {
        Matrix::from_columns(&cols)
    };
    (vecs, basis, sv)
}

fn numerical_rank(m: &Matrix) -> usize {
    let sv = m.clone().singular_values();
    let smax = sv.max();
    if smax <= 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > RANK_TOL * smax).count()
}

/// `rank [J_1 e ⋯ J_N e]` and `dim 𝒯 = n - rank`, plus a sampled check of
/// `rank [H_xx; H_xᵀ] = n`.
pub fn manifold_dimension(model: &RiphsModel) -> DimensionReport {
    let (_, basis, sv) = codim_analysis(model);
    let n = model.state_dim();
    let rank = basis.ncols();
    let mut rng = ChaCha8Rng::seed_from_u64(0x7e57);
    let mut samples = 0;
    let mut holds = 0;
    for _ in 0..256 {
        if samples == 32 {
            break;
        }
        let x = model.sampling_region().sample(&mut rng);
        if !model.contains(&x) {
            continue;
        }
        samples += 1;
        let hxx = model.hessian(&x);
        let hx = model.co_energy(&x);
        let mut stacked = Matrix::zeros(n + 1, n);
        stacked.rows_mut(0, n).copy_from(&hxx);
        stacked.row_mut(n).copy_from(&hx.transpose());
        if numerical_rank(&stacked) == n {
            holds += 1;
        }
    }
    DimensionReport {
        rank,
        dimension: n - rank,
        singular_values: sv,
        regularity_samples: samples,
        regularity_holds: holds,
    }
}

fn orthonormalize(m: &Matrix) -> Matrix {
    if m.ncols() == 0 {
        return m.clone();
    }
    let svd = m.clone().svd(true, false);
    let u = svd.u.expect("requested U");
    let smax = svd.singular_values.max();
    let cols: Vec<Vector> = (0..svd.singular_values.len())
        .filter(|&i| svd.singular_values[i] > RANK_TOL * smax)
        .map(|i| u.column(i).into_owned())
        .collect();
    if cols.is_empty() {
        Matrix::zeros(m.nrows(), 0)
    } else {
        Matrix::from_columns(&cols)
    }
}

impl EquilibriumSet {
    /// Implicit representation, usable for any model.
    pub fn implicit(model: &RiphsModel) -> Self {
        let (codim_vectors, normal_basis, _) = codim_analysis(model);
        let rank = normal_basis.ncols();
        EquilibriumSet {
            kind: EquilibriumKind::Implicit,
            codim_vectors,
            normal_basis,
            rank,
            dimension: model.state_dim() - rank,
            options: ProjectionOptions::default(),
        }
    }

    /// Closed-form affine representation `offset + span(directions)`.
    ///
    /// The offset and small displacements along each direction that stay in
    /// the domain are checked to be equilibria.
    pub fn affine(
        model: &RiphsModel,
        offset: Vector,
        directions: Matrix,
    ) -> Result<Self, EquilibriumError> {
        let mut set = Self::implicit(model);
        let n = model.state_dim();
        if offset.len() != n || directions.nrows() != n {
            return Err(EquilibriumError::Invalid("affine set dimensions".into()));
        }
        let basis = orthonormalize(&directions);
        let mut worst = 0.0f64;
        let mut probes = vec![offset.clone()];
        for j in 0..basis.ncols() {
            for t in [0.1, -0.1, 1.0] {
                probes.push(&offset + basis.column(j) * t);
            }
        }
        for p in probes.iter().filter(|p| model.contains(p)) {
            let r = set.residual(model, p)?;
            let scale = model.co_energy(p).norm().max(1.0);
            worst = worst.max(r.norm() / scale);
        }
        if worst > RANK_TOL {
            return Err(EquilibriumError::NotEquilibria(worst));
        }
        set.kind = EquilibriumKind::Affine { offset, basis };
        Ok(set)
    }

    pub fn kind(&self) -> &EquilibriumKind {
        &self.kind
    }

    pub fn is_affine(&self) -> bool {
        matches!(self.kind, EquilibriumKind::Affine { .. })
    }

    /// The vectors `J_k e`.
    pub fn codim_vectors(&self) -> &[Vector] {
        &self.codim_vectors
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    /// `r(x) = Wᵀ H_x(x)` with `W` an orthonormal basis of `span{J_k e}`.
    pub fn residual(&self, model: &RiphsModel, x: &Vector) -> Result<Vector, EquilibriumError> {
        if !model.contains(x) {
            return Err(ModelError::OutsideDomain.into());
        }
        Ok(self.normal_basis.tr_mul(&model.co_energy(x)))
    }

    /// Orthogonal projection onto 𝒯 (exact for the affine kind, Gauss–Newton
    /// otherwise).
    pub fn project(&self, model: &RiphsModel, x: &Vector) -> Result<Projection, EquilibriumError> {
        match &self.kind {
            EquilibriumKind::Affine { offset, basis } => {
                let d = x - offset;
                let point = offset + basis * basis.tr_mul(&d);
                Ok(Projection {
                    distance: (x - &point).norm(),
                    point,
                    iterations: 0,
                    fallback: false,
                })
            }
            EquilibriumKind::Implicit => {
                if !model.contains(x) {
                    return Err(ModelError::OutsideDomain.into());
                }
                match self.gauss_newton(model, x) {
                    Some((point, iterations)) => Ok(Projection {
                        distance: (x - &point).norm(),
                        point,
                        iterations,
                        fallback: false,
                    }),
                    None => {
                        let sigma = model.entropy_production(x)?;
                        Ok(Projection {
                            point: x.clone(),
                            distance: self.options.surrogate_scale * sigma.max(0.0).sqrt(),
                            iterations: self.options.max_iterations,
                            fallback: true,
                        })
                    }
                }
            }
        }
    }

    pub fn distance(&self, model: &RiphsModel, x: &Vector) -> Result<f64, EquilibriumError> {
        Ok(self.project(model, x)?.distance)
    }

    /// Minimum-norm Gauss–Newton iteration for `min ‖ξ - x‖` s.t. `r(ξ) = 0`.
    fn gauss_newton(&self, model: &RiphsModel, x: &Vector) -> Option<(Vector, usize)> {
        if self.rank == 0 {
            return Some((x.clone(), 0));
        }
        let opts = &self.options;
        let rscale = model.co_energy(x).norm().max(1.0);
        let mut xi = x.clone();
        let mut r = self.normal_basis.tr_mul(&model.co_energy(&xi));
        for it in 0..opts.max_iterations {
            let jac = self.normal_basis.tr_mul(&model.hessian(&xi));
            let gram = &jac * jac.transpose();
            let back = x - &xi;
            let rhs = &r + &jac * &back;
            let lam = gram.lu().solve(&rhs)?;
            let step = back - jac.transpose() * lam;
            let rnorm = r.norm();
            let mut alpha = 1.0;
            let mut accepted = None;
            for _ in 0..=30 {
                let trial = &xi + &step * alpha;
                if model.contains(&trial) {
                    let rt = self.normal_basis.tr_mul(&model.co_energy(&trial));
                    let nt = rt.norm();
                    if nt.is_finite() && (nt < rnorm || nt <= 10.0 * opts.residual_tol * rscale) {
                        accepted = Some((trial, rt));
                        break;
                    }
                }
                alpha *= 0.5;
            }
            let (trial, rt) = accepted?;
            let moved = (&trial - &xi).norm();
            xi = trial;
            r = rt;
            if r.norm() <= opts.residual_tol * rscale && moved <= opts.step_tol * (1.0 + xi.norm())
            {
                return Some((xi, it + 1));
            }
        }
        (r.norm() <= opts.residual_tol * rscale).then_some((xi, opts.max_iterations))
    }

    /// Approximate emptiness test: no projection from 64 scattered starting
    /// points reaches the set. Never a certificate.
    pub fn likely_empty(&self, model: &RiphsModel) -> bool {
        if self.is_affine() || self.rank == 0 {
            return false;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0xe3);
        let mut tried = 0;
        for _ in 0..64 * 16 {
            if tried == 64 {
                break;
            }
            let x = model.sampling_region().sample(&mut rng);
            if !model.contains(&x) {
                continue;
            }
            tried += 1;
            if self.gauss_newton(model, &x).is_some() {
                return false;
            }
        }
        true
    }
}

/// Both sides of the steady-state identity `ℓ(x̄,ū) = α₂T₀σ(x̄)`.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct SteadyStateCost {
    /// `[α₁y_H - α₂T₀y_S]ᵀū`.
    pub direct: f64,
    /// `α₂T₀ Σ_k γ_k {S,H}_k²`.
    pub closed_form: f64,
    pub relative_gap: f64,
}

/// Steady-state residual tolerance `1e-9·(1 + ‖x‖)`.
pub fn steady_tolerance(x: &Vector) -> f64 {
    1e-9 * (1.0 + x.norm())
}

/// Evaluate the stage cost of a steady pair directly and in closed form;
/// the two must agree to `1e-9` relative.
pub fn steady_state_cost(
    model: &RiphsModel,
    x: &Vector,
    u: &Vector,
    weights: &CostWeights,
) -> Result<SteadyStateCost, EquilibriumError> {
    let ev = model.evaluate(x)?;
    if u.len() != model.input_dim() {
        return Err(EquilibriumError::Invalid("control dimension".into()));
    }
    let f = ev.rhs(u);
    let fnorm = f.norm();
    if fnorm > steady_tolerance(x) {
        return Err(EquilibriumError::NotSteady(fnorm));
    }
    let y_h = ev.energy_output();
    let y_s = ev.input_matrix.tr_mul(model.entropy_vector());
    let energy = weights.alpha1 * y_h.dot(u);
    let entropy = weights.alpha2 * weights.t0 * y_s.dot(u);
    let direct = energy - entropy;
    let closed_form = weights.alpha2 * weights.t0 * ev.entropy_production();
    let scale = direct
        .abs()
        .max(closed_form.abs())
        .max(energy.abs() + entropy.abs());
    let gap = (direct - closed_form).abs();
    let relative_gap = if scale > 0.0 { gap / scale } else { 0.0 };
    if gap > (1e-9 * scale).max(1e-15) {
        return Err(EquilibriumError::IdentityMismatch {
            direct,
            closed_form,
        });
    }
    Ok(SteadyStateCost {
        direct,
        closed_form,
        relative_gap,
    })
}

/// Membership in `𝒮`: `x ∈ 𝒯` and `g ū = -J₀ H_x`, both to `tol`.
pub fn in_lossless_steady_set(
    model: &RiphsModel,
    set: &EquilibriumSet,
    x: &Vector,
    u: &Vector,
    tol: f64,
) -> Result<bool, EquilibriumError> {
    let ev = model.evaluate(x)?;
    let scale = ev.co_energy.norm().max(1.0);
    let r = set.residual(model, x)?;
    if r.norm() > tol * scale {
        return Ok(false);
    }
    let balance = &ev.input_matrix * u + model.poisson_matrix(x) * &ev.co_energy;
    Ok(balance.norm() <= tol * scale)
}

#[derive(Clone, Debug, Serialize)]
pub struct SteadyState {
    pub state: Vector,
    pub control: Vector,
    pub stage_cost: f64,
    pub residual_norm: f64,
    /// Stage cost below `1e-8` and membership in `𝒮` verified to `1e-7`.
    pub certified: bool,
}

/// Solve `min ℓ(x̄, ū)` subject to `f(x̄, ū) = 0` and `ū` in the bounds,
/// starting from `initial`. Coordinates the domain leaves unbounded are
/// searched within three times the sampling region.
pub fn find_optimal_steady_state(
    model: &RiphsModel,
    weights: &CostWeights,
    bounds: &ControlBounds,
    initial: &Vector,
) -> Result<SteadyState, EquilibriumError> {
    let n = model.state_dim();
    let m = model.input_dim();
    if bounds.lower.len() != m {
        return Err(EquilibriumError::Invalid("bounds dimension".into()));
    }
    if !model.contains(initial) {
        return Err(ModelError::OutsideDomain.into());
    }
    let (mut lower, mut upper) = model
        .domain()
        .coordinate_bounds()
        .unwrap_or((vec![f64::NEG_INFINITY; n], vec![f64::INFINITY; n]));
    // Unbounded coordinates are confined to the sampling region widened by
    // its own width on both sides.
    let region = model.sampling_region();
    if region.map.is_none() {
        for j in 0..n {
            let width = region.upper[j] - region.lower[j];
            if lower[j].is_infinite() {
                lower[j] = region.lower[j] - width;
            }
            if upper[j].is_infinite() {
                upper[j] = region.upper[j] + width;
            }
        }
    }
    lower.extend_from_slice(&bounds.lower);
    upper.extend_from_slice(&bounds.upper);
    let mdl = model.clone();
    let w = *weights;
    let element: Box<dyn Element> = Box::new(FnElement::new(0, n + m, n, move |v, c| {
        let x = Vector::from_column_slice(&v[..n]);
        let u = Vector::from_column_slice(&v[n..]);
        let ev = mdl.evaluate(&x).map_err(|e| match e {
            ModelError::OutsideDomain => EvalError::Domain,
            _ => EvalError::NonFinite,
        })?;
        let f = ev.rhs(&u);
        c.copy_from_slice(f.as_slice());
        let y_h = ev.energy_output();
        let y_s = ev.input_matrix.tr_mul(mdl.entropy_vector());
        Ok((&y_h * w.alpha1 - &y_s * (w.alpha2 * w.t0)).dot(&u))
    }));
    let problem = NlpProblem::new(n + m, lower, upper, vec![element])
        .map_err(|e| EquilibriumError::Invalid(e.to_string()))?;
    let mut z0: Vec<f64> = initial.iter().copied().collect();
    z0.extend((0..m).map(|j| 0.0f64.max(bounds.lower[j]).min(bounds.upper[j])));
    let sol = nlp::solve(&problem, &z0, &NlpOptions::default())
        .map_err(|e| EquilibriumError::Invalid(e.to_string()))?;
    let x = Vector::from_column_slice(&sol.z[..n]);
    let u = Vector::from_column_slice(&sol.z[n..]);
    if sol.constraint_violation > 1e-6 {
        return Err(EquilibriumError::Infeasible(sol.constraint_violation));
    }
    if sol.status != NlpStatus::Converged && sol.constraint_violation > 1e-8 {
        return Err(EquilibriumError::NonConvergence);
    }
    let residual_norm = model.rhs(&x, &u)?.norm();
    let stage_cost = steady_stage_cost(model, weights, &x, &u)?;
    let set = EquilibriumSet::implicit(model);
    let certified = stage_cost <= 1e-8 && in_lossless_steady_set(model, &set, &x, &u, 1e-7)?;
    Ok(SteadyState {
        state: x,
        control: u,
        stage_cost,
        residual_norm,
        certified,
    })
}

fn steady_stage_cost(
    model: &RiphsModel,
    weights: &CostWeights,
    x: &Vector,
    u: &Vector,
) -> Result<f64, ModelError> {
    let (y_h, y_s) = model.outputs(x)?;
    Ok((y_h * weights.alpha1 - y_s * (weights.alpha2 * weights.t0)).dot(u))
}

/// Empirical constants relating `dist(x, ∩V_k)` and `Σ_k dist(x, V_k)`.
#[derive(Clone, Debug, Serialize)]
pub struct SubspaceReport {
    pub samples: usize,
    /// Samples with both sides numerically zero, excluded from the ratios.
    pub skipped: usize,
    /// `min RHS/LHS` over the sample.
    pub c_low: f64,
    /// `max RHS/LHS` over the sample.
    pub c_high: f64,
    pub intersection_dim: usize,
    /// All subspaces coincide; the ratio is then identically the number of
    /// subspaces and the constants are reported as that trivial bound.
    pub degenerate: bool,
}

fn projector(basis: &Matrix) -> Matrix {
    let q = orthonormalize(basis);
    &q * q.transpose()
}

/// Monte-Carlo check of the two-sided equivalence of distances to an
/// intersection of linear subspaces and the sum of distances to each.
pub fn subspace_distance_equivalence_check(
    subspaces: &[Matrix],
    samples: usize,
    seed: u64,
) -> Result<SubspaceReport, EquilibriumError> {
    if subspaces.len() < 2 {
        return Err(EquilibriumError::Invalid(
            "need at least two subspaces".into(),
        ));
    }
    let n = subspaces[0].nrows();
    if subspaces.iter().any(|b| b.nrows() != n) {
        return Err(EquilibriumError::Invalid(
            "subspaces live in different spaces".into(),
        ));
    }
    let eye = Matrix::identity(n, n);
    let complements: Vec<Matrix> = subspaces.iter().map(|b| &eye - projector(b)).collect();
    let mut stacked = Matrix::zeros(n * complements.len(), n);
    for (k, c) in complements.iter().enumerate() {
        stacked.rows_mut(k * n, n).copy_from(c);
    }
    let svd = stacked.svd(false, true);
    let vt = svd.v_t.expect("requested V");
    let smax = svd.singular_values.max();
    let null: Vec<Vector> = (0..svd.singular_values.len())
        .filter(|&i| smax <= 0.0 || svd.singular_values[i] <= RANK_TOL * smax)
        .map(|i| vt.row(i).transpose())
        .collect();
    let intersection_complement = if null.is_empty() {
        eye.clone()
    } else {
        &eye - projector(&Matrix::from_columns(&null))
    };
    let degenerate = complements
        .windows(2)
        .all(|w| (&w[0] - &w[1]).amax() <= 1e-12);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
    let mut skipped = 0;
    for _ in 0..samples {
        let x = Vector::from_fn(n, |_, _| StandardNormal.sample(&mut rng));
        let lhs = (&intersection_complement * &x).norm();
        let rhs: f64 = complements.iter().map(|c| (c * &x).norm()).sum();
        if lhs <= 1e-12 * x.norm() {
            skipped += 1;
            continue;
        }
        let ratio = rhs / lhs;
        lo = lo.min(ratio);
        hi = hi.max(ratio);
    }
    let k = subspaces.len() as f64;
    if degenerate || skipped == samples {
        lo = k;
        hi = k;
    }
    Ok(SubspaceReport {
        samples,
        skipped,
        c_low: lo,
        c_high: hi,
        intersection_dim: null.len(),
        degenerate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::dmatrix;

    #[test]
    fn axes_in_the_plane() {
        let report =
            subspace_distance_equivalence_check(&[dmatrix![1.0; 0.0], dmatrix![0.0; 1.0]], 2000, 1)
                .unwrap();
        assert_eq!(report.intersection_dim, 0);
        // At x = (1,1): LHS = √2, RHS = 2.
        assert!(report.c_low >= 1.0 - 1e-12 && report.c_low <= 2.0f64.sqrt());
        assert_relative_eq!(report.c_high, 2.0f64.sqrt(), max_relative = 1e-3);
    }

    #[test]
    fn identical_full_spaces_are_trivial() {
        let eye = Matrix::identity(3, 3);
        let r = subspace_distance_equivalence_check(&[eye.clone(), eye], 50, 2).unwrap();
        assert!(r.degenerate);
        assert_eq!(r.skipped, 50);
        assert_eq!((r.c_low, r.c_high), (2.0, 2.0));
    }

    #[test]
    fn single_subspace_is_rejected() {
        assert!(subspace_distance_equivalence_check(&[dmatrix![1.0; 0.0]], 10, 0).is_err());
    }
}
