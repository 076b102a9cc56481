//! Turnpike and balance diagnostics of computed trajectories.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::equilibria::{EquilibriumError, EquilibriumKind, EquilibriumSet};
use crate::model::{Matrix, ModelError, RiphsModel, Vector};
use crate::ocp::{solve_ocp, OcpError, OcpSpec, OutputSpec};
use crate::trajectory::TrajectorySolution;

/// Default `ε` of [`TurnpikeReport::fraction_near`].
pub const DEFAULT_EPSILON: f64 = 0.1;

/// Share of the horizon, centered, used for plateau statistics.
pub const PLATEAU_FRACTION: f64 = 0.6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiagnosticsError {
    #[error("the equilibrium set is empty")]
    EmptySet,
    #[error("trajectory does not match the model: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Equilibrium(#[from] EquilibriumError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// `point + span(basis)` with orthonormal basis columns.
#[derive(Clone, Debug, Serialize)]
pub struct AffineSubspace {
    pub point: Vector,
    pub basis: Matrix,
}

fn null_space(a: &Matrix) -> Matrix {
    let n = a.ncols();
    if a.nrows() == 0 {
        return Matrix::identity(n, n);
    }
    let eig = a.tr_mul(a).symmetric_eigen();
    let top = eig.eigenvalues.amax();
    let cols: Vec<Vector> = (0..n)
        .filter(|&i| !(top > 0.0 && eig.eigenvalues[i] > 1e-12 * top))
        .map(|i| eig.eigenvectors.column(i).into_owned())
        .collect();
    if cols.is_empty() {
        Matrix::zeros(n, 0)
    } else {
        Matrix::from_columns(&cols)
    }
}

impl AffineSubspace {
    /// The solution set `{x : C x = y}`, or `None` if it is empty.
    pub fn preimage(c: &Matrix, y: &Vector) -> Option<Self> {
        let point = c.clone().pseudo_inverse(1e-12).ok()? * y;
        if (c * &point - y).norm() > 1e-9 * y.norm().max(1.0) {
            return None;
        }
        Some(AffineSubspace {
            basis: null_space(c),
            point,
        })
    }

    pub fn dimension(&self) -> usize {
        self.basis.ncols()
    }

    pub fn project(&self, x: &Vector) -> Vector {
        let d = x - &self.point;
        &self.point + &self.basis * self.basis.tr_mul(&d)
    }

    pub fn distance(&self, x: &Vector) -> f64 {
        (x - self.project(x)).norm()
    }

    /// Intersection with `{x : C x = y}`, or `None` if empty.
    pub fn intersect_preimage(&self, c: &Matrix, y: &Vector) -> Option<Self> {
        let cb = c * &self.basis;
        let rhs = y - c * &self.point;
        let t = if cb.ncols() == 0 {
            Vector::zeros(0)
        } else {
            cb.clone().pseudo_inverse(1e-12).ok()? * &rhs
        };
        let scale = y.norm().max((c * &self.point).norm()).max(1.0);
        if (&cb * &t - &rhs).norm() > 1e-9 * scale {
            return None;
        }
        let point = &self.point + &self.basis * &t;
        let null = null_space(&cb);
        let basis = if null.ncols() == 0 {
            Matrix::zeros(self.point.len(), 0)
        } else {
            let b = &self.basis * null;
            b.qr().q()
        };
        Some(AffineSubspace { point, basis })
    }
}

/// Behavior over the central part of the horizon.
#[derive(Clone, Debug, Serialize)]
pub struct PlateauStats {
    pub t_start: f64,
    pub t_end: f64,
    /// `max ‖(x_{i+1} - x_i)/Δt‖∞` over intervals inside the window.
    pub max_rate: f64,
    pub min_sigma: f64,
    pub max_sigma: f64,
    /// Componentwise minimum and maximum of the states in the window.
    pub state_min: Vec<f64>,
    pub state_max: Vec<f64>,
}

/// Statistics over the nodes in the central `fraction` of the horizon.
pub fn plateau_statistics(traj: &TrajectorySolution, fraction: f64) -> PlateauStats {
    let nodes = traj.central_window(fraction);
    let (first, last) = (nodes[0], nodes[nodes.len() - 1]);
    let n = traj.states[0].len();
    let mut stats = PlateauStats {
        t_start: traj.time[first],
        t_end: traj.time[last],
        max_rate: 0.0,
        min_sigma: f64::INFINITY,
        max_sigma: 0.0,
        state_min: vec![f64::INFINITY; n],
        state_max: vec![f64::NEG_INFINITY; n],
    };
    for &i in &nodes {
        let s = traj.entropy_production[i];
        stats.min_sigma = stats.min_sigma.min(s);
        stats.max_sigma = stats.max_sigma.max(s);
        for j in 0..n {
            stats.state_min[j] = stats.state_min[j].min(traj.states[i][j]);
            stats.state_max[j] = stats.state_max[j].max(traj.states[i][j]);
        }
        if i < last {
            let dt = traj.time[i + 1] - traj.time[i];
            let rate = ((&traj.states[i + 1] - &traj.states[i]) / dt).amax();
            stats.max_rate = stats.max_rate.max(rate);
        }
    }
    stats
}

#[derive(Clone, Debug, Serialize)]
pub struct TurnpikeReport {
    pub t_f: f64,
    /// `Σ dist²(x_i, 𝒯) Δt`.
    pub integral_dist_sq: f64,
    /// `Σ dist²(x_i, C⁻¹{y_ref}) Δt`.
    pub integral_output_dist_sq: Option<f64>,
    /// `Σ dist²(x_i, 𝒯 ∩ C⁻¹{y_ref}) Δt` when the intersection is nonempty.
    pub integral_intersection_dist_sq: Option<f64>,
    /// Set when 𝒯 is affine and an output is tracked.
    pub intersection_empty: Option<bool>,
    pub epsilon: f64,
    /// Share of the horizon spent within `epsilon` of 𝒯.
    pub fraction_near: f64,
    /// `Σ σ(x̂_i) Δt` at the interval midpoints.
    pub entropy_production_integral: f64,
    pub bounding_box: (Vec<f64>, Vec<f64>),
    /// Projections that fell back to the `√σ` surrogate.
    pub fallback_projections: usize,
    pub plateau: PlateauStats,
}

/// Per-node distances to 𝒯 together with the number of surrogate fallbacks.
pub fn distance_series(
    model: &RiphsModel,
    traj: &TrajectorySolution,
    set: &EquilibriumSet,
) -> Result<(Vec<f64>, usize), DiagnosticsError> {
    let mut fallbacks = 0;
    let d = traj
        .states
        .iter()
        .map(|x| {
            let p = set.project(model, x)?;
            fallbacks += p.fallback as usize;
            Ok(p.distance)
        })
        .collect::<Result<Vec<_>, EquilibriumError>>()?;
    Ok((d, fallbacks))
}

/// Per-node distances to `C⁻¹{y_ref}`.
pub fn output_distance_series(output: &OutputSpec, traj: &TrajectorySolution) -> Vec<f64> {
    traj.states
        .iter()
        .map(|x| output.preimage_distance(x))
        .collect()
}

fn left_sum(traj: &TrajectorySolution, values: &[f64]) -> f64 {
    (0..traj.steps())
        .map(|i| values[i] * (traj.time[i + 1] - traj.time[i]))
        .sum()
}

fn affine_of(set: &EquilibriumSet) -> Option<AffineSubspace> {
    match set.kind() {
        EquilibriumKind::Affine { offset, basis } => Some(AffineSubspace {
            point: offset.clone(),
            basis: basis.clone(),
        }),
        EquilibriumKind::Implicit => None,
    }
}

pub fn turnpike_metrics(
    model: &RiphsModel,
    traj: &TrajectorySolution,
    set: &EquilibriumSet,
    output: Option<&OutputSpec>,
    epsilon: f64,
) -> Result<TurnpikeReport, DiagnosticsError> {
    if traj.states.first().map(|x| x.len()) != Some(model.state_dim()) {
        return Err(DiagnosticsError::Mismatch("state dimension".into()));
    }
    if set.likely_empty(model) {
        return Err(DiagnosticsError::EmptySet);
    }
    let t_f = traj.final_time() - traj.time[0];
    let (dist, fallback_projections) = distance_series(model, traj, set)?;
    let sq: Vec<f64> = dist.iter().map(|d| d * d).collect();
    let near: Vec<f64> = dist
        .iter()
        .map(|&d| if d <= epsilon { 1.0 } else { 0.0 })
        .collect();
    let fraction_near = if t_f > 0.0 {
        (left_sum(traj, &near) / t_f).clamp(0.0, 1.0)
    } else {
        1.0
    };
    let mut production = 0.0;
    for (i, mid) in traj.midpoints().iter().enumerate() {
        production += model.entropy_production(mid)? * (traj.time[i + 1] - traj.time[i]);
    }
    let mut report = TurnpikeReport {
        t_f,
        integral_dist_sq: left_sum(traj, &sq),
        integral_output_dist_sq: None,
        integral_intersection_dist_sq: None,
        intersection_empty: None,
        epsilon,
        fraction_near,
        entropy_production_integral: production,
        bounding_box: traj.bounding_box(),
        fallback_projections,
        plateau: plateau_statistics(traj, PLATEAU_FRACTION),
    };
    if let Some(out) = output {
        let od: Vec<f64> = output_distance_series(out, traj)
            .into_iter()
            .map(|d| d * d)
            .collect();
        report.integral_output_dist_sq = Some(left_sum(traj, &od));
        if let Some(aff) = affine_of(set) {
            match aff.intersect_preimage(&out.c, &out.y_ref) {
                Some(inter) => {
                    let id: Vec<f64> = traj
                        .states
                        .iter()
                        .map(|x| inter.distance(x).powi(2))
                        .collect();
                    report.integral_intersection_dist_sq = Some(left_sum(traj, &id));
                    report.intersection_empty = Some(false);
                }
                None => report.intersection_empty = Some(true),
            }
        }
    }
    Ok(report)
}

/// Constant `c_K` in `dist²(x, 𝒯) ≈ c_K σ(x)`, fitted on random points of a box.
#[derive(Clone, Debug, Serialize)]
pub struct SurrogateFit {
    /// Geometric mean of the sampled ratios.
    pub c_k: f64,
    pub ratio_min: f64,
    pub ratio_max: f64,
    pub samples: usize,
}

pub fn fit_surrogate_constant(
    model: &RiphsModel,
    set: &EquilibriumSet,
    lower: &[f64],
    upper: &[f64],
    samples: usize,
    seed: u64,
) -> Result<SurrogateFit, DiagnosticsError> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut logs = Vec::with_capacity(samples);
    let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
    let mut attempts = 0;
    while logs.len() < samples && attempts < 64 * samples.max(1) {
        attempts += 1;
        let x = Vector::from_iterator(
            lower.len(),
            lower
                .iter()
                .zip(upper)
                .map(|(&a, &b)| a + (b - a) * rng.random::<f64>()),
        );
        if !model.contains(&x) {
            continue;
        }
        let sigma = model.entropy_production(&x)?;
        let d = set.distance(model, &x)?;
        if sigma <= 1e-14 || d <= 1e-10 {
            continue;
        }
        let r = d * d / sigma;
        lo = lo.min(r);
        hi = hi.max(r);
        logs.push(r.ln());
    }
    if logs.is_empty() {
        return Err(DiagnosticsError::Mismatch(
            "no sample off the equilibrium set".into(),
        ));
    }
    Ok(SurrogateFit {
        c_k: (logs.iter().sum::<f64>() / logs.len() as f64).exp(),
        ratio_min: lo,
        ratio_max: hi,
        samples: logs.len(),
    })
}

/// `∫dist²(x, 𝒯)` by exact projection against `c_K ∫σ`.
#[derive(Clone, Debug, Serialize)]
pub struct SurrogateCheck {
    pub exact: f64,
    pub surrogate: f64,
    pub fit: SurrogateFit,
    pub ratio: f64,
    /// `ratio ∈ [1/10, 10]`.
    pub same_order: bool,
}

/// Fits `c_K` on the (slightly enlarged) bounding box of the trajectory and
/// compares both integrals.
pub fn surrogate_cross_check(
    model: &RiphsModel,
    traj: &TrajectorySolution,
    set: &EquilibriumSet,
    seed: u64,
) -> Result<SurrogateCheck, DiagnosticsError> {
    let (lo, hi) = traj.bounding_box();
    let (lo, hi): (Vec<f64>, Vec<f64>) = lo
        .iter()
        .zip(&hi)
        .map(|(&a, &b)| {
            let pad = 0.05 * (b - a) + 1e-6 * (1.0 + a.abs().max(b.abs()));
            (a - pad, b + pad)
        })
        .unzip();
    let fit = fit_surrogate_constant(model, set, &lo, &hi, 256, seed)?;
    let (dist, _) = distance_series(model, traj, set)?;
    let sq: Vec<f64> = dist.iter().map(|d| d * d).collect();
    let exact = left_sum(traj, &sq);
    let surrogate = fit.c_k * left_sum(traj, &traj.entropy_production);
    let ratio = if exact > 0.0 {
        surrogate / exact
    } else {
        f64::NAN
    };
    Ok(SurrogateCheck {
        exact,
        surrogate,
        same_order: (0.1..=10.0).contains(&ratio),
        ratio,
        fit,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepEntry {
    pub t_f: f64,
    pub report: Option<TurnpikeReport>,
    pub status: Option<String>,
    pub error: Option<String>,
    #[serde(skip)]
    pub solution: Option<TrajectorySolution>,
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepReport {
    pub entries: Vec<SweepEntry>,
    /// `max/min` of `integral_dist_sq` over the successful entries.
    pub ratio: Option<f64>,
}

impl SweepReport {
    /// `max/min` of any per-report quantity over the successful entries.
    pub fn ratio_of(&self, metric: impl Fn(&TurnpikeReport) -> f64) -> Option<f64> {
        let vals: Vec<f64> = self
            .entries
            .iter()
            .filter_map(|e| e.report.as_ref().map(&metric))
            .collect();
        if vals.is_empty() {
            return None;
        }
        let max = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = vals.iter().copied().fold(f64::INFINITY, f64::min);
        Some(if max == min { 1.0 } else { max / min })
    }
}

/// Worker count: `RIPHS_THREADS` if set, else the available parallelism.
pub fn sweep_threads() -> usize {
    std::env::var("RIPHS_THREADS")
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .filter(|&t| t > 0)
        .unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1)
        })
}

fn sweep_one(template: &OcpSpec, t_f: f64, set: &EquilibriumSet, epsilon: f64) -> SweepEntry {
    let mut entry = SweepEntry {
        t_f,
        report: None,
        status: None,
        error: None,
        solution: None,
    };
    let mut spec = template.clone();
    match crate::integrate::HorizonSpec::new(t_f, template.horizon.dt) {
        Ok(h) => spec.horizon = h,
        Err(e) => {
            entry.error = Some(e.to_string());
            return entry;
        }
    }
    let sol = match solve_ocp(&spec) {
        Ok(s) => s,
        Err(e) => {
            entry.error = Some(OcpError::to_string(&e));
            return entry;
        }
    };
    entry.status = Some(sol.metadata.status.clone());
    match turnpike_metrics(&spec.model, &sol, set, spec.output.as_ref(), epsilon) {
        Ok(r) => entry.report = Some(r),
        Err(e) => entry.error = Some(e.to_string()),
    }
    entry.solution = Some(sol);
    entry
}

/// Solve the template on each horizon (same `Δt`) and report turnpike
/// metrics. Failures are recorded per entry; entries come back sorted by
/// horizon.
pub fn horizon_sweep(
    template: &OcpSpec,
    horizons: &[f64],
    set: &EquilibriumSet,
    epsilon: f64,
) -> SweepReport {
    let threads = sweep_threads().min(horizons.len()).max(1);
    let mut slots: Vec<Option<SweepEntry>> = vec![None; horizons.len()];
    let next = std::sync::atomic::AtomicUsize::new(0);
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..threads)
            .map(|_| {
                scope.spawn(|| {
                    let mut done = Vec::new();
                    loop {
                        let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                        if i >= horizons.len() {
                            break;
                        }
                        done.push((i, sweep_one(template, horizons[i], set, epsilon)));
                    }
                    done
                })
            })
            .collect();
        for h in handles {
            for (i, e) in h.join().expect("sweep worker panicked") {
                slots[i] = Some(e);
            }
        }
    });
    let mut entries: Vec<SweepEntry> = slots
        .into_iter()
        .map(|e| e.expect("every slot filled"))
        .collect();
    entries.sort_by(|a, b| a.t_f.total_cmp(&b.t_f));
    let mut report = SweepReport {
        entries,
        ratio: None,
    };
    report.ratio = report.ratio_of(|r| r.integral_dist_sq);
    report
}
