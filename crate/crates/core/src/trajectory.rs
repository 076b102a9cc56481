use serde::Serialize;

use crate::model::{ModelError, RiphsModel, Vector};

/// Solver bookkeeping attached to a trajectory.
#[derive(Clone, Debug, Default, Serialize)]
pub struct SolverMetadata {
    /// `"simulated"`, `"converged"` or `"max_iterations"`.
    pub status: String,
    pub outer_iterations: usize,
    pub inner_iterations: usize,
    /// Total Newton iterations spent in implicit midpoint steps.
    pub newton_iterations: usize,
    /// Number of step bisections triggered by Newton failures.
    pub bisections: usize,
    pub constraint_violation: f64,
    pub projected_gradient: f64,
    pub objective: Option<f64>,
    pub tikhonov_weight: f64,
    pub identity_residual: Option<f64>,
    pub wall_time_s: f64,
}

/// Time grid with state, control, output and entropy-production series.
///
/// Controls are held constant on `[t_i, t_{i+1})`, so there is one control
/// fewer than there are states.
#[derive(Clone, Debug, Serialize)]
pub struct TrajectorySolution {
    pub time: Vec<f64>,
    pub states: Vec<Vector>,
    pub controls: Vec<Vector>,
    pub outputs_energy: Vec<Vector>,
    pub outputs_entropy: Vec<Vector>,
    pub entropy_production: Vec<f64>,
    pub metadata: SolverMetadata,
}

impl TrajectorySolution {
    /// Fill outputs and entropy production at every node.
    pub fn assemble(
        model: &RiphsModel,
        time: Vec<f64>,
        states: Vec<Vector>,
        controls: Vec<Vector>,
        metadata: SolverMetadata,
    ) -> Result<Self, ModelError> {
        if states.len() != time.len() || controls.len() + 1 != states.len() {
            return Err(ModelError::Dimension(format!(
                "{} times, {} states, {} controls",
                time.len(),
                states.len(),
                controls.len()
            )));
        }
        let mut outputs_energy = Vec::with_capacity(states.len());
        let mut outputs_entropy = Vec::with_capacity(states.len());
        let mut entropy_production = Vec::with_capacity(states.len());
        for x in &states {
            let ev = model.evaluate(x)?;
            outputs_energy.push(ev.energy_output());
            outputs_entropy.push(ev.input_matrix.tr_mul(model.entropy_vector()));
            entropy_production.push(ev.entropy_production());
        }
        Ok(TrajectorySolution {
            time,
            states,
            controls,
            outputs_energy,
            outputs_entropy,
            entropy_production,
            metadata,
        })
    }

    /// Number of intervals `K`.
    pub fn steps(&self) -> usize {
        self.controls.len()
    }

    pub fn final_time(&self) -> f64 {
        *self.time.last().unwrap_or(&0.0)
    }

    /// Interval midpoints `(x_i + x_{i+1}) / 2`.
    pub fn midpoints(&self) -> Vec<Vector> {
        self.states
            .windows(2)
            .map(|w| (&w[0] + &w[1]) * 0.5)
            .collect()
    }

    /// Componentwise bounding box of the states.
    pub fn bounding_box(&self) -> (Vec<f64>, Vec<f64>) {
        let n = self.states.first().map_or(0, |x| x.len());
        let mut lo = vec![f64::INFINITY; n];
        let mut hi = vec![f64::NEG_INFINITY; n];
        for x in &self.states {
            for j in 0..n {
                lo[j] = lo[j].min(x[j]);
                hi[j] = hi[j].max(x[j]);
            }
        }
        (lo, hi)
    }

    /// Node indices whose time lies in the central `fraction` of the horizon.
    pub fn central_window(&self, fraction: f64) -> Vec<usize> {
        let t0 = self.time.first().copied().unwrap_or(0.0);
        let tf = self.final_time();
        let margin = 0.5 * (1.0 - fraction) * (tf - t0);
        let tol = 1e-12 * (tf - t0).abs().max(1.0);
        self.time
            .iter()
            .enumerate()
            .filter(|(_, &t)| t >= t0 + margin - tol && t <= tf - margin + tol)
            .map(|(i, _)| i)
            .collect()
    }
}
