//! JSON experiment configuration and its resolution into a control problem.

use std::path::{Path, PathBuf};

use riphs::equilibria::EquilibriumSet;
use riphs::integrate::HorizonSpec;
use riphs::model::{Matrix, Vector};
use riphs::nlp::{InnerSolver, NlpOptions};
use riphs::ocp::{
    ControlBounds, CostWeights, InitialGuess, OcpOptions, OcpSpec, OutputSpec, TerminalSpec,
};
use riphs::systems::{
    GasPistonParams, HeatExchangerParams, NetworkParams, SystemKind, SystemParams,
};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Configs shipped with the binary, by name.
pub const BUNDLED: [(&str, &str); 3] = [
    (
        "heat_stabilization",
        include_str!("../../../experiments/heat_stabilization.json"),
    ),
    (
        "gas_piston_setpoint",
        include_str!("../../../experiments/gas_piston_setpoint.json"),
    ),
    (
        "heat_network",
        include_str!("../../../experiments/heat_network.json"),
    ),
];

pub const DEFAULT_DT: f64 = 0.01;
pub const DEFAULT_EPSILON: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub system: SystemConfig,
    pub x0: Vec<f64>,
    pub horizon: HorizonConfig,
    pub weights: CostWeights,
    /// Per-channel `[lo, hi]`; the system default when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bounds: Option<Vec<[f64; 2]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<OutputConfig>,
    #[serde(default = "free_terminal")]
    pub terminal: TerminalSpec,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<Vec<f64>>,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemConfig {
    pub name: SystemKind,
    /// Overrides of the default parameters, by field name.
    #[serde(default)]
    pub params: serde_json::Map<String, serde_json::Value>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HorizonConfig {
    pub t_f: f64,
    #[serde(default = "default_dt")]
    pub dt: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(rename = "C")]
    pub c: Vec<Vec<f64>>,
    pub y_ref: Vec<f64>,
    #[serde(default = "unit_weight")]
    pub weight: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub constraint_tol: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stationarity_tol: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_outer: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_inner: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_penalty: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_penalty: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inner_solver: Option<InnerSolver>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lbfgs_memory: Option<usize>,
    /// Weight `ρ` of the control regularization; `1e-6·dt` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tikhonov: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_guess: Option<InitialGuessConfig>,
    /// Per-state `[lo, hi]`, `null` for an open side.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state_bounds: Option<Vec<[Option<f64>; 2]>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum InitialGuessConfig {
    Interpolate,
    /// A trajectory CSV written by `run`, stretched to the new horizon.
    WarmStart {
        csv: PathBuf,
    },
}

fn free_terminal() -> TerminalSpec {
    TerminalSpec::Free
}

fn default_epsilon() -> f64 {
    DEFAULT_EPSILON
}

fn default_dt() -> f64 {
    DEFAULT_DT
}

fn unit_weight() -> f64 {
    1.0
}

/// Control box used when a config gives none.
pub fn default_bounds(kind: SystemKind) -> Vec<[f64; 2]> {
    match kind {
        SystemKind::HeatExchanger => vec![[-5.0, 5.0]],
        SystemKind::GasPiston => vec![[-2.0, 2.0]],
        SystemKind::HeatNetwork => vec![[-5.0, 5.0]; 3],
    }
}

/// Reference temperature used by `equilibria` when nothing else is given.
pub fn default_t0(params: &SystemParams) -> f64 {
    match params {
        SystemParams::GasPiston(p) => p.t0,
        _ => 1.0,
    }
}

/// Defaults of `kind` with `overrides` applied field by field.
pub fn system_params(
    kind: SystemKind,
    overrides: &serde_json::Map<String, serde_json::Value>,
) -> Result<SystemParams, CliError> {
    let mut merged = match serde_json::to_value(SystemParams::defaults(kind)) {
        Ok(serde_json::Value::Object(m)) => m,
        _ => unreachable!("parameter structs serialize to objects"),
    };
    for (k, v) in overrides {
        merged.insert(k.clone(), v.clone());
    }
    let value = serde_json::Value::Object(merged);
    let bad = |e: serde_json::Error| CliError::Config(format!("{} parameters: {e}", kind.name()));
    let params = match kind {
        SystemKind::HeatExchanger => SystemParams::HeatExchanger(
            serde_json::from_value::<HeatExchangerParams>(value).map_err(bad)?,
        ),
        SystemKind::GasPiston => {
            SystemParams::GasPiston(serde_json::from_value::<GasPistonParams>(value).map_err(bad)?)
        }
        SystemKind::HeatNetwork => {
            SystemParams::HeatNetwork(serde_json::from_value::<NetworkParams>(value).map_err(bad)?)
        }
    };
    Ok(params)
}

/// Read a config from a file, or from the bundled set when `source` names
/// one and no such file exists.
pub fn load(source: &str) -> Result<(ExperimentConfig, String), CliError> {
    let path = Path::new(source);
    let text = if path.exists() {
        std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{source}: {e}")))?
    } else if let Some((_, text)) = BUNDLED.iter().find(|(n, _)| *n == source) {
        text.to_string()
    } else {
        return Err(CliError::Config(format!(
            "{source}: no such file and no bundled experiment of that name"
        )));
    };
    let config = parse(&text).map_err(|e| CliError::Config(format!("{source}: {e}")))?;
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("experiment")
        .to_string();
    let name = config.name.clone().unwrap_or(stem);
    Ok((config, name))
}

pub fn parse(text: &str) -> Result<ExperimentConfig, serde_json::Error> {
    serde_json::from_str(text)
}

/// A config with every default filled in, and what it builds.
pub struct Resolved {
    pub config: ExperimentConfig,
    pub spec: OcpSpec,
    pub set: EquilibriumSet,
}

impl ExperimentConfig {
    pub fn resolve(&self) -> Result<Resolved, CliError> {
        let kind = self.system.name;
        let params = system_params(kind, &self.system.params)?;
        let model = params.build().map_err(config_err)?;
        let set = params.equilibria(&model).map_err(config_err)?;
        let n = model.state_dim();

        let horizon = HorizonSpec::new(self.horizon.t_f, self.horizon.dt).map_err(config_err)?;
        self.weights.validate().map_err(config_err)?;

        let bounds = self.bounds.clone().unwrap_or_else(|| default_bounds(kind));
        let control_bounds = ControlBounds::new(
            bounds.iter().map(|b| b[0]).collect(),
            bounds.iter().map(|b| b[1]).collect(),
        )
        .map_err(config_err)?;

        let output = match &self.output {
            None => None,
            Some(o) => {
                if o.c.is_empty() || o.c.iter().any(|row| row.len() != n) {
                    return Err(CliError::Config(format!(
                        "output C needs rows of length {n}"
                    )));
                }
                let c = Matrix::from_fn(o.c.len(), n, |i, j| o.c[i][j]);
                let y = Vector::from_column_slice(&o.y_ref);
                Some(OutputSpec::new(c, y, o.weight).map_err(config_err)?)
            }
        };

        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(CliError::Config("epsilon must be positive".into()));
        }
        if let Some(h) = &self.sweep {
            check_horizons(h)?;
        }

        let defaults = NlpOptions::default();
        let s = &self.solver;
        let nlp = NlpOptions {
            constraint_tol: s.constraint_tol.unwrap_or(defaults.constraint_tol),
            stationarity_tol: s.stationarity_tol.unwrap_or(defaults.stationarity_tol),
            max_outer: s.max_outer.unwrap_or(defaults.max_outer),
            max_inner: s.max_inner.unwrap_or(defaults.max_inner),
            initial_penalty: s.initial_penalty.unwrap_or(defaults.initial_penalty),
            max_penalty: s.max_penalty.unwrap_or(defaults.max_penalty),
            inner_solver: s.inner_solver.unwrap_or(defaults.inner_solver),
            lbfgs_memory: s.lbfgs_memory.unwrap_or(defaults.lbfgs_memory),
        };
        let state_bounds = match &s.state_bounds {
            None => None,
            Some(b) if b.len() != n => {
                return Err(CliError::Config(format!("state_bounds need {n} entries")))
            }
            Some(b) => Some((
                b.iter()
                    .map(|r| r[0].unwrap_or(f64::NEG_INFINITY))
                    .collect(),
                b.iter().map(|r| r[1].unwrap_or(f64::INFINITY)).collect(),
            )),
        };
        let initial_guess = match &s.initial_guess {
            None | Some(InitialGuessConfig::Interpolate) => InitialGuess::Interpolate,
            Some(InitialGuessConfig::WarmStart { csv }) => {
                InitialGuess::WarmStart(Box::new(crate::artifacts::read_trajectory(&model, csv)?))
            }
        };

        let spec = OcpSpec {
            model,
            x0: Vector::from_column_slice(&self.x0),
            horizon,
            weights: self.weights,
            output,
            terminal: self.terminal.clone(),
            bounds: control_bounds,
            options: OcpOptions {
                nlp: nlp.clone(),
                tikhonov: s.tikhonov,
                initial_guess,
                state_bounds,
            },
        };
        spec.validate().map_err(config_err)?;

        let mut config = self.clone();
        config.system.params = match serde_json::to_value(&params) {
            Ok(serde_json::Value::Object(m)) => m,
            _ => unreachable!("parameter structs serialize to objects"),
        };
        config.bounds = Some(bounds);
        config.solver = SolverConfig {
            constraint_tol: Some(nlp.constraint_tol),
            stationarity_tol: Some(nlp.stationarity_tol),
            max_outer: Some(nlp.max_outer),
            max_inner: Some(nlp.max_inner),
            initial_penalty: Some(nlp.initial_penalty),
            max_penalty: Some(nlp.max_penalty),
            inner_solver: Some(nlp.inner_solver),
            lbfgs_memory: Some(nlp.lbfgs_memory),
            tikhonov: Some(spec.tikhonov_weight()),
            initial_guess: Some(
                s.initial_guess
                    .clone()
                    .unwrap_or(InitialGuessConfig::Interpolate),
            ),
            state_bounds: s.state_bounds.clone(),
        };
        Ok(Resolved { config, spec, set })
    }
}

pub fn check_horizons(h: &[f64]) -> Result<(), CliError> {
    if h.is_empty() || h.iter().any(|t| !(*t > 0.0 && t.is_finite())) {
        return Err(CliError::Config("sweep horizons must be positive".into()));
    }
    Ok(())
}

fn config_err(e: impl std::fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}
