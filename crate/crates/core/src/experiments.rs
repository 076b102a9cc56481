//! Ready-made problems: output stabilization of the heat exchanger, a
//! volume set-point change of the gas piston and output tracking in the
//! heat network.

use nalgebra::{dmatrix, dvector};

use crate::equilibria::EquilibriumSet;
use crate::integrate::HorizonSpec;
use crate::model::Vector;
use crate::nlp::NlpOptions;
use crate::ocp::{ControlBounds, CostWeights, OcpOptions, OcpSpec, OutputSpec, TerminalSpec};
use crate::systems::{
    gas_piston, gas_piston_equilibria, heat_exchanger, heat_exchanger_equilibria, heat_network,
    heat_network_equilibria, GasPistonParams, HeatExchangerParams, NetworkParams, SystemError,
};

pub const DT: f64 = 0.01;

/// A problem together with its closed-form equilibrium set.
pub struct Preset {
    pub spec: OcpSpec,
    pub equilibria: EquilibriumSet,
}

/// Track `S₂ = ln 25` from `S₁ = S₂ = ln 20` while minimizing entropy
/// production, `u ∈ [-5, 5]`.
pub fn heat_stabilization(t_f: f64) -> Result<Preset, SystemError> {
    let p = HeatExchangerParams::default();
    let model = heat_exchanger(&p)?;
    let equilibria = heat_exchanger_equilibria(&p, &model)?;
    let output = OutputSpec::new(dmatrix![0.0, 1.0], dvector![25f64.ln()], 1.0)
        .expect("reference lies in the image");
    Ok(Preset {
        spec: OcpSpec {
            model,
            x0: dvector![20f64.ln(), 20f64.ln()],
            horizon: HorizonSpec::new(t_f, DT).map_err(|_| invalid_horizon(t_f))?,
            weights: CostWeights::entropy_extraction(1.0),
            output: Some(output),
            terminal: TerminalSpec::Free,
            bounds: ControlBounds::uniform(1, -5.0, 5.0),
            options: OcpOptions::default(),
        },
        equilibria,
    })
}

/// Expand the gas to `1.3·V(0)` and bring the piston to rest, starting from
/// `T0`, `P0`. The terminal entropy is the one of the rest state at `P0`.
/// Weights `α₁` and `α₂ = 1/T0`, `u ∈ [-2, 2]`.
pub fn gas_piston_setpoint(t_f: f64, alpha1: f64) -> Result<Preset, SystemError> {
    let p = GasPistonParams::default();
    let model = gas_piston(&p)?;
    let equilibria = gas_piston_equilibria(&p, &model)?;
    let target = p.expanded_state(1.3)?;
    // Temperatures within a factor ten of T0 at fixed volume.
    let ds = 1.5 * p.r * p.n_mol * 10f64.ln();
    let s0 = p.initial_state()[0];
    let state_bounds = Some((
        vec![s0 - ds, f64::NEG_INFINITY, f64::NEG_INFINITY],
        vec![s0 + ds, f64::INFINITY, f64::INFINITY],
    ));
    Ok(Preset {
        spec: OcpSpec {
            model,
            x0: p.initial_state(),
            horizon: HorizonSpec::new(t_f, DT).map_err(|_| invalid_horizon(t_f))?,
            weights: CostWeights {
                alpha1,
                alpha2: 1.0 / p.t0,
                t0: p.t0,
            },
            output: None,
            terminal: TerminalSpec::Point {
                target: target.as_slice().to_vec(),
            },
            bounds: ControlBounds::uniform(1, -2.0, 2.0),
            options: OcpOptions {
                nlp: NlpOptions {
                    stationarity_tol: 1e-9,
                    ..Default::default()
                },
                state_bounds,
                ..Default::default()
            },
        },
        equilibria,
    })
}

/// Entropy references `(ln 20, ln 30, ln 22)` of compartments 1, 4 and 5.
pub fn network_references() -> Vector {
    dvector![20f64.ln(), 30f64.ln(), 22f64.ln()]
}

/// Track unequal entropies in compartments 1, 4 and 5 from the uniform
/// state `ln 25`, `u ∈ [-5, 5]³`.
pub fn heat_network_tracking(t_f: f64) -> Result<Preset, SystemError> {
    let model = heat_network(&NetworkParams::default())?;
    let equilibria = heat_network_equilibria(&model)?;
    let c = dmatrix![
        1.0, 0.0, 0.0, 0.0, 0.0;
        0.0, 0.0, 0.0, 1.0, 0.0;
        0.0, 0.0, 0.0, 0.0, 1.0
    ];
    let output = OutputSpec::new(c, network_references(), 1.0).expect("C has full row rank");
    Ok(Preset {
        spec: OcpSpec {
            model,
            x0: Vector::from_element(5, 25f64.ln()),
            horizon: HorizonSpec::new(t_f, DT).map_err(|_| invalid_horizon(t_f))?,
            weights: CostWeights::entropy_extraction(1.0),
            output: Some(output),
            terminal: TerminalSpec::Free,
            bounds: ControlBounds::uniform(3, -5.0, 5.0),
            options: OcpOptions::default(),
        },
        equilibria,
    })
}

fn invalid_horizon(t_f: f64) -> SystemError {
    SystemError::InvalidParameter {
        name: "t_f",
        value: t_f,
    }
}
