//! Built-in models: a two-compartment heat exchanger, a gas-piston system
//! and a five-compartment heat network.

use nalgebra::{dmatrix, dvector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::equilibria::{EquilibriumError, EquilibriumSet};
use crate::model::{
    InputMap, Matrix, ModelError, PoissonStructure, RiphsModel, SamplingRegion, StateDomain, Vector,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SystemError {
    #[error("parameter `{name}` must be positive, got {value}")]
    InvalidParameter { name: &'static str, value: f64 },
    #[error("temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),
    #[error("unknown system `{0}`")]
    Unknown(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Equilibrium(#[from] EquilibriumError),
}

fn positive(name: &'static str, value: f64) -> Result<(), SystemError> {
    if value > 0.0 && value.is_finite() {
        Ok(())
    } else {
        Err(SystemError::InvalidParameter { name, value })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeatExchangerParams {
    pub c1: f64,
    pub c2: f64,
    pub lambda: f64,
    #[serde(rename = "T_ref")]
    pub t_ref: f64,
    #[serde(rename = "S_ref")]
    pub s_ref: f64,
    pub lambda_e: f64,
}

impl Default for HeatExchangerParams {
    fn default() -> Self {
        HeatExchangerParams {
            c1: 1.0,
            c2: 1.0,
            lambda: 1.0,
            t_ref: 1.0,
            s_ref: 0.0,
            lambda_e: 1.0,
        }
    }
}

impl HeatExchangerParams {
    pub fn validate(&self) -> Result<(), SystemError> {
        positive("c1", self.c1)?;
        positive("c2", self.c2)?;
        positive("lambda", self.lambda)?;
        positive("T_ref", self.t_ref)?;
        positive("lambda_e", self.lambda_e)?;
        if !self.s_ref.is_finite() {
            return Err(SystemError::InvalidParameter {
                name: "S_ref",
                value: self.s_ref,
            });
        }
        Ok(())
    }

    /// Compartment temperature `T_ref·exp((S - S_ref)/c)`.
    pub fn temperature(&self, s: f64, c: f64) -> f64 {
        self.t_ref * ((s - self.s_ref) / c).exp()
    }

    /// Entropies from temperatures, inverting `H_x`.
    pub fn entropies(&self, t1: f64, t2: f64) -> Result<Vector, SystemError> {
        for t in [t1, t2] {
            if !(t > 0.0) {
                return Err(SystemError::NonPositiveTemperature(t));
            }
        }
        Ok(dvector![
            self.s_ref + self.c1 * (t1 / self.t_ref).ln(),
            self.s_ref + self.c2 * (t2 / self.t_ref).ln()
        ])
    }
}

pub fn heat_exchanger(params: &HeatExchangerParams) -> Result<RiphsModel, SystemError> {
    params.validate()?;
    let p = params.clone();
    let c = [p.c1, p.c2];
    let (ph, pg, ps) = (p.clone(), p.clone(), p.clone());
    let lambda = p.lambda;
    Ok(RiphsModel::builder(2, 1)
        .name("heat_exchanger")
        .hamiltonian(
            move |x| (0..2).map(|i| c[i] * ph.temperature(x[i], c[i])).sum(),
            move |x| dvector![pg.temperature(x[0], c[0]), pg.temperature(x[1], c[1])],
        )
        .hessian(move |x| {
            Matrix::from_diagonal(&dvector![
                ps.temperature(x[0], c[0]) / c[0],
                ps.temperature(x[1], c[1]) / c[1]
            ])
        })
        .entropy(dvector![1.0, 1.0])
        .irreversible(dmatrix![0.0, -1.0; 1.0, 0.0], move |_, hx| {
            lambda / (hx[0] * hx[1])
        })
        .input_map(InputMap::Constant(dmatrix![1.0; 0.0]))
        .sampling(SamplingRegion::new(
            vec![p.s_ref - 2.0 * p.c1, p.s_ref - 2.0 * p.c2],
            vec![p.s_ref + 4.0 * p.c1, p.s_ref + 4.0 * p.c2],
        ))
        .build()?)
}

/// `{S_ref·(1,1) + t·(c₁,c₂)}`.
pub fn heat_exchanger_equilibria(
    params: &HeatExchangerParams,
    model: &RiphsModel,
) -> Result<EquilibriumSet, SystemError> {
    Ok(EquilibriumSet::affine(
        model,
        dvector![params.s_ref, params.s_ref],
        dmatrix![params.c1; params.c2],
    )?)
}

/// Entropy flow `λ_e (T_e - T₁)/T₁` delivered by a thermostat at `T_e`
/// through a wall with conduction coefficient `λ_e`.
pub fn thermostat_control(lambda_e: f64, t1: f64, t_e: f64) -> Result<f64, SystemError> {
    if !(t1 > 0.0) {
        return Err(SystemError::NonPositiveTemperature(t1));
    }
    Ok(lambda_e * (t_e - t1) / t1)
}

/// Thermostat temperature `T₁(1 + u/λ_e)` realizing the entropy flow `u`.
pub fn thermostat_temperature(lambda_e: f64, t1: f64, u: f64) -> Result<f64, SystemError> {
    if !(t1 > 0.0) {
        return Err(SystemError::NonPositiveTemperature(t1));
    }
    Ok(t1 * (1.0 + u / lambda_e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GasPistonParams {
    #[serde(rename = "N_mol")]
    pub n_mol: f64,
    #[serde(rename = "R")]
    pub r: f64,
    #[serde(rename = "T0")]
    pub t0: f64,
    #[serde(rename = "P0")]
    pub p0: f64,
    pub s0: f64,
    /// Piston mass; `None` selects `A·P0/g_grav`.
    pub m: Option<f64>,
    #[serde(rename = "A")]
    pub a: f64,
    pub kappa: f64,
    pub g_grav: f64,
    #[serde(rename = "V_max")]
    pub v_max: f64,
    pub lambda_e: f64,
}

impl Default for GasPistonParams {
    fn default() -> Self {
        GasPistonParams {
            n_mol: 0.01,
            r: 8.314462618,
            t0: 273.0,
            p0: 101.325,
            s0: 0.11,
            m: None,
            a: 0.5,
            kappa: 10.0,
            g_grav: 9.81,
            v_max: 1.0,
            lambda_e: 1.0,
        }
    }
}

impl GasPistonParams {
    pub fn validate(&self) -> Result<(), SystemError> {
        positive("N_mol", self.n_mol)?;
        positive("R", self.r)?;
        positive("T0", self.t0)?;
        positive("P0", self.p0)?;
        positive("s0", self.s0)?;
        positive("m", self.mass())?;
        positive("A", self.a)?;
        positive("g_grav", self.g_grav)?;
        positive("V_max", self.v_max)?;
        positive("lambda_e", self.lambda_e)?;
        if !(self.kappa >= 0.0) || !self.kappa.is_finite() {
            return Err(SystemError::InvalidParameter {
                name: "kappa",
                value: self.kappa,
            });
        }
        Ok(())
    }

    pub fn mass(&self) -> f64 {
        self.m.unwrap_or(self.a * self.p0 / self.g_grav)
    }

    fn rn(&self) -> f64 {
        self.r * self.n_mol
    }

    /// Exponent `β(S, V)` of the internal energy.
    pub fn beta(&self, s: f64, v: f64) -> f64 {
        let rn = self.rn();
        (s - self.n_mol * self.s0 + rn * (rn * self.t0).ln() - rn * (v * self.p0).ln()) / (1.5 * rn)
    }

    pub fn temperature(&self, s: f64, v: f64) -> f64 {
        self.t0 * self.beta(s, v).exp()
    }

    pub fn pressure(&self, s: f64, v: f64) -> f64 {
        self.rn() * self.temperature(s, v) / v
    }

    /// `(S, V, p)` from temperature, pressure and momentum.
    pub fn state(&self, t: f64, pressure: f64, momentum: f64) -> Result<Vector, SystemError> {
        if !(t > 0.0) {
            return Err(SystemError::NonPositiveTemperature(t));
        }
        positive("pressure", pressure)?;
        let rn = self.rn();
        Ok(dvector![
            self.n_mol * self.s0 + 2.5 * rn * (t / self.t0).ln() + rn * (self.p0 / pressure).ln(),
            rn * t / pressure,
            momentum
        ])
    }

    /// Reference state at `T0`, `P0` and rest.
    pub fn initial_state(&self) -> Vector {
        dvector![self.n_mol * self.s0, self.rn() * self.t0 / self.p0, 0.0]
    }

    /// Rest state at pressure `P0` and volume `ratio·V(0)`.
    pub fn expanded_state(&self, ratio: f64) -> Result<Vector, SystemError> {
        self.state(ratio * self.t0, self.p0, 0.0)
    }
}

/// With `kappa = 0` the model has no irreversible interface, since a
/// vanishing modulation is not admissible.
pub fn gas_piston(params: &GasPistonParams) -> Result<RiphsModel, SystemError> {
    params.validate()?;
    let p = params.clone();
    let m = p.mass();
    let weight = m * p.g_grav / p.a;
    let (ph, pg, ps) = (p.clone(), p.clone(), p.clone());
    let rn = p.rn();
    let s_mid = p.n_mol * p.s0;
    let mut b = RiphsModel::builder(3, 1)
        .name("gas_piston")
        .hamiltonian(
            move |x| {
                1.5 * rn * ph.t0 * ph.beta(x[0], x[1]).exp()
                    + x[2] * x[2] / (2.0 * m)
                    + weight * x[1]
            },
            move |x| {
                let t = pg.temperature(x[0], x[1]);
                dvector![t, -rn * t / x[1] + weight, x[2] / m]
            },
        )
        .hessian(move |x| {
            let (s, v) = (x[0], x[1]);
            let t = ps.temperature(s, v);
            let hsv = -t / (1.5 * v);
            dmatrix![
                t / (1.5 * rn), hsv, 0.0;
                hsv, 5.0 * rn * t / (3.0 * v * v), 0.0;
                0.0, 0.0, 1.0 / m
            ]
        })
        .entropy(dvector![1.0, 0.0, 0.0])
        .poisson(PoissonStructure::Constant(dmatrix![
            0.0, 0.0, 0.0;
            0.0, 0.0, p.a;
            0.0, -p.a, 0.0
        ]))
        .input_map(InputMap::Constant(dmatrix![1.0; 0.0; 0.0]))
        .domain(StateDomain::open_box(
            vec![f64::NEG_INFINITY, 0.0, f64::NEG_INFINITY],
            vec![f64::INFINITY, p.v_max, f64::INFINITY],
        ))
        .sampling(SamplingRegion::new(
            vec![s_mid - 0.1, 0.05 * p.v_max, -5.0],
            vec![s_mid + 0.1, 0.9 * p.v_max, 5.0],
        ));
    if p.kappa > 0.0 {
        let kappa = p.kappa;
        b = b.irreversible(
            dmatrix![
                0.0, 0.0, 1.0;
                0.0, 0.0, 0.0;
                -1.0, 0.0, 0.0
            ],
            move |_, hx| kappa / hx[0],
        );
    }
    Ok(b.build()?)
}

/// Rest states `{p = 0}`.
pub fn gas_piston_equilibria(
    params: &GasPistonParams,
    model: &RiphsModel,
) -> Result<EquilibriumSet, SystemError> {
    Ok(EquilibriumSet::affine(
        model,
        params.initial_state(),
        dmatrix![1.0, 0.0; 0.0, 1.0; 0.0, 0.0],
    )?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkParams {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    /// Coefficient of the 3–5 interface; `None` reuses `lambda3`.
    pub lambda4: Option<f64>,
}

impl Default for NetworkParams {
    fn default() -> Self {
        NetworkParams {
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 1.0,
            lambda4: None,
        }
    }
}

impl NetworkParams {
    pub fn lambdas(&self) -> [f64; 4] {
        [
            self.lambda1,
            self.lambda2,
            self.lambda3,
            self.lambda4.unwrap_or(self.lambda3),
        ]
    }

    pub fn validate(&self) -> Result<(), SystemError> {
        let names = ["lambda1", "lambda2", "lambda3", "lambda4"];
        for (name, v) in names.into_iter().zip(self.lambdas()) {
            positive(name, v)?;
        }
        Ok(())
    }
}

/// Pairs `(i, j)` of compartments joined by each interface.
pub const NETWORK_EDGES: [(usize, usize); 4] = [(0, 1), (1, 2), (2, 3), (2, 4)];

pub fn heat_network(params: &NetworkParams) -> Result<RiphsModel, SystemError> {
    params.validate()?;
    let mut b = RiphsModel::builder(5, 3)
        .name("heat_network")
        .hamiltonian(|x| x.iter().map(|s| s.exp()).sum(), |x| x.map(f64::exp))
        .hessian(|x| Matrix::from_diagonal(&x.map(f64::exp)))
        .entropy(Vector::from_element(5, 1.0));
    for ((i, j), lambda) in NETWORK_EDGES.into_iter().zip(params.lambdas()) {
        let mut jk = Matrix::zeros(5, 5);
        jk[(i, j)] = -1.0;
        jk[(j, i)] = 1.0;
        b = b.irreversible(jk, move |_, hx| lambda / (hx[i] * hx[j]));
    }
    let mut g = Matrix::zeros(5, 3);
    g[(0, 0)] = 1.0;
    g[(3, 1)] = 1.0;
    g[(4, 2)] = 1.0;
    Ok(b.input_map(InputMap::Constant(g))
        .sampling(SamplingRegion::new(vec![1.0; 5], vec![4.0; 5]))
        .build()?)
}

/// The diagonal `{x₁ = … = x₅}`.
pub fn heat_network_equilibria(model: &RiphsModel) -> Result<EquilibriumSet, SystemError> {
    Ok(EquilibriumSet::affine(
        model,
        Vector::zeros(5),
        Matrix::from_element(5, 1, 1.0),
    )?)
}

/// Steady state with prescribed `T₃, T₄, T₅` and the controls holding it:
/// heat flows out through compartments 4 and 5 and in through compartment 1.
pub fn network_steady_state(
    params: &NetworkParams,
    t3: f64,
    t4: f64,
    t5: f64,
) -> Result<(Vector, Vector), SystemError> {
    params.validate()?;
    for t in [t3, t4, t5] {
        if !(t > 0.0) {
            return Err(SystemError::NonPositiveTemperature(t));
        }
    }
    let [l1, l2, l3, l4] = params.lambdas();
    let q34 = l3 * (t3 - t4);
    let q35 = l4 * (t3 - t5);
    let q = q34 + q35;
    let t2 = t3 + q / l2;
    let t1 = t2 + q / l1;
    for t in [t1, t2] {
        if !(t > 0.0) {
            return Err(SystemError::NonPositiveTemperature(t));
        }
    }
    let x = dvector![t1.ln(), t2.ln(), t3.ln(), t4.ln(), t5.ln()];
    let u = dvector![q / t1, -q34 / t4, -q35 / t5];
    Ok((x, u))
}

/// Registry of the built-in systems, in a fixed order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SystemKind {
    HeatExchanger,
    GasPiston,
    HeatNetwork,
}

impl SystemKind {
    pub const ALL: [SystemKind; 3] = [
        SystemKind::HeatExchanger,
        SystemKind::GasPiston,
        SystemKind::HeatNetwork,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SystemKind::HeatExchanger => "heat_exchanger",
            SystemKind::GasPiston => "gas_piston",
            SystemKind::HeatNetwork => "heat_network",
        }
    }

    pub fn from_name(name: &str) -> Result<Self, SystemError> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == name)
            .ok_or_else(|| SystemError::Unknown(name.to_string()))
    }

    pub fn description(self) -> &'static str {
        match self {
            SystemKind::HeatExchanger => {
                "two compartments coupled by a conducting wall, entropy flow into compartment 1"
            }
            SystemKind::GasPiston => "ideal gas under a frictional piston, heat flow into the gas",
            SystemKind::HeatNetwork => {
                "five compartments on a tree, entropy flows into compartments 1, 4 and 5"
            }
        }
    }
}

/// Parameters of any built-in system.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(untagged)]
pub enum SystemParams {
    HeatExchanger(HeatExchangerParams),
    GasPiston(GasPistonParams),
    HeatNetwork(NetworkParams),
}

impl SystemParams {
    pub fn defaults(kind: SystemKind) -> Self {
        match kind {
            SystemKind::HeatExchanger => SystemParams::HeatExchanger(Default::default()),
            SystemKind::GasPiston => SystemParams::GasPiston(Default::default()),
            SystemKind::HeatNetwork => SystemParams::HeatNetwork(Default::default()),
        }
    }

    pub fn kind(&self) -> SystemKind {
        match self {
            SystemParams::HeatExchanger(_) => SystemKind::HeatExchanger,
            SystemParams::GasPiston(_) => SystemKind::GasPiston,
            SystemParams::HeatNetwork(_) => SystemKind::HeatNetwork,
        }
    }

    pub fn build(&self) -> Result<RiphsModel, SystemError> {
        match self {
            SystemParams::HeatExchanger(p) => heat_exchanger(p),
            SystemParams::GasPiston(p) => gas_piston(p),
            SystemParams::HeatNetwork(p) => heat_network(p),
        }
    }

    /// Closed-form set of thermodynamic equilibria.
    pub fn equilibria(&self, model: &RiphsModel) -> Result<EquilibriumSet, SystemError> {
        match self {
            SystemParams::HeatExchanger(p) => heat_exchanger_equilibria(p, model),
            SystemParams::GasPiston(p) => gas_piston_equilibria(p, model),
            SystemParams::HeatNetwork(_) => heat_network_equilibria(model),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn heat_exchanger_bracket_is_the_temperature_difference() {
        let p = HeatExchangerParams {
            c1: 1.5,
            c2: 0.7,
            ..Default::default()
        };
        let model = heat_exchanger(&p).unwrap();
        let x = dvector![0.3, -0.2];
        let b = model.poisson_bracket(0, &x).unwrap();
        assert_relative_eq!(
            b,
            p.temperature(0.3, 1.5) - p.temperature(-0.2, 0.7),
            epsilon = 1e-14
        );
        let eq = p.entropies(2.0, 2.0).unwrap();
        assert!(model.poisson_bracket(0, &eq).unwrap().abs() < 1e-14);
    }

    #[test]
    fn heat_exchanger_inverse_round_trip() {
        let p = HeatExchangerParams {
            c1: 2.0,
            c2: 0.5,
            t_ref: 3.0,
            s_ref: 1.0,
            ..Default::default()
        };
        let model = heat_exchanger(&p).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let x = model.sampling_region().sample(&mut rng);
            let t = model.co_energy(&x);
            let back = p.entropies(t[0], t[1]).unwrap();
            assert!((back - &x).amax() < 1e-12);
        }
    }

    #[test]
    fn heat_exchanger_equilibrium_line_has_no_production() {
        let p = HeatExchangerParams {
            c1: 2.0,
            c2: 0.5,
            s_ref: 0.4,
            ..Default::default()
        };
        let model = heat_exchanger(&p).unwrap();
        for t in [-1.0, 0.0, 0.7, 2.5] {
            let x = dvector![p.s_ref + t * p.c1, p.s_ref + t * p.c2];
            assert!(model.entropy_production(&x).unwrap() < 1e-14);
        }
        assert!(heat_exchanger_equilibria(&p, &model).is_ok());
    }

    #[test]
    fn thermostat_examples() {
        assert_eq!(thermostat_control(1.0, 300.0, 300.0).unwrap(), 0.0);
        assert_relative_eq!(
            thermostat_control(1.0, 273.0, 546.0).unwrap(),
            1.0,
            epsilon = 1e-15
        );
        let u = 0.37;
        let te = thermostat_temperature(2.0, 280.0, u).unwrap();
        assert_relative_eq!(
            thermostat_control(2.0, 280.0, te).unwrap(),
            u,
            epsilon = 1e-14
        );
        assert!(thermostat_control(1.0, 0.0, 1.0).is_err());
    }

    #[test]
    fn gas_piston_reference_state() {
        let p = GasPistonParams::default();
        assert_relative_eq!(p.mass(), 5.1644, epsilon = 1e-4);
        let x = p.initial_state();
        assert!(p.beta(x[0], x[1]).abs() < 1e-12);
        assert_relative_eq!(p.temperature(x[0], x[1]), p.t0, epsilon = 1e-10);
        assert_relative_eq!(p.pressure(x[0], x[1]), p.p0, epsilon = 1e-10);
        let model = gas_piston(&p).unwrap();
        let j0 = model.poisson_matrix(&x);
        assert!((j0 * model.entropy_vector()).amax() == 0.0);
        // At rest with P = P0 the piston is balanced.
        assert!(model.rhs(&x, &dvector![0.0]).unwrap().amax() < 1e-9);
    }

    #[test]
    fn gas_piston_state_inverts_temperature_and_pressure() {
        let p = GasPistonParams::default();
        let x = p.state(310.0, 90.0, 0.2).unwrap();
        assert_relative_eq!(p.temperature(x[0], x[1]), 310.0, epsilon = 1e-9);
        assert_relative_eq!(p.pressure(x[0], x[1]), 90.0, epsilon = 1e-9);
    }

    #[test]
    fn gas_piston_dynamics_match_the_balance_equations() {
        let p = GasPistonParams::default();
        let model = gas_piston(&p).unwrap();
        let x = p.state(290.0, 95.0, 0.8).unwrap();
        let u = 0.3;
        let f = model.rhs(&x, &dvector![u]).unwrap();
        let (t, pr, v) = (290.0, 95.0, 0.8 / p.mass());
        assert_relative_eq!(f[0], p.kappa * v * v / t + u, epsilon = 1e-10);
        assert_relative_eq!(f[1], p.a * v, epsilon = 1e-10);
        assert_relative_eq!(
            f[2],
            p.a * pr - p.mass() * p.g_grav - p.kappa * v,
            epsilon = 1e-9
        );
    }

    #[test]
    fn frictionless_gas_piston_has_no_interfaces() {
        let p = GasPistonParams {
            kappa: 0.0,
            ..Default::default()
        };
        assert_eq!(gas_piston(&p).unwrap().num_irreversible(), 0);
    }

    #[test]
    fn network_brackets_and_rest() {
        let model = heat_network(&NetworkParams::default()).unwrap();
        let x = dvector![0.1, 0.5, 0.9, 1.3, 1.7];
        let t = x.map(f64::exp);
        let expect = [t[0] - t[1], t[1] - t[2], t[2] - t[3], t[2] - t[4]];
        for (k, e) in expect.iter().enumerate() {
            assert_relative_eq!(model.poisson_bracket(k, &x).unwrap(), e, epsilon = 1e-12);
        }
        let flat = Vector::from_element(5, 2.0);
        assert!(model.rhs(&flat, &Vector::zeros(3)).unwrap().amax() < 1e-15);
    }

    #[test]
    fn network_rhs_reproduces_the_compartment_odes() {
        let params = NetworkParams {
            lambda1: 1.3,
            lambda2: 0.7,
            lambda3: 2.0,
            lambda4: Some(0.4),
        };
        let [l1, l2, l3, l4] = params.lambdas();
        let model = heat_network(&params).unwrap();
        let x = dvector![0.2, 0.4, 0.1, 0.8, -0.3];
        let t = x.map(f64::exp);
        let f = model.rhs(&x, &Vector::zeros(3)).unwrap();
        let q = [
            l1 * (t[0] - t[1]),
            l2 * (t[1] - t[2]),
            l3 * (t[2] - t[3]),
            l4 * (t[2] - t[4]),
        ];
        let expect = [
            -q[0] / t[0],
            (q[0] - q[1]) / t[1],
            (q[1] - q[2] - q[3]) / t[2],
            q[2] / t[3],
            q[3] / t[4],
        ];
        for i in 0..5 {
            assert_relative_eq!(f[i], expect[i], epsilon = 1e-12);
        }
    }

    #[test]
    fn network_steady_states_are_steady() {
        let params = NetworkParams::default();
        let model = heat_network(&params).unwrap();
        let (x, u) = network_steady_state(&params, 25.0, 20.0, 22.0).unwrap();
        assert!(model.rhs(&x, &u).unwrap().amax() < 1e-14);
        assert!(model.entropy_production(&x).unwrap() > 0.0);
    }

    #[test]
    fn registry_has_three_systems() {
        assert_eq!(SystemKind::ALL.len(), 3);
        for k in SystemKind::ALL {
            assert_eq!(SystemKind::from_name(k.name()).unwrap(), k);
            let params = SystemParams::defaults(k);
            let model = params.build().unwrap();
            params.equilibria(&model).unwrap();
        }
        assert!(SystemKind::from_name("boiler").is_err());
    }

    #[test]
    fn invalid_parameters_are_rejected() {
        let p = HeatExchangerParams {
            lambda: 0.0,
            ..Default::default()
        };
        assert!(matches!(
            heat_exchanger(&p),
            Err(SystemError::InvalidParameter { name: "lambda", .. })
        ));
    }
}
