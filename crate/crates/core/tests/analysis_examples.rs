use approx::assert_relative_eq;
use nalgebra::{dmatrix, dvector};
use riphs::diagnostics::{
    horizon_sweep, surrogate_cross_check, turnpike_metrics, AffineSubspace, DEFAULT_EPSILON,
};
use riphs::equilibria::{
    find_optimal_steady_state, in_lossless_steady_set, manifold_dimension, steady_state_cost,
    subspace_distance_equivalence_check, EquilibriumError,
};
use riphs::experiments::{heat_network_tracking, heat_stabilization, DT};
use riphs::integrate::{simulate, HorizonSpec};
use riphs::model::{Matrix, Vector};
use riphs::ocp::{
    cost_identity, cumulative_cost, solve_ocp, stage_cost, stretch_trajectory, transcribe,
    ControlBounds, CostWeights, OcpOptions, OcpSpec, OutputSpec, TerminalSpec,
};
use riphs::systems::{
    gas_piston, gas_piston_equilibria, heat_exchanger, heat_exchanger_equilibria, heat_network,
    heat_network_equilibria, thermostat_control, GasPistonParams, HeatExchangerParams,
    NetworkParams,
};
use riphs::trajectory::{SolverMetadata, TrajectorySolution};

#[test]
fn dimensions_of_the_equilibrium_sets() {
    let he = heat_exchanger(&HeatExchangerParams::default()).unwrap();
    let d = manifold_dimension(&he);
    assert_eq!((d.rank, d.dimension), (1, 1));
    let net = heat_network(&NetworkParams::default()).unwrap();
    let d = manifold_dimension(&net);
    assert_eq!((d.rank, d.dimension), (4, 1));
    let gp = gas_piston(&GasPistonParams::default()).unwrap();
    let d = manifold_dimension(&gp);
    assert_eq!((d.rank, d.dimension), (1, 2));
    assert_eq!(d.regularity_holds, d.regularity_samples);
}

#[test]
fn exchanger_distance_of_a_unit_offset() {
    let p = HeatExchangerParams::default();
    let model = heat_exchanger(&p).unwrap();
    let set = heat_exchanger_equilibria(&p, &model).unwrap();
    let d = set.distance(&model, &dvector![1.0, 0.0]).unwrap();
    assert_relative_eq!(d, 1.0 / 2f64.sqrt(), max_relative = 1e-14);
    assert!(set.distance(&model, &dvector![0.4, 0.4]).unwrap() < 1e-15);
}

#[test]
fn implicit_projection_agrees_with_the_closed_form() {
    let p = HeatExchangerParams {
        c1: 1.0,
        c2: 2.0,
        ..Default::default()
    };
    let model = heat_exchanger(&p).unwrap();
    let affine = heat_exchanger_equilibria(&p, &model).unwrap();
    let implicit = riphs::equilibria::EquilibriumSet::implicit(&model);
    let x = dvector![0.7, -0.2];
    let a = affine.distance(&model, &x).unwrap();
    let b = implicit.project(&model, &x).unwrap();
    assert!(!b.fallback);
    assert_relative_eq!(a, b.distance, max_relative = 1e-8);
}

#[test]
fn resting_piston_is_an_equilibrium() {
    let p = GasPistonParams::default();
    let model = gas_piston(&p).unwrap();
    let set = gas_piston_equilibria(&p, &model).unwrap();
    let x = p.state(320.0, 95.0, 0.0).unwrap();
    assert!(set.distance(&model, &x).unwrap() < 1e-12);
    let y = p.state(320.0, 95.0, 0.25).unwrap();
    assert_relative_eq!(
        set.distance(&model, &y).unwrap(),
        0.25,
        max_relative = 1e-12
    );
}

#[test]
fn steady_cost_vanishes_on_equilibria_with_zero_control() {
    let p = HeatExchangerParams::default();
    let model = heat_exchanger(&p).unwrap();
    let c = steady_state_cost(
        &model,
        &dvector![2.0, 2.0],
        &dvector![0.0],
        &CostWeights::exergy(300.0),
    )
    .unwrap();
    assert_eq!(c.direct, 0.0);
    assert_eq!(c.closed_form, 0.0);
}

#[test]
fn network_steady_cost_is_the_conduction_loss() {
    let params = NetworkParams::default();
    let model = heat_network(&params).unwrap();
    let (t3, t4, t5) = (3.0, 2.0, 2.5);
    let (x, u) = riphs::systems::network_steady_state(&params, t3, t4, t5).unwrap();
    let w = CostWeights::entropy_extraction(1.0);
    let c = steady_state_cost(&model, &x, &u, &w).unwrap();
    let t: Vec<f64> = x.iter().map(|s| s.exp()).collect();
    let oracle = [(0, 1), (1, 2), (2, 3), (2, 4)]
        .iter()
        .map(|&(i, j)| (t[i] - t[j]).powi(2) / (t[i] * t[j]))
        .sum::<f64>();
    assert_relative_eq!(c.closed_form, oracle, max_relative = 1e-12);
    assert_relative_eq!(c.direct, oracle, max_relative = 1e-9);
    assert!(c.direct > 0.0);
}

#[test]
fn non_steady_pair_is_rejected() {
    let model = heat_exchanger(&HeatExchangerParams::default()).unwrap();
    let r = steady_state_cost(
        &model,
        &dvector![1.0, 0.0],
        &dvector![0.0],
        &CostWeights::exergy(1.0),
    );
    assert!(matches!(r, Err(EquilibriumError::NotSteady(_))));
}

#[test]
fn piston_at_rest_with_thermostat_at_t0_costs_nothing() {
    let p = GasPistonParams::default();
    let model = gas_piston(&p).unwrap();
    let set = gas_piston_equilibria(&p, &model).unwrap();
    let x = p.initial_state();
    let u = dvector![thermostat_control(p.lambda_e, p.t0, p.t0).unwrap()];
    let c = steady_state_cost(&model, &x, &u, &CostWeights::exergy(p.t0)).unwrap();
    assert_eq!(c.direct, 0.0);
    assert!(in_lossless_steady_set(&model, &set, &x, &u, 1e-7).unwrap());
}

#[test]
fn optimal_steady_states_are_certified() {
    let p = HeatExchangerParams::default();
    let model = heat_exchanger(&p).unwrap();
    let ss = find_optimal_steady_state(
        &model,
        &CostWeights::entropy_extraction(1.0),
        &ControlBounds::uniform(1, -1.0, 1.0),
        &dvector![1.0, -0.5],
    )
    .unwrap();
    assert!(ss.certified, "{ss:?}");
    assert!(ss.stage_cost.abs() <= 1e-8);
    assert!((ss.state[0] - ss.state[1]).abs() <= 1e-6);

    let gp = GasPistonParams::default();
    let model = gas_piston(&gp).unwrap();
    let ss = find_optimal_steady_state(
        &model,
        &CostWeights::exergy(gp.t0),
        &ControlBounds::uniform(1, -1.0, 1.0),
        &gp.state(300.0, 100.0, 0.1).unwrap(),
    )
    .unwrap();
    assert!(ss.certified, "{ss:?}");
    assert!(ss.state[2].abs() <= 1e-7);
}

#[test]
fn perpendicular_axes_worked_example() {
    let r = subspace_distance_equivalence_check(&[dmatrix![1.0; 0.0], dmatrix![0.0; 1.0]], 200, 3)
        .unwrap();
    // At (1, 1): dist to {0} is √2, sum of axis distances is 2.
    assert!(r.c_low <= 2.0 / 2f64.sqrt() + 1e-12);
    assert!(r.c_high >= 1.0 - 1e-12 && r.c_high <= 2f64.sqrt() + 1e-12);
    assert_eq!(r.intersection_dim, 0);
}

#[test]
fn random_planes_have_finite_constants() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
    let planes: Vec<Matrix> = (0..3)
        .map(|_| Matrix::from_fn(5, 2, |_, _| rng.random_range(-1.0..1.0)))
        .collect();
    let r = subspace_distance_equivalence_check(&planes, 1000, 5).unwrap();
    assert!(r.c_low > 0.0 && r.c_high.is_finite());
    assert!(r.c_low <= r.c_high);
}

#[test]
fn stage_cost_worked_examples() {
    let p = HeatExchangerParams::default();
    let model = heat_exchanger(&p).unwrap();
    let w = CostWeights::entropy_extraction(1.0);
    let x = dvector![0.3, 0.1];
    assert_eq!(
        stage_cost(&model, &w, None, &x, &dvector![0.0]).unwrap(),
        0.0
    );
    assert_eq!(
        stage_cost(&model, &w, None, &x, &dvector![2.0]).unwrap(),
        -2.0
    );
    let out = OutputSpec::new(dmatrix![0.0, 1.0], dvector![25f64.ln()], 1.0).unwrap();
    let target = dvector![25f64.ln(), 25f64.ln()];
    assert_eq!(
        stage_cost(&model, &w, Some(&out), &target, &dvector![0.0]).unwrap(),
        0.0
    );
}

fn exchanger_spec(t_f: f64, terminal: TerminalSpec) -> OcpSpec {
    let p = HeatExchangerParams::default();
    OcpSpec {
        model: heat_exchanger(&p).unwrap(),
        x0: dvector![0.5, 0.5],
        horizon: HorizonSpec::new(t_f, DT).unwrap(),
        weights: CostWeights::entropy_extraction(1.0),
        output: None,
        terminal,
        bounds: ControlBounds::uniform(1, -1.0, 1.0),
        options: OcpOptions::default(),
    }
}

#[test]
fn transcription_sizes() {
    let tr = transcribe(&exchanger_spec(DT, TerminalSpec::Free)).unwrap();
    assert_eq!(tr.problem.num_vars(), 3);
    assert_eq!(tr.problem.num_constraints(), 2);

    let preset = heat_stabilization(10.0).unwrap();
    let tr = transcribe(&preset.spec).unwrap();
    assert_eq!(tr.problem.num_vars(), 2000 + 1000);
    assert_eq!(tr.problem.num_constraints(), 2000);

    let gp = GasPistonParams::default();
    let target = gp.expanded_state(1.3).unwrap();
    let spec = OcpSpec {
        model: gas_piston(&gp).unwrap(),
        x0: gp.initial_state(),
        horizon: HorizonSpec::new(4.0, DT).unwrap(),
        weights: CostWeights::entropy_extraction(gp.t0),
        output: None,
        terminal: TerminalSpec::Componentwise {
            indices: vec![1, 2],
            values: vec![target[1], 0.0],
        },
        bounds: ControlBounds::uniform(1, -2.0, 2.0),
        options: OcpOptions::default(),
    };
    let tr = transcribe(&spec).unwrap();
    assert_eq!(tr.problem.num_constraints(), 3 * 400 + 2);
}

#[test]
fn equilibrium_start_with_matching_output_costs_nothing() {
    let mut spec = exchanger_spec(1.0, TerminalSpec::Free);
    spec.weights = CostWeights::new(0.0, 0.0, 1.0).unwrap();
    spec.output = Some(OutputSpec::new(dmatrix![0.0, 1.0], dvector![0.5], 1.0).unwrap());
    let sol = solve_ocp(&spec).unwrap();
    assert_eq!(sol.metadata.status, "converged");
    assert!(sol.metadata.outer_iterations <= 1, "{:?}", sol.metadata);
    assert!(sol.metadata.objective.unwrap().abs() <= 1e-8);
}

#[test]
fn steady_start_cost_is_not_negative() {
    let spec = exchanger_spec(
        1.0,
        TerminalSpec::Point {
            target: vec![0.5, 0.5],
        },
    );
    let sol = solve_ocp(&spec).unwrap();
    assert!(sol.metadata.objective.unwrap() >= -1e-8);
}

#[test]
fn cost_identity_on_a_simulated_closed_run() {
    // With u = 0 the supply is zero, so the balance side alone must vanish:
    // the entropy gain equals the produced entropy.
    let p = HeatExchangerParams::default();
    let model = heat_exchanger(&p).unwrap();
    let h = HorizonSpec::new(2.0, DT).unwrap();
    let traj = simulate(
        &model,
        &dvector![1.0, 0.0],
        &vec![dvector![0.0]; h.steps],
        &h,
    )
    .unwrap();
    let id = cost_identity(&model, &CostWeights::entropy_extraction(1.0), &traj).unwrap();
    assert_eq!(id.supply, 0.0);
    assert!(id.residual < 1e-9, "{id:?}");
}

#[test]
fn cost_identity_with_energy_weight_on_a_forced_run() {
    let p = HeatExchangerParams::default();
    let model = heat_exchanger(&p).unwrap();
    let h = HorizonSpec::new(1.0, DT).unwrap();
    let controls: Vec<Vector> = (0..h.steps)
        .map(|i| dvector![0.5 + 0.01 * i as f64])
        .collect();
    let traj = simulate(&model, &dvector![0.2, -0.3], &controls, &h).unwrap();
    let w = CostWeights::exergy(1.0);
    let id = cost_identity(&model, &w, &traj).unwrap();
    assert!(id.residual < 1e-9, "{id:?}");
    let de = model.hamiltonian(&traj.states[h.steps]) - model.hamiltonian(&traj.states[0]);
    assert!((id.energy_rectangle - de).abs() < 1e-2);
}

#[test]
fn stretched_trajectory_keeps_both_ends() {
    let mk = |k: usize| -> TrajectorySolution {
        let model = heat_exchanger(&HeatExchangerParams::default()).unwrap();
        let states: Vec<Vector> = (0..=k).map(|i| dvector![i as f64 * 0.01, 0.0]).collect();
        let controls: Vec<Vector> = (0..k).map(|i| dvector![i as f64]).collect();
        let time = (0..=k).map(|i| i as f64 * 0.1).collect();
        TrajectorySolution::assemble(&model, time, states, controls, SolverMetadata::default())
            .unwrap()
    };
    let prev = mk(10);
    let (s, c) = stretch_trajectory(&prev, 16);
    assert_eq!(s.len(), 17);
    assert_eq!(c.len(), 16);
    assert_eq!(s[0], prev.states[0]);
    assert_eq!(s[16], prev.states[10]);
    assert_eq!(c[15], prev.controls[9]);
    assert_eq!(c[0], prev.controls[0]);
}

#[test]
fn constant_equilibrium_trajectory_is_always_near() {
    let p = HeatExchangerParams::default();
    let model = heat_exchanger(&p).unwrap();
    let set = heat_exchanger_equilibria(&p, &model).unwrap();
    let h = HorizonSpec::new(1.0, DT).unwrap();
    let traj = simulate(
        &model,
        &dvector![0.7, 0.7],
        &vec![dvector![0.0]; h.steps],
        &h,
    )
    .unwrap();
    let r = turnpike_metrics(&model, &traj, &set, None, 1e-6).unwrap();
    assert!(r.integral_dist_sq < 1e-25);
    assert_eq!(r.fraction_near, 1.0);
}

#[test]
fn closed_run_produces_the_entropy_it_gains() {
    let p = HeatExchangerParams::default();
    let model = heat_exchanger(&p).unwrap();
    let set = heat_exchanger_equilibria(&p, &model).unwrap();
    let run = |dt: f64| {
        let h = HorizonSpec::new(2.0, dt).unwrap();
        let traj = simulate(
            &model,
            &dvector![1.0, 0.0],
            &vec![dvector![0.0]; h.steps],
            &h,
        )
        .unwrap();
        let r = turnpike_metrics(&model, &traj, &set, None, DEFAULT_EPSILON).unwrap();
        let gain = model.entropy(&traj.states[h.steps]) - model.entropy(&traj.states[0]);
        (r.entropy_production_integral - gain).abs()
    };
    for dt in [0.02, 0.01] {
        assert!(run(dt) < 1e-9);
    }
}

#[test]
fn empty_intersection_in_the_network() {
    let preset = heat_network_tracking(2.0).unwrap();
    let out = preset.spec.output.as_ref().unwrap();
    let set_basis = dmatrix![1.0; 1.0; 1.0; 1.0; 1.0];
    let diag = AffineSubspace {
        point: Vector::zeros(5),
        basis: set_basis / 5f64.sqrt(),
    };
    assert!(diag.intersect_preimage(&out.c, &out.y_ref).is_none());
    let equal = dvector![3.0, 3.0, 3.0];
    assert!(diag.intersect_preimage(&out.c, &equal).is_some());
    let _ = heat_network_equilibria(&preset.spec.model).unwrap();
}

#[test]
fn exchanger_stabilization_stays_near_equilibria() {
    let preset = heat_stabilization(10.0).unwrap();
    let sol = solve_ocp(&preset.spec).unwrap();
    assert_eq!(sol.metadata.status, "converged");
    let r = turnpike_metrics(
        &preset.spec.model,
        &sol,
        &preset.equilibria,
        preset.spec.output.as_ref(),
        DEFAULT_EPSILON,
    )
    .unwrap();
    assert!(r.fraction_near >= 0.6, "{}", r.fraction_near);
    assert_eq!(r.intersection_empty, Some(false));
    let mid = &sol.states[sol.steps() / 2];
    assert!((mid - dvector![25f64.ln(), 25f64.ln()]).amax() <= 0.1);
    assert!(sol.metadata.identity_residual.unwrap() <= 1e-4);
    let check = surrogate_cross_check(&preset.spec.model, &sol, &preset.equilibria, 7).unwrap();
    assert!(check.same_order, "{check:?}");
}

#[test]
fn sweeps_keep_horizon_order() {
    let preset = heat_stabilization(1.0).unwrap();
    let s = horizon_sweep(
        &preset.spec,
        &[2.0, 1.0],
        &preset.equilibria,
        DEFAULT_EPSILON,
    );
    let t: Vec<f64> = s.entries.iter().map(|e| e.t_f).collect();
    assert_eq!(t, vec![1.0, 2.0]);
    assert!(s.ratio.unwrap() >= 1.0);
}

#[test]
fn running_cost_ends_at_the_objective() {
    let spec = heat_stabilization(2.0).unwrap().spec;
    let traj = solve_ocp(&spec).unwrap();
    let cum = cumulative_cost(&spec, &traj).unwrap();
    assert_eq!(cum.len(), traj.states.len());
    assert_eq!(cum[0], 0.0);
    let objective = traj.metadata.objective.unwrap();
    assert!((cum[cum.len() - 1] - objective).abs() <= 1e-10 * objective.abs().max(1.0));
}
