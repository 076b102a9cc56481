use nalgebra::{dvector, DVector};
use proptest::prelude::*;
use riphs::diagnostics::AffineSubspace;
use riphs::integrate::{simulate, HorizonSpec};
use riphs::model::{Matrix, RiphsModel, Vector};
use riphs::ocp::{cost_identity, CostWeights, Layout};
use riphs::systems::{
    gas_piston, heat_exchanger, heat_network, thermostat_control, thermostat_temperature,
    GasPistonParams, HeatExchangerParams, NetworkParams,
};

fn systems() -> Vec<RiphsModel> {
    vec![
        heat_exchanger(&HeatExchangerParams::default()).unwrap(),
        gas_piston(&GasPistonParams::default()).unwrap(),
        heat_network(&NetworkParams::default()).unwrap(),
    ]
}

/// A point of the sampling region from unit-interval coordinates.
fn point(model: &RiphsModel, unit: &[f64]) -> Vector {
    let r = model.sampling_region();
    let raw = DVector::from_iterator(
        r.lower.len(),
        r.lower
            .iter()
            .zip(&r.upper)
            .zip(unit)
            .map(|((lo, hi), s)| lo + (hi - lo) * s),
    );
    match &r.map {
        Some(m) => m * raw,
        None => raw,
    }
}

fn unit(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0..1.0f64, n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn structure_holds_everywhere(which in 0..3usize, u in unit(5)) {
        let model = &systems()[which];
        let x = point(model, &u[..model.state_dim()]);
        let c = model.check_structure(&x).unwrap();
        prop_assert!(c.passes(), "{c:?}");
        let ev = model.evaluate(&x).unwrap();
        let hx = &ev.co_energy;
        let j0 = model.poisson_matrix(&x);
        let mut total = j0.clone();
        for k in 0..model.num_irreversible() {
            let b = model.poisson_bracket(k, &x).unwrap();
            total += model.irreversible_structure(k).unwrap() * (ev.modulations[k] * b);
        }
        let power = hx.dot(&(&total * hx));
        prop_assert!(power.abs() <= 1e-9 * hx.norm_squared().max(1.0));
        prop_assert!(ev.entropy_production() >= 0.0);
    }

    #[test]
    fn co_energy_matches_energy_differences(which in 0..3usize, u in unit(5)) {
        let model = &systems()[which];
        let x = point(model, &u[..model.state_dim()]);
        let hx = model.co_energy(&x);
        for j in 0..x.len() {
            let h = 1e-6 * (1.0 + x[j].abs());
            let mut a = x.clone();
            let mut b = x.clone();
            a[j] += h;
            b[j] -= h;
            let fd = (model.hamiltonian(&a) - model.hamiltonian(&b)) / (2.0 * h);
            prop_assert!((fd - hx[j]).abs() <= 1e-5 * hx[j].abs().max(1.0), "{j}: {fd} vs {}", hx[j]);
        }
        if model.has_analytic_hessian() {
            let an = model.hessian(&x);
            let fd = model.hessian_fd(&x);
            prop_assert!((&an - &fd).amax() <= 1e-5 * an.amax().max(1.0));
        }
    }

    #[test]
    fn exchanger_temperatures_invert(s1 in -3.0..3.0f64, s2 in -3.0..3.0f64, c1 in 0.5..3.0f64) {
        let p = HeatExchangerParams { c1, ..Default::default() };
        let t1 = p.temperature(s1, p.c1);
        let t2 = p.temperature(s2, p.c2);
        let back = p.entropies(t1, t2).unwrap();
        prop_assert!((back - dvector![s1, s2]).amax() <= 1e-12);
    }

    #[test]
    fn piston_state_inverts(t in 100.0..600.0f64, pr in 50.0..200.0f64, mom in -1.0..1.0f64) {
        let p = GasPistonParams::default();
        let x = p.state(t, pr, mom).unwrap();
        prop_assert!((p.temperature(x[0], x[1]) - t).abs() <= 1e-9 * t);
        prop_assert!((p.pressure(x[0], x[1]) - pr).abs() <= 1e-9 * pr);
    }

    #[test]
    fn thermostat_round_trip(le in 0.1..5.0f64, t1 in 1.0..1000.0f64, u in -3.0..3.0f64) {
        let te = thermostat_temperature(le, t1, u).unwrap();
        prop_assert!((thermostat_control(le, t1, te).unwrap() - u).abs() <= 1e-12 * (1.0 + u.abs()));
    }

    #[test]
    fn transformed_models_push_forward(
        which in 0..3usize,
        u in unit(5),
        noise in prop::collection::vec(-0.3..0.3f64, 25),
        w in prop::collection::vec(-1.0..1.0f64, 3),
    ) {
        let model = &systems()[which];
        let n = model.state_dim();
        let v = Matrix::identity(n, n) + Matrix::from_iterator(n, n, noise.iter().copied().take(n * n));
        let (tm, cond) = model.transform(&v).unwrap();
        prop_assume!(cond < 20.0);
        let x = point(model, &u[..n]);
        let ctrl = DVector::from_iterator(model.input_dim(), w.iter().copied().take(model.input_dim()));
        let f = model.rhs(&x, &ctrl).unwrap();
        let z = &v * &x;
        let fz = tm.rhs(&z, &ctrl).unwrap();
        prop_assert!((fz - &v * f).amax() <= 1e-9 * (1.0 + (&v * model.rhs(&x, &ctrl).unwrap()).amax()));
        let s = model.entropy_production(&x).unwrap();
        prop_assert!((tm.entropy_production(&z).unwrap() - s).abs() <= 1e-9 * s.max(1.0));
        prop_assert!((tm.hamiltonian(&z) - model.hamiltonian(&x)).abs() <= 1e-9 * model.hamiltonian(&x).abs().max(1.0));
    }

    #[test]
    fn exchanger_distance_vanishes_with_production(s1 in -2.0..2.0f64, d in -1.0..1.0f64) {
        let p = HeatExchangerParams::default();
        let model = heat_exchanger(&p).unwrap();
        let set = riphs::systems::heat_exchanger_equilibria(&p, &model).unwrap();
        let x = dvector![s1 + d, s1];
        let dist = set.distance(&model, &x).unwrap();
        prop_assert!((dist - d.abs() / 2f64.sqrt()).abs() <= 1e-12);
        let sigma = model.entropy_production(&x).unwrap();
        prop_assert_eq!(dist <= 1e-12, sigma <= 1e-20);
    }

    #[test]
    fn layout_round_trip(n in 1..5usize, m in 1..4usize, k in 1..6usize, seed in any::<u64>()) {
        let l = Layout { n, m, steps: k };
        let val = |i: usize| ((seed.wrapping_add(i as u64 * 2654435761)) % 1000) as f64;
        let x0 = Vector::from_element(n, -1.0);
        let states: Vec<Vector> = (0..=k).map(|i| if i == 0 { x0.clone() } else { Vector::from_fn(n, |r, _| val(i * 10 + r)) }).collect();
        let controls: Vec<Vector> = (0..k).map(|i| Vector::from_fn(m, |r, _| val(i * 10 + r + 5))).collect();
        let z = l.pack(&states, &controls);
        prop_assert_eq!(z.len(), l.num_vars());
        let (s2, c2) = l.unpack(&z, &x0);
        prop_assert_eq!(s2, states);
        prop_assert_eq!(c2, controls);
    }

    #[test]
    fn affine_projection_is_orthogonal(
        c in prop::collection::vec(-1.0..1.0f64, 10),
        y in prop::collection::vec(-1.0..1.0f64, 2),
        x in prop::collection::vec(-3.0..3.0f64, 5),
    ) {
        let c = Matrix::from_row_slice(2, 5, &c);
        let y = Vector::from_column_slice(&y);
        let x = Vector::from_column_slice(&x);
        let s = AffineSubspace::preimage(&c, &y).unwrap();
        let p = s.project(&x);
        prop_assert!((&c * &p - &y).norm() <= 1e-8 * (1.0 + y.norm()));
        prop_assert!((s.project(&p) - &p).norm() <= 1e-10 * (1.0 + p.norm()));
        let r = &x - &p;
        prop_assert!(s.basis.tr_mul(&r).amax() <= 1e-9 * (1.0 + r.norm()));
    }

    #[test]
    fn cost_identity_holds_for_any_control(
        alpha1 in 0.0..2.0f64,
        alpha2 in 0.0..2.0f64,
        amps in prop::collection::vec(-1.0..1.0f64, 3),
    ) {
        let model = heat_network(&NetworkParams::default()).unwrap();
        let h = HorizonSpec::new(0.5, 0.01).unwrap();
        let controls: Vec<Vector> = (0..h.steps)
            .map(|i| Vector::from_fn(3, |r, _| amps[r] * (0.1 * i as f64 + r as f64).cos()))
            .collect();
        let traj = simulate(&model, &dvector![1.0, 1.4, 1.1, 0.9, 1.2], &controls, &h).unwrap();
        let w = CostWeights::new(alpha1, alpha2, 1.5).unwrap();
        let id = cost_identity(&model, &w, &traj).unwrap();
        prop_assert!(id.residual <= 1e-9, "{id:?}");
    }
}
