//! Acceptance suite. Prints one PASS/FAIL line per criterion.
//!
//! The process exits successfully even when a criterion fails, so that the
//! workspace test run stays usable; set `RIPHS_ACCEPTANCE_STRICT=1` to turn
//! failures into a nonzero exit status.

use std::time::Instant;

use nalgebra::{dvector, DMatrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use riphs::diagnostics::{horizon_sweep, plateau_statistics, turnpike_metrics, DEFAULT_EPSILON};
use riphs::equilibria::{
    find_optimal_steady_state, in_lossless_steady_set, steady_state_cost,
    subspace_distance_equivalence_check,
};
use riphs::experiments::{
    gas_piston_setpoint, heat_network_tracking, heat_stabilization, network_references,
};
use riphs::integrate::{simulate, HorizonSpec};
use riphs::model::{Matrix, RiphsModel, Vector};
use riphs::ocp::{solve_ocp, ControlBounds, CostWeights};
use riphs::systems::{
    gas_piston, heat_exchanger, heat_network, network_steady_state, GasPistonParams,
    HeatExchangerParams, NetworkParams, SystemKind, SystemParams,
};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn builtins() -> Vec<(SystemParams, RiphsModel)> {
    SystemKind::ALL
        .into_iter()
        .map(|k| {
            let p = SystemParams::defaults(k);
            let m = p.build().expect("built-in system");
            (p, m)
        })
        .collect()
}

fn a1() -> Outcome {
    let start = Instant::now();
    let mut worst = (0.0f64, 0.0f64, f64::INFINITY, f64::INFINITY);
    let mut failures = 0;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (_, model) in builtins() {
        let mut checked = 0;
        while checked < 1000 {
            let x = model.sampling_region().sample(&mut rng);
            if !model.contains(&x) {
                continue;
            }
            checked += 1;
            match model.check_structure(&x) {
                Ok(c) => {
                    worst.0 = worst.0.max(c.skew_defect);
                    worst.1 = worst.1.max(c.casimir_defect);
                    worst.2 = worst.2.min(c.min_modulation);
                    worst.3 = worst.3.min(c.entropy_production);
                    if !c.passes() || c.entropy_production < 0.0 {
                        failures += 1;
                    }
                }
                Err(_) => failures += 1,
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        failures == 0 && secs < 5.0,
        format!(
            "3x1000 points, {failures} failures, skew {:.1e}, casimir {:.1e}, min gamma {:.3e}, min sigma {:.1e}, {secs:.2}s",
            worst.0, worst.1, worst.2, worst.3
        ),
    )
}

fn a2() -> Outcome {
    let p = HeatExchangerParams::default();
    let model = heat_exchanger(&p).unwrap();
    let x0 = dvector![30f64.ln(), 20f64.ln()];
    let h0 = model.hamiltonian(&x0);
    let mut drifts = Vec::new();
    let mut monotone = true;
    for dt in [0.04, 0.02, 0.01] {
        let h = HorizonSpec::new(10.0, dt).unwrap();
        let sol = simulate(&model, &x0, &vec![dvector![0.0]; h.steps], &h).unwrap();
        drifts.push(
            sol.states
                .iter()
                .map(|x| (model.hamiltonian(x) - h0).abs())
                .fold(0.0, f64::max),
        );
        monotone &= sol
            .states
            .windows(2)
            .all(|w| model.entropy(&w[1]) >= model.entropy(&w[0]));
    }
    let order = ((drifts[0] / drifts[1]).log2()).min((drifts[1] / drifts[2]).log2());

    let gp = GasPistonParams {
        kappa: 0.0,
        ..Default::default()
    };
    let piston = gas_piston(&gp).unwrap();
    let y0 = gp.state(gp.t0, gp.p0, 0.5).unwrap();
    let h = HorizonSpec::new(10.0, 0.01).unwrap();
    let sol = simulate(&piston, &y0, &vec![dvector![0.0]; h.steps], &h).unwrap();
    let e0 = piston.hamiltonian(&y0);
    let pdrift = sol
        .states
        .iter()
        .map(|x| (piston.hamiltonian(x) - e0).abs())
        .fold(0.0, f64::max);
    let sdrift = sol
        .states
        .iter()
        .map(|x| (x[0] - y0[0]).abs())
        .fold(0.0, f64::max);
    outcome(
        drifts[2] <= 1e-6 && order >= 1.9 && monotone && pdrift <= 1e-6 && sdrift <= 1e-9,
        format!(
            "exchanger drift {:.2e} (dt 0.01), order {order:.3}, entropy monotone {monotone}; piston drift {pdrift:.2e}, entropy {sdrift:.1e}",
            drifts[2]
        ),
    )
}

fn a3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut certified = 0;
    let mut worst_gap = 0.0f64;
    let mut min_cost = f64::INFINITY;
    let mut zero_on_t = true;
    let mut problems = Vec::new();
    let weights: Vec<CostWeights> = (0..3)
        .map(|_| CostWeights {
            alpha1: rng.random_range(0.0..2.0),
            alpha2: rng.random_range(0.1..2.0),
            t0: rng.random_range(1.0..400.0),
        })
        .chain([CostWeights::exergy(1.0)])
        .collect();
    let mut record = |model: &RiphsModel, x: &Vector, u: &Vector, on_t: bool| {
        for w in &weights {
            match steady_state_cost(model, x, u, w) {
                Ok(c) => {
                    certified += 1;
                    worst_gap = worst_gap.max(c.relative_gap);
                    min_cost = min_cost.min(c.direct);
                    if on_t && c.direct.abs() > 1e-12 {
                        zero_on_t = false;
                    }
                }
                Err(e) => problems.push(format!("{}: {e}", model.name())),
            }
        }
    };

    let hp = HeatExchangerParams::default();
    let hx = heat_exchanger(&hp).unwrap();
    for s in [0.5, 2.0, 25f64.ln()] {
        record(&hx, &dvector![s, s], &dvector![0.0], true);
    }
    let gp = GasPistonParams::default();
    let piston = gas_piston(&gp).unwrap();
    for t in [250.0, 273.0, 320.0] {
        let x = gp.state(t, gp.p0, 0.0).unwrap();
        record(&piston, &x, &dvector![0.0], true);
    }
    let np = NetworkParams::default();
    let net = heat_network(&np).unwrap();
    record(&net, &Vector::from_element(5, 3.0), &Vector::zeros(3), true);
    for _ in 0..6 {
        let t3 = rng.random_range(15.0..35.0);
        let (x, u) = network_steady_state(
            &np,
            t3,
            t3 - rng.random_range(0.5..5.0),
            t3 - rng.random_range(0.5..5.0),
        )
        .unwrap();
        record(&net, &x, &u, false);
    }

    // 𝒯 × {0} lies in the lossless steady set of the purely irreversible systems.
    let mut lossless = true;
    for (params, model) in builtins() {
        if !model.is_purely_irreversible() {
            continue;
        }
        let set = params.equilibria(&model).unwrap();
        let x = match params.kind() {
            SystemKind::HeatExchanger => dvector![1.2, 1.2],
            _ => Vector::from_element(5, 1.2),
        };
        lossless &=
            in_lossless_steady_set(&model, &set, &x, &Vector::zeros(model.input_dim()), 1e-12)
                .unwrap_or(false);
    }

    // The optimal steady state of each system is found at zero cost.
    let mut optimal = Vec::new();
    for (_, model) in builtins() {
        let m = model.input_dim();
        let start = model.sampling_region().sample(&mut rng);
        match find_optimal_steady_state(
            &model,
            &CostWeights::exergy(1.0),
            &ControlBounds::uniform(m, -1.0, 1.0),
            &start,
        ) {
            Ok(s) => optimal.push(s.stage_cost.abs() <= 1e-8),
            Err(e) => {
                problems.push(format!("{}: {e}", model.name()));
                optimal.push(false);
            }
        }
    }
    let all_optimal = optimal.iter().all(|&b| b);
    outcome(
        certified >= 20
            && worst_gap <= 1e-9
            && min_cost >= -1e-10
            && zero_on_t
            && lossless
            && all_optimal
            && problems.is_empty(),
        format!(
            "{certified} certified pairs, max relative gap {worst_gap:.1e}, min cost {min_cost:.2e}, zero on T {zero_on_t}, T x 0 lossless {lossless}, optimal steady states {optimal:?}{}",
            if problems.is_empty() { String::new() } else { format!(", problems {problems:?}") }
        ),
    )
}

fn a4() -> Outcome {
    let start = Instant::now();
    let preset = heat_stabilization(10.0).unwrap();
    let sol = match solve_ocp(&preset.spec) {
        Ok(s) => s,
        Err(e) => return outcome(false, format!("solver error: {e}")),
    };
    let target = dvector![25f64.ln(), 25f64.ln()];
    let window = sol.central_window(0.6);
    let max_dev = window
        .iter()
        .map(|&i| (&sol.states[i] - &target).norm())
        .fold(0.0, f64::max);
    let max_sigma = window
        .iter()
        .map(|&i| sol.entropy_production[i])
        .fold(0.0, f64::max);
    let identity = sol.metadata.identity_residual.unwrap_or(f64::INFINITY);
    let report = turnpike_metrics(
        &preset.spec.model,
        &sol,
        &preset.equilibria,
        preset.spec.output.as_ref(),
        DEFAULT_EPSILON,
    )
    .unwrap();
    let secs = start.elapsed().as_secs_f64();
    outcome(
        sol.metadata.status == "converged"
            && max_dev <= 0.1
            && max_sigma <= 1e-3
            && identity <= 1e-3
            && secs < 180.0,
        format!(
            "central 60%: max |x - (ln25, ln25)| {max_dev:.3}, max sigma {max_sigma:.2e}; identity residual {identity:.1e}; fraction near T {:.2}; {} in {secs:.1}s",
            report.fraction_near, sol.metadata.status
        ),
    )
}

fn a5() -> Outcome {
    let p = GasPistonParams::default();
    let target = p.expanded_state(1.3).unwrap();
    let mut sols = Vec::new();
    for alpha1 in [0.0, 1.0] {
        let preset = gas_piston_setpoint(4.0, alpha1).unwrap();
        match solve_ocp(&preset.spec) {
            Ok(s) => sols.push(s),
            Err(e) => return outcome(false, format!("solver error (alpha1 = {alpha1}): {e}")),
        }
    }
    let terminal = sols
        .iter()
        .map(|s| {
            let x = &s.states[s.steps()];
            (x[1] - target[1]).abs().max(x[2].abs())
        })
        .fold(0.0, f64::max);
    let du = sols[0]
        .controls
        .iter()
        .zip(&sols[1].controls)
        .map(|(a, b)| (a - b).amax())
        .fold(0.0, f64::max);
    let s = &sols[0];
    let v: Vec<f64> = s.states.iter().map(|x| x[2] / p.mass()).collect();
    let vmax = v.iter().fold(0.0f64, |a, b| a.max(b.abs()));
    let vmid = s
        .central_window(0.6)
        .iter()
        .map(|&i| v[i].abs())
        .fold(0.0, f64::max);
    outcome(
        terminal <= 1e-6 && du <= 1e-5 && vmid <= 0.05 * vmax,
        format!(
            "terminal error {terminal:.1e}, control gap alpha1 0 vs 1 {du:.1e}, central max |v| {vmid:.3e} vs 0.05 max|v| {:.3e}",
            0.05 * vmax
        ),
    )
}

fn a6() -> Outcome {
    let heat = heat_stabilization(10.0).unwrap();
    let hs = horizon_sweep(
        &heat.spec,
        &[5.0, 10.0, 20.0],
        &heat.equilibria,
        DEFAULT_EPSILON,
    );
    let gas = gas_piston_setpoint(4.0, 0.0).unwrap();
    let gs = horizon_sweep(
        &gas.spec,
        &[2.0, 4.0, 8.0],
        &gas.equilibria,
        DEFAULT_EPSILON,
    );
    let fmt = |s: &riphs::diagnostics::SweepReport| {
        s.entries
            .iter()
            .map(|e| match &e.report {
                Some(r) => format!("{}:{:.3e}", e.t_f, r.integral_dist_sq),
                None => format!("{}:{}", e.t_f, e.error.clone().unwrap_or_default()),
            })
            .collect::<Vec<_>>()
            .join(" ")
    };
    let ok = |s: &riphs::diagnostics::SweepReport| {
        s.entries.iter().all(|e| e.report.is_some()) && s.ratio.is_some_and(|r| r <= 1.5)
    };
    outcome(
        ok(&hs) && ok(&gs),
        format!(
            "exchanger {} ratio {:.3}; piston {} ratio {:.3}",
            fmt(&hs),
            hs.ratio.unwrap_or(f64::NAN),
            fmt(&gs),
            gs.ratio.unwrap_or(f64::NAN)
        ),
    )
}

fn a7() -> Outcome {
    let preset = heat_network_tracking(20.0).unwrap();
    let sol = match solve_ocp(&preset.spec) {
        Ok(s) => s,
        Err(e) => return outcome(false, format!("solver error: {e}")),
    };
    let report = turnpike_metrics(
        &preset.spec.model,
        &sol,
        &preset.equilibria,
        preset.spec.output.as_ref(),
        DEFAULT_EPSILON,
    )
    .unwrap();
    let plateau = plateau_statistics(&sol, 0.6);
    let refs = network_references();
    let (lo, hi) = (refs.min(), refs.max());
    let between = [0usize, 3, 4]
        .iter()
        .all(|&j| plateau.state_min[j] > lo && plateau.state_max[j] < hi);
    let empty = report.intersection_empty == Some(true);
    outcome(
        empty && plateau.max_rate <= 0.05 && between && plateau.min_sigma >= 1e-4,
        format!(
            "intersection empty {empty}, plateau max |xdot| {:.2e}, tracked entropies within ({lo:.3}, {hi:.3}) {between}, min sigma {:.2e}",
            plateau.max_rate, plateau.min_sigma
        ),
    )
}

fn random_family(rng: &mut ChaCha8Rng) -> Vec<Matrix> {
    let k = rng.random_range(2..=4);
    (0..k)
        .map(|_| {
            let d = rng.random_range(1..=4);
            DMatrix::from_fn(5, d, |_, _| StandardNormal.sample(rng))
        })
        .collect()
}

fn a8() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut finite = 0;
    let mut stable = 0;
    let mut worst_change = 1.0f64;
    for f in 0..200u64 {
        let family = random_family(&mut rng);
        let a = subspace_distance_equivalence_check(&family, 2000, 100 + f).unwrap();
        let b = subspace_distance_equivalence_check(&family, 4000, 100 + f).unwrap();
        let good = |r: &riphs::equilibria::SubspaceReport| {
            r.c_low.is_finite() && r.c_high.is_finite() && r.c_low > 0.0
        };
        if good(&a) && good(&b) {
            finite += 1;
        }
        let change = (a.c_low / b.c_low)
            .max(b.c_low / a.c_low)
            .max(a.c_high / b.c_high)
            .max(b.c_high / a.c_high);
        worst_change = worst_change.max(change);
        if change < 2.0 {
            stable += 1;
        }
    }
    outcome(
        finite == 200 && stable == 200,
        format!("200 families: finite {finite}, stable under doubling {stable}, worst change {worst_change:.3}x"),
    )
}

fn well_conditioned(rng: &mut ChaCha8Rng, n: usize) -> Matrix {
    loop {
        let v = Matrix::identity(n, n)
            + DMatrix::from_fn(n, n, |_, _| 0.4 * rng.sample::<f64, _>(StandardNormal));
        let sv = v.clone().singular_values();
        if sv.min() > 0.0 && sv.max() / sv.min() <= 10.0 {
            return v;
        }
    }
}

fn a9() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst = 0.0f64;
    let mut errors = Vec::new();
    let h = HorizonSpec::new(1.0, 0.01).unwrap();
    for (params, model) in builtins() {
        let n = model.state_dim();
        let m = model.input_dim();
        let x0 = match params.kind() {
            SystemKind::HeatExchanger => dvector![30f64.ln(), 20f64.ln()],
            SystemKind::GasPiston => GasPistonParams::default().state(280.0, 100.0, 0.3).unwrap(),
            SystemKind::HeatNetwork => dvector![3.4, 3.0, 3.2, 2.9, 3.1],
        };
        let controls: Vec<Vector> = (0..h.steps)
            .map(|i| Vector::from_fn(m, |j, _| 0.1 * ((i as f64) * 0.05 + j as f64).sin()))
            .collect();
        let reference = simulate(&model, &x0, &controls, &h).unwrap();
        for _ in 0..10 {
            let v = well_conditioned(&mut rng, n);
            let (tm, _) = model.transform(&v).unwrap();
            match simulate(&tm, &(&v * &x0), &controls, &h) {
                Ok(z) => {
                    for (zi, xi) in z.states.iter().zip(&reference.states) {
                        worst = worst.max((zi - &v * xi).amax());
                    }
                }
                Err(e) => errors.push(format!("{}: {e}", model.name())),
            }
        }
    }
    outcome(
        worst <= 1e-6 && errors.is_empty(),
        format!(
            "30 transforms, max |z - Vx| {worst:.2e}{}",
            if errors.is_empty() {
                String::new()
            } else {
                format!(", errors {errors:?}")
            }
        ),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("A1", a1),
        ("A2", a2),
        ("A3", a3),
        ("A4", a4),
        ("A5", a5),
        ("A6", a6),
        ("A7", a7),
        ("A8", a8),
        ("A9", a9),
    ];
    let only = std::env::var("RIPHS_ACCEPTANCE_ONLY").ok();
    let mut failed = 0;
    for (name, run) in criteria {
        if only
            .as_deref()
            .is_some_and(|o| !o.split(',').any(|s| s == name))
        {
            continue;
        }
        let start = Instant::now();
        let o = run();
        if !o.pass {
            failed += 1;
        }
        println!(
            "{name} {} ({:.1}s) {}",
            if o.pass { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64(),
            o.detail
        );
    }
    println!("acceptance: {failed} failing criteria");
    if failed > 0 && std::env::var("RIPHS_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
