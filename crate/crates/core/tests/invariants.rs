use pdmp_core::coupling::{companion_on_grid, couple_on_grid, couple_replica, CompanionState};
use pdmp_core::flows::VectorField;
use pdmp_core::models::{sinusoidal_model, switched_linear_model, toy_model, toy_state_dependent_model};
use pdmp_core::rng::rng_from_seed;
use pdmp_core::simulator::{moment_of_states, replicate, simulate, simulate_joint, simulate_on_grid, simulate_replica, SimOptions};
use pdmp_core::stats::{linear_fit, linspace, MeanEstimate};
use pdmp_core::switching::{coalescence_exact, meeting_time, SwitchGenerator};
use pdmp_core::{FlowIntegrator, HybridState, SwitchedModel};
use proptest::prelude::*;

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
}

/// Contracting, non-linear: F(x) = -2x + 0.5 (sin x2, sin x1) has alpha = 1.5.
fn wavy() -> VectorField {
    VectorField::general(2, |x, out| {
        out[0] = -2.0 * x[0] + 0.5 * x[1].sin();
        out[1] = -2.0 * x[1] + 0.5 * x[0].sin();
    })
    .with_alpha(1.5)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn flows_contract_pathwise(
        x in prop::collection::vec(-5.0..5.0f64, 2),
        y in prop::collection::vec(-5.0..5.0f64, 2),
        t in 0.0..3.0f64,
        rate in 0.1..3.0f64,
    ) {
        let integ = FlowIntegrator::default();
        let affine = VectorField::linear_attractor(rate, &[0.3, -1.0]).unwrap();
        for (f, a) in [(affine, rate), (wavy(), 1.5)] {
            let fx = f.flow(&x, t, &integ).unwrap();
            let fy = f.flow(&y, t, &integ).unwrap();
            prop_assert!(dist(&fx, &fy) <= (-a * t).exp() * dist(&x, &y) + 1e-9);
        }
    }

    #[test]
    fn ball_absorption_along_mode_sequences(
        x in prop::collection::vec(-6.0..6.0f64, 2),
        steps in prop::collection::vec((0usize..2, 0.0..1.0f64), 1..12),
    ) {
        let model = toy_model(1.0, 1.0, 1.0, &[1.0, 0.5]).unwrap();
        let r = model.invariant_radius().unwrap();
        let excess0 = (norm(&x).powi(2) - r * r).max(0.0);
        let mut y = x.clone();
        let mut t = 0.0;
        for (mode, dt) in steps {
            y = model.field(mode).flow(&y, dt, model.integrator()).unwrap();
            t += dt;
            let excess = (norm(&y).powi(2) - r * r).max(0.0);
            prop_assert!(excess <= (-t).exp() * excess0 + 1e-9, "t {t}: {excess} vs {}", (-t).exp() * excess0);
        }
    }

    #[test]
    fn chain_first_and_joint_simulation_coincide(seed in any::<u64>()) {
        let model = toy_model(1.5, 0.7, 1.0, &[1.0, -1.0]).unwrap();
        let z0 = HybridState::new(vec![2.0, 0.0], 1);
        let a = simulate(&model, &z0, 5.0, 0.25, &mut rng_from_seed(seed)).unwrap();
        let b = simulate_joint(&model, &z0, 5.0, 0.25, SimOptions::default(), &mut rng_from_seed(seed)).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn replicas_depend_only_on_master_and_index(master in any::<u64>(), index in 0usize..1000) {
        let model = toy_state_dependent_model(1.0, &[1.0, 0.0], 0.4).unwrap();
        let z0 = HybridState::new(vec![0.0, 0.0], 0);
        let a = simulate_replica(&model, &z0, 2.0, 0.5, master, index).unwrap();
        let b = simulate_replica(&model, &z0, 2.0, 0.5, master, index).unwrap();
        prop_assert_eq!(a, b);
    }
}

#[test]
fn rk4_order_by_step_halving() {
    let f = VectorField::affine_from_rows(&[vec![-1.0, 2.0], vec![-2.0, -1.0]], &[0.5, 0.0]).unwrap();
    let x = [1.0, -1.0];
    let exact = f.flow(&x, 1.0, &FlowIntegrator::default()).unwrap();
    let err = |steps| dist(&FlowIntegrator::rk4_fixed(&f, &x, 1.0, steps), &exact);
    for steps in [8, 16, 32] {
        let ratio = err(steps) / err(2 * steps);
        assert!((12.0..20.0).contains(&ratio), "halving ratio {ratio} at {steps} steps");
    }
}

#[test]
fn state_dependent_paths_stay_in_the_ball_once_inside() {
    let model = toy_state_dependent_model(1.0, &[1.0, 0.0], 0.4).unwrap();
    let r = model.invariant_radius().unwrap();
    let worst = replicate(300, 17, |k, rng| {
        let z0 = HybridState::new(vec![2.5 * (k as f64).cos(), 2.5 * (k as f64).sin()], k % 2);
        let tr = simulate(&model, &z0, 15.0, 0.01, rng)?;
        let mut inside = false;
        let mut worst: f64 = 0.0;
        for e in &tr.events {
            let n = norm(&e.x);
            if inside {
                worst = worst.max(n - r);
            }
            inside |= n <= r;
        }
        Ok(worst)
    })
    .unwrap();
    let max = worst.iter().copied().fold(0.0, f64::max);
    assert!(max <= 1e-9, "left the ball by {max}");
}

#[test]
fn moments_have_no_upward_trend_below_kappa() {
    // alpha = (1, -1/4), kappa = 3; q = 1.5.
    let g = SwitchGenerator::two_state(1.0, 1.0).unwrap();
    let model = switched_linear_model(g, &[1.0, -0.25], &[vec![0.5], vec![-0.5]]).unwrap();
    let grid = linspace(0.0, 20.0, 41);
    let z0 = HybridState::new(vec![2.0], 1);
    let paths = replicate(20_000, 5, |_, rng| simulate_on_grid(&model, &z0, &grid, rng)).unwrap();
    let burn = 10;
    let mut ts = Vec::new();
    let mut ms = Vec::new();
    let mut ses = Vec::new();
    for k in burn..grid.len() {
        let states: Vec<HybridState> = paths.iter().map(|p| p[k].clone()).collect();
        let m = moment_of_states(&states, 1.5).unwrap();
        ts.push(grid[k]);
        ms.push(m.mean);
        ses.push(m.std_error);
    }
    let (slope, _) = linear_fit(&ts, &ms).unwrap();
    // Standard error of the slope from the per-point errors (independent
    // enough across widely spaced times for a sanity bound).
    let tbar = ts.iter().sum::<f64>() / ts.len() as f64;
    let sxx: f64 = ts.iter().map(|t| (t - tbar).powi(2)).sum();
    let se = (ts.iter().zip(&ses).map(|(t, s)| ((t - tbar) * s).powi(2)).sum::<f64>()).sqrt() / sxx;
    assert!(slope <= 3.0 * se, "slope {slope} with se {se}");
}

#[test]
fn coalescence_envelope_on_a_three_state_chain() {
    let g = SwitchGenerator::from_rates(&[vec![0.0, 1.0, 0.5], vec![0.2, 0.0, 1.0], vec![1.0, 0.3, 0.0]]).unwrap();
    let report = coalescence_exact(&g).unwrap();
    let n = 100_000;
    let times = replicate(n, 9, |k, rng| {
        let (i, j) = [(0, 1), (0, 2), (1, 2), (1, 0), (2, 0), (2, 1)][k % 6];
        Ok(meeting_time(&g, i, j, f64::INFINITY, rng))
    })
    .unwrap();
    for t in linspace(0.25, 4.0, 16) {
        let s = times.iter().filter(|x| **x > t).count() as f64 / n as f64;
        let bound = report.constant * (-report.rho * t).exp();
        let sigma = (bound.min(1.0) * (1.0 - bound.min(1.0)) / n as f64).sqrt();
        assert!(s <= bound * 1.05 + 3.0 * sigma, "t {t}: {s} vs {bound}");
    }
}

fn delta_and_companion(model: &SwitchedModel, z0: &HybridState, zt0: &HybridState, b: f64, grid: &[f64]) {
    let s = model.state_rates().unwrap();
    let alpha = model.uniform_alpha().unwrap();
    let r = model.invariant_radius().unwrap();
    let n = 20_000;
    let coupled = replicate(n, 23, |_, rng| couple_on_grid(model, z0, zt0, grid, rng)).unwrap();
    // Different modes start the companion on top (value D + 1).
    let u0 = if z0.mode == zt0.mode { CompanionState::Level(dist(&z0.x, &zt0.x)) } else { CompanionState::Top };
    let comp = replicate(n, 24, |_, rng| companion_on_grid(2.0 * r, alpha, s.lipschitz, b, u0, grid, rng)).unwrap();
    for k in 0..grid.len() {
        let d: Vec<f64> = coupled.iter().map(|c| c[k].delta()).collect();
        let u: Vec<f64> = comp.iter().map(|c| c[k]).collect();
        let md = MeanEstimate::from_samples(&d).unwrap();
        let mu = MeanEstimate::from_samples(&u).unwrap();
        let sigma = (md.std_error.powi(2) + mu.std_error.powi(2)).sqrt();
        assert!(md.mean <= mu.mean + 3.0 * sigma, "t {}: E delta {} vs E U {}", grid[k], md.mean, mu.mean);
    }
}

#[test]
fn companion_dominates_the_coupling_distance() {
    let model = sinusoidal_model(1.0, &[-1.0], &[1.0], 0.4).unwrap();
    let b = 2.0 * model.state_rates().unwrap().lower;
    delta_and_companion(&model, &HybridState::new(vec![-1.0], 1), &HybridState::new(vec![1.0], 0), b, &linspace(0.0, 30.0, 16));
}

#[test]
fn coupled_marginal_jump_counts_match_plain_simulation() {
    let model = sinusoidal_model(1.0, &[-1.0], &[1.0], 0.4).unwrap();
    let z0 = HybridState::new(vec![-1.0], 1);
    let zt0 = HybridState::new(vec![1.0], 0);
    let n = 10_000;
    let horizon = 3.0;
    let pairs = replicate(n, 31, |k, _| couple_replica(&model, &z0, &zt0, horizon, horizon, 31, k)).unwrap();
    let count_switches = |modes: &mut dyn Iterator<Item = usize>| {
        let mut last = None;
        let mut c = 0.0;
        for m in modes {
            if last.is_some_and(|l| l != m) {
                c += 1.0;
            }
            last = Some(m);
        }
        c
    };
    let coupled_first: Vec<f64> = pairs.iter().map(|p| count_switches(&mut p.events.iter().map(|e| e.state.mode))).collect();
    let coupled_second: Vec<f64> = pairs.iter().map(|p| count_switches(&mut p.events.iter().map(|e| e.state.mode_tilde))).collect();
    for (start, coupled) in [(&z0, coupled_first), (&zt0, coupled_second)] {
        let plain = replicate(n, 32, |_, rng| {
            let tr = simulate(&model, start, horizon, horizon, rng)?;
            Ok(count_switches(&mut tr.events.iter().map(|e| e.mode)))
        })
        .unwrap();
        let a = MeanEstimate::from_samples(&coupled).unwrap();
        let b = MeanEstimate::from_samples(&plain).unwrap();
        let z = (a.mean - b.mean) / (a.std_error.powi(2) + b.std_error.powi(2)).sqrt();
        assert!(z.abs() <= 3.0, "switch counts {} vs {} (z = {z})", a.mean, b.mean);
    }
}
