use std::sync::Arc;

use fmpc::cost::Scheme;
use fmpc::*;
use proptest::prelude::*;

fn car() -> Arc<dyn PlantModel> {
    Arc::new(MassOnCar::new(MassOnCarParams::benchmark()).unwrap())
}

fn problem(scheme: Scheme, horizon: f64, t: f64, x: [f64; 4]) -> OcpProblem {
    let mut cfg = FmpcConfig::benchmark(scheme);
    cfg.horizon = horizon;
    let mut p = cfg.problem(car(), FunnelPair::benchmark(), ReferenceSignal::cosine());
    p.t_hat = t;
    p.x_hat = x.to_vec();
    p
}

fn grid_best(p: &OcpProblem, n: usize) -> f64 {
    let levels = |i: usize| -30.0 + 60.0 * i as f64 / (n - 1) as f64;
    let mut best = f64::INFINITY;
    for i in 0..n {
        for j in 0..n {
            if let Some(c) = p.objective(&[levels(i), levels(j)]).unwrap() {
                best = best.min(c.value());
            }
        }
    }
    best
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn one_funnel_matches_grid(t in 0.0f64..7.0, a in -0.8f64..0.8, b in -0.8f64..0.8) {
        let r = t.cos();
        let psi0 = 3.0 * (-2.0 * t).exp() + 0.1;
        let p = problem(Scheme::OneFunnel, 0.08, t, [r + a * psi0, 0.0, -t.sin() + b, 0.0]);
        let solved = solve_ocp(&p, None).unwrap();
        prop_assert!(solved.cost_value <= grid_best(&p, 41) + 1e-3);
    }

    #[test]
    fn feasible_flag_agrees_with_objective(t in 0.0f64..7.0, a in -0.95f64..0.95) {
        let psi0 = 3.0 * (-2.0 * t).exp() + 0.1;
        let p = problem(Scheme::TwoFunnel, 0.2, t, [t.cos() + a * psi0, 0.0, -t.sin(), 0.0]);
        let s = solve_ocp(&p, None).unwrap();
        let again = p.objective(&s.controls.values).unwrap().unwrap();
        prop_assert_eq!(again.is_feasible(), s.feasible);
        prop_assert_eq!(again.value(), s.cost_value);
        prop_assert!(s.feasible == (s.cost_value < p.cost.cap));
    }
}

#[test]
fn warm_start_is_used_and_never_worse() {
    let p = problem(Scheme::TwoFunnel, 0.6, 0.0, [0.0; 4]);
    let first = solve_ocp(&p, None).unwrap();
    let mut next = p.clone();
    next.t_hat = 0.04;
    next.x_hat = next_state(&p, first.controls.values[0]);
    let mut warm = shift_warm_start(&first.controls, 1).unwrap();
    warm.t_start = next.t_hat;
    let with = solve_ocp(&next, Some(&warm)).unwrap();
    let cold = solve_ocp(&next, None).unwrap();
    assert_eq!(with.stats.initial_costs.len(), 2);
    assert_eq!(cold.stats.initial_costs.len(), 1);
    // The shifted solution starts much closer to the optimum than zero.
    assert!(with.stats.initial_costs[0] < with.stats.initial_costs[1]);
    assert!(with.cost_value <= cold.cost_value + 1e-9);
}

fn next_state(p: &OcpProblem, u0: f64) -> Vec<f64> {
    let u = ControlSequence::new(p.t_hat, p.control_step, vec![u0], p.bound).unwrap();
    integrate_adaptive(p.plant.as_ref(), &p.x_hat, &u, &AdaptiveOptions::default())
        .unwrap()
        .last_state()
        .unwrap()
        .to_vec()
}
