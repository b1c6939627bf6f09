use nalgebra::DVector;

use freetime_qrnet::ddp::*;
use freetime_qrnet::freetime::{rest_state, solve_free_time, FreeTimeSettings};
use freetime_qrnet::harness::config::RunConfig;
use freetime_qrnet::harness::data::sample_initial_states;
use freetime_qrnet::harness::oracle::{di_riccati_controls, double_integrator_problem, marching_comparison};

#[test]
fn marching_lq_matches_the_fine_riccati_solution() {
    let (model, cost) = double_integrator_problem();
    let x0 = DVector::from_vec(vec![1.0, 0.0]);
    let guess = DiscreteTrajectory::zeros(10, 1.0, 2, 1);
    let sol = march_solve(&model, &cost, &x0, 1.0, &[10, 50, 200], &guess, &DdpSettings::default()).unwrap();
    let reference = di_riccati_controls(&cost, &x0, 1.0, 200);
    let err = sol.trajectory.controls.iter().zip(&reference).map(|(u, r)| (u[0] - r).abs()).fold(0.0, f64::max);
    assert!(err <= 1e-6, "max control error {err:e}");
}

#[test]
fn single_level_march_is_a_plain_solve() {
    let cfg = RunConfig::default();
    let cost = cfg.cost_spec().unwrap();
    let x0 = rest_state(&[0.2, 1.3]);
    let guess = DiscreteTrajectory::zeros(40, 0.5, 4, 2);
    let s = DdpSettings::default();
    let a = march_solve(&cfg.model, &cost, &x0, 0.5, &[60], &guess, &s).unwrap();
    let problem = FixedTimeProblem { model: &cfg.model, cost: &cost, x0: x0.clone(), t_f: 0.5, n_steps: 60 };
    let b = solve_fixed_time(&problem, &rescale_guess(&guess, 0.5, 60), &s).unwrap();
    assert_eq!(a.trajectory, b.trajectory);
    assert_eq!(a.cost_history, b.cost_history);
}

#[test]
fn accepted_iterations_never_raise_the_cost() {
    let cfg = RunConfig::default();
    let cost = cfg.cost_spec().unwrap();
    for (i, x0) in sample_initial_states(&[0.0, 1.0], 1.0, 5, 11).unwrap().iter().enumerate() {
        let problem = FixedTimeProblem { model: &cfg.model, cost: &cost, x0: x0.clone(), t_f: 0.4, n_steps: 80 };
        let sol = solve_fixed_time(&problem, &DiscreteTrajectory::zeros(80, 0.4, 4, 2), &DdpSettings::default()).unwrap();
        assert!(sol.converged, "state {i}");
        for w in sol.cost_history.windows(2) {
            assert!(w[1] <= w[0], "state {i}: {} -> {}", w[0], w[1]);
        }
        assert_eq!(sol.costates.len(), 81);
    }
}

#[test]
fn starting_at_the_goal_holds_the_goal_torque() {
    let cfg = RunConfig::default();
    let cost = cfg.cost_spec().unwrap();
    let guess = DiscreteTrajectory::constant(50, 0.5, &cost.x_f, &cost.u_f);
    let problem = FixedTimeProblem { model: &cfg.model, cost: &cost, x0: cost.x_f.clone(), t_f: 0.5, n_steps: 50 };
    let sol = solve_fixed_time(&problem, &guess, &DdpSettings::default()).unwrap();
    for u in &sol.trajectory.controls {
        assert!((u - &cost.u_f).amax() < 1e-9);
    }
    for x in &sol.trajectory.states {
        assert!((x - &cost.x_f).amax() < 1e-9);
    }
}

#[test]
fn free_time_at_the_goal_collapses_to_the_guard() {
    let cfg = RunConfig::benchmark();
    let cost = cfg.cost_spec().unwrap();
    let settings = cfg.solver.freetime.clone();
    let sol = solve_free_time(&cfg.model, &cost, &cost.x_f, &settings, &cfg.solver.ddp, &cfg.solver.schedule).unwrap();
    assert!(sol.converged);
    assert!(sol.t_f <= 2.0 * settings.dt + 1e-12, "t_f = {}", sol.t_f);
}

#[test]
fn free_time_two_link_solution_is_locally_optimal() {
    let cfg = RunConfig::benchmark();
    let cost = cfg.cost_spec().unwrap();
    let x0 = rest_state(&[0.3, 1.2]);
    let ft = &cfg.solver.freetime;
    let sol = solve_free_time(&cfg.model, &cost, &x0, ft, &cfg.solver.ddp, &cfg.solver.schedule).unwrap();
    assert!(sol.converged);
    let n = (sol.t_f / ft.dt).round() as usize;
    assert_eq!(sol.trajectory().n_steps(), n);
    // Neighbouring horizons on the same grid cost no less.
    let at = |k: usize| {
        let t_f = k as f64 * ft.dt;
        let p = FixedTimeProblem { model: &cfg.model, cost: &cost, x0: x0.clone(), t_f, n_steps: k };
        solve_fixed_time(&p, &rescale_guess(sol.trajectory(), t_f, k), &cfg.solver.ddp).unwrap().total_cost
    };
    let c = at(n);
    assert!(at(n - 3) >= c - 1e-6 * c && at(n + 3) >= c - 1e-6 * c);
}

#[test]
fn marching_is_not_worse_on_a_small_batch() {
    let cfg = RunConfig::default();
    let c = marching_comparison(&cfg, &[25, 50, 100], 0.5, 8, 3).unwrap();
    assert!(c.marching_converged >= c.single_converged, "{c:?}");
    assert!(c.marching_not_worse * 10 >= c.count * 8, "{c:?}");
}

#[test]
fn rescale_keeps_the_first_state_and_clamps_the_end() {
    let t = DiscreteTrajectory {
        states: (0..=10).map(|k| DVector::from_vec(vec![k as f64])).collect(),
        controls: (0..10).map(|k| DVector::from_vec(vec![k as f64])).collect(),
        dt: 0.1,
    };
    let r = rescale_guess(&t, 2.0, 20);
    assert_eq!(r.states[0], t.states[0]);
    assert_eq!(r.states[20], t.states[10]);
    assert!((r.dt - 0.1).abs() < 1e-15);
}

#[test]
fn settings_reject_nonsense() {
    let s = DdpSettings { reg_factor: 1.0, ..Default::default() };
    assert!(s.validate().is_err());
    assert!(FreeTimeSettings { alpha: 0.0, ..Default::default() }.validate().is_err());
}
