use nalgebra::DMatrix;

use freetime_qrnet::freetime::rest_state;
use freetime_qrnet::harness::config::RunConfig;
use freetime_qrnet::harness::data::{generate_dataset, sample_initial_states};
use freetime_qrnet::harness::experiment::prepare;
use freetime_qrnet::harness::metrics::{evaluate_policy, RatioCaps};
use freetime_qrnet::harness::store::{load_prepared, save_prepared};
use freetime_qrnet::policy::*;
use freetime_qrnet::sampling::*;

fn small_config() -> RunConfig {
    let mut cfg = RunConfig::benchmark();
    cfg.training.epochs = 10;
    cfg.training.batch_size = 128;
    cfg.sampling.iterations = 2;
    cfg.experiment.n_train = 8;
    cfg.experiment.n_val = 3;
    cfg.experiment.n_test = 6;
    cfg.experiment.seeds = vec![5];
    cfg
}

fn labeled(cfg: &RunConfig, n: usize, seed: u64) -> (Dataset, Vec<OptimalPath>) {
    let states = sample_initial_states(&cfg.experiment.q_c, cfg.experiment.cube_side, n, seed).unwrap();
    let (data, paths, report) = generate_dataset(&states, &cfg.solver_config().unwrap(), 0).unwrap();
    assert_eq!(report.convergence_rate, 1.0);
    (data, paths)
}

#[test]
fn replaying_the_optimal_controls_costs_about_the_optimum() {
    let cfg = RunConfig::benchmark();
    let cost = cfg.cost_spec().unwrap();
    let (_, paths) = labeled(&cfg, 6, 21);
    let replay = ReplayController { trajectories: paths.iter().map(|p| p.trajectory.clone()).collect(), u_f: cost.u_f.clone() };
    let ivp = IvpSettings { dt_sim: 1e-3, horizon: 1.0, ..Default::default() };
    let states: Vec<_> = paths.iter().map(|p| p.x0.clone()).collect();
    let costs: Vec<f64> = paths.iter().map(|p| optimal_cost(&cfg.model, &cost, &p.trajectory, ivp.eps_succ)).collect();
    let m = evaluate_policy(&cfg.model, &cost, &replay, &states, &ivp, &costs, RatioCaps::default()).unwrap();
    assert_eq!(m.n_fail, 0);
    for r in &m.ratios {
        assert!((1.0 - 1e-3..=1.05).contains(r), "ratio {r}");
    }
}

#[test]
fn zero_torque_never_reaches_the_goal() {
    let cfg = RunConfig::benchmark();
    let cost = cfg.cost_spec().unwrap();
    let states = sample_initial_states(&[0.0, 1.0], 1.0, 10, 4).unwrap();
    let ivp = IvpSettings { dt_sim: 2e-3, horizon: 1.0, ..Default::default() };
    let zero = ZeroControl { control_dim: 2 };
    let m = evaluate_policy(&cfg.model, &cost, &zero, &states, &ivp, &[1.0; 10], RatioCaps::default()).unwrap();
    assert_eq!(m.success_rate, 0.0);
    assert_eq!(m.mean_ratio, 10.0);
    assert!(evaluate_policy(&cfg.model, &cost, &zero, &states, &ivp, &[1.0; 9], RatioCaps::default()).is_err());
}

#[test]
fn checkpoints_round_trip_bitwise() {
    let cfg = small_config();
    let (data, _) = labeled(&cfg, 2, 8);
    let dir = tempfile::tempdir().unwrap();
    for arch in [Architecture::Qrnet, Architecture::Mlp] {
        let policy = init_policy(arch, &data, cfg.lqr_branch().unwrap(), 17).unwrap();
        let path = dir.path().join("p.json");
        save_checkpoint(&policy, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.control_net.flat(), policy.control_net.flat());
        let xs = DMatrix::from_fn(4, 7, |i, j| 0.1 * (i as f64 + 1.0) * (j as f64 - 3.0) + if i == 1 { 1.0 } else { 0.0 });
        let (a, b) = (policy.controls(0.0, &xs), back.controls(0.0, &xs));
        assert!(a.iter().zip(b.iter()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
}

#[test]
fn ensemble_of_copies_is_the_member() {
    let cfg = small_config();
    let (data, _) = labeled(&cfg, 2, 9);
    let p = init_policy(Architecture::Qrnet, &data, cfg.lqr_branch().unwrap(), 3).unwrap();
    let e = Ensemble::new(vec![p.clone(), p.clone(), p.clone()]).unwrap();
    let x = rest_state(&[0.4, 0.9]);
    let (a, b) = (p.control(&x, None).unwrap(), e.control(&x).unwrap());
    assert!((a - b).amax() <= 1e-12);
    assert!(Ensemble::new(Vec::new()).is_err());
}

#[test]
fn labels_count_down_to_the_terminal_time() {
    let cfg = RunConfig::benchmark();
    let (data, paths) = labeled(&cfg, 3, 12);
    data.validate().unwrap();
    for p in &paths {
        let recs: Vec<&Record> = data.records.iter().filter(|r| r.traj_id == p.id).collect();
        assert_eq!(recs.len(), p.trajectory.n_steps());
        assert!((recs[0].t_remaining - p.t_f()).abs() < 1e-9);
        for w in recs.windows(2) {
            assert!((w[0].t_remaining - w[1].t_remaining - p.trajectory.dt).abs() < 1e-9);
        }
    }
}

#[test]
fn goal_state_labels_a_near_empty_trajectory() {
    let cfg = RunConfig::benchmark();
    let cost = cfg.cost_spec().unwrap();
    let (_, paths, report) = generate_dataset(&[cost.x_f.clone()], &cfg.solver_config().unwrap(), 0).unwrap();
    assert_eq!(report.convergence_rate, 1.0);
    assert!(paths[0].t_f() <= 2.0 * cfg.solver.freetime.dt + 1e-12);
}

#[test]
fn ivp_art_skips_rollouts_that_track_the_path() {
    let cfg = RunConfig::benchmark();
    let cost = cfg.cost_spec().unwrap();
    let (_, paths) = labeled(&cfg, 2, 13);
    let replay = ReplayController { trajectories: vec![paths[0].trajectory.clone()], u_f: cost.u_f.clone() };
    let ivp = IvpSettings { dt_sim: 1e-3, horizon: 1.0, ..Default::default() };
    let roll = simulate_ivp(&cfg.model, &cost, &replay, &paths[0].x0, &ivp).unwrap();
    assert!(Strategy::IvpArt { tau: 0.05 }.select(&roll, &paths[0], &cost.x_f).is_empty());
    // A zero-torque rollout deviates, and the chosen state is the first one
    // beyond the threshold.
    let fall = simulate_ivp(&cfg.model, &cost, &ZeroControl { control_dim: 2 }, &paths[0].x0, &ivp).unwrap();
    let picks = Strategy::IvpArt { tau: 0.05 }.select(&fall, &paths[0], &cost.x_f);
    assert_eq!(picks.len(), 1);
    let s = &picks[0];
    assert!((&s.x - paths[0].trajectory.state_at(s.t)).norm() > 0.05);
    for k in 0..s.knot {
        let t = fall.time(k);
        assert!((&fall.states[k] - paths[0].trajectory.state_at(t)).norm() <= 0.05);
    }
    let d = Strategy::Dagger { fractions: vec![0.25, 0.75] }.select(&fall, &paths[0], &cost.x_f);
    assert_eq!(d.len(), 2);
    assert!(d[0].t < d[1].t && d[1].t <= paths[0].t_f() + ivp.dt_sim);
}

#[test]
fn adaptive_run_grows_the_data_and_tags_resamples() {
    let cfg = small_config();
    let p = prepare(&cfg, 5).unwrap();
    let solver = cfg.solver_config().unwrap();
    let initial = p.initial_policy(&cfg, Architecture::Qrnet).unwrap();
    let run = p.run(&cfg, &solver, &initial, cfg.ivp_art(), Architecture::Qrnet).unwrap();
    assert_eq!(run.iterations.len(), 2);
    assert_eq!(run.ensemble.members.len(), 2);
    let roots: std::collections::HashSet<u64> = p.paths.iter().map(|x| x.id).collect();
    let mut prev = p.train.len();
    for it in &run.iterations {
        assert!(it.dataset.len() >= prev);
        prev = it.dataset.len();
        for r in &it.new_labels.records {
            assert!(r.traj_id >> 40 == it.k as u64 && roots.contains(&root_of(r.traj_id)));
            assert_eq!(r.iteration, it.k);
        }
    }
}

#[test]
fn replacement_drops_the_superseded_tail() {
    let mut cfg = small_config();
    cfg.sampling.iterations = 1;
    cfg.sampling.mode = DatasetMode::Replacement;
    let p = prepare(&cfg, 6).unwrap();
    let solver = cfg.solver_config().unwrap();
    let initial = p.initial_policy(&cfg, Architecture::Qrnet).unwrap();
    let run = p.run(&cfg, &solver, &initial, cfg.ivp_art(), Architecture::Qrnet).unwrap();
    let it = &run.iterations[0];
    for s in it.samples.iter().filter(|s| s.solved) {
        let path = p.paths.iter().find(|x| x.id == s.root).unwrap();
        let t_cut = s.state.t;
        for r in it.dataset.records.iter().filter(|r| r.traj_id == s.root) {
            assert!(path.t_f() - r.t_remaining < t_cut + 1e-9, "record at t = {}", path.t_f() - r.t_remaining);
        }
    }
}

#[test]
fn same_seed_same_run() {
    let cfg = small_config();
    let solver = cfg.solver_config().unwrap();
    let once = || {
        let p = prepare(&cfg, 5).unwrap();
        let initial = p.initial_policy(&cfg, Architecture::Qrnet).unwrap();
        let run = p.run(&cfg, &solver, &initial, cfg.dagger(), Architecture::Qrnet).unwrap();
        (p.evaluate(&cfg, &run.ensemble).unwrap(), run.iterations.last().unwrap().policy.control_net.flat())
    };
    assert_eq!(once(), once());
}

#[test]
fn prepared_data_survives_the_disk() {
    let cfg = small_config();
    let p = prepare(&cfg, 5).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_prepared(&p, dir.path()).unwrap();
    let q = load_prepared(&cfg, dir.path()).unwrap();
    assert_eq!(q.train, p.train);
    assert_eq!(q.val, p.val);
    assert_eq!(q.test_costs, p.test_costs);
    assert_eq!(q.test_states, p.test_states);
    assert_eq!(q.ivp, p.ivp);
    assert_eq!(q.paths.len(), p.paths.len());
    assert!(q.paths.iter().zip(&p.paths).all(|(a, b)| a.trajectory == b.trajectory));
}
