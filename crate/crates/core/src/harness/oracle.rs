//! Independent reference computations, each reporting a measured error
//! against its tolerance.

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::data::sample_initial_states;
use crate::ddp::{march_solve, solve_fixed_time, DdpSettings, DiscreteTrajectory, FixedTimeProblem};
use crate::dynamics::{CostSpec, ModelSpec, StateVec};
use crate::error::Result;
use crate::par;
use crate::freetime::{rest_state, solve_free_time, terminal_time_gradient, FreeTimeSettings};
use crate::lqr::{build_riccati_table, BlendSchedule, Saturation};
use crate::policy::{control_loss, control_loss_gradient, init_policy, time_loss_gradient, Architecture, Dataset, LqrBranch, Policy, Record, ZeroControl};
use crate::sampling::{simulate_ivp, IvpSettings};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleResult {
    pub name: String,
    pub passed: bool,
    pub measured: f64,
    pub tolerance: f64,
    pub detail: String,
}

impl OracleResult {
    fn at_most(name: &str, measured: f64, tolerance: f64, detail: String) -> Self {
        Self { name: name.into(), passed: measured <= tolerance, measured, tolerance, detail }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub results: Vec<OracleResult>,
}

impl OracleReport {
    pub fn all_passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }
}

/// Quadratic-cost double integrator, target at the origin.
pub fn double_integrator_problem() -> (ModelSpec, CostSpec) {
    let model = ModelSpec::double_integrator();
    let cost = CostSpec::reach(&model, &[0.0], 100.0, 0.025, 0.005, 2.5e5).expect("valid weights");
    (model, cost)
}

/// Discrete Riccati feedback for the double integrator under the exact
/// RK4/zero-order-hold discretization; returns the optimal controls from `x0`.
pub fn di_riccati_controls(cost: &CostSpec, x0: &StateVec, t_f: f64, n: usize) -> Vec<f64> {
    let h = t_f / n as f64;
    let a = Matrix2::new(1.0, h, 0.0, 1.0);
    let b = Vector2::new(0.5 * h * h, h);
    let r = (cost.r_u + cost.r_a) * h;
    let mut p = Matrix2::identity() * cost.r_f;
    let mut gains = vec![Vector2::zeros().transpose(); n];
    for k in (0..n).rev() {
        let s = r + (b.transpose() * p * b)[0];
        let g = (b.transpose() * p * a) / s;
        p = a.transpose() * p * a - (a.transpose() * p * b) * g;
        p = (p + p.transpose()) * 0.5;
        gains[k] = g;
    }
    let mut x = Vector2::new(x0[0], x0[1]);
    gains
        .iter()
        .map(|g| {
            let u = -(g * x)[0];
            x = a * x + b * u;
            u
        })
        .collect()
}

/// DDP against the Riccati solution on the LQ double integrator
/// (`t_f = 1`, 100 steps). Passes with control error ≤ 1e-6 in at most two
/// iterations.
pub fn riccati_vs_ddp(settings: &DdpSettings) -> OracleResult {
    let (model, cost) = double_integrator_problem();
    let x0 = DVector::from_vec(vec![1.0, 0.0]);
    let n = 100;
    let problem = FixedTimeProblem { model: &model, cost: &cost, x0: x0.clone(), t_f: 1.0, n_steps: n };
    let guess = DiscreteTrajectory::zeros(n, 1.0, 2, 1);
    let reference = di_riccati_controls(&cost, &x0, 1.0, n);
    match solve_fixed_time(&problem, &guess, settings) {
        Ok(sol) => {
            let err = sol
                .trajectory
                .controls
                .iter()
                .zip(&reference)
                .map(|(u, r)| (u[0] - r).abs())
                .fold(0.0, f64::max);
            let mut res = OracleResult::at_most(
                "riccati_vs_ddp",
                err,
                1e-6,
                format!("{} iterations, converged {}", sol.iterations, sol.converged),
            );
            res.passed &= sol.iterations <= 2;
            res
        }
        Err(e) => OracleResult { name: "riccati_vs_ddp".into(), passed: false, measured: f64::INFINITY, tolerance: 1e-6, detail: e.to_string() },
    }
}

/// Fixed-time optimal cost of the double integrator for every terminal
/// time `k·dt` in `[lo, hi]`; returns the minimizing terminal time.
pub fn di_grid_search(cost: &CostSpec, x0: &StateVec, dt: f64, lo: f64, hi: f64) -> Result<f64> {
    let model = ModelSpec::double_integrator();
    let settings = DdpSettings::default();
    let first = (lo / dt).ceil() as usize;
    let last = (hi / dt).floor() as usize;
    let mut best = (f64::INFINITY, 0.0);
    for k in first.max(1)..=last {
        let t_f = k as f64 * dt;
        let problem = FixedTimeProblem { model: &model, cost, x0: x0.clone(), t_f, n_steps: k };
        let guess = DiscreteTrajectory::zeros(k, t_f, 2, 1);
        let sol = solve_fixed_time(&problem, &guess, &settings)?;
        if sol.total_cost < best.0 {
            best = (sol.total_cost, t_f);
        }
    }
    Ok(best.1)
}

pub const DI_PROBES: [[f64; 2]; 5] = [[1.0, 0.0], [-0.5, 0.0], [0.3, 0.5], [2.0, -1.0], [-1.0, 1.0]];

/// Free-time solutions against the grid-search minimizer; the measured
/// value is the largest gap in units of `dt`.
pub fn free_time_vs_grid(dt: f64) -> Result<OracleResult> {
    let (model, cost) = double_integrator_problem();
    let settings = FreeTimeSettings { dt, t_f0: 1.2, ..Default::default() };
    let schedule = [50, 100, 200];
    let mut worst: f64 = 0.0;
    let mut detail = Vec::new();
    for p in DI_PROBES {
        let x0 = DVector::from_vec(p.to_vec());
        let sol = solve_free_time(&model, &cost, &x0, &settings, &DdpSettings::default(), &schedule)?;
        let grid = di_grid_search(&cost, &x0, dt, 0.05, 3.0)?;
        let gap = (sol.t_f - grid).abs() / dt;
        worst = worst.max(gap);
        detail.push(format!("{p:?}: {:.4} vs {:.4}", sol.t_f, grid));
    }
    Ok(OracleResult::at_most("free_time_vs_grid", worst, 1.0 + 1e-6, detail.join("; ")))
}

/// Small 2-link dataset with arbitrary (but fixed) labels.
pub fn synthetic_records(n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let records = (0..n)
        .map(|k| Record {
            traj_id: 0,
            knot: k,
            t_remaining: rng.random_range(0.0..1.0),
            x: (0..4).map(|i| if i < 2 { rng.random_range(-0.5..1.5) } else { rng.random_range(-2.0..2.0) }).collect(),
            u: (0..2).map(|_| rng.random_range(-20.0..20.0)).collect(),
            iteration: 0,
        })
        .collect();
    Dataset { records }
}

/// LQR branch of the reaching task on `model`.
pub fn reach_branch(model: &ModelSpec, cost: &CostSpec, horizon: f64, step: f64) -> Result<LqrBranch> {
    Ok(LqrBranch {
        riccati: build_riccati_table(model, cost, horizon, step)?,
        blend: BlendSchedule::default(),
        saturation: Saturation::new(-2000.0, 2000.0, &cost.u_f)?,
    })
}

fn relative_gap(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt().max(1e-12);
    diff / scale
}

/// Backpropagated loss gradients against central differences of the loss
/// evaluated through the policy's forward pass. Returns the worst
/// relative error over the control network and, for QRnet, the time network.
pub fn gradient_check(policy: &Policy, data: &Dataset) -> Result<f64> {
    let h = 1e-6;
    let (_, grad) = control_loss_gradient(policy, data)?;
    let base = policy.control_net.flat();
    let mut fd = vec![0.0; base.len()];
    let mut probe = policy.clone();
    for i in 0..base.len() {
        let mut p = base.clone();
        p[i] = base[i] + h;
        probe.control_net.set_flat(&p)?;
        probe.refresh();
        let up = control_loss(&probe, data)?;
        p[i] = base[i] - h;
        probe.control_net.set_flat(&p)?;
        probe.refresh();
        let down = control_loss(&probe, data)?;
        fd[i] = (up - down) / (2.0 * h);
    }
    let mut worst = relative_gap(&grad, &fd);
    if let Some(net) = &policy.time_net {
        let (_, grad) = time_loss_gradient(policy, data)?;
        let base = net.flat();
        let mut fd = vec![0.0; base.len()];
        let mut probe = policy.clone();
        let xs = DMatrix::from_fn(policy.state_dim(), data.len(), |i, j| data.records[j].x[i]);
        let loss = |p: &Policy| {
            let t = p.time_to_go_batch(&xs).expect("time net present");
            data.records.iter().enumerate().map(|(j, r)| (t[j] - r.t_remaining).powi(2)).sum::<f64>() / data.len() as f64
        };
        for i in 0..base.len() {
            let mut p = base.clone();
            p[i] = base[i] + h;
            probe.time_net.as_mut().expect("time net").set_flat(&p)?;
            let up = loss(&probe);
            p[i] = base[i] - h;
            probe.time_net.as_mut().expect("time net").set_flat(&p)?;
            let down = loss(&probe);
            fd[i] = (up - down) / (2.0 * h);
        }
        worst = worst.max(relative_gap(&grad, &fd));
    }
    Ok(worst)
}

fn arm_reach() -> (ModelSpec, CostSpec) {
    let model = ModelSpec::planar_arm(2);
    let cost = CostSpec::reach(&model, &[1.0, 0.5], 100.0, 0.025, 0.005, 2.5e5).expect("valid weights");
    (model, cost)
}

pub fn gradient_oracle() -> Result<OracleResult> {
    let (model, cost) = arm_reach();
    let branch = reach_branch(&model, &cost, 0.8, 0.01)?;
    let data = synthetic_records(10, 11);
    let mut worst: f64 = 0.0;
    for (arch, seed) in [(Architecture::Mlp, 1), (Architecture::Qrnet, 2)] {
        let policy = init_policy(arch, &data, branch.clone(), seed)?;
        worst = worst.max(gradient_check(&policy, &data)?);
    }
    Ok(OracleResult::at_most("loss_gradients", worst, 1e-3, "MLP and QRnet, 10 records".into()))
}

/// `û(x_f)` for random weight draws; the worst deviation from `u_f`.
pub fn terminal_identity(draws: usize) -> Result<OracleResult> {
    let (model, cost) = arm_reach();
    let branch = reach_branch(&model, &cost, 0.8, 0.01)?;
    let data = synthetic_records(10, 5);
    let mut worst: f64 = 0.0;
    for d in 0..draws {
        let policy = init_policy(Architecture::Qrnet, &data, branch.clone(), 1000 + d as u64)?;
        let u = policy.control(&cost.x_f, None)?;
        worst = worst.max((u - &cost.u_f).amax());
    }
    // The saturation fixes u_f with unit slope there.
    let sat = &branch.saturation;
    let h = 1e-4;
    let mut slope_err: f64 = 0.0;
    for (i, &uf) in cost.u_f.iter().enumerate() {
        worst = worst.max((sat.apply_scalar(i, uf) - uf).abs());
        let slope = (sat.apply_scalar(i, uf + h) - sat.apply_scalar(i, uf - h)) / (2.0 * h);
        slope_err = slope_err.max((slope - 1.0).abs());
    }
    let detail = format!("{draws} weight draws, saturation slope error {slope_err:.1e}");
    let mut res = OracleResult::at_most("qrnet_terminal_identity", worst, 1e-12, detail);
    res.passed &= slope_err <= 1e-6;
    Ok(res)
}

/// Structural Riccati checks on the 2-link table: zero feedforward,
/// symmetric PSD value matrices, agreement of nested horizons.
pub fn riccati_properties(step: f64) -> Result<OracleResult> {
    let (model, cost) = arm_reach();
    let long = build_riccati_table(&model, &cost, 0.8, step)?;
    let short = build_riccati_table(&model, &cost, 0.4, step)?;
    let mut worst: f64 = 0.0;
    let mut notes = Vec::new();
    if long.feedforward.iter().any(|k| k.iter().any(|&v| v != 0.0)) {
        worst = f64::INFINITY;
        notes.push("nonzero feedforward".to_string());
    }
    for p in &long.values {
        let asym = (p - p.transpose()).amax() / p.amax().max(1.0);
        let eig = p.clone().symmetric_eigen().eigenvalues.min();
        worst = worst.max(asym);
        if eig < -1e-9 * p.amax() {
            worst = f64::INFINITY;
            notes.push(format!("negative eigenvalue {eig}"));
        }
    }
    for i in 0..short.len() {
        let d = (&long.gains[i] - &short.gains[i]).amax().max((&long.values[i] - &short.values[i]).amax());
        worst = worst.max(d);
    }
    notes.push(format!("{} entries", long.len() - 1));
    Ok(OracleResult::at_most("riccati_properties", worst, 1e-10, notes.join("; ")))
}

/// Relative energy drift of the unforced, undamped 2-link arm over 1 s.
pub fn energy_drift() -> Result<OracleResult> {
    let (model, cost) = arm_reach();
    let x0 = rest_state(&[0.3, 1.2]);
    let ivp = IvpSettings { dt_sim: 1e-3, horizon: 1.0, ..Default::default() };
    let traj = simulate_ivp(&model, &cost, &ZeroControl { control_dim: 2 }, &x0, &ivp)?;
    let e0 = model.mechanical_energy(&x0)?;
    let mut worst: f64 = 0.0;
    for x in &traj.states {
        worst = worst.max((model.mechanical_energy(x)? - e0).abs() / e0.abs().max(1.0));
    }
    Ok(OracleResult::at_most("energy_drift", worst, 1e-6, "zero torque, dt 1e-3, 1 s".into()))
}

/// Terminal-state error ratio when halving the simulation step on a
/// smooth 1 s rollout, against a fine reference. Passes when ≥ 8.
pub fn rk4_order() -> Result<(OracleResult, f64)> {
    let (model, cost) = arm_reach();
    let x0 = rest_state(&[0.3, 1.2]);
    let run = |dt: f64| -> Result<StateVec> {
        let ivp = IvpSettings { dt_sim: dt, horizon: 1.0, ..Default::default() };
        let t = simulate_ivp(&model, &cost, &ZeroControl { control_dim: 2 }, &x0, &ivp)?;
        Ok(t.states.last().cloned().unwrap_or_else(|| x0.clone()))
    };
    let reference = run(0.02 / 64.0)?;
    let e1 = (run(0.02)? - &reference).norm();
    let e2 = (run(0.01)? - &reference).norm();
    let ratio = e1 / e2;
    let res = OracleResult {
        name: "rk4_order".into(),
        passed: ratio >= 8.0,
        measured: ratio,
        tolerance: 8.0,
        detail: format!("errors {e1:.3e} -> {e2:.3e}"),
    };
    Ok((res, ratio))
}

/// Integrated-Hamiltonian terminal-time gradient divided by `t_f`, against
/// a central difference of the fixed-time optimal cost (step count held
/// fixed). Returns `(gradient / t_f, difference quotient)` for the double
/// integrator.
pub fn terminal_time_gradient_fd(x0: &StateVec, t_f: f64, n: usize) -> Result<(f64, f64)> {
    let (model, cost) = double_integrator_problem();
    let settings = DdpSettings::default();
    let solve = |t: f64| {
        let problem = FixedTimeProblem { model: &model, cost: &cost, x0: x0.clone(), t_f: t, n_steps: n };
        solve_fixed_time(&problem, &DiscreteTrajectory::zeros(n, t, 2, 1), &settings)
    };
    let sol = solve(t_f)?;
    let g = terminal_time_gradient(&sol, &cost, &model)?;
    let h = 1e-4 * t_f;
    let fd = (solve(t_f + h)?.total_cost - solve(t_f - h)?.total_cost) / (2.0 * h);
    Ok((g / t_f, fd))
}

pub fn terminal_time_gradient_oracle() -> Result<OracleResult> {
    let mut worst: f64 = 0.0;
    let mut detail = Vec::new();
    for (p, t_f) in [([1.0, 0.0], 0.5), ([1.0, 0.0], 0.2), ([-0.5, 0.5], 0.8)] {
        let (g, fd) = terminal_time_gradient_fd(&DVector::from_vec(p.to_vec()), t_f, 200)?;
        worst = worst.max((g - fd).abs() / fd.abs().max(1.0));
        detail.push(format!("{p:?} at {t_f}: {g:.4} vs {fd:.4}"));
    }
    Ok(OracleResult::at_most("terminal_time_gradient", worst, 1e-5, detail.join("; ")))
}

/// Full-scale marching schedule (step counts).
pub const MARCHING_SCHEDULE: [usize; 9] = [150, 300, 450, 600, 750, 900, 1200, 1500, 1750];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarchingComparison {
    pub marching_converged: usize,
    pub single_converged: usize,
    /// States where marching ends at a cost no higher than the single level.
    pub marching_not_worse: usize,
    pub count: usize,
}

/// Fixed-horizon solves from cold starts on `count` random cube states, once
/// through `schedule` and once directly on its finest level.
pub fn marching_comparison(cfg: &RunConfig, schedule: &[usize], t_f: f64, count: usize, seed: u64) -> Result<MarchingComparison> {
    let cost = cfg.cost_spec()?;
    let e = &cfg.experiment;
    let states = sample_initial_states(&e.q_c, e.cube_side, count, seed)?;
    let finest = *schedule.last().unwrap_or(&1);
    let (n, m) = (cfg.model.state_dim(), cfg.model.control_dim());
    let outcome = |x0: &StateVec, levels: &[usize]| {
        let guess = DiscreteTrajectory::zeros(levels[0], t_f, n, m);
        match march_solve(&cfg.model, &cost, x0, t_f, levels, &guess, &cfg.solver.ddp) {
            Ok(sol) => (sol.converged, sol.total_cost),
            Err(_) => (false, f64::INFINITY),
        }
    };
    let pairs = par::map(&states, |x0| (outcome(x0, schedule), outcome(x0, &[finest])));
    let mut c = MarchingComparison { marching_converged: 0, single_converged: 0, marching_not_worse: 0, count };
    for ((ca, ja), (cb, jb)) in pairs {
        c.marching_converged += ca as usize;
        c.single_converged += cb as usize;
        c.marching_not_worse += (ja <= jb + 1e-9 * jb.abs()) as usize;
    }
    Ok(c)
}

/// Marching converges at least as often as a single level, and on at least
/// 90% of the states.
pub fn marching_benefit(cfg: &RunConfig) -> Result<OracleResult> {
    let c = marching_comparison(cfg, &MARCHING_SCHEDULE, 0.5, 50, 7)?;
    let needed = (c.count * 9).div_ceil(10);
    Ok(OracleResult {
        name: "marching_benefit".into(),
        passed: c.marching_converged >= c.single_converged && c.marching_converged >= needed,
        measured: c.marching_converged as f64,
        tolerance: needed as f64,
        detail: format!(
            "marching {}/{}, single level {}/{}, marching cost not worse on {}",
            c.marching_converged, c.count, c.single_converged, c.count, c.marching_not_worse
        ),
    })
}

/// Every oracle once, in a fixed order.
pub fn oracle_suite(cfg: &RunConfig) -> Result<OracleReport> {
    let mut results = vec![riccati_vs_ddp(&cfg.solver.ddp)];
    results.push(free_time_vs_grid(2e-3)?);
    results.push(marching_benefit(cfg)?);
    results.push(terminal_time_gradient_oracle()?);
    results.push(gradient_oracle()?);
    results.push(terminal_identity(100)?);
    results.push(riccati_properties(5e-4)?);
    results.push(energy_drift()?);
    results.push(rk4_order()?.0);
    Ok(OracleReport { results })
}
