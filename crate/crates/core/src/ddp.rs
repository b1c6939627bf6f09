//! Fixed-terminal-time trajectory optimization by differential dynamic
//! programming, and the coarse-to-fine marching scheme over step counts.
//!
//! Dynamics are discretized with one RK4 step per knot under a zero-order
//! hold on the control. The discrete cost is
//! `Σₖ L(xₖ, uₖ)·dt + Φ(x_N)`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dynamics::{central_jacobians, ControlVec, CostSpec, ModelSpec, StateVec, MAX_DOF};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct FixedTimeProblem<'a> {
    pub model: &'a ModelSpec,
    pub cost: &'a CostSpec,
    pub x0: StateVec,
    pub t_f: f64,
    pub n_steps: usize,
}

impl FixedTimeProblem<'_> {
    pub fn dt(&self) -> f64 {
        self.t_f / self.n_steps as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteTrajectory {
    /// `n_steps + 1` knots.
    pub states: Vec<StateVec>,
    /// `n_steps` zero-order-hold controls.
    pub controls: Vec<ControlVec>,
    pub dt: f64,
}

impl DiscreteTrajectory {
    /// All-zero states and controls: the cold-start guess.
    pub fn zeros(n_steps: usize, t_f: f64, state_dim: usize, control_dim: usize) -> Self {
        Self {
            states: vec![DVector::zeros(state_dim); n_steps + 1],
            controls: vec![DVector::zeros(control_dim); n_steps],
            dt: t_f / n_steps as f64,
        }
    }

    /// Every knot at `x` with constant control `u`.
    pub fn constant(n_steps: usize, t_f: f64, x: &StateVec, u: &ControlVec) -> Self {
        Self {
            states: vec![x.clone(); n_steps + 1],
            controls: vec![u.clone(); n_steps],
            dt: t_f / n_steps as f64,
        }
    }

    pub fn n_steps(&self) -> usize {
        self.controls.len()
    }

    pub fn t_f(&self) -> f64 {
        self.dt * self.n_steps() as f64
    }

    pub fn time(&self, knot: usize) -> f64 {
        knot as f64 * self.dt
    }

    /// State at time `t` by linear interpolation, clamped to the ends.
    pub fn state_at(&self, t: f64) -> StateVec {
        interp_knots(&self.states, t / self.dt)
    }

    /// Zero-order-hold control at time `t`, clamped to the last control.
    pub fn control_at(&self, t: f64) -> ControlVec {
        let n = self.controls.len();
        // Times a rounding error short of a knot belong to that knot.
        let pos = t / self.dt;
        let k = if t <= 0.0 { 0 } else { ((pos + 1e-9).floor() as usize).min(n - 1) };
        self.controls[k].clone()
    }

    /// Knots from `first` on, as a trajectory starting at time zero.
    pub fn tail(&self, first: usize) -> Self {
        let first = first.min(self.n_steps().saturating_sub(1));
        Self {
            states: self.states[first..].to_vec(),
            controls: self.controls[first..].to_vec(),
            dt: self.dt,
        }
    }
}

fn interp_knots(knots: &[DVector<f64>], pos: f64) -> DVector<f64> {
    let last = knots.len() - 1;
    if pos <= 0.0 {
        return knots[0].clone();
    }
    if pos >= last as f64 {
        return knots[last].clone();
    }
    let i = pos.floor() as usize;
    let w = pos - i as f64;
    if w == 0.0 {
        return knots[i].clone();
    }
    &knots[i] * (1.0 - w) + &knots[i + 1] * w
}

#[derive(Clone, Debug)]
pub struct DdpSolution {
    pub trajectory: DiscreteTrajectory,
    /// Value gradient `V_x` at every knot (`n_steps + 1` entries).
    pub costates: Vec<DVector<f64>>,
    pub total_cost: f64,
    pub converged: bool,
    pub iterations: usize,
    /// Cost after the initial rollout and after every accepted step.
    pub cost_history: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DdpSettings {
    pub max_iterations: usize,
    /// Relative cost improvement below which the solve counts as converged.
    pub tolerance: f64,
    pub reg_init: f64,
    pub reg_min: f64,
    pub reg_max: f64,
    pub reg_factor: f64,
    pub backtrack: f64,
    /// Minimum ratio of actual to expected improvement.
    pub armijo: f64,
    pub min_step: f64,
    /// Rollouts whose state norm exceeds this are rejected.
    pub divergence_norm: f64,
    /// Replace the line search with this fixed, unconditionally accepted
    /// step. Only meant for negative-control experiments.
    pub fixed_step: Option<f64>,
}

impl Default for DdpSettings {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            tolerance: 1e-9,
            reg_init: 1e-6,
            reg_min: 1e-10,
            reg_max: 1e6,
            reg_factor: 10.0,
            backtrack: 0.5,
            armijo: 1e-4,
            min_step: 1.0 / 1024.0,
            divergence_norm: 1e6,
            fixed_step: None,
        }
    }
}

impl DdpSettings {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.tolerance,
            self.reg_init,
            self.reg_min,
            self.reg_max,
            self.reg_factor,
            self.backtrack,
            self.armijo,
            self.min_step,
            self.divergence_norm,
        ];
        if self.max_iterations == 0 || positive.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::Config("DDP settings must all be positive".into()));
        }
        if !(self.reg_min <= self.reg_init && self.reg_init <= self.reg_max) || self.reg_factor <= 1.0 {
            return Err(Error::Config("regularization needs min ≤ init ≤ max and a factor above 1".into()));
        }
        if self.backtrack >= 1.0 || self.armijo >= 1.0 || self.min_step > 1.0 || self.fixed_step.is_some_and(|a| !(a > 0.0 && a <= 1.0)) {
            return Err(Error::Config("line-search fractions must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Discrete cost `Σ L(xₖ,uₖ)·dt + Φ(x_N)` of a trajectory.
pub fn discrete_cost(model: &ModelSpec, cost: &CostSpec, traj: &DiscreteTrajectory) -> f64 {
    let running: f64 = traj
        .states
        .iter()
        .zip(&traj.controls)
        .map(|(x, u)| cost.running_raw(model, x.as_slice(), u.as_slice()))
        .sum();
    running * traj.dt + cost.terminal_raw(traj.states[traj.n_steps()].as_slice())
}

/// One RK4 step of the discretized dynamics.
pub fn step(model: &ModelSpec, x: &StateVec, u: &ControlVec, dt: f64) -> StateVec {
    let mut out = DVector::zeros(x.len());
    model.rk4_into(x.as_slice(), u.as_slice(), dt, out.as_mut_slice());
    out
}

/// Jacobians of the RK4 step with respect to state and control.
pub fn step_jacobians(model: &ModelSpec, x: &StateVec, u: &ControlVec, dt: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let h = 1e-4 * x.norm().max(1.0);
    // Differencing the increment x⁺ − x rather than x⁺ keeps the round-off
    // proportional to the (small) per-step change.
    let (mut jx, ju) = central_jacobians(x.as_slice(), u.as_slice(), h, x.len(), |x, u, out| {
        model.rk4_into(x, u, dt, out);
        for (o, xi) in out.iter_mut().zip(x) {
            *o -= xi;
        }
    });
    for i in 0..x.len() {
        jx[(i, i)] += 1.0;
    }
    (jx, ju)
}

struct KnotModel {
    fx: DMatrix<f64>,
    fu: DMatrix<f64>,
    lx: DVector<f64>,
    lu: DVector<f64>,
    lxx: DMatrix<f64>,
    lxu: DMatrix<f64>,
    luu: DMatrix<f64>,
}

struct BackwardPass {
    k_ff: Vec<DVector<f64>>,
    k_fb: Vec<DMatrix<f64>>,
    value_grad: Vec<DVector<f64>>,
    /// Expected improvement for step α is `-(α·d1 + α²·d2)`.
    d1: f64,
    d2: f64,
}

struct Solver<'p, 'a> {
    problem: &'p FixedTimeProblem<'a>,
    settings: &'p DdpSettings,
    dt: f64,
}

impl Solver<'_, '_> {
    fn local_models(&self, traj: &DiscreteTrajectory) -> Vec<KnotModel> {
        let model = self.problem.model;
        traj.states
            .iter()
            .zip(&traj.controls)
            .map(|(x, u)| {
                let (fx, fu) = step_jacobians(model, x, u, self.dt);
                let q = self.problem.cost.quadratics_raw(model, x.as_slice(), u.as_slice());
                KnotModel {
                    fx,
                    fu,
                    lx: q.lx * self.dt,
                    lu: q.lu * self.dt,
                    lxx: q.lxx * self.dt,
                    lxu: q.lxu * self.dt,
                    luu: q.luu * self.dt,
                }
            })
            .collect()
    }

    fn backward(&self, traj: &DiscreteTrajectory, models: &[KnotModel], reg: f64) -> Option<BackwardPass> {
        let cost = self.problem.cost;
        let n = traj.states[0].len();
        let n_steps = traj.n_steps();
        let x_n = &traj.states[n_steps];
        let mut vx = (x_n - &cost.x_f) * (2.0 * cost.r_f);
        let mut vxx = DMatrix::identity(n, n) * (2.0 * cost.r_f);
        let mut value_grad = vec![DVector::zeros(n); n_steps + 1];
        value_grad[n_steps] = vx.clone();
        let mut k_ff = vec![DVector::zeros(0); n_steps];
        let mut k_fb = vec![DMatrix::zeros(0, 0); n_steps];
        let (mut d1, mut d2) = (0.0, 0.0);
        for k in (0..n_steps).rev() {
            let km = &models[k];
            let fxt = km.fx.transpose();
            let fut = km.fu.transpose();
            let vxx_fx = &vxx * &km.fx;
            let qx = &km.lx + &fxt * &vx;
            let qu = &km.lu + &fut * &vx;
            let qxx = &km.lxx + &fxt * &vxx_fx;
            let quu = &km.luu + &fut * &vxx * &km.fu;
            let qux = km.lxu.transpose() + &fut * &vxx_fx;
            // The stage Hessians carry a factor dt; scaling the shift the
            // same way keeps its strength independent of the knot count.
            let mut quu_reg = quu.clone();
            for i in 0..quu_reg.nrows() {
                quu_reg[(i, i)] += reg * self.dt;
            }
            let chol = quu_reg.cholesky()?;
            let kf = -chol.solve(&qu);
            let kb = -chol.solve(&qux);
            if kf.iter().chain(kb.iter()).any(|v| !v.is_finite()) {
                return None;
            }
            let quu_kf = &quu * &kf;
            d1 += kf.dot(&qu);
            d2 += 0.5 * kf.dot(&quu_kf);
            let kbt = kb.transpose();
            vx = qx + &kbt * &quu_kf + &kbt * &qu + qux.transpose() * &kf;
            let v = qxx + &kbt * &quu * &kb + &kbt * &qux + qux.transpose() * &kb;
            vxx = (&v + v.transpose()) * 0.5;
            value_grad[k] = vx.clone();
            k_ff[k] = kf;
            k_fb[k] = kb;
        }
        Some(BackwardPass { k_ff, k_fb, value_grad, d1, d2 })
    }

    /// Closed-loop rollout around `nominal`; `None` when the rollout leaves
    /// the finite region.
    fn forward(&self, nominal: &DiscreteTrajectory, bp: &BackwardPass, alpha: f64) -> Option<(DiscreteTrajectory, f64)> {
        let model = self.problem.model;
        let n_steps = nominal.n_steps();
        let mut states = Vec::with_capacity(n_steps + 1);
        let mut controls = Vec::with_capacity(n_steps);
        let mut x = self.problem.x0.clone();
        let mut running = 0.0;
        for k in 0..n_steps {
            let dx = &x - &nominal.states[k];
            let u = &nominal.controls[k] + &bp.k_ff[k] * alpha + &bp.k_fb[k] * dx;
            running += self.problem.cost.running_raw(model, x.as_slice(), u.as_slice());
            let next = step(model, &x, &u, self.dt);
            if !within_bounds(&next, self.settings.divergence_norm) {
                return None;
            }
            states.push(x);
            controls.push(u);
            x = next;
        }
        let total = running * self.dt + self.problem.cost.terminal_raw(x.as_slice());
        states.push(x);
        total.is_finite().then(|| (DiscreteTrajectory { states, controls, dt: self.dt }, total))
    }

    fn open_loop(&self, controls: &[ControlVec]) -> Option<(DiscreteTrajectory, f64)> {
        let mut states = Vec::with_capacity(controls.len() + 1);
        let mut x = self.problem.x0.clone();
        for u in controls {
            let next = step(self.problem.model, &x, u, self.dt);
            if !within_bounds(&next, self.settings.divergence_norm) {
                return None;
            }
            states.push(x);
            x = next;
        }
        states.push(x);
        let traj = DiscreteTrajectory { states, controls: controls.to_vec(), dt: self.dt };
        let c = discrete_cost(self.problem.model, self.problem.cost, &traj);
        c.is_finite().then_some((traj, c))
    }
}

fn within_bounds(x: &StateVec, limit: f64) -> bool {
    x.iter().all(|v| v.is_finite()) && x.norm() <= limit
}

/// Solve the fixed-terminal-time problem from `guess` (resampled to the
/// problem's knot count when they differ).
pub fn solve_fixed_time(problem: &FixedTimeProblem, guess: &DiscreteTrajectory, settings: &DdpSettings) -> Result<DdpSolution> {
    let n = problem.model.state_dim();
    let m = problem.model.control_dim();
    if problem.n_steps == 0 || !(problem.t_f > 0.0) {
        return Err(Error::Contract("fixed-time problem needs t_f > 0 and n_steps ≥ 1".into()));
    }
    if problem.x0.len() != n || n > 2 * MAX_DOF {
        return Err(Error::Contract("initial state dimension mismatch".into()));
    }
    if guess.controls.is_empty() || guess.controls.iter().any(|u| u.len() != m) {
        return Err(Error::Contract("guess control dimension mismatch".into()));
    }
    let dt = problem.dt();
    let controls = if guess.n_steps() == problem.n_steps {
        guess.controls.clone()
    } else {
        rescale_guess(guess, problem.t_f, problem.n_steps).controls
    };
    let solver = Solver { problem, settings, dt };
    let (mut traj, mut cost) = solver
        .open_loop(&controls)
        .ok_or_else(|| Error::diverged("initial rollout is not finite", None))?;

    let mut history = vec![cost];
    let mut reg = settings.reg_init;
    let mut converged = false;
    let mut iterations = 0;
    let mut models = solver.local_models(&traj);
    let mut models_stale = false;
    while iterations < settings.max_iterations {
        iterations += 1;
        let Some(bp) = solver.backward(&traj, &models, reg) else {
            reg *= settings.reg_factor;
            if reg > settings.reg_max {
                break;
            }
            continue;
        };
        // The cost cannot resolve the last few digits of the controls, so a
        // flat model only ends the loop once the step itself is small too.
        let flat = -(bp.d1 + bp.d2) <= settings.tolerance * cost.abs();
        let u_scale = 1.0 + traj.controls.iter().map(|u| u.amax()).fold(0.0, f64::max);
        let step = bp.k_ff.iter().map(|k| k.amax()).fold(0.0, f64::max);
        if flat && step <= settings.tolerance * u_scale {
            converged = true;
            iterations -= 1;
            break;
        }
        let accepted = match settings.fixed_step {
            Some(alpha) => solver.forward(&traj, &bp, alpha),
            None => line_search(&solver, &traj, &bp, cost),
        };
        match accepted {
            Some((new_traj, new_cost)) => {
                let improvement = (cost - new_cost) / cost.abs().max(f64::MIN_POSITIVE);
                traj = new_traj;
                cost = new_cost;
                history.push(cost);
                reg = (reg / settings.reg_factor).max(settings.reg_min);
                if improvement.abs() < settings.tolerance {
                    converged = true;
                    models_stale = true;
                    break;
                }
                models = solver.local_models(&traj);
            }
            None if flat => {
                converged = true;
                break;
            }
            None => {
                reg *= settings.reg_factor;
                if reg > settings.reg_max {
                    break;
                }
            }
        }
    }

    if models_stale {
        models = solver.local_models(&traj);
    }
    let costates = solver
        .backward(&traj, &models, settings.reg_min)
        .or_else(|| solver.backward(&traj, &models, reg))
        .map(|bp| bp.value_grad)
        .ok_or_else(|| Error::Numerical("costate pass failed at the final iterate".into()))?;
    Ok(DdpSolution {
        trajectory: traj,
        costates,
        total_cost: cost,
        converged,
        iterations,
        cost_history: history,
    })
}

fn line_search(
    solver: &Solver,
    traj: &DiscreteTrajectory,
    bp: &BackwardPass,
    cost: f64,
) -> Option<(DiscreteTrajectory, f64)> {
    let s = solver.settings;
    let mut alpha = 1.0;
    while alpha >= s.min_step {
        if let Some((cand, c)) = solver.forward(traj, bp, alpha) {
            let expected = -(alpha * bp.d1 + alpha * alpha * bp.d2);
            let actual = cost - c;
            if actual > 0.0 && actual >= s.armijo * expected {
                return Some((cand, c));
            }
        }
        alpha *= s.backtrack;
    }
    None
}

/// Resample a trajectory onto `new_n` steps spanning `new_tf`, with time
/// scaled by `old_tf/new_tf`: knot `i` reads the input at fraction
/// `i/new_n` of its horizon.
pub fn rescale_guess(traj: &DiscreteTrajectory, new_tf: f64, new_n: usize) -> DiscreteTrajectory {
    let old_n = traj.n_steps();
    let sample = |knots: &[DVector<f64>], i: usize, max_index: usize| {
        // Exact rational position i·old_n/new_n.
        let num = i * old_n;
        let idx = num / new_n;
        let rem = num % new_n;
        if idx >= max_index {
            return knots[max_index].clone();
        }
        if rem == 0 {
            return knots[idx].clone();
        }
        let w = rem as f64 / new_n as f64;
        // a + w·(b − a) leaves equal neighbours untouched.
        &knots[idx] + (&knots[idx + 1] - &knots[idx]) * w
    };
    let states = (0..=new_n).map(|i| sample(&traj.states, i, old_n)).collect();
    let controls = (0..new_n).map(|i| sample(&traj.controls, i, old_n - 1)).collect();
    DiscreteTrajectory { states, controls, dt: new_tf / new_n as f64 }
}

/// Solve on each step count of `schedule` in turn, warm-starting every level
/// from the one before it. Returns the last level's solution.
pub fn march_solve(
    model: &ModelSpec,
    cost: &CostSpec,
    x0: &StateVec,
    t_f: f64,
    schedule: &[usize],
    guess: &DiscreteTrajectory,
    settings: &DdpSettings,
) -> Result<DdpSolution> {
    if schedule.is_empty() || schedule.contains(&0) {
        return Err(Error::Contract("schedule must be a non-empty list of positive step counts".into()));
    }
    let mut best: Option<DdpSolution> = None;
    for (level, &n_steps) in schedule.iter().enumerate() {
        let problem = FixedTimeProblem { model, cost, x0: x0.clone(), t_f, n_steps };
        let warm = match &best {
            Some(prev) => rescale_guess(&prev.trajectory, t_f, n_steps),
            None => rescale_guess(guess, t_f, n_steps),
        };
        match solve_fixed_time(&problem, &warm, settings) {
            Ok(sol) => best = Some(sol),
            Err(Error::SolveDiverged { message, best: inner, .. }) => {
                return Err(Error::SolveDiverged {
                    message,
                    level: Some(level),
                    outer_iteration: None,
                    best: best.map(Box::new).or(inner),
                })
            }
            Err(e) => return Err(e),
        }
    }
    Ok(best.expect("schedule is non-empty"))
}
