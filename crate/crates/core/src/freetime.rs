//! Free-terminal-time outer loop: the terminal time is updated from the
//! integrated Hamiltonian of the current fixed-time solution, first by
//! clipped gradient steps and then by secant (quasi-Newton) steps, and the
//! converged value is rounded onto the unified `Δt` grid for a final solve.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::ddp::{march_solve, DdpSettings, DdpSolution, DiscreteTrajectory};
use crate::dynamics::{CostSpec, ModelSpec, StateVec};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FreeTimeSettings {
    /// Initial terminal-time estimate (s).
    pub t_f0: f64,
    /// Largest update as a fraction of the current terminal time.
    pub alpha: f64,
    /// Gradient magnitude at which the outer loop stops.
    pub eps: f64,
    /// Gradient magnitude below which secant steps replace gradient steps.
    pub eps0: f64,
    /// Unified time step of the final solution (s).
    pub dt: f64,
    pub max_iterations: usize,
}

impl Default for FreeTimeSettings {
    fn default() -> Self {
        Self {
            t_f0: 1.2,
            alpha: 0.2,
            eps: 1e-6,
            eps0: 0.3,
            dt: 5e-4,
            max_iterations: 100,
        }
    }
}

impl FreeTimeSettings {
    pub fn validate(&self) -> Result<()> {
        let ok = self.t_f0 > 0.0
            && self.alpha > 0.0
            && self.alpha <= 1.0
            && self.eps > 0.0
            && self.eps0 > 0.0
            && self.dt > 0.0
            && self.max_iterations > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config("free-time settings must be positive with alpha in (0, 1]".into()))
        }
    }

    /// Lower guard on the terminal time during iteration.
    pub fn t_f_min(&self) -> f64 {
        2.0 * self.dt
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpdateMode {
    Gd,
    Qn,
}

#[derive(Clone, Debug)]
pub struct FreeTimeSolution {
    /// Solution on the unified grid (`t_f / Δt` steps).
    pub solution: DdpSolution,
    pub t_f: f64,
    pub outer_iterations: usize,
    /// `(t_f, dC/dt_f)` for every outer iteration.
    pub gradient_history: Vec<(f64, f64)>,
    /// Outer loop reached the gradient threshold (or the lower time guard
    /// with a positive gradient) and the final solve converged.
    pub converged: bool,
}

impl FreeTimeSolution {
    pub fn trajectory(&self) -> &DiscreteTrajectory {
        &self.solution.trajectory
    }
}

/// `∫₀^{t_f} [L(x*, u*) + λ·f(x*, u*)] dt` by the trapezoidal rule on the
/// knots, with `λ` the solver's value gradient. The last knot reuses the
/// last control.
pub fn terminal_time_gradient(sol: &DdpSolution, cost: &CostSpec, model: &ModelSpec) -> Result<f64> {
    let traj = &sol.trajectory;
    let n_steps = traj.n_steps();
    if sol.costates.len() != n_steps + 1 {
        return Err(Error::Contract("solution has no costates for every knot".into()));
    }
    let n = model.state_dim();
    let mut f = vec![0.0; n];
    let mut hamiltonian = |k: usize| {
        let x = traj.states[k].as_slice();
        let u = traj.controls[k.min(n_steps - 1)].as_slice();
        model.field_into(x, u, &mut f);
        let lam = &sol.costates[k];
        cost.running_raw(model, x, u) + lam.iter().zip(&f).map(|(a, b)| a * b).sum::<f64>()
    };
    let mut integral = 0.5 * (hamiltonian(0) + hamiltonian(n_steps));
    for k in 1..n_steps {
        integral += hamiltonian(k);
    }
    Ok(integral * traj.dt)
}

/// One terminal-time update. The step size is capped so that the update
/// never exceeds `alpha·|t_f|`.
pub fn update_terminal_time(t_f: f64, t_f_prev: f64, g: f64, g_prev: f64, mode: UpdateMode, alpha: f64) -> Result<f64> {
    let direction = match mode {
        UpdateMode::Gd => g,
        UpdateMode::Qn => {
            if g == g_prev {
                return Err(Error::Numerical("secant update with equal gradients".into()));
            }
            (t_f - t_f_prev) / (g - g_prev) * g
        }
    };
    if direction == 0.0 {
        return Ok(t_f);
    }
    let step = (alpha * t_f.abs() / direction.abs()).min(1.0);
    Ok(t_f - step * direction)
}

/// Free-terminal-time solve from a cold (zero) start.
pub fn solve_free_time(
    model: &ModelSpec,
    cost: &CostSpec,
    x0: &StateVec,
    settings: &FreeTimeSettings,
    ddp: &DdpSettings,
    schedule: &[usize],
) -> Result<FreeTimeSolution> {
    solve_free_time_from(model, cost, x0, settings, ddp, schedule, None)
}

/// Free-terminal-time solve, optionally warm-started from `guess` (any
/// knot count; it is rescaled onto the first level).
pub fn solve_free_time_from(
    model: &ModelSpec,
    cost: &CostSpec,
    x0: &StateVec,
    settings: &FreeTimeSettings,
    ddp: &DdpSettings,
    schedule: &[usize],
    guess: Option<&DiscreteTrajectory>,
) -> Result<FreeTimeSolution> {
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("non-finite initial state".into()));
    }
    let finest = *schedule
        .last()
        .ok_or_else(|| Error::Contract("empty step-count schedule".into()))?;
    let t_min = settings.t_f_min();
    let mut t_f = settings.t_f0.max(t_min);
    let mut warm = match guess {
        Some(g) => g.clone(),
        None => DiscreteTrajectory::zeros(finest, t_f, model.state_dim(), model.control_dim()),
    };
    let mut gd = true;
    let mut prev: Option<(f64, f64)> = None;
    let mut history = Vec::new();
    let mut outer_converged = false;
    let mut outer = 0;
    while outer < settings.max_iterations {
        outer += 1;
        let sol = march_solve(model, cost, x0, t_f, schedule, &warm, ddp).map_err(|e| tag_outer(e, outer))?;
        let g = terminal_time_gradient(&sol, cost, model)?;
        history.push((t_f, g));
        warm = sol.trajectory;
        if !g.is_finite() {
            return Err(Error::SolveDiverged {
                message: "non-finite terminal-time gradient".into(),
                level: None,
                outer_iteration: Some(outer),
                best: None,
            });
        }
        if g.abs() < settings.eps || (t_f <= t_min && g > 0.0) {
            outer_converged = true;
            break;
        }
        // Secant steps once the gradient is small or has changed sign (the
        // optimum is then bracketed and capped gradient steps only bounce).
        if gd && (g.abs() < settings.eps0 || prev.is_some_and(|(_, gp): (f64, f64)| gp.signum() != g.signum())) {
            gd = false;
        }
        let mode = if gd { UpdateMode::Gd } else { UpdateMode::Qn };
        let (t_prev, g_prev) = prev.unwrap_or((t_f, g));
        let next = update_terminal_time(t_f, t_prev, g, g_prev, mode, settings.alpha)
            .or_else(|_| update_terminal_time(t_f, t_prev, g, g_prev, UpdateMode::Gd, settings.alpha))?;
        prev = Some((t_f, g));
        t_f = next.max(t_min);
    }

    let n_final = ((t_f / settings.dt).round() as usize).max(1);
    let t_star = n_final as f64 * settings.dt;
    let mut final_schedule = schedule.to_vec();
    if final_schedule.last() != Some(&n_final) {
        final_schedule.push(n_final);
    }
    let solution =
        march_solve(model, cost, x0, t_star, &final_schedule, &warm, ddp).map_err(|e| tag_outer(e, outer + 1))?;
    let converged = outer_converged && solution.converged;
    Ok(FreeTimeSolution {
        solution,
        t_f: t_star,
        outer_iterations: outer,
        gradient_history: history,
        converged,
    })
}

fn tag_outer(e: Error, outer: usize) -> Error {
    match e {
        Error::SolveDiverged { message, level, best, .. } => Error::SolveDiverged {
            message,
            level,
            outer_iteration: Some(outer),
            best,
        },
        other => other,
    }
}

/// Running-cost integral of a solution, without the terminal cost.
pub fn running_cost_integral(model: &ModelSpec, cost: &CostSpec, traj: &DiscreteTrajectory) -> f64 {
    traj.states
        .iter()
        .zip(&traj.controls)
        .map(|(x, u)| cost.running_raw(model, x.as_slice(), u.as_slice()))
        .sum::<f64>()
        * traj.dt
}

/// Initial state helper: `(q, 0)`.
pub fn rest_state(q: &[f64]) -> StateVec {
    let dof = q.len();
    DVector::from_fn(2 * dof, |i, _| if i < dof { q[i] } else { 0.0 })
}
