//! Closed-loop IVP simulation and the adaptive data-generation loops
//! (automatic resampling times and the fixed-fraction DAgger baseline).

use std::collections::{BTreeMap, HashSet};

use log::info;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::ddp::{DdpSettings, DiscreteTrajectory};
use crate::dynamics::{ControlVec, CostSpec, ModelSpec, StateVec};
use crate::error::{Error, Result};
use crate::freetime::{solve_free_time_from, FreeTimeSettings, FreeTimeSolution};
use crate::par;
use crate::policy::{train_policy, Architecture, Controller, Dataset, Ensemble, LqrBranch, Policy, TrainConfig, TrainingReport};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IvpSettings {
    pub dt_sim: f64,
    pub horizon: f64,
    /// Success radius around `x_f`.
    pub eps_succ: f64,
    /// States with a larger norm count as diverged.
    pub divergence_norm: f64,
}

impl Default for IvpSettings {
    fn default() -> Self {
        Self { dt_sim: 1e-3, horizon: 2.0, eps_succ: 1e-3, divergence_norm: 1e6 }
    }
}

impl IvpSettings {
    pub fn validate(&self) -> Result<()> {
        if self.dt_sim > 0.0 && self.horizon >= self.dt_sim && self.eps_succ > 0.0 && self.divergence_norm > 0.0 {
            Ok(())
        } else {
            Err(Error::Config("IVP settings must be positive with horizon ≥ dt_sim".into()))
        }
    }

    pub fn n_steps(&self) -> usize {
        (self.horizon / self.dt_sim).round() as usize
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IvpTrajectory {
    pub dt: f64,
    pub states: Vec<StateVec>,
    /// Control applied at each knot (the first RK4 stage's control).
    pub controls: Vec<ControlVec>,
    pub first_hit: Option<f64>,
    /// Trapezoidal running-cost integral from 0 to `first_hit`.
    pub realized_cost: Option<f64>,
    /// The rollout left the finite (or bounded) region and was truncated.
    pub diverged: bool,
}

impl IvpTrajectory {
    pub fn time(&self, knot: usize) -> f64 {
        knot as f64 * self.dt
    }

    pub fn succeeded(&self) -> bool {
        self.first_hit.is_some()
    }
}

/// Replays stored open-loop controls (zero-order hold), one trajectory per
/// batch column, then holds `u_f`.
pub struct ReplayController {
    pub trajectories: Vec<DiscreteTrajectory>,
    pub u_f: ControlVec,
}

impl Controller for ReplayController {
    fn control_dim(&self) -> usize {
        self.u_f.len()
    }

    fn controls(&self, t: f64, xs: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.u_f.len(), xs.ncols());
        for j in 0..xs.ncols() {
            let traj = &self.trajectories[j];
            let u = if t < traj.t_f() { traj.control_at(t) } else { self.u_f.clone() };
            out.set_column(j, &u);
        }
        out
    }
}

fn eval_field(model: &ModelSpec, xs: &DMatrix<f64>, us: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(xs.nrows(), xs.ncols());
    for j in 0..xs.ncols() {
        let x: Vec<f64> = xs.column(j).iter().copied().collect();
        let u: Vec<f64> = us.column(j).iter().copied().collect();
        let mut f = vec![0.0; xs.nrows()];
        model.field_into(&x, &u, &mut f);
        out.column_mut(j).copy_from_slice(&f);
    }
    out
}

/// Simulates every initial state in lockstep: one batched policy call per
/// RK4 stage.
pub fn simulate_batch(
    model: &ModelSpec,
    cost: &CostSpec,
    policy: &dyn Controller,
    x0s: &[StateVec],
    settings: &IvpSettings,
) -> Result<Vec<IvpTrajectory>> {
    settings.validate()?;
    let n = model.state_dim();
    if x0s.iter().any(|x| x.len() != n) {
        return Err(Error::Contract("initial state has the wrong dimension".into()));
    }
    let b = x0s.len();
    let h = settings.dt_sim;
    let steps = settings.n_steps();
    let mut x = DMatrix::from_fn(n, b, |i, j| x0s[j][i]);
    let mut alive = vec![true; b];
    let mut states: Vec<Vec<StateVec>> = x0s.iter().map(|x| vec![x.clone()]).collect();
    let mut controls: Vec<Vec<ControlVec>> = vec![Vec::with_capacity(steps + 1); b];
    let mut diverged = vec![false; b];
    for s in 0..steps {
        if !alive.iter().any(|&a| a) {
            break;
        }
        let t = s as f64 * h;
        let u1 = policy.controls(t, &x);
        let k1 = eval_field(model, &x, &u1);
        let x2 = &x + &k1 * (0.5 * h);
        let k2 = eval_field(model, &x2, &policy.controls(t + 0.5 * h, &x2));
        let x3 = &x + &k2 * (0.5 * h);
        let k3 = eval_field(model, &x3, &policy.controls(t + 0.5 * h, &x3));
        let x4 = &x + &k3 * h;
        // Left limit at the end of the step, so time-dependent controllers
        // that hold a value over an interval see the interval just finished.
        let k4 = eval_field(model, &x4, &policy.controls(t + h * (1.0 - 1e-6), &x4));
        let next = &x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        for j in 0..b {
            if !alive[j] {
                continue;
            }
            controls[j].push(u1.column(j).into_owned());
            let col = next.column(j);
            if col.iter().all(|v| v.is_finite()) && col.norm() <= settings.divergence_norm {
                states[j].push(col.into_owned());
                x.set_column(j, &col.into_owned());
            } else {
                alive[j] = false;
                diverged[j] = true;
                controls[j].pop();
            }
        }
    }
    // The last knot's control, for the quadrature.
    let last = DMatrix::from_fn(n, b, |i, j| states[j].last().map_or(0.0, |s| s[i]));
    let mut out = Vec::with_capacity(b);
    let u_last = policy.controls(steps as f64 * h, &last);
    for j in 0..b {
        let mut ctrl = std::mem::take(&mut controls[j]);
        ctrl.push(u_last.column(j).into_owned());
        out.push(finish(model, cost, h, std::mem::take(&mut states[j]), ctrl, diverged[j], settings.eps_succ));
    }
    Ok(out)
}

fn finish(
    model: &ModelSpec,
    cost: &CostSpec,
    dt: f64,
    states: Vec<StateVec>,
    controls: Vec<ControlVec>,
    diverged: bool,
    eps: f64,
) -> IvpTrajectory {
    let hit = states.iter().position(|x| (x - &cost.x_f).norm() <= eps);
    let realized_cost = hit.map(|k| {
        let l = |i: usize| cost.running_raw(model, states[i].as_slice(), controls[i].as_slice());
        (0..k).map(|i| 0.5 * (l(i) + l(i + 1)) * dt).sum()
    });
    IvpTrajectory {
        dt,
        first_hit: hit.map(|k| k as f64 * dt),
        realized_cost,
        states,
        controls,
        diverged,
    }
}

/// Single closed-loop rollout from `x0`.
pub fn simulate_ivp(
    model: &ModelSpec,
    cost: &CostSpec,
    policy: &dyn Controller,
    x0: &StateVec,
    settings: &IvpSettings,
) -> Result<IvpTrajectory> {
    Ok(simulate_batch(model, cost, policy, std::slice::from_ref(x0), settings)?.remove(0))
}

/// Running-cost integral of an optimal trajectory up to its first entry
/// into the success ball (the whole trajectory when it never enters), by
/// the same trapezoidal rule used for closed-loop rollouts.
pub fn optimal_cost(model: &ModelSpec, cost: &CostSpec, traj: &DiscreteTrajectory, eps: f64) -> f64 {
    let n = traj.n_steps();
    let end = traj.states.iter().position(|x| (x - &cost.x_f).norm() <= eps).unwrap_or(n);
    let l = |k: usize| {
        cost.running_raw(model, traj.states[k].as_slice(), traj.controls[k.min(n - 1)].as_slice())
    };
    (0..end).map(|k| 0.5 * (l(k) + l(k + 1)) * traj.dt).sum()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResampleState {
    pub knot: usize,
    pub t: f64,
    pub x: StateVec,
}

/// First simulation knot whose state is farther than `tau` from the
/// optimal path (interpolated, and `x_f` past its terminal time).
pub fn find_resample_state(
    ivp: &IvpTrajectory,
    opt: &DiscreteTrajectory,
    x_f: &StateVec,
    tau: f64,
) -> Option<ResampleState> {
    let t_f = opt.t_f();
    ivp.states.iter().enumerate().find_map(|(k, x)| {
        let t = ivp.time(k);
        let reference = if t <= t_f { opt.state_at(t) } else { x_f.clone() };
        ((x - reference).norm() > tau).then(|| ResampleState { knot: k, t, x: x.clone() })
    })
}

/// Everything needed to label a state with an open-loop solve.
#[derive(Clone, Debug)]
pub struct SolverConfig {
    pub model: ModelSpec,
    pub cost: CostSpec,
    pub ddp: DdpSettings,
    pub freetime: FreeTimeSettings,
    pub schedule: Vec<usize>,
}

impl SolverConfig {
    pub fn solve(&self, x0: &StateVec) -> Result<FreeTimeSolution> {
        solve_free_time_from(&self.model, &self.cost, x0, &self.freetime, &self.ddp, &self.schedule, None)
    }

    /// Warm-started solve from a terminal-time estimate and trajectory guess.
    pub fn solve_warm(&self, x0: &StateVec, t_f0: f64, guess: &DiscreteTrajectory) -> Result<FreeTimeSolution> {
        let settings = FreeTimeSettings { t_f0, ..self.freetime.clone() };
        solve_free_time_from(&self.model, &self.cost, x0, &settings, &self.ddp, &self.schedule, Some(guess))
    }
}

/// An initial training state with its optimal trajectory.
#[derive(Clone, Debug)]
pub struct OptimalPath {
    pub id: u64,
    pub x0: StateVec,
    pub trajectory: DiscreteTrajectory,
}

impl OptimalPath {
    pub fn t_f(&self) -> f64 {
        self.trajectory.t_f()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Strategy {
    /// Resample at the first `tau`-deviation from the optimal path.
    IvpArt { tau: f64 },
    /// Resample at fixed fractions of each path's optimal terminal time.
    Dagger { fractions: Vec<f64> },
}

impl Strategy {
    pub fn name(&self) -> &'static str {
        match self {
            Strategy::IvpArt { .. } => "ivp-art",
            Strategy::Dagger { .. } => "dagger",
        }
    }

    /// States from which new labels are requested for one rollout.
    pub fn select(&self, ivp: &IvpTrajectory, path: &OptimalPath, x_f: &StateVec) -> Vec<ResampleState> {
        match self {
            Strategy::IvpArt { tau } => find_resample_state(ivp, &path.trajectory, x_f, *tau).into_iter().collect(),
            Strategy::Dagger { fractions } => fractions
                .iter()
                .filter_map(|&f| {
                    let t = f * path.t_f();
                    let knot = (t / ivp.dt).round() as usize;
                    ivp.states.get(knot).map(|x| ResampleState { knot, t: ivp.time(knot), x: x.clone() })
                })
                .collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetMode {
    /// `D^k = D^{k−1} ∪ D̂^k`.
    Union,
    /// Records of a path after its resampling time (and earlier resampled
    /// trajectories from the same path) are replaced by the new labels.
    Replacement,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveConfig {
    pub iterations: usize,
    pub strategy: Strategy,
    pub mode: DatasetMode,
    pub ivp: IvpSettings,
    pub architecture: Architecture,
    pub train: TrainConfig,
    pub seed: u64,
}

/// Trajectory id of the `j`-th resample of path `root` in iteration `k`.
pub fn resample_id(k: usize, root: u64, j: usize) -> u64 {
    ((k as u64) << 40) | ((root & 0xffff_ffff) << 8) | (j as u64 & 0xff)
}

/// Path a trajectory id descends from.
pub fn root_of(id: u64) -> u64 {
    if id >> 40 == 0 {
        id
    } else {
        (id >> 8) & 0xffff_ffff
    }
}

/// Mixes a base seed with a tag and an index into an independent seed.
pub fn derive_seed(base: u64, tag: u64, index: u64) -> u64 {
    let mut z = base ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ index.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Clone, Debug)]
pub struct SampleEvent {
    pub root: u64,
    pub state: ResampleState,
    pub solved: bool,
}

#[derive(Clone, Debug)]
pub struct IterationState {
    pub k: usize,
    pub samples: Vec<SampleEvent>,
    pub dataset: Dataset,
    pub new_labels: Dataset,
    pub policy: Policy,
    pub training: TrainingReport,
    pub n_failed: usize,
}

#[derive(Clone, Debug)]
pub struct AdaptiveRun {
    pub iterations: Vec<IterationState>,
    pub ensemble: Ensemble,
}

/// Warm start for a resample solve from the tail of the original path:
/// terminal-time guess `t_f* − t`, floored at a quarter of `t_f*`.
pub fn resample_guess(path: &OptimalPath, t: f64, u_f: &ControlVec) -> (f64, DiscreteTrajectory) {
    let t_f = path.t_f();
    let guess_tf = (t_f - t).max(0.25 * t_f);
    let traj = &path.trajectory;
    let first = (t / traj.dt).round() as usize;
    let tail = if first < traj.n_steps() {
        traj.tail(first)
    } else {
        DiscreteTrajectory::constant(traj.n_steps().max(1), guess_tf, &traj.states[traj.n_steps()], u_f)
    };
    (guess_tf, tail)
}

/// Adaptive loop shared by both strategies: simulate the previous
/// policy from every path's initial state, label the selected states,
/// update the dataset and retrain from scratch.
#[allow(clippy::too_many_arguments)]
pub fn adaptive_run(
    solver: &SolverConfig,
    paths: &[OptimalPath],
    initial_data: &Dataset,
    val: &Dataset,
    lqr: &LqrBranch,
    initial_policy: &Policy,
    cfg: &AdaptiveConfig,
) -> Result<AdaptiveRun> {
    if paths.is_empty() || cfg.iterations == 0 {
        return Err(Error::Contract("need at least one initial state and one iteration".into()));
    }
    let x0s: Vec<StateVec> = paths.iter().map(|p| p.x0.clone()).collect();
    let x_f = solver.cost.x_f.clone();
    let mut dataset = initial_data.clone();
    let mut policy = initial_policy.clone();
    let mut iterations = Vec::with_capacity(cfg.iterations);
    for k in 1..=cfg.iterations {
        let rollouts = simulate_batch(&solver.model, &solver.cost, &policy, &x0s, &cfg.ivp)?;
        let mut requests = Vec::new();
        for (path, ivp) in paths.iter().zip(&rollouts) {
            for (j, state) in cfg.strategy.select(ivp, path, &x_f).into_iter().enumerate() {
                requests.push((path, j, state));
            }
        }
        let solved = par::map(&requests, |(path, _, state)| {
            let (t_f0, guess) = resample_guess(path, state.t, &solver.cost.u_f);
            solver.solve_warm(&state.x, t_f0, &guess).ok().filter(|s| s.converged)
        });
        let n_failed = solved.iter().filter(|s| s.is_none()).count();
        if !requests.is_empty() && n_failed == requests.len() {
            return Err(Error::IterationFailed { iteration: k, failures: n_failed });
        }

        let mut new_labels = Dataset::new();
        let mut cut: BTreeMap<u64, f64> = BTreeMap::new();
        let mut samples = Vec::with_capacity(requests.len());
        for ((path, j, state), sol) in requests.iter().zip(&solved) {
            if let Some(sol) = sol {
                new_labels.push_trajectory(resample_id(k, path.id, *j), k, sol.trajectory());
                let t = cut.entry(path.id).or_insert(state.t);
                *t = t.min(state.t);
            }
            samples.push(SampleEvent { root: path.id, state: state.clone(), solved: sol.is_some() });
        }
        match cfg.mode {
            DatasetMode::Union => dataset.union(&new_labels),
            DatasetMode::Replacement => {
                let t_f: BTreeMap<u64, f64> = paths.iter().map(|p| (p.id, p.t_f())).collect();
                dataset.retain(|r| {
                    let root = root_of(r.traj_id);
                    match cut.get(&root) {
                        None => true,
                        Some(&t_cut) if r.traj_id == root => t_f[&root] - r.t_remaining < t_cut - 1e-12,
                        Some(_) => false,
                    }
                });
                dataset.union(&new_labels);
            }
        }
        info!(
            "{} iteration {k}: {} samples, {} failed solves, {} records",
            cfg.strategy.name(),
            samples.len(),
            n_failed,
            dataset.len()
        );
        let seed = derive_seed(cfg.seed, 0x7261_696e, k as u64);
        let (next, training) = train_policy(cfg.architecture, &dataset, val, lqr.clone(), &cfg.train, seed)?;
        policy = next;
        iterations.push(IterationState {
            k,
            samples,
            dataset: dataset.clone(),
            new_labels,
            policy: policy.clone(),
            training,
            n_failed,
        });
    }
    let ensemble = Ensemble::new(iterations.iter().map(|it| it.policy.clone()).collect())?;
    Ok(AdaptiveRun { iterations, ensemble })
}

/// Distinct trajectory ids of a dataset.
pub fn trajectory_ids(data: &Dataset) -> HashSet<u64> {
    data.records.iter().map(|r| r.traj_id).collect()
}

/// Column of a batch as an owned vector.
pub fn column(m: &DMatrix<f64>, j: usize) -> DVector<f64> {
    m.column(j).into_owned()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(n: usize, dt: f64, slope: f64) -> IvpTrajectory {
        IvpTrajectory {
            dt,
            states: (0..=n).map(|k| DVector::from_vec(vec![slope * k as f64 * dt, 0.0])).collect(),
            controls: vec![DVector::zeros(1); n + 1],
            first_hit: None,
            realized_cost: None,
            diverged: false,
        }
    }

    #[test]
    fn identical_paths_never_resample() {
        let ivp = line(100, 0.01, 1.0);
        let opt = DiscreteTrajectory { states: ivp.states.clone(), controls: vec![DVector::zeros(1); 100], dt: 0.01 };
        let x_f = ivp.states[100].clone();
        assert!(find_resample_state(&ivp, &opt, &x_f, 1e-9).is_none());
    }

    #[test]
    fn linear_deviation_crosses_at_half() {
        // d(t) = 2t against a path resting at the origin, τ = 1.
        let ivp = line(100, 0.01, 2.0);
        let zero = DVector::zeros(2);
        let opt = DiscreteTrajectory::constant(100, 1.0, &zero, &DVector::zeros(1));
        let ev = find_resample_state(&ivp, &opt, &zero, 1.0).unwrap();
        assert!((ev.t - 0.5).abs() <= 0.01 + 1e-12);
        for k in 0..ev.knot {
            assert!(ivp.states[k].norm() <= 1.0);
        }
    }

    #[test]
    fn zero_threshold_fires_at_first_deviation() {
        let ivp = line(10, 0.1, 1.0);
        let zero = DVector::zeros(2);
        let opt = DiscreteTrajectory::constant(10, 1.0, &zero, &DVector::zeros(1));
        assert_eq!(find_resample_state(&ivp, &opt, &zero, 0.0).unwrap().knot, 1);
    }

    #[test]
    fn dagger_fractions_of_terminal_time() {
        let ivp = line(2000, 1e-3, 0.0);
        let zero = DVector::zeros(2);
        let path = OptimalPath { id: 0, x0: zero.clone(), trajectory: DiscreteTrajectory::constant(120, 1.2, &zero, &DVector::zeros(1)) };
        let s = Strategy::Dagger { fractions: vec![0.25, 0.75] }.select(&ivp, &path, &zero);
        assert!((s[0].t - 0.3).abs() < 1e-12 && (s[1].t - 0.9).abs() < 1e-12);
    }

    #[test]
    fn resample_ids_decode_to_their_root() {
        assert_eq!(root_of(17), 17);
        assert_eq!(root_of(resample_id(3, 17, 1)), 17);
        assert_ne!(resample_id(1, 17, 0), resample_id(2, 17, 0));
    }

    #[test]
    fn derived_seeds_differ() {
        assert_ne!(derive_seed(0, 1, 1), derive_seed(0, 1, 2));
        assert_eq!(derive_seed(5, 2, 3), derive_seed(5, 2, 3));
    }
}
