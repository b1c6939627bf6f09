//! End-to-end benchmark: data generation, initial training, both adaptive
//! strategies and evaluation on held-out states.

use log::info;

use super::config::RunConfig;
use super::data::{generate_dataset, sample_initial_states, GenerationReport};
use super::metrics::{evaluate_policy, Metrics, MetricsRow, RatioCaps};
use crate::dynamics::StateVec;
use crate::error::{Error, Result};
use crate::policy::{train_policy, Architecture, Controller, Dataset, LqrBranch, Policy, TrainingReport};
use crate::sampling::{adaptive_run, derive_seed, optimal_cost, AdaptiveConfig, AdaptiveRun, IvpSettings, OptimalPath, SolverConfig, Strategy};

const TAG_TRAIN: u64 = 1;
const TAG_VAL: u64 = 2;
const TAG_TEST: u64 = 3;
const TAG_INIT: u64 = 4;

/// Id offsets keep trajectory ids of the three splits apart.
pub const VAL_ID_OFFSET: u64 = 1_000_000;
pub const TEST_ID_OFFSET: u64 = 2_000_000;

/// Labeled data shared by every strategy of one trial.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub seed: u64,
    pub paths: Vec<OptimalPath>,
    pub train: Dataset,
    pub val: Dataset,
    pub test_states: Vec<StateVec>,
    pub test_costs: Vec<f64>,
    pub test_paths: Vec<OptimalPath>,
    pub reports: [GenerationReport; 3],
    pub ivp: IvpSettings,
    pub lqr: LqrBranch,
}

/// Samples and labels the train, validation and test splits of a trial.
pub fn prepare(cfg: &RunConfig, seed: u64) -> Result<Prepared> {
    cfg.validate()?;
    let e = &cfg.experiment;
    let solver = cfg.solver_config()?;
    let draw = |tag, n| sample_initial_states(&e.q_c, e.cube_side, n, derive_seed(seed, tag, 0));
    let (train, paths, r_train) = generate_dataset(&draw(TAG_TRAIN, e.n_train)?, &solver, 0)?;
    if paths.is_empty() {
        return Err(Error::IterationFailed { iteration: 0, failures: e.n_train });
    }
    let (val, _, r_val) = if e.n_val > 0 {
        generate_dataset(&draw(TAG_VAL, e.n_val)?, &solver, VAL_ID_OFFSET)?
    } else {
        (Dataset::new(), Vec::new(), GenerationReport::default())
    };
    let (_, test_paths, r_test) = generate_dataset(&draw(TAG_TEST, e.n_test)?, &solver, TEST_ID_OFFSET)?;
    let mut ivp = cfg.sampling.ivp.clone();
    if let Some(f) = cfg.sampling.horizon_factor {
        let max_tf = paths.iter().map(OptimalPath::t_f).fold(0.0, f64::max);
        ivp.horizon = ((f * max_tf / ivp.dt_sim).ceil() * ivp.dt_sim).max(ivp.dt_sim);
    }
    let test_costs = test_paths
        .iter()
        .map(|p| optimal_cost(&solver.model, &solver.cost, &p.trajectory, ivp.eps_succ))
        .collect();
    info!(
        "seed {seed}: {} train paths, {} val records, {} test paths, horizon {:.3} s",
        paths.len(),
        val.len(),
        test_paths.len(),
        ivp.horizon
    );
    Ok(Prepared {
        seed,
        test_states: test_paths.iter().map(|p| p.x0.clone()).collect(),
        test_costs,
        test_paths,
        paths,
        train,
        val,
        reports: [r_train, r_val, r_test],
        ivp,
        lqr: cfg.lqr_branch()?,
    })
}

impl Prepared {
    pub fn evaluate(&self, cfg: &RunConfig, policy: &dyn Controller) -> Result<Metrics> {
        let caps = RatioCaps { fail: cfg.sampling.fail_ratio, success: cfg.sampling.success_cap };
        evaluate_policy(&cfg.model, &cfg.cost_spec()?, policy, &self.test_states, &self.ivp, &self.test_costs, caps)
    }

    /// The iteration-0 policy trained on the initial data.
    pub fn initial_policy(&self, cfg: &RunConfig, architecture: Architecture) -> Result<Policy> {
        Ok(self.train_initial(cfg, architecture)?.0)
    }

    pub fn train_initial(&self, cfg: &RunConfig, architecture: Architecture) -> Result<(Policy, TrainingReport)> {
        let seed = derive_seed(self.seed, TAG_INIT, 0);
        train_policy(architecture, &self.train, &self.val, self.lqr.clone(), &cfg.training, seed)
    }

    pub fn adaptive_config(&self, cfg: &RunConfig, strategy: Strategy, architecture: Architecture) -> AdaptiveConfig {
        AdaptiveConfig {
            iterations: cfg.sampling.iterations,
            strategy,
            mode: cfg.sampling.mode,
            ivp: self.ivp.clone(),
            architecture,
            train: cfg.training.clone(),
            seed: self.seed,
        }
    }

    pub fn run(
        &self,
        cfg: &RunConfig,
        solver: &SolverConfig,
        initial: &Policy,
        strategy: Strategy,
        architecture: Architecture,
    ) -> Result<AdaptiveRun> {
        let acfg = self.adaptive_config(cfg, strategy, architecture);
        adaptive_run(solver, &self.paths, &self.train, &self.val, &self.lqr, initial, &acfg)
    }
}

/// Metrics rows of one strategy: iteration 0, every adaptive iteration and
/// the ensemble.
pub fn strategy_rows(
    cfg: &RunConfig,
    prepared: &Prepared,
    initial_metrics: &Metrics,
    run: &AdaptiveRun,
    name: &str,
) -> Result<Vec<MetricsRow>> {
    let seed = prepared.seed;
    let mut rows = vec![MetricsRow::new("0", name, seed, initial_metrics)];
    for it in &run.iterations {
        let m = prepared.evaluate(cfg, &it.policy)?;
        rows.push(MetricsRow::new(it.k.to_string(), name, seed, &m));
    }
    let m = prepared.evaluate(cfg, &run.ensemble)?;
    rows.push(MetricsRow::new("ensemble", name, seed, &m));
    Ok(rows)
}

/// Runs the given strategies for every configured seed and returns the
/// metrics table.
pub fn run_benchmark(cfg: &RunConfig, strategies: &[Strategy], architecture: Architecture) -> Result<Vec<MetricsRow>> {
    let solver = cfg.solver_config()?;
    let mut rows = Vec::new();
    for &seed in &cfg.experiment.seeds {
        let prepared = prepare(cfg, seed)?;
        let initial = prepared.initial_policy(cfg, architecture)?;
        let m0 = prepared.evaluate(cfg, &initial)?;
        for strategy in strategies {
            let run = prepared.run(cfg, &solver, &initial, strategy.clone(), architecture)?;
            let name = match architecture {
                Architecture::Qrnet => strategy.name().to_string(),
                Architecture::Mlp => format!("{}-mlp", strategy.name()),
            };
            let r = strategy_rows(cfg, &prepared, &m0, &run, &name)?;
            for row in &r {
                info!(
                    "seed {seed} {} it {}: success {:.2}, ratio {:.3}",
                    row.strategy, row.iteration, row.success_rate, row.mean_ratio
                );
            }
            rows.extend(r);
        }
    }
    Ok(rows)
}
