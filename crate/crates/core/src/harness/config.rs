//! Run configuration (JSON). Every section has defaults; a file only needs
//! the fields it changes.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ddp::DdpSettings;
use crate::dynamics::{CostSpec, ModelSpec};
use crate::error::{Error, Result};
use crate::freetime::FreeTimeSettings;
use crate::lqr::{build_riccati_table, BlendSchedule, Saturation};
use crate::policy::{Architecture, LqrBranch, TrainConfig};
use crate::sampling::{DatasetMode, IvpSettings, SolverConfig, Strategy};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostSection {
    /// Terminal configuration; the terminal velocity is zero.
    pub q_f: Vec<f64>,
    pub r_t: f64,
    pub r_u: f64,
    pub r_a: f64,
    pub r_f: f64,
}

impl Default for CostSection {
    fn default() -> Self {
        Self { q_f: vec![1.0, 0.5], r_t: 100.0, r_u: 0.025, r_a: 0.005, r_f: 2.5e5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverSection {
    pub ddp: DdpSettings,
    pub freetime: FreeTimeSettings,
    /// Step counts of the marching schedule, coarse to fine.
    pub schedule: Vec<usize>,
}

impl Default for SolverSection {
    fn default() -> Self {
        Self { ddp: DdpSettings::default(), freetime: FreeTimeSettings::default(), schedule: vec![150, 300, 450, 600, 750, 900, 1200, 1500, 1750] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LqrSection {
    /// Riccati table horizon (s).
    pub horizon: f64,
    /// Riccati table grid step (s).
    pub step: f64,
    pub blend: BlendSchedule,
    pub u_min: f64,
    pub u_max: f64,
}

impl Default for LqrSection {
    fn default() -> Self {
        Self { horizon: 0.8, step: 5e-4, blend: BlendSchedule::default(), u_min: -2000.0, u_max: 2000.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingSection {
    pub tau: f64,
    pub iterations: usize,
    pub mode: DatasetMode,
    pub dagger_fractions: Vec<f64>,
    pub ivp: IvpSettings,
    /// When set, the IVP horizon is this multiple of the largest optimal
    /// terminal time in the training data.
    pub horizon_factor: Option<f64>,
    /// Cost-ratio ceiling for failures and for successes.
    pub fail_ratio: f64,
    pub success_cap: f64,
}

impl Default for SamplingSection {
    fn default() -> Self {
        Self {
            tau: 1.0,
            iterations: 6,
            mode: DatasetMode::Union,
            dagger_fractions: vec![0.25, 0.75],
            ivp: IvpSettings::default(),
            horizon_factor: None,
            fail_ratio: 10.0,
            success_cap: 5.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentSection {
    /// Center of the initial-configuration cube.
    pub q_c: Vec<f64>,
    pub cube_side: f64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub seed: u64,
    /// Seeds of the repeated trials.
    pub seeds: Vec<u64>,
    pub architecture: Architecture,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            q_c: vec![0.0, 1.0],
            cube_side: 1.0,
            n_train: 500,
            n_val: 100,
            n_test: 100,
            seed: 0,
            seeds: vec![0, 1, 2],
            architecture: Architecture::Qrnet,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelSpec,
    pub cost: CostSection,
    pub solver: SolverSection,
    pub lqr: LqrSection,
    pub training: TrainConfig,
    pub sampling: SamplingSection,
    pub experiment: ExperimentSection,
}

impl Default for RunConfig {
    /// Full-scale settings on a 2-link arm.
    fn default() -> Self {
        Self {
            model: ModelSpec::planar_arm(2),
            cost: CostSection::default(),
            solver: SolverSection::default(),
            lqr: LqrSection::default(),
            training: TrainConfig::default(),
            sampling: SamplingSection::default(),
            experiment: ExperimentSection::default(),
        }
    }
}

impl RunConfig {
    /// Desk-scale 2-link benchmark: coarser grids, fewer samples and
    /// epochs, three adaptive iterations.
    pub fn benchmark() -> Self {
        let mut c = Self::default();
        c.solver.freetime.dt = 0.01;
        c.solver.freetime.t_f0 = 0.6;
        c.solver.schedule = vec![25, 50];
        c.lqr.step = 0.01;
        c.training.epochs = 100;
        c.training.batch_size = 256;
        c.sampling.iterations = 3;
        c.sampling.tau = 0.3;
        c.sampling.ivp.dt_sim = 2e-3;
        c.sampling.horizon_factor = Some(1.5);
        c.experiment.n_train = 100;
        c.experiment.n_val = 30;
        c.experiment.n_test = 100;
        c
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.cost_spec()?;
        self.solver.ddp.validate()?;
        self.solver.freetime.validate()?;
        if self.solver.schedule.is_empty() || self.solver.schedule.contains(&0) {
            return Err(Error::Config("schedule must list positive step counts".into()));
        }
        self.lqr.blend.validate()?;
        self.training.validate()?;
        self.sampling.ivp.validate()?;
        let s = &self.sampling;
        if !(s.tau > 0.0) || s.iterations == 0 || s.dagger_fractions.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(Error::Config("sampling needs τ > 0, K ≥ 1 and fractions in [0, 1]".into()));
        }
        if s.horizon_factor.is_some_and(|f| !(f > 0.0)) || !(s.fail_ratio >= s.success_cap && s.success_cap >= 1.0) {
            return Err(Error::Config("bad horizon factor or ratio caps".into()));
        }
        let e = &self.experiment;
        if e.q_c.len() != self.model.dof() || !(e.cube_side >= 0.0) || e.n_train == 0 || e.n_test == 0 {
            return Err(Error::Config("experiment cube must match the model and counts be positive".into()));
        }
        Ok(())
    }

    pub fn cost_spec(&self) -> Result<CostSpec> {
        let c = &self.cost;
        CostSpec::reach(&self.model, &c.q_f, c.r_t, c.r_u, c.r_a, c.r_f)
    }

    pub fn solver_config(&self) -> Result<SolverConfig> {
        Ok(SolverConfig {
            model: self.model.clone(),
            cost: self.cost_spec()?,
            ddp: self.solver.ddp.clone(),
            freetime: self.solver.freetime.clone(),
            schedule: self.solver.schedule.clone(),
        })
    }

    pub fn lqr_branch(&self) -> Result<LqrBranch> {
        let cost = self.cost_spec()?;
        let riccati = build_riccati_table(&self.model, &cost, self.lqr.horizon, self.lqr.step)?;
        let saturation = Saturation::new(self.lqr.u_min, self.lqr.u_max, &cost.u_f)?;
        Ok(LqrBranch { riccati, blend: self.lqr.blend, saturation })
    }

    pub fn ivp_art(&self) -> Strategy {
        Strategy::IvpArt { tau: self.sampling.tau }
    }

    pub fn dagger(&self) -> Strategy {
        Strategy::Dagger { fractions: self.sampling.dagger_fractions.clone() }
    }
}
