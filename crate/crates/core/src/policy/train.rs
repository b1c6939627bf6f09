//! Supervised fitting of the control and time networks.
//!
//! Minibatch gradients are computed in fixed-size chunks (in parallel when
//! enabled) and summed in chunk order, so a given seed always produces the
//! same weights.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{adam_step, AdamConfig, AdamState};
use super::dataset::Dataset;
use super::mlp::{Mlp, Standardizer};
use super::qrnet::{Architecture, LqrBranch, Policy};
use crate::error::{Error, Result};
use crate::lqr::{lookup_gains, Saturation};
use crate::par;

const CHUNK: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Validation loss is checked every this many epochs; the best
    /// checkpoint is kept.
    pub val_every: usize,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 200, batch_size: 1024, val_every: 10, adam: AdamConfig::default() }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.val_every == 0 || !(self.adam.lr > 0.0) {
            return Err(Error::Config("training needs positive epochs, batch size, check interval and rate".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossCheck {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub control: Vec<LossCheck>,
    pub time: Vec<LossCheck>,
    pub best_control_epoch: usize,
    pub best_time_epoch: usize,
}

/// Loss `mean_j ‖pred_j − target_j‖²` of one network over fixed data.
trait Objective: Sync {
    fn len(&self) -> usize;
    /// Summed loss and summed parameter gradient over `cols`.
    fn chunk(&self, net: &Mlp, cols: &[usize]) -> (f64, Vec<f64>, Option<DVector<f64>>);
    /// Gradient through a shared reference input (the goal state), given
    /// the summed upstream for it.
    fn reference_grad(&self, _net: &Mlp, _upstream: &DVector<f64>, _grad: &mut [f64]) {}

    fn loss_and_grad(&self, net: &Mlp, cols: &[usize]) -> (f64, Vec<f64>) {
        let chunks: Vec<&[usize]> = cols.chunks(CHUNK).collect();
        let parts = par::map(&chunks, |c| self.chunk(net, c));
        let mut loss = 0.0;
        let mut grad = vec![0.0; net.n_params()];
        let mut goal: Option<DVector<f64>> = None;
        for (l, g, r) in parts {
            loss += l;
            for (a, b) in grad.iter_mut().zip(&g) {
                *a += b;
            }
            if let Some(r) = r {
                goal = Some(match goal {
                    Some(acc) => acc + r,
                    None => r,
                });
            }
        }
        if let Some(r) = goal {
            self.reference_grad(net, &r, &mut grad);
        }
        let scale = 1.0 / cols.len() as f64;
        grad.iter_mut().for_each(|g| *g *= scale);
        (loss * scale, grad)
    }

    fn loss(&self, net: &Mlp) -> f64;
}

fn columns(m: &DMatrix<f64>, cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), cols.len(), |i, j| m[(i, cols[j])])
}

struct ControlObjective<'a> {
    architecture: Architecture,
    inputs: DMatrix<f64>,
    targets: DMatrix<f64>,
    /// Unsaturated LQR branch at the record's own time-to-go.
    lqr_pre: DMatrix<f64>,
    goal: DMatrix<f64>,
    out: &'a Standardizer,
    saturation: &'a Saturation,
}

impl<'a> ControlObjective<'a> {
    fn new(policy: &'a Policy, data: &Dataset) -> Result<Self> {
        data.validate()?;
        let (n, m) = (policy.state_dim(), policy.control_dim());
        if data.state_dim() != Some(n) || data.control_dim() != Some(m) {
            return Err(Error::Contract("dataset dimensions disagree with the policy".into()));
        }
        let raw = DMatrix::from_fn(n, data.len(), |i, j| data.records[j].x[i]);
        let targets = DMatrix::from_fn(m, data.len(), |i, j| data.records[j].u[i]);
        let lqr = &policy.lqr;
        let mut lqr_pre = DMatrix::zeros(m, data.len());
        if policy.architecture == Architecture::Qrnet {
            for (j, r) in data.records.iter().enumerate() {
                let (k, kk) = lookup_gains(&lqr.riccati, &lqr.blend, r.t_remaining);
                let u = &lqr.riccati.u_f + k + kk * (raw.column(j) - &lqr.riccati.x_f);
                lqr_pre.set_column(j, &u);
            }
        }
        let goal = policy.scaled_inputs(&DMatrix::from_column_slice(n, 1, lqr.riccati.x_f.as_slice()));
        Ok(Self {
            architecture: policy.architecture,
            inputs: policy.scaled_inputs(&raw),
            targets,
            lqr_pre,
            goal,
            out: &policy.output_scaling,
            saturation: &lqr.saturation,
        })
    }

    /// Predictions and `d loss / d pred`-style upstream for the raw network
    /// outputs `y` of the columns `cols`; `goal_y` is the network at `x_f`.
    fn residuals(&self, y: &DMatrix<f64>, goal_y: &DVector<f64>, cols: &[usize]) -> (f64, DMatrix<f64>) {
        let m = y.nrows();
        let mut loss = 0.0;
        let mut upstream = DMatrix::zeros(m, cols.len());
        for (j, &c) in cols.iter().enumerate() {
            for i in 0..m {
                let s = self.out.std[i];
                let (pred, slope) = match self.architecture {
                    Architecture::Mlp => (s * y[(i, j)] + self.out.mean[i], s),
                    Architecture::Qrnet => {
                        let pre = self.lqr_pre[(i, c)] + s * (y[(i, j)] - goal_y[i]);
                        (self.saturation.apply_scalar(i, pre), s * self.saturation.derivative_scalar(i, pre))
                    }
                };
                let r = pred - self.targets[(i, c)];
                loss += r * r;
                upstream[(i, j)] = 2.0 * r * slope;
            }
        }
        (loss, upstream)
    }
}

impl Objective for ControlObjective<'_> {
    fn len(&self) -> usize {
        self.targets.ncols()
    }

    fn chunk(&self, net: &Mlp, cols: &[usize]) -> (f64, Vec<f64>, Option<DVector<f64>>) {
        let cache = net.forward_cached(columns(&self.inputs, cols));
        let goal_y = net.forward_batch(&self.goal).column(0).into_owned();
        let (loss, upstream) = self.residuals(cache.output(), &goal_y, cols);
        let mut grad = vec![0.0; net.n_params()];
        net.backward(&cache, &upstream, &mut grad);
        let goal = match self.architecture {
            Architecture::Qrnet => {
                let mut s = DVector::zeros(upstream.nrows());
                for col in upstream.column_iter() {
                    s -= col;
                }
                Some(s)
            }
            Architecture::Mlp => None,
        };
        (loss, grad, goal)
    }

    fn reference_grad(&self, net: &Mlp, upstream: &DVector<f64>, grad: &mut [f64]) {
        let cache = net.forward_cached(self.goal.clone());
        let up = DMatrix::from_column_slice(upstream.len(), 1, upstream.as_slice());
        net.backward(&cache, &up, grad);
    }

    fn loss(&self, net: &Mlp) -> f64 {
        let all: Vec<usize> = (0..self.len()).collect();
        let goal_y = net.forward_batch(&self.goal).column(0).into_owned();
        let chunks: Vec<&[usize]> = all.chunks(CHUNK).collect();
        let parts = par::map(&chunks, |c| {
            let y = net.forward_batch(&columns(&self.inputs, c));
            self.residuals(&y, &goal_y, c).0
        });
        parts.iter().sum::<f64>() / self.len().max(1) as f64
    }
}

struct TimeObjective {
    inputs: DMatrix<f64>,
    targets: Vec<f64>,
}

impl TimeObjective {
    fn new(policy: &Policy, data: &Dataset) -> Result<Self> {
        data.validate()?;
        let n = policy.state_dim();
        if data.state_dim() != Some(n) {
            return Err(Error::Contract("dataset dimensions disagree with the policy".into()));
        }
        let raw = DMatrix::from_fn(n, data.len(), |i, j| data.records[j].x[i]);
        Ok(Self {
            inputs: policy.scaled_inputs(&raw),
            targets: data.records.iter().map(|r| r.t_remaining).collect(),
        })
    }
}

impl Objective for TimeObjective {
    fn len(&self) -> usize {
        self.targets.len()
    }

    fn chunk(&self, net: &Mlp, cols: &[usize]) -> (f64, Vec<f64>, Option<DVector<f64>>) {
        let cache = net.forward_cached(columns(&self.inputs, cols));
        let y = cache.output();
        let mut loss = 0.0;
        let mut upstream = DMatrix::zeros(1, cols.len());
        for (j, &c) in cols.iter().enumerate() {
            let r = y[(0, j)] - self.targets[c];
            loss += r * r;
            upstream[(0, j)] = 2.0 * r;
        }
        let mut grad = vec![0.0; net.n_params()];
        net.backward(&cache, &upstream, &mut grad);
        (loss, grad, None)
    }

    fn loss(&self, net: &Mlp) -> f64 {
        let all: Vec<usize> = (0..self.len()).collect();
        let chunks: Vec<&[usize]> = all.chunks(CHUNK).collect();
        let parts = par::map(&chunks, |c| {
            let y = net.forward_batch(&columns(&self.inputs, c));
            c.iter()
                .enumerate()
                .map(|(j, &k)| (y[(0, j)] - self.targets[k]).powi(2))
                .sum::<f64>()
        });
        parts.iter().sum::<f64>() / self.len().max(1) as f64
    }
}

/// Mean control loss of `policy` on `data` and its gradient with respect
/// to the control network's flat parameters. The LQR branch uses each
/// record's own time-to-go.
pub fn control_loss_gradient(policy: &Policy, data: &Dataset) -> Result<(f64, Vec<f64>)> {
    let obj = ControlObjective::new(policy, data)?;
    let all: Vec<usize> = (0..obj.len()).collect();
    Ok(obj.loss_and_grad(&policy.control_net, &all))
}

/// Mean squared time-to-go error and its gradient for the time network.
pub fn time_loss_gradient(policy: &Policy, data: &Dataset) -> Result<(f64, Vec<f64>)> {
    let net = policy
        .time_net
        .as_ref()
        .ok_or_else(|| Error::Contract("policy has no time network".into()))?;
    let obj = TimeObjective::new(policy, data)?;
    let all: Vec<usize> = (0..obj.len()).collect();
    Ok(obj.loss_and_grad(net, &all))
}

/// Mean control loss evaluated through the policy's own forward pass.
pub fn control_loss(policy: &Policy, data: &Dataset) -> Result<f64> {
    data.validate()?;
    let n = policy.state_dim();
    let xs = DMatrix::from_fn(n, data.len(), |i, j| data.records[j].x[i]);
    let t = DVector::from_iterator(data.len(), data.records.iter().map(|r| r.t_remaining));
    let u = policy.controls_with(&xs, Some(&t));
    let mut loss = 0.0;
    for (j, r) in data.records.iter().enumerate() {
        for (i, target) in r.u.iter().enumerate() {
            loss += (u[(i, j)] - target).powi(2);
        }
    }
    Ok(loss / data.len() as f64)
}

fn fit<O: Objective>(
    net: &mut Mlp,
    train: &O,
    val: Option<&O>,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<LossCheck>, usize)> {
    let mut params = net.flat();
    let mut adam = AdamState::new(params.len());
    let check = |net: &Mlp, epoch: usize| -> Result<LossCheck> {
        let train_loss = train.loss(net);
        let val_loss = val.map_or(train_loss, |v| v.loss(net));
        if !(train_loss.is_finite() && val_loss.is_finite()) {
            return Err(Error::TrainingDiverged { epoch });
        }
        Ok(LossCheck { epoch, train_loss, val_loss })
    };
    let first = check(net, 0)?;
    let mut best = (first.val_loss, params.clone(), 0);
    let mut history = vec![first];
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(rng);
        for batch in order.chunks(cfg.batch_size) {
            let (loss, grad) = train.loss_and_grad(net, batch);
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::TrainingDiverged { epoch });
            }
            adam_step(&mut params, &grad, &mut adam, &cfg.adam);
            net.set_flat(&params)?;
        }
        if epoch % cfg.val_every == 0 || epoch == cfg.epochs {
            let c = check(net, epoch)?;
            if c.val_loss < best.0 {
                best = (c.val_loss, params.clone(), epoch);
            }
            history.push(c);
        }
    }
    net.set_flat(&best.1)?;
    Ok((history, best.2))
}

/// Fresh policy with Glorot-initialised networks and scalings fitted to
/// `train`.
pub fn init_policy(architecture: Architecture, train: &Dataset, lqr: LqrBranch, seed: u64) -> Result<Policy> {
    train.validate()?;
    let n = lqr.riccati.x_f.len();
    let m = lqr.riccati.u_f.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let control_net = Mlp::control_net(n, m, &mut rng)?;
    let time_net = match architecture {
        Architecture::Qrnet => Some(Mlp::time_net(n, &mut rng)?),
        Architecture::Mlp => None,
    };
    let input = Standardizer::fit(train.records.iter().map(|r| &r.x[..]), n)?;
    let output = Standardizer::fit(train.records.iter().map(|r| &r.u[..]), m)?;
    Policy::new(architecture, control_net, time_net, input, output, lqr, seed)
}

/// Trains a fresh policy on `train`, keeping the weights with the lowest
/// validation loss (training loss when `val` is empty).
pub fn train_policy(
    architecture: Architecture,
    train: &Dataset,
    val: &Dataset,
    lqr: LqrBranch,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(Policy, TrainingReport)> {
    cfg.validate()?;
    let mut policy = init_policy(architecture, train, lqr, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_5a3b1e);
    let has_val = !val.is_empty();
    let mut report = TrainingReport::default();

    let mut net = policy.control_net.clone();
    {
        let obj = ControlObjective::new(&policy, train)?;
        let val_obj = if has_val { Some(ControlObjective::new(&policy, val)?) } else { None };
        let (h, best) = fit(&mut net, &obj, val_obj.as_ref(), cfg, &mut rng)?;
        report.control = h;
        report.best_control_epoch = best;
    }
    policy.control_net = net;

    if let Some(mut tnet) = policy.time_net.clone() {
        let obj = TimeObjective::new(&policy, train)?;
        let val_obj = if has_val { Some(TimeObjective::new(&policy, val)?) } else { None };
        let (h, best) = fit(&mut tnet, &obj, val_obj.as_ref(), cfg, &mut rng)?;
        report.time = h;
        report.best_time_epoch = best;
        policy.time_net = Some(tnet);
    }
    policy.refresh();
    Ok((policy, report))
}
