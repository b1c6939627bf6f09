//! QRnet and plain-MLP feedback policies.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::mlp::{Mlp, Standardizer};
use super::Controller;
use crate::dynamics::{ControlVec, StateVec};
use crate::error::{Error, Result};
use crate::lqr::{lookup_gains, u_lqr, BlendSchedule, RiccatiTable, Saturation};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    /// `σ(u_LQR(x, t̂_f) + NN(x) − NN(x_f))`.
    Qrnet,
    /// `NN(x)` alone.
    Mlp,
}

/// LQR pieces of a QRnet policy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LqrBranch {
    pub riccati: RiccatiTable,
    pub blend: BlendSchedule,
    pub saturation: Saturation,
}

/// A trained (or freshly initialised) policy. The control network sees
/// standardized states and its outputs are scaled back by `output_scaling`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    pub architecture: Architecture,
    pub control_net: Mlp,
    pub time_net: Option<Mlp>,
    pub input_scaling: Standardizer,
    pub output_scaling: Standardizer,
    pub lqr: LqrBranch,
    pub seed: u64,
    #[serde(skip)]
    nn_at_goal: Option<ControlVec>,
}

impl Policy {
    pub fn new(
        architecture: Architecture,
        control_net: Mlp,
        time_net: Option<Mlp>,
        input_scaling: Standardizer,
        output_scaling: Standardizer,
        lqr: LqrBranch,
        seed: u64,
    ) -> Result<Self> {
        let n = lqr.riccati.x_f.len();
        let m = lqr.riccati.u_f.len();
        if control_net.input_dim() != n
            || control_net.output_dim() != m
            || input_scaling.dim() != n
            || output_scaling.dim() != m
        {
            return Err(Error::Contract("policy networks disagree with the problem dimensions".into()));
        }
        if architecture == Architecture::Qrnet && time_net.as_ref().is_none_or(|t| t.input_dim() != n || t.output_dim() != 1) {
            return Err(Error::Contract("a QRnet policy needs a state-to-time network".into()));
        }
        let mut p = Self {
            architecture,
            control_net,
            time_net,
            input_scaling,
            output_scaling,
            lqr,
            seed,
            nn_at_goal: None,
        };
        p.refresh();
        Ok(p)
    }

    /// Recomputes the cached `NN(x_f)`; call after changing weights.
    pub fn refresh(&mut self) {
        let goal = DMatrix::from_column_slice(self.state_dim(), 1, self.lqr.riccati.x_f.as_slice());
        self.nn_at_goal = Some(self.raw_nn(&goal).column(0).into_owned());
    }

    pub fn state_dim(&self) -> usize {
        self.lqr.riccati.x_f.len()
    }

    pub fn control_dim(&self) -> usize {
        self.lqr.riccati.u_f.len()
    }

    pub fn x_f(&self) -> &StateVec {
        &self.lqr.riccati.x_f
    }

    /// Standardized copy of a state batch.
    pub(crate) fn scaled_inputs(&self, xs: &DMatrix<f64>) -> DMatrix<f64> {
        let mut z = xs.clone();
        self.input_scaling.normalize(&mut z);
        z
    }

    /// `NN(x)` in control units for every column.
    fn raw_nn(&self, xs: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = self.control_net.forward_batch(&self.scaled_inputs(xs));
        self.output_scaling.denormalize(&mut out);
        out
    }

    fn nn_goal(&self) -> ControlVec {
        match &self.nn_at_goal {
            Some(v) => v.clone(),
            None => {
                let goal = DMatrix::from_column_slice(self.state_dim(), 1, self.x_f().as_slice());
                self.raw_nn(&goal).column(0).into_owned()
            }
        }
    }

    /// Predicted time-to-go for every column.
    pub fn time_to_go_batch(&self, xs: &DMatrix<f64>) -> Option<DVector<f64>> {
        let net = self.time_net.as_ref()?;
        let out = net.forward_batch(&self.scaled_inputs(xs));
        Some(out.row(0).transpose())
    }

    pub fn time_to_go(&self, x: &StateVec) -> Option<f64> {
        let xs = DMatrix::from_column_slice(x.len(), 1, x.as_slice());
        self.time_to_go_batch(&xs).map(|t| t[0])
    }

    fn check_state(&self, x: &StateVec) -> Result<()> {
        if x.len() != self.state_dim() {
            return Err(Error::Contract(format!("expected a {}-state, got {}", self.state_dim(), x.len())));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("non-finite state".into()));
        }
        Ok(())
    }

    /// Control at `x`. With `tf_override` the LQR branch uses that time-to-go
    /// instead of the time network's prediction.
    pub fn control(&self, x: &StateVec, tf_override: Option<f64>) -> Result<ControlVec> {
        self.check_state(x)?;
        let xs = DMatrix::from_column_slice(x.len(), 1, x.as_slice());
        Ok(self.controls_with(&xs, tf_override.map(|t| DVector::from_element(1, t)).as_ref())
            .column(0)
            .into_owned())
    }

    /// Batched control; `remaining` (one entry per column) overrides the
    /// time network.
    pub fn controls_with(&self, xs: &DMatrix<f64>, remaining: Option<&DVector<f64>>) -> DMatrix<f64> {
        let mut nn = self.raw_nn(xs);
        if self.architecture == Architecture::Mlp {
            return nn;
        }
        let goal = self.nn_goal();
        let predicted;
        let t_hat = match remaining {
            Some(t) => t,
            None => {
                predicted = self.time_to_go_batch(xs).unwrap_or_else(|| DVector::zeros(xs.ncols()));
                &predicted
            }
        };
        let lqr = &self.lqr;
        for (j, mut col) in nn.column_iter_mut().enumerate() {
            let (k, kk) = lookup_gains(&lqr.riccati, &lqr.blend, t_hat[j]);
            let dx = xs.column(j) - &lqr.riccati.x_f;
            let pre = &lqr.riccati.u_f + k + kk * dx + (&col - &goal);
            for i in 0..pre.len() {
                col[i] = lqr.saturation.apply_scalar(i, pre[i]);
            }
        }
        nn
    }

    /// The pure LQR branch, saturated: what the policy reduces to when the
    /// network residual is zero.
    pub fn lqr_control(&self, x: &StateVec, remaining: f64) -> ControlVec {
        self.lqr.saturation.apply(&u_lqr(&self.lqr.riccati, &self.lqr.blend, x, remaining))
    }
}

impl Controller for Policy {
    fn control_dim(&self) -> usize {
        self.control_dim()
    }

    fn controls(&self, _t: f64, xs: &DMatrix<f64>) -> DMatrix<f64> {
        self.controls_with(xs, None)
    }
}

/// Average of member policies' controls.
#[derive(Clone, Debug)]
pub struct Ensemble {
    pub members: Vec<Policy>,
}

impl Ensemble {
    pub fn new(members: Vec<Policy>) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::Contract("an ensemble needs at least one member".into()));
        }
        Ok(Self { members })
    }

    pub fn control(&self, x: &StateVec) -> Result<ControlVec> {
        let mut acc = self.members[0].control(x, None)?;
        for p in &self.members[1..] {
            acc += p.control(x, None)?;
        }
        Ok(acc / self.members.len() as f64)
    }
}

impl Controller for Ensemble {
    fn control_dim(&self) -> usize {
        self.members[0].control_dim()
    }

    fn controls(&self, t: f64, xs: &DMatrix<f64>) -> DMatrix<f64> {
        let mut acc = self.members[0].controls(t, xs);
        for p in &self.members[1..] {
            acc += p.controls(t, xs);
        }
        acc / self.members.len() as f64
    }
}

/// Mean of the members' controls at `x`.
pub fn ensemble_forward(members: &[Policy], x: &StateVec) -> Result<ControlVec> {
    Ensemble::new(members.to_vec())?.control(x)
}
