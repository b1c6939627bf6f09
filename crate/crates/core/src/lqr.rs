//! Finite-horizon LQR at the terminal equilibrium `(x_f, u_f)`.
//!
//! Gains are tabulated by remaining time on a uniform grid, switched off by a
//! sigmoid blend beyond `t_M`, and composed with a coordinate-wise logistic
//! saturation that fixes `u_f` with unit slope.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::ddp::step_jacobians;
use crate::dynamics::{ControlVec, CostSpec, ModelSpec, StateVec};
use crate::error::{Error, Result};

/// Time-varying LQR gains, entry `i` at remaining time `i·step`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TableRepr", into = "TableRepr")]
pub struct RiccatiTable {
    pub horizon: f64,
    pub step: f64,
    pub x_f: StateVec,
    pub u_f: ControlVec,
    pub feedforward: Vec<DVector<f64>>,
    pub gains: Vec<DMatrix<f64>>,
    pub values: Vec<DMatrix<f64>>,
}

/// Flat JSON form: matrices row-major.
#[derive(Serialize, Deserialize)]
struct TableRepr {
    horizon: f64,
    step: f64,
    x_f: Vec<f64>,
    u_f: Vec<f64>,
    feedforward: Vec<Vec<f64>>,
    gains: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

impl From<RiccatiTable> for TableRepr {
    fn from(t: RiccatiTable) -> Self {
        Self {
            horizon: t.horizon,
            step: t.step,
            x_f: t.x_f.as_slice().to_vec(),
            u_f: t.u_f.as_slice().to_vec(),
            feedforward: t.feedforward.iter().map(|k| k.as_slice().to_vec()).collect(),
            gains: t.gains.iter().map(row_major).collect(),
            values: t.values.iter().map(row_major).collect(),
        }
    }
}

impl TryFrom<TableRepr> for RiccatiTable {
    type Error = String;

    fn try_from(r: TableRepr) -> std::result::Result<Self, String> {
        let (n, m) = (r.x_f.len(), r.u_f.len());
        let entries = r.gains.len();
        if r.feedforward.len() != entries || r.values.len() != entries || entries == 0 {
            return Err("riccati table entry counts disagree".into());
        }
        if r.gains.iter().any(|g| g.len() != m * n)
            || r.values.iter().any(|p| p.len() != n * n)
            || r.feedforward.iter().any(|k| k.len() != m)
        {
            return Err("riccati table entry has the wrong size".into());
        }
        Ok(Self {
            horizon: r.horizon,
            step: r.step,
            x_f: DVector::from_vec(r.x_f),
            u_f: DVector::from_vec(r.u_f),
            feedforward: r.feedforward.into_iter().map(DVector::from_vec).collect(),
            gains: r.gains.iter().map(|g| DMatrix::from_row_slice(m, n, g)).collect(),
            values: r.values.iter().map(|p| DMatrix::from_row_slice(n, n, p)).collect(),
        })
    }
}

/// Discrete backward Riccati recursion for the dynamics linearized and the
/// running cost quadratized at `(x_f, u_f)`, terminal weight `2·r_f·I`.
pub fn build_riccati_table(model: &ModelSpec, cost: &CostSpec, horizon: f64, step: f64) -> Result<RiccatiTable> {
    if !(horizon > 0.0 && step > 0.0) {
        return Err(Error::Contract("riccati horizon and step must be positive".into()));
    }
    let steps_f = horizon / step;
    let steps = steps_f.round() as usize;
    if steps == 0 || (steps_f - steps as f64).abs() > 1e-9 * steps_f.max(1.0) {
        return Err(Error::Contract(format!("horizon {horizon} is not a multiple of step {step}")));
    }
    let (n, m) = (model.state_dim(), model.control_dim());
    let (a, b) = step_jacobians(model, &cost.x_f, &cost.u_f, step);
    let quad = cost.quadratics_raw(model, cost.x_f.as_slice(), cost.u_f.as_slice());
    let q = quad.lxx * step;
    let nx = quad.lxu * step;
    let r = quad.luu * step;

    let mut p = DMatrix::identity(n, n) * (2.0 * cost.r_f);
    let mut gains = Vec::with_capacity(steps + 1);
    let mut values = Vec::with_capacity(steps + 1);
    gains.push(DMatrix::zeros(m, n));
    values.push(p.clone());
    let bt = b.transpose();
    for i in 1..=steps {
        let s = &r + &bt * &p * &b;
        let rhs = &bt * &p * &a + nx.transpose();
        let chol = s
            .cholesky()
            .ok_or_else(|| Error::Numerical(format!("Riccati step {i}: control Hessian not positive definite")))?;
        let k = -chol.solve(&rhs);
        // Joseph form keeps P symmetric PSD to round-off.
        let closed = &a + &b * &k;
        let kt = k.transpose();
        let next = &q + &nx * &k + &kt * nx.transpose() + &kt * &r * &k + closed.transpose() * &p * &closed;
        p = (&next + next.transpose()) * 0.5;
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("Riccati step {i}: non-finite value matrix")));
        }
        gains.push(k);
        values.push(p.clone());
    }
    Ok(RiccatiTable {
        horizon,
        step,
        x_f: cost.x_f.clone(),
        u_f: cost.u_f.clone(),
        feedforward: vec![DVector::zeros(m); steps + 1],
        gains,
        values,
    })
}

impl RiccatiTable {
    pub fn len(&self) -> usize {
        self.gains.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gains.is_empty()
    }

    /// Raw gains at `remaining`, interpolated and clamped to the horizon.
    pub fn raw_gains(&self, remaining: f64) -> (DVector<f64>, DMatrix<f64>) {
        let last = self.len() - 1;
        let pos = (remaining.max(0.0) / self.step).min(last as f64);
        let i = (pos.floor() as usize).min(last);
        let w = pos - i as f64;
        if w == 0.0 || i == last {
            return (self.feedforward[i].clone(), self.gains[i].clone());
        }
        (
            &self.feedforward[i] * (1.0 - w) + &self.feedforward[i + 1] * w,
            &self.gains[i] * (1.0 - w) + &self.gains[i + 1] * w,
        )
    }
}

/// Gain ramp `s(t)`: one below `t_m`, zero above `t_M`, logistic between.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlendSchedule {
    pub t_m: f64,
    #[serde(rename = "t_M")]
    pub t_big_m: f64,
    pub eps: f64,
}

impl Default for BlendSchedule {
    fn default() -> Self {
        Self { t_m: 0.08, t_big_m: 0.8, eps: 1e-5 }
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

impl BlendSchedule {
    pub fn validate(&self) -> Result<()> {
        if 0.0 < self.t_m && self.t_m < self.t_big_m && 0.0 < self.eps && self.eps < 0.5 {
            Ok(())
        } else {
            Err(Error::Config("blend needs 0 < t_m < t_M and 0 < eps < 1/2".into()))
        }
    }

    /// Logit bounds with `Sigmoid(t_min) = ε` and `Sigmoid(t_max) = 1 − ε`.
    pub fn logit_bounds(&self) -> (f64, f64) {
        let t_min = (self.eps / (1.0 - self.eps)).ln();
        (t_min, -t_min)
    }

    pub fn weight(&self, t: f64) -> f64 {
        if t < self.t_m {
            1.0
        } else if t > self.t_big_m {
            0.0
        } else {
            let (lo, hi) = self.logit_bounds();
            sigmoid(-(t - self.t_m) * (hi - lo) / (self.t_big_m - self.t_m) + hi)
        }
    }
}

/// Blended gains `(s·k, s·K)` at remaining time `remaining`.
pub fn lookup_gains(table: &RiccatiTable, blend: &BlendSchedule, remaining: f64) -> (DVector<f64>, DMatrix<f64>) {
    let s = blend.weight(remaining);
    if s == 0.0 {
        let (n, m) = (table.x_f.len(), table.u_f.len());
        return (DVector::zeros(m), DMatrix::zeros(m, n));
    }
    let (k, kk) = table.raw_gains(remaining);
    if s == 1.0 {
        (k, kk)
    } else {
        (k * s, kk * s)
    }
}

/// `u_f + k̃(t̂_f) + K̃(t̂_f)·(x − x_f)`.
pub fn u_lqr(table: &RiccatiTable, blend: &BlendSchedule, x: &StateVec, tf_hat: f64) -> ControlVec {
    let (k, kk) = lookup_gains(table, blend, tf_hat);
    &table.u_f + k + kk * (x - &table.x_f)
}

/// Coordinate-wise logistic saturation with `σ(u₁) = u₁`, `σ'(u₁) = 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Saturation {
    pub u_min: Vec<f64>,
    pub u_max: Vec<f64>,
    pub u_1: Vec<f64>,
}

impl Saturation {
    pub fn new(u_min: f64, u_max: f64, u_f: &ControlVec) -> Result<Self> {
        let m = u_f.len();
        let sat = Self {
            u_min: vec![u_min; m],
            u_max: vec![u_max; m],
            u_1: u_f.as_slice().to_vec(),
        };
        sat.validate()?;
        Ok(sat)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.u_min.len() == self.u_1.len()
            && self.u_max.len() == self.u_1.len()
            && self
                .u_min
                .iter()
                .zip(&self.u_1)
                .zip(&self.u_max)
                .all(|((lo, mid), hi)| lo < mid && mid < hi);
        if ok {
            Ok(())
        } else {
            Err(Error::Config("saturation needs u_min < u_f < u_max in every coordinate".into()))
        }
    }

    fn coeffs(&self, i: usize) -> (f64, f64, f64) {
        let (lo, mid, hi) = (self.u_min[i], self.u_1[i], self.u_max[i]);
        let c1 = (hi - mid) / (mid - lo);
        let c2 = (hi - lo) / ((hi - mid) * (mid - lo));
        (c1, c2, hi - lo)
    }

    /// Written as `u₁ + Δ·(p(u) − p(u₁))` so that `u₁` maps to itself exactly.
    pub fn apply_scalar(&self, i: usize, u: f64) -> f64 {
        let (c1, c2, span) = self.coeffs(i);
        let p = 1.0 / (1.0 + c1 * (-c2 * (u - self.u_1[i])).exp());
        let p0 = 1.0 / (1.0 + c1);
        (self.u_1[i] + span * (p - p0)).clamp(self.u_min[i], self.u_max[i])
    }

    pub fn derivative_scalar(&self, i: usize, u: f64) -> f64 {
        let (c1, c2, span) = self.coeffs(i);
        let e = c1 * (-c2 * (u - self.u_1[i])).exp();
        if !e.is_finite() {
            return 0.0;
        }
        span * c2 * e / ((1.0 + e) * (1.0 + e))
    }

    pub fn apply(&self, u: &ControlVec) -> ControlVec {
        DVector::from_fn(u.len(), |i, _| self.apply_scalar(i, u[i]))
    }

    /// Diagonal Jacobian of [`Saturation::apply`].
    pub fn jacobian(&self, u: &ControlVec) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_fn(u.len(), |i, _| self.derivative_scalar(i, u[i])))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arm_table(horizon: f64) -> (RiccatiTable, CostSpec) {
        let model = ModelSpec::planar_arm(2);
        let cost = CostSpec::reach(&model, &[1.0, 0.5], 100.0, 0.025, 0.005, 2.5e5).unwrap();
        (build_riccati_table(&model, &cost, horizon, 0.01).unwrap(), cost)
    }

    #[test]
    fn zero_remaining_time_means_no_gain() {
        let (t, _) = arm_table(0.4);
        let (k, kk) = lookup_gains(&t, &BlendSchedule::default(), 0.0);
        assert_eq!(k.amax(), 0.0);
        assert_eq!(kk.amax(), 0.0);
    }

    #[test]
    fn beyond_t_big_m_gains_vanish() {
        let (t, cost) = arm_table(0.8);
        let blend = BlendSchedule::default();
        let (_, kk) = lookup_gains(&t, &blend, 0.85);
        assert_eq!(kk.amax(), 0.0);
        let x = DVector::from_vec(vec![0.3, 0.2, 1.0, -1.0]);
        assert_eq!(u_lqr(&t, &blend, &x, 5.0), cost.u_f);
    }

    #[test]
    fn below_t_m_gains_are_raw() {
        let (t, _) = arm_table(0.8);
        let (_, kk) = lookup_gains(&t, &BlendSchedule::default(), 0.04);
        assert_eq!(kk, t.raw_gains(0.04).1);
    }

    #[test]
    fn blend_hits_its_endpoints() {
        let b = BlendSchedule::default();
        assert!((b.weight(b.t_m) - (1.0 - b.eps)).abs() < 1e-12);
        assert!((b.weight(b.t_big_m) - b.eps).abs() < 1e-12);
        let mut prev = 1.0;
        for i in 0..=1000 {
            let w = b.weight(i as f64 * 1e-3);
            assert!(w <= prev);
            prev = w;
        }
    }

    #[test]
    fn saturation_fixes_u_f() {
        let u_f = DVector::from_vec(vec![14.7, -3.2]);
        let sat = Saturation::new(-2000.0, 2000.0, &u_f).unwrap();
        assert_eq!(sat.apply(&u_f), u_f);
        let j = sat.jacobian(&u_f);
        assert!((j[(0, 0)] - 1.0).abs() < 1e-12 && (j[(1, 1)] - 1.0).abs() < 1e-12);
        assert!((sat.apply_scalar(0, 20000.0) - 2000.0).abs() < 1e-3);
        assert!(sat.apply_scalar(1, -1e9) >= -2000.0);
    }

    #[test]
    fn table_json_round_trip() {
        let (t, _) = arm_table(0.1);
        let s = serde_json::to_string(&t).unwrap();
        let back: RiccatiTable = serde_json::from_str(&s).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn bad_horizon_is_rejected() {
        let model = ModelSpec::planar_arm(2);
        let cost = CostSpec::reach(&model, &[1.0, 0.5], 100.0, 0.025, 0.005, 2.5e5).unwrap();
        assert!(build_riccati_table(&model, &cost, 0.105, 0.01).is_err());
    }
}
