//! Closed-loop evaluation: success rate and capped cost ratios.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::dynamics::{CostSpec, ModelSpec, StateVec};
use crate::error::{Error, Result};
use crate::policy::Controller;
use crate::sampling::{simulate_batch, IvpSettings};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatioCaps {
    /// Ratio assigned to failed rollouts.
    pub fail: f64,
    /// Ceiling for successful rollouts.
    pub success: f64,
}

impl Default for RatioCaps {
    fn default() -> Self {
        Self { fail: 10.0, success: 5.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub success_rate: f64,
    /// One capped ratio per test state, in input order.
    pub ratios: Vec<f64>,
    pub mean_ratio: f64,
    pub std_ratio: f64,
    pub n_fail: usize,
    pub n_diverged: usize,
}

/// Mean and population standard deviation.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len().max(1) as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Rolls `policy` out from every test state and compares the realized
/// running cost with the optimal one.
pub fn evaluate_policy(
    model: &ModelSpec,
    cost: &CostSpec,
    policy: &dyn Controller,
    test_states: &[StateVec],
    ivp: &IvpSettings,
    optimal_costs: &[f64],
    caps: RatioCaps,
) -> Result<Metrics> {
    if test_states.is_empty() {
        return Err(Error::Contract("no test states".into()));
    }
    if optimal_costs.len() != test_states.len() {
        return Err(Error::Contract(format!(
            "{} optimal costs for {} test states",
            optimal_costs.len(),
            test_states.len()
        )));
    }
    let rollouts = simulate_batch(model, cost, policy, test_states, ivp)?;
    let mut ratios = Vec::with_capacity(rollouts.len());
    let mut n_fail = 0;
    let mut n_diverged = 0;
    for (r, &opt) in rollouts.iter().zip(optimal_costs) {
        if r.diverged {
            n_diverged += 1;
        }
        match r.realized_cost {
            Some(c) => {
                let ratio = if opt > 0.0 { c / opt } else if c == 0.0 { 1.0 } else { caps.success };
                ratios.push(ratio.min(caps.success));
            }
            None => {
                n_fail += 1;
                ratios.push(caps.fail);
            }
        }
    }
    let (mean_ratio, std_ratio) = mean_std(&ratios);
    Ok(Metrics {
        success_rate: 1.0 - n_fail as f64 / ratios.len() as f64,
        ratios,
        mean_ratio,
        std_ratio,
        n_fail,
        n_diverged,
    })
}

/// Right-continuous empirical CDF: one point per distinct ratio, with the
/// fraction of ratios at or below it.
pub fn cost_ratio_cdf(ratios: &[f64]) -> Result<Vec<(f64, f64)>> {
    if ratios.is_empty() {
        return Err(Error::Contract("empty ratio list".into()));
    }
    if ratios.iter().any(|r| r.is_nan()) {
        return Err(Error::Numerical("NaN cost ratio".into()));
    }
    let mut sorted = ratios.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let mut out: Vec<(f64, f64)> = Vec::new();
    for (i, &r) in sorted.iter().enumerate() {
        let frac = (i + 1) as f64 / n;
        match out.last_mut() {
            Some(last) if last.0 == r => last.1 = frac,
            _ => out.push((r, frac)),
        }
    }
    Ok(out)
}

pub fn write_cdf_csv<W: Write>(points: &[(f64, f64)], w: W) -> Result<()> {
    let mut csv = csv::Writer::from_writer(w);
    csv.write_record(["ratio", "cumulative_fraction"])?;
    for (r, f) in points {
        csv.write_record([r.to_string(), f.to_string()])?;
    }
    csv.flush()?;
    Ok(())
}

/// One line of the metrics table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    /// Iteration index, or `ensemble`.
    pub iteration: String,
    pub strategy: String,
    pub seed: u64,
    pub success_rate: f64,
    pub mean_ratio: f64,
    pub std_ratio: f64,
    pub n_fail: usize,
    pub n_diverged: usize,
}

impl MetricsRow {
    pub fn new(iteration: impl Into<String>, strategy: &str, seed: u64, m: &Metrics) -> Self {
        Self {
            iteration: iteration.into(),
            strategy: strategy.to_string(),
            seed,
            success_rate: m.success_rate,
            mean_ratio: m.mean_ratio,
            std_ratio: m.std_ratio,
            n_fail: m.n_fail,
            n_diverged: m.n_diverged,
        }
    }
}

pub fn write_metrics_csv<W: Write>(rows: &[MetricsRow], w: W) -> Result<()> {
    let mut csv = csv::Writer::from_writer(w);
    for r in rows {
        csv.serialize(r)?;
    }
    if rows.is_empty() {
        csv.write_record([
            "iteration",
            "strategy",
            "seed",
            "success_rate",
            "mean_ratio",
            "std_ratio",
            "n_fail",
            "n_diverged",
        ])?;
    }
    csv.flush()?;
    Ok(())
}

pub fn read_metrics_csv<R: std::io::Read>(r: R) -> Result<Vec<MetricsRow>> {
    let mut csv = csv::Reader::from_reader(r);
    let rows = csv.deserialize().collect::<std::result::Result<Vec<MetricsRow>, _>>()?;
    Ok(rows)
}
