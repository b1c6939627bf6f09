//! Flattened `(x, t_remaining, u)` training records.

use std::collections::HashSet;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::ddp::DiscreteTrajectory;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub traj_id: u64,
    pub knot: usize,
    /// Time left to the trajectory's terminal time (s).
    pub t_remaining: f64,
    pub x: Vec<f64>,
    pub u: Vec<f64>,
    /// Generation round that produced the record (0 for the initial set).
    #[serde(default)]
    pub iteration: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub records: Vec<Record>,
}

impl Dataset {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn state_dim(&self) -> Option<usize> {
        self.records.first().map(|r| r.x.len())
    }

    pub fn control_dim(&self) -> Option<usize> {
        self.records.first().map(|r| r.u.len())
    }

    /// Knots `0..N` of `traj`; the terminal knot carries no control and is
    /// left out.
    pub fn push_trajectory(&mut self, traj_id: u64, iteration: usize, traj: &DiscreteTrajectory) {
        let n = traj.n_steps();
        let t_f = traj.t_f();
        for k in 0..n {
            self.records.push(Record {
                traj_id,
                knot: k,
                t_remaining: t_f - traj.time(k),
                x: traj.states[k].as_slice().to_vec(),
                u: traj.controls[k].as_slice().to_vec(),
                iteration,
            });
        }
    }

    /// Appends `other`, skipping `(traj_id, knot)` pairs already present.
    pub fn union(&mut self, other: &Dataset) {
        let mut seen: HashSet<(u64, usize)> = self.records.iter().map(|r| (r.traj_id, r.knot)).collect();
        for r in &other.records {
            if seen.insert((r.traj_id, r.knot)) {
                self.records.push(r.clone());
            }
        }
    }

    pub fn retain<F: FnMut(&Record) -> bool>(&mut self, f: F) {
        self.records.retain(f);
    }

    pub fn validate(&self) -> Result<()> {
        let (Some(n), Some(m)) = (self.state_dim(), self.control_dim()) else {
            return Err(Error::Contract("empty dataset".into()));
        };
        for r in &self.records {
            if r.x.len() != n || r.u.len() != m {
                return Err(Error::Contract(format!("record {}/{} has the wrong width", r.traj_id, r.knot)));
            }
            if !(r.t_remaining.is_finite() && r.x.iter().chain(&r.u).all(|v| v.is_finite())) {
                return Err(Error::Numerical(format!("record {}/{} is not finite", r.traj_id, r.knot)));
            }
        }
        Ok(())
    }

    /// One JSON object per line.
    pub fn write_ndjson<W: Write>(&self, mut w: W) -> Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_ndjson<R: BufRead>(r: R) -> Result<Self> {
        let mut records = Vec::new();
        for line in r.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str(&line)?);
        }
        Ok(Self { records })
    }
}
