//! Initial-state sampling, dataset generation and on-disk formats.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ddp::DiscreteTrajectory;
use crate::dynamics::StateVec;
use crate::error::{Error, Result};
use crate::par;
use crate::policy::Dataset;
use crate::sampling::{OptimalPath, SolverConfig};

/// `(q, 0)` with `q` uniform in the cube of side `side` around `q_c`.
pub fn sample_initial_states(q_c: &[f64], side: f64, count: usize, seed: u64) -> Result<Vec<StateVec>> {
    if count == 0 {
        return Err(Error::Contract("sample count must be positive".into()));
    }
    if !(side >= 0.0) {
        return Err(Error::Config("cube side must be non-negative".into()));
    }
    let dof = q_c.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count)
        .map(|_| {
            DVector::from_fn(2 * dof, |i, _| {
                if i < dof {
                    let r: f64 = rng.random();
                    q_c[i] + side * (r - 0.5)
                } else {
                    0.0
                }
            })
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveRecord {
    pub id: u64,
    pub x0: Vec<f64>,
    pub converged: bool,
    pub t_f: Option<f64>,
    pub outer_iterations: Option<usize>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GenerationReport {
    pub solves: Vec<SolveRecord>,
    pub convergence_rate: f64,
}

/// One free-time solve per state (ids `first_id..`); converged solutions
/// become dataset records and optimal paths, failures are reported.
pub fn generate_dataset(
    states: &[StateVec],
    solver: &SolverConfig,
    first_id: u64,
) -> Result<(Dataset, Vec<OptimalPath>, GenerationReport)> {
    if states.is_empty() {
        return Err(Error::Contract("no states to label".into()));
    }
    let results = par::map(states, |x0| solver.solve(x0));
    let mut data = Dataset::new();
    let mut paths = Vec::new();
    let mut report = GenerationReport::default();
    for (i, (x0, res)) in states.iter().zip(results).enumerate() {
        let id = first_id + i as u64;
        let mut rec = SolveRecord {
            id,
            x0: x0.as_slice().to_vec(),
            converged: false,
            t_f: None,
            outer_iterations: None,
            error: None,
        };
        match res {
            Ok(sol) => {
                rec.t_f = Some(sol.t_f);
                rec.outer_iterations = Some(sol.outer_iterations);
                rec.converged = sol.converged;
                if sol.converged {
                    data.push_trajectory(id, 0, sol.trajectory());
                    paths.push(OptimalPath { id, x0: x0.clone(), trajectory: sol.solution.trajectory });
                } else {
                    rec.error = Some("did not converge".into());
                }
            }
            Err(e) => rec.error = Some(e.to_string()),
        }
        report.solves.push(rec);
    }
    report.convergence_rate = paths.len() as f64 / states.len() as f64;
    Ok((data, paths, report))
}

/// JSON form of an optimal path.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathRecord {
    pub id: u64,
    pub x0: Vec<f64>,
    pub dt: f64,
    pub states: Vec<Vec<f64>>,
    pub controls: Vec<Vec<f64>>,
}

impl From<&OptimalPath> for PathRecord {
    fn from(p: &OptimalPath) -> Self {
        Self {
            id: p.id,
            x0: p.x0.as_slice().to_vec(),
            dt: p.trajectory.dt,
            states: p.trajectory.states.iter().map(|v| v.as_slice().to_vec()).collect(),
            controls: p.trajectory.controls.iter().map(|v| v.as_slice().to_vec()).collect(),
        }
    }
}

impl PathRecord {
    pub fn into_path(self) -> Result<OptimalPath> {
        if self.states.len() != self.controls.len() + 1 || self.controls.is_empty() {
            return Err(Error::Contract(format!("path {} needs one more state than controls", self.id)));
        }
        Ok(OptimalPath {
            id: self.id,
            x0: DVector::from_vec(self.x0),
            trajectory: DiscreteTrajectory {
                states: self.states.into_iter().map(DVector::from_vec).collect(),
                controls: self.controls.into_iter().map(DVector::from_vec).collect(),
                dt: self.dt,
            },
        })
    }
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.flush()?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
}

pub fn write_paths(paths: &[OptimalPath], path: &Path) -> Result<()> {
    let records: Vec<PathRecord> = paths.iter().map(PathRecord::from).collect();
    write_json(&records, path)
}

pub fn read_paths(path: &Path) -> Result<Vec<OptimalPath>> {
    let records: Vec<PathRecord> = read_json(path)?;
    records.into_iter().map(PathRecord::into_path).collect()
}

pub fn write_dataset(data: &Dataset, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    data.write_ndjson(&mut w)?;
    w.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    Dataset::read_ndjson(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_side_collapses_to_center() {
        let s = sample_initial_states(&[0.2, 1.0], 0.0, 5, 3).unwrap();
        assert!(s.iter().all(|x| x.as_slice() == [0.2, 1.0, 0.0, 0.0]));
    }

    #[test]
    fn samples_stay_in_the_cube() {
        let s = sample_initial_states(&[0.0, 1.0], 1.0, 10_000, 9).unwrap();
        for x in &s {
            assert!((-0.5..=0.5).contains(&x[0]) && (0.5..=1.5).contains(&x[1]));
            assert_eq!((x[2], x[3]), (0.0, 0.0));
        }
    }

    #[test]
    fn seed_reproduces_sequence() {
        let a = sample_initial_states(&[0.0, 1.0], 1.0, 20, 42).unwrap();
        let b = sample_initial_states(&[0.0, 1.0], 1.0, 20, 42).unwrap();
        assert_eq!(a, b);
        assert!(sample_initial_states(&[0.0], 1.0, 0, 1).is_err());
    }
}
