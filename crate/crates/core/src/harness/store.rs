//! Run directories: the labeled splits of a trial and the per-iteration
//! artifacts of an adaptive run.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::data::{read_dataset, read_json, read_paths, write_dataset, write_json, write_paths, GenerationReport};
use super::experiment::Prepared;
use super::metrics::{write_metrics_csv, MetricsRow};
use crate::error::Result;
use crate::policy::save_checkpoint;
use crate::sampling::{IterationState, IvpSettings};

const TRAIN: &str = "train.ndjson";
const VAL: &str = "val.ndjson";
const TRAIN_PATHS: &str = "train_paths.json";
const TEST_PATHS: &str = "test_paths.json";
const SUMMARY: &str = "prepared.json";

/// Everything of a [`Prepared`] that is not stored in its own file.
#[derive(Clone, Debug, Serialize, Deserialize)]
struct Summary {
    seed: u64,
    ivp: IvpSettings,
    test_costs: Vec<f64>,
    reports: [GenerationReport; 3],
}

pub fn save_prepared(p: &Prepared, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_dataset(&p.train, &dir.join(TRAIN))?;
    write_dataset(&p.val, &dir.join(VAL))?;
    write_paths(&p.paths, &dir.join(TRAIN_PATHS))?;
    write_paths(&p.test_paths, &dir.join(TEST_PATHS))?;
    let summary = Summary { seed: p.seed, ivp: p.ivp.clone(), test_costs: p.test_costs.clone(), reports: p.reports.clone() };
    write_json(&summary, &dir.join(SUMMARY))
}

/// Reads a directory written by [`save_prepared`]; the LQR branch is rebuilt
/// from `cfg`.
pub fn load_prepared(cfg: &RunConfig, dir: &Path) -> Result<Prepared> {
    let s: Summary = read_json(&dir.join(SUMMARY))?;
    let test_paths = read_paths(&dir.join(TEST_PATHS))?;
    Ok(Prepared {
        seed: s.seed,
        paths: read_paths(&dir.join(TRAIN_PATHS))?,
        train: read_dataset(&dir.join(TRAIN))?,
        val: read_dataset(&dir.join(VAL))?,
        test_states: test_paths.iter().map(|p| p.x0.clone()).collect(),
        test_costs: s.test_costs,
        test_paths,
        reports: s.reports,
        ivp: s.ivp,
        lqr: cfg.lqr_branch()?,
    })
}

#[derive(Serialize)]
struct SampleLine<'a> {
    root: u64,
    knot: usize,
    t: f64,
    x: &'a [f64],
    solved: bool,
}

/// Writes `iter_<k>/` under `dir`: sample states, new labels, checkpoint,
/// training report and the iteration's metrics row.
pub fn save_iteration(it: &IterationState, row: Option<&MetricsRow>, dir: &Path) -> Result<()> {
    let d = dir.join(format!("iter_{}", it.k));
    fs::create_dir_all(&d)?;
    let mut w = BufWriter::new(File::create(d.join("samples.ndjson"))?);
    for s in &it.samples {
        let line = SampleLine { root: s.root, knot: s.state.knot, t: s.state.t, x: s.state.x.as_slice(), solved: s.solved };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    write_dataset(&it.new_labels, &d.join("labels.ndjson"))?;
    save_checkpoint(&it.policy, &d.join("policy.json"))?;
    write_json(&it.training, &d.join("training.json"))?;
    if let Some(row) = row {
        write_metrics_csv(std::slice::from_ref(row), File::create(d.join("metrics.csv"))?)?;
    }
    Ok(())
}
