//! Feedback policies: networks, QRnet composition, training and checkpoints.

pub mod adam;
pub mod dataset;
pub mod mlp;
pub mod qrnet;
pub mod train;

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::DMatrix;

pub use dataset::{Dataset, Record};
pub use mlp::{Activation, Mlp, Standardizer};
pub use qrnet::{ensemble_forward, Architecture, Ensemble, LqrBranch, Policy};
pub use train::{control_loss, control_loss_gradient, init_policy, time_loss_gradient, train_policy, TrainConfig, TrainingReport};

use crate::error::Result;

/// Anything that maps `(time since start, states)` to controls. States and
/// controls are batched one per column.
pub trait Controller: Sync {
    fn control_dim(&self) -> usize;
    fn controls(&self, t: f64, xs: &DMatrix<f64>) -> DMatrix<f64>;
}

/// Zero control everywhere.
#[derive(Clone, Copy, Debug)]
pub struct ZeroControl {
    pub control_dim: usize,
}

impl Controller for ZeroControl {
    fn control_dim(&self) -> usize {
        self.control_dim
    }

    fn controls(&self, _t: f64, xs: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::zeros(self.control_dim, xs.ncols())
    }
}

/// Writes `policy` as a single JSON document.
pub fn save_checkpoint(policy: &Policy, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut w, policy)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Policy> {
    let p: Policy = serde_json::from_reader(BufReader::new(File::open(path)?))?;
    // Re-run the constructor checks on the loaded pieces.
    Policy::new(
        p.architecture,
        p.control_net,
        p.time_net,
        p.input_scaling,
        p.output_scaling,
        p.lqr,
        p.seed,
    )
}
