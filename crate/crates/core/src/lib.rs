//! Free-terminal-time optimal control for planar manipulators, QRnet
//! policies and adaptive IVP-based resampling of the training data.

pub mod ddp;
pub mod dynamics;
pub mod error;
pub mod freetime;
pub mod harness;
pub mod lqr;
pub mod par;
pub mod policy;
pub mod sampling;

pub use error::{Error, Result};
