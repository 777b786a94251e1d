//! XANE(3): an E(3)-equivariant graph network that maps periodic atomic
//! structures with a designated absorber atom to a normalized XANES spectrum
//! on a fixed energy grid, together with the supporting spectrum
//! preprocessing, synthetic-data, and training/evaluation tooling.

pub mod autodiff;
pub mod error;
pub mod spectra;
pub mod graph;
pub mod so3;
pub mod model;
pub mod objective;
pub mod dataset;
pub mod synth;
pub mod trainer;

pub use error::{Result, XaneError};
