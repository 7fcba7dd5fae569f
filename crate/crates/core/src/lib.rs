//! Task-driven kernel flows.
//!
//! Integrators for the kernel-level gradient flows induced by training a feature map with a
//! linear readout, closed-form steady-state spectral laws, and structural checks (rank
//! compression, alignment, low-rank SGD noise, optimizer-modulated geometry).

pub mod error;
pub mod experiment;
pub mod laws;
pub mod linalg;
pub mod muon;
pub mod noise;
pub mod population;
pub mod setup;
pub mod ssl;
pub mod supervised;

pub use error::{FlowError, Result};
pub use linalg::{GeneralMatrix, SymmetricMatrix};
pub use setup::{AugmentationGraph, LabelSet, RegularizationConfig, SSLConfig, SemiConfig};
