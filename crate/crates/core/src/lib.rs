//! Orthogonal group synchronization: synthetic data, NS-RGS and GPM solvers,
//! evaluation metrics and leave-one-out diagnostics.

pub mod blockmat;
pub mod datagen;
pub mod error;
pub mod metrics;
pub mod solver;
pub mod theory;

pub use blockmat::{BlockStack, SquareBlock};
pub use datagen::{BlockObservation, SyncInstance, SynthParams};
pub use error::{Result, SyncError};
