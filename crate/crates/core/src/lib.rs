//! Contrast-based random-effects network meta-analysis with
//! leave-one-design-out influence diagnostics.

pub mod bootstrap;
pub mod error;
pub mod ingest;
pub mod linalg;
pub mod network;
pub mod optimize;
pub mod inconsistency;
pub mod influence;
pub mod reml;
pub mod report;
pub mod sim;

pub use error::{NmaError, Result};
pub use ingest::{ingest, ArmRecord, IngestOptions};
pub use network::{ContrastStudy, DesignKey, NetworkDataset, ParameterBasis, Treatment, TreatmentId};
pub use reml::{reml_fit, reml_fit_with, FitOptions, FitResult};
