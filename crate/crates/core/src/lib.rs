//! Structure learning for Gaussian DAGs with unspecified interventions, and
//! data-perturbation likelihood-ratio tests for directed edges and pathways.

pub mod error;
pub mod graph;
pub mod inference;
pub mod io;
pub mod linalg;
pub mod peeling;
pub mod refit;
pub mod simulate;
pub mod tlp;

pub use error::{Error, Result};
pub use graph::{HypothesisSpec, SuperGraph, TestMode};
pub use inference::{DpConfig, DpTestReport, PValueMethod, StructureSource, TestOptions};
pub use peeling::{learn_structure, peel, PeelOptions, ReducedFormEstimate, StructureFit, Tuning};
pub use refit::{refit_dag, WeightedDag};
pub use tlp::{TlpConfig, TuningGrid};
