//! MAXVAR generalized canonical correlation analysis (GCCA) and its
//! stimulus-informed extension (SI-GCCA).
//!
//! Both estimators are solved as symmetric-definite generalized eigenvalue
//! problems. Around them sit the pieces needed to evaluate the filters on
//! multi-subject recordings: lag embedding, shrinkage covariance estimation,
//! inter-subject correlation, permutation thresholds and a ρ sweep.

pub mod ccasolvers;
pub mod cli;
pub mod covest;
pub mod datamodel;
pub mod eigsolver;
pub mod error;
pub mod evalstats;
pub mod lagmat;
pub mod seeding;
pub mod synthgen;

pub use ccasolvers::{CcaModel, EmbeddedTrial, FitConfig, Method};
pub use covest::{CorrelationStructure, Shrinkage};
pub use datamodel::{Dataset, TrialSet, ViewMatrix};
pub use error::{Error, Result};
pub use evalstats::{IscReport, PermTestResult};
pub use lagmat::LagSpec;
