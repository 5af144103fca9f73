//! Simulation workbench for integrated optical PUFs and the modeling attacks
//! that target them.
//!
//! The PUF is modeled as a fixed random complex transmission matrix with an
//! intensity readout, so every response is a quadratic form in the challenge
//! bits. On top of the simulator the crate provides challenge generation
//! schemes, Gabor binarization of speckle images, the usual similarity
//! metrics, linear/ridge/quadratic regression attacks, a fully connected
//! generator network trained with ADAM, and the persistence and experiment
//! plumbing used by the `puf-forge` command line tool.

pub mod challenge;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod formats;
pub mod gabor;
pub mod image;
pub mod linear;
pub mod metrics;
pub mod neural;
pub mod puf;
pub mod report;
pub mod rng;

pub use challenge::{Challenge, SchemeType};
pub use dataset::{Crp, Dataset, DatasetManifest, DatasetSpec, ImportSpec, Split};
pub use error::{Error, Result};
pub use experiment::{AttackKind, AttackOptions, GeneratorOptions, MatrixConfig};
pub use gabor::{BitResponse, GaborKernel, GaborParams, KernelPreset};
pub use image::{crop_center, Normalization, ResponseImage};
pub use linear::{FeatureKind, RegressionModel};
pub use metrics::{BoxplotStats, MetricsReport, Summary};
pub use neural::{AdamConfig, GeneratorModel, TrainConfig};
pub use puf::{PufConfig, TransmissionMatrix};
pub use report::AttackReport;
