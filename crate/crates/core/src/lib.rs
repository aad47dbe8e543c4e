//! Relevance-guided path-loss prediction.
//!
//! The crate is organised bottom-up:
//!
//! - [`env`]: building height raster, antenna sites and a seeded scene generator.
//! - [`oracle`]: image-method multipath tracer with knife-edge diffraction that
//!   produces ground-truth path-loss labels.
//! - [`preprocess`]: path-aligned cropping, Tx/Rx depth maps, distance map and the
//!   Gaussian-inverse-square weighting mask, packed into a [`FeatureStack`].
//! - [`nnet`]: a bottleneck-residual CNN regressor with its own reverse-mode engine.
//! - [`trainer`]: Adam + step decay training loop.
//! - [`eval`]: metrics, leave-one-Tx-out cross-validation and the log-distance baseline.
//! - [`dataset`]: single-file dataset bundles.

pub mod dataset;
pub mod env;
pub mod error;
pub mod eval;
pub mod nnet;
pub mod oracle;
pub mod preprocess;
pub mod trainer;

pub use dataset::{LabeledDataset, Sample, Split};
pub use env::{generate_scene, HeightField, SceneSpec, Site, SiteKind};
pub use error::{Error, Result};
pub use eval::{CvPlan, MetricReport};
pub use nnet::{NetConfig, ParamStore, Tape};
pub use oracle::{MultipathComponent, OracleConfig, RayTraceResult};
pub use preprocess::{CropFrame, FeatureStack, MaskParams};
pub use trainer::{TrainConfig, TrainLog};

/// Normalisation constant applied to metric input channels and to labels.
pub const NORMALIZATION: f64 = 250.0;
