//! Restoration-based anomaly detection.
//!
//! A spatially-aware generator is trained adversarially against a patch
//! critic so that images from an unlabeled pool are restored to "healthy"
//! versions; the input/restoration discrepancy then scores anomalies.
//! Training combines an identity term on normal images, a restoration term
//! on synthesized pseudo-anomalies, and a Wasserstein adversarial term with
//! gradient penalty.

pub mod cli;
pub mod config;
pub mod critic;
pub mod data;
pub mod evaluation;
pub mod generator;
pub mod losses;
pub mod nn;
pub mod rng;
pub mod shapes;
pub mod synthesis;
pub mod training;

pub use critic::{Critic, CriticConfig};
pub use data::{DatasetRepartition, ImageRecord, ImageStore, Label, Split, SplitSizes};
pub use generator::{Generator, GeneratorConfig};
pub use losses::{LossBreakdown, LossWeights};
pub use training::{TrainConfig, TrainState};
