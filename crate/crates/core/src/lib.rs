//! Factored causal reward modeling at desk scale.
//!
//! A reward head that reads only a causal latent, an adversary that keeps
//! preference signal out of the non-causal latent, a synthetic benchmark
//! with planted spurious correlations, and the diagnostics that measure
//! how much a reward model leans on them.

pub mod datagen;
pub mod evaluation;
pub mod losses;
pub mod model;
pub mod numkernel;
pub mod training;

pub use datagen::{Dataset, EmbeddingRecord, GenConfig, Generator, PreferenceTriplet, Split};
pub use losses::{LossBreakdown, LossWeights};
pub use model::{AblationConfig, Checkpoint, Dims, GaussianPosterior, ModelParams, Variant};
pub use numkernel::{Matrix, Rng, Vector};
