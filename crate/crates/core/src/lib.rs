//! Text-free training of a coarse-to-fine delta mapper.
//!
//! A mapper is trained on pairs of images to predict the style-space
//! difference `Δs = s2 - s1` from the CLIP embedding difference
//! `Δi = i2 - i1`, and is then driven at inference time by a text embedding
//! difference `Δt`. Everything is verified against [`world`], a synthetic
//! generator with a closed-form ground truth.

pub mod evaluation;
pub mod inference;
pub mod mapper;
pub mod numerics;
pub mod relevance;
pub mod store;
pub mod training;
pub mod world;

pub use mapper::{ConditionMode, MapperArch, MapperParams, StyleLayout};
pub use numerics::{AdamConfig, AdamState, LinearStack, Parameters};
pub use relevance::{FilterConfig, RelevanceMatrix, StyleEncoder};
pub use store::{Checkpoint, EmbeddingDataset, TextTable, ValidationReport};
pub use world::{SyntheticWorld, WorldConfig};
pub use training::{TrainConfig, TrainHistory, Trainer};
pub use inference::{PromptTemplate, TextEmbedder};
