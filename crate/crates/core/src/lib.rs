//! Meta-model quantifying pipeline.
//!
//! The crate trains a family of meta-models with MAML-style episodic
//! updates, refines its data pool by demoting uncertain labeled samples and
//! promoting confident unlabeled ones, ranks the resulting models by a
//! fused confidence/diversity score, and fuses the selected models'
//! features for a downstream classifier. A synthetic image benchmark and a
//! file-based pipeline harness make every stage reproducible from a single
//! root seed.

pub mod config;
pub mod downstream;
pub mod error;
pub mod extractor;
mod fs_util;
pub mod maml;
pub mod pipeline;
pub mod pool;
pub mod quantify;
pub mod refine;
pub mod reports;
pub mod rng;
pub mod synth;
pub mod tensor;

pub use config::PipelineConfig;
pub use downstream::DownstreamModel;
pub use error::{Error, Result};
pub use extractor::{ClassifierHead, FeatureNet};
pub use maml::{MetaModel, TrainConfig};
pub use pool::{DataPool, Episode, EpisodeSpec, Sample};
pub use quantify::FuseConfig;
pub use refine::{RefineConfig, ScoreRecord};
pub use synth::GeneratorSpec;
pub use tensor::{Tape, Tensor, Var};
