pub mod binder;
pub mod bridge;
pub mod checkpoint;
pub mod composer;
pub mod config;
pub mod error;
pub mod eval;
pub mod lm;
pub mod numerics;
pub mod pipeline;
pub mod world;

pub use binder::{Binder, JointEmbedding, Source};
pub use bridge::Bridge;
pub use checkpoint::Checkpoint;
pub use config::Config;
pub use error::{Error, Result};
pub use eval::EvalReport;
pub use lm::LanguageModel;
pub use world::{ConceptScene, Modality, World};
