//! Synthetic six-modality concept world and grounded conversations.

pub mod conversation;
pub mod dataset;
pub mod scene;
pub mod vocab;

pub use conversation::{
    make_composed_conversation, make_conversation, Conversation, Turn, TEMPLATE_COUNT,
};
pub use dataset::{DatasetConfig, Record};
pub use scene::{render_caption, sample_scene, ConceptScene, Modality, ModalitySample, World};
pub use vocab::{TokenId, Vocab};
