//! Small GPT-style decoder that is pretrained in-repo and then frozen.

pub mod config;
pub mod model;
pub mod pretrain;
pub mod vocab;

pub use config::BackboneConfig;
pub use model::{Backbone, ForwardOptions, ForwardPass, Generation, HiddenStates, Injection, MemoryKv};
pub use pretrain::{heldout_loss, pretrain, PretrainOptions, PretrainReport};
pub use vocab::Vocabulary;
