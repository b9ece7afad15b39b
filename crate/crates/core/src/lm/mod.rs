//! Miniature GPT-style causal backbone: byte-level vocabulary, forward pass
//! with a per-layer hook, sequence embeddings, pretraining and checkpoints.

mod checkpoint;
mod corpus;
mod model;
mod pretrain;
mod vocab;

pub use corpus::{Corpus, CorpusSet};
pub use model::{Backbone, Forward, IdentityHook, LayerHook, LmConfig};
pub use pretrain::{pretrain, sample_window, window, PretrainConfig, Pretrained};
pub use vocab::Vocab;
