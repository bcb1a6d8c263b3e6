//! Multiple product name entity recognition with the Entity Transformer.
//!
//! The pipeline: [`text`] tokenizes and featurizes utterances, [`embed`]
//! supplies optional dense token vectors, [`model`] runs the relative
//! position transformer built on the [`autodiff`] tape, and [`crf`] scores
//! and decodes BILOU tag sequences. [`train`] and [`eval`] drive learning and
//! measurement; [`datagen`] synthesizes labelled shopping utterances.

// dynamic programs over tag ids read more clearly with explicit indices
#![allow(clippy::needless_range_loop)]

pub mod autodiff;
pub mod checkpoint;
pub mod crf;
pub mod datagen;
pub mod embed;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod optim;
pub mod tagger;
pub mod tensor;
pub mod text;
pub mod train;

pub use autodiff::{Graph, ParamSet, Var};
pub use crf::{bilou_constraints, ConstraintMask, TagLattice};
pub use datagen::{ProductCatalog, TemplateSet, UtteranceRecord};
pub use embed::{EmbeddingProvider, ProviderSpec};
pub use error::{Error, Result};
pub use eval::{entity_f1, EvalReport};
pub use model::{ModelConfig, ModelParams};
pub use tagger::{EntityTagger, Featurizer};
pub use tensor::Tensor;
pub use text::{bilou_decode, bilou_encode, tokenize, EntitySpan, Tag, Vocabulary};
pub use train::{batch_schedule, train, TrainConfig, TrainOutcome};
