//! Multi-label patent classification with per-label sentence attention.
//!
//! Documents are split into sentences, each sentence is encoded into a
//! vector, and every label attends over those vectors to build its own
//! document summary before a logistic score.

pub mod checkpoint;
pub mod corpus;
pub mod encoder;
pub mod gradcheck;
pub mod hash;
pub mod head;
pub mod metrics;
pub mod model;
pub mod needle;
pub mod optim;
pub mod segmenter;
pub mod tensor;
pub mod trainer;

pub use checkpoint::{Checkpoint, CheckpointError};
pub use corpus::{
    build_vocabulary, encode_labels, load_corpus, parse_ipc, split_dataset, CorpusError,
    DatasetSplit, IpcCode, LabelEncoding, LabelVector, LabelVocabulary, PatentRecord, SplitName,
};
pub use encoder::EncoderKind;
pub use head::AttentionMode;
pub use metrics::{ConfusionCounts, MetricsReport};
pub use model::{Model, ModelDims, ModelError};
pub use segmenter::{segment, tokenize, tokenize_document, TokenSequence};
