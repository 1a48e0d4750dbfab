//! Visual-prefix prompting for structured pathology report generation.
//!
//! A compact encoder–decoder language model is pretrained on report text,
//! frozen, and then conditioned on slide-level feature vectors through a
//! small trainable prompt encoder that emits prefix embeddings. The crate
//! also carries the composite evaluation metric (BLEU-4, ROUGE-L, keyword
//! Jaccard, embedding similarity) used to rank generated reports.

pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod reports;
pub mod rng;
pub mod tensor;
pub mod tokenizer;
pub mod training;

pub use error::{Error, Result};
pub use graph::{Graph, Primitive, Var};
pub use tensor::{Real, Tensor};
