//! Sentence embeddings from a small decoder-only transformer.

pub mod attention;
pub mod augment;
pub mod checkpoint;
pub mod cli;
pub mod contrastive;
pub mod corpus;
pub mod embed;
pub mod error;
pub mod eval;
pub mod lora;
pub mod model;
pub mod pooling;
pub mod prompts;
pub mod scalar;
pub mod tensor;
pub mod tokenizer;
pub mod trainer;

pub use error::Error;
pub use scalar::Scalar;

pub type Transformer32 = model::Transformer<f32>;
pub type Transformer64 = model::Transformer<f64>;
pub type AdaptedModel32 = lora::AdaptedModel<f32>;
pub type AdaptedModel64 = lora::AdaptedModel<f64>;
