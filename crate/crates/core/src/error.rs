use thiserror::Error;

use crate::attention::AttentionError;
use crate::augment::AugmentError;
use crate::checkpoint::CheckpointError;
use crate::contrastive::ContrastiveError;
use crate::corpus::CorpusError;
use crate::eval::EvalError;
use crate::lora::LoraError;
use crate::model::ModelError;
use crate::pooling::PoolingError;
use crate::prompts::PromptError;
use crate::tokenizer::TokenizerError;
use crate::trainer::TrainError;

/// Any failure surfaced by the pipeline-level functions.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Lora(#[from] LoraError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Pooling(#[from] PoolingError),
    #[error(transparent)]
    Contrastive(#[from] ContrastiveError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Attention(#[from] AttentionError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
