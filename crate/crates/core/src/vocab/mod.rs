//! Tag label space and subword tokenization.

mod tags;
mod tokenizer;

pub use tags::{build_tag_vocab, filter_posts, TagVocabulary, DEFAULT_THETA};
pub use tokenizer::{
    encode, SpecialIds, TokenSequence, Tokenizer, Truncation, CLS, FIRST_MERGE_ID, MIN_VOCAB_SIZE, PAD, SEP, UNK,
};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum VocabError {
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("theta must be at least 1")]
    InvalidTheta,
    #[error("empty label space: every tag occurs fewer than {theta} times")]
    EmptyLabelSpace { theta: u64 },
    #[error("vocab_size {0} is below the floor of {MIN_VOCAB_SIZE} (256 bytes + 4 specials)")]
    VocabSizeTooSmall(usize),
    #[error("invalid vocabulary file: {0}")]
    Invalid(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, VocabError>;
