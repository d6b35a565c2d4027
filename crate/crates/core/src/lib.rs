//! Multilingual NMT laboratory.

pub mod analysis;
pub mod corpus;
pub mod decoding;
pub mod eval;
pub mod model;
pub mod numerics;
pub mod runner;
pub mod tagging;
pub mod tokenizer;

pub use corpus::LangCode;
pub use numerics::{Real, Tensor};
pub use tagging::LtStrategy;

/// Any error raised by this crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Corpus(#[from] corpus::CorpusError),
    #[error(transparent)]
    Strategy(#[from] tagging::UnknownStrategy),
    #[error(transparent)]
    Tokenizer(#[from] tokenizer::TokenizerError),
    #[error(transparent)]
    Numerics(#[from] numerics::NumericsError),
    #[error(transparent)]
    Model(#[from] model::ModelError),
    #[error(transparent)]
    Decode(#[from] decoding::DecodeError),
    #[error(transparent)]
    Eval(#[from] eval::EvalError),
    #[error(transparent)]
    Analysis(#[from] analysis::AnalysisError),
    #[error(transparent)]
    Run(#[from] runner::RunError),
}

impl Error {
    /// Process exit status: 1 for invalid input or configuration, 2 for
    /// failures while doing work.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Run(e) => e.exit_code(),
            Error::Corpus(corpus::CorpusError::InvalidSpec(_)) | Error::Strategy(_) => 1,
            Error::Model(model::ModelError::InvalidConfig(_)) => 1,
            _ => 2,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
