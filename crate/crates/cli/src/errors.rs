//! Error-to-exit-code mapping: 0 success, 1 I/O or file format, 2
//! configuration, 3 numerical failure.

use sdstereo_core::bayes::BayesError;
use sdstereo_core::checkpoint::CheckpointError;
use sdstereo_core::datagen::DatagenError;
use sdstereo_core::eval::EvalError;
use sdstereo_core::imageio::ImageIoError;
use sdstereo_core::matcher::MatcherError;
use sdstereo_core::ops::OpError;
use sdstereo_core::refiner::RefinerError;
use sdstereo_core::trainer::TrainError;

#[derive(Debug)]
pub enum CliError {
    Io(String),
    Config(String),
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Io(_) => 1,
            CliError::Config(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Io(m) | CliError::Config(m) | CliError::Numeric(m) => m,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<ImageIoError> for CliError {
    fn from(e: ImageIoError) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<OpError> for CliError {
    fn from(e: OpError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<DatagenError> for CliError {
    fn from(e: DatagenError) -> Self {
        match e {
            DatagenError::Config(_) => CliError::Config(e.to_string()),
            DatagenError::Image(inner) => inner.into(),
            DatagenError::ManifestParse { .. } | DatagenError::Io(_) => CliError::Io(e.to_string()),
        }
    }
}

impl From<MatcherError> for CliError {
    fn from(e: MatcherError) -> Self {
        match e {
            MatcherError::Config(_) | MatcherError::SizeMismatch { .. } => {
                CliError::Config(e.to_string())
            }
            MatcherError::Format(_) | MatcherError::Io(_) => CliError::Io(e.to_string()),
        }
    }
}

impl From<RefinerError> for CliError {
    fn from(e: RefinerError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<BayesError> for CliError {
    fn from(e: BayesError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFinite { .. } => CliError::Numeric(e.to_string()),
            TrainError::Config(_) | TrainError::DatasetQuality(_) => {
                CliError::Config(e.to_string())
            }
            TrainError::Bayes(inner) => inner.into(),
            TrainError::Refiner(inner) => inner.into(),
            TrainError::Matcher(inner) => inner.into(),
            TrainError::Image(inner) => inner.into(),
            TrainError::Dataset(inner) => inner.into(),
            TrainError::Checkpoint(inner) => inner.into(),
            TrainError::Op(inner) => inner.into(),
            TrainError::Io(inner) => inner.into(),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Config(_) => CliError::Config(e.to_string()),
            EvalError::Train(inner) => inner.into(),
            EvalError::Refiner(inner) => inner.into(),
            EvalError::Io(inner) => inner.into(),
        }
    }
}
