use thiserror::Error;
use vwv::adapt::AdaptError;
use vwv::dataio::DataError;
use vwv::dictionary::DictionaryError;
use vwv::encoder::EncoderError;
use vwv::matcher::MatchError;
use vwv::metrics::MetricsError;
use vwv::train::TrainError;

/// Every failure the CLI reports, grouped by exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("missing input: {0}")]
    Missing(String),
    #[error("data inconsistency: {0}")]
    Data(String),
    #[error("internal error: {0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Missing(_) => 3,
            CliError::Data(_) => 4,
            CliError::Internal(_) => 1,
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Missing(_) => CliError::Missing(e.to_string()),
            DataError::Config(_) | DataError::ObjectTooLarge { .. } => CliError::Config(e.to_string()),
            DataError::Io { .. } => CliError::Internal(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<DictionaryError> for CliError {
    fn from(e: DictionaryError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<EncoderError> for CliError {
    fn from(e: EncoderError) -> Self {
        match e {
            EncoderError::Tensor(_) => CliError::Internal(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<MatchError> for CliError {
    fn from(e: MatchError) -> Self {
        match e {
            MatchError::Tensor(_) => CliError::Internal(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) => CliError::Config(e.to_string()),
            TrainError::TooShortVideo { .. } | TrainError::EmptyDataset => CliError::Data(e.to_string()),
            TrainError::Encoder(e) => e.into(),
            TrainError::Dictionary(e) => e.into(),
            TrainError::Match(e) => e.into(),
            TrainError::NonFinite { .. } | TrainError::Tensor(_) => CliError::Internal(e.to_string()),
        }
    }
}

impl From<AdaptError> for CliError {
    fn from(e: AdaptError) -> Self {
        match e {
            AdaptError::Config(_) => CliError::Config(e.to_string()),
            AdaptError::MissingAnnotation { .. } => CliError::Missing(e.to_string()),
            AdaptError::Dictionary(e) => e.into(),
            AdaptError::Match(e) => e.into(),
            AdaptError::Encoder(e) => e.into(),
            AdaptError::Tensor(_) => CliError::Internal(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        match e {
            MetricsError::Data(e) => e.into(),
            MetricsError::Encoder(e) => e.into(),
            MetricsError::Match(e) => e.into(),
            _ => CliError::Data(e.to_string()),
        }
    }
}
