use std::fmt;

use flamefront::autodiff::TensorError;
use flamefront::dataset::DatasetError;
use flamefront::diagnostics::DiagnosticsError;
use flamefront::nn::NnError;
use flamefront::spectral::SpectralError;
use flamefront::train::TrainError;

/// Failure classes, each with its own exit code.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Numerical(String),
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            Self::Numerical(_) => 3,
            Self::Io(_) => 4,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Config(m) => write!(f, "configuration error: {m}"),
            Self::Numerical(m) => write!(f, "numerical failure: {m}"),
            Self::Io(m) => write!(f, "i/o failure: {m}"),
        }
    }
}

impl From<SpectralError> for CliError {
    fn from(e: SpectralError) -> Self {
        match e {
            SpectralError::InvalidParameter(_) | SpectralError::InvalidState(_) => Self::Config(e.to_string()),
            _ => Self::Numerical(e.to_string()),
        }
    }
}

impl From<TensorError> for CliError {
    fn from(e: TensorError) -> Self {
        match e {
            TensorError::NonFiniteGradient(_) => Self::Numerical(e.to_string()),
            _ => Self::Config(e.to_string()),
        }
    }
}

impl From<NnError> for CliError {
    fn from(e: NnError) -> Self {
        match e {
            NnError::Config(_) => Self::Config(e.to_string()),
            NnError::Tensor(t) => t.into(),
            NnError::Io(_) | NnError::Format(_) => Self::Io(e.to_string()),
        }
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        match e {
            DatasetError::Io { .. } | DatasetError::Manifest(_) => Self::Io(e.to_string()),
            DatasetError::Invalid(_) => Self::Config(e.to_string()),
            DatasetError::Generation { .. } => Self::Numerical(e.to_string()),
            DatasetError::Spectral(s) => s.into(),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFinite { .. } | TrainError::Diverged { .. } => Self::Numerical(e.to_string()),
            TrainError::Config(_) => Self::Config(e.to_string()),
            TrainError::Io { .. } => Self::Io(e.to_string()),
            TrainError::Model(m) => m.into(),
            TrainError::Tensor(t) => t.into(),
            TrainError::Dataset(d) => d.into(),
        }
    }
}

impl From<DiagnosticsError> for CliError {
    fn from(e: DiagnosticsError) -> Self {
        match e {
            DiagnosticsError::Invalid(_) => Self::Config(e.to_string()),
            DiagnosticsError::Io { .. } => Self::Io(e.to_string()),
            DiagnosticsError::Spectral(s) => s.into(),
            DiagnosticsError::Model(m) => m.into(),
            _ => Self::Numerical(e.to_string()),
        }
    }
}
