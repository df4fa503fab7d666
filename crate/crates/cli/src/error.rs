use ser_core::audio::AudioError;
use ser_core::config::ConfigError;
use ser_core::data::DataError;
use ser_core::gradcheck::GradcheckError;
use ser_core::metrics::MetricsError;
use ser_core::model::{CheckpointError, ModelError};
use ser_core::synth::SynthError;
use ser_core::train::TrainError;
use ser_core::workflow::FileError;

/// Process exit status for each failure class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitCode {
    Usage = 1,
    Data = 2,
    Numerical = 3,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    File(#[from] FileError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Gradcheck(#[from] GradcheckError),
    #[error("{0} file(s) failed to featurize")]
    FeaturizeFailed(usize),
    #[error("gradient check failed for: {0}")]
    GradcheckFailed(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        match self {
            CliError::Config(_) | CliError::Usage(_) | CliError::Gradcheck(GradcheckError::UnknownOp(_)) => {
                ExitCode::Usage
            }
            CliError::Train(TrainError::InvalidConfig(_)) | CliError::Model(ModelError::InvalidConfig(_)) => {
                ExitCode::Usage
            }
            CliError::Train(TrainError::Model(ModelError::InvalidConfig(_))) => ExitCode::Usage,
            CliError::Train(TrainError::NonFiniteLoss { .. } | TrainError::NonFiniteParams { .. })
            | CliError::GradcheckFailed(_)
            | CliError::Gradcheck(_) => ExitCode::Numerical,
            _ => ExitCode::Data,
        }
    }
}

pub fn io_err(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> CliError {
    let path = path.display().to_string();
    move |source| CliError::Io { path, source }
}
