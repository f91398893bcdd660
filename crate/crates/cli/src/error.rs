//! CLI error taxonomy mapped onto process exit codes:
//! 0 ok, 2 config error, 3 data error, 4 verification failure,
//! 5 numeric failure, 1 anything else.

use entroprune::dataset::DatasetError;
use entroprune::dilute::DiluteError;
use entroprune::entropy::EntropyError;
use entroprune::fuse::FuseError;
use entroprune::io::IoError;
use entroprune::nose::NoseError;
use entroprune::spectral::SpectralError;
use entroprune::tensor::TensorError;
use entroprune::vit::VitError;

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Data(String),
    Verification(String),
    Numeric(String),
    Other(String),
}

pub type Result<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Verification(_) => 4,
            CliError::Numeric(_) => 5,
            CliError::Other(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Verification(m) => write!(f, "verification failure: {m}"),
            CliError::Numeric(m) => write!(f, "numeric failure: {m}"),
            CliError::Other(m) => write!(f, "{m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<IoError> for CliError {
    fn from(e: IoError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<VitError> for CliError {
    fn from(e: VitError) -> Self {
        match e {
            VitError::Config(m) => CliError::Config(m),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<TensorError> for CliError {
    fn from(e: TensorError) -> Self {
        CliError::Other(e.to_string())
    }
}

impl From<EntropyError> for CliError {
    fn from(e: EntropyError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<NoseError> for CliError {
    fn from(e: NoseError) -> Self {
        match e {
            NoseError::Invalid(m) => CliError::Config(m),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<DiluteError> for CliError {
    fn from(e: DiluteError) -> Self {
        match e {
            DiluteError::NonFiniteLoss { .. } => CliError::Numeric(e.to_string()),
            DiluteError::Invalid(m) => CliError::Config(m),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<FuseError> for CliError {
    fn from(e: FuseError) -> Self {
        match e {
            FuseError::MaskNotZero(_) => CliError::Verification(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<SpectralError> for CliError {
    fn from(e: SpectralError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Other(e.to_string())
    }
}
