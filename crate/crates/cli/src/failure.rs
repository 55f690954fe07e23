//! Process exit codes and the mapping from library errors onto them.

use std::fmt;

use xovd_core::acquisition::AcquisitionError;
use xovd_core::classifier::ClassifierError;
use xovd_core::config::ConfigError;
use xovd_core::descriptors::DescriptorError;
use xovd_core::eval::EvalError;
use xovd_core::material::MaterialError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitKind {
    /// Bad configuration, unusable backend selection or an unparseable oracle reply.
    Config = 2,
    /// The gallery could not be assembled for the requested vocabulary.
    Gallery = 3,
    /// A descriptor store does not match the active backends.
    StoreCompat = 4,
    /// Anything that fails while scoring or evaluating.
    Evaluation = 5,
}

/// An error tagged with the exit code it maps to.
pub struct Failure {
    pub kind: ExitKind,
    pub error: anyhow::Error,
    /// Raw text worth showing verbatim (an oracle reply, for instance).
    pub payload: Option<String>,
}

impl Failure {
    pub fn new(kind: ExitKind, error: impl Into<anyhow::Error>) -> Self {
        Self { kind, error: error.into(), payload: None }
    }

    pub fn code(&self) -> u8 {
        self.kind as u8
    }
}

impl fmt::Debug for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?} (exit {}): {:#}", self.kind, self.code(), self.error)
    }
}

pub type CliResult<T> = Result<T, Failure>;

/// Attach an exit kind to any error.
pub trait OrExit<T> {
    fn or_exit(self, kind: ExitKind) -> CliResult<T>;
}

impl<T, E: Into<anyhow::Error>> OrExit<T> for Result<T, E> {
    fn or_exit(self, kind: ExitKind) -> CliResult<T> {
        self.map_err(|e| Failure::new(kind, e))
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::new(ExitKind::Config, e)
    }
}

impl From<MaterialError> for Failure {
    fn from(e: MaterialError) -> Self {
        let payload = match &e {
            MaterialError::UnparseableOracleReply { raw, .. } => Some(raw.clone()),
            _ => None,
        };
        let kind = match &e {
            MaterialError::UnparseableOracleReply { .. } | MaterialError::UnknownMaterial(_) => ExitKind::Config,
            _ => ExitKind::Gallery,
        };
        Failure { kind, error: e.into(), payload }
    }
}

impl From<AcquisitionError> for Failure {
    fn from(e: AcquisitionError) -> Self {
        match e {
            AcquisitionError::Material(m) => m.into(),
            AcquisitionError::MissingApiKey(_) | AcquisitionError::InvalidThreshold(_) => Failure::new(ExitKind::Config, e),
            other => Failure::new(ExitKind::Gallery, other),
        }
    }
}

impl From<DescriptorError> for Failure {
    fn from(e: DescriptorError) -> Self {
        let kind = match &e {
            DescriptorError::Incompatible(_) | DescriptorError::VersionMismatch { .. } | DescriptorError::Corrupt(_) => {
                ExitKind::StoreCompat
            }
            DescriptorError::Io(_) => ExitKind::Config,
            _ => ExitKind::Gallery,
        };
        Failure::new(kind, e)
    }
}

impl From<ClassifierError> for Failure {
    fn from(e: ClassifierError) -> Self {
        match e {
            ClassifierError::Store(d) => d.into(),
            ClassifierError::DimensionMismatch { .. } => Failure::new(ExitKind::StoreCompat, e),
            other => Failure::new(ExitKind::Evaluation, other),
        }
    }
}

impl From<EvalError> for Failure {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::InvalidFraction(_) => Failure::new(ExitKind::Config, e),
            EvalError::Acquisition(a) => a.into(),
            EvalError::Material(m) => m.into(),
            EvalError::Descriptor(d) => d.into(),
            EvalError::Classifier(c) => c.into(),
            other => Failure::new(ExitKind::Evaluation, other),
        }
    }
}
