use serde::Serialize;
use thiserror::Error;

use tweezer_core::dynamics::DynamicsError;
use tweezer_core::imaging::ImagingError;
use tweezer_core::io::IoError;
use tweezer_core::optics::OpticsError;
use tweezer_core::patterns::PatternError;
use tweezer_core::potential::PotentialError;
use tweezer_core::transport::TransportError;

/// Failure class; decides the process exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorKind {
    Config,
    InfeasiblePlan,
    Numerical,
    Io,
}

impl ErrorKind {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Config => 2,
            ErrorKind::InfeasiblePlan => 3,
            ErrorKind::Numerical => 4,
            ErrorKind::Io => 1,
        }
    }
}

#[derive(Debug, Clone, Error, Serialize)]
#[error("{kind:?}: {message}")]
pub struct StageError {
    pub kind: ErrorKind,
    pub message: String,
}

impl StageError {
    pub fn new(kind: ErrorKind, message: impl Into<String>) -> Self {
        Self {
            kind,
            message: message.into(),
        }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Self::new(ErrorKind::Config, message)
    }

    pub fn numerical(message: impl Into<String>) -> Self {
        Self::new(ErrorKind::Numerical, message)
    }
}

fn kind_of_optics(e: &OpticsError) -> ErrorKind {
    match e {
        OpticsError::Sampling(_) => ErrorKind::Numerical,
        OpticsError::InvalidSystem(_) | OpticsError::GeometryMismatch { .. } | OpticsError::OutOfRange(_) => {
            ErrorKind::Config
        }
    }
}

fn kind_of_potential(e: &PotentialError) -> ErrorKind {
    match e {
        PotentialError::SingularDetuning | PotentialError::OutOfDomain { .. } => ErrorKind::Numerical,
        PotentialError::Invalid(_) => ErrorKind::Config,
    }
}

fn kind_of_dynamics(e: &DynamicsError) -> ErrorKind {
    match e {
        DynamicsError::InvalidConfig(_) => ErrorKind::Config,
        DynamicsError::EmptyEnsemble
        | DynamicsError::TooFewAtoms { .. }
        | DynamicsError::EmptyTrap
        | DynamicsError::EmptyRegion
        | DynamicsError::StepTooLarge { .. }
        | DynamicsError::FitFailure(_)
        | DynamicsError::DegenerateFit(_) => ErrorKind::Numerical,
    }
}

fn kind_of_transport(e: &TransportError) -> ErrorKind {
    match e {
        TransportError::Unreachable { .. } | TransportError::Conflict { .. } | TransportError::Infeasible { .. } => {
            ErrorKind::InfeasiblePlan
        }
        TransportError::FrameRateMismatch | TransportError::Invalid(_) | TransportError::Pattern(_) => {
            ErrorKind::Config
        }
        TransportError::Dynamics(d) => kind_of_dynamics(d),
    }
}

fn kind_of_imaging(e: &ImagingError) -> ErrorKind {
    match e {
        ImagingError::ZeroBudget | ImagingError::EmptyEnsemble => ErrorKind::Numerical,
        ImagingError::Invalid(_) => ErrorKind::Config,
    }
}

macro_rules! stage_error_from {
    ($($ty:ty => $f:expr),* $(,)?) => {
        $(impl From<$ty> for StageError {
            fn from(e: $ty) -> Self {
                Self::new($f(&e), e.to_string())
            }
        })*
    };
}

stage_error_from! {
    PatternError => |_: &PatternError| ErrorKind::Config,
    OpticsError => kind_of_optics,
    PotentialError => kind_of_potential,
    DynamicsError => kind_of_dynamics,
    TransportError => kind_of_transport,
    ImagingError => kind_of_imaging,
    IoError => |_: &IoError| ErrorKind::Io,
}

impl From<tweezer_core::Error> for StageError {
    fn from(e: tweezer_core::Error) -> Self {
        use tweezer_core::Error as E;
        match e {
            E::Pattern(e) => e.into(),
            E::Optics(e) => e.into(),
            E::Potential(e) => e.into(),
            E::Dynamics(e) => e.into(),
            E::Transport(e) => e.into(),
            E::Imaging(e) => e.into(),
            E::Io(e) => e.into(),
        }
    }
}

impl From<std::io::Error> for StageError {
    fn from(e: std::io::Error) -> Self {
        Self::new(ErrorKind::Io, e.to_string())
    }
}

impl From<csv::Error> for StageError {
    fn from(e: csv::Error) -> Self {
        Self::new(ErrorKind::Io, e.to_string())
    }
}

/// Errors before any stage runs: unreadable or malformed scenario.
#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read scenario {path}: {source}")]
    Read {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse scenario: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error("cannot write {path}: {source}")]
    Write {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl ScenarioError {
    pub fn exit_code(&self) -> i32 {
        match self {
            ScenarioError::Write { .. } => ErrorKind::Io.exit_code(),
            _ => ErrorKind::Config.exit_code(),
        }
    }
}
