use thiserror::Error;

use crate::dynamics::DynamicsError;
use crate::imaging::ImagingError;
use crate::io::IoError;
use crate::optics::OpticsError;
use crate::patterns::PatternError;
use crate::potential::PotentialError;
use crate::transport::TransportError;

/// Crate-level error, one variant per module.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Pattern(#[from] PatternError),
    #[error(transparent)]
    Optics(#[from] OpticsError),
    #[error(transparent)]
    Potential(#[from] PotentialError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Imaging(#[from] ImagingError),
    #[error(transparent)]
    Io(#[from] IoError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
