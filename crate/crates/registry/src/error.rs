use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Wire-level error codes carried in ERROR replies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ErrorCode {
    CorruptModel,
    RegionUnknown,
    RegionMismatch,
    OutOfCoverage,
    NoModelPublished,
    VersionUnknown,
    BadRequest,
    Internal,
}

#[derive(Debug, Error)]
pub enum RegistryError {
    #[error("corrupt model: {0}")]
    CorruptModel(String),
    #[error("unknown region {0:?}")]
    RegionUnknown(String),
    #[error("blob belongs to region {found:?}, not {expected:?}")]
    RegionMismatch { expected: String, found: String },
    #[error("point ({lat}, {lon}) is outside the tiled area")]
    OutOfCoverage { lat: f64, lon: f64 },
    #[error("no model published for region {0:?}")]
    NoModelPublished(String),
    #[error("region {region_id:?} has no retained version {version}")]
    VersionUnknown { region_id: String, version: u64 },
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error("storage error: {0}")]
    Storage(#[from] std::io::Error),
}

impl RegistryError {
    pub fn code(&self) -> ErrorCode {
        match self {
            RegistryError::CorruptModel(_) => ErrorCode::CorruptModel,
            RegistryError::RegionUnknown(_) => ErrorCode::RegionUnknown,
            RegistryError::RegionMismatch { .. } => ErrorCode::RegionMismatch,
            RegistryError::OutOfCoverage { .. } => ErrorCode::OutOfCoverage,
            RegistryError::NoModelPublished(_) => ErrorCode::NoModelPublished,
            RegistryError::VersionUnknown { .. } => ErrorCode::VersionUnknown,
            RegistryError::BadRequest(_) => ErrorCode::BadRequest,
            RegistryError::Storage(_) => ErrorCode::Internal,
        }
    }
}
