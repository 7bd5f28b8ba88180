use thiserror::Error;

use crate::latch::LatchError;
use crate::page_format::FormatError;
use crate::page_store::StoreError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors surfaced by tree operations.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Latch(#[from] LatchError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("level {level} out of range for tree of height {height}")]
    LevelOutOfRange { level: u8, height: u8 },
    #[error("tree corruption: {0}")]
    Corruption(String),
}

impl Error {
    /// True for errors that indicate damaged on-disk or in-memory structure
    /// rather than bad input.
    pub fn is_corruption(&self) -> bool {
        matches!(
            self,
            Error::Corruption(_)
                | Error::Format(FormatError::Corrupt(_))
                | Error::Store(StoreError::Corrupt(_))
                | Error::Store(StoreError::DoubleFree(_))
                | Error::Store(StoreError::UseAfterFree(_))
        )
    }
}
