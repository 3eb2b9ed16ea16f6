use thiserror::Error;

use crate::cost::CostError;
use crate::engine::EngineError;
use crate::mapping::MappingError;
use crate::schedule::ScheduleError;
use crate::workload::WorkloadError;

/// Broad failure classes, used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Validation,
    Capacity,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Mapping(#[from] MappingError),
    #[error(transparent)]
    Cost(#[from] CostError),
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Output(String),
}

impl Error {
    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Context { source, .. } => source.class(),
            Error::Mapping(MappingError::Capacity(_) | MappingError::TooNarrow { .. })
            | Error::Cost(CostError::Capacity(_))
            | Error::Cost(CostError::Mapping(MappingError::Capacity(_) | MappingError::TooNarrow { .. })) => {
                ErrorClass::Capacity
            }
            _ => ErrorClass::Validation,
        }
    }
}
