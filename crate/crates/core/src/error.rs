use thiserror::Error;

use crate::calibration::CalibrationError;
use crate::density::DensityError;
use crate::features::FeatureError;
use crate::fusion::FusionError;
use crate::interchange::InterchangeError;
use crate::matching::MatchError;
use crate::metrics::MetricError;
use crate::pipeline::PipelineError;
use crate::synth::SynthError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse classification used by the command line to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// Bad input data, bad configuration or I/O failure.
    Data,
    /// A constraint (e.g. the OOD-escape bound) cannot be satisfied.
    Infeasible,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Interchange(#[from] InterchangeError),
    #[error(transparent)]
    Matching(#[from] MatchError),
    #[error(transparent)]
    Density(#[from] DensityError),
    #[error(transparent)]
    Calibration(#[from] CalibrationError),
    #[error(transparent)]
    Features(#[from] FeatureError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Metrics(#[from] MetricError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Fusion(FusionError::InfeasibleBound { .. }) => ErrorKind::Infeasible,
            Error::Stage { source, .. } => source.kind(),
            _ => ErrorKind::Data,
        }
    }
}
