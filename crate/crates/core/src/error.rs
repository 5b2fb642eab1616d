use thiserror::Error;

use crate::augment::AugmentError;
use crate::dataset::DatasetError;
use crate::evaluator::EvalError;
use crate::frames::FrameError;
use crate::network::NetworkError;
use crate::sampler::SamplerError;
use crate::trainer::TrainError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Pipeline error, qualified by the module that raised it.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dataset_model: {0}")]
    Dataset(#[from] DatasetError),
    #[error("frame_store: {0}")]
    Frames(#[from] FrameError),
    #[error("augment: {0}")]
    Augment(#[from] AugmentError),
    #[error("sampler: {0}")]
    Sampler(#[from] SamplerError),
    #[error("network: {0}")]
    Network(#[from] NetworkError),
    #[error("trainer: {0}")]
    Train(#[from] TrainError),
    #[error("evaluator: {0}")]
    Eval(#[from] EvalError),
}
