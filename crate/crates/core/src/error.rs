use thiserror::Error;

use crate::geom::GeomError;
use crate::io::IoError;
use crate::mesh::MeshError;
use crate::optim::OptimError;
use crate::polycube::PolycubeError;
use crate::pullback::PullbackError;
use crate::pipeline::ConfigError;
use crate::quality::QualityError;
use crate::voxel::VoxelError;

/// Crate-level error. Each stage has its own error enum; this wraps them so
/// pipeline code can use `?` across stage boundaries.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Geom(#[from] GeomError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Polycube(#[from] PolycubeError),
    #[error(transparent)]
    Pullback(#[from] PullbackError),
    #[error(transparent)]
    Voxel(#[from] VoxelError),
    #[error(transparent)]
    Quality(#[from] QualityError),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("stage `{stage}` is not available: {reason}")]
    Stage { stage: &'static str, reason: String },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
