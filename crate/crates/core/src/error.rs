use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed NIfTI file: {0}")]
    Nifti(String),
    #[error("non-3D input: {0}")]
    NonVolumetric(String),
    #[error("shape mismatch: expected {expected:?}, found {found:?}")]
    ShapeMismatch { expected: Vec<usize>, found: Vec<usize> },
    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },
    #[error("{0} has zero total intensity")]
    ZeroMass(&'static str),
    #[error("ground-truth transform folds: {njd_percent:.4}% non-positive Jacobian determinants")]
    Folding { njd_percent: f64 },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("input {shape:?} too small for {levels} pyramid levels (needs at least {min} per axis)")]
    TooSmall {
        shape: [usize; 3],
        levels: usize,
        min: usize,
    },
    #[error("channel mismatch: expected {expected}, found {found}")]
    Channels { expected: usize, found: usize },
    #[error("{channels} channels not divisible by {by}")]
    Divisibility { channels: usize, by: usize },
    #[error("dataset too small: need at least {needed} entries, found {found}")]
    DatasetTooSmall { needed: usize, found: usize },
    #[error("non-finite loss at iteration {iteration} on pair (fixed {fixed}, moving {moving}): ncc={ncc}, diffusion={diffusion}, jd={jd}")]
    NonFiniteLoss {
        iteration: usize,
        fixed: usize,
        moving: usize,
        ncc: f64,
        diffusion: f64,
        jd: f64,
    },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("no pairs")]
    NoPairs,
    #[error("empty input")]
    Empty,
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(expected: &[usize], found: &[usize]) -> Self {
        Error::ShapeMismatch {
            expected: expected.to_vec(),
            found: found.to_vec(),
        }
    }
}
