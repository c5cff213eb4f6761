//! Synthetic building-footprint scenes, boundary targets, augmentation,
//! cropping, dataset splitting and on-disk storage.

mod augment;
mod boundary;
mod dataset;
pub mod netpbm;
mod scene;
mod split;

use thiserror::Error;

use crate::tensor::{Tensor, TensorError};

pub use augment::{augment, random_crop, AugmentPolicy};
pub use boundary::{disk_dilate, extract_boundary};
pub use dataset::{generate_dataset, load_dataset, write_dataset, Dataset};
pub use netpbm::{read_netpbm, write_netpbm, NetpbmError};
pub use scene::{generate_scene, SceneConfig};
pub use split::{split_dataset, Split, SplitSpec, Subset};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error on {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Netpbm(#[from] NetpbmError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("mask must be binary, found value {0}")]
    NonBinary(f32),
    #[error("invalid scene configuration: {0}")]
    InvalidConfig(String),
    #[error("crop size {size} exceeds sample size {h}x{w}")]
    CropTooLarge { size: usize, h: usize, w: usize },
    #[error("split ratios must be non-negative and sum to 1, got {0:?}")]
    InvalidRatios([f64; 3]),
    #[error("cannot split {n} items into {required} non-empty subsets")]
    TooFewItems { n: usize, required: usize },
    #[error("malformed dataset: {0}")]
    Malformed(String),
}

impl DataError {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        DataError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, DataError>;

/// One scene: image in `[0, 1]`, building mask and derived boundary mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: usize,
    /// `(1, C, H, W)`.
    pub image: Tensor,
    /// `(1, 1, H, W)`, values in `{0, 1}`.
    pub seg_mask: Tensor,
    /// `(1, 1, H, W)`, values in `{0, 1}`.
    pub bnd_mask: Tensor,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.image.shape().h
    }

    pub fn width(&self) -> usize {
        self.image.shape().w
    }
}
