//! Synthetic phantoms, volume IO, preprocessing, augmentation and dataset splits.

mod io;
mod phantom;
mod preprocess;
mod split;

use thiserror::Error;

use crate::container::ContainerError;
use crate::domain::DomainError;

pub use io::{load_labels, load_volume, save_labels, save_volume, VolumeFormat};
pub use phantom::{
    corrupt_boundary, generate_dataset, generate_phantom, structure_to_tissue, tissue_names, structure_names,
    PhantomSpec, Sample,
};
pub use preprocess::{augment_flip, crop_or_pad, flip_labels, flip_volume, foreground_box, preprocess, Crop};
pub use split::{split, write_dataset, Manifest, ManifestEntry, Split, SplitName};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("bad phantom spec: {0}")]
    BadSpec(String),
    #[error("io failure on {path}: {reason}")]
    IoFailure { path: String, reason: String },
    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),
    #[error("volume has no foreground voxels")]
    EmptyForeground,
    #[error("bad split ratios {0:?}")]
    BadRatios(Vec<f64>),
    #[error(transparent)]
    Domain(#[from] DomainError),
}

impl From<ContainerError> for DataError {
    fn from(e: ContainerError) -> Self {
        match e {
            ContainerError::Io { path, source } => DataError::IoFailure { path, reason: source.to_string() },
            ContainerError::Format { path, reason } => DataError::IoFailure { path, reason },
            ContainerError::ChecksumMismatch { path } => {
                DataError::IoFailure { path, reason: "checksum mismatch".into() }
            }
        }
    }
}
