//! Knowledge-guided prompt learning for 3D brain segmentation.

pub mod backbones;
pub mod compare;
pub mod container;
pub mod data;
pub mod domain;
pub mod knowledge;
pub mod losses;
pub mod metrics;
pub mod prompt;
pub mod train;

pub use domain::{validate_pair, DomainError, Geometry, LabelMap, Sex, SubjectAttributes, TensorShape3, Volume};
