//! Spread Spurious Attribute: semi-supervised pseudo-labeling of a spurious
//! attribute with group-wise adaptive confidence thresholds, followed by
//! worst-group robust training on the pseudo-labeled set.
//!
//! The same thresholding machinery also drives class-imbalanced
//! semi-supervised learning, where each class plays the role of a group.

pub mod config;
pub mod datagen;
pub mod error;
pub mod io;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod pseudolabel;
pub mod robust;
pub mod seed;

pub use datagen::{DatasetBundle, GroupId, Sample};
pub use error::{Result, SsaError, Warning};
pub use model::{Arch, SgdConfig, SoftmaxClassifier};
