//! Class and background descriptors built from the gallery.
//!
//! Each gallery sample is segmented and embedded; its foreground cells pool
//! into a positive prototype and its background cells into a negative one.
//! A class descriptor is the mean positive prototype plus every individual
//! positive prototype of the class. Negative prototypes of the whole gallery
//! form one shared background descriptor.

mod pooling;
mod store;

use thiserror::Error;

pub use pooling::{negative_prototype, positive_prototype, resize_mask, sample_prototypes};
pub use store::{
    build_class_descriptor, build_store, extend_store, load_store, save_store, BackgroundDescriptor, ClassDescriptor,
    DescriptorStore, Polarity, Prototype, StoreBuild, StoreMetadata, StoreOptions, STORE_VERSION,
};

use crate::backends::BackendError;

#[derive(Debug, Error)]
pub enum DescriptorError {
    #[error("mask has no foreground cell at feature resolution")]
    EmptyForeground,
    #[error("mask has no background cell at feature resolution")]
    EmptyBackground,
    #[error("pooled prototype is the zero vector")]
    ZeroPrototype,
    #[error("mask is {mask_h}x{mask_w} but image is {image_h}x{image_w}")]
    MaskMismatch { mask_h: usize, mask_w: usize, image_h: usize, image_w: usize },
    #[error("no usable sample for class `{0}`")]
    NoSurvivors(String),
    #[error("descriptor build failed for: {}", .0.iter().map(|(c, why)| format!("{c} ({why})")).collect::<Vec<_>>().join(", "))]
    ClassesFailed(Vec<(String, String)>),
    #[error("no class produced a descriptor")]
    NoDescriptors,
    #[error("class `{0}` already has a descriptor")]
    DuplicateClass(String),
    #[error("incompatible descriptor store: {0}")]
    Incompatible(String),
    #[error("descriptor store version {found} is not supported (expected {STORE_VERSION})")]
    VersionMismatch { found: u64 },
    #[error("corrupt descriptor store: {0}")]
    Corrupt(String),
    #[error("descriptor store io: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Backend(#[from] BackendError),
}
