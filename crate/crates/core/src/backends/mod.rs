//! Interfaces to the heavy external models and the deterministic stand-ins
//! that make the pipeline runnable offline.
//!
//! Every stage of the toolkit talks to models only through the traits in
//! this module: a [`Segmenter`] producing foreground masks, a
//! [`FeatureExtractor`] producing patch embeddings, a [`MaterialOracle`]
//! answering material questions about class names, a [`ProposalSource`]
//! producing scored regions with pooled features, and an [`RgbFilter`]
//! used to vet web images. Implementations must be safe for concurrent
//! read-only use once constructed.
//!
//! The [`stub`] implementations are pure functions of their inputs. Real
//! model adapters plug in through [`registry::BackendRegistry`].

mod image;
pub mod registry;
pub mod stub;

use std::sync::Arc;

use thiserror::Error;

pub use self::image::{BBox, BinaryMask, ImageTensor, PatchGrid, Proposal};
pub use registry::{BackendRegistry, BackendSpec, BackendsConfig};

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("unknown {kind} backend `{name}`")]
    UnknownBackend { kind: &'static str, name: String },
    #[error("bad option for {backend}: {message}")]
    BadOption { backend: String, message: String },
    #[error("backend `{backend}` failed: {message}")]
    Failed { backend: String, message: String },
}

/// Foreground segmentation (one binary mask per image).
pub trait Segmenter: Send + Sync {
    fn id(&self) -> &str;
    fn segment(&self, image: &ImageTensor) -> Result<BinaryMask, BackendError>;
}

/// Dense per-patch feature extraction.
pub trait FeatureExtractor: Send + Sync {
    fn id(&self) -> &str;
    /// Embedding dimension; constant for the lifetime of the extractor.
    fn dim(&self) -> usize;
    fn extract(&self, image: &ImageTensor) -> Result<PatchGrid, BackendError>;
}

/// Material knowledge about class names, usually backed by a language model.
///
/// Replies are returned raw so that callers can validate and repair them.
pub trait MaterialOracle: Send + Sync {
    fn id(&self) -> &str;
    /// Group `classes` by primary material. The reply is a JSON object
    /// mapping material names to arrays of class names.
    fn cluster(&self, classes: &[String]) -> Result<String, BackendError>;
    /// Pick the material of `class_name` among `materials`.
    fn identify(&self, class_name: &str, materials: &[String]) -> Result<String, BackendError>;
}

/// Region proposals with pooled features (the detector's RPN and box head).
pub trait ProposalSource: Send + Sync {
    fn id(&self) -> &str;
    /// Name of the embedding space proposal features live in. Descriptor
    /// stores built with a different extractor are rejected at detect time.
    fn feature_space(&self) -> &str;
    fn dim(&self) -> usize;
    fn propose(&self, image: &ImageTensor) -> Result<Vec<Proposal>, BackendError>;
}

/// RGB detector confidence that `class_name` is present in `image`, in `[0, 1]`.
pub trait RgbFilter: Send + Sync {
    fn id(&self) -> &str;
    fn confidence(&self, image: &ImageTensor, class_name: &str) -> Result<f64, BackendError>;
}

/// The full set of models one pipeline run uses.
#[derive(Clone)]
pub struct BackendBundle {
    pub segmenter: Arc<dyn Segmenter>,
    pub extractor: Arc<dyn FeatureExtractor>,
    pub material_oracle: Arc<dyn MaterialOracle>,
    pub proposal_source: Arc<dyn ProposalSource>,
    pub rgb_filter: Arc<dyn RgbFilter>,
}

impl BackendBundle {
    /// All-stub bundle with default options.
    pub fn stub() -> Self {
        BackendRegistry::with_stubs()
            .build(&BackendsConfig::default())
            .expect("default stub configuration is valid")
    }

    /// Extract and check that the extractor honoured its declared dimension.
    pub fn extract_checked(&self, image: &ImageTensor) -> Result<PatchGrid, BackendError> {
        let grid = self.extractor.extract(image)?;
        if grid.dim() != self.extractor.dim() {
            return Err(BackendError::Failed {
                backend: self.extractor.id().to_string(),
                message: format!(
                    "declared dim {} but produced {}",
                    self.extractor.dim(),
                    grid.dim()
                ),
            });
        }
        Ok(grid)
    }
}

impl std::fmt::Debug for BackendBundle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BackendBundle")
            .field("segmenter", &self.segmenter.id())
            .field("extractor", &self.extractor.id())
            .field("material_oracle", &self.material_oracle.id())
            .field("proposal_source", &self.proposal_source.id())
            .field("rgb_filter", &self.rgb_filter.id())
            .finish()
    }
}
