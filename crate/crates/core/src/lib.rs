//! Training-free adaptation of open-vocabulary detectors to X-ray imagery.
//!
//! The toolkit replaces a detector's text classifier with a visual one:
//!
//! 1. [`acquisition`] gathers a per-class gallery of X-ray samples, first from
//!    an in-house labelled dataset and otherwise from web RGB images that are
//!    re-rendered in X-ray style by [`material`].
//! 2. [`descriptors`] pools patch features under segmentation masks into
//!    positive prototypes per class and negative (background) prototypes.
//! 3. [`classifier`] scores detector proposals against those prototypes with
//!    cosine similarity, rejects background matches and applies a
//!    consistency margin before emitting detections.
//! 4. [`eval`] runs COCO-style AP evaluation, gallery-composition sweeps and
//!    hyperparameter sweeps.
//!
//! All heavy models sit behind the traits in [`backends`]; the bundled stub
//! backends make the whole pipeline run offline and deterministically.

pub mod acquisition;
pub mod backends;
pub mod classifier;
pub mod config;
pub mod descriptors;
pub mod eval;
pub mod imageio;
pub mod material;
pub mod synth;

pub use backends::{BBox, BackendBundle, BinaryMask, ImageTensor, PatchGrid, Proposal};

/// Canonical form used for every class-name comparison: lower case with
/// runs of whitespace collapsed to a single space.
pub fn normalize_class_name(name: &str) -> String {
    name.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

#[cfg(test)]
mod tests {
    use super::normalize_class_name;

    #[test]
    fn normalization() {
        assert_eq!(normalize_class_name("  Beer\tGlass "), "beer glass");
        assert_eq!(normalize_class_name("KNIFE"), "knife");
        assert_eq!(normalize_class_name(""), "");
    }
}
