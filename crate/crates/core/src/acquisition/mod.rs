//! Per-class visual gallery acquisition.
//!
//! For each vocabulary class, in-house retrieval runs first. Only when it
//! returns nothing does the web path run: retrieve RGB images, keep those the
//! RGB filter detects confidently, and re-render them as X-ray silhouettes in
//! the color of the class's material. Classes with no samples from either
//! source are reported as missing rather than dropped.

mod index;
mod web;

use std::collections::{BTreeMap, BTreeSet};

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use index::{
    crop_window, read_manifest, write_manifest, CropConfig, DatasetEntry, DatasetIndex, ManifestObject,
    ManifestRecord,
};
#[cfg(feature = "live-web")]
pub use web::LiveWebClient;
pub use web::{
    filter_web, retrieve_web, FetchOutcome, FixtureWebClient, LiveSearchConfig, WebImage, WebImageClient,
    WebPayload, LIVE_PAGE_SIZE,
};

use crate::backends::{BackendBundle, BackendError, ImageTensor};
use crate::imageio::ImageIoError;
use crate::material::{assign_material, transfer, MaterialDatabase, MaterialError, WHITE_FILL};
use crate::normalize_class_name;

#[derive(Debug, Error)]
pub enum AcquisitionError {
    #[error("{}:{line}: {message}", path.display())]
    Manifest { path: std::path::PathBuf, line: usize, message: String },
    #[error("web retrieval for `{class_name}` failed: {message}")]
    Retrieval { class_name: String, message: String },
    #[error("API key variable `{0}` is not set")]
    MissingApiKey(String),
    #[error("threshold {0} outside [0, 1]")]
    InvalidThreshold(f64),
    #[error("invalid vocabulary: {0}")]
    InvalidVocabulary(String),
    #[error(transparent)]
    Image(#[from] ImageIoError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Material(#[from] MaterialError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    InHouse,
    WebSynthetic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GallerySample {
    pub image: ImageTensor,
    pub class_name: String,
    pub provenance: Provenance,
    pub source_id: String,
}

/// Samples per vocabulary class. Every vocabulary class has an entry, possibly empty.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Gallery {
    vocabulary: Vec<String>,
    per_class: BTreeMap<String, Vec<GallerySample>>,
}

impl Gallery {
    /// Gallery over `vocabulary` from the given per-class samples; classes
    /// absent from `per_class` get empty entries.
    pub fn from_parts(vocabulary: Vec<String>, mut per_class: BTreeMap<String, Vec<GallerySample>>) -> Self {
        let per_class = vocabulary
            .iter()
            .map(|c| (c.clone(), per_class.remove(c).unwrap_or_default()))
            .collect();
        Self { vocabulary, per_class }
    }

    pub fn vocabulary(&self) -> &[String] {
        &self.vocabulary
    }

    pub fn samples(&self, class_name: &str) -> &[GallerySample] {
        self.per_class.get(class_name).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Vec<GallerySample>)> {
        self.vocabulary.iter().map(move |c| (c, &self.per_class[c]))
    }

    /// Classes for which no sample was found.
    pub fn missing_classes(&self) -> Vec<String> {
        self.vocabulary.iter().filter(|c| self.per_class[*c].is_empty()).cloned().collect()
    }

    /// Per class: sample count and the provenance of its samples.
    pub fn provenance_summary(&self) -> Vec<(String, usize, Option<Provenance>)> {
        self.iter()
            .map(|(c, s)| (c.clone(), s.len(), s.first().map(|x| x.provenance)))
            .collect()
    }

    /// Keep only the first `k` samples of every class.
    pub fn truncated(&self, k: usize) -> Self {
        let per_class = self
            .per_class
            .iter()
            .map(|(c, s)| (c.clone(), s.iter().take(k).cloned().collect()))
            .collect();
        Self { vocabulary: self.vocabulary.clone(), per_class }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GalleryOptions {
    /// Samples per class.
    pub k: usize,
    /// RGB filter threshold; confidences must exceed it.
    pub tau: f64,
    pub background_fill: [f64; 3],
    pub crop: CropConfig,
}

impl Default for GalleryOptions {
    fn default() -> Self {
        Self { k: 30, tau: 0.5, background_fill: WHITE_FILL, crop: CropConfig::default() }
    }
}

/// Up to `k` in-house samples of `class_name`, in index order. Unreadable
/// images are skipped with a warning.
pub fn retrieve_in_house(class_name: &str, index: &DatasetIndex, k: usize, crop: &CropConfig) -> Vec<GallerySample> {
    let norm = normalize_class_name(class_name);
    if !index.vocabulary().contains(&norm) {
        return Vec::new();
    }
    let wanted = [norm.clone()];
    index
        .entries()
        .iter()
        .filter(|e| e.has_class(&norm))
        .filter_map(|e| match index.load_image(e, &wanted, crop) {
            Ok(image) => Some(GallerySample {
                image,
                class_name: class_name.to_string(),
                provenance: Provenance::InHouse,
                source_id: e.image_id.clone(),
            }),
            Err(err) => {
                warn!("skipping in-house sample {}: {err}", e.image_path.display());
                None
            }
        })
        .take(k)
        .collect()
}

fn web_samples(
    class_name: &str,
    client: &dyn WebImageClient,
    backends: &BackendBundle,
    db: &MaterialDatabase,
    opts: &GalleryOptions,
) -> Result<Vec<GallerySample>, AcquisitionError> {
    let candidates = retrieve_web(class_name, client, opts.k)?;
    let kept = filter_web(candidates, &*backends.rgb_filter, class_name, opts.tau)?;
    if kept.is_empty() {
        return Ok(Vec::new());
    }
    let material = assign_material(class_name, db, &*backends.material_oracle);
    let appearance = db.appearance(&material)?.color;
    let mut out = Vec::with_capacity(kept.len());
    for w in kept {
        let mask = match backends.segmenter.segment(&w.image) {
            Ok(m) => m,
            Err(e) => {
                warn!("segmentation failed on {}: {e}", w.source_id);
                continue;
            }
        };
        let image = transfer(&w.image, &mask, appearance, opts.background_fill)?;
        out.push(GallerySample {
            image,
            class_name: class_name.to_string(),
            provenance: Provenance::WebSynthetic,
            source_id: w.source_id,
        });
    }
    Ok(out)
}

/// Build the gallery for `vocab`. Classes are processed independently (and
/// in parallel); the result does not depend on scheduling.
pub fn build_gallery(
    vocab: &[String],
    index: &DatasetIndex,
    web: Option<&dyn WebImageClient>,
    backends: &BackendBundle,
    material_db: &MaterialDatabase,
    opts: &GalleryOptions,
) -> Result<Gallery, AcquisitionError> {
    if vocab.is_empty() {
        return Err(AcquisitionError::InvalidVocabulary("vocabulary is empty".into()));
    }
    let mut seen = BTreeSet::new();
    if let Some(dup) = vocab.iter().find(|c| !seen.insert(normalize_class_name(c))) {
        return Err(AcquisitionError::InvalidVocabulary(format!("duplicate class `{dup}`")));
    }
    if opts.k == 0 {
        return Err(AcquisitionError::InvalidVocabulary("k must be at least 1".into()));
    }

    let per_class = vocab
        .par_iter()
        .map(|class| {
            let in_house = retrieve_in_house(class, index, opts.k, &opts.crop);
            if !in_house.is_empty() {
                return Ok((class.clone(), in_house));
            }
            let samples = match web {
                Some(client) => web_samples(class, client, backends, material_db, opts)?,
                None => Vec::new(),
            };
            if samples.is_empty() {
                warn!("no gallery samples for `{class}`");
            }
            Ok((class.clone(), samples))
        })
        .collect::<Result<BTreeMap<_, _>, AcquisitionError>>()?;
    Ok(Gallery::from_parts(vocab.to_vec(), per_class))
}
