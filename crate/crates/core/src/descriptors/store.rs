use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{sample_prototypes, DescriptorError};
use crate::acquisition::{Gallery, GallerySample};
use crate::backends::BackendBundle;
use crate::normalize_class_name;

pub const STORE_VERSION: u64 = 1;

/// Tolerance on the stored class mean versus the mean of its members.
const MEAN_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    Positive,
    Negative,
}

/// One pooled embedding, stored unnormalized.
#[derive(Debug, Clone, PartialEq)]
pub struct Prototype {
    pub vector: Vec<f64>,
    pub polarity: Polarity,
    pub sample_id: String,
}

fn mean_of<'a>(vectors: impl Iterator<Item = &'a [f64]>, dim: usize) -> Option<Vec<f64>> {
    let mut acc = vec![0.0; dim];
    let mut n = 0usize;
    for v in vectors {
        for (a, x) in acc.iter_mut().zip(v) {
            *a += x;
        }
        n += 1;
    }
    (n > 0).then(|| acc.into_iter().map(|a| a / n as f64).collect())
}

/// Mean positive prototype plus every member prototype of one class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassDescriptor {
    pub class_name: String,
    pub mean_prototype: Vec<f64>,
    pub members: Vec<Prototype>,
    pub k_used: usize,
}

impl ClassDescriptor {
    pub fn from_members(class_name: &str, members: Vec<Prototype>) -> Result<Self, DescriptorError> {
        let dim = members.first().map(|m| m.vector.len()).ok_or_else(|| DescriptorError::NoSurvivors(class_name.into()))?;
        let mean_prototype = mean_of(members.iter().map(|m| m.vector.as_slice()), dim).expect("members are non-empty");
        Ok(Self { class_name: class_name.to_string(), mean_prototype, k_used: members.len(), members })
    }

    /// Mean first, then members.
    pub fn prototypes(&self) -> impl Iterator<Item = &[f64]> {
        std::iter::once(self.mean_prototype.as_slice()).chain(self.members.iter().map(|m| m.vector.as_slice()))
    }

    /// Max-norm distance between the stored mean and the mean of the members.
    pub fn mean_consistency_error(&self) -> f64 {
        let recomputed = mean_of(self.members.iter().map(|m| m.vector.as_slice()), self.mean_prototype.len())
            .unwrap_or_else(|| vec![f64::INFINITY; self.mean_prototype.len()]);
        self.mean_prototype
            .iter()
            .zip(&recomputed)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Negative prototypes pooled over the whole gallery. Without members,
/// background rejection is disabled.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BackgroundDescriptor {
    pub mean_prototype: Option<Vec<f64>>,
    pub members: Vec<Prototype>,
}

impl BackgroundDescriptor {
    pub fn from_members(members: Vec<Prototype>) -> Self {
        let dim = members.first().map(|m| m.vector.len()).unwrap_or(0);
        let mean_prototype = mean_of(members.iter().map(|m| m.vector.as_slice()), dim);
        Self { mean_prototype, members }
    }

    pub fn is_enabled(&self) -> bool {
        self.mean_prototype.is_some()
    }

    pub fn prototypes(&self) -> impl Iterator<Item = &[f64]> {
        self.mean_prototype.as_deref().into_iter().chain(self.members.iter().map(|m| m.vector.as_slice()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct StoreMetadata {
    pub extractor_id: String,
    pub segmenter_id: String,
    /// Embedding space of the prototypes; proposal features must match it.
    pub feature_space: String,
    #[serde(default)]
    pub build_timestamp: Option<String>,
    #[serde(default)]
    pub config_hash: Option<String>,
}

/// Class descriptors plus the shared background descriptor.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorStore {
    dim: usize,
    descriptors: BTreeMap<String, ClassDescriptor>,
    background: BackgroundDescriptor,
    metadata: StoreMetadata,
}

impl DescriptorStore {
    /// Assemble a store, checking dimensions and member counts. Mean
    /// consistency is checked when a store is saved or loaded.
    pub fn from_parts(
        dim: usize,
        descriptors: BTreeMap<String, ClassDescriptor>,
        background: BackgroundDescriptor,
        metadata: StoreMetadata,
    ) -> Result<Self, DescriptorError> {
        let store = Self { dim, descriptors, background, metadata };
        store.validate()?;
        Ok(store)
    }

    fn validate(&self) -> Result<(), DescriptorError> {
        let corrupt = |m: String| Err(DescriptorError::Corrupt(m));
        if self.dim == 0 {
            return corrupt("dimension is zero".into());
        }
        let check_vec = |what: &str, v: &[f64]| -> Result<(), DescriptorError> {
            if v.len() != self.dim {
                return Err(DescriptorError::Corrupt(format!("{what} has {} dims, store has {}", v.len(), self.dim)));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(DescriptorError::Corrupt(format!("{what} has non-finite values")));
            }
            if v.iter().all(|x| *x == 0.0) {
                return Err(DescriptorError::Corrupt(format!("{what} is the zero vector")));
            }
            Ok(())
        };
        let mut seen = BTreeSet::new();
        for (name, d) in &self.descriptors {
            if !seen.insert(normalize_class_name(name)) {
                return corrupt(format!("class `{name}` listed twice"));
            }
            if name != &d.class_name {
                return corrupt(format!("descriptor keyed `{name}` is named `{}`", d.class_name));
            }
            if d.members.is_empty() || d.k_used != d.members.len() {
                return corrupt(format!("class `{name}` has k_used {} but {} members", d.k_used, d.members.len()));
            }
            check_vec(&format!("mean of `{name}`"), &d.mean_prototype)?;
            for m in &d.members {
                check_vec(&format!("member {} of `{name}`", m.sample_id), &m.vector)?;
            }
        }
        if let Some(mean) = &self.background.mean_prototype {
            check_vec("background mean", mean)?;
        } else if !self.background.members.is_empty() {
            return corrupt("background has members but no mean".into());
        }
        for m in &self.background.members {
            check_vec(&format!("background member {}", m.sample_id), &m.vector)?;
        }
        Ok(())
    }

    /// Every class mean must equal the mean of its members within 1e-6.
    pub fn check_consistency(&self) -> Result<(), DescriptorError> {
        for (name, d) in &self.descriptors {
            let err = d.mean_consistency_error();
            if err > MEAN_TOLERANCE {
                return Err(DescriptorError::Corrupt(format!("mean of `{name}` is {err:e} away from its members")));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn descriptors(&self) -> &BTreeMap<String, ClassDescriptor> {
        &self.descriptors
    }

    pub fn get(&self, class_name: &str) -> Option<&ClassDescriptor> {
        self.descriptors.get(class_name)
    }

    pub fn background(&self) -> &BackgroundDescriptor {
        &self.background
    }

    pub fn metadata(&self) -> &StoreMetadata {
        &self.metadata
    }

    pub fn class_names(&self) -> Vec<String> {
        self.descriptors.keys().cloned().collect()
    }

    pub fn is_empty(&self) -> bool {
        self.descriptors.is_empty()
    }

    /// Refuse proposal features from another embedding space or dimension.
    pub fn check_compatible(&self, feature_space: &str, dim: usize) -> Result<(), DescriptorError> {
        if dim != self.dim {
            return Err(DescriptorError::Incompatible(format!(
                "store holds {}-dim prototypes but features are {dim}-dim",
                self.dim
            )));
        }
        if feature_space != self.metadata.feature_space {
            return Err(DescriptorError::Incompatible(format!(
                "store was built in feature space `{}` but proposals come from `{feature_space}`",
                self.metadata.feature_space
            )));
        }
        Ok(())
    }

    /// Copy with descriptor contents moved between class names:
    /// `mapping[old] = new` gives class `new` the descriptor built for `old`.
    pub fn relabeled(&self, mapping: &BTreeMap<String, String>) -> Result<Self, DescriptorError> {
        let descriptors = self
            .descriptors
            .iter()
            .map(|(name, d)| {
                let new = mapping.get(name).cloned().unwrap_or_else(|| name.clone());
                (new.clone(), ClassDescriptor { class_name: new, ..d.clone() })
            })
            .collect::<BTreeMap<_, _>>();
        if descriptors.len() != self.descriptors.len() {
            return Err(DescriptorError::Corrupt("relabeling is not a bijection".into()));
        }
        Self::from_parts(self.dim, descriptors, self.background.clone(), self.metadata.clone())
    }

    pub fn to_json(&self) -> String {
        let members = |ms: &[Prototype]| {
            ms.iter().map(|m| MemberDoc { sample_id: m.sample_id.clone(), vector: m.vector.clone() }).collect()
        };
        let doc = StoreDoc {
            version: STORE_VERSION,
            dim: self.dim,
            metadata: self.metadata.clone(),
            background: BackgroundDoc {
                mean: self.background.mean_prototype.clone(),
                members: members(&self.background.members),
            },
            classes: self
                .descriptors
                .iter()
                .map(|(name, d)| {
                    let doc = ClassDoc { mean: d.mean_prototype.clone(), members: members(&d.members), k_used: d.k_used };
                    (name.clone(), doc)
                })
                .collect(),
        };
        serde_json::to_string(&doc).expect("store serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, DescriptorError> {
        let raw: Value = serde_json::from_str(text).map_err(|e| DescriptorError::Corrupt(e.to_string()))?;
        let version = raw
            .get("version")
            .and_then(Value::as_u64)
            .ok_or_else(|| DescriptorError::Corrupt("missing version".into()))?;
        if version != STORE_VERSION {
            return Err(DescriptorError::VersionMismatch { found: version });
        }
        let doc: StoreDoc = serde_json::from_value(raw).map_err(|e| DescriptorError::Corrupt(e.to_string()))?;
        let to_protos = |ms: Vec<MemberDoc>, polarity: Polarity| -> Vec<Prototype> {
            ms.into_iter().map(|m| Prototype { vector: m.vector, polarity, sample_id: m.sample_id }).collect()
        };
        let descriptors = doc
            .classes
            .into_iter()
            .map(|(name, c)| {
                let d = ClassDescriptor {
                    class_name: name.clone(),
                    mean_prototype: c.mean,
                    members: to_protos(c.members, Polarity::Positive),
                    k_used: c.k_used,
                };
                (name, d)
            })
            .collect();
        let background = BackgroundDescriptor {
            mean_prototype: doc.background.mean,
            members: to_protos(doc.background.members, Polarity::Negative),
        };
        let store = Self::from_parts(doc.dim, descriptors, background, doc.metadata)?;
        store.check_consistency()?;
        Ok(store)
    }
}

#[derive(Serialize, Deserialize)]
struct MemberDoc {
    sample_id: String,
    vector: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ClassDoc {
    mean: Vec<f64>,
    members: Vec<MemberDoc>,
    k_used: usize,
}

#[derive(Serialize, Deserialize)]
struct BackgroundDoc {
    mean: Option<Vec<f64>>,
    members: Vec<MemberDoc>,
}

#[derive(Serialize, Deserialize)]
struct StoreDoc {
    version: u64,
    dim: usize,
    metadata: StoreMetadata,
    background: BackgroundDoc,
    classes: BTreeMap<String, ClassDoc>,
}

pub fn save_store(store: &DescriptorStore, path: &Path) -> Result<(), DescriptorError> {
    store.check_consistency()?;
    Ok(fs::write(path, store.to_json())?)
}

pub fn load_store(path: &Path) -> Result<DescriptorStore, DescriptorError> {
    DescriptorStore::from_json(&fs::read_to_string(path)?)
}

/// Build one class descriptor. Samples whose foreground vanishes at feature
/// resolution contribute no positive prototype; samples without background
/// contribute no negative one. Returns the descriptor and the negatives.
pub fn build_class_descriptor(
    class_name: &str,
    samples: &[GallerySample],
    backends: &BackendBundle,
) -> Result<(ClassDescriptor, Vec<Prototype>), DescriptorError> {
    let mut positives = Vec::new();
    let mut negatives = Vec::new();
    for s in samples {
        let mask = match backends.segmenter.segment(&s.image) {
            Ok(m) => m,
            Err(e) => {
                warn!("segmentation failed on {}: {e}", s.source_id);
                continue;
            }
        };
        if !mask.matches_image(&s.image) {
            warn!("skipping {}: {}", s.source_id, DescriptorError::MaskMismatch {
                mask_h: mask.height(),
                mask_w: mask.width(),
                image_h: s.image.height(),
                image_w: s.image.width(),
            });
            continue;
        }
        let grid = backends.extract_checked(&s.image)?;
        let (pos, neg) = sample_prototypes(&grid, &mask);
        match pos {
            Ok(v) => positives.push(Prototype { vector: v, polarity: Polarity::Positive, sample_id: s.source_id.clone() }),
            Err(e) => warn!("no positive prototype from {}: {e}", s.source_id),
        }
        if let Ok(v) = neg {
            negatives.push(Prototype { vector: v, polarity: Polarity::Negative, sample_id: s.source_id.clone() });
        }
    }
    let descriptor = ClassDescriptor::from_members(class_name, positives)?;
    Ok((descriptor, negatives))
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct StoreOptions {
    /// Produce a store even when some classes fail.
    pub allow_partial: bool,
    pub build_timestamp: Option<String>,
    pub config_hash: Option<String>,
}

/// A store plus the classes that could not be described.
#[derive(Debug, Clone)]
pub struct StoreBuild {
    pub store: DescriptorStore,
    pub failed: Vec<(String, String)>,
}

type ClassOutcome = (String, Result<(ClassDescriptor, Vec<Prototype>), String>);

fn describe_classes(gallery: &Gallery, backends: &BackendBundle) -> Result<Vec<ClassOutcome>, DescriptorError> {
    gallery
        .vocabulary()
        .par_iter()
        .map(|class| {
            let samples = gallery.samples(class);
            if samples.is_empty() {
                return Ok((class.clone(), Err("empty gallery".to_string())));
            }
            match build_class_descriptor(class, samples, backends) {
                Ok(built) => Ok((class.clone(), Ok(built))),
                Err(DescriptorError::NoSurvivors(_)) => Ok((class.clone(), Err("no usable sample".to_string()))),
                Err(e) => Err(e),
            }
        })
        .collect()
}

fn split_outcomes(
    outcomes: Vec<ClassOutcome>,
    allow_partial: bool,
) -> Result<(BTreeMap<String, ClassDescriptor>, Vec<Prototype>, Vec<(String, String)>), DescriptorError> {
    let mut descriptors = BTreeMap::new();
    let mut negatives = Vec::new();
    let mut failed = Vec::new();
    for (class, outcome) in outcomes {
        match outcome {
            Ok((d, negs)) => {
                descriptors.insert(class, d);
                negatives.extend(negs);
            }
            Err(why) => failed.push((class, why)),
        }
    }
    if !failed.is_empty() && !allow_partial {
        return Err(DescriptorError::ClassesFailed(failed));
    }
    for (class, why) in &failed {
        warn!("no descriptor for `{class}`: {why}");
    }
    Ok((descriptors, negatives, failed))
}

/// Build descriptors for every gallery class and the background descriptor
/// from the negatives of all classes.
pub fn build_store(gallery: &Gallery, backends: &BackendBundle, options: &StoreOptions) -> Result<StoreBuild, DescriptorError> {
    let outcomes = describe_classes(gallery, backends)?;
    let (descriptors, negatives, failed) = split_outcomes(outcomes, options.allow_partial)?;
    if descriptors.is_empty() {
        return Err(DescriptorError::NoDescriptors);
    }
    let metadata = StoreMetadata {
        extractor_id: backends.extractor.id().to_string(),
        segmenter_id: backends.segmenter.id().to_string(),
        feature_space: backends.extractor.id().to_string(),
        build_timestamp: options.build_timestamp.clone(),
        config_hash: options.config_hash.clone(),
    };
    let store = DescriptorStore::from_parts(
        backends.extractor.dim(),
        descriptors,
        BackgroundDescriptor::from_members(negatives),
        metadata,
    )?;
    Ok(StoreBuild { store, failed })
}

/// Add new classes to an existing store. Existing descriptors are carried
/// over unchanged; the background gains the new negatives.
pub fn extend_store(
    store: &DescriptorStore,
    new_classes: &Gallery,
    backends: &BackendBundle,
    options: &StoreOptions,
) -> Result<StoreBuild, DescriptorError> {
    let meta = store.metadata();
    if meta.extractor_id != backends.extractor.id() || meta.segmenter_id != backends.segmenter.id() {
        return Err(DescriptorError::Incompatible(format!(
            "store built with extractor `{}` / segmenter `{}`, extending with `{}` / `{}`",
            meta.extractor_id,
            meta.segmenter_id,
            backends.extractor.id(),
            backends.segmenter.id()
        )));
    }
    if backends.extractor.dim() != store.dim() {
        return Err(DescriptorError::Incompatible(format!(
            "store dim {} but extractor dim {}",
            store.dim(),
            backends.extractor.dim()
        )));
    }
    let existing: BTreeSet<String> = store.descriptors.keys().map(|c| normalize_class_name(c)).collect();
    if let Some(dup) = new_classes.vocabulary().iter().find(|c| existing.contains(&normalize_class_name(c))) {
        return Err(DescriptorError::DuplicateClass(dup.clone()));
    }

    let outcomes = describe_classes(new_classes, backends)?;
    let (added, negatives, failed) = split_outcomes(outcomes, options.allow_partial)?;
    let mut descriptors = store.descriptors.clone();
    descriptors.extend(added);
    let mut background = store.background.members.clone();
    background.extend(negatives);
    let store = DescriptorStore::from_parts(
        store.dim,
        descriptors,
        BackgroundDescriptor::from_members(background),
        store.metadata.clone(),
    )?;
    Ok(StoreBuild { store, failed })
}
