//! Material database and material transfer.
//!
//! The database maps material names to their mean X-ray appearance. It is
//! learned from in-house data by clustering class names by material and
//! averaging the segmented foreground color of every image in a cluster; with
//! no in-house data it falls back to the three conventional scanner
//! pseudo-colors. Web RGB images are then rendered as flat silhouettes in the
//! color of their class's material.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;
use std::sync::RwLock;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::acquisition::{CropConfig, DatasetIndex};
use crate::backends::{BackendBundle, BackendError, BinaryMask, ImageTensor, MaterialOracle};
use crate::normalize_class_name;

pub const MATERIAL_DB_VERSION: u32 = 1;
pub const ORGANIC: &str = "organic";
pub const INORGANIC: &str = "inorganic";
pub const METAL: &str = "metal";

/// Background used when rendering silhouettes: empty scan regions are white.
pub const WHITE_FILL: [f64; 3] = [1.0, 1.0, 1.0];
/// Background of the literal masked product (foreground color times mask).
pub const STRICT_FILL: [f64; 3] = [0.0, 0.0, 0.0];

#[derive(Debug, Error)]
pub enum MaterialError {
    #[error("material oracle reply is not a material -> classes JSON object ({reason}); raw reply: {raw}")]
    UnparseableOracleReply { raw: String, reason: String },
    #[error("no image has a non-empty foreground mask")]
    DegenerateMaterial,
    #[error("unknown material `{0}`")]
    UnknownMaterial(String),
    #[error("mask is {mask_h}x{mask_w} but image is {image_h}x{image_w}")]
    DimensionMismatch { mask_h: usize, mask_w: usize, image_h: usize, image_w: usize },
    #[error("empty vocabulary")]
    EmptyVocabulary,
    #[error("material database version {found} is not supported (expected {MATERIAL_DB_VERSION})")]
    VersionMismatch { found: u32 },
    #[error("corrupt material database: {0}")]
    Corrupt(String),
    #[error("material database io: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Backend(#[from] BackendError),
}

/// Flat X-ray color of one material.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaterialAppearance {
    pub name: String,
    pub color: [f64; 3],
    /// Number of images averaged; 0 for configured constants.
    pub support: usize,
}

/// Colors of the fallback database.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FallbackPalette {
    pub organic: [f64; 3],
    pub inorganic: [f64; 3],
    pub metal: [f64; 3],
}

impl Default for FallbackPalette {
    fn default() -> Self {
        Self {
            organic: [0.95, 0.55, 0.15],
            inorganic: [0.20, 0.70, 0.30],
            metal: [0.15, 0.35, 0.80],
        }
    }
}

impl FallbackPalette {
    pub fn color_of(&self, material: &str) -> Option<[f64; 3]> {
        match material {
            ORGANIC => Some(self.organic),
            INORGANIC => Some(self.inorganic),
            METAL => Some(self.metal),
            _ => None,
        }
    }
}

/// Knobs for database construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaterialOptions {
    pub default_material: String,
    pub palette: FallbackPalette,
    pub crop: CropConfig,
}

impl Default for MaterialOptions {
    fn default() -> Self {
        Self { default_material: INORGANIC.into(), palette: FallbackPalette::default(), crop: CropConfig::default() }
    }
}

/// Materials, class clusters and a shared class -> material cache.
#[derive(Debug)]
pub struct MaterialDatabase {
    materials: BTreeMap<String, MaterialAppearance>,
    clusters: BTreeMap<String, Vec<String>>,
    assignments: RwLock<BTreeMap<String, String>>,
    default_material: String,
}

impl Clone for MaterialDatabase {
    fn clone(&self) -> Self {
        Self {
            materials: self.materials.clone(),
            clusters: self.clusters.clone(),
            assignments: RwLock::new(self.assignments()),
            default_material: self.default_material.clone(),
        }
    }
}

impl PartialEq for MaterialDatabase {
    fn eq(&self, other: &Self) -> bool {
        self.materials == other.materials
            && self.clusters == other.clusters
            && self.default_material == other.default_material
            && self.assignments() == other.assignments()
    }
}

#[derive(Serialize, Deserialize)]
struct MaterialEntryDoc {
    color: [f64; 3],
    support: usize,
}

#[derive(Serialize, Deserialize)]
struct MaterialDbDoc {
    version: u32,
    default_material: String,
    materials: BTreeMap<String, MaterialEntryDoc>,
    clusters: BTreeMap<String, Vec<String>>,
    assignments: BTreeMap<String, String>,
}

impl MaterialDatabase {
    /// Assemble a database, adding the default material from `palette` if it
    /// is missing so that repairs always have a valid target.
    pub fn new(
        mut materials: BTreeMap<String, MaterialAppearance>,
        clusters: BTreeMap<String, Vec<String>>,
        default_material: &str,
        palette: &FallbackPalette,
    ) -> Self {
        if !materials.contains_key(default_material) {
            let color = palette.color_of(default_material).unwrap_or(palette.inorganic);
            materials.insert(
                default_material.to_string(),
                MaterialAppearance { name: default_material.to_string(), color, support: 0 },
            );
        }
        Self {
            materials,
            clusters,
            assignments: RwLock::new(BTreeMap::new()),
            default_material: default_material.to_string(),
        }
    }

    pub fn materials(&self) -> &BTreeMap<String, MaterialAppearance> {
        &self.materials
    }

    pub fn material_names(&self) -> Vec<String> {
        self.materials.keys().cloned().collect()
    }

    pub fn clusters(&self) -> &BTreeMap<String, Vec<String>> {
        &self.clusters
    }

    pub fn default_material(&self) -> &str {
        &self.default_material
    }

    /// Snapshot of the cached oracle assignments.
    pub fn assignments(&self) -> BTreeMap<String, String> {
        self.assignments.read().expect("assignment cache poisoned").clone()
    }

    pub fn appearance(&self, material: &str) -> Result<&MaterialAppearance, MaterialError> {
        self.materials.get(material).ok_or_else(|| MaterialError::UnknownMaterial(material.to_string()))
    }

    /// Material whose cluster lists `class_name`.
    pub fn cluster_of(&self, class_name: &str) -> Option<&str> {
        let norm = normalize_class_name(class_name);
        self.clusters
            .iter()
            .find(|(_, cs)| cs.iter().any(|c| normalize_class_name(c) == norm))
            .map(|(m, _)| m.as_str())
    }

    /// Insert unless already cached; returns the cached value.
    fn cache_assignment(&self, class_name: &str, material: String) -> String {
        let mut cache = self.assignments.write().expect("assignment cache poisoned");
        cache.entry(normalize_class_name(class_name)).or_insert(material).clone()
    }

    pub fn to_json(&self) -> String {
        let doc = MaterialDbDoc {
            version: MATERIAL_DB_VERSION,
            default_material: self.default_material.clone(),
            materials: self
                .materials
                .iter()
                .map(|(k, m)| (k.clone(), MaterialEntryDoc { color: m.color, support: m.support }))
                .collect(),
            clusters: self.clusters.clone(),
            assignments: self.assignments(),
        };
        serde_json::to_string_pretty(&doc).expect("material database serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, MaterialError> {
        let raw: Value = serde_json::from_str(text).map_err(|e| MaterialError::Corrupt(e.to_string()))?;
        let version = raw.get("version").and_then(Value::as_u64).ok_or_else(|| MaterialError::Corrupt("missing version".into()))?;
        if version != MATERIAL_DB_VERSION as u64 {
            return Err(MaterialError::VersionMismatch { found: version as u32 });
        }
        let doc: MaterialDbDoc = serde_json::from_value(raw).map_err(|e| MaterialError::Corrupt(e.to_string()))?;
        let materials: BTreeMap<String, MaterialAppearance> = doc
            .materials
            .into_iter()
            .map(|(name, e)| {
                let appearance = MaterialAppearance { name: name.clone(), color: e.color, support: e.support };
                (name, appearance)
            })
            .collect();
        if let Some(m) = materials.values().find(|m| m.color.iter().any(|v| !v.is_finite() || !(0.0..=1.0).contains(v))) {
            return Err(MaterialError::Corrupt(format!("material `{}` color out of range", m.name)));
        }
        if !materials.contains_key(&doc.default_material) {
            return Err(MaterialError::Corrupt(format!("default material `{}` not defined", doc.default_material)));
        }
        if let Some((class, m)) = doc.assignments.iter().find(|(_, m)| !materials.contains_key(*m)) {
            return Err(MaterialError::Corrupt(format!("class `{class}` assigned to undefined material `{m}`")));
        }
        Ok(Self {
            materials,
            clusters: doc.clusters,
            assignments: RwLock::new(doc.assignments),
            default_material: doc.default_material,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), MaterialError> {
        Ok(fs::write(path, self.to_json())?)
    }

    pub fn load(path: &Path) -> Result<Self, MaterialError> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

/// Database of the three conventional scanner pseudo-colors.
pub fn fallback_material_db() -> MaterialDatabase {
    fallback_material_db_with(&FallbackPalette::default(), INORGANIC)
}

pub fn fallback_material_db_with(palette: &FallbackPalette, default_material: &str) -> MaterialDatabase {
    let materials = [(ORGANIC, palette.organic), (INORGANIC, palette.inorganic), (METAL, palette.metal)]
        .into_iter()
        .map(|(n, c)| (n.to_string(), MaterialAppearance { name: n.to_string(), color: c, support: 0 }))
        .collect();
    MaterialDatabase::new(materials, BTreeMap::new(), default_material, palette)
}

/// Strip a Markdown code fence around a JSON reply.
fn strip_fence(raw: &str) -> &str {
    let t = raw.trim();
    let Some(inner) = t.strip_prefix("```") else { return t };
    let inner = inner.trim_start_matches(|c: char| c.is_ascii_alphanumeric());
    inner.strip_suffix("```").unwrap_or(inner).trim()
}

/// Partition `vocab` by material using the oracle. Classes the oracle omits
/// go to `default_material`; a class listed twice keeps its first material;
/// names outside the vocabulary are ignored. Members follow vocabulary order.
pub fn cluster_materials(
    vocab: &[String],
    oracle: &dyn MaterialOracle,
    default_material: &str,
) -> Result<BTreeMap<String, Vec<String>>, MaterialError> {
    if vocab.is_empty() {
        return Err(MaterialError::EmptyVocabulary);
    }
    let raw = oracle.cluster(vocab)?;
    let unparseable = |reason: &str| MaterialError::UnparseableOracleReply { raw: raw.clone(), reason: reason.to_string() };
    let parsed: Value = serde_json::from_str(strip_fence(&raw)).map_err(|e| unparseable(&e.to_string()))?;
    let obj = parsed.as_object().ok_or_else(|| unparseable("top level is not an object"))?;

    let mut assigned: BTreeMap<String, String> = BTreeMap::new();
    for (material, members) in obj {
        let material = normalize_class_name(material);
        let members = members.as_array().ok_or_else(|| unparseable("cluster value is not an array"))?;
        for m in members {
            let name = m.as_str().ok_or_else(|| unparseable("cluster member is not a string"))?;
            let norm = normalize_class_name(name);
            if !vocab.iter().any(|v| normalize_class_name(v) == norm) {
                warn!("material oracle returned unknown class `{name}`");
                continue;
            }
            assigned.entry(norm).or_insert_with(|| material.clone());
        }
    }

    let mut clusters: BTreeMap<String, Vec<String>> = BTreeMap::new();
    let mut seen = BTreeSet::new();
    for class in vocab {
        let norm = normalize_class_name(class);
        if !seen.insert(norm.clone()) {
            continue;
        }
        let material = assigned.get(&norm).cloned().unwrap_or_else(|| default_material.to_string());
        clusters.entry(material).or_default().push(class.clone());
    }
    Ok(clusters)
}

/// Mean over images of each image's mean foreground color. Images whose mask
/// is empty do not contribute.
pub fn compute_appearance(images_with_masks: &[(ImageTensor, BinaryMask)]) -> Result<[f64; 3], MaterialError> {
    let mut total = [0.0; 3];
    let mut used = 0usize;
    for (image, mask) in images_with_masks {
        check_dims(image, mask)?;
        let n = mask.count();
        if n == 0 {
            continue;
        }
        let mut sum = [0.0; 3];
        for (p, _) in image.pixels().iter().zip(mask.values()).filter(|(_, m)| **m) {
            for k in 0..3 {
                sum[k] += p[k];
            }
        }
        for k in 0..3 {
            total[k] += sum[k] / n as f64;
        }
        used += 1;
    }
    if used == 0 {
        return Err(MaterialError::DegenerateMaterial);
    }
    Ok(total.map(|t| t / used as f64))
}

fn check_dims(image: &ImageTensor, mask: &BinaryMask) -> Result<(), MaterialError> {
    if mask.matches_image(image) {
        Ok(())
    } else {
        Err(MaterialError::DimensionMismatch {
            mask_h: mask.height(),
            mask_w: mask.width(),
            image_h: image.height(),
            image_w: image.width(),
        })
    }
}

/// Learn a material database from the in-house index, or return the
/// fallback database when the index is empty.
pub fn build_material_db(
    index: &DatasetIndex,
    backends: &BackendBundle,
    options: &MaterialOptions,
) -> Result<MaterialDatabase, MaterialError> {
    if index.is_empty() {
        return Ok(fallback_material_db_with(&options.palette, &options.default_material));
    }
    let vocab: Vec<String> = index.vocabulary().iter().cloned().collect();
    let mut clusters = cluster_materials(&vocab, &*backends.material_oracle, &options.default_material)?;

    let learned: Vec<(String, Result<(usize, [f64; 3]), MaterialError>)> = clusters
        .par_iter()
        .map(|(material, classes)| {
            let norm: Vec<String> = classes.iter().map(|c| normalize_class_name(c)).collect();
            let pairs: Vec<(ImageTensor, BinaryMask)> = index
                .entries()
                .iter()
                .filter(|e| norm.iter().any(|c| e.has_class(c)))
                .filter_map(|e| {
                    let image = index
                        .load_image(e, &norm, &options.crop)
                        .map_err(|err| warn!("skipping {} for material `{material}`: {err}", e.image_path.display()))
                        .ok()?;
                    let mask = backends
                        .segmenter
                        .segment(&image)
                        .map_err(|err| warn!("segmentation failed on {}: {err}", e.image_path.display()))
                        .ok()?;
                    Some((image, mask))
                })
                .collect();
            let support = pairs.iter().filter(|(_, m)| !m.is_empty()).count();
            (material.clone(), compute_appearance(&pairs).map(|c| (support, c)))
        })
        .collect();

    let mut materials = BTreeMap::new();
    let mut orphaned = Vec::new();
    for (material, result) in learned {
        match result {
            Ok((support, color)) => {
                materials.insert(material.clone(), MaterialAppearance { name: material, color, support });
            }
            Err(MaterialError::DegenerateMaterial) => {
                warn!("material `{material}` has no usable foreground; reassigning its classes to `{}`", options.default_material);
                orphaned.extend(clusters.remove(&material).unwrap_or_default());
            }
            Err(e) => return Err(e),
        }
    }
    if !orphaned.is_empty() {
        let target = clusters.entry(options.default_material.clone()).or_default();
        target.extend(orphaned);
        target.sort_by_key(|c| vocab.iter().position(|v| normalize_class_name(v) == normalize_class_name(c)));
    }
    Ok(MaterialDatabase::new(materials, clusters, &options.default_material, &options.palette))
}

/// Material of `class_name`: its cluster if it has one, else the cached or
/// freshly asked oracle answer. Answers outside the database (and oracle
/// failures) are repaired to the default material.
pub fn assign_material(class_name: &str, db: &MaterialDatabase, oracle: &dyn MaterialOracle) -> String {
    if let Some(m) = db.cluster_of(class_name) {
        if db.materials.contains_key(m) {
            return m.to_string();
        }
    }
    let norm = normalize_class_name(class_name);
    if let Some(m) = db.assignments.read().expect("assignment cache poisoned").get(&norm) {
        return m.clone();
    }
    let names = db.material_names();
    let answer = match oracle.identify(class_name, &names) {
        Ok(raw) => {
            let cleaned = normalize_class_name(raw.trim().trim_matches(|c: char| c == '"' || c == '\'' || c == '.'));
            if db.materials.contains_key(&cleaned) {
                cleaned
            } else {
                warn!("oracle linked `{class_name}` to unknown material `{raw}`; using `{}`", db.default_material);
                db.default_material.clone()
            }
        }
        Err(e) => {
            warn!("material oracle failed for `{class_name}`: {e}; using `{}`", db.default_material);
            db.default_material.clone()
        }
    };
    db.cache_assignment(class_name, answer)
}

/// Render a silhouette: `appearance` where the mask is set, `background_fill` elsewhere.
pub fn transfer(
    image: &ImageTensor,
    mask: &BinaryMask,
    appearance: [f64; 3],
    background_fill: [f64; 3],
) -> Result<ImageTensor, MaterialError> {
    check_dims(image, mask)?;
    let pixels = mask.values().iter().map(|m| if *m { appearance } else { background_fill }).collect();
    Ok(ImageTensor::new(image.height(), image.width(), pixels)?)
}
