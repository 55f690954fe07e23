//! In-house dataset manifests.
//!
//! A manifest is a JSON-lines file, one record per image:
//!
//! ```text
//! {"image_path": "scans/0001.png", "classes": ["knife"], "split": "train",
//!  "objects": [{"class": "knife", "box": [12, 8, 44, 40], "visible": true}]}
//! ```
//!
//! `image_path` is resolved relative to the manifest's directory. `classes`
//! and `objects` are both optional; the retrievable classes of a record are
//! its `classes` plus the classes of its visible objects, minus any class
//! whose annotated objects are all invisible. `image_id` defaults to
//! `image_path`.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::AcquisitionError;
use crate::backends::{BBox, ImageTensor};
use crate::{imageio, normalize_class_name};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestObject {
    #[serde(rename = "class")]
    pub class_name: String,
    #[serde(rename = "box", default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<BBox>,
    #[serde(default = "default_visible")]
    pub visible: bool,
}

fn default_visible() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_id: Option<String>,
    pub image_path: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub classes: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub objects: Vec<ManifestObject>,
}

impl ManifestRecord {
    /// Normalized classes that may be retrieved from this record.
    pub fn retrievable_classes(&self) -> Vec<String> {
        let visible: BTreeSet<String> = self
            .objects
            .iter()
            .filter(|o| o.visible)
            .map(|o| normalize_class_name(&o.class_name))
            .collect();
        let hidden_only: BTreeSet<String> = self
            .objects
            .iter()
            .map(|o| normalize_class_name(&o.class_name))
            .filter(|c| !visible.contains(c))
            .collect();
        let mut out: Vec<String> = Vec::new();
        for c in self.classes.iter().map(|c| normalize_class_name(c)).chain(visible.iter().cloned()) {
            if !c.is_empty() && !hidden_only.contains(&c) && !out.contains(&c) {
                out.push(c);
            }
        }
        out
    }
}

/// Read a JSON-lines manifest. Blank lines are skipped.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>, AcquisitionError> {
    let text = fs::read_to_string(path)
        .map_err(|e| AcquisitionError::Manifest { path: path.to_path_buf(), line: 0, message: e.to_string() })?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| AcquisitionError::Manifest {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> std::io::Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("manifest records serialize"));
        out.push('\n');
    }
    fs::write(path, out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetEntry {
    pub image_id: String,
    pub image_path: PathBuf,
    /// Normalized retrievable classes.
    pub classes: Vec<String>,
    pub split: Option<String>,
    pub objects: Vec<ManifestObject>,
}

impl DatasetEntry {
    pub fn has_class(&self, normalized: &str) -> bool {
        self.classes.iter().any(|c| c == normalized)
    }

    /// Union of the visible boxes annotated for any of `classes` (normalized).
    pub fn union_box(&self, classes: &[String]) -> Option<BBox> {
        self.objects
            .iter()
            .filter(|o| o.visible && classes.contains(&normalize_class_name(&o.class_name)))
            .filter_map(|o| o.bbox)
            .reduce(|a, b| a.union(&b))
    }
}

/// Cropping of in-house samples to their annotated boxes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CropConfig {
    pub enabled: bool,
    /// Margin added on each side, as a fraction of the box extent.
    pub margin: f64,
}

impl Default for CropConfig {
    fn default() -> Self {
        Self { enabled: true, margin: 0.1 }
    }
}

impl CropConfig {
    pub fn disabled() -> Self {
        Self { enabled: false, ..Self::default() }
    }
}

/// Pixel window `(y0, x0, y1, x1)` of `bbox` grown by `margin` and clipped to the image.
pub fn crop_window(bbox: &BBox, margin: f64, height: usize, width: usize) -> Option<(usize, usize, usize, usize)> {
    let (mw, mh) = (bbox.width() * margin, bbox.height() * margin);
    let x0 = (bbox.x1 - mw).floor().max(0.0) as usize;
    let y0 = (bbox.y1 - mh).floor().max(0.0) as usize;
    let x1 = ((bbox.x2 + mw).ceil().max(0.0) as usize).min(width);
    let y1 = ((bbox.y2 + mh).ceil().max(0.0) as usize).min(height);
    (x0 < x1 && y0 < y1).then_some((y0, x0, y1, x1))
}

/// Immutable index over an in-house labelled X-ray dataset.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetIndex {
    entries: Vec<DatasetEntry>,
    vocabulary: BTreeSet<String>,
}

impl DatasetIndex {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Build from manifest records; relative paths resolve against `root`.
    /// With `split` set, only records of that split are kept.
    pub fn from_records(records: Vec<ManifestRecord>, root: &Path, split: Option<&str>) -> Self {
        let entries: Vec<DatasetEntry> = records
            .into_iter()
            .filter(|r| split.is_none() || r.split.as_deref() == split)
            .filter_map(|r| {
                let classes = r.retrievable_classes();
                if classes.is_empty() {
                    return None;
                }
                let path = PathBuf::from(&r.image_path);
                let image_path = if path.is_absolute() { path } else { root.join(path) };
                Some(DatasetEntry {
                    image_id: r.image_id.clone().unwrap_or_else(|| r.image_path.clone()),
                    image_path,
                    classes,
                    split: r.split,
                    objects: r.objects,
                })
            })
            .collect();
        let vocabulary = entries.iter().flat_map(|e| e.classes.iter().cloned()).collect();
        Self { entries, vocabulary }
    }

    pub fn load(path: &Path, split: Option<&str>) -> Result<Self, AcquisitionError> {
        let records = read_manifest(path)?;
        let root = path.parent().unwrap_or(Path::new("."));
        Ok(Self::from_records(records, root, split))
    }

    pub fn entries(&self) -> &[DatasetEntry] {
        &self.entries
    }

    /// Normalized class names present in the index.
    pub fn vocabulary(&self) -> &BTreeSet<String> {
        &self.vocabulary
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains_class(&self, class_name: &str) -> bool {
        self.vocabulary.contains(&normalize_class_name(class_name))
    }

    /// Sub-index holding only `classes`; entries left without classes are dropped.
    pub fn restrict_to<S: AsRef<str>>(&self, classes: &[S]) -> Self {
        let keep: BTreeSet<String> = classes.iter().map(|c| normalize_class_name(c.as_ref())).collect();
        let entries: Vec<DatasetEntry> = self
            .entries
            .iter()
            .filter_map(|e| {
                let classes: Vec<String> = e.classes.iter().filter(|c| keep.contains(*c)).cloned().collect();
                (!classes.is_empty()).then(|| DatasetEntry { classes, ..e.clone() })
            })
            .collect();
        let vocabulary = entries.iter().flat_map(|e| e.classes.iter().cloned()).collect();
        Self { entries, vocabulary }
    }

    /// Decode the entry's image, cropped around the annotated boxes of
    /// `classes` when cropping is enabled and boxes exist.
    pub fn load_image(&self, entry: &DatasetEntry, classes: &[String], crop: &CropConfig) -> Result<ImageTensor, AcquisitionError> {
        let image = imageio::load(&entry.image_path)?;
        if !crop.enabled {
            return Ok(image);
        }
        match entry
            .union_box(classes)
            .and_then(|b| crop_window(&b, crop.margin, image.height(), image.width()))
        {
            Some((y0, x0, y1, x1)) => Ok(image.crop(y0, x0, y1, x1)?),
            None => Ok(image),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(line: &str) -> ManifestRecord {
        serde_json::from_str(line).unwrap()
    }

    #[test]
    fn retrievable_classes_honour_visibility() {
        let r = rec(
            r#"{"image_path":"a.png","objects":[
                {"class":"Cardigan","box":[0,0,5,5],"visible":false},
                {"class":"hacksaw","box":[1,1,4,4],"visible":true}]}"#,
        );
        assert_eq!(r.retrievable_classes(), vec!["hacksaw".to_string()]);

        let r = rec(r#"{"image_path":"a.png","classes":["Knife ", "knife", "cardigan"],
            "objects":[{"class":"cardigan","visible":false}]}"#);
        assert_eq!(r.retrievable_classes(), vec!["knife".to_string()]);
    }

    #[test]
    fn index_vocabulary_and_split() {
        let records = vec![
            rec(r#"{"image_path":"a.png","classes":["knife"],"split":"train"}"#),
            rec(r#"{"image_path":"b.png","classes":["Beer  Glass"],"split":"test"}"#),
            rec(r#"{"image_path":"c.png","objects":[{"class":"coat","visible":false}]}"#),
        ];
        let all = DatasetIndex::from_records(records.clone(), Path::new("/data"), None);
        assert_eq!(all.entries().len(), 2);
        assert!(all.contains_class("beer glass"));
        assert!(!all.contains_class("coat"));
        assert_eq!(all.entries()[0].image_path, PathBuf::from("/data/a.png"));

        let train = DatasetIndex::from_records(records, Path::new("/data"), Some("train"));
        assert_eq!(train.vocabulary().iter().collect::<Vec<_>>(), vec!["knife"]);
        assert!(train.entries().iter().all(|e| e.classes.iter().all(|c| train.vocabulary().contains(c))));
    }

    #[test]
    fn restrict_drops_other_classes() {
        let records = vec![
            rec(r#"{"image_path":"a.png","classes":["knife","gun"]}"#),
            rec(r#"{"image_path":"b.png","classes":["gun"]}"#),
        ];
        let idx = DatasetIndex::from_records(records, Path::new("."), None).restrict_to(&["Knife"]);
        assert_eq!(idx.entries().len(), 1);
        assert_eq!(idx.entries()[0].classes, vec!["knife".to_string()]);
        assert!(!idx.contains_class("gun"));
    }

    #[test]
    fn crop_window_adds_margin_and_clips() {
        let b = BBox::new(10.0, 10.0, 20.0, 30.0).unwrap();
        assert_eq!(crop_window(&b, 0.1, 100, 100), Some((8, 9, 32, 21)));
        assert_eq!(crop_window(&b, 0.1, 25, 15), Some((8, 9, 25, 15)));
        assert_eq!(crop_window(&b, 0.0, 100, 100), Some((10, 10, 30, 20)));
    }

    #[test]
    fn manifest_errors_carry_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        fs::write(&p, "{\"image_path\":\"a.png\"}\n\n{oops}\n").unwrap();
        match read_manifest(&p) {
            Err(AcquisitionError::Manifest { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }
}
