//! COCO-style box AP.
//!
//! Matching and interpolation follow the reference COCO evaluator: per image
//! and class, detections are taken in descending score order and each one
//! claims the best-overlapping unmatched ground truth at or above the IoU
//! threshold (ties go to the later ground truth). Precision is made
//! monotone and sampled at 101 recall points.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::acquisition::{read_manifest, AcquisitionError, ManifestRecord};
use crate::backends::BBox;
use crate::classifier::Detection;
use crate::normalize_class_name;

pub const NUM_IOU_THRESHOLDS: usize = 10;
pub const NUM_RECALL_POINTS: usize = 101;

/// 0.50, 0.55, ..., 0.95, computed the way the reference evaluator does.
pub fn iou_thresholds() -> [f64; NUM_IOU_THRESHOLDS] {
    let step = (0.95 - 0.5) / 9.0;
    let mut t = [0.0; NUM_IOU_THRESHOLDS];
    for (i, v) in t.iter_mut().enumerate() {
        *v = i as f64 * step + 0.5;
    }
    t[NUM_IOU_THRESHOLDS - 1] = 0.95;
    t
}

pub fn recall_points() -> [f64; NUM_RECALL_POINTS] {
    let mut r = [0.0; NUM_RECALL_POINTS];
    for (i, v) in r.iter_mut().enumerate() {
        *v = i as f64 * 0.01;
    }
    r[NUM_RECALL_POINTS - 1] = 1.0;
    r
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    if inter == 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtObject {
    #[serde(rename = "box")]
    pub bbox: BBox,
    #[serde(rename = "class")]
    pub class_name: String,
    pub visible: bool,
}

/// Ground-truth boxes per image plus the evaluated vocabulary.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GroundTruthSet {
    images: BTreeMap<String, Vec<GtObject>>,
    vocabulary: BTreeSet<String>,
}

impl GroundTruthSet {
    /// Class names are normalized; the vocabulary is every class seen.
    pub fn new(images: BTreeMap<String, Vec<GtObject>>) -> Self {
        let images: BTreeMap<String, Vec<GtObject>> = images
            .into_iter()
            .map(|(id, objs)| {
                let objs = objs
                    .into_iter()
                    .map(|o| GtObject { class_name: normalize_class_name(&o.class_name), ..o })
                    .collect();
                (id, objs)
            })
            .collect();
        let vocabulary = images.values().flatten().map(|o| o.class_name.clone()).collect();
        Self { images, vocabulary }
    }

    /// Add classes that may have no ground truth (their detections are not
    /// counted as unknown).
    pub fn with_vocabulary<S: AsRef<str>>(mut self, classes: &[S]) -> Self {
        self.vocabulary.extend(classes.iter().map(|c| normalize_class_name(c.as_ref())));
        self
    }

    /// Objects without a box are skipped.
    pub fn from_records(records: &[ManifestRecord]) -> Self {
        let mut images = BTreeMap::new();
        let mut extra = Vec::new();
        for r in records {
            let id = r.image_id.clone().unwrap_or_else(|| r.image_path.clone());
            let objs: Vec<GtObject> = r
                .objects
                .iter()
                .filter_map(|o| o.bbox.map(|b| GtObject { bbox: b, class_name: o.class_name.clone(), visible: o.visible }))
                .collect();
            images.entry(id).or_insert_with(Vec::new).extend(objs);
            extra.extend(r.classes.iter().cloned());
        }
        Self::new(images).with_vocabulary(&extra)
    }

    pub fn images(&self) -> &BTreeMap<String, Vec<GtObject>> {
        &self.images
    }

    pub fn vocabulary(&self) -> &BTreeSet<String> {
        &self.vocabulary
    }

    pub fn image_ids(&self) -> impl Iterator<Item = &String> {
        self.images.keys()
    }

    /// Number of ground-truth objects that take part in matching.
    pub fn count(&self, include_invisible: bool) -> usize {
        self.images.values().flatten().filter(|o| include_invisible || o.visible).count()
    }
}

/// A test image to run detection on.
#[derive(Debug, Clone, PartialEq)]
pub struct TestScene {
    pub image_id: String,
    pub image_path: PathBuf,
}

/// Test scenes with their ground truth, from a manifest.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalDataset {
    pub scenes: Vec<TestScene>,
    pub gt: GroundTruthSet,
}

impl EvalDataset {
    pub fn from_records(records: Vec<ManifestRecord>, root: &Path, split: Option<&str>) -> Self {
        let records: Vec<ManifestRecord> =
            records.into_iter().filter(|r| split.is_none() || r.split.as_deref() == split).collect();
        let mut seen = BTreeSet::new();
        let scenes = records
            .iter()
            .filter_map(|r| {
                let image_id = r.image_id.clone().unwrap_or_else(|| r.image_path.clone());
                let path = PathBuf::from(&r.image_path);
                let image_path = if path.is_absolute() { path } else { root.join(path) };
                seen.insert(image_id.clone()).then_some(TestScene { image_id, image_path })
            })
            .collect();
        Self { scenes, gt: GroundTruthSet::from_records(&records) }
    }

    pub fn load(path: &Path, split: Option<&str>) -> Result<Self, AcquisitionError> {
        let records = read_manifest(path)?;
        Ok(Self::from_records(records, path.parent().unwrap_or(Path::new(".")), split))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalOptions {
    /// Match against objects flagged invisible too.
    pub include_invisible: bool,
    /// Per image and class cap on detections; unlimited when unset.
    pub max_dets: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub num_gt: usize,
    pub num_detections: usize,
}

/// Detections that could not be attributed to an evaluated class or image.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalDiagnostics {
    pub unknown_class_detections: usize,
    pub unknown_image_detections: usize,
    pub classes_without_gt: Vec<String>,
}

/// Metrics in [0, 1]. Overall numbers are means over classes with ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub per_class: BTreeMap<String, ClassMetrics>,
    pub num_images: usize,
    pub composition: Option<String>,
    pub seed: Option<u64>,
    pub config_hash: Option<String>,
    pub diagnostics: EvalDiagnostics,
}

/// AP of one class at one IoU threshold from its (score, is_tp) list, in
/// the order the reference evaluator concatenates them.
fn threshold_ap(scored: &[(f64, bool)], num_gt: usize, recall_pts: &[f64]) -> f64 {
    let mut order: Vec<usize> = (0..scored.len()).collect();
    order.sort_by(|&a, &b| scored[b].0.total_cmp(&scored[a].0));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut recall = Vec::with_capacity(order.len());
    let mut precision = Vec::with_capacity(order.len());
    for &i in &order {
        if scored[i].1 {
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(tp as f64 / num_gt as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    for i in (1..precision.len()).rev() {
        if precision[i] > precision[i - 1] {
            precision[i - 1] = precision[i];
        }
    }
    let total: f64 = recall_pts
        .iter()
        .map(|&r| {
            let idx = recall.partition_point(|&x| x < r);
            precision.get(idx).copied().unwrap_or(0.0)
        })
        .sum();
    total / recall_pts.len() as f64
}

/// Greedy matching of score-sorted detections to ground truth at one threshold.
fn match_image(dets: &[&Detection], gts: &[&GtObject], threshold: f64) -> Vec<bool> {
    let mut gt_taken = vec![false; gts.len()];
    dets.iter()
        .map(|d| {
            let mut best = threshold.min(1.0 - 1e-10);
            let mut found = None;
            for (g, gt) in gts.iter().enumerate() {
                if gt_taken[g] {
                    continue;
                }
                let o = iou(&d.bbox, &gt.bbox);
                if o < best {
                    continue;
                }
                best = o;
                found = Some(g);
            }
            if let Some(g) = found {
                gt_taken[g] = true;
            }
            found.is_some()
        })
        .collect()
}

/// Evaluate detections keyed by image id.
pub fn coco_ap(detections: &BTreeMap<String, Vec<Detection>>, gt: &GroundTruthSet, options: &EvalOptions) -> EvalReport {
    let thresholds = iou_thresholds();
    let recall_pts = recall_points();
    let mut diagnostics = EvalDiagnostics::default();

    // class -> image -> detections in input order
    let mut by_class: BTreeMap<String, BTreeMap<&str, Vec<&Detection>>> = BTreeMap::new();
    for (image_id, dets) in detections {
        if !gt.images.contains_key(image_id) {
            diagnostics.unknown_image_detections += dets.len();
            continue;
        }
        for d in dets {
            let class = normalize_class_name(&d.class_name);
            if !gt.vocabulary.contains(&class) {
                diagnostics.unknown_class_detections += 1;
                continue;
            }
            by_class.entry(class).or_default().entry(image_id.as_str()).or_default().push(d);
        }
    }

    let mut per_class = BTreeMap::new();
    for class in &gt.vocabulary {
        let mut num_gt = 0usize;
        let mut num_detections = 0usize;
        let mut scored: Vec<Vec<(f64, bool)>> = vec![Vec::new(); thresholds.len()];
        for (image_id, objects) in &gt.images {
            let gts: Vec<&GtObject> = objects
                .iter()
                .filter(|o| &o.class_name == class && (options.include_invisible || o.visible))
                .collect();
            num_gt += gts.len();
            let mut dets: Vec<&Detection> = by_class
                .get(class)
                .and_then(|m| m.get(image_id.as_str()))
                .cloned()
                .unwrap_or_default();
            dets.sort_by(|a, b| b.score.total_cmp(&a.score));
            if let Some(cap) = options.max_dets {
                dets.truncate(cap);
            }
            num_detections += dets.len();
            for (t, &threshold) in thresholds.iter().enumerate() {
                let matched = match_image(&dets, &gts, threshold);
                scored[t].extend(dets.iter().zip(matched).map(|(d, m)| (d.score, m)));
            }
        }
        if num_gt == 0 {
            diagnostics.classes_without_gt.push(class.clone());
            continue;
        }
        let aps: Vec<f64> = scored.iter().map(|s| threshold_ap(s, num_gt, &recall_pts)).collect();
        per_class.insert(
            class.clone(),
            ClassMetrics {
                ap: aps.iter().sum::<f64>() / aps.len() as f64,
                ap50: aps[0],
                ap75: aps[5],
                num_gt,
                num_detections,
            },
        );
    }

    let mean = |f: fn(&ClassMetrics) -> f64| {
        if per_class.is_empty() {
            0.0
        } else {
            per_class.values().map(f).sum::<f64>() / per_class.len() as f64
        }
    };
    EvalReport {
        ap: mean(|m| m.ap),
        ap50: mean(|m| m.ap50),
        ap75: mean(|m| m.ap75),
        per_class: per_class.clone(),
        num_images: gt.images.len(),
        composition: None,
        seed: None,
        config_hash: None,
        diagnostics,
    }
}
