//! Visual classifier that replaces a detector's text head.
//!
//! Each proposal feature is scored against every class descriptor (max
//! cosine over the mean and member prototypes) and against the background
//! descriptor. Background winners are dropped; survivors must clear the
//! consistency margin `s1 - s2 >= sigma`, where `s2` is the mean similarity
//! to the other classes' mean prototypes.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{BackendBundle, BackendError, BBox, ImageTensor};
use crate::descriptors::{DescriptorError, DescriptorStore};

/// Default consistency threshold.
pub const DEFAULT_SIGMA: f64 = 0.15;

#[derive(Debug, Error)]
pub enum ClassifierError {
    #[error("cosine similarity of a zero vector")]
    ZeroVector,
    #[error("feature has {found} dims, store expects {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("descriptor store has no classes")]
    EmptyStore,
    #[error(transparent)]
    Store(#[from] DescriptorError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("detections io: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64, ClassifierError> {
    assert_eq!(a.len(), b.len(), "cosine of vectors with different lengths");
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(ClassifierError::ZeroVector);
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

// Store prototypes are validated nonzero, and callers check `z` up front.
fn cos(z: &[f64], p: &[f64]) -> f64 {
    cosine(z, p).expect("nonzero vectors")
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Class(String),
    Background,
}

impl Label {
    pub fn class_name(&self) -> Option<&str> {
        match self {
            Label::Class(c) => Some(c),
            Label::Background => None,
        }
    }

    pub fn is_background(&self) -> bool {
        matches!(self, Label::Background)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassificationResult {
    pub label: Label,
    pub s1: f64,
    pub s2: f64,
    pub delta: f64,
    pub kept: bool,
}

fn check_feature(z: &[f64], store: &DescriptorStore) -> Result<(), ClassifierError> {
    if store.is_empty() {
        return Err(ClassifierError::EmptyStore);
    }
    if z.len() != store.dim() {
        return Err(ClassifierError::DimensionMismatch { expected: store.dim(), found: z.len() });
    }
    if norm(z) == 0.0 {
        return Err(ClassifierError::ZeroVector);
    }
    Ok(())
}

/// Per-class scores in class-name order; the background score comes last
/// when the store has a background descriptor.
pub fn class_scores(z: &[f64], store: &DescriptorStore) -> Result<Vec<(Label, f64)>, ClassifierError> {
    check_feature(z, store)?;
    let max_cos = |protos: &mut dyn Iterator<Item = &[f64]>| protos.map(|p| cos(z, p)).fold(f64::NEG_INFINITY, f64::max);
    let mut scores: Vec<(Label, f64)> = store
        .descriptors()
        .values()
        .map(|d| (Label::Class(d.class_name.clone()), max_cos(&mut d.prototypes())))
        .collect();
    if store.background().is_enabled() {
        scores.push((Label::Background, max_cos(&mut store.background().prototypes())));
    }
    Ok(scores)
}

/// Argmax classification before the consistency check. Ties go to the
/// lexicographically first class; background wins only strictly.
/// `s2` is 0 and `delta` equals `s1` until [`dcc`] runs.
pub fn classify_proposal(z: &[f64], store: &DescriptorStore) -> Result<ClassificationResult, ClassifierError> {
    let mut best: Option<(Label, f64)> = None;
    for (label, score) in class_scores(z, store)? {
        if best.as_ref().is_none_or(|(_, s)| score > *s) {
            best = Some((label, score));
        }
    }
    let (label, s1) = best.expect("store is non-empty");
    let kept = !label.is_background();
    Ok(ClassificationResult { label, s1, s2: 0.0, delta: s1, kept })
}

/// Consistency check on a pre-classified proposal.
pub fn dcc(z: &[f64], result: &ClassificationResult, store: &DescriptorStore, sigma: f64) -> ClassificationResult {
    let Label::Class(predicted) = &result.label else {
        return ClassificationResult { kept: false, ..result.clone() };
    };
    let s1 = store
        .get(predicted)
        .map(|d| d.prototypes().map(|p| cos(z, p)).fold(f64::NEG_INFINITY, f64::max))
        .unwrap_or(result.s1);
    let rivals: Vec<f64> = store
        .descriptors()
        .values()
        .filter(|d| &d.class_name != predicted)
        .map(|d| cos(z, &d.mean_prototype))
        .collect();
    let s2 = if rivals.is_empty() { 0.0 } else { rivals.iter().sum::<f64>() / rivals.len() as f64 };
    let delta = s1 - s2;
    ClassificationResult { label: result.label.clone(), s1, s2, delta, kept: delta >= sigma }
}

/// Classification with margins computed, independent of sigma.
pub fn classify_with_margin(z: &[f64], store: &DescriptorStore) -> Result<ClassificationResult, ClassifierError> {
    let pre = classify_proposal(z, store)?;
    Ok(dcc(z, &pre, store, f64::NEG_INFINITY))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: BBox,
    #[serde(rename = "class")]
    pub class_name: String,
    pub score: f64,
    pub s1: f64,
    pub s2: f64,
    pub delta: f64,
}

/// A proposal with its margin-annotated classification, before thresholding.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredProposal {
    pub index: usize,
    pub bbox: BBox,
    pub result: ClassificationResult,
}

impl ScoredProposal {
    pub fn passes(&self, sigma: f64) -> bool {
        !self.result.label.is_background() && self.result.delta >= sigma
    }
}

/// Score every proposal of `image`. Zero-feature proposals carry no
/// evidence and are classified as background.
pub fn score_proposals(
    image: &ImageTensor,
    backends: &BackendBundle,
    store: &DescriptorStore,
) -> Result<Vec<ScoredProposal>, ClassifierError> {
    let source = &backends.proposal_source;
    store.check_compatible(source.feature_space(), source.dim())?;
    if store.is_empty() {
        return Err(ClassifierError::EmptyStore);
    }
    source
        .propose(image)?
        .into_iter()
        .enumerate()
        .map(|(index, p)| {
            let result = match classify_with_margin(&p.feature, store) {
                Ok(r) => r,
                Err(ClassifierError::ZeroVector) => {
                    ClassificationResult { label: Label::Background, s1: 0.0, s2: 0.0, delta: 0.0, kept: false }
                }
                Err(e) => return Err(e),
            };
            Ok(ScoredProposal { index, bbox: p.bbox, result })
        })
        .collect()
}

/// Detections surviving background rejection and the consistency margin,
/// sorted by score descending (stable in proposal order).
pub fn select_detections(scored: &[ScoredProposal], sigma: f64) -> Vec<Detection> {
    let mut out: Vec<Detection> = scored
        .iter()
        .filter(|p| p.passes(sigma))
        .map(|p| Detection {
            bbox: p.bbox,
            class_name: p.result.label.class_name().expect("not background").to_string(),
            score: (p.result.s1 + 1.0) / 2.0,
            s1: p.result.s1,
            s2: p.result.s2,
            delta: p.result.delta,
        })
        .collect();
    out.sort_by(|a, b| b.score.total_cmp(&a.score));
    out
}

pub fn detect(
    image: &ImageTensor,
    backends: &BackendBundle,
    store: &DescriptorStore,
    sigma: f64,
) -> Result<Vec<Detection>, ClassifierError> {
    Ok(select_detections(&score_proposals(image, backends, store)?, sigma))
}

/// One line of a detections file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub image_id: String,
    #[serde(flatten)]
    pub detection: Detection,
}

pub fn write_detections<W: Write>(mut w: W, records: &[DetectionRecord]) -> Result<(), ClassifierError> {
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_detections<R: BufRead>(r: R) -> Result<Vec<DetectionRecord>, ClassifierError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| ClassifierError::Parse { line: i + 1, message: e.to_string() })?;
        out.push(rec);
    }
    Ok(out)
}
