//! Deterministic reference backends.
//!
//! These are small, hand-checkable stand-ins for the real models. They are
//! stateless and pure: the same input always yields bit-identical output.

use std::collections::BTreeMap;

use serde_json::{Map, Value};

use super::{
    BBox, BackendError, BinaryMask, FeatureExtractor, ImageTensor, MaterialOracle, PatchGrid,
    Proposal, ProposalSource, RgbFilter, Segmenter,
};
use crate::normalize_class_name;

/// Feature layout of the stub extractor: 3 channel means, 3 channel standard
/// deviations, normalized row and column of the patch center.
pub const STUB_FEATURE_DIM: usize = 8;
pub const DEFAULT_PATCH: usize = 8;
pub const DEFAULT_LUMINANCE_CUTOFF: f64 = 0.9;
pub const DEFAULT_MATERIAL: &str = "inorganic";

/// Foreground is every pixel darker than `luminance_cutoff`: objects absorb
/// radiation and show up darker than the empty (white) scan background.
pub fn stub_segmenter(image: &ImageTensor, luminance_cutoff: f64) -> BinaryMask {
    let values = image
        .pixels()
        .iter()
        .map(|p| (p[0] + p[1] + p[2]) / 3.0 < luminance_cutoff)
        .collect();
    BinaryMask::new(image.height(), image.width(), values).expect("dimensions come from a valid image")
}

/// Patch statistics with the default dimension of [`STUB_FEATURE_DIM`].
pub fn stub_extractor(image: &ImageTensor, patch: usize) -> PatchGrid {
    stub_extractor_with_dim(image, patch, STUB_FEATURE_DIM)
}

/// Patch statistics zero-padded to `dim` (which must be at least
/// [`STUB_FEATURE_DIM`]). Edge patches are averaged over their actual pixels.
pub fn stub_extractor_with_dim(image: &ImageTensor, patch: usize, dim: usize) -> PatchGrid {
    assert!(patch > 0, "patch size must be positive");
    assert!(dim >= STUB_FEATURE_DIM, "stub features need at least {STUB_FEATURE_DIM} dims");
    let (h, w) = (image.height(), image.width());
    let grid_h = h.div_ceil(patch);
    let grid_w = w.div_ceil(patch);
    let mut features = vec![0.0; grid_h * grid_w * dim];

    for gi in 0..grid_h {
        let (y0, y1) = (gi * patch, ((gi + 1) * patch).min(h));
        for gj in 0..grid_w {
            let (x0, x1) = (gj * patch, ((gj + 1) * patch).min(w));
            let n = ((y1 - y0) * (x1 - x0)) as f64;

            let mut mean = [0.0; 3];
            for r in y0..y1 {
                for c in x0..x1 {
                    let p = image.get(r, c);
                    for k in 0..3 {
                        mean[k] += p[k];
                    }
                }
            }
            mean.iter_mut().for_each(|m| *m /= n);

            let mut var = [0.0; 3];
            for r in y0..y1 {
                for c in x0..x1 {
                    let p = image.get(r, c);
                    for k in 0..3 {
                        var[k] += (p[k] - mean[k]).powi(2);
                    }
                }
            }

            let cell = &mut features[(gi * grid_w + gj) * dim..(gi * grid_w + gj + 1) * dim];
            cell[..3].copy_from_slice(&mean);
            for k in 0..3 {
                cell[3 + k] = (var[k] / n).sqrt();
            }
            cell[6] = (y0 + y1) as f64 / 2.0 / h as f64;
            cell[7] = (x0 + x1) as f64 / 2.0 / w as f64;
        }
    }
    PatchGrid::new(grid_h, grid_w, dim, features).expect("grid dimensions are consistent")
}

/// Default class -> material table of the lookup oracle.
pub fn default_material_table() -> BTreeMap<String, String> {
    const TABLE: &[(&str, &str)] = &[
        ("gun", "metal"),
        ("knife", "metal"),
        ("fork", "metal"),
        ("bat", "metal"),
        ("scissors", "metal"),
        ("wrench", "metal"),
        ("pliers", "metal"),
        ("hammer", "metal"),
        ("screwdriver", "metal"),
        ("boot", "leather"),
        ("belt", "leather"),
        ("violin", "wood"),
        ("pressure vessel", "inorganic"),
        ("beer glass", "inorganic"),
        ("laptop", "inorganic"),
        ("smartphone", "inorganic"),
        ("fur coat", "organic"),
        ("lemon", "organic"),
        ("banana", "organic"),
    ];
    TABLE.iter().map(|(c, m)| (c.to_string(), m.to_string())).collect()
}

/// Lookup-table material oracle. Unknown classes map to the default material.
#[derive(Debug, Clone)]
pub struct LookupMaterialOracle {
    table: BTreeMap<String, String>,
    default_material: String,
}

impl Default for LookupMaterialOracle {
    fn default() -> Self {
        Self::new(default_material_table(), DEFAULT_MATERIAL)
    }
}

impl LookupMaterialOracle {
    pub fn new(table: BTreeMap<String, String>, default_material: impl Into<String>) -> Self {
        let table = table
            .into_iter()
            .map(|(c, m)| (normalize_class_name(&c), m))
            .collect();
        Self { table, default_material: default_material.into() }
    }

    pub fn material_of(&self, class_name: &str) -> &str {
        self.table
            .get(&normalize_class_name(class_name))
            .map(String::as_str)
            .unwrap_or(&self.default_material)
    }

    /// Clusters in order of first appearance of each material.
    pub fn clusters(&self, classes: &[String]) -> Vec<(String, Vec<String>)> {
        let mut out: Vec<(String, Vec<String>)> = Vec::new();
        for class in classes {
            let material = self.material_of(class);
            match out.iter_mut().find(|(m, _)| m == material) {
                Some((_, members)) => members.push(class.clone()),
                None => out.push((material.to_string(), vec![class.clone()])),
            }
        }
        out
    }
}

impl MaterialOracle for LookupMaterialOracle {
    fn id(&self) -> &str {
        "lookup"
    }

    fn cluster(&self, classes: &[String]) -> Result<String, BackendError> {
        let obj: Map<String, Value> = self
            .clusters(classes)
            .into_iter()
            .map(|(m, cs)| (m, Value::from(cs)))
            .collect();
        Ok(Value::Object(obj).to_string())
    }

    fn identify(&self, class_name: &str, _materials: &[String]) -> Result<String, BackendError> {
        Ok(self.material_of(class_name).to_string())
    }
}

/// Material clusters the default lookup oracle assigns to `classes`.
pub fn stub_material_oracle(classes: &[String]) -> BTreeMap<String, Vec<String>> {
    LookupMaterialOracle::default().clusters(classes).into_iter().collect()
}

#[derive(Debug, Clone)]
pub struct LuminanceSegmenter {
    cutoff: f64,
    id: String,
}

impl LuminanceSegmenter {
    pub fn new(cutoff: f64) -> Result<Self, BackendError> {
        if !(cutoff > 0.0 && cutoff < 1.0) {
            return Err(BackendError::BadOption {
                backend: "luminance".into(),
                message: format!("cutoff must lie in (0, 1), got {cutoff}"),
            });
        }
        Ok(Self { cutoff, id: format!("luminance(cutoff={cutoff})") })
    }
}

impl Default for LuminanceSegmenter {
    fn default() -> Self {
        Self::new(DEFAULT_LUMINANCE_CUTOFF).expect("default cutoff is valid")
    }
}

impl Segmenter for LuminanceSegmenter {
    fn id(&self) -> &str {
        &self.id
    }

    fn segment(&self, image: &ImageTensor) -> Result<BinaryMask, BackendError> {
        Ok(stub_segmenter(image, self.cutoff))
    }
}

#[derive(Debug, Clone)]
pub struct PatchStatsExtractor {
    patch: usize,
    dim: usize,
    id: String,
}

impl PatchStatsExtractor {
    pub fn new(patch: usize, dim: usize) -> Result<Self, BackendError> {
        if patch == 0 || dim < STUB_FEATURE_DIM {
            return Err(BackendError::BadOption {
                backend: "patch_stats".into(),
                message: format!("need patch >= 1 and dim >= {STUB_FEATURE_DIM}, got {patch}/{dim}"),
            });
        }
        Ok(Self { patch, dim, id: format!("patch_stats(patch={patch},dim={dim})") })
    }

    pub fn patch(&self) -> usize {
        self.patch
    }
}

impl Default for PatchStatsExtractor {
    fn default() -> Self {
        Self::new(DEFAULT_PATCH, STUB_FEATURE_DIM).expect("defaults are valid")
    }
}

impl FeatureExtractor for PatchStatsExtractor {
    fn id(&self) -> &str {
        &self.id
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn extract(&self, image: &ImageTensor) -> Result<PatchGrid, BackendError> {
        Ok(stub_extractor_with_dim(image, self.patch, self.dim))
    }
}

/// Window origins along one axis: start at 0 and keep stepping until a
/// window reaches the far edge. The last window may be clipped.
fn window_starts(extent: usize, stride: usize, window: usize) -> Vec<usize> {
    let mut starts = vec![0];
    let mut pos = 0;
    while pos + window < extent && pos + stride < extent {
        pos += stride;
        starts.push(pos);
    }
    starts
}

/// Mean of the grid cells whose pixel-block center falls inside `bbox`. If
/// the window is smaller than a cell, the cell under the window center is used.
pub(crate) fn pool_window(grid: &PatchGrid, image_h: usize, image_w: usize, patch: usize, bbox: &BBox) -> Vec<f64> {
    let dim = grid.dim();
    let mut acc = vec![0.0; dim];
    let mut n = 0usize;
    for gi in 0..grid.grid_h() {
        let cy = (gi * patch + ((gi + 1) * patch).min(image_h)) as f64 / 2.0;
        if cy < bbox.y1 || cy >= bbox.y2 {
            continue;
        }
        for gj in 0..grid.grid_w() {
            let cx = (gj * patch + ((gj + 1) * patch).min(image_w)) as f64 / 2.0;
            if cx < bbox.x1 || cx >= bbox.x2 {
                continue;
            }
            for (a, v) in acc.iter_mut().zip(grid.cell(gi, gj)) {
                *a += v;
            }
            n += 1;
        }
    }
    if n == 0 {
        let gi = ((((bbox.y1 + bbox.y2) / 2.0) as usize) / patch).min(grid.grid_h() - 1);
        let gj = ((((bbox.x1 + bbox.x2) / 2.0) as usize) / patch).min(grid.grid_w() - 1);
        return grid.cell(gi, gj).to_vec();
    }
    acc.iter_mut().for_each(|a| *a /= n as f64);
    acc
}

/// Sliding-window proposals with stub-extractor features pooled per window.
/// Windows larger than the image are shrunk to the image.
pub fn grid_proposal_source(image: &ImageTensor, stride: usize, window: usize) -> Vec<Proposal> {
    GridProposalSource::new(stride, window, PatchStatsExtractor::default())
        .expect("caller supplies positive stride and window")
        .proposals(image)
}

#[derive(Debug, Clone)]
pub struct GridProposalSource {
    stride: usize,
    window: usize,
    extractor: PatchStatsExtractor,
    id: String,
}

impl GridProposalSource {
    pub fn new(stride: usize, window: usize, extractor: PatchStatsExtractor) -> Result<Self, BackendError> {
        if stride == 0 || window == 0 {
            return Err(BackendError::BadOption {
                backend: "grid".into(),
                message: format!("stride and window must be positive, got {stride}/{window}"),
            });
        }
        let id = format!("grid(stride={stride},window={window})");
        Ok(Self { stride, window, extractor, id })
    }

    pub fn proposals(&self, image: &ImageTensor) -> Vec<Proposal> {
        let (h, w) = (image.height(), image.width());
        let grid = stub_extractor_with_dim(image, self.extractor.patch, self.extractor.dim);
        let win_h = self.window.min(h);
        let win_w = self.window.min(w);
        let mut out = Vec::new();
        for y in window_starts(h, self.stride, win_h) {
            for x in window_starts(w, self.stride, win_w) {
                let bbox = BBox {
                    x1: x as f64,
                    y1: y as f64,
                    x2: (x + win_w).min(w) as f64,
                    y2: (y + win_h).min(h) as f64,
                };
                let feature = pool_window(&grid, h, w, self.extractor.patch, &bbox);
                out.push(Proposal { feature, bbox, objectness: None });
            }
        }
        out
    }
}

impl ProposalSource for GridProposalSource {
    fn id(&self) -> &str {
        &self.id
    }

    fn feature_space(&self) -> &str {
        self.extractor.id()
    }

    fn dim(&self) -> usize {
        self.extractor.dim
    }

    fn propose(&self, image: &ImageTensor) -> Result<Vec<Proposal>, BackendError> {
        Ok(self.proposals(image))
    }
}

/// Class-agnostic stand-in for an RGB detector: confidence grows with the
/// fraction of foreground pixels and saturates at `saturation`.
#[derive(Debug, Clone)]
pub struct ForegroundFilter {
    cutoff: f64,
    saturation: f64,
    id: String,
}

impl ForegroundFilter {
    pub fn new(cutoff: f64, saturation: f64) -> Result<Self, BackendError> {
        if !(cutoff > 0.0 && cutoff < 1.0) || !(saturation > 0.0 && saturation <= 1.0) {
            return Err(BackendError::BadOption {
                backend: "foreground".into(),
                message: format!("need cutoff in (0,1) and saturation in (0,1], got {cutoff}/{saturation}"),
            });
        }
        Ok(Self { cutoff, saturation, id: format!("foreground(cutoff={cutoff},saturation={saturation})") })
    }
}

impl Default for ForegroundFilter {
    fn default() -> Self {
        Self::new(DEFAULT_LUMINANCE_CUTOFF, 0.1).expect("defaults are valid")
    }
}

impl RgbFilter for ForegroundFilter {
    fn id(&self) -> &str {
        &self.id
    }

    fn confidence(&self, image: &ImageTensor, _class_name: &str) -> Result<f64, BackendError> {
        let mask = stub_segmenter(image, self.cutoff);
        let fraction = mask.count() as f64 / (image.height() * image.width()) as f64;
        Ok((fraction / self.saturation).min(1.0))
    }
}
