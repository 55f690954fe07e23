//! Cross-modality transfer runs and sweeps.

use std::collections::BTreeMap;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::coco::{coco_ap, EvalDataset, EvalOptions, EvalReport};
use super::EvalError;
use crate::acquisition::{build_gallery, DatasetIndex, GalleryOptions, Provenance, WebImageClient};
use crate::backends::BackendBundle;
use crate::classifier::{score_proposals, select_detections, Detection, ScoredProposal, DEFAULT_SIGMA};
use crate::descriptors::{build_store, DescriptorError, DescriptorStore, StoreOptions};
use crate::imageio;
use crate::material::{build_material_db, MaterialOptions};

/// Seeded split of `vocab` into in-domain and web classes, each kept in
/// vocabulary order. `round(fraction * |vocab|)` classes are in-domain.
pub fn split_vocabulary(vocab: &[String], in_house_fraction: f64, seed: u64) -> Result<(Vec<String>, Vec<String>), EvalError> {
    if !(0.0..=1.0).contains(&in_house_fraction) {
        return Err(EvalError::InvalidFraction(in_house_fraction));
    }
    let n_in = (in_house_fraction * vocab.len() as f64).round() as usize;
    let mut order: Vec<usize> = (0..vocab.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut in_domain = vec![false; vocab.len()];
    for &i in &order[..n_in] {
        in_domain[i] = true;
    }
    let (a, b): (Vec<_>, Vec<_>) = vocab.iter().cloned().zip(in_domain).partition(|(_, d)| *d);
    Ok((a.into_iter().map(|(c, _)| c).collect(), b.into_iter().map(|(c, _)| c).collect()))
}

/// Label such as `"50/50"` for an in-house fraction.
pub fn composition_label(in_house_fraction: f64) -> String {
    let pct = (in_house_fraction * 100.0).round() as i64;
    format!("{pct}/{}", 100 - pct)
}

/// A random derangement of the store's class names (`old -> new`).
pub fn derangement(classes: &[String], seed: u64) -> BTreeMap<String, String> {
    let mut order = classes.to_vec();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = order.len();
    (0..n).map(|i| (order[i].clone(), order[(i + 1) % n].clone())).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CmteConfig {
    /// Fraction of the vocabulary served from in-house data.
    pub in_house_fraction: f64,
    pub seed: u64,
    pub sigma: f64,
    pub gallery: GalleryOptions,
    pub material: MaterialOptions,
    pub eval: EvalOptions,
    /// Control run: move every class descriptor to another class.
    pub permute_descriptors: Option<u64>,
    pub config_hash: Option<String>,
}

impl Default for CmteConfig {
    fn default() -> Self {
        Self {
            in_house_fraction: 1.0,
            seed: 0,
            sigma: DEFAULT_SIGMA,
            gallery: GalleryOptions::default(),
            material: MaterialOptions::default(),
            eval: EvalOptions::default(),
            permute_descriptors: None,
            config_hash: None,
        }
    }
}

/// Everything a run reads.
#[derive(Clone, Copy)]
pub struct CmteInputs<'a> {
    pub vocabulary: &'a [String],
    /// Labelled in-house X-ray data; restricted to the in-domain classes per run.
    pub in_house: &'a DatasetIndex,
    pub test: &'a EvalDataset,
    pub web: Option<&'a dyn WebImageClient>,
}

#[derive(Debug, Clone)]
pub struct CmteOutcome {
    pub report: EvalReport,
    pub in_domain: Vec<String>,
    pub web_classes: Vec<String>,
    pub gallery_summary: Vec<(String, usize, Option<Provenance>)>,
    pub failed_classes: Vec<(String, String)>,
    pub store: Option<DescriptorStore>,
    /// Margin-annotated proposals per test image, reusable for sigma sweeps.
    pub scored: BTreeMap<String, Vec<ScoredProposal>>,
}

impl CmteOutcome {
    pub fn detections(&self, sigma: f64) -> BTreeMap<String, Vec<Detection>> {
        self.scored.iter().map(|(id, s)| (id.clone(), select_detections(s, sigma))).collect()
    }
}

/// Score every proposal of every test scene. Scenes run in parallel; the
/// result is keyed by image id so it does not depend on scheduling.
pub fn score_dataset(
    test: &EvalDataset,
    backends: &BackendBundle,
    store: &DescriptorStore,
) -> Result<BTreeMap<String, Vec<ScoredProposal>>, EvalError> {
    test.scenes
        .par_iter()
        .map(|scene| {
            let image = imageio::load(&scene.image_path)?;
            Ok((scene.image_id.clone(), score_proposals(&image, backends, store)?))
        })
        .collect()
}

/// One full run: material database and gallery for the configured
/// composition, descriptor store, detection over the test scenes, AP.
pub fn cmte_run(inputs: CmteInputs<'_>, backends: &BackendBundle, config: &CmteConfig) -> Result<CmteOutcome, EvalError> {
    let (in_domain, web_classes) = split_vocabulary(inputs.vocabulary, config.in_house_fraction, config.seed)?;
    let in_house = inputs.in_house.restrict_to(&in_domain);
    let material_db = build_material_db(&in_house, backends, &config.material)?;
    let gallery = build_gallery(inputs.vocabulary, &in_house, inputs.web, backends, &material_db, &config.gallery)?;

    let store_options = StoreOptions { allow_partial: true, config_hash: config.config_hash.clone(), ..Default::default() };
    let (store, failed_classes) = match build_store(&gallery, backends, &store_options) {
        Ok(built) => (Some(built.store), built.failed),
        Err(DescriptorError::NoDescriptors) => {
            warn!("no class has a descriptor; every class scores 0");
            let failed = gallery.vocabulary().iter().map(|c| (c.clone(), "no descriptor".to_string())).collect();
            (None, failed)
        }
        Err(e) => return Err(e.into()),
    };
    for (class, why) in &failed_classes {
        warn!("class `{class}` has no descriptor ({why}); it will score 0");
    }
    let store = match (store, config.permute_descriptors) {
        (Some(s), Some(seed)) => Some(s.relabeled(&derangement(&s.class_names(), seed))?),
        (s, _) => s,
    };

    let scored = match &store {
        Some(s) => score_dataset(inputs.test, backends, s)?,
        None => inputs.test.scenes.iter().map(|sc| (sc.image_id.clone(), Vec::new())).collect(),
    };
    let detections: BTreeMap<String, Vec<Detection>> =
        scored.iter().map(|(id, s)| (id.clone(), select_detections(s, config.sigma))).collect();
    let gt = inputs.test.gt.clone().with_vocabulary(inputs.vocabulary);
    let mut report = coco_ap(&detections, &gt, &config.eval);
    report.composition = Some(composition_label(config.in_house_fraction));
    report.seed = Some(config.seed);
    report.config_hash = config.config_hash.clone();
    info!(
        "{} seed {}: AP {:.3} AP50 {:.3} AP75 {:.3}",
        composition_label(config.in_house_fraction),
        config.seed,
        report.ap,
        report.ap50,
        report.ap75
    );
    Ok(CmteOutcome {
        report,
        in_domain,
        web_classes,
        gallery_summary: gallery.provenance_summary(),
        failed_classes,
        store,
        scored,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Population standard deviation, so a single value has std 0.
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self { mean: 0.0, std: 0.0 };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub composition: String,
    pub in_house_fraction: f64,
    pub seeds: Vec<u64>,
    pub ap: MeanStd,
    pub ap50: MeanStd,
    pub ap75: MeanStd,
    pub runs: Vec<EvalReport>,
}

impl SweepRow {
    fn from_runs(fraction: f64, runs: Vec<EvalReport>) -> Self {
        let pick = |f: fn(&EvalReport) -> f64| MeanStd::of(&runs.iter().map(f).collect::<Vec<_>>());
        Self {
            composition: composition_label(fraction),
            in_house_fraction: fraction,
            seeds: runs.iter().filter_map(|r| r.seed).collect(),
            ap: pick(|r| r.ap),
            ap50: pick(|r| r.ap50),
            ap75: pick(|r| r.ap75),
            runs,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub rows: Vec<SweepRow>,
    /// Set when the sweep stopped early.
    pub error: Option<String>,
}

/// Run every (ratio, seed) pair. On failure the summary built so far is
/// returned inside the error.
pub fn composition_sweep(
    ratios: &[f64],
    seeds: &[u64],
    inputs: CmteInputs<'_>,
    backends: &BackendBundle,
    config: &CmteConfig,
) -> Result<SweepSummary, (SweepSummary, EvalError)> {
    let mut summary = SweepSummary::default();
    if let Some(&bad) = ratios.iter().find(|r| !(0.0..=1.0).contains(*r)) {
        return Err((summary, EvalError::InvalidFraction(bad)));
    }
    for &fraction in ratios {
        let mut runs = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let cfg = CmteConfig { in_house_fraction: fraction, seed, ..config.clone() };
            match cmte_run(inputs, backends, &cfg) {
                Ok(outcome) => runs.push(outcome.report),
                Err(e) => {
                    if !runs.is_empty() {
                        summary.rows.push(SweepRow::from_runs(fraction, runs));
                    }
                    summary.error = Some(format!("{} seed {seed}: {e}", composition_label(fraction)));
                    return Err((summary, e));
                }
            }
        }
        summary.rows.push(SweepRow::from_runs(fraction, runs));
    }
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KPoint {
    pub k: usize,
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
}

/// Full runs at each gallery size.
pub fn k_sweep(ks: &[usize], inputs: CmteInputs<'_>, backends: &BackendBundle, config: &CmteConfig) -> Result<Vec<KPoint>, EvalError> {
    ks.iter()
        .map(|&k| {
            let mut cfg = config.clone();
            cfg.gallery.k = k;
            let r = cmte_run(inputs, backends, &cfg)?.report;
            Ok(KPoint { k, ap: r.ap, ap50: r.ap50, ap75: r.ap75 })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SigmaPoint {
    pub sigma: f64,
    pub detections: usize,
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    /// Detection count is no larger than at the previous (smaller) sigma.
    pub count_non_increasing: bool,
}

/// Re-threshold one run's scored proposals at each sigma.
pub fn sigma_sweep(outcome: &CmteOutcome, test: &EvalDataset, vocabulary: &[String], sigmas: &[f64], options: &EvalOptions) -> Vec<SigmaPoint> {
    let gt = test.gt.clone().with_vocabulary(vocabulary);
    let mut sorted = sigmas.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut prev: Option<usize> = None;
    sorted
        .into_iter()
        .map(|sigma| {
            let dets = outcome.detections(sigma);
            let n = dets.values().map(Vec::len).sum();
            let r = coco_ap(&dets, &gt, options);
            let point = SigmaPoint {
                sigma,
                detections: n,
                ap: r.ap,
                ap50: r.ap50,
                ap75: r.ap75,
                count_non_increasing: prev.is_none_or(|p| n <= p),
            };
            prev = Some(n);
            point
        })
        .collect()
}

/// `0.0, step, 2*step, ... <= max`, computed without accumulated drift.
pub fn sigma_grid(max: f64, step: f64) -> Vec<f64> {
    let n = (max / step + 1e-9).floor() as usize;
    (0..=n).map(|i| ((i as f64 * step) * 1e9).round() / 1e9).collect()
}
