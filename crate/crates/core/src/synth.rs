//! Deterministic synthetic micro-benchmark.
//!
//! Three classes rendered as flat scanner-colored blocks on white: an
//! in-house training set with box annotations, test scenes with one or two
//! objects each, and a directory of web-search fixtures holding RGB-style
//! photos (plus a few blank and undecodable files) for the web path.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::acquisition::{write_manifest, ManifestObject, ManifestRecord};
use crate::backends::{BBox, ImageTensor};
use crate::imageio::{self, ImageIoError};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("synthetic data io: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Image(#[from] ImageIoError),
    #[error("invalid synthetic spec: {0}")]
    Invalid(String),
}

/// Training objects are aligned to cells of this size.
const CELL: usize = 8;

/// One synthetic class: its scanner rendering and its look in web photos.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthClass {
    pub name: String,
    pub scanner_color: [f64; 3],
    pub photo_color: [f64; 3],
}

/// Knife, laptop and lemon. Scanner colors sit near, but not on, the
/// default metal / inorganic / organic pseudo-colors.
pub fn micro_classes() -> Vec<SynthClass> {
    let c = |name: &str, scanner_color, photo_color| SynthClass { name: name.into(), scanner_color, photo_color };
    vec![
        c("knife", [0.05, 0.20, 0.85], [0.55, 0.57, 0.62]),
        c("laptop", [0.10, 0.75, 0.10], [0.16, 0.16, 0.18]),
        c("lemon", [0.95, 0.45, 0.02], [0.97, 0.84, 0.22]),
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub seed: u64,
    pub classes: Vec<SynthClass>,
    pub train_per_class: usize,
    pub train_size: usize,
    pub test_scenes: usize,
    pub scene_size: usize,
    /// Side of the square test objects; placements are on a grid of half this size.
    pub object_size: usize,
    /// Good web photos per class, before blanks and corrupt files are added.
    pub web_per_class: usize,
    /// Per-pixel noise amplitude.
    pub noise: f64,
    /// Per-object color jitter amplitude.
    pub jitter: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            seed: 7,
            classes: micro_classes(),
            train_per_class: 30,
            train_size: 96,
            test_scenes: 20,
            scene_size: 96,
            object_size: 32,
            web_per_class: 12,
            noise: 0.02,
            jitter: 0.03,
        }
    }
}

/// Where the generated files live.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthLayout {
    pub root: PathBuf,
    pub train_manifest: PathBuf,
    pub test_manifest: PathBuf,
    pub web_dir: PathBuf,
    pub vocabulary: Vec<String>,
}

fn jitter(rng: &mut ChaCha8Rng, color: [f64; 3], amount: f64) -> [f64; 3] {
    color.map(|c| (c + rng.random_range(-amount..=amount)).clamp(0.0, 1.0))
}

/// Paint `objects` (box, color) over a `background` canvas with per-pixel noise.
pub fn render(
    height: usize,
    width: usize,
    background: [f64; 3],
    objects: &[(BBox, [f64; 3])],
    noise: f64,
    rng: &mut ChaCha8Rng,
) -> ImageTensor {
    let mut pixels = vec![background; height * width];
    for (b, color) in objects {
        for y in b.y1 as usize..(b.y2 as usize).min(height) {
            for x in b.x1 as usize..(b.x2 as usize).min(width) {
                pixels[y * width + x] = *color;
            }
        }
    }
    if noise > 0.0 {
        for p in &mut pixels {
            *p = p.map(|c| (c + rng.random_range(-noise..=noise)).clamp(0.0, 1.0));
        }
    }
    ImageTensor::new(height, width, pixels).expect("rendered pixels are in range")
}

fn square(x: usize, y: usize, side: usize) -> BBox {
    BBox::new(x as f64, y as f64, (x + side) as f64, (y + side) as f64).expect("positive side")
}

/// Non-overlapping grid placements with at least half an object of gap.
fn place_objects(rng: &mut ChaCha8Rng, count: usize, scene: usize, side: usize) -> Vec<(usize, usize)> {
    let step = side / 2;
    let slots = (scene - side) / step + 1;
    let mut placed: Vec<(usize, usize)> = Vec::new();
    for _ in 0..100 {
        placed.clear();
        for _ in 0..50 {
            if placed.len() == count {
                return placed;
            }
            let p = (rng.random_range(0..slots) * step, rng.random_range(0..slots) * step);
            let far = placed.iter().all(|q| p.0.abs_diff(q.0) >= side + step || p.1.abs_diff(q.1) >= side + step);
            if far {
                placed.push(p);
            }
        }
        if placed.len() == count {
            break;
        }
    }
    placed
}

/// Write the micro-benchmark under `root`.
pub fn generate_micro_dataset(root: &Path, spec: &SynthSpec) -> Result<SynthLayout, SynthError> {
    if spec.classes.is_empty() || spec.object_size < 2 || spec.object_size > spec.scene_size {
        return Err(SynthError::Invalid("need classes and objects that fit the scene".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let white = [1.0; 3];

    let train_dir = root.join("train");
    let test_dir = root.join("test");
    let web_dir = root.join("web");
    fs::create_dir_all(&train_dir)?;
    fs::create_dir_all(&test_dir)?;

    let mut train = Vec::new();
    for class in &spec.classes {
        for i in 0..spec.train_per_class {
            // cell-aligned, so a 10% crop margin rounds out to one whole cell
            let side = CELL * rng.random_range(5..=10).min(spec.train_size / CELL);
            let x = CELL * rng.random_range(0..=(spec.train_size - side) / CELL);
            let y = CELL * rng.random_range(0..=(spec.train_size - side) / CELL);
            let b = square(x, y, side);
            let color = jitter(&mut rng, class.scanner_color, spec.jitter);
            let img = render(spec.train_size, spec.train_size, white, &[(b, color)], spec.noise, &mut rng);
            let rel = format!("train/{}_{i:03}.png", class.name);
            imageio::save(&img, &root.join(&rel))?;
            train.push(ManifestRecord {
                image_id: Some(format!("train-{}-{i:03}", class.name)),
                image_path: rel,
                classes: vec![],
                split: Some("train".into()),
                objects: vec![ManifestObject { class_name: class.name.clone(), bbox: Some(b), visible: true }],
            });
        }
    }
    let train_manifest = root.join("train.jsonl");
    write_manifest(&train_manifest, &train)?;

    let mut test = Vec::new();
    for i in 0..spec.test_scenes {
        let count = 1 + (i % 2);
        let spots = place_objects(&mut rng, count, spec.scene_size, spec.object_size);
        let mut objects = Vec::new();
        let mut painted = Vec::new();
        for (j, (x, y)) in spots.into_iter().enumerate() {
            let class = &spec.classes[(i + j * 2) % spec.classes.len()];
            let b = square(x, y, spec.object_size);
            painted.push((b, jitter(&mut rng, class.scanner_color, spec.jitter)));
            objects.push(ManifestObject { class_name: class.name.clone(), bbox: Some(b), visible: true });
        }
        let img = render(spec.scene_size, spec.scene_size, white, &painted, spec.noise, &mut rng);
        let rel = format!("test/scene_{i:03}.png");
        imageio::save(&img, &root.join(&rel))?;
        test.push(ManifestRecord {
            image_id: Some(format!("scene-{i:03}")),
            image_path: rel,
            classes: vec![],
            split: Some("test".into()),
            objects,
        });
    }
    let test_manifest = root.join("test.jsonl");
    write_manifest(&test_manifest, &test)?;

    for class in &spec.classes {
        let dir = web_dir.join(&class.name);
        fs::create_dir_all(&dir)?;
        let mut n = 0usize;
        for i in 0..spec.web_per_class {
            // a blank result and an undecodable one among the hits
            if i % 5 == 2 {
                let blank = render(48, 64, [0.97; 3], &[], 0.02, &mut rng);
                imageio::save(&blank, &dir.join(format!("{n:02}.png")))?;
                n += 1;
            }
            if i % 6 == 4 {
                fs::write(dir.join(format!("{n:02}.jpg")), b"<html>not an image</html>")?;
                n += 1;
            }
            let (h, w) = (48, 64);
            let side = rng.random_range(16..=28);
            let b = square(rng.random_range(0..=w - side), rng.random_range(0..=h - side), side);
            let color = jitter(&mut rng, class.photo_color, spec.jitter);
            let bg = [rng.random_range(0.93..=0.99); 3];
            let img = render(h, w, bg, &[(b, color)], spec.noise, &mut rng);
            imageio::save(&img, &dir.join(format!("{n:02}.png")))?;
            n += 1;
        }
    }

    Ok(SynthLayout {
        root: root.to_path_buf(),
        train_manifest,
        test_manifest,
        web_dir,
        vocabulary: spec.classes.iter().map(|c| c.name.clone()).collect(),
    })
}
