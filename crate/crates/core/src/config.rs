//! Run configuration: one TOML document, `${VAR}` interpolation in string
//! values, paths relative to the config file, and a content hash that names
//! the run directory.

use std::collections::BTreeMap;
use std::env;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use toml::Value;

use crate::acquisition::{CropConfig, GalleryOptions, LiveSearchConfig};
use crate::backends::BackendsConfig;
use crate::classifier::DEFAULT_SIGMA;
use crate::eval::{CmteConfig, EvalOptions};
use crate::material::{FallbackPalette, MaterialOptions, INORGANIC, WHITE_FILL};

pub const DEFAULT_K: usize = 30;
pub const DEFAULT_TAU: f64 = 0.5;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {}: {source}", path.display())]
    Read { path: PathBuf, source: std::io::Error },
    #[error("invalid config: {0}")]
    Parse(String),
    #[error("environment variable `{0}` referenced in config is not set")]
    MissingEnv(String),
    #[error("invalid config value: {0}")]
    Invalid(String),
    #[error("{role} path {} does not exist", path.display())]
    MissingPath { role: &'static str, path: PathBuf },
    #[error("config needs `paths.{0}` for this command")]
    PathNotSet(&'static str),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// In-house manifest (JSON lines).
    pub in_house: Option<PathBuf>,
    /// Test-scene manifest with ground-truth boxes.
    pub test: Option<PathBuf>,
    /// Directory of offline web-search results, one sub-directory per query.
    pub web_fixtures: Option<PathBuf>,
    pub material_db: Option<PathBuf>,
    pub store: Option<PathBuf>,
    /// Root under which per-run directories are created.
    pub runs: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub ratios: Vec<f64>,
    pub ks: Vec<usize>,
    pub sigmas: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            ratios: vec![1.0, 0.5, 0.0],
            ks: vec![1, 2, 5, 10, 20, 30],
            sigmas: crate::eval::sigma_grid(0.5, 0.05),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub vocabulary: Vec<String>,
    /// Gallery samples per class.
    pub k: usize,
    /// Consistency threshold.
    pub sigma: f64,
    /// RGB filter threshold.
    pub tau: f64,
    /// In-house share of the vocabulary.
    pub composition: f64,
    pub seeds: Vec<u64>,
    pub background_fill: [f64; 3],
    pub default_material: String,
    pub palette: FallbackPalette,
    pub crop: CropConfig,
    pub split_train: Option<String>,
    pub split_test: Option<String>,
    pub eval: EvalOptions,
    pub sweep: SweepConfig,
    pub paths: PathsConfig,
    /// Live image search; used only by builds with live web support.
    pub live_web: Option<LiveSearchConfig>,
    pub backends: BackendsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            vocabulary: Vec::new(),
            k: DEFAULT_K,
            sigma: DEFAULT_SIGMA,
            tau: DEFAULT_TAU,
            composition: 1.0,
            seeds: vec![0],
            background_fill: WHITE_FILL,
            default_material: INORGANIC.into(),
            palette: FallbackPalette::default(),
            crop: CropConfig::default(),
            split_train: None,
            split_test: None,
            eval: EvalOptions::default(),
            sweep: SweepConfig::default(),
            paths: PathsConfig::default(),
            live_web: None,
            backends: BackendsConfig::default(),
        }
    }
}

/// Replace `${NAME}` with the value of environment variable `NAME`.
pub fn interpolate_env(text: &str) -> Result<String, ConfigError> {
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    while let Some(start) = rest.find("${") {
        out.push_str(&rest[..start]);
        let after = &rest[start + 2..];
        let end = after
            .find('}')
            .ok_or_else(|| ConfigError::Parse(format!("unterminated `${{` in `{text}`")))?;
        let name = &after[..end];
        out.push_str(&env::var(name).map_err(|_| ConfigError::MissingEnv(name.to_string()))?);
        rest = &after[end + 1..];
    }
    out.push_str(rest);
    Ok(out)
}

fn interpolate_value(v: &mut Value) -> Result<(), ConfigError> {
    match v {
        Value::String(s) => *s = interpolate_env(s)?,
        Value::Array(a) => a.iter_mut().try_for_each(interpolate_value)?,
        Value::Table(t) => t.iter_mut().try_for_each(|(_, v)| interpolate_value(v))?,
        _ => {}
    }
    Ok(())
}

impl RunConfig {
    /// Parse TOML text; relative paths resolve against `base_dir`.
    pub fn from_toml_str(text: &str, base_dir: &Path) -> Result<Self, ConfigError> {
        let mut raw: Value = text.parse::<toml::Table>().map(Value::Table).map_err(|e| ConfigError::Parse(e.to_string()))?;
        interpolate_value(&mut raw)?;
        let mut cfg: RunConfig = raw.try_into().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        cfg.resolve_paths(base_dir);
        cfg.check_values()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.to_path_buf(), source })?;
        Self::from_toml_str(&text, path.parent().unwrap_or(Path::new(".")))
    }

    fn resolve_paths(&mut self, base: &Path) {
        let p = &mut self.paths;
        for slot in [&mut p.in_house, &mut p.test, &mut p.web_fixtures, &mut p.material_db, &mut p.store, &mut p.runs] {
            if let Some(path) = slot.as_mut().filter(|p| p.is_relative()) {
                *path = base.join(&*path);
            }
        }
    }

    /// Range checks on scalar settings.
    pub fn check_values(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.k == 0 {
            return bad("k must be at least 1".into());
        }
        if !self.sigma.is_finite() {
            return bad(format!("sigma {} is not finite", self.sigma));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return bad(format!("tau {} outside [0, 1]", self.tau));
        }
        if !(0.0..=1.0).contains(&self.composition) {
            return bad(format!("composition {} outside [0, 1]", self.composition));
        }
        if let Some(r) = self.sweep.ratios.iter().find(|r| !(0.0..=1.0).contains(*r)) {
            return bad(format!("sweep ratio {r} outside [0, 1]"));
        }
        if self.sweep.ks.contains(&0) {
            return bad("sweep k values must be at least 1".into());
        }
        if self.background_fill.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return bad("background_fill channels must lie in [0, 1]".into());
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required".into());
        }
        Ok(())
    }

    /// Require that `paths.<role>` is set and exists.
    pub fn require_existing(&self, role: &'static str) -> Result<&Path, ConfigError> {
        let path = self.path(role).ok_or(ConfigError::PathNotSet(role))?;
        if !path.exists() {
            return Err(ConfigError::MissingPath { role, path: path.to_path_buf() });
        }
        Ok(path)
    }

    /// If `paths.<role>` is set it must exist.
    pub fn optional_existing(&self, role: &'static str) -> Result<Option<&Path>, ConfigError> {
        match self.path(role) {
            Some(p) if !p.exists() => Err(ConfigError::MissingPath { role, path: p.to_path_buf() }),
            other => Ok(other),
        }
    }

    pub fn path(&self, role: &str) -> Option<&Path> {
        let p = &self.paths;
        match role {
            "in_house" => p.in_house.as_deref(),
            "test" => p.test.as_deref(),
            "web_fixtures" => p.web_fixtures.as_deref(),
            "material_db" => p.material_db.as_deref(),
            "store" => p.store.as_deref(),
            "runs" => p.runs.as_deref(),
            _ => None,
        }
    }

    pub fn gallery_options(&self) -> GalleryOptions {
        GalleryOptions { k: self.k, tau: self.tau, background_fill: self.background_fill, crop: self.crop }
    }

    pub fn material_options(&self) -> MaterialOptions {
        MaterialOptions { default_material: self.default_material.clone(), palette: self.palette, crop: self.crop }
    }

    pub fn cmte_config(&self) -> CmteConfig {
        CmteConfig {
            in_house_fraction: self.composition,
            seed: self.seeds[0],
            sigma: self.sigma,
            gallery: self.gallery_options(),
            material: self.material_options(),
            eval: self.eval,
            permute_descriptors: None,
            config_hash: Some(self.hash()),
        }
    }

    /// SHA-256 over the canonical JSON form of the configuration. Secrets
    /// pulled in by interpolation are not part of the config and do not
    /// affect it beyond the resolved text of the fields that name them.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(&canonical_json(self)).expect("config serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    /// Short form of [`hash`](Self::hash) used for run directory names.
    pub fn short_hash(&self) -> String {
        self.hash()[..16].to_string()
    }
}

/// JSON with object keys sorted recursively.
fn canonical_json(cfg: &RunConfig) -> serde_json::Value {
    fn sort(v: serde_json::Value) -> serde_json::Value {
        match v {
            serde_json::Value::Object(m) => {
                let sorted: BTreeMap<String, serde_json::Value> = m.into_iter().map(|(k, v)| (k, sort(v))).collect();
                serde_json::Value::Object(sorted.into_iter().collect())
            }
            serde_json::Value::Array(a) => serde_json::Value::Array(a.into_iter().map(sort).collect()),
            other => other,
        }
    }
    sort(serde_json::to_value(cfg).expect("config serializes"))
}
