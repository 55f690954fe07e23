//! Name-based backend selection from configuration tables.
//!
//! Each backend slot is configured as `{ name = "...", options = { ... } }`.
//! The registry maps names to factories; [`BackendRegistry::with_stubs`]
//! pre-registers the reference implementations, and adapters for real
//! models register their own factories under new names.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use super::stub::{
    ForegroundFilter, GridProposalSource, LookupMaterialOracle, LuminanceSegmenter,
    PatchStatsExtractor, DEFAULT_LUMINANCE_CUTOFF, DEFAULT_MATERIAL, DEFAULT_PATCH, STUB_FEATURE_DIM,
};
use super::{
    BackendBundle, BackendError, FeatureExtractor, MaterialOracle, ProposalSource, RgbFilter,
    Segmenter,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendSpec {
    pub name: String,
    #[serde(default)]
    pub options: Table,
}

impl BackendSpec {
    pub fn named(name: &str) -> Self {
        Self { name: name.to_string(), options: Table::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendsConfig {
    pub segmenter: BackendSpec,
    pub extractor: BackendSpec,
    pub material_oracle: BackendSpec,
    pub proposal_source: BackendSpec,
    pub rgb_filter: BackendSpec,
}

impl Default for BackendsConfig {
    fn default() -> Self {
        Self {
            segmenter: BackendSpec::named("luminance"),
            extractor: BackendSpec::named("patch_stats"),
            material_oracle: BackendSpec::named("lookup"),
            proposal_source: BackendSpec::named("grid"),
            rgb_filter: BackendSpec::named("foreground"),
        }
    }
}

type Factory<T> = Box<dyn Fn(&Table) -> Result<Arc<T>, BackendError> + Send + Sync>;

/// Registered backend factories, keyed by name per slot.
pub struct BackendRegistry {
    segmenters: BTreeMap<String, Factory<dyn Segmenter>>,
    extractors: BTreeMap<String, Factory<dyn FeatureExtractor>>,
    oracles: BTreeMap<String, Factory<dyn MaterialOracle>>,
    proposal_sources: BTreeMap<String, Factory<dyn ProposalSource>>,
    rgb_filters: BTreeMap<String, Factory<dyn RgbFilter>>,
}

impl BackendRegistry {
    pub fn empty() -> Self {
        Self {
            segmenters: BTreeMap::new(),
            extractors: BTreeMap::new(),
            oracles: BTreeMap::new(),
            proposal_sources: BTreeMap::new(),
            rgb_filters: BTreeMap::new(),
        }
    }

    pub fn with_stubs() -> Self {
        let mut reg = Self::empty();
        reg.register_segmenter("luminance", |opts| {
            let o = Options::new("luminance", opts, &["cutoff"])?;
            Ok(Arc::new(LuminanceSegmenter::new(o.f64("cutoff", DEFAULT_LUMINANCE_CUTOFF)?)?))
        });
        reg.register_extractor("patch_stats", |opts| {
            let o = Options::new("patch_stats", opts, &["patch", "dim"])?;
            Ok(Arc::new(PatchStatsExtractor::new(
                o.usize("patch", DEFAULT_PATCH)?,
                o.usize("dim", STUB_FEATURE_DIM)?,
            )?))
        });
        reg.register_material_oracle("lookup", |opts| {
            let o = Options::new("lookup", opts, &["default_material", "table", "replace_table"])?;
            let mut table = if o.bool("replace_table", false)? {
                BTreeMap::new()
            } else {
                super::stub::default_material_table()
            };
            table.extend(o.string_table("table")?);
            Ok(Arc::new(LookupMaterialOracle::new(
                table,
                o.string("default_material", DEFAULT_MATERIAL)?,
            )))
        });
        reg.register_proposal_source("grid", |opts| {
            let o = Options::new("grid", opts, &["stride", "window", "patch", "dim"])?;
            let extractor = PatchStatsExtractor::new(
                o.usize("patch", DEFAULT_PATCH)?,
                o.usize("dim", STUB_FEATURE_DIM)?,
            )?;
            Ok(Arc::new(GridProposalSource::new(
                o.usize("stride", 16)?,
                o.usize("window", 32)?,
                extractor,
            )?))
        });
        reg.register_rgb_filter("foreground", |opts| {
            let o = Options::new("foreground", opts, &["cutoff", "saturation"])?;
            Ok(Arc::new(ForegroundFilter::new(
                o.f64("cutoff", DEFAULT_LUMINANCE_CUTOFF)?,
                o.f64("saturation", 0.1)?,
            )?))
        });
        reg
    }

    pub fn register_segmenter<F>(&mut self, name: &str, factory: F)
    where
        F: Fn(&Table) -> Result<Arc<dyn Segmenter>, BackendError> + Send + Sync + 'static,
    {
        self.segmenters.insert(name.to_string(), Box::new(factory));
    }

    pub fn register_extractor<F>(&mut self, name: &str, factory: F)
    where
        F: Fn(&Table) -> Result<Arc<dyn FeatureExtractor>, BackendError> + Send + Sync + 'static,
    {
        self.extractors.insert(name.to_string(), Box::new(factory));
    }

    pub fn register_material_oracle<F>(&mut self, name: &str, factory: F)
    where
        F: Fn(&Table) -> Result<Arc<dyn MaterialOracle>, BackendError> + Send + Sync + 'static,
    {
        self.oracles.insert(name.to_string(), Box::new(factory));
    }

    pub fn register_proposal_source<F>(&mut self, name: &str, factory: F)
    where
        F: Fn(&Table) -> Result<Arc<dyn ProposalSource>, BackendError> + Send + Sync + 'static,
    {
        self.proposal_sources.insert(name.to_string(), Box::new(factory));
    }

    pub fn register_rgb_filter<F>(&mut self, name: &str, factory: F)
    where
        F: Fn(&Table) -> Result<Arc<dyn RgbFilter>, BackendError> + Send + Sync + 'static,
    {
        self.rgb_filters.insert(name.to_string(), Box::new(factory));
    }

    /// Check that every slot names a registered backend without constructing anything.
    pub fn validate(&self, config: &BackendsConfig) -> Result<(), BackendError> {
        check(&self.segmenters, "segmenter", &config.segmenter)?;
        check(&self.extractors, "extractor", &config.extractor)?;
        check(&self.oracles, "material_oracle", &config.material_oracle)?;
        check(&self.proposal_sources, "proposal_source", &config.proposal_source)?;
        check(&self.rgb_filters, "rgb_filter", &config.rgb_filter)?;
        Ok(())
    }

    pub fn build(&self, config: &BackendsConfig) -> Result<BackendBundle, BackendError> {
        self.validate(config)?;
        Ok(BackendBundle {
            segmenter: self.segmenters[&config.segmenter.name](&config.segmenter.options)?,
            extractor: self.extractors[&config.extractor.name](&config.extractor.options)?,
            material_oracle: self.oracles[&config.material_oracle.name](&config.material_oracle.options)?,
            proposal_source: self.proposal_sources[&config.proposal_source.name](
                &config.proposal_source.options,
            )?,
            rgb_filter: self.rgb_filters[&config.rgb_filter.name](&config.rgb_filter.options)?,
        })
    }
}

fn check<T: ?Sized>(
    map: &BTreeMap<String, Factory<T>>,
    kind: &'static str,
    spec: &BackendSpec,
) -> Result<(), BackendError> {
    if map.contains_key(&spec.name) {
        Ok(())
    } else {
        Err(BackendError::UnknownBackend { kind, name: spec.name.clone() })
    }
}

/// Typed accessors over an options table that reject unknown keys.
struct Options<'a> {
    backend: &'static str,
    table: &'a Table,
}

impl<'a> Options<'a> {
    fn new(backend: &'static str, table: &'a Table, allowed: &[&str]) -> Result<Self, BackendError> {
        if let Some(key) = table.keys().find(|k| !allowed.contains(&k.as_str())) {
            return Err(BackendError::BadOption {
                backend: backend.into(),
                message: format!("unknown option `{key}` (allowed: {})", allowed.join(", ")),
            });
        }
        Ok(Self { backend, table })
    }

    fn bad(&self, key: &str, want: &str) -> BackendError {
        BackendError::BadOption {
            backend: self.backend.into(),
            message: format!("option `{key}` must be {want}"),
        }
    }

    fn f64(&self, key: &str, default: f64) -> Result<f64, BackendError> {
        match self.table.get(key) {
            None => Ok(default),
            Some(Value::Float(v)) => Ok(*v),
            Some(Value::Integer(v)) => Ok(*v as f64),
            Some(_) => Err(self.bad(key, "a number")),
        }
    }

    fn usize(&self, key: &str, default: usize) -> Result<usize, BackendError> {
        match self.table.get(key) {
            None => Ok(default),
            Some(Value::Integer(v)) if *v >= 0 => Ok(*v as usize),
            Some(_) => Err(self.bad(key, "a non-negative integer")),
        }
    }

    fn bool(&self, key: &str, default: bool) -> Result<bool, BackendError> {
        match self.table.get(key) {
            None => Ok(default),
            Some(Value::Boolean(v)) => Ok(*v),
            Some(_) => Err(self.bad(key, "a boolean")),
        }
    }

    fn string(&self, key: &str, default: &str) -> Result<String, BackendError> {
        match self.table.get(key) {
            None => Ok(default.to_string()),
            Some(Value::String(v)) => Ok(v.clone()),
            Some(_) => Err(self.bad(key, "a string")),
        }
    }

    fn string_table(&self, key: &str) -> Result<BTreeMap<String, String>, BackendError> {
        match self.table.get(key) {
            None => Ok(BTreeMap::new()),
            Some(Value::Table(t)) => t
                .iter()
                .map(|(k, v)| match v {
                    Value::String(s) => Ok((k.clone(), s.clone())),
                    _ => Err(self.bad(key, "a table of strings")),
                })
                .collect(),
            Some(_) => Err(self.bad(key, "a table")),
        }
    }
}
