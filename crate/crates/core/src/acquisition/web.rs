//! Web image retrieval: an offline fixture client and the live search query
//! parameterization.

use std::borrow::Borrow;
use std::fs;
use std::path::{Path, PathBuf};

use log::warn;

use super::AcquisitionError;
use crate::backends::{ImageTensor, RgbFilter};
use crate::{imageio, normalize_class_name};

/// Encoded image bytes as returned by a search backend.
#[derive(Debug, Clone)]
pub struct WebPayload {
    pub source_id: String,
    pub bytes: Vec<u8>,
}

/// A decoded web image.
#[derive(Debug, Clone, PartialEq)]
pub struct WebImage {
    pub source_id: String,
    pub image: ImageTensor,
}

impl Borrow<ImageTensor> for WebImage {
    fn borrow(&self) -> &ImageTensor {
        &self.image
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FetchOutcome {
    Hit,
    /// Offline mode had nothing stored for the query.
    FixtureMiss,
}

/// Text-to-image search. Implementations must tolerate concurrent queries.
pub trait WebImageClient: Send + Sync {
    fn id(&self) -> &str;
    /// Up to `k` top-ranked payloads for `query`.
    fn search(&self, query: &str, k: usize) -> Result<(Vec<WebPayload>, FetchOutcome), AcquisitionError>;
}

/// Offline client over a directory of pre-fetched results: `root/<query>/`
/// holds the images for `query`, ranked by file name.
#[derive(Debug, Clone)]
pub struct FixtureWebClient {
    root: PathBuf,
    id: String,
}

impl FixtureWebClient {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        let root = root.into();
        let id = format!("fixture({})", root.display());
        Self { root, id }
    }

    fn query_dir(&self, query: &str) -> Option<PathBuf> {
        [query.to_string(), normalize_class_name(query)]
            .into_iter()
            .map(|q| self.root.join(q))
            .find(|p| p.is_dir())
    }
}

impl WebImageClient for FixtureWebClient {
    fn id(&self) -> &str {
        &self.id
    }

    fn search(&self, query: &str, k: usize) -> Result<(Vec<WebPayload>, FetchOutcome), AcquisitionError> {
        let Some(dir) = self.query_dir(query) else {
            return Ok((Vec::new(), FetchOutcome::FixtureMiss));
        };
        let mut files: Vec<PathBuf> = fs::read_dir(&dir)
            .map_err(|e| AcquisitionError::Retrieval { class_name: query.to_string(), message: e.to_string() })?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        let mut out = Vec::new();
        for path in files.into_iter().take(k) {
            match fs::read(&path) {
                Ok(bytes) => out.push(WebPayload { source_id: source_id(&self.root, &path), bytes }),
                Err(e) => warn!("skipping unreadable fixture {}: {e}", path.display()),
            }
        }
        let outcome = if out.is_empty() { FetchOutcome::FixtureMiss } else { FetchOutcome::Hit };
        Ok((out, outcome))
    }
}

fn source_id(root: &Path, path: &Path) -> String {
    let rel = path.strip_prefix(root).unwrap_or(path);
    format!("web:{}", rel.display())
}

/// Search parameters of the live image-search API.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LiveSearchConfig {
    pub endpoint: String,
    /// Environment variable holding the API key.
    pub api_key_env: String,
    pub engine_id: String,
}

impl Default for LiveSearchConfig {
    fn default() -> Self {
        Self {
            endpoint: "https://www.googleapis.com/customsearch/v1".into(),
            api_key_env: "XOVD_SEARCH_API_KEY".into(),
            engine_id: String::new(),
        }
    }
}

/// The API returns at most this many results per request.
pub const LIVE_PAGE_SIZE: usize = 10;

impl LiveSearchConfig {
    /// Query parameters for one result page (without the key): photos only,
    /// jpg or png, English sources, last seven years.
    pub fn query_params(&self, query: &str, start: usize, num: usize) -> Vec<(&'static str, String)> {
        vec![
            ("cx", self.engine_id.clone()),
            ("q", query.to_string()),
            ("searchType", "image".into()),
            ("imgType", "photo".into()),
            ("fileType", "jpg|png".into()),
            ("lr", "lang_en".into()),
            ("dateRestrict", "y7".into()),
            ("start", start.to_string()),
            ("num", num.min(LIVE_PAGE_SIZE).to_string()),
        ]
    }

    /// `(start, num)` pairs covering the top `k` results.
    pub fn pages(k: usize) -> Vec<(usize, usize)> {
        (0..k)
            .step_by(LIVE_PAGE_SIZE)
            .map(|off| (off + 1, (k - off).min(LIVE_PAGE_SIZE)))
            .collect()
    }

    pub fn api_key(&self) -> Result<String, AcquisitionError> {
        std::env::var(&self.api_key_env).map_err(|_| AcquisitionError::MissingApiKey(self.api_key_env.clone()))
    }
}

#[cfg(feature = "live-web")]
pub use live::LiveWebClient;

#[cfg(feature = "live-web")]
mod live {
    use super::*;

    /// Blocking client for the live search API.
    pub struct LiveWebClient {
        config: LiveSearchConfig,
        api_key: String,
    }

    impl LiveWebClient {
        pub fn new(config: LiveSearchConfig) -> Result<Self, AcquisitionError> {
            let api_key = config.api_key()?;
            Ok(Self { config, api_key })
        }

        fn fail(query: &str, message: impl std::fmt::Display) -> AcquisitionError {
            AcquisitionError::Retrieval { class_name: query.to_string(), message: message.to_string() }
        }
    }

    impl WebImageClient for LiveWebClient {
        fn id(&self) -> &str {
            "live"
        }

        fn search(&self, query: &str, k: usize) -> Result<(Vec<WebPayload>, FetchOutcome), AcquisitionError> {
            let mut links = Vec::new();
            for (start, num) in LiveSearchConfig::pages(k) {
                let mut req = ureq::get(&self.config.endpoint).query("key", &self.api_key);
                for (key, value) in self.config.query_params(query, start, num) {
                    req = req.query(key, &value);
                }
                let text = req
                    .call()
                    .and_then(|mut r| r.body_mut().read_to_string())
                    .map_err(|e| Self::fail(query, e))?;
                let body: serde_json::Value = serde_json::from_str(&text).map_err(|e| Self::fail(query, e))?;
                let items = body.get("items").and_then(|v| v.as_array()).cloned().unwrap_or_default();
                if items.is_empty() {
                    break;
                }
                links.extend(items.iter().filter_map(|i| i.get("link")?.as_str().map(String::from)));
            }
            let mut out = Vec::new();
            for link in links.into_iter().take(k) {
                let fetched = ureq::get(&link).call().and_then(|mut r| r.body_mut().read_to_vec());
                match fetched {
                    Ok(bytes) => out.push(WebPayload { source_id: link, bytes }),
                    Err(e) => warn!("dropping {link}: {e}"),
                }
            }
            Ok((out, FetchOutcome::Hit))
        }
    }
}

/// Fetch and decode up to `k` web images for `class_name`. Undecodable
/// payloads are dropped; a fixture miss yields an empty list.
pub fn retrieve_web(class_name: &str, client: &dyn WebImageClient, k: usize) -> Result<Vec<WebImage>, AcquisitionError> {
    let (payloads, outcome) = client.search(class_name, k)?;
    if outcome == FetchOutcome::FixtureMiss {
        warn!("no web fixtures for `{class_name}` in {}", client.id());
    }
    Ok(payloads
        .into_iter()
        .take(k)
        .filter_map(|p| match imageio::decode(&p.bytes, &p.source_id) {
            Ok(image) => Some(WebImage { source_id: p.source_id, image }),
            Err(e) => {
                warn!("dropping web image: {e}");
                None
            }
        })
        .collect())
}

/// Keep the candidates whose filter confidence for `class_name` strictly
/// exceeds `tau`, preserving order. Filter failures drop the image.
pub fn filter_web<T: Borrow<ImageTensor>>(
    candidates: Vec<T>,
    rgb_filter: &dyn RgbFilter,
    class_name: &str,
    tau: f64,
) -> Result<Vec<T>, AcquisitionError> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(AcquisitionError::InvalidThreshold(tau));
    }
    Ok(candidates
        .into_iter()
        .filter(|c| match rgb_filter.confidence(c.borrow(), class_name) {
            Ok(conf) => conf > tau,
            Err(e) => {
                warn!("rgb filter failed on a `{class_name}` candidate: {e}");
                false
            }
        })
        .collect())
}
