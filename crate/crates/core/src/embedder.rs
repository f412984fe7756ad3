//! Text embeddings with a persistent cache.
//!
//! Two backends: an OpenAI-compatible HTTP embedding service, and an
//! offline signed feature-hashing featurizer over character n-grams. Both
//! go through the same two-level cache (in-process map, then one `f32le`
//! file per key under `cache_dir`). Keys are SHA-256 of the backend id and
//! the text.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const API_KEY_ENV: &str = "DREAM_API_KEY";

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("invalid embedder config: {0}")]
    Config(String),
    #[error("no texts to embed")]
    Empty,
    #[error("embedding service unreachable after {attempts} attempts: {last}")]
    Transport { attempts: u32, last: String },
    #[error("malformed service response: {0}")]
    Response(String),
    #[error("embedding dimension changed from {expected} to {found}")]
    DimensionDrift { expected: usize, found: usize },
    #[error("dimension mismatch: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("embedding has non-finite or no entries")]
    Invalid,
    #[error("cache I/O on {path}: {source}")]
    Cache {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// A dense embedding. Entries are finite and there is at least one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f32>", into = "Vec<f32>")]
pub struct Embedding(Vec<f32>);

impl Embedding {
    pub fn new(values: Vec<f32>) -> Result<Self, EmbedError> {
        if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
            return Err(EmbedError::Invalid);
        }
        Ok(Self(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f32] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt()
    }

    pub fn scaled(&self, factor: f32) -> Result<Self, EmbedError> {
        Self::new(self.0.iter().map(|v| v * factor).collect())
    }
}

impl TryFrom<Vec<f32>> for Embedding {
    type Error = EmbedError;
    fn try_from(v: Vec<f32>) -> Result<Self, Self::Error> {
        Self::new(v)
    }
}

impl From<Embedding> for Vec<f32> {
    fn from(e: Embedding) -> Self {
        e.0
    }
}

/// Cosine similarity, computed in `f64`. Defined as 0 when either vector is zero.
pub fn cosine(a: &Embedding, b: &Embedding) -> Result<f64, EmbedError> {
    cosine_slices(a.values(), b.values())
}

pub fn cosine_slices(a: &[f32], b: &[f32]) -> Result<f64, EmbedError> {
    if a.len() != b.len() {
        return Err(EmbedError::DimMismatch(a.len(), b.len()));
    }
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

/// Signed feature hashing of lower-cased character 1..=3-grams, L2-normalized.
///
/// Returns the zero vector for text with no characters. `dim` must be at least 16.
pub fn hash_featurize(text: &str, dim: usize) -> Result<Embedding, EmbedError> {
    if dim < 16 {
        return Err(EmbedError::Config(format!("hashed dim must be >= 16, got {dim}")));
    }
    let chars: Vec<char> = text.to_lowercase().chars().collect();
    let mut acc = vec![0.0f64; dim];
    let mut buf = String::new();
    for n in 1..=3 {
        for window in chars.windows(n) {
            buf.clear();
            buf.extend(window);
            let h = fnv1a(buf.as_bytes());
            let bucket = (h % dim as u64) as usize;
            let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
            acc[bucket] += sign;
        }
    }
    let norm = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
    let values = if norm > 0.0 {
        acc.iter().map(|v| (v / norm) as f32).collect()
    } else {
        acc.iter().map(|_| 0.0f32).collect()
    };
    Embedding::new(values)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Service,
    Hashed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedderConfig {
    pub backend: BackendKind,
    pub base_url: Option<String>,
    pub model: Option<String>,
    pub dim: usize,
    pub cache_dir: Option<PathBuf>,
    pub max_retries: u32,
    pub timeout_secs: f64,
    pub backoff_base_secs: f64,
    pub batch_size: usize,
    pub parallelism: usize,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self {
            backend: BackendKind::Hashed,
            base_url: None,
            model: None,
            dim: 64,
            cache_dir: None,
            max_retries: 5,
            timeout_secs: 30.0,
            backoff_base_secs: 0.5,
            batch_size: 64,
            parallelism: 4,
        }
    }
}

impl EmbedderConfig {
    pub fn hashed(dim: usize) -> Self {
        Self {
            dim,
            ..Self::default()
        }
    }

    pub fn service(base_url: &str, model: &str) -> Self {
        Self {
            backend: BackendKind::Service,
            base_url: Some(base_url.to_string()),
            model: Some(model.to_string()),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), EmbedError> {
        match self.backend {
            BackendKind::Service => {
                if self.base_url.as_deref().is_none_or(str::is_empty)
                    || self.model.as_deref().is_none_or(str::is_empty)
                {
                    return Err(EmbedError::Config(
                        "service backend requires `base_url` and `model`".into(),
                    ));
                }
            }
            BackendKind::Hashed => {
                if self.dim < 16 {
                    return Err(EmbedError::Config(format!(
                        "hashed backend requires dim >= 16, got {}",
                        self.dim
                    )));
                }
            }
        }
        if self.batch_size == 0 || self.parallelism == 0 {
            return Err(EmbedError::Config("batch_size and parallelism must be positive".into()));
        }
        Ok(())
    }

    /// Identifies the vector space; part of every cache key.
    pub fn backend_id(&self) -> String {
        match self.backend {
            BackendKind::Service => format!(
                "service:{}@{}",
                self.model.as_deref().unwrap_or_default(),
                self.base_url.as_deref().unwrap_or_default()
            ),
            BackendKind::Hashed => format!("hashed-ngram3:{}", self.dim),
        }
    }
}

#[derive(Serialize)]
struct EmbeddingRequest<'a> {
    model: &'a str,
    input: &'a [String],
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    embedding: Vec<f32>,
    #[serde(default)]
    index: Option<usize>,
}

pub struct Embedder {
    config: EmbedderConfig,
    backend_id: String,
    memory: Mutex<HashMap<String, Embedding>>,
    dim: Mutex<Option<usize>>,
    requests: AtomicUsize,
    api_key: Option<String>,
    agent: Option<ureq::Agent>,
}

impl std::fmt::Debug for Embedder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Embedder")
            .field("backend_id", &self.backend_id)
            .field("requests", &self.requests.load(Ordering::Relaxed))
            .finish()
    }
}

impl Embedder {
    pub fn new(config: EmbedderConfig) -> Result<Self, EmbedError> {
        config.validate()?;
        if let Some(dir) = &config.cache_dir {
            fs::create_dir_all(dir).map_err(|e| EmbedError::Cache {
                path: dir.display().to_string(),
                source: e,
            })?;
        }
        let agent = (config.backend == BackendKind::Service).then(|| {
            ureq::Agent::config_builder()
                .timeout_global(Some(Duration::from_secs_f64(config.timeout_secs)))
                .build()
                .into()
        });
        Ok(Self {
            backend_id: config.backend_id(),
            api_key: std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty()),
            config,
            memory: Mutex::new(HashMap::new()),
            dim: Mutex::new(None),
            requests: AtomicUsize::new(0),
            agent,
        })
    }

    pub fn config(&self) -> &EmbedderConfig {
        &self.config
    }

    pub fn backend_id(&self) -> &str {
        &self.backend_id
    }

    /// Number of HTTP requests issued so far (successful or not).
    pub fn requests_made(&self) -> usize {
        self.requests.load(Ordering::Relaxed)
    }

    pub fn cache_key(&self, text: &str) -> String {
        let mut h = Sha256::new();
        h.update(self.backend_id.as_bytes());
        h.update([0u8]);
        h.update(text.as_bytes());
        h.finalize().iter().fold(String::with_capacity(64), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }

    fn cache_path(&self, key: &str) -> Option<PathBuf> {
        self.config
            .cache_dir
            .as_ref()
            .map(|d| d.join(format!("{key}.f32")))
    }

    pub fn embed_one(&self, text: &str) -> Result<Embedding, EmbedError> {
        Ok(self.embed_texts(&[text])?.remove(0))
    }

    /// Embeds `texts` in order. Cached vectors are reused; new ones are
    /// computed (or fetched) and written through to the cache.
    pub fn embed_texts<S: AsRef<str>>(&self, texts: &[S]) -> Result<Vec<Embedding>, EmbedError> {
        if texts.is_empty() {
            return Err(EmbedError::Empty);
        }
        let keys: Vec<String> = texts.iter().map(|t| self.cache_key(t.as_ref())).collect();
        let mut found: HashMap<String, Embedding> = HashMap::new();
        let mut missing: Vec<(String, String)> = Vec::new();
        {
            let memory = self.memory.lock().expect("embedding cache poisoned");
            for (key, text) in keys.iter().zip(texts) {
                if found.contains_key(key) || missing.iter().any(|(k, _)| k == key) {
                    continue;
                }
                if let Some(e) = memory.get(key) {
                    found.insert(key.clone(), e.clone());
                } else if let Some(e) = self.read_disk(key) {
                    found.insert(key.clone(), e);
                } else {
                    missing.push((key.clone(), text.as_ref().to_string()));
                }
            }
        }

        if !missing.is_empty() {
            let fresh = match self.config.backend {
                BackendKind::Hashed => missing
                    .iter()
                    .map(|(_, t)| hash_featurize(t, self.config.dim))
                    .collect::<Result<Vec<_>, _>>()?,
                BackendKind::Service => {
                    let inputs: Vec<String> = missing.iter().map(|(_, t)| t.clone()).collect();
                    self.fetch_all(&inputs)?
                }
            };
            for ((key, _), emb) in missing.iter().zip(fresh) {
                self.write_disk(key, &emb)?;
                found.insert(key.clone(), emb);
            }
        }

        let out: Vec<Embedding> = keys.iter().map(|k| found[k].clone()).collect();
        self.check_dims(&out)?;
        let mut memory = self.memory.lock().expect("embedding cache poisoned");
        for (k, e) in found {
            memory.entry(k).or_insert(e);
        }
        Ok(out)
    }

    fn check_dims(&self, vectors: &[Embedding]) -> Result<(), EmbedError> {
        let mut dim = self.dim.lock().expect("dim lock poisoned");
        for v in vectors {
            match *dim {
                None => *dim = Some(v.dim()),
                Some(d) if d != v.dim() => {
                    return Err(EmbedError::DimensionDrift {
                        expected: d,
                        found: v.dim(),
                    })
                }
                _ => {}
            }
        }
        Ok(())
    }

    fn read_disk(&self, key: &str) -> Option<Embedding> {
        let path = self.cache_path(key)?;
        let bytes = fs::read(&path).ok()?;
        if bytes.is_empty() || bytes.len() % 4 != 0 {
            log::warn!("ignoring corrupt cache entry {}", path.display());
            return None;
        }
        let values = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Embedding::new(values).ok()
    }

    fn write_disk(&self, key: &str, emb: &Embedding) -> Result<(), EmbedError> {
        let Some(path) = self.cache_path(key) else {
            return Ok(());
        };
        let bytes: Vec<u8> = emb.values().iter().flat_map(|v| v.to_le_bytes()).collect();
        write_atomic(&path, &bytes).map_err(|e| EmbedError::Cache {
            path: path.display().to_string(),
            source: e,
        })
    }

    fn fetch_all(&self, inputs: &[String]) -> Result<Vec<Embedding>, EmbedError> {
        let chunks: Vec<&[String]> = inputs.chunks(self.config.batch_size).collect();
        let mut out = Vec::with_capacity(inputs.len());
        for group in chunks.chunks(self.config.parallelism) {
            let results: Vec<Result<Vec<Embedding>, EmbedError>> = std::thread::scope(|s| {
                let handles: Vec<_> = group
                    .iter()
                    .map(|chunk| s.spawn(move || self.fetch_with_retry(chunk)))
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("embedding worker panicked"))
                    .collect()
            });
            for r in results {
                out.extend(r?);
            }
        }
        Ok(out)
    }

    fn fetch_with_retry(&self, inputs: &[String]) -> Result<Vec<Embedding>, EmbedError> {
        let attempts = self.config.max_retries + 1;
        let mut last = String::new();
        for attempt in 0..attempts {
            if attempt > 0 {
                let delay = self.config.backoff_base_secs * 2f64.powi(attempt as i32 - 1);
                std::thread::sleep(Duration::from_secs_f64(delay));
            }
            match self.fetch_once(inputs) {
                Ok(v) => return Ok(v),
                Err(FetchError::Retryable(msg)) => {
                    log::warn!("embedding request failed (attempt {}): {msg}", attempt + 1);
                    last = msg;
                }
                Err(FetchError::Fatal(e)) => return Err(e),
            }
        }
        Err(EmbedError::Transport { attempts, last })
    }

    fn fetch_once(&self, inputs: &[String]) -> Result<Vec<Embedding>, FetchError> {
        let agent = self.agent.as_ref().expect("service backend has an agent");
        let base = self.config.base_url.as_deref().unwrap_or_default().trim_end_matches('/');
        let url = format!("{base}/v1/embeddings");
        let body = EmbeddingRequest {
            model: self.config.model.as_deref().unwrap_or_default(),
            input: inputs,
        };
        self.requests.fetch_add(1, Ordering::Relaxed);
        let mut req = agent.post(&url);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req
            .send_json(&body)
            .map_err(|e| FetchError::Retryable(e.to_string()))?;
        let parsed: EmbeddingResponse = resp
            .body_mut()
            .read_json()
            .map_err(|e| FetchError::Retryable(format!("unreadable body: {e}")))?;
        let mut data = parsed.data;
        if data.len() != inputs.len() {
            return Err(FetchError::Fatal(EmbedError::Response(format!(
                "expected {} embeddings, got {}",
                inputs.len(),
                data.len()
            ))));
        }
        if data.iter().all(|d| d.index.is_some()) {
            data.sort_by_key(|d| d.index);
        }
        data.into_iter()
            .map(|d| Embedding::new(d.embedding).map_err(FetchError::Fatal))
            .collect()
    }
}

enum FetchError {
    Retryable(String),
    Fatal(EmbedError),
}

fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension(format!("tmp{}", std::process::id()));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn e(v: &[f32]) -> Embedding {
        Embedding::new(v.to_vec()).unwrap()
    }

    #[test]
    fn cosine_examples() {
        let v = e(&[0.3, -1.2, 4.0]);
        assert_abs_diff_eq!(cosine(&v, &v).unwrap(), 1.0, epsilon = 1e-12);
        assert_eq!(cosine(&e(&[1.0, 0.0]), &e(&[0.0, 1.0])).unwrap(), 0.0);
        // 1 / sqrt(2), evaluated by hand from dot = 1, |a| = sqrt 2, |b| = 1.
        assert_abs_diff_eq!(
            cosine(&e(&[1.0, 1.0]), &e(&[1.0, 0.0])).unwrap(),
            0.707_106_781_186_547_5,
            epsilon = 1e-8
        );
        assert_eq!(cosine(&e(&[0.0, 0.0]), &e(&[1.0, 0.0])).unwrap(), 0.0);
        assert!(matches!(
            cosine(&e(&[1.0]), &e(&[1.0, 0.0])),
            Err(EmbedError::DimMismatch(1, 2))
        ));
    }

    #[test]
    fn hashed_featurizer_contract() {
        let a = hash_featurize("Harry Winer", 64).unwrap();
        let b = hash_featurize("Harry Winer", 64).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.dim(), 64);
        assert_abs_diff_eq!(a.norm(), 1.0, epsilon = 1e-6);
        let z = hash_featurize("", 32).unwrap();
        assert!(z.values().iter().all(|&v| v == 0.0));
        assert!(hash_featurize("x", 8).is_err());
        let zh = hash_featurize("南天人马座", 64).unwrap();
        assert_abs_diff_eq!(zh.norm(), 1.0, epsilon = 1e-6);
    }

    #[test]
    fn config_validation() {
        assert!(EmbedderConfig::hashed(16).validate().is_ok());
        assert!(EmbedderConfig::hashed(15).validate().is_err());
        let mut svc = EmbedderConfig::service("http://localhost:1", "bge-large");
        assert!(svc.validate().is_ok());
        svc.model = None;
        assert!(svc.validate().is_err());
    }

    #[test]
    fn hashed_embedder_is_deterministic_and_cached() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = EmbedderConfig {
            cache_dir: Some(dir.path().to_path_buf()),
            ..EmbedderConfig::hashed(64)
        };
        let emb = Embedder::new(cfg.clone()).unwrap();
        let out = emb.embed_texts(&["abc", "abc", "xyz"]).unwrap();
        assert_eq!(out[0], out[1]);
        assert!(out.iter().all(|v| v.dim() == 64));
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 2);

        let fresh = Embedder::new(cfg).unwrap();
        assert_eq!(fresh.embed_texts(&["xyz"]).unwrap()[0], out[2]);
        assert!(matches!(emb.embed_texts::<&str>(&[]), Err(EmbedError::Empty)));
    }

    #[test]
    fn embedding_rejects_non_finite() {
        assert!(Embedding::new(vec![f32::NAN]).is_err());
        assert!(Embedding::new(vec![]).is_err());
    }

    proptest! {
        #[test]
        fn cosine_symmetric_and_bounded(
            a in proptest::collection::vec(-100.0f32..100.0, 8),
            b in proptest::collection::vec(-100.0f32..100.0, 8),
        ) {
            let (a, b) = (e(&a), e(&b));
            let ab = cosine(&a, &b).unwrap();
            prop_assert_eq!(ab, cosine(&b, &a).unwrap());
            prop_assert!(ab.abs() <= 1.0 + 1e-9);
        }

        #[test]
        fn featurizer_is_byte_deterministic(text in "\\PC{0,40}", dim in 16usize..200) {
            let a = hash_featurize(&text, dim).unwrap();
            let b = hash_featurize(&text, dim).unwrap();
            prop_assert_eq!(
                a.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                b.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }
    }
}
