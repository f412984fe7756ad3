//! Corpus data model: questions, sampled generations, gold labels and
//! last-token activation dumps.
//!
//! Text data is JSONL, one record per line. Activations live in a raw
//! little-endian `f32` file described by a JSON manifest; records are laid
//! out back to back, each `hidden_size * 4` bytes long.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of Normal generations sampled per question unless configured otherwise.
pub const DEFAULT_K: usize = 5;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Malformed {
        path: String,
        line: usize,
        message: String,
    },
    #[error("duplicate question id `{0}`")]
    DuplicateQuestion(String),
    #[error("duplicate generation ({question_id}, {mode}, {index})")]
    DuplicateGeneration {
        question_id: String,
        mode: GenMode,
        index: usize,
    },
    #[error("k must be at least 2, got {0}")]
    InvalidK(usize),
    #[error("questions without exactly {k} normal generations: {question_ids:?}")]
    KViolation { k: usize, question_ids: Vec<String> },
    #[error("invalid activation manifest: {0}")]
    Manifest(String),
    #[error("activation file size mismatch: expected {expected} bytes, found {actual}")]
    SizeMismatch { expected: u64, actual: u64 },
    #[error("no activation for question `{question_id}` at {site}/{layer}")]
    NotFound {
        question_id: String,
        site: Site,
        layer: usize,
    },
}

impl CorpusError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        CorpusError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Question {
    pub id: String,
    pub text: String,
    pub language: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qtype: Option<String>,
}

impl Question {
    fn check(&self) -> Result<(), String> {
        if self.id.is_empty() {
            return Err("empty `id`".into());
        }
        if self.text.trim().is_empty() {
            return Err(format!("question `{}` has empty `text`", self.id));
        }
        if matches!(&self.answer, Some(a) if a.trim().is_empty()) {
            return Err(format!("question `{}` has an empty `answer`", self.id));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GenMode {
    Normal,
    Uncertainty,
}

impl fmt::Display for GenMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GenMode::Normal => "normal",
            GenMode::Uncertainty => "uncertainty",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Generation {
    pub question_id: String,
    pub mode: GenMode,
    pub index: usize,
    pub text: String,
}

impl Generation {
    pub fn key(&self) -> GenKey {
        GenKey::new(&self.question_id, self.mode, self.index)
    }
}

/// Identifies one generation: `(question_id, mode, index)`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GenKey {
    pub question_id: String,
    pub mode: GenMode,
    pub index: usize,
}

impl GenKey {
    pub fn new(question_id: &str, mode: GenMode, index: usize) -> Self {
        Self {
            question_id: question_id.to_string(),
            mode,
            index,
        }
    }
}

impl fmt::Display for GenKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}/{}", self.question_id, self.mode, self.index)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Correct,
    Incorrect,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldLabel {
    pub question_id: String,
    pub mode: GenMode,
    pub index: usize,
    pub verdict: Verdict,
}

impl GoldLabel {
    pub fn key(&self) -> GenKey {
        GenKey::new(&self.question_id, self.mode, self.index)
    }
}

/// Representation site an activation was read from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Site {
    /// Attention output before the attention output projection.
    AttnOutput,
    /// Feed-forward output before the residual add.
    MlpOutput,
    /// Decoder layer output.
    HiddenState,
}

impl Site {
    pub const ALL: [Site; 3] = [Site::AttnOutput, Site::MlpOutput, Site::HiddenState];

    pub fn as_str(&self) -> &'static str {
        match self {
            Site::AttnOutput => "attn_output",
            Site::MlpOutput => "mlp_output",
            Site::HiddenState => "hidden_state",
        }
    }
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub question_id: String,
    pub site: Site,
    pub layer: usize,
    pub byte_offset: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActivationManifest {
    pub model_name: String,
    pub num_layers: usize,
    pub hidden_size: usize,
    pub sites: Vec<Site>,
    pub dtype: String,
    pub records: Vec<ManifestRecord>,
}

impl ActivationManifest {
    pub const DTYPE: &'static str = "f32le";

    pub fn record_bytes(&self) -> u64 {
        self.hidden_size as u64 * 4
    }

    /// Structural checks that do not need the binary file.
    pub fn check(&self) -> Result<(), CorpusError> {
        let bad = |m: String| Err(CorpusError::Manifest(m));
        if self.dtype != Self::DTYPE {
            return bad(format!("dtype must be `f32le`, got `{}`", self.dtype));
        }
        if self.hidden_size == 0 {
            return bad("hidden_size must be positive".into());
        }
        let sites: BTreeSet<Site> = self.sites.iter().copied().collect();
        if sites.len() != self.sites.len() {
            return bad("duplicate entry in `sites`".into());
        }
        let stride = self.record_bytes();
        let mut seen = HashSet::new();
        let mut questions = BTreeSet::new();
        let mut layers = BTreeSet::new();
        let mut prev: Option<u64> = None;
        for (i, r) in self.records.iter().enumerate() {
            if !sites.contains(&r.site) {
                return bad(format!("record {i}: site {} not listed in `sites`", r.site));
            }
            if r.layer >= self.num_layers {
                return bad(format!(
                    "record {i}: layer {} >= num_layers {}",
                    r.layer, self.num_layers
                ));
            }
            if prev.is_some_and(|p| r.byte_offset <= p) {
                return bad(format!("record {i}: offsets must be strictly increasing"));
            }
            if r.byte_offset != i as u64 * stride {
                return bad(format!(
                    "record {i}: offset {} leaves a gap or overlap (expected {})",
                    r.byte_offset,
                    i as u64 * stride
                ));
            }
            prev = Some(r.byte_offset);
            if !seen.insert((r.question_id.as_str(), r.site, r.layer)) {
                return bad(format!(
                    "duplicate record ({}, {}, {})",
                    r.question_id, r.site, r.layer
                ));
            }
            questions.insert(r.question_id.as_str());
            layers.insert(r.layer);
        }
        let expected = questions.len() * sites.len() * layers.len();
        if expected != self.records.len() {
            return bad(format!(
                "record count {} != questions ({}) x sites ({}) x layers ({})",
                self.records.len(),
                questions.len(),
                sites.len(),
                layers.len()
            ));
        }
        Ok(())
    }
}

/// Read-only, random-access view over an activation dump.
#[derive(Debug, Clone)]
pub struct ActivationStore {
    manifest: ActivationManifest,
    data: Vec<f32>,
    index: HashMap<String, HashMap<(Site, usize), usize>>,
}

impl ActivationStore {
    pub fn from_parts(manifest: ActivationManifest, bytes: &[u8]) -> Result<Self, CorpusError> {
        manifest.check()?;
        let expected = manifest.records.len() as u64 * manifest.record_bytes();
        if bytes.len() as u64 != expected {
            return Err(CorpusError::SizeMismatch {
                expected,
                actual: bytes.len() as u64,
            });
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let mut index: HashMap<String, HashMap<(Site, usize), usize>> = HashMap::new();
        for (i, r) in manifest.records.iter().enumerate() {
            index
                .entry(r.question_id.clone())
                .or_default()
                .insert((r.site, r.layer), i);
        }
        Ok(Self {
            manifest,
            data,
            index,
        })
    }

    pub fn manifest(&self) -> &ActivationManifest {
        &self.manifest
    }

    pub fn hidden_size(&self) -> usize {
        self.manifest.hidden_size
    }

    pub fn get(&self, question_id: &str, site: Site, layer: usize) -> Result<&[f32], CorpusError> {
        match self
            .index
            .get(question_id)
            .and_then(|cells| cells.get(&(site, layer)))
        {
            Some(&i) => {
                let h = self.manifest.hidden_size;
                Ok(&self.data[i * h..(i + 1) * h])
            }
            None => Err(CorpusError::NotFound {
                question_id: question_id.to_string(),
                site,
                layer,
            }),
        }
    }

    pub fn question_ids(&self) -> BTreeSet<&str> {
        self.manifest
            .records
            .iter()
            .map(|r| r.question_id.as_str())
            .collect()
    }

    pub fn layers(&self) -> BTreeSet<usize> {
        self.manifest.records.iter().map(|r| r.layer).collect()
    }

    pub fn sites(&self) -> &[Site] {
        &self.manifest.sites
    }

    pub fn contains_question(&self, question_id: &str) -> bool {
        self.index.contains_key(question_id)
    }
}

/// Accumulates vectors in record order and writes a manifest + binary pair.
#[derive(Debug)]
pub struct ActivationWriter {
    manifest: ActivationManifest,
    bytes: Vec<u8>,
}

impl ActivationWriter {
    pub fn new(model_name: &str, num_layers: usize, hidden_size: usize, sites: Vec<Site>) -> Self {
        Self {
            manifest: ActivationManifest {
                model_name: model_name.to_string(),
                num_layers,
                hidden_size,
                sites,
                dtype: ActivationManifest::DTYPE.to_string(),
                records: Vec::new(),
            },
            bytes: Vec::new(),
        }
    }

    pub fn push(
        &mut self,
        question_id: &str,
        site: Site,
        layer: usize,
        vector: &[f32],
    ) -> Result<(), CorpusError> {
        if vector.len() != self.manifest.hidden_size {
            return Err(CorpusError::Manifest(format!(
                "vector of length {} does not match hidden_size {}",
                vector.len(),
                self.manifest.hidden_size
            )));
        }
        self.manifest.records.push(ManifestRecord {
            question_id: question_id.to_string(),
            site,
            layer,
            byte_offset: self.bytes.len() as u64,
        });
        for v in vector {
            self.bytes.extend_from_slice(&v.to_le_bytes());
        }
        Ok(())
    }

    pub fn finish(self) -> Result<(ActivationManifest, Vec<u8>), CorpusError> {
        self.manifest.check()?;
        Ok((self.manifest, self.bytes))
    }

    pub fn write(self, manifest_path: &Path, bin_path: &Path) -> Result<ActivationManifest, CorpusError> {
        let (manifest, bytes) = self.finish()?;
        let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        fs::write(manifest_path, json + "\n").map_err(|e| CorpusError::io(manifest_path, e))?;
        fs::write(bin_path, &bytes).map_err(|e| CorpusError::io(bin_path, e))?;
        Ok(manifest)
    }
}

pub fn load_activations(manifest_path: &Path, bin_path: &Path) -> Result<ActivationStore, CorpusError> {
    let text = fs::read_to_string(manifest_path).map_err(|e| CorpusError::io(manifest_path, e))?;
    let manifest: ActivationManifest =
        serde_json::from_str(&text).map_err(|e| CorpusError::Manifest(e.to_string()))?;
    let bytes = fs::read(bin_path).map_err(|e| CorpusError::io(bin_path, e))?;
    ActivationStore::from_parts(manifest, &bytes)
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<(usize, T)>, CorpusError> {
    let file = fs::File::open(path).map_err(|e| CorpusError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CorpusError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line).map_err(|e| CorpusError::Malformed {
            path: path.display().to_string(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push((i + 1, value));
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), CorpusError> {
    let file = fs::File::create(path).map_err(|e| CorpusError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        let line = serde_json::to_string(item).expect("record serializes");
        writeln!(w, "{line}").map_err(|e| CorpusError::io(path, e))?;
    }
    w.flush().map_err(|e| CorpusError::io(path, e))
}

/// Loads `questions.jsonl`, preserving file order and rejecting duplicate ids.
pub fn load_questions(path: &Path) -> Result<Vec<Question>, CorpusError> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (line, q) in read_jsonl::<Question>(path)? {
        q.check().map_err(|message| CorpusError::Malformed {
            path: path.display().to_string(),
            line,
            message,
        })?;
        if !seen.insert(q.id.clone()) {
            return Err(CorpusError::DuplicateQuestion(q.id));
        }
        out.push(q);
    }
    Ok(out)
}

/// Parses `generations.jsonl` without enforcing the per-question count.
pub fn read_generations(path: &Path) -> Result<Vec<Generation>, CorpusError> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (_, g) in read_jsonl::<Generation>(path)? {
        if !seen.insert(g.key()) {
            return Err(CorpusError::DuplicateGeneration {
                question_id: g.question_id,
                mode: g.mode,
                index: g.index,
            });
        }
        out.push(g);
    }
    Ok(out)
}

/// Loads generations and checks that every question has exactly `k` Normal
/// generations indexed `0..k`.
pub fn load_generations(path: &Path, k: usize) -> Result<Vec<Generation>, CorpusError> {
    if k < 2 {
        return Err(CorpusError::InvalidK(k));
    }
    let gens = read_generations(path)?;
    let violations = k_violations(&gens, k);
    if !violations.is_empty() {
        return Err(CorpusError::KViolation {
            k,
            question_ids: violations.into_iter().map(|(id, _)| id).collect(),
        });
    }
    Ok(gens)
}

/// Question ids (in first-seen order) whose Normal generations are not exactly `0..k`,
/// paired with the number of Normal generations found.
fn k_violations(gens: &[Generation], k: usize) -> Vec<(String, usize)> {
    let mut order = Vec::new();
    let mut normal: HashMap<&str, Vec<usize>> = HashMap::new();
    for g in gens {
        let entry = normal.entry(g.question_id.as_str()).or_insert_with(|| {
            order.push(g.question_id.as_str());
            Vec::new()
        });
        if g.mode == GenMode::Normal {
            entry.push(g.index);
        }
    }
    order
        .into_iter()
        .filter_map(|id| {
            let idx = &normal[id];
            let ok = idx.len() == k && idx.iter().all(|&i| i < k);
            (!ok).then(|| (id.to_string(), idx.len()))
        })
        .collect()
}

pub fn load_gold(path: &Path) -> Result<Vec<GoldLabel>, CorpusError> {
    Ok(read_jsonl::<GoldLabel>(path)?
        .into_iter()
        .map(|(_, g)| g)
        .collect())
}

/// A single inconsistency found by [`validate_corpus`].
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Finding {
    DuplicateQuestion { question_id: String },
    DanglingGeneration { question_id: String, mode: GenMode, index: usize },
    KViolation { question_id: String, expected: usize, found: usize },
    MissingAnswer { question_id: String },
    MissingActivation { question_id: String },
    DanglingActivation { question_id: String },
    DanglingGold { question_id: String, mode: GenMode, index: usize },
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub findings: Vec<Finding>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.findings.is_empty()
    }
}

/// Cross-checks a loaded corpus. Never fails; an empty report means consistent.
pub fn validate_corpus(
    questions: &[Question],
    generations: &[Generation],
    activations: Option<&ActivationStore>,
    gold: Option<&[GoldLabel]>,
    k: usize,
) -> ValidationReport {
    let mut findings = Vec::new();
    let mut ids = BTreeSet::new();
    for q in questions {
        if !ids.insert(q.id.as_str()) {
            findings.push(Finding::DuplicateQuestion {
                question_id: q.id.clone(),
            });
        }
    }

    let mut normal: BTreeMap<&str, BTreeSet<usize>> = BTreeMap::new();
    let mut gen_keys = HashSet::new();
    for g in generations {
        gen_keys.insert(g.key());
        if !ids.contains(g.question_id.as_str()) {
            findings.push(Finding::DanglingGeneration {
                question_id: g.question_id.clone(),
                mode: g.mode,
                index: g.index,
            });
        } else if g.mode == GenMode::Normal {
            normal.entry(g.question_id.as_str()).or_default().insert(g.index);
        }
    }

    for q in questions {
        let idx = normal.get(q.id.as_str());
        let found = idx.map_or(0, |s| s.len());
        let in_range = idx.is_none_or(|s| s.iter().all(|&i| i < k));
        if found != k || !in_range {
            findings.push(Finding::KViolation {
                question_id: q.id.clone(),
                expected: k,
                found,
            });
        }
        if q.answer.is_none() {
            findings.push(Finding::MissingAnswer {
                question_id: q.id.clone(),
            });
        }
    }

    if let Some(store) = activations {
        let present = store.question_ids();
        for q in questions {
            if !present.contains(q.id.as_str()) {
                findings.push(Finding::MissingActivation {
                    question_id: q.id.clone(),
                });
            }
        }
        for id in present {
            if !ids.contains(id) {
                findings.push(Finding::DanglingActivation {
                    question_id: id.to_string(),
                });
            }
        }
    }

    if let Some(gold) = gold {
        for g in gold {
            if !gen_keys.contains(&g.key()) {
                findings.push(Finding::DanglingGold {
                    question_id: g.question_id.clone(),
                    mode: g.mode,
                    index: g.index,
                });
            }
        }
    }

    ValidationReport { findings }
}
