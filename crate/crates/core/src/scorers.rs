//! Per-generation factuality scorers and their aggregation.
//!
//! * `s2g`: mean cosine between a generation and the other generations of the same question.
//! * `p`: probe score of the question's last-token activation, shared by all its generations.
//! * `o2a`: multiset token overlap with the gold answer, over answer length.
//! * `s2a`: cosine between generation and answer embeddings.
//!
//! Raw scores are min-max normalized over the dataset and summed over the
//! enabled scorers.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{GenKey, GenMode};
use crate::embedder::{cosine, EmbedError, Embedding};

#[derive(Debug, Error)]
pub enum ScoreError {
    #[error("self-consistency needs at least 2 generations, got {0}")]
    TooFewGenerations(usize),
    #[error("answer has no tokens")]
    EmptyAnswer,
    #[error("generation {generation} has no raw value for enabled scorer {scorer}")]
    MissingScore { generation: GenKey, scorer: Scorer },
    #[error("normalizer was not fitted for scorer {0}")]
    NotFitted(Scorer),
    #[error(transparent)]
    Embed(#[from] EmbedError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Scorer {
    /// Self-consistency among sampled generations.
    #[serde(rename = "s2g")]
    SelfConsistency,
    /// Knowledge-state probe.
    #[serde(rename = "p")]
    Probe,
    /// Token overlap with the answer.
    #[serde(rename = "o2a")]
    Overlap,
    /// Embedding similarity to the answer.
    #[serde(rename = "s2a")]
    AnswerSim,
}

impl Scorer {
    pub const ALL: [Scorer; 4] = [
        Scorer::SelfConsistency,
        Scorer::Probe,
        Scorer::Overlap,
        Scorer::AnswerSim,
    ];
}

impl fmt::Display for Scorer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scorer::SelfConsistency => "s2g",
            Scorer::Probe => "p",
            Scorer::Overlap => "o2a",
            Scorer::AnswerSim => "s2a",
        })
    }
}

pub type ScorerSet = BTreeSet<Scorer>;

/// One value per scorer; absent scorers are `None`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Components {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub s_s2g: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub s_p: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub s_o2a: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub s_s2a: Option<f64>,
}

impl Components {
    pub fn get(&self, scorer: Scorer) -> Option<f64> {
        match scorer {
            Scorer::SelfConsistency => self.s_s2g,
            Scorer::Probe => self.s_p,
            Scorer::Overlap => self.s_o2a,
            Scorer::AnswerSim => self.s_s2a,
        }
    }

    pub fn set(&mut self, scorer: Scorer, value: Option<f64>) {
        let slot = match scorer {
            Scorer::SelfConsistency => &mut self.s_s2g,
            Scorer::Probe => &mut self.s_p,
            Scorer::Overlap => &mut self.s_o2a,
            Scorer::AnswerSim => &mut self.s_s2a,
        };
        *slot = value;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawScores {
    pub key: GenKey,
    pub raw: Components,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreCard {
    pub question_id: String,
    pub mode: GenMode,
    pub index: usize,
    pub raw: Components,
    pub normalized: Components,
    pub total: f64,
}

impl ScoreCard {
    pub fn key(&self) -> GenKey {
        GenKey::new(&self.question_id, self.mode, self.index)
    }
}

/// Score of generation `i` is the mean cosine to every other generation `j != i`.
pub fn score_self_consistency(embeddings: &[Embedding]) -> Result<Vec<f64>, ScoreError> {
    let k = embeddings.len();
    if k < 2 {
        return Err(ScoreError::TooFewGenerations(k));
    }
    let mut sims = vec![vec![0.0; k]; k];
    for i in 0..k {
        for j in i + 1..k {
            let c = cosine(&embeddings[i], &embeddings[j])?;
            sims[i][j] = c;
            sims[j][i] = c;
        }
    }
    Ok(sims
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let s: f64 = row.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, c)| c).sum();
            s / (k - 1) as f64
        })
        .collect())
}

/// Lower-cased tokens. Chinese text yields one token per character; other
/// languages split into maximal alphanumeric runs. Whitespace and
/// punctuation never form tokens.
pub fn tokenize(text: &str, language: &str) -> Vec<String> {
    let lower = text.to_lowercase();
    if is_chinese(language) {
        return lower
            .chars()
            .filter(|c| c.is_alphanumeric())
            .map(String::from)
            .collect();
    }
    lower
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

fn is_chinese(language: &str) -> bool {
    let l = language.to_ascii_lowercase();
    l == "zh" || l.starts_with("zh-") || l.starts_with("zh_")
}

/// `|tokens(G) ∩ tokens(A)| / |tokens(A)|` with multiset intersection.
pub fn score_overlap(generation: &str, answer: &str, language: &str) -> Result<f64, ScoreError> {
    let answer_tokens = tokenize(answer, language);
    if answer_tokens.is_empty() {
        return Err(ScoreError::EmptyAnswer);
    }
    let mut available: HashMap<String, usize> = HashMap::new();
    for t in tokenize(generation, language) {
        *available.entry(t).or_default() += 1;
    }
    let mut matched = 0usize;
    for t in &answer_tokens {
        if let Some(n) = available.get_mut(t) {
            if *n > 0 {
                *n -= 1;
                matched += 1;
            }
        }
    }
    Ok(matched as f64 / answer_tokens.len() as f64)
}

pub fn score_answer_sim(generation: &Embedding, answer: &Embedding) -> Result<f64, ScoreError> {
    Ok(cosine(generation, answer)?)
}

/// Inputs for scoring one question's Normal generations.
pub struct QuestionInputs<'a> {
    pub question_id: &'a str,
    pub language: &'a str,
    pub answer: Option<&'a str>,
    pub answer_embedding: Option<&'a Embedding>,
    /// `(index, text, embedding)` for each Normal generation.
    pub generations: Vec<(usize, &'a str, &'a Embedding)>,
    pub probe: Option<f64>,
}

/// Raw scores for every Normal generation of one question. Answer-based
/// scorers are `None` when the question has no answer.
pub fn score_question(inputs: &QuestionInputs<'_>) -> Result<Vec<RawScores>, ScoreError> {
    let embs: Vec<Embedding> = inputs.generations.iter().map(|(_, _, e)| (*e).clone()).collect();
    let s2g = score_self_consistency(&embs)?;
    inputs
        .generations
        .iter()
        .zip(s2g)
        .map(|(&(index, text, emb), s2g)| {
            let s_o2a = inputs
                .answer
                .map(|a| score_overlap(text, a, inputs.language))
                .transpose()?;
            let s_s2a = inputs
                .answer_embedding
                .map(|a| score_answer_sim(emb, a))
                .transpose()?;
            Ok(RawScores {
                key: GenKey::new(inputs.question_id, GenMode::Normal, index),
                raw: Components {
                    s_s2g: Some(s2g),
                    s_p: inputs.probe,
                    s_o2a,
                    s_s2a,
                },
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalizationMethod {
    MinMax,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationSpec {
    pub method: NormalizationMethod,
    pub ranges: BTreeMap<Scorer, Range>,
}

impl NormalizationSpec {
    /// Maps `x` into `[0, 1]`; a constant scorer maps to 0.5.
    pub fn normalize(&self, scorer: Scorer, x: f64) -> Result<f64, ScoreError> {
        let r = self.ranges.get(&scorer).ok_or(ScoreError::NotFitted(scorer))?;
        if r.max == r.min {
            return Ok(0.5);
        }
        Ok(((x - r.min) / (r.max - r.min)).clamp(0.0, 1.0))
    }
}

/// Fits per-scorer min/max over every present raw value.
pub fn fit_normalizer(rows: &[RawScores]) -> NormalizationSpec {
    let mut ranges: BTreeMap<Scorer, Range> = BTreeMap::new();
    for row in rows {
        for scorer in Scorer::ALL {
            if let Some(x) = row.raw.get(scorer) {
                ranges
                    .entry(scorer)
                    .and_modify(|r| {
                        r.min = r.min.min(x);
                        r.max = r.max.max(x);
                    })
                    .or_insert(Range { min: x, max: x });
            }
        }
    }
    NormalizationSpec {
        method: NormalizationMethod::MinMax,
        ranges,
    }
}

/// Normalizes raw scores and sums the enabled ones into `total`.
pub fn aggregate_scorecards(
    rows: &[RawScores],
    spec: &NormalizationSpec,
    enabled: &ScorerSet,
) -> Result<Vec<ScoreCard>, ScoreError> {
    rows.iter()
        .map(|row| {
            let mut normalized = Components::default();
            for scorer in Scorer::ALL {
                if let (Some(x), true) = (row.raw.get(scorer), spec.ranges.contains_key(&scorer)) {
                    normalized.set(scorer, Some(spec.normalize(scorer, x)?));
                }
            }
            let mut total = 0.0;
            for &scorer in enabled {
                if row.raw.get(scorer).is_none() {
                    return Err(ScoreError::MissingScore {
                        generation: row.key.clone(),
                        scorer,
                    });
                }
                total += normalized.get(scorer).ok_or(ScoreError::NotFitted(scorer))?;
            }
            Ok(ScoreCard {
                question_id: row.key.question_id.clone(),
                mode: row.key.mode,
                index: row.key.index,
                raw: row.raw,
                normalized,
                total,
            })
        })
        .collect()
}
