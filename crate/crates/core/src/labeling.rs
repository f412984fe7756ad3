//! Median-split labeling, knowledge-state categories and preference pairs.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{GenKey, GenMode, Generation, GoldLabel, Question, Verdict};
use crate::scorers::ScoreCard;

#[derive(Debug, Error)]
pub enum LabelError {
    #[error("cannot split an empty set of totals")]
    Empty,
    #[error("non-finite total for {0}")]
    NonFinite(String),
    #[error("question `{question_id}` has {found} verdicts, expected {expected}")]
    WrongCount {
        question_id: String,
        expected: usize,
        found: usize,
    },
    #[error("score card {0} is not a Normal generation")]
    NotNormal(String),
    #[error("no generation has both a prediction and a gold label")]
    EmptyIntersection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MedianSplit {
    /// Mean of the two middle order statistics for even `n`.
    pub median: f64,
    pub verdicts: Vec<Verdict>,
}

/// `total >= median` is Correct. The comparison is made against the upper
/// middle order statistic, which selects the same set as comparing with the
/// mean of the two middles but cannot be disturbed by rounding of that mean.
pub fn median_split(totals: &[f64]) -> Result<MedianSplit, LabelError> {
    if totals.is_empty() {
        return Err(LabelError::Empty);
    }
    if let Some(i) = totals.iter().position(|t| !t.is_finite()) {
        return Err(LabelError::NonFinite(format!("position {i}")));
    }
    let mut sorted = totals.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let upper = sorted[n / 2];
    let median = if n % 2 == 1 {
        upper
    } else {
        sorted[n / 2 - 1] / 2.0 + upper / 2.0
    };
    let verdicts = totals
        .iter()
        .map(|&t| if t >= upper { Verdict::Correct } else { Verdict::Incorrect })
        .collect();
    Ok(MedianSplit { median, verdicts })
}

/// Median split over Normal-generation score cards.
pub fn classify_generations(cards: &[ScoreCard]) -> Result<MedianSplit, LabelError> {
    if let Some(c) = cards.iter().find(|c| c.mode != GenMode::Normal) {
        return Err(LabelError::NotNormal(c.key().to_string()));
    }
    let totals: Vec<f64> = cards.iter().map(|c| c.total).collect();
    median_split(&totals)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum QuestionCategory {
    Known,
    Unknown,
    Mixed,
}

impl QuestionCategory {
    pub const ALL: [QuestionCategory; 3] = [Self::Known, Self::Unknown, Self::Mixed];
}

pub fn categorize_question(question_id: &str, verdicts: &[Verdict], k: usize) -> Result<QuestionCategory, LabelError> {
    if verdicts.len() != k {
        return Err(LabelError::WrongCount {
            question_id: question_id.to_string(),
            expected: k,
            found: verdicts.len(),
        });
    }
    Ok(if verdicts.iter().all(|v| *v == Verdict::Correct) {
        QuestionCategory::Known
    } else if verdicts.iter().all(|v| *v == Verdict::Incorrect) {
        QuestionCategory::Unknown
    } else {
        QuestionCategory::Mixed
    })
}

/// Response tiers, highest first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Role {
    Factual,
    Uncertainty,
    Hallucination,
}

impl Role {
    pub fn outranks(self, other: Role) -> bool {
        self < other
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairMode {
    /// Every ordered pair of the chain (3 pairs for Mixed).
    #[default]
    Closure,
    /// Only neighbouring tiers (2 pairs for Mixed).
    Adjacent,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Response {
    pub text: String,
    pub role: Role,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub question_id: String,
    pub category: QuestionCategory,
    pub chosen: Response,
    pub rejected: Response,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkipRecord {
    pub question_id: String,
    pub reason: String,
}

/// One scored Normal generation of a question.
#[derive(Debug, Clone, Copy)]
pub struct ScoredText<'a> {
    pub index: usize,
    pub total: f64,
    pub text: &'a str,
}

/// `(index, text)` of an Uncertainty-mode generation.
pub type UncertaintyText<'a> = (usize, &'a str);

fn pick<'a>(normals: &[ScoredText<'a>], better: impl Fn(f64, f64) -> bool) -> Option<ScoredText<'a>> {
    let mut sorted = normals.to_vec();
    sorted.sort_by_key(|s| s.index);
    sorted
        .into_iter()
        .fold(None, |best: Option<ScoredText<'a>>, s| match best {
            Some(b) if !better(s.total, b.total) => Some(b),
            _ => Some(s),
        })
}

/// Pairs implied by the category's tier chain. Factual is the highest-total
/// Normal generation, Hallucination the lowest, Uncertainty the
/// lowest-index Uncertainty-mode generation. Ties go to the lower index.
pub fn emit_preference_pairs(
    question_id: &str,
    category: QuestionCategory,
    normals: &[ScoredText<'_>],
    uncertainty: &[UncertaintyText<'_>],
    mode: PairMode,
) -> Result<Vec<PreferencePair>, SkipRecord> {
    let skip = |reason: &str| SkipRecord {
        question_id: question_id.to_string(),
        reason: reason.to_string(),
    };
    let u_text = uncertainty
        .iter()
        .min_by_key(|(i, _)| *i)
        .map(|(_, t)| *t)
        .ok_or_else(|| skip("no uncertainty response"))?;
    let factual = pick(normals, |a, b| a > b);
    let halluc = pick(normals, |a, b| a < b);
    let (Some(f), Some(h)) = (factual, halluc) else {
        return Err(skip("no normal generation"));
    };

    let resp = |text: &str, role| Response {
        text: text.to_string(),
        role,
    };
    let chain: Vec<(Response, Response)> = match category {
        QuestionCategory::Known => vec![(resp(f.text, Role::Factual), resp(u_text, Role::Uncertainty))],
        QuestionCategory::Unknown => vec![(resp(u_text, Role::Uncertainty), resp(h.text, Role::Hallucination))],
        QuestionCategory::Mixed => {
            if f.total == h.total {
                return Err(skip("mixed question without distinct totals"));
            }
            let mut v = vec![
                (resp(f.text, Role::Factual), resp(u_text, Role::Uncertainty)),
                (resp(u_text, Role::Uncertainty), resp(h.text, Role::Hallucination)),
            ];
            if mode == PairMode::Closure {
                v.push((resp(f.text, Role::Factual), resp(h.text, Role::Hallucination)));
            }
            v
        }
    };
    if chain.iter().any(|(c, r)| c.text == r.text) {
        return Err(skip("chosen and rejected texts are identical"));
    }
    Ok(chain
        .into_iter()
        .map(|(chosen, rejected)| PreferencePair {
            question_id: question_id.to_string(),
            category,
            chosen,
            rejected,
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    pub fn add(&mut self, predicted: Verdict, gold: Verdict) {
        match (predicted, gold) {
            (Verdict::Correct, Verdict::Correct) => self.tp += 1,
            (Verdict::Correct, Verdict::Incorrect) => self.fp += 1,
            (Verdict::Incorrect, Verdict::Correct) => self.fn_ += 1,
            (Verdict::Incorrect, Verdict::Incorrect) => self.tn += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }

    fn ratio(num: usize, den: usize) -> f64 {
        if den == 0 {
            0.0
        } else {
            num as f64 / den as f64
        }
    }

    pub fn accuracy(&self) -> f64 {
        Self::ratio(self.tp + self.tn, self.total())
    }

    pub fn precision(&self) -> f64 {
        Self::ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        Self::ratio(self.tp, self.tp + self.fn_)
    }

    pub fn metrics(&self) -> Metrics {
        Metrics {
            confusion: *self,
            accuracy: self.accuracy(),
            precision: self.precision(),
            recall: self.recall(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub confusion: Confusion,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    pub overall: Metrics,
    pub per_language: BTreeMap<String, Metrics>,
}

/// Agreement of pipeline verdicts with gold labels, Correct being the
/// positive class. Gold labels without a prediction are ignored.
pub fn evaluate_agreement(
    predictions: &HashMap<GenKey, Verdict>,
    gold: &[GoldLabel],
    language_of: &HashMap<String, String>,
) -> Result<AgreementReport, LabelError> {
    let mut overall = Confusion::default();
    let mut by_lang: BTreeMap<String, Confusion> = BTreeMap::new();
    for g in gold {
        let Some(&p) = predictions.get(&g.key()) else {
            continue;
        };
        overall.add(p, g.verdict);
        let lang = language_of.get(&g.question_id).cloned().unwrap_or_else(|| "unknown".into());
        by_lang.entry(lang).or_default().add(p, g.verdict);
    }
    if overall.total() == 0 {
        return Err(LabelError::EmptyIntersection);
    }
    Ok(AgreementReport {
        overall: overall.metrics(),
        per_language: by_lang.into_iter().map(|(l, c)| (l, c.metrics())).collect(),
    })
}

/// One line of `labels.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub question_id: String,
    pub mode: GenMode,
    pub index: usize,
    pub total: f64,
    pub verdict: Verdict,
    pub category: QuestionCategory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryStats {
    pub questions: usize,
    pub percent: f64,
    pub pairs: usize,
}

/// Category statistics: total question count and per-category share.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryReport {
    #[serde(rename = "Total")]
    pub total: usize,
    #[serde(rename = "Known")]
    pub known: CategoryStats,
    #[serde(rename = "Unknown")]
    pub unknown: CategoryStats,
    #[serde(rename = "Mixed")]
    pub mixed: CategoryStats,
    pub total_pairs: usize,
    pub skipped: usize,
    pub median: f64,
}

impl CategoryReport {
    pub fn get(&self, c: QuestionCategory) -> &CategoryStats {
        match c {
            QuestionCategory::Known => &self.known,
            QuestionCategory::Unknown => &self.unknown,
            QuestionCategory::Mixed => &self.mixed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelOutput {
    pub labels: Vec<LabelRecord>,
    /// Per question in corpus order.
    pub categories: Vec<(String, QuestionCategory)>,
    pub pairs: Vec<PreferencePair>,
    pub skipped: Vec<SkipRecord>,
    pub report: CategoryReport,
}

impl LabelOutput {
    pub fn predictions(&self) -> HashMap<GenKey, Verdict> {
        self.labels
            .iter()
            .map(|l| (GenKey::new(&l.question_id, l.mode, l.index), l.verdict))
            .collect()
    }
}

/// Runs median split, categorization and pair emission over a scored corpus.
/// `cards` holds the Normal-generation score cards; questions without cards
/// are not categorized.
pub fn run_labeling(
    questions: &[Question],
    generations: &[Generation],
    cards: &[ScoreCard],
    k: usize,
    mode: PairMode,
) -> Result<LabelOutput, LabelError> {
    let split = classify_generations(cards)?;
    let mut per_question: HashMap<&str, Vec<(usize, &ScoreCard, Verdict)>> = HashMap::new();
    for (pos, (c, v)) in cards.iter().zip(&split.verdicts).enumerate() {
        per_question.entry(c.question_id.as_str()).or_default().push((pos, c, *v));
    }
    let mut texts: HashMap<(&str, GenMode, usize), &str> = HashMap::new();
    let mut uncertain: HashMap<&str, Vec<UncertaintyText<'_>>> = HashMap::new();
    for g in generations {
        texts.insert((g.question_id.as_str(), g.mode, g.index), g.text.as_str());
        if g.mode == GenMode::Uncertainty {
            uncertain.entry(g.question_id.as_str()).or_default().push((g.index, g.text.as_str()));
        }
    }

    let mut categories = Vec::new();
    let mut labels: Vec<Option<LabelRecord>> = vec![None; cards.len()];
    let mut pairs = Vec::new();
    let mut skipped = Vec::new();
    for q in questions {
        let Some(rows) = per_question.get_mut(q.id.as_str()) else {
            continue;
        };
        rows.sort_by_key(|(_, c, _)| c.index);
        let verdicts: Vec<Verdict> = rows.iter().map(|r| r.2).collect();
        let category = categorize_question(&q.id, &verdicts, k)?;
        categories.push((q.id.clone(), category));
        for &(pos, c, verdict) in rows.iter() {
            labels[pos] = Some(LabelRecord {
                question_id: c.question_id.clone(),
                mode: c.mode,
                index: c.index,
                total: c.total,
                verdict,
                category,
            });
        }
        let normals: Vec<ScoredText<'_>> = rows
            .iter()
            .filter_map(|(_, c, _)| {
                texts.get(&(q.id.as_str(), GenMode::Normal, c.index)).map(|t| ScoredText {
                    index: c.index,
                    total: c.total,
                    text: t,
                })
            })
            .collect();
        let unc = uncertain.get(q.id.as_str()).map(Vec::as_slice).unwrap_or(&[]);
        match emit_preference_pairs(&q.id, category, &normals, unc, mode) {
            Ok(p) => pairs.extend(p),
            Err(s) => {
                log::warn!("skipping question `{}`: {}", s.question_id, s.reason);
                skipped.push(s);
            }
        }
    }
    let labels: Vec<LabelRecord> = labels.into_iter().flatten().collect();

    let total = categories.len();
    let stats = |cat: QuestionCategory| {
        let questions = categories.iter().filter(|(_, c)| *c == cat).count();
        CategoryStats {
            questions,
            percent: if total == 0 { 0.0 } else { 100.0 * questions as f64 / total as f64 },
            pairs: pairs.iter().filter(|p| p.category == cat).count(),
        }
    };
    let report = CategoryReport {
        total,
        known: stats(QuestionCategory::Known),
        unknown: stats(QuestionCategory::Unknown),
        mixed: stats(QuestionCategory::Mixed),
        total_pairs: pairs.len(),
        skipped: skipped.len(),
        median: split.median,
    };
    Ok(LabelOutput {
        labels,
        categories,
        pairs,
        skipped,
        report,
    })
}
