//! Knowledge-state probes.
//!
//! Generations are pre-labeled by percentile thresholds on their consistency
//! totals; questions whose `k` generations are all Correct become Known rows,
//! all Incorrect become Unknown rows. A single linear layer (logistic
//! regression) is then trained on the question's last-token activation at a
//! given `(site, layer)`.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{ActivationStore, CorpusError, Site};
use crate::scorers::{Scorer, ScoreCard, ScorerSet};
use crate::seed::{derive_seed, unit_hash};

/// Standard deviations are floored here so constant features stay finite.
pub const STD_FLOOR: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error("cannot compute thresholds over an empty dataset")]
    EmptyDataset,
    #[error("percentiles must satisfy 0 < lower < upper < 100, got lower={lower} upper={upper}")]
    BadPercentiles { lower: f64, upper: f64 },
    #[error("probe training needs at least {needed} rows of each class, got {known} known / {unknown} unknown")]
    NotEnoughRows {
        needed: usize,
        known: usize,
        unknown: usize,
    },
    #[error("training split for seed {seed} holds a single class")]
    SingleClassSplit { seed: u64 },
    #[error("validation split is empty (val_fraction={0})")]
    EmptyValidation(f64),
    #[error("feature dimension {found} does not match probe dimension {expected}")]
    DimMismatch { expected: usize, found: usize },
    #[error("missing activation for question `{question_id}`: {source}")]
    MissingActivation {
        question_id: String,
        #[source]
        source: CorpusError,
    },
    #[error("non-finite total score for {0}")]
    NonFinite(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrelabelConfig {
    pub upper_percentile: f64,
    pub lower_percentile: f64,
    pub scorers: ScorerSet,
}

impl Default for PrelabelConfig {
    fn default() -> Self {
        Self {
            upper_percentile: 65.0,
            lower_percentile: 35.0,
            scorers: [Scorer::SelfConsistency, Scorer::Overlap, Scorer::AnswerSim].into(),
        }
    }
}

impl PrelabelConfig {
    pub fn validate(&self) -> Result<(), ProbeError> {
        let (lower, upper) = (self.lower_percentile, self.upper_percentile);
        if !(0.0 < lower && lower < upper && upper < 100.0) {
            return Err(ProbeError::BadPercentiles { lower, upper });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrelabelVerdict {
    Correct,
    Incorrect,
    Unlabeled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prelabels {
    pub upper_threshold: f64,
    pub lower_threshold: f64,
    pub verdicts: Vec<PrelabelVerdict>,
}

/// Nearest-rank percentile: the value at 1-based rank `ceil(p/100 * n)` of
/// the ascending sort, with rank clamped to `[1, n]`.
pub fn nearest_rank(sorted: &[f64], percentile: f64) -> f64 {
    let n = sorted.len();
    // Subtracting a hair keeps exact products such as 0.65 * 20 from rounding up a rank.
    let rank = (percentile * n as f64 / 100.0 - 1e-9).ceil() as usize;
    sorted[rank.clamp(1, n) - 1]
}

/// `total > upper` is Correct, `total < lower` is Incorrect, anything else
/// (including equality with a threshold) is Unlabeled.
pub fn prelabel_generations(cards: &[ScoreCard], config: &PrelabelConfig) -> Result<Prelabels, ProbeError> {
    config.validate()?;
    if cards.is_empty() {
        return Err(ProbeError::EmptyDataset);
    }
    if let Some(c) = cards.iter().find(|c| !c.total.is_finite()) {
        return Err(ProbeError::NonFinite(c.key().to_string()));
    }
    let mut sorted: Vec<f64> = cards.iter().map(|c| c.total).collect();
    sorted.sort_by(f64::total_cmp);
    let upper = nearest_rank(&sorted, config.upper_percentile);
    let lower = nearest_rank(&sorted, config.lower_percentile);
    let verdicts = cards
        .iter()
        .map(|c| {
            if c.total > upper {
                PrelabelVerdict::Correct
            } else if c.total < lower {
                PrelabelVerdict::Incorrect
            } else {
                PrelabelVerdict::Unlabeled
            }
        })
        .collect();
    Ok(Prelabels {
        upper_threshold: upper,
        lower_threshold: lower,
        verdicts,
    })
}

/// Groups per-generation verdicts by question, in first-seen order.
pub fn group_by_question(
    cards: &[ScoreCard],
    verdicts: &[PrelabelVerdict],
) -> Vec<(String, Vec<PrelabelVerdict>)> {
    let mut order: Vec<(String, Vec<PrelabelVerdict>)> = Vec::new();
    let mut slot: HashMap<&str, usize> = HashMap::new();
    for (c, v) in cards.iter().zip(verdicts) {
        let i = *slot.entry(c.question_id.as_str()).or_insert_with(|| {
            order.push((c.question_id.clone(), Vec::new()));
            order.len() - 1
        });
        order[i].1.push(*v);
    }
    order
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum KnowledgeLabel {
    Known,
    Unknown,
}

impl KnowledgeLabel {
    fn target(self) -> f64 {
        match self {
            KnowledgeLabel::Known => 1.0,
            KnowledgeLabel::Unknown => 0.0,
        }
    }
}

/// Known iff all `k` verdicts are Correct; Unknown iff all are Incorrect.
pub fn knowledge_label(verdicts: &[PrelabelVerdict], k: usize) -> Option<KnowledgeLabel> {
    if verdicts.len() != k {
        return None;
    }
    if verdicts.iter().all(|v| *v == PrelabelVerdict::Correct) {
        Some(KnowledgeLabel::Known)
    } else if verdicts.iter().all(|v| *v == PrelabelVerdict::Incorrect) {
        Some(KnowledgeLabel::Unknown)
    } else {
        None
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub question_id: String,
    pub features: Vec<f32>,
    pub label: KnowledgeLabel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeDataset {
    pub site: Site,
    pub layer: usize,
    pub rows: Vec<ProbeRow>,
}

pub fn build_probe_dataset(
    groups: &[(String, Vec<PrelabelVerdict>)],
    store: &ActivationStore,
    site: Site,
    layer: usize,
    k: usize,
) -> Result<ProbeDataset, ProbeError> {
    let mut rows = Vec::new();
    for (question_id, verdicts) in groups {
        let Some(label) = knowledge_label(verdicts, k) else {
            continue;
        };
        let features = store
            .get(question_id, site, layer)
            .map_err(|source| ProbeError::MissingActivation {
                question_id: question_id.clone(),
                source,
            })?
            .to_vec();
        rows.push(ProbeRow {
            question_id: question_id.clone(),
            features,
            label,
        });
    }
    Ok(ProbeDataset { site, layer, rows })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeHyper {
    pub lr: f64,
    pub epochs: usize,
    pub l2: f64,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for ProbeHyper {
    fn default() -> Self {
        Self {
            lr: 0.1,
            epochs: 200,
            l2: 1e-4,
            val_fraction: 0.2,
            seed: 0,
        }
    }
}

/// Whether a question falls in the validation split for `seed`. Depends only
/// on `(seed, question_id)`, so every grid cell sees the same split.
pub fn in_validation(seed: u64, question_id: &str, val_fraction: f64) -> bool {
    unit_hash(derive_seed(seed, "probe-split"), question_id) < val_fraction
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit<'a>(rows: impl Iterator<Item = &'a [f32]> + Clone, dim: usize) -> Self {
        let n = rows.clone().count().max(1) as f64;
        let mut mean = vec![0.0; dim];
        for r in rows.clone() {
            for (m, &x) in mean.iter_mut().zip(r) {
                *m += x as f64;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; dim];
        for r in rows {
            for ((v, &x), m) in var.iter_mut().zip(r).zip(&mean) {
                let d = x as f64 - m;
                *v += d * d;
            }
        }
        let std = var.iter().map(|v| (v / n).sqrt().max(STD_FLOOR)).collect();
        Self { mean, std }
    }

    pub fn apply(&self, x: &[f32]) -> Vec<f64> {
        x.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(&v, (m, s))| (v as f64 - m) / s)
            .collect()
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
pub fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Mean binary cross-entropy plus `l2 * |w|^2 / 2` and its exact gradient
/// `(loss, dL/dw, dL/db)`. `xs` is row-major with `ys.len()` rows.
pub fn logistic_loss_grad(w: &[f64], b: f64, xs: &[f64], ys: &[f64], l2: f64) -> (f64, Vec<f64>, f64) {
    let d = w.len();
    let n = ys.len() as f64;
    let mut loss = 0.0;
    let mut gw = vec![0.0; d];
    let mut gb = 0.0;
    for (x, &y) in xs.chunks_exact(d).zip(ys) {
        let z = b + x.iter().zip(w).map(|(a, c)| a * c).sum::<f64>();
        loss += softplus(z) - y * z;
        let r = sigmoid(z) - y;
        gb += r;
        for (g, &xi) in gw.iter_mut().zip(x) {
            *g += r * xi;
        }
    }
    let wsq: f64 = w.iter().map(|v| v * v).sum();
    loss = loss / n + 0.5 * l2 * wsq;
    for (g, &wi) in gw.iter_mut().zip(w) {
        *g = *g / n + l2 * wi;
    }
    (loss, gw, gb / n)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeModel {
    pub site: Site,
    pub layer: usize,
    pub weights: Vec<f64>,
    pub bias: f64,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub seed: u64,
    pub val_accuracy: Option<f64>,
}

impl ProbeModel {
    pub fn standardizer(&self) -> Standardizer {
        Standardizer {
            mean: self.mean.clone(),
            std: self.std.clone(),
        }
    }

    pub fn logit(&self, activation: &[f32]) -> Result<f64, ProbeError> {
        if activation.len() != self.weights.len() {
            return Err(ProbeError::DimMismatch {
                expected: self.weights.len(),
                found: activation.len(),
            });
        }
        let x = self.standardizer().apply(activation);
        Ok(self.bias + x.iter().zip(&self.weights).map(|(a, b)| a * b).sum::<f64>())
    }

    /// Probability that the question is Known: the probe score `s_p`.
    pub fn score(&self, activation: &[f32]) -> Result<f64, ProbeError> {
        Ok(sigmoid(self.logit(activation)?))
    }

    pub fn predict(&self, activation: &[f32]) -> Result<KnowledgeLabel, ProbeError> {
        Ok(if self.logit(activation)? >= 0.0 {
            KnowledgeLabel::Known
        } else {
            KnowledgeLabel::Unknown
        })
    }
}

pub fn probe_score(model: &ProbeModel, activation: &[f32]) -> Result<f64, ProbeError> {
    model.score(activation)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub train_accuracy: f64,
    pub val_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub n_train: usize,
    pub n_val: usize,
    pub epochs: Vec<EpochStats>,
}

fn accuracy(w: &[f64], b: f64, xs: &[f64], ys: &[f64]) -> Option<f64> {
    if ys.is_empty() {
        return None;
    }
    let d = w.len();
    let hits = xs
        .chunks_exact(d)
        .zip(ys)
        .filter(|(x, &y)| {
            let z = b + x.iter().zip(w).map(|(a, c)| a * c).sum::<f64>();
            (z >= 0.0) == (y == 1.0)
        })
        .count();
    Some(hits as f64 / ys.len() as f64)
}

/// Full-batch gradient descent on standardized features, starting from zero
/// weights. The split and therefore the result depend only on `hyper.seed`.
pub fn train_probe(dataset: &ProbeDataset, hyper: &ProbeHyper) -> Result<(ProbeModel, TrainReport), ProbeError> {
    let rows = &dataset.rows;
    let known = rows.iter().filter(|r| r.label == KnowledgeLabel::Known).count();
    let unknown = rows.len() - known;
    if known < 2 || unknown < 2 {
        return Err(ProbeError::NotEnoughRows {
            needed: 2,
            known,
            unknown,
        });
    }
    let dim = rows[0].features.len();
    if let Some(r) = rows.iter().find(|r| r.features.len() != dim) {
        return Err(ProbeError::DimMismatch {
            expected: dim,
            found: r.features.len(),
        });
    }

    let (train, val): (Vec<&ProbeRow>, Vec<&ProbeRow>) = rows
        .iter()
        .partition(|r| !in_validation(hyper.seed, &r.question_id, hyper.val_fraction));
    let train_known = train.iter().filter(|r| r.label == KnowledgeLabel::Known).count();
    if train_known == 0 || train_known == train.len() {
        return Err(ProbeError::SingleClassSplit { seed: hyper.seed });
    }

    let standardizer = Standardizer::fit(train.iter().map(|r| r.features.as_slice()), dim);
    let flatten = |set: &[&ProbeRow]| -> (Vec<f64>, Vec<f64>) {
        let xs = set.iter().flat_map(|r| standardizer.apply(&r.features)).collect();
        let ys = set.iter().map(|r| r.label.target()).collect();
        (xs, ys)
    };
    let (train_x, train_y) = flatten(&train);
    let (val_x, val_y) = flatten(&val);

    let mut w = vec![0.0; dim];
    let mut b = 0.0;
    let mut epochs = Vec::with_capacity(hyper.epochs);
    for epoch in 0..hyper.epochs {
        let (loss, gw, gb) = logistic_loss_grad(&w, b, &train_x, &train_y, hyper.l2);
        for (wi, g) in w.iter_mut().zip(&gw) {
            *wi -= hyper.lr * g;
        }
        b -= hyper.lr * gb;
        epochs.push(EpochStats {
            epoch,
            loss,
            train_accuracy: accuracy(&w, b, &train_x, &train_y).unwrap_or(0.0),
            val_accuracy: accuracy(&w, b, &val_x, &val_y),
        });
    }

    let model = ProbeModel {
        site: dataset.site,
        layer: dataset.layer,
        val_accuracy: accuracy(&w, b, &val_x, &val_y),
        weights: w,
        bias: b,
        mean: standardizer.mean,
        std: standardizer.std,
        seed: hyper.seed,
    };
    let report = TrainReport {
        n_train: train.len(),
        n_val: val.len(),
        epochs,
    };
    Ok((model, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub site: Site,
    pub layer: usize,
    pub accuracies: Vec<f64>,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridReport {
    pub seeds: Vec<u64>,
    pub cells: Vec<GridCell>,
}

impl GridReport {
    /// Highest mean held-out accuracy; ties go to the lower layer, then site order.
    pub fn best(&self) -> Option<&GridCell> {
        self.cells.iter().min_by(|a, b| {
            b.mean
                .total_cmp(&a.mean)
                .then(a.layer.cmp(&b.layer))
                .then(a.site.cmp(&b.site))
        })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("site,layer,mean_acc,min_acc,max_acc\n");
        for c in &self.cells {
            out.push_str(&format!(
                "{},{},{:.6},{:.6},{:.6}\n",
                c.site, c.layer, c.mean, c.min, c.max
            ));
        }
        out
    }
}

/// Trains one probe per `(cell, seed)` and reports held-out accuracy.
/// Each seed draws its own question split, shared by all cells.
pub fn eval_probe_grid(datasets: &[ProbeDataset], hyper: &ProbeHyper, seeds: &[u64]) -> Result<GridReport, ProbeError> {
    let jobs: Vec<(usize, u64)> = (0..datasets.len())
        .flat_map(|c| seeds.iter().map(move |&s| (c, s)))
        .collect();
    let results: Vec<Result<f64, ProbeError>> = jobs
        .par_iter()
        .map(|&(c, seed)| {
            let h = ProbeHyper {
                seed,
                ..hyper.clone()
            };
            let (model, _) = train_probe(&datasets[c], &h)?;
            model
                .val_accuracy
                .ok_or(ProbeError::EmptyValidation(hyper.val_fraction))
        })
        .collect();
    let mut results = results.into_iter();
    let mut cells = Vec::with_capacity(datasets.len());
    for ds in datasets {
        let accuracies = results
            .by_ref()
            .take(seeds.len())
            .collect::<Result<Vec<f64>, _>>()?;
        let mean = accuracies.iter().sum::<f64>() / accuracies.len().max(1) as f64;
        let min = accuracies.iter().copied().fold(f64::INFINITY, f64::min);
        let max = accuracies.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        cells.push(GridCell {
            site: ds.site,
            layer: ds.layer,
            accuracies,
            mean,
            min,
            max,
        });
    }
    Ok(GridReport {
        seeds: seeds.to_vec(),
        cells,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{ActivationWriter, GenMode};
    use crate::scorers::Components;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn card(q: &str, i: usize, total: f64) -> ScoreCard {
        ScoreCard {
            question_id: q.into(),
            mode: GenMode::Normal,
            index: i,
            raw: Components::default(),
            normalized: Components::default(),
            total,
        }
    }

    fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
        // Box-Muller
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// Two unit-variance Gaussian blobs whose means are `separation` apart along axis 0.
    fn blobs(n: usize, dim: usize, separation: f64, seed: u64) -> ProbeDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = (0..n)
            .map(|i| {
                let label = if i % 2 == 0 { KnowledgeLabel::Known } else { KnowledgeLabel::Unknown };
                let shift = if label == KnowledgeLabel::Known { separation / 2.0 } else { -separation / 2.0 };
                let features = (0..dim)
                    .map(|j| (gaussian(&mut rng) + if j == 0 { shift } else { 0.0 }) as f32)
                    .collect();
                ProbeRow { question_id: format!("q{i}"), features, label }
            })
            .collect();
        ProbeDataset { site: Site::HiddenState, layer: 3, rows }
    }

    #[test]
    fn nearest_rank_examples() {
        let sorted: Vec<f64> = (1..=20).map(|v| v as f64).collect();
        assert_eq!(nearest_rank(&sorted, 65.0), 13.0);
        assert_eq!(nearest_rank(&sorted, 35.0), 7.0);
        assert_eq!(nearest_rank(&sorted, 0.001), 1.0);
        assert_eq!(nearest_rank(&[4.0], 99.0), 4.0);
    }

    #[test]
    fn prelabel_rules() {
        let cards: Vec<_> = (0..20).map(|i| card("q", i, (i + 1) as f64)).collect();
        let p = prelabel_generations(&cards, &PrelabelConfig::default()).unwrap();
        assert_eq!(p.upper_threshold, 13.0);
        assert_eq!(p.lower_threshold, 7.0);
        assert_eq!(p.verdicts[12], PrelabelVerdict::Unlabeled);
        assert_eq!(p.verdicts[13], PrelabelVerdict::Correct);
        assert_eq!(p.verdicts[6], PrelabelVerdict::Unlabeled);
        assert_eq!(p.verdicts[5], PrelabelVerdict::Incorrect);

        let flat: Vec<_> = (0..10).map(|i| card("q", i, 2.5)).collect();
        let p = prelabel_generations(&flat, &PrelabelConfig::default()).unwrap();
        assert!(p.verdicts.iter().all(|v| *v == PrelabelVerdict::Unlabeled));

        assert!(matches!(
            prelabel_generations(&[], &PrelabelConfig::default()),
            Err(ProbeError::EmptyDataset)
        ));
        let bad = PrelabelConfig { lower_percentile: 70.0, ..Default::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn knowledge_labels() {
        use PrelabelVerdict::*;
        assert_eq!(knowledge_label(&[Correct; 5], 5), Some(KnowledgeLabel::Known));
        assert_eq!(knowledge_label(&[Incorrect; 5], 5), Some(KnowledgeLabel::Unknown));
        assert_eq!(knowledge_label(&[Correct, Correct, Correct, Correct, Incorrect], 5), None);
        assert_eq!(knowledge_label(&[Correct, Correct, Unlabeled, Correct, Correct], 5), None);
        assert_eq!(knowledge_label(&[Correct; 4], 5), None);
    }

    #[test]
    fn dataset_needs_activations_for_labeled_questions() {
        use PrelabelVerdict::*;
        let mut w = ActivationWriter::new("t", 1, 2, vec![Site::HiddenState]);
        w.push("a", Site::HiddenState, 0, &[1.0, 2.0]).unwrap();
        w.push("b", Site::HiddenState, 0, &[3.0, 4.0]).unwrap();
        let (m, bytes) = w.finish().unwrap();
        let store = ActivationStore::from_parts(m, &bytes).unwrap();
        let groups = vec![
            ("a".to_string(), vec![Correct; 5]),
            ("b".to_string(), vec![Incorrect; 5]),
            ("c".to_string(), vec![Correct, Incorrect, Correct, Correct, Correct]),
        ];
        let ds = build_probe_dataset(&groups, &store, Site::HiddenState, 0, 5).unwrap();
        assert_eq!(ds.rows.len(), 2);
        assert_eq!(ds.rows[0].label, KnowledgeLabel::Known);
        assert_eq!(ds.rows[1].features, vec![3.0, 4.0]);

        let groups = vec![("zzz".to_string(), vec![Incorrect; 5])];
        match build_probe_dataset(&groups, &store, Site::HiddenState, 0, 5) {
            Err(ProbeError::MissingActivation { question_id, .. }) => assert_eq!(question_id, "zzz"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn separable_blobs_are_learned() {
        let ds = blobs(400, 16, 6.0, 11);
        let (model, report) = train_probe(&ds, &ProbeHyper::default()).unwrap();
        assert!(model.val_accuracy.unwrap() >= 0.95, "{:?}", model.val_accuracy);
        assert_eq!(report.epochs.len(), 200);
        assert_eq!(report.n_train + report.n_val, 400);

        // Known centroid outranks Unknown centroid.
        let centroid = |label| -> Vec<f32> {
            let rows: Vec<_> = ds.rows.iter().filter(|r| r.label == label).collect();
            (0..16)
                .map(|j| rows.iter().map(|r| r.features[j]).sum::<f32>() / rows.len() as f32)
                .collect()
        };
        let known = probe_score(&model, &centroid(KnowledgeLabel::Known)).unwrap();
        let unknown = probe_score(&model, &centroid(KnowledgeLabel::Unknown)).unwrap();
        assert!(known > unknown);
    }

    #[test]
    fn shuffled_labels_are_chance_level() {
        let mut total = 0.0;
        for seed in 0..10u64 {
            let mut ds = blobs(400, 16, 6.0, 100 + seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for r in ds.rows.iter_mut() {
                r.label = if rng.gen_bool(0.5) { KnowledgeLabel::Known } else { KnowledgeLabel::Unknown };
            }
            let (m, _) = train_probe(&ds, &ProbeHyper { seed, ..Default::default() }).unwrap();
            total += m.val_accuracy.unwrap();
        }
        let mean = total / 10.0;
        assert!((0.40..=0.60).contains(&mean), "{mean}");
    }

    #[test]
    fn zero_epochs_gives_half() {
        let ds = blobs(40, 4, 6.0, 1);
        let (m, r) = train_probe(&ds, &ProbeHyper { epochs: 0, ..Default::default() }).unwrap();
        assert!(m.weights.iter().all(|w| *w == 0.0));
        assert_eq!(m.bias, 0.0);
        assert!(r.epochs.is_empty());
        for row in &ds.rows {
            assert_eq!(m.score(&row.features).unwrap(), 0.5);
        }
    }

    #[test]
    fn probe_score_basics() {
        let m = ProbeModel {
            site: Site::MlpOutput,
            layer: 0,
            weights: vec![0.0; 3],
            bias: 0.0,
            mean: vec![1.0, 2.0, 3.0],
            std: vec![1.0; 3],
            seed: 0,
            val_accuracy: None,
        };
        assert_eq!(m.score(&[1.0, 2.0, 3.0]).unwrap(), 0.5);
        assert!(matches!(m.score(&[1.0]), Err(ProbeError::DimMismatch { .. })));
        let mut prev = 0.0;
        for b in [-5.0, 0.0, 5.0, 40.0] {
            let s = ProbeModel { bias: b, ..m.clone() }.score(&[1.0, 2.0, 3.0]).unwrap();
            assert!(s > prev);
            prev = s;
        }
        assert!(prev > 1.0 - 1e-12);
    }

    #[test]
    fn single_class_rejected() {
        let mut ds = blobs(20, 4, 6.0, 3);
        for r in ds.rows.iter_mut() {
            r.label = KnowledgeLabel::Known;
        }
        assert!(matches!(train_probe(&ds, &ProbeHyper::default()), Err(ProbeError::NotEnoughRows { .. })));
    }

    #[test]
    fn loss_non_increasing_with_small_lr() {
        let ds = blobs(120, 8, 2.0, 5);
        let (_, r) = train_probe(&ds, &ProbeHyper { lr: 1e-3, epochs: 100, ..Default::default() }).unwrap();
        for w in r.epochs.windows(2) {
            assert!(w[1].loss <= w[0].loss + 1e-15, "{} -> {}", w[0].loss, w[1].loss);
        }
    }

    #[test]
    fn determinism_and_standardization() {
        let ds = blobs(100, 6, 3.0, 9);
        let h = ProbeHyper { seed: 4, ..Default::default() };
        let (a, _) = train_probe(&ds, &h).unwrap();
        let (b, _) = train_probe(&ds, &h).unwrap();
        assert_eq!(a, b);
        let s = a.standardizer();
        let train_rows = ds.rows.iter().filter(|r| !in_validation(4, &r.question_id, 0.2));
        let refit = Standardizer::fit(train_rows.map(|r| r.features.as_slice()), 6);
        for r in &ds.rows {
            let x1: Vec<u64> = s.apply(&r.features).iter().map(|v| v.to_bits()).collect();
            let x2: Vec<u64> = refit.apply(&r.features).iter().map(|v| v.to_bits()).collect();
            assert_eq!(x1, x2);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..10 {
            let (n, d) = (rng.gen_range(3..12), rng.gen_range(1..6));
            let xs: Vec<f64> = (0..n * d).map(|_| gaussian(&mut rng)).collect();
            let ys: Vec<f64> = (0..n).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect();
            let w: Vec<f64> = (0..d).map(|_| gaussian(&mut rng)).collect();
            let b = gaussian(&mut rng);
            let l2 = 0.3;
            let (_, gw, gb) = logistic_loss_grad(&w, b, &xs, &ys, l2);
            let h = 1e-6;
            let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-8);
            for j in 0..d {
                let (mut wp, mut wm) = (w.clone(), w.clone());
                wp[j] += h;
                wm[j] -= h;
                let num = (logistic_loss_grad(&wp, b, &xs, &ys, l2).0 - logistic_loss_grad(&wm, b, &xs, &ys, l2).0) / (2.0 * h);
                assert!(rel(gw[j], num) < 1e-5, "w[{j}] {} vs {num}", gw[j]);
            }
            let num = (logistic_loss_grad(&w, b + h, &xs, &ys, l2).0 - logistic_loss_grad(&w, b - h, &xs, &ys, l2).0) / (2.0 * h);
            assert!(rel(gb, num) < 1e-5);
        }
    }

    #[test]
    fn grid_finds_planted_layer() {
        let n = 300;
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let labels: Vec<KnowledgeLabel> = (0..n)
            .map(|i| if i % 2 == 0 { KnowledgeLabel::Known } else { KnowledgeLabel::Unknown })
            .collect();
        let datasets: Vec<ProbeDataset> = (0..5)
            .map(|layer| ProbeDataset {
                site: Site::HiddenState,
                layer,
                rows: (0..n)
                    .map(|i| {
                        let shift = if layer == 2 { if labels[i] == KnowledgeLabel::Known { 3.0 } else { -3.0 } } else { 0.0 };
                        ProbeRow {
                            question_id: format!("q{i}"),
                            features: (0..8).map(|j| (gaussian(&mut rng) + if j == 1 { shift } else { 0.0 }) as f32).collect(),
                            label: labels[i],
                        }
                    })
                    .collect(),
            })
            .collect();
        let mut twin = datasets.clone();
        twin[4] = ProbeDataset { layer: 4, ..datasets[3].clone() };
        let report = eval_probe_grid(&twin, &ProbeHyper::default(), &(0..10).collect::<Vec<_>>()).unwrap();
        assert_eq!(report.best().unwrap().layer, 2);
        for c in &report.cells {
            assert!(c.min <= c.mean && c.mean <= c.max);
            assert_eq!(c.accuracies.len(), 10);
        }
        for (a, b) in report.cells[3].accuracies.iter().zip(&report.cells[4].accuracies) {
            assert!((a - b).abs() <= 1e-9);
        }
        let csv = report.to_csv();
        assert!(csv.starts_with("site,layer,mean_acc,min_acc,max_acc\n"));
        assert_eq!(csv.lines().count(), 6);
    }

    #[test]
    fn best_cell_ties_prefer_lower_layer() {
        let cell = |layer, mean| GridCell { site: Site::HiddenState, layer, accuracies: vec![mean], mean, min: mean, max: mean };
        let r = GridReport { seeds: vec![0], cells: vec![cell(5, 0.9), cell(2, 0.9), cell(1, 0.8)] };
        assert_eq!(r.best().unwrap().layer, 2);
    }

    proptest::proptest! {
        #[test]
        fn prelabels_invariant_under_monotone_transform(
            totals in proptest::collection::vec(-10.0f64..10.0, 1..60),
        ) {
            let cards: Vec<_> = totals.iter().enumerate().map(|(i, &t)| card("q", i, t)).collect();
            let moved: Vec<_> = totals.iter().enumerate().map(|(i, &t)| card("q", i, t.exp() * 3.0 + 1.0)).collect();
            let cfg = PrelabelConfig::default();
            proptest::prop_assert_eq!(
                prelabel_generations(&cards, &cfg).unwrap().verdicts,
                prelabel_generations(&moved, &cfg).unwrap().verdicts
            );
        }
    }
}
