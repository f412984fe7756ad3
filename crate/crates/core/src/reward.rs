//! Linear reward head over question/response embedding features, trained
//! with the pairwise ranking loss `-log σ(r_c - r_r)` plus `λ(r_c² + r_r²)`.

use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedder::{EmbedError, Embedder, Embedding};
use crate::labeling::{PreferencePair, QuestionCategory};
use crate::probes::{sigmoid, softplus};
use crate::seed::rng_for;

#[derive(Debug, Error)]
pub enum RewardError {
    #[error("no training pairs")]
    Empty,
    #[error("no text for question `{0}`")]
    MissingQuestion(String),
    #[error("feature dimension {found} does not match model dimension {expected}")]
    DimMismatch { expected: usize, found: usize },
    #[error("loss became non-finite at step {step} (lr {lr}); lower the learning rate")]
    Diverged { step: usize, lr: f64 },
    #[error("invalid reward hyper-parameters: {0}")]
    Config(String),
    #[error("mixing needs {needed} general pairs, only {available} available")]
    NotEnoughGeneral { needed: usize, available: usize },
    #[error(transparent)]
    Embed(#[from] EmbedError),
}

/// How a `(question, response)` embedding pair becomes a feature vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMap {
    /// `[q ; a]`
    #[default]
    Concat,
    /// `[q ; a ; vec(q ⊗ a)]`: lets the head score a response relative to the question.
    Interaction,
}

impl FeatureMap {
    pub fn dim(self, embed_dim: usize) -> usize {
        match self {
            FeatureMap::Concat => 2 * embed_dim,
            FeatureMap::Interaction => 2 * embed_dim + embed_dim * embed_dim,
        }
    }

    pub fn apply(self, q: &Embedding, a: &Embedding) -> Result<Vec<f64>, RewardError> {
        if q.dim() != a.dim() {
            return Err(RewardError::DimMismatch {
                expected: q.dim(),
                found: a.dim(),
            });
        }
        let mut out = Vec::with_capacity(self.dim(q.dim()));
        out.extend(q.values().iter().map(|&v| v as f64));
        out.extend(a.values().iter().map(|&v| v as f64));
        if self == FeatureMap::Interaction {
            for &qi in q.values() {
                out.extend(a.values().iter().map(|&aj| qi as f64 * aj as f64));
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub embedder_id: String,
    pub embed_dim: usize,
    pub feature_map: FeatureMap,
}

impl FeatureSpec {
    pub fn dim(&self) -> usize {
        self.feature_map.dim(self.embed_dim)
    }
}

/// Pair provenance; `General` pairs carry no knowledge-state category.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PairKind {
    Known,
    Unknown,
    Mixed,
    General,
}

impl From<QuestionCategory> for PairKind {
    fn from(c: QuestionCategory) -> Self {
        match c {
            QuestionCategory::Known => PairKind::Known,
            QuestionCategory::Unknown => PairKind::Unknown,
            QuestionCategory::Mixed => PairKind::Mixed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairExample {
    pub chosen: Vec<f64>,
    pub rejected: Vec<f64>,
    pub kind: PairKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairBatch {
    pub spec: FeatureSpec,
    pub pairs: Vec<PairExample>,
}

/// A non-factual preference pair used for mixing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneralPair {
    pub question: String,
    pub chosen: String,
    pub rejected: String,
}

fn featurize(
    triples: &[(&str, &str, &str, PairKind)],
    embedder: &Embedder,
    feature_map: FeatureMap,
) -> Result<PairBatch, RewardError> {
    let mut uniq: Vec<&str> = triples.iter().flat_map(|t| [t.0, t.1, t.2]).collect();
    uniq.sort_unstable();
    uniq.dedup();
    let embs = embedder.embed_texts(&uniq)?;
    let lookup: HashMap<&str, &Embedding> = uniq.iter().copied().zip(&embs).collect();
    let embed_dim = embs.first().map(Embedding::dim).unwrap_or(embedder.config().dim);
    let pairs = triples
        .iter()
        .map(|&(q, c, r, kind)| {
            Ok(PairExample {
                chosen: feature_map.apply(lookup[q], lookup[c])?,
                rejected: feature_map.apply(lookup[q], lookup[r])?,
                kind,
            })
        })
        .collect::<Result<Vec<_>, RewardError>>()?;
    Ok(PairBatch {
        spec: FeatureSpec {
            embedder_id: embedder.backend_id().to_string(),
            embed_dim,
            feature_map,
        },
        pairs,
    })
}

pub fn build_pair_features(
    pairs: &[PreferencePair],
    question_text: &HashMap<String, String>,
    embedder: &Embedder,
    feature_map: FeatureMap,
) -> Result<PairBatch, RewardError> {
    let triples = pairs
        .iter()
        .map(|p| {
            let q = question_text
                .get(&p.question_id)
                .ok_or_else(|| RewardError::MissingQuestion(p.question_id.clone()))?;
            Ok((q.as_str(), p.chosen.text.as_str(), p.rejected.text.as_str(), p.category.into()))
        })
        .collect::<Result<Vec<_>, RewardError>>()?;
    featurize(&triples, embedder, feature_map)
}

pub fn build_general_features(
    pairs: &[GeneralPair],
    embedder: &Embedder,
    feature_map: FeatureMap,
) -> Result<PairBatch, RewardError> {
    let triples: Vec<_> = pairs
        .iter()
        .map(|p| (p.question.as_str(), p.chosen.as_str(), p.rejected.as_str(), PairKind::General))
        .collect();
    featurize(&triples, embedder, feature_map)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardModel {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub feature_spec: FeatureSpec,
    pub lambda_reg: f64,
}

impl RewardModel {
    pub fn zeros(spec: FeatureSpec, lambda_reg: f64) -> Self {
        Self {
            weights: vec![0.0; spec.dim()],
            bias: 0.0,
            feature_spec: spec,
            lambda_reg,
        }
    }

    pub fn reward(&self, features: &[f64]) -> f64 {
        self.bias + features.iter().zip(&self.weights).map(|(x, w)| x * w).sum::<f64>()
    }

    pub fn reward_embeddings(&self, q: &Embedding, a: &Embedding) -> Result<f64, RewardError> {
        let f = self.feature_spec.feature_map.apply(q, a)?;
        if f.len() != self.weights.len() {
            return Err(RewardError::DimMismatch {
                expected: self.weights.len(),
                found: f.len(),
            });
        }
        Ok(self.reward(&f))
    }

    pub fn reward_text(&self, embedder: &Embedder, question: &str, response: &str) -> Result<f64, RewardError> {
        let e = embedder.embed_texts(&[question, response])?;
        self.reward_embeddings(&e[0], &e[1])
    }
}

/// Loss of one pair given its two rewards.
pub fn pair_loss(r_chosen: f64, r_rejected: f64, lambda: f64) -> f64 {
    softplus(-(r_chosen - r_rejected)) + lambda * (r_chosen * r_chosen + r_rejected * r_rejected)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RmGradient {
    pub weights: Vec<f64>,
    pub bias: f64,
}

const CHUNK: usize = 64;

/// Mean pair loss and its exact gradient. Partial sums are taken over fixed
/// chunks and combined in order, so the result does not depend on the
/// thread count.
pub fn rm_loss_and_grad(model: &RewardModel, pairs: &[&PairExample]) -> (f64, RmGradient) {
    let lambda = model.lambda_reg;
    let dim = model.weights.len();
    let partials: Vec<(f64, Vec<f64>, f64)> = pairs
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut loss = 0.0;
            let mut gw = vec![0.0; dim];
            let mut gb = 0.0;
            for p in chunk {
                let rc = model.reward(&p.chosen);
                let rr = model.reward(&p.rejected);
                let delta = rc - rr;
                loss += pair_loss(rc, rr, lambda);
                let s = sigmoid(-delta);
                let d_rc = -s + 2.0 * lambda * rc;
                let d_rr = s + 2.0 * lambda * rr;
                for ((g, xc), xr) in gw.iter_mut().zip(&p.chosen).zip(&p.rejected) {
                    *g += d_rc * xc + d_rr * xr;
                }
                gb += d_rc + d_rr;
            }
            (loss, gw, gb)
        })
        .collect();
    let n = pairs.len().max(1) as f64;
    let mut loss = 0.0;
    let mut gw = vec![0.0; dim];
    let mut gb = 0.0;
    for (l, w, b) in partials {
        loss += l;
        for (a, x) in gw.iter_mut().zip(&w) {
            *a += x;
        }
        gb += b;
    }
    gw.iter_mut().for_each(|g| *g /= n);
    (loss / n, RmGradient { weights: gw, bias: gb / n })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RmHyper {
    pub lr: f64,
    pub epochs: usize,
    /// Pairs per step; 0 means the whole set in one step.
    pub batch_size: usize,
    pub warmup_fraction: f64,
    pub lambda: f64,
    pub seed: u64,
    /// General pairs per factual pair in every batch.
    pub general_ratio: f64,
    pub feature_map: FeatureMap,
}

impl Default for RmHyper {
    fn default() -> Self {
        Self {
            lr: 0.5,
            epochs: 1,
            batch_size: 16,
            warmup_fraction: 0.01,
            lambda: 0.01,
            seed: 0,
            general_ratio: 0.0,
            feature_map: FeatureMap::Concat,
        }
    }
}

impl RmHyper {
    pub fn validate(&self) -> Result<(), RewardError> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(RewardError::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(RewardError::Config("warmup_fraction must be in [0, 1)".into()));
        }
        if self.lambda.is_nan() || self.lambda < 0.0 {
            return Err(RewardError::Config("lambda must be >= 0".into()));
        }
        if !(self.general_ratio >= 0.0 && self.general_ratio.is_finite()) {
            return Err(RewardError::Config("general_ratio must be >= 0".into()));
        }
        Ok(())
    }
}

/// Linear warmup over the first `warmup` steps, then linear decay to zero.
pub fn lr_at(step: usize, total: usize, warmup: usize, base: f64) -> f64 {
    if step < warmup {
        base * (step + 1) as f64 / warmup as f64
    } else {
        base * (total - step) as f64 / (total - warmup).max(1) as f64
    }
}

/// Index into the factual or the general pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    Factual(usize),
    General(usize),
}

/// Splits one epoch into batches that each hold `general_ratio` general
/// pairs per factual pair. The per-batch general count must be an integer.
pub fn compose_batches(
    n_factual: usize,
    n_general: usize,
    hyper: &RmHyper,
    epoch: usize,
) -> Result<Vec<Vec<Slot>>, RewardError> {
    let mut rng = rng_for(hyper.seed, &format!("rm-epoch-{epoch}"));
    let mut factual: Vec<usize> = (0..n_factual).collect();
    factual.shuffle(&mut rng);
    let r = hyper.general_ratio;
    let per_batch_f = if hyper.batch_size == 0 {
        n_factual.max(1)
    } else {
        let f = hyper.batch_size as f64 / (1.0 + r);
        if (f - f.round()).abs() > 1e-9 || f.round() < 1.0 {
            return Err(RewardError::Config(format!(
                "batch_size {} cannot hold general_ratio {r} exactly",
                hyper.batch_size
            )));
        }
        f.round() as usize
    };
    let general_for = |nf: usize| -> Result<usize, RewardError> {
        let g = nf as f64 * r;
        if (g - g.round()).abs() > 1e-9 {
            return Err(RewardError::Config(format!(
                "{nf} factual pairs cannot be matched by general_ratio {r} exactly"
            )));
        }
        Ok(g.round() as usize)
    };
    let needed = general_for(n_factual)?;
    if needed > n_general {
        return Err(RewardError::NotEnoughGeneral {
            needed,
            available: n_general,
        });
    }
    let mut general: Vec<usize> = (0..n_general).collect();
    general.shuffle(&mut rng);
    let mut general = general.into_iter();
    let mut batches = Vec::new();
    for chunk in factual.chunks(per_batch_f) {
        let mut batch: Vec<Slot> = chunk.iter().map(|&i| Slot::Factual(i)).collect();
        batch.extend(general.by_ref().take(general_for(chunk.len())?).map(Slot::General));
        batches.push(batch);
    }
    Ok(batches)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RmTrainReport {
    pub steps: usize,
    pub loss_curve: Vec<f64>,
    pub train_accuracy: Option<f64>,
}

pub fn train_reward_model(
    factual: &PairBatch,
    general: Option<&PairBatch>,
    hyper: &RmHyper,
) -> Result<(RewardModel, RmTrainReport), RewardError> {
    hyper.validate()?;
    if factual.pairs.is_empty() {
        return Err(RewardError::Empty);
    }
    let spec = factual.spec.clone();
    let dim = spec.dim();
    let general_pairs: &[PairExample] = general.map(|g| g.pairs.as_slice()).unwrap_or(&[]);
    for p in factual.pairs.iter().chain(general_pairs) {
        for f in [&p.chosen, &p.rejected] {
            if f.len() != dim {
                return Err(RewardError::DimMismatch { expected: dim, found: f.len() });
            }
        }
    }

    let mut model = RewardModel::zeros(spec, hyper.lambda);
    let epochs: Vec<Vec<Vec<Slot>>> = (0..hyper.epochs)
        .map(|e| compose_batches(factual.pairs.len(), general_pairs.len(), hyper, e))
        .collect::<Result<_, _>>()?;
    let total: usize = epochs.iter().map(Vec::len).sum();
    let warmup = if total == 0 {
        0
    } else {
        ((hyper.warmup_fraction * total as f64).ceil() as usize).min(total - 1)
    };

    let mut loss_curve = Vec::with_capacity(total);
    for (step, batch) in epochs.iter().flatten().enumerate() {
        let refs: Vec<&PairExample> = batch
            .iter()
            .map(|s| match *s {
                Slot::Factual(i) => &factual.pairs[i],
                Slot::General(i) => &general_pairs[i],
            })
            .collect();
        let (loss, grad) = rm_loss_and_grad(&model, &refs);
        let lr = lr_at(step, total, warmup, hyper.lr);
        if !loss.is_finite() {
            return Err(RewardError::Diverged { step, lr });
        }
        for (w, g) in model.weights.iter_mut().zip(&grad.weights) {
            *w -= lr * g;
        }
        model.bias -= lr * grad.bias;
        if model.weights.iter().any(|w| !w.is_finite()) || !model.bias.is_finite() {
            return Err(RewardError::Diverged { step, lr });
        }
        loss_curve.push(loss);
    }
    let train_accuracy = pairwise_accuracy(&model, factual.pairs.iter());
    Ok((
        model,
        RmTrainReport {
            steps: total,
            loss_curve,
            train_accuracy,
        },
    ))
}

/// Fraction of pairs with `r_chosen > r_rejected`; ties count as wrong.
pub fn pairwise_accuracy<'a>(model: &RewardModel, pairs: impl Iterator<Item = &'a PairExample>) -> Option<f64> {
    let (mut hit, mut n) = (0usize, 0usize);
    for p in pairs {
        n += 1;
        if model.reward(&p.chosen) > model.reward(&p.rejected) {
            hit += 1;
        }
    }
    (n > 0).then(|| hit as f64 / n as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KindAccuracy {
    pub pairs: usize,
    pub accuracy: f64,
}

/// Per-kind accuracy; kinds with no pairs are absent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RmEvalReport {
    pub overall: Option<KindAccuracy>,
    pub per_category: BTreeMap<PairKind, KindAccuracy>,
}

pub fn eval_reward_model(model: &RewardModel, batch: &PairBatch) -> RmEvalReport {
    let mut per_category = BTreeMap::new();
    for kind in [PairKind::Known, PairKind::Unknown, PairKind::Mixed, PairKind::General] {
        let sel: Vec<&PairExample> = batch.pairs.iter().filter(|p| p.kind == kind).collect();
        if let Some(accuracy) = pairwise_accuracy(model, sel.iter().copied()) {
            per_category.insert(kind, KindAccuracy { pairs: sel.len(), accuracy });
        }
    }
    let overall = pairwise_accuracy(model, batch.pairs.iter()).map(|accuracy| KindAccuracy {
        pairs: batch.pairs.len(),
        accuracy,
    });
    RmEvalReport { overall, per_category }
}

/// Mean and standard deviation of rewards over every response in `batch`;
/// used to put policy rewards on a common scale.
pub fn reward_stats(model: &RewardModel, batch: &PairBatch) -> (f64, f64) {
    let rs: Vec<f64> = batch
        .pairs
        .iter()
        .flat_map(|p| [model.reward(&p.chosen), model.reward(&p.rejected)])
        .collect();
    let n = rs.len().max(1) as f64;
    let mean = rs.iter().sum::<f64>() / n;
    let var = rs.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    (mean, var.sqrt().max(1e-9))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn spec(dim: usize) -> FeatureSpec {
        FeatureSpec { embedder_id: "test".into(), embed_dim: dim / 2, feature_map: FeatureMap::Concat }
    }

    fn model_with(rc: f64, rr: f64, lambda: f64) -> (RewardModel, PairExample) {
        let m = RewardModel { weights: vec![1.0, 0.0], bias: 0.0, feature_spec: spec(2), lambda_reg: lambda };
        let p = PairExample { chosen: vec![rc, 0.0], rejected: vec![rr, 0.0], kind: PairKind::Known };
        (m, p)
    }

    #[test]
    fn anchor_losses() {
        let (m, p) = model_with(0.3, 0.3, 0.0);
        assert!((rm_loss_and_grad(&m, &[&p]).0 - std::f64::consts::LN_2).abs() < 1e-12);
        let (m, p) = model_with(2.0, 0.0, 0.0);
        assert!((rm_loss_and_grad(&m, &[&p]).0 - 0.126928).abs() < 1e-6);
        let (m, p) = model_with(1.0, -1.0, 0.01);
        assert!((rm_loss_and_grad(&m, &[&p]).0 - 0.146928).abs() < 1e-6);
    }

    fn random_instance(rng: &mut ChaCha8Rng, lambda: f64) -> (RewardModel, Vec<PairExample>) {
        let d = rng.gen_range(1..6);
        let n = rng.gen_range(1..8);
        let m = RewardModel {
            weights: (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            bias: rng.gen_range(-1.0..1.0),
            feature_spec: FeatureSpec { embedder_id: "t".into(), embed_dim: d, feature_map: FeatureMap::Concat },
            lambda_reg: lambda,
        };
        let pairs = (0..n)
            .map(|_| PairExample {
                chosen: (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect(),
                rejected: (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect(),
                kind: PairKind::Mixed,
            })
            .collect();
        (m, pairs)
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let (m, pairs) = random_instance(&mut rng, 0.05);
            let refs: Vec<&PairExample> = pairs.iter().collect();
            let (_, g) = rm_loss_and_grad(&m, &refs);
            let h = 1e-6;
            let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-8);
            for j in 0..m.weights.len() {
                let (mut p, mut q) = (m.clone(), m.clone());
                p.weights[j] += h;
                q.weights[j] -= h;
                let num = (rm_loss_and_grad(&p, &refs).0 - rm_loss_and_grad(&q, &refs).0) / (2.0 * h);
                assert!(rel(g.weights[j], num) < 1e-5);
            }
            let (mut p, mut q) = (m.clone(), m.clone());
            p.bias += h;
            q.bias -= h;
            let num = (rm_loss_and_grad(&p, &refs).0 - rm_loss_and_grad(&q, &refs).0) / (2.0 * h);
            assert!(rel(g.bias, num) < 1e-5);
        }
    }

    #[test]
    fn bias_gradient_vanishes_without_regularizer() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (m, pairs) = random_instance(&mut rng, 0.0);
        let refs: Vec<&PairExample> = pairs.iter().collect();
        assert!(rm_loss_and_grad(&m, &refs).1.bias.abs() < 1e-12);
        let m = RewardModel { lambda_reg: 0.5, bias: 1.0, ..m };
        assert!(rm_loss_and_grad(&m, &refs).1.bias.abs() > 1e-6);
    }

    fn planted(n: usize, dim: usize, seed: u64) -> (PairBatch, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let norm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        let u: Vec<f64> = u.iter().map(|x| x / norm).collect();
        let pairs = (0..n)
            .map(|i| {
                let rejected: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let chosen = rejected.iter().zip(&u).map(|(r, d)| r + 0.5 * d).collect();
                let kind = [PairKind::Known, PairKind::Unknown, PairKind::Mixed][i % 3];
                PairExample { chosen, rejected, kind }
            })
            .collect();
        (PairBatch { spec: spec(dim), pairs }, u)
    }

    #[test]
    fn planted_direction_is_learned() {
        let (train, u) = planted(600, 16, 1);
        let (test, _) = planted(300, 16, 2);
        let hyper = RmHyper { epochs: 3, ..Default::default() };
        let (model, report) = train_reward_model(&train, None, &hyper).unwrap();
        assert_eq!(report.steps, 3 * 600usize.div_ceil(16));
        let eval = eval_reward_model(&model, &test);
        assert!(eval.overall.unwrap().accuracy >= 0.9);
        let cos: f64 = model.weights.iter().zip(&u).map(|(a, b)| a * b).sum::<f64>()
            / model.weights.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(cos > 0.9);
        let separator = RewardModel { weights: u, bias: 0.0, feature_spec: spec(16), lambda_reg: 0.0 };
        assert_eq!(eval_reward_model(&separator, &test).overall.unwrap().accuracy, 1.0);
    }

    #[test]
    fn regularizer_shrinks_rewards() {
        for seed in 0..5 {
            let (train, _) = planted(300, 8, 10 + seed);
            let (test, _) = planted(100, 8, 20 + seed);
            let mean_abs = |lambda: f64| {
                let h = RmHyper { lambda, lr: 0.01, epochs: 10, seed, ..Default::default() };
                let (m, _) = train_reward_model(&train, None, &h).unwrap();
                test.pairs.iter().flat_map(|p| [m.reward(&p.chosen).abs(), m.reward(&p.rejected).abs()]).sum::<f64>()
            };
            assert!(mean_abs(10.0) < mean_abs(0.0));
        }
    }

    #[test]
    fn zero_epochs_and_zero_model() {
        let (train, _) = planted(20, 4, 3);
        let (m, r) = train_reward_model(&train, None, &RmHyper { epochs: 0, ..Default::default() }).unwrap();
        assert!(m.weights.iter().all(|w| *w == 0.0) && m.bias == 0.0);
        assert!(r.loss_curve.is_empty());
        let eval = eval_reward_model(&m, &train);
        assert_eq!(eval.overall.unwrap().accuracy, 0.0);
        assert!(!eval.per_category.contains_key(&PairKind::General));
    }

    #[test]
    fn random_model_is_chance_on_symmetric_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let dim = 8;
        let pairs: Vec<PairExample> = (0..1000)
            .map(|_| PairExample {
                chosen: (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                rejected: (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                kind: PairKind::Known,
            })
            .collect();
        let m = RewardModel {
            weights: (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            bias: 0.0,
            feature_spec: spec(dim),
            lambda_reg: 0.0,
        };
        let acc = pairwise_accuracy(&m, pairs.iter()).unwrap();
        assert!((acc - 0.5).abs() <= 0.05, "{acc}");
    }

    #[test]
    fn divergence_reported() {
        let (train, _) = planted(40, 4, 3);
        let h = RmHyper { lr: 1e300, lambda: 1.0, epochs: 3, warmup_fraction: 0.0, ..Default::default() };
        assert!(matches!(train_reward_model(&train, None, &h), Err(RewardError::Diverged { .. })));
    }

    #[test]
    fn schedule_shape() {
        let lrs: Vec<f64> = (0..100).map(|s| lr_at(s, 100, 1, 1.0)).collect();
        assert_eq!(lrs[0], 1.0);
        assert!(lrs.windows(2).skip(1).all(|w| w[1] < w[0]));
        assert!(lrs[99] > 0.0);
        assert_eq!(lr_at(0, 10, 5, 1.0), 0.2);
    }

    #[test]
    fn mixing_ratio_is_exact() {
        let h = RmHyper { batch_size: 16, general_ratio: 1.0, ..Default::default() };
        let batches = compose_batches(40, 50, &h, 0).unwrap();
        let count = |b: &Vec<Slot>| b.iter().filter(|s| matches!(s, Slot::General(_))).count();
        for b in &batches {
            assert_eq!(count(b) * 2, b.len());
        }
        assert_eq!(batches.iter().map(count).sum::<usize>(), 40);
        let h3 = RmHyper { batch_size: 16, general_ratio: 3.0, ..Default::default() };
        for b in compose_batches(8, 24, &h3, 1).unwrap() {
            assert_eq!(count(&b), 3 * (b.len() - count(&b)));
        }
        assert!(compose_batches(40, 10, &h, 0).is_err());
        let odd = RmHyper { batch_size: 15, general_ratio: 1.0, ..Default::default() };
        assert!(compose_batches(40, 50, &odd, 0).is_err());
    }

    #[test]
    fn features_from_embeddings() {
        let q = Embedding::new(vec![1.0, 0.0]).unwrap();
        let a = Embedding::new(vec![0.5, 2.0]).unwrap();
        assert_eq!(FeatureMap::Concat.apply(&q, &a).unwrap(), vec![1.0, 0.0, 0.5, 2.0]);
        assert_eq!(
            FeatureMap::Interaction.apply(&q, &a).unwrap(),
            vec![1.0, 0.0, 0.5, 2.0, 0.5, 2.0, 0.0, 0.0]
        );
        assert_eq!(FeatureMap::Concat.dim(64), 128);
    }

    proptest::proptest! {
        #[test]
        fn accuracy_invariant_under_increasing_transform(
            rs in proptest::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 1..50),
            scale in 0.1f64..10.0,
            shift in -3.0f64..3.0,
        ) {
            let pairs: Vec<PairExample> = rs.iter().map(|&(c, r)| PairExample { chosen: vec![c], rejected: vec![r], kind: PairKind::Known }).collect();
            let base = RewardModel { weights: vec![1.0], bias: 0.0, feature_spec: spec(2), lambda_reg: 0.0 };
            let moved = RewardModel { weights: vec![scale], bias: shift, ..base.clone() };
            proptest::prop_assert_eq!(pairwise_accuracy(&base, pairs.iter()), pairwise_accuracy(&moved, pairs.iter()));
        }
    }
}
