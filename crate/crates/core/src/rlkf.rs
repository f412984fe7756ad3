//! Toy RLKF loop: a tabular autoregressive policy over a small vocabulary,
//! optimized with clipped PPO against a trained reward model, with optional
//! prefix guidance.

use std::collections::{BTreeMap, HashMap};
use std::f64::consts::PI;
use std::sync::Mutex;

use rand::{Rng, RngCore};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedder::{Embedder, Embedding};
use crate::labeling::{PreferencePair, QuestionCategory, Response, Role};
use crate::reward::{
    build_general_features, build_pair_features, reward_stats, train_reward_model, GeneralPair, RewardError,
    RewardModel, RmHyper, RmTrainReport,
};
use crate::seed::rng_for;

#[derive(Debug, Error)]
pub enum RlkfError {
    #[error("invalid environment: {0}")]
    Env(String),
    #[error("invalid PPO config: {0}")]
    Config(String),
    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error("policy shape does not match environment: {0}")]
    Shape(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyQuestion {
    pub id: String,
    pub text: String,
    pub category: QuestionCategory,
    pub factual: Vec<usize>,
    pub hallucination: Vec<usize>,
    pub uncertainty: Vec<usize>,
}

impl ToyQuestion {
    pub fn template(&self, role: Role) -> &[usize] {
        match role {
            Role::Factual => &self.factual,
            Role::Uncertainty => &self.uncertainty,
            Role::Hallucination => &self.hallucination,
        }
    }

    /// Top-ranked response of the question's tier chain.
    pub fn preferred(&self) -> &[usize] {
        match self.category {
            QuestionCategory::Known | QuestionCategory::Mixed => &self.factual,
            QuestionCategory::Unknown => &self.uncertainty,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyEnv {
    pub vocab: Vec<String>,
    pub max_len: usize,
    pub questions: Vec<ToyQuestion>,
}

pub const MAX_VOCAB: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyEnvConfig {
    pub known: usize,
    pub unknown: usize,
    pub mixed: usize,
    pub seed: u64,
}

impl Default for ToyEnvConfig {
    fn default() -> Self {
        Self {
            known: 4,
            unknown: 4,
            mixed: 2,
            seed: 0,
        }
    }
}

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

fn pseudo_word(rng: &mut impl RngCore, syllables: usize) -> String {
    (0..syllables)
        .flat_map(|_| {
            [
                CONSONANTS[rng.gen_range(0..CONSONANTS.len())] as char,
                VOWELS[rng.gen_range(0..VOWELS.len())] as char,
            ]
        })
        .collect()
}

impl ToyEnv {
    /// Deterministic environment. Every question gets three templates of
    /// length 4: `it is <fact> .`, `it is <wrong> .` and the shared
    /// `i am not sure`.
    pub fn synthetic(config: &ToyEnvConfig) -> Result<Self, RlkfError> {
        let mut rng = rng_for(config.seed, "toy-env");
        let mut vocab: Vec<String> = ["i", "am", "not", "sure", "it", "is", "."].map(String::from).to_vec();
        let mut seen: std::collections::HashSet<String> = vocab.iter().cloned().collect();
        let mut fresh = |rng: &mut rand_chacha::ChaCha8Rng, n: usize| loop {
            let w = pseudo_word(rng, n);
            if seen.insert(w.clone()) {
                return w;
            }
        };
        let cats = std::iter::repeat_n(QuestionCategory::Known, config.known)
            .chain(std::iter::repeat_n(QuestionCategory::Unknown, config.unknown))
            .chain(std::iter::repeat_n(QuestionCategory::Mixed, config.mixed));
        let mut questions = Vec::new();
        for (i, category) in cats.enumerate() {
            let text = format!("{} {} {}?", fresh(&mut rng, 3), fresh(&mut rng, 3), fresh(&mut rng, 3));
            let fact = fresh(&mut rng, 3);
            let wrong = fresh(&mut rng, 3);
            vocab.push(fact);
            vocab.push(wrong);
            let (f, h) = (vocab.len() - 2, vocab.len() - 1);
            questions.push(ToyQuestion {
                id: format!("toy{i:03}"),
                text,
                category,
                factual: vec![4, 5, f, 6],
                hallucination: vec![4, 5, h, 6],
                uncertainty: vec![0, 1, 2, 3],
            });
        }
        let env = ToyEnv {
            vocab,
            max_len: 4,
            questions,
        };
        env.check()?;
        Ok(env)
    }

    pub fn check(&self) -> Result<(), RlkfError> {
        if self.vocab.is_empty() || self.vocab.len() > MAX_VOCAB {
            return Err(RlkfError::Env(format!("vocabulary size {} not in 1..={MAX_VOCAB}", self.vocab.len())));
        }
        if self.questions.is_empty() {
            return Err(RlkfError::Env("no questions".into()));
        }
        for q in &self.questions {
            for role in [Role::Factual, Role::Uncertainty, Role::Hallucination] {
                let t = q.template(role);
                if t.is_empty() || t.len() != self.max_len || t.iter().any(|&x| x >= self.vocab.len()) {
                    return Err(RlkfError::Env(format!("question `{}` has a malformed {role:?} template", q.id)));
                }
            }
            if q.factual == q.hallucination || q.factual == q.uncertainty || q.hallucination == q.uncertainty {
                return Err(RlkfError::Env(format!("question `{}` has repeated templates", q.id)));
            }
        }
        Ok(())
    }

    pub fn detokenize(&self, tokens: &[usize]) -> String {
        tokens.iter().map(|&t| self.vocab[t].as_str()).collect::<Vec<_>>().join(" ")
    }

    /// Role of an exact template match, `None` for anything else.
    pub fn classify(&self, question: usize, tokens: &[usize]) -> Option<Role> {
        let q = &self.questions[question];
        [Role::Factual, Role::Uncertainty, Role::Hallucination]
            .into_iter()
            .find(|&r| q.template(r) == tokens)
    }

    /// Preference pairs implied by each question's category.
    pub fn preference_pairs(&self) -> Vec<PreferencePair> {
        let mut out = Vec::new();
        for q in &self.questions {
            let chain: &[(Role, Role)] = match q.category {
                QuestionCategory::Known => &[(Role::Factual, Role::Uncertainty)],
                QuestionCategory::Unknown => &[(Role::Uncertainty, Role::Hallucination)],
                QuestionCategory::Mixed => &[
                    (Role::Factual, Role::Uncertainty),
                    (Role::Uncertainty, Role::Hallucination),
                    (Role::Factual, Role::Hallucination),
                ],
            };
            for &(c, r) in chain {
                out.push(PreferencePair {
                    question_id: q.id.clone(),
                    category: q.category,
                    chosen: Response {
                        text: self.detokenize(q.template(c)),
                        role: c,
                    },
                    rejected: Response {
                        text: self.detokenize(q.template(r)),
                        role: r,
                    },
                });
            }
        }
        out
    }

    /// Pairs on unrelated prompts preferring a well-formed response
    /// (`it is <word> .` or the uncertainty phrase) over a corrupted copy of
    /// it: tokens swapped, repeated or replaced, or a random string. They
    /// carry no question-specific knowledge.
    pub fn general_pairs(&self, n: usize, seed: u64) -> Vec<GeneralPair> {
        let mut rng = rng_for(seed, "toy-general");
        let words: Vec<usize> = self
            .questions
            .iter()
            .flat_map(|q| [q.factual[2], q.hallucination[2]])
            .collect();
        let shared = &self.questions[0];
        let v = self.vocab.len();
        let t = self.max_len;
        (0..n)
            .map(|_| {
                let question = format!("{} {}?", pseudo_word(&mut rng, 3), pseudo_word(&mut rng, 3));
                let chosen = if rng.gen_bool(0.5) {
                    let mut c = shared.factual.clone();
                    c[2] = words[rng.gen_range(0..words.len())];
                    c
                } else {
                    shared.uncertainty.clone()
                };
                let rejected = loop {
                    let mut r = chosen.clone();
                    match rng.gen_range(0..4) {
                        0 => r.swap(rng.gen_range(0..t), rng.gen_range(0..t)),
                        1 => r[rng.gen_range(0..t)] = chosen[rng.gen_range(0..t)],
                        2 => {
                            for _ in 0..rng.gen_range(1..=2) {
                                r[rng.gen_range(0..t)] = rng.gen_range(0..v);
                            }
                        }
                        _ => r.iter_mut().for_each(|x| *x = rng.gen_range(0..v)),
                    }
                    if r != chosen && (0..self.questions.len()).all(|q| self.classify(q, &r).is_none()) {
                        break r;
                    }
                };
                GeneralPair {
                    question,
                    chosen: self.detokenize(&chosen),
                    rejected: self.detokenize(&rejected),
                }
            })
            .collect()
    }

    pub fn question_texts(&self) -> HashMap<String, String> {
        self.questions.iter().map(|q| (q.id.clone(), q.text.clone())).collect()
    }
}

/// Logit table indexed by `(question bucket, position, previous token)`;
/// previous token `vocab_size` stands for the start of the response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    pub buckets: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub seed: u64,
    pub logits: Vec<f64>,
}

impl Policy {
    pub fn uniform(env: &ToyEnv, seed: u64) -> Self {
        let (b, t, v) = (env.questions.len(), env.max_len, env.vocab.len());
        Self {
            buckets: b,
            max_len: t,
            vocab_size: v,
            seed,
            logits: vec![0.0; b * t * (v + 1) * v],
        }
    }

    /// Stand-in for the initial generative model: the templates the model can
    /// produce get `strength` extra logit along their path. Unknown questions
    /// lack the factual template, since the model does not hold that fact.
    pub fn template_prior(env: &ToyEnv, strength: f64, seed: u64) -> Self {
        let mut p = Self::uniform(env, seed);
        for (b, q) in env.questions.iter().enumerate() {
            for role in [Role::Factual, Role::Uncertainty, Role::Hallucination] {
                if role == Role::Factual && q.category == QuestionCategory::Unknown {
                    continue;
                }
                let mut prev = p.bos();
                for (pos, &tok) in q.template(role).iter().enumerate() {
                    let o = p.offset(b, pos, prev);
                    p.logits[o + tok] = strength;
                    prev = tok;
                }
            }
        }
        p
    }

    pub fn bos(&self) -> usize {
        self.vocab_size
    }

    pub fn offset(&self, bucket: usize, pos: usize, prev: usize) -> usize {
        ((bucket * self.max_len + pos) * (self.vocab_size + 1) + prev) * self.vocab_size
    }

    pub fn probs(&self, bucket: usize, pos: usize, prev: usize) -> Vec<f64> {
        let o = self.offset(bucket, pos, prev);
        softmax(&self.logits[o..o + self.vocab_size])
    }

    pub fn check_env(&self, env: &ToyEnv) -> Result<(), RlkfError> {
        if self.buckets != env.questions.len() || self.max_len != env.max_len || self.vocab_size != env.vocab.len() {
            return Err(RlkfError::Shape(format!(
                "policy ({}, {}, {}) vs env ({}, {}, {})",
                self.buckets,
                self.max_len,
                self.vocab_size,
                env.questions.len(),
                env.max_len,
                env.vocab.len()
            )));
        }
        if self.logits.len() != self.buckets * self.max_len * (self.vocab_size + 1) * self.vocab_size {
            return Err(RlkfError::Shape("logit table has the wrong length".into()));
        }
        Ok(())
    }

    /// Highest-probability token at every step; ties go to the lowest token.
    pub fn greedy(&self, bucket: usize) -> Vec<usize> {
        let mut prev = self.bos();
        let mut out = Vec::with_capacity(self.max_len);
        for pos in 0..self.max_len {
            let o = self.offset(bucket, pos, prev);
            let row = &self.logits[o..o + self.vocab_size];
            let best = (0..self.vocab_size).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            out.push(best);
            prev = best;
        }
        out
    }
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|x| x * x.ln()).sum::<f64>()
}

/// Scores a response to a question.
pub trait RewardSource: Sync {
    fn reward(&self, question: usize, tokens: &[usize]) -> Result<f64, RlkfError>;
}

/// Reward-model scores of detokenized responses, standardized by the
/// model's reward statistics on its training pairs.
pub struct RmReward<'a> {
    env: &'a ToyEnv,
    model: RewardModel,
    embedder: &'a Embedder,
    questions: Vec<Embedding>,
    mean: f64,
    std: f64,
    memo: Mutex<HashMap<(usize, Vec<usize>), f64>>,
}

impl<'a> RmReward<'a> {
    pub fn new(env: &'a ToyEnv, model: RewardModel, embedder: &'a Embedder, mean: f64, std: f64) -> Result<Self, RlkfError> {
        let texts: Vec<&str> = env.questions.iter().map(|q| q.text.as_str()).collect();
        let questions = embedder.embed_texts(&texts).map_err(RewardError::from)?;
        Ok(Self {
            env,
            model,
            embedder,
            questions,
            mean,
            std,
            memo: Mutex::new(HashMap::new()),
        })
    }

    pub fn model(&self) -> &RewardModel {
        &self.model
    }
}

impl RewardSource for RmReward<'_> {
    fn reward(&self, question: usize, tokens: &[usize]) -> Result<f64, RlkfError> {
        let key = (question, tokens.to_vec());
        if let Some(&r) = self.memo.lock().expect("reward memo poisoned").get(&key) {
            return Ok(r);
        }
        let a = self
            .embedder
            .embed_one(&self.env.detokenize(tokens))
            .map_err(RewardError::from)?;
        let raw = self.model.reward_embeddings(&self.questions[question], &a)?;
        let r = (raw - self.mean) / self.std;
        self.memo.lock().expect("reward memo poisoned").insert(key, r);
        Ok(r)
    }
}

/// Reward-model settings for the toy environment. `general_ratio` sets both
/// how many general pairs are generated per preference pair and the batch
/// mixing ratio.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyRmConfig {
    pub hyper: RmHyper,
}

impl Default for ToyRmConfig {
    fn default() -> Self {
        Self {
            hyper: RmHyper {
                lr: 0.5,
                epochs: 200,
                batch_size: 8,
                lambda: 0.01,
                general_ratio: 3.0,
                feature_map: crate::reward::FeatureMap::Interaction,
                ..RmHyper::default()
            },
        }
    }
}

/// Trains a reward model on the environment's preference pairs mixed with
/// general pairs and wraps it as a standardized reward source.
pub fn train_toy_reward<'a>(
    env: &'a ToyEnv,
    embedder: &'a Embedder,
    config: &ToyRmConfig,
) -> Result<(RmReward<'a>, RmTrainReport), RlkfError> {
    let pairs = env.preference_pairs();
    let factual = build_pair_features(&pairs, &env.question_texts(), embedder, config.hyper.feature_map)?;
    let n_general = (pairs.len() as f64 * config.hyper.general_ratio).round() as usize;
    let general = build_general_features(&env.general_pairs(n_general, config.hyper.seed), embedder, config.hyper.feature_map)?;
    let (model, report) = train_reward_model(&factual, Some(&general), &config.hyper)?;
    let (mean, std) = reward_stats(&model, &factual);
    Ok((RmReward::new(env, model, embedder, mean, std)?, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub question: usize,
    pub question_id: String,
    pub tokens: Vec<usize>,
    pub logprobs: Vec<f64>,
    pub guided_mask: Vec<bool>,
    pub reward: f64,
}

/// Samples `n` episodes. The first `guided` episodes have their first
/// `guidance_len` tokens forced to the question's preferred prefix.
#[allow(clippy::too_many_arguments)]
pub fn rollout(
    policy: &Policy,
    env: &ToyEnv,
    reward: &dyn RewardSource,
    n: usize,
    guided: usize,
    guidance_len: usize,
    seed: u64,
    step: usize,
) -> Result<Vec<Trajectory>, RlkfError> {
    (0..n)
        .into_par_iter()
        .map(|ep| {
            let mut rng = rng_for(seed, &format!("rollout/{step}/{ep}"));
            let question = rng.gen_range(0..env.questions.len());
            let q = &env.questions[question];
            let forced = if ep < guided { guidance_len.min(env.max_len) } else { 0 };
            let mut prev = policy.bos();
            let mut tokens = Vec::with_capacity(env.max_len);
            let mut logprobs = Vec::with_capacity(env.max_len);
            let mut guided_mask = Vec::with_capacity(env.max_len);
            for pos in 0..env.max_len {
                let p = policy.probs(question, pos, prev);
                let tok = if pos < forced {
                    q.preferred()[pos]
                } else {
                    sample(&p, rng.gen::<f64>())
                };
                tokens.push(tok);
                logprobs.push(p[tok].ln());
                guided_mask.push(pos < forced);
                prev = tok;
            }
            let r = reward.reward(question, &tokens)?;
            Ok(Trajectory {
                question,
                question_id: q.id.clone(),
                tokens,
                logprobs,
                guided_mask,
                reward: r,
            })
        })
        .collect()
}

fn sample(p: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, &x) in p.iter().enumerate() {
        acc += x;
        if u < acc {
            return i;
        }
    }
    p.len() - 1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoConfig {
    pub clip_eps: f64,
    pub ppo_epochs: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub kl_coeff: f64,
    pub entropy_coeff: f64,
    pub baseline_decay: f64,
    pub guidance_fraction: f64,
    pub guidance_len: usize,
    /// Logit bonus of template paths in the initial policy; 0 is uniform.
    pub prior_strength: f64,
    pub batch_size: usize,
    pub episodes: usize,
    pub seed: u64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            clip_eps: 0.2,
            ppo_epochs: 4,
            lr: 1e-2,
            beta1: 0.9,
            beta2: 0.99,
            adam_eps: 1e-5,
            kl_coeff: 0.0,
            entropy_coeff: 0.01,
            baseline_decay: 0.9,
            guidance_fraction: 0.5,
            guidance_len: 2,
            prior_strength: 4.0,
            batch_size: 32,
            episodes: 5000,
            seed: 0,
        }
    }
}

impl PpoConfig {
    /// Settings used for the toy experiment: a faster step and smaller
    /// batches than the defaults, which leave too little movement in the
    /// logit table within 5000 episodes.
    pub fn toy() -> Self {
        Self {
            lr: 0.03,
            batch_size: 16,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), RlkfError> {
        let bad = |m: &str| Err(RlkfError::Config(m.into()));
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return bad("clip_eps must be in (0, 1)");
        }
        if self.kl_coeff.is_nan() || self.kl_coeff < 0.0 {
            return bad("kl_coeff must be >= 0");
        }
        if !(0.0..=1.0).contains(&self.guidance_fraction) {
            return bad("guidance_fraction must be in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.baseline_decay) {
            return bad("baseline_decay must be in [0, 1)");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        self.episodes.div_ceil(self.batch_size)
    }

    pub fn guided_per_batch(&self) -> usize {
        (self.guidance_fraction * self.batch_size as f64).round() as usize
    }
}

/// `min(ρÂ, clip(ρ, 1-ε, 1+ε)Â)`.
pub fn surrogate_term(rho: f64, adv: f64, eps: f64) -> f64 {
    (rho * adv).min(rho.clamp(1.0 - eps, 1.0 + eps) * adv)
}

/// Exponential moving average of rewards per `(question, guided)`: a
/// guided episode effectively has a longer prompt, so it keeps its own
/// baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Baseline {
    pub decay: f64,
    pub values: Vec<Option<f64>>,
}

impl Baseline {
    pub fn new(questions: usize, decay: f64) -> Self {
        Self {
            decay,
            values: vec![None; 2 * questions],
        }
    }

    fn slot(t: &Trajectory) -> usize {
        2 * t.question + usize::from(t.guided_mask.first().copied().unwrap_or(false))
    }

    pub fn get(&self, t: &Trajectory) -> f64 {
        self.values[Self::slot(t)].unwrap_or(0.0)
    }

    pub fn update(&mut self, t: &Trajectory) {
        let q = Self::slot(t);
        let r = t.reward;
        self.values[q] = Some(match self.values[q] {
            Some(b) => self.decay * b + (1.0 - self.decay) * r,
            None => r,
        });
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    /// Ascent step on `params` along `grad`.
    pub fn ascend(&mut self, params: &mut [f64], grad: &[f64], lr: f64, cfg: &PpoConfig) {
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let c2 = 1.0 - cfg.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g;
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g * g;
            params[i] += lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + cfg.adam_eps);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub tokens: usize,
    pub surrogate: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
}

/// Objective over the non-guided positions of `trajs` and its gradient
/// with respect to the logit table.
pub fn ppo_objective(
    policy: &Policy,
    reference: &Policy,
    trajs: &[Trajectory],
    advantages: &[f64],
    cfg: &PpoConfig,
) -> (UpdateStats, Vec<f64>) {
    let mut grad = vec![0.0; policy.logits.len()];
    let (mut n, mut surr, mut ent, mut clipped) = (0usize, 0.0, 0.0, 0usize);
    for (t, &adv) in trajs.iter().zip(advantages) {
        let mut prev = policy.bos();
        for pos in 0..t.tokens.len() {
            let a = t.tokens[pos];
            if t.guided_mask[pos] {
                prev = a;
                continue;
            }
            let o = policy.offset(t.question, pos, prev);
            let p = policy.probs(t.question, pos, prev);
            let rho = (p[a].ln() - t.logprobs[pos]).exp();
            surr += surrogate_term(rho, adv, cfg.clip_eps);
            let active = !((adv >= 0.0 && rho > 1.0 + cfg.clip_eps) || (adv < 0.0 && rho < 1.0 - cfg.clip_eps));
            if !active {
                clipped += 1;
            }
            let h = entropy(&p);
            ent += h;
            let g = &mut grad[o..o + policy.vocab_size];
            for j in 0..policy.vocab_size {
                let onehot = if j == a { 1.0 } else { 0.0 };
                if active {
                    g[j] += rho * adv * (onehot - p[j]);
                }
                if p[j] > 0.0 {
                    g[j] += -cfg.entropy_coeff * p[j] * (p[j].ln() + h);
                }
            }
            if cfg.kl_coeff > 0.0 {
                let r = reference.probs(t.question, pos, prev);
                let kl: f64 = p.iter().zip(&r).filter(|(x, _)| **x > 0.0).map(|(x, y)| x * (x / y).ln()).sum();
                for j in 0..policy.vocab_size {
                    if p[j] > 0.0 {
                        g[j] -= cfg.kl_coeff * p[j] * ((p[j] / r[j]).ln() - kl);
                    }
                }
            }
            n += 1;
            prev = a;
        }
    }
    if n > 0 {
        grad.iter_mut().for_each(|g| *g /= n as f64);
    }
    let d = n.max(1) as f64;
    (
        UpdateStats {
            tokens: n,
            surrogate: surr / d,
            entropy: ent / d,
            clip_fraction: clipped as f64 / d,
        },
        grad,
    )
}

/// Runs `ppo_epochs` Adam ascent steps on the clipped objective. Advantages
/// use the baseline from before this batch; the baseline is then updated.
pub fn ppo_update(
    policy: &mut Policy,
    reference: &Policy,
    trajs: &[Trajectory],
    baseline: &mut Baseline,
    adam: &mut Adam,
    lr: f64,
    cfg: &PpoConfig,
) -> UpdateStats {
    let advantages: Vec<f64> = trajs.iter().map(|t| t.reward - baseline.get(t)).collect();
    for t in trajs {
        baseline.update(t);
    }
    let mut first = None;
    for _ in 0..cfg.ppo_epochs {
        let (stats, grad) = ppo_objective(policy, reference, trajs, &advantages, cfg);
        if stats.tokens == 0 {
            log::warn!("batch has no unguided positions; skipping update");
            return stats;
        }
        adam.ascend(&mut policy.logits, &grad, lr, cfg);
        first.get_or_insert(stats);
    }
    first.unwrap_or(UpdateStats {
        tokens: 0,
        surrogate: 0.0,
        entropy: 0.0,
        clip_fraction: 0.0,
    })
}

/// Cosine decay from `base` to zero over `total` steps.
pub fn cosine_lr(step: usize, total: usize, base: f64) -> f64 {
    base * 0.5 * (1.0 + (PI * step as f64 / total.max(1) as f64).cos())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decoding {
    Greedy,
    Sampled,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RoleRates {
    pub episodes: usize,
    pub factual: f64,
    pub uncertainty: f64,
    pub hallucination: f64,
    pub other: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyEval {
    pub per_category: BTreeMap<QuestionCategory, RoleRates>,
    pub mean_reward: f64,
}

impl PolicyEval {
    pub fn factual_rate_known(&self) -> f64 {
        self.per_category.get(&QuestionCategory::Known).map_or(0.0, |r| r.factual)
    }

    pub fn uncertainty_rate_unknown(&self) -> f64 {
        self.per_category.get(&QuestionCategory::Unknown).map_or(0.0, |r| r.uncertainty)
    }
}

/// Role rates over `n` episodes; episode `e` asks question `e mod |Q|`.
pub fn evaluate_policy(
    policy: &Policy,
    env: &ToyEnv,
    reward: &dyn RewardSource,
    n: usize,
    seed: u64,
    decoding: Decoding,
) -> Result<PolicyEval, RlkfError> {
    let outcomes: Vec<(usize, Option<Role>, f64)> = (0..n)
        .into_par_iter()
        .map(|ep| {
            let question = ep % env.questions.len();
            let tokens = match decoding {
                Decoding::Greedy => policy.greedy(question),
                Decoding::Sampled => {
                    let mut rng = rng_for(seed, &format!("eval/{ep}"));
                    let mut prev = policy.bos();
                    (0..env.max_len)
                        .map(|pos| {
                            let t = sample(&policy.probs(question, pos, prev), rng.gen::<f64>());
                            prev = t;
                            t
                        })
                        .collect()
                }
            };
            Ok((question, env.classify(question, &tokens), reward.reward(question, &tokens)?))
        })
        .collect::<Result<_, RlkfError>>()?;
    let mut counts: BTreeMap<QuestionCategory, [usize; 5]> = BTreeMap::new();
    let mut total_reward = 0.0;
    for (q, role, r) in &outcomes {
        let c = counts.entry(env.questions[*q].category).or_default();
        c[0] += 1;
        c[match role {
            Some(Role::Factual) => 1,
            Some(Role::Uncertainty) => 2,
            Some(Role::Hallucination) => 3,
            None => 4,
        }] += 1;
        total_reward += r;
    }
    let per_category = counts
        .into_iter()
        .map(|(cat, c)| {
            let n = c[0] as f64;
            (
                cat,
                RoleRates {
                    episodes: c[0],
                    factual: c[1] as f64 / n,
                    uncertainty: c[2] as f64 / n,
                    hallucination: c[3] as f64 / n,
                    other: c[4] as f64 / n,
                },
            )
        })
        .collect();
    Ok(PolicyEval {
        per_category,
        mean_reward: total_reward / outcomes.len().max(1) as f64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub mean_reward: f64,
    pub factual_rate_known: f64,
    pub uncertainty_rate_unknown: f64,
    pub entropy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RlkfRun {
    pub policy: Policy,
    pub curve: Vec<CurvePoint>,
    /// First step whose greedy Factual rate on Known questions reaches the threshold.
    pub steps_to_threshold: Option<usize>,
    pub final_eval: PolicyEval,
}

pub const FACTUAL_THRESHOLD: f64 = 0.8;

pub fn curve_csv(curve: &[CurvePoint]) -> String {
    let mut out = String::from("step,mean_reward,factual_rate_known,uncertainty_rate_unknown,entropy\n");
    for p in curve {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6}\n",
            p.step, p.mean_reward, p.factual_rate_known, p.uncertainty_rate_unknown, p.entropy
        ));
    }
    out
}

pub fn train_rlkf(env: &ToyEnv, reward: &dyn RewardSource, cfg: &PpoConfig) -> Result<RlkfRun, RlkfError> {
    cfg.validate()?;
    env.check()?;
    let mut policy = Policy::template_prior(env, cfg.prior_strength, cfg.seed);
    let reference = policy.clone();
    let mut baseline = Baseline::new(env.questions.len(), cfg.baseline_decay);
    let mut adam = Adam::new(policy.logits.len());
    let steps = cfg.steps();
    let guided = cfg.guided_per_batch();
    let mut curve = Vec::with_capacity(steps);
    let mut steps_to_threshold = None;
    let n_eval = env.questions.len();
    for step in 0..steps {
        let n = cfg.batch_size.min(cfg.episodes - step * cfg.batch_size);
        let trajs = rollout(&policy, env, reward, n, guided.min(n), cfg.guidance_len, cfg.seed, step)?;
        let mean_reward = trajs.iter().map(|t| t.reward).sum::<f64>() / n as f64;
        let lr = cosine_lr(step, steps, cfg.lr);
        let stats = ppo_update(&mut policy, &reference, &trajs, &mut baseline, &mut adam, lr, cfg);
        if !mean_reward.is_finite() || policy.logits.iter().any(|x| !x.is_finite()) {
            return Err(RlkfError::Diverged {
                step,
                detail: format!("mean reward {mean_reward}, surrogate {}", stats.surrogate),
            });
        }
        let eval = evaluate_policy(&policy, env, reward, n_eval, cfg.seed, Decoding::Greedy)?;
        if steps_to_threshold.is_none() && eval.factual_rate_known() >= FACTUAL_THRESHOLD {
            steps_to_threshold = Some(step + 1);
        }
        curve.push(CurvePoint {
            step: step + 1,
            mean_reward,
            factual_rate_known: eval.factual_rate_known(),
            uncertainty_rate_unknown: eval.uncertainty_rate_unknown(),
            entropy: stats.entropy,
        });
    }
    let final_eval = evaluate_policy(&policy, env, reward, n_eval, cfg.seed, Decoding::Greedy)?;
    Ok(RlkfRun {
        policy,
        curve,
        steps_to_threshold,
        final_eval,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedder::EmbedderConfig;

    fn env() -> ToyEnv {
        ToyEnv::synthetic(&ToyEnvConfig::default()).unwrap()
    }

    /// Fraction of positions agreeing with the preferred template.
    struct PrefixOracle<'a>(&'a ToyEnv);

    impl RewardSource for PrefixOracle<'_> {
        fn reward(&self, q: usize, tokens: &[usize]) -> Result<f64, RlkfError> {
            let want = self.0.questions[q].preferred();
            Ok(tokens.iter().zip(want).filter(|(a, b)| a == b).count() as f64 / want.len() as f64)
        }
    }

    fn oracle(env: &ToyEnv) -> PrefixOracle<'_> {
        PrefixOracle(env)
    }

    #[test]
    fn env_is_valid_and_deterministic() {
        let e = env();
        assert!(e.vocab.len() <= MAX_VOCAB);
        assert_eq!(e, env());
        assert_eq!(e.questions.len(), 10);
        assert_eq!(e.preference_pairs().len(), 4 + 4 + 2 * 3);
        let q = &e.questions[0];
        assert_eq!(e.classify(0, &q.factual), Some(Role::Factual));
        assert_eq!(e.classify(0, &[0, 0, 0, 0]), None);
    }

    #[test]
    fn probabilities_normalized() {
        let e = env();
        let mut p = Policy::uniform(&e, 0);
        for (i, x) in p.logits.iter_mut().enumerate() {
            *x = ((i * 7919) % 101) as f64 / 3.0 - 10.0;
        }
        for b in 0..p.buckets {
            for pos in 0..p.max_len {
                for prev in 0..=p.vocab_size {
                    assert!((p.probs(b, pos, prev).iter().sum::<f64>() - 1.0).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn guidance_forces_prefix() {
        let e = env();
        let p = Policy::uniform(&e, 0);
        let trajs = rollout(&p, &e, &oracle(&e), 64, 32, 2, 3, 0).unwrap();
        for t in &trajs[..32] {
            assert_eq!(&t.tokens[..2], &e.questions[t.question].preferred()[..2]);
            assert_eq!(t.guided_mask, vec![true, true, false, false]);
        }
        assert!(trajs[32..].iter().all(|t| t.guided_mask.iter().all(|m| !m)));
    }

    #[test]
    fn deterministic_policy_ignores_seed() {
        let e = env();
        let mut p = Policy::uniform(&e, 0);
        for (qi, q) in e.questions.iter().enumerate() {
            let mut prev = p.bos();
            for (pos, &tok) in q.factual.iter().enumerate() {
                let o = p.offset(qi, pos, prev);
                p.logits[o + tok] = 1e4;
                prev = tok;
            }
        }
        let a = rollout(&p, &e, &oracle(&e), 20, 0, 2, 1, 0).unwrap();
        let b = rollout(&p, &e, &oracle(&e), 20, 0, 2, 99, 0).unwrap();
        for t in a.iter().chain(&b) {
            assert_eq!(t.tokens, e.questions[t.question].factual);
        }
        let eval = evaluate_policy(&p, &e, &oracle(&e), 50, 0, Decoding::Sampled).unwrap();
        assert_eq!(eval.factual_rate_known(), 1.0);
    }

    #[test]
    fn surrogate_examples() {
        assert_eq!(surrogate_term(1.0, 0.7, 0.2), 0.7);
        assert!((surrogate_term(1.5, 1.0, 0.2) - 1.2).abs() < 1e-12);
        assert!((surrogate_term(0.5, -1.0, 0.2) + 0.8).abs() < 1e-12);
    }

    fn fake_trajs(e: &ToyEnv, p: &Policy) -> Vec<Trajectory> {
        (0..e.questions.len())
            .map(|q| {
                let tokens = e.questions[q].hallucination.clone();
                let mut prev = p.bos();
                let logprobs = tokens
                    .iter()
                    .enumerate()
                    .map(|(pos, &t)| {
                        let lp = p.probs(q, pos, prev)[t].ln();
                        prev = t;
                        lp
                    })
                    .collect();
                Trajectory {
                    question: q,
                    question_id: e.questions[q].id.clone(),
                    tokens,
                    logprobs,
                    guided_mask: vec![q % 2 == 0, q % 2 == 0, false, false],
                    reward: q as f64 / 3.0 - 1.0,
                }
            })
            .collect()
    }

    #[test]
    fn objective_at_ratio_one_is_mean_advantage() {
        let e = env();
        let p = Policy::uniform(&e, 0);
        let trajs = fake_trajs(&e, &p);
        let adv: Vec<f64> = trajs.iter().map(|t| t.reward).collect();
        let cfg = PpoConfig { entropy_coeff: 0.0, ..Default::default() };
        let (stats, _) = ppo_objective(&p, &p, &trajs, &adv, &cfg);
        let weighted: f64 = trajs.iter().map(|t| t.reward * t.guided_mask.iter().filter(|m| !**m).count() as f64).sum();
        assert!((stats.surrogate - weighted / stats.tokens as f64).abs() < 1e-12);
    }

    #[test]
    fn guided_positions_carry_no_gradient() {
        let e = env();
        let p = Policy::uniform(&e, 0);
        let trajs = fake_trajs(&e, &p);
        let adv: Vec<f64> = trajs.iter().map(|t| t.reward).collect();
        let cfg = PpoConfig::default();
        let (_, grad) = ppo_objective(&p, &p, &trajs, &adv, &cfg);
        for t in trajs.iter().filter(|t| t.guided_mask[0]) {
            let o0 = p.offset(t.question, 0, p.bos());
            let o1 = p.offset(t.question, 1, t.tokens[0]);
            assert!(grad[o0..o0 + p.vocab_size].iter().all(|g| *g == 0.0));
            assert!(grad[o1..o1 + p.vocab_size].iter().all(|g| *g == 0.0));
        }
        let only_guided: Vec<Trajectory> = trajs
            .iter()
            .filter(|t| t.guided_mask[0])
            .map(|t| Trajectory { guided_mask: vec![true; 4], ..t.clone() })
            .collect();
        let mut zeroed = only_guided.clone();
        zeroed.iter_mut().for_each(|t| t.reward = 0.0);
        let adv_a: Vec<f64> = only_guided.iter().map(|t| t.reward).collect();
        let (sa, ga) = ppo_objective(&p, &p, &only_guided, &adv_a, &cfg);
        let (sb, gb) = ppo_objective(&p, &p, &zeroed, &vec![0.0; zeroed.len()], &cfg);
        assert_eq!(sa.tokens, 0);
        assert_eq!(ga, gb);
        assert_eq!(sa, sb);
    }

    #[test]
    fn objective_gradient_matches_finite_differences() {
        let e = env();
        let mut p = Policy::uniform(&e, 0);
        for (i, x) in p.logits.iter_mut().enumerate() {
            *x = ((i * 31) % 17) as f64 / 10.0;
        }
        let reference = Policy::uniform(&e, 0);
        let trajs = fake_trajs(&e, &reference);
        let adv: Vec<f64> = trajs.iter().map(|t| t.reward).collect();
        let cfg = PpoConfig { kl_coeff: 0.3, clip_eps: 0.9, ..Default::default() };
        let objective = |pol: &Policy| {
            let (s, _) = ppo_objective(pol, &reference, &trajs, &adv, &cfg);
            let mut total = s.surrogate + cfg.entropy_coeff * s.entropy;
            let mut kl = 0.0;
            for t in &trajs {
                let mut prev = pol.bos();
                for pos in 0..4 {
                    if !t.guided_mask[pos] {
                        let a = pol.probs(t.question, pos, prev);
                        let r = reference.probs(t.question, pos, prev);
                        kl += a.iter().zip(&r).map(|(x, y)| x * (x / y).ln()).sum::<f64>();
                    }
                    prev = t.tokens[pos];
                }
            }
            total -= cfg.kl_coeff * kl / s.tokens as f64;
            total
        };
        let (_, grad) = ppo_objective(&p, &reference, &trajs, &adv, &cfg);
        let t = &trajs[1];
        let o = p.offset(t.question, 2, t.tokens[1]);
        for j in [0, t.tokens[2], 5] {
            let h = 1e-6;
            let (mut a, mut b) = (p.clone(), p.clone());
            a.logits[o + j] += h;
            b.logits[o + j] -= h;
            let num = (objective(&a) - objective(&b)) / (2.0 * h);
            assert!((num - grad[o + j]).abs() < 1e-6 * num.abs().max(1e-3), "{num} vs {}", grad[o + j]);
        }
    }

    #[test]
    fn clipping_bounds_surrogate() {
        for rho in [0.1, 0.5, 0.9, 1.0, 1.1, 1.5, 4.0] {
            for adv in [-2.0, -0.5, 0.0, 0.5, 2.0] {
                assert!(surrogate_term(rho, adv, 0.2) <= 1.2 * f64::abs(adv) + 1e-12);
            }
        }
    }

    #[test]
    fn uniform_policy_rarely_matches_templates() {
        let e = env();
        let p = Policy::uniform(&e, 0);
        let eval = evaluate_policy(&p, &e, &oracle(&e), 2000, 4, Decoding::Sampled).unwrap();
        let v = e.vocab.len() as f64;
        let expected = 3.0 / v.powi(4);
        for r in eval.per_category.values() {
            assert!(r.other >= 1.0 - 100.0 * expected - 0.01);
        }
        let again = evaluate_policy(&p, &e, &oracle(&e), 2000, 4, Decoding::Sampled).unwrap();
        assert_eq!(eval, again);
    }

    #[test]
    fn oracle_reward_is_learned() {
        let e = env();
        let cfg = PpoConfig { episodes: 3000, ..PpoConfig::toy() };
        let run = train_rlkf(&e, &oracle(&e), &cfg).unwrap();
        assert!(run.final_eval.factual_rate_known() >= 0.8, "{:?}", run.final_eval);
        assert!(run.final_eval.uncertainty_rate_unknown() >= 0.8, "{:?}", run.final_eval);
        let again = train_rlkf(&e, &oracle(&e), &cfg).unwrap();
        assert_eq!(run, again);
    }

    #[test]
    fn trained_rm_prefers_factual_on_known() {
        let e = env();
        let embedder = Embedder::new(EmbedderConfig::hashed(128)).unwrap();
        let (rm, report) = train_toy_reward(&e, &embedder, &ToyRmConfig::default()).unwrap();
        assert!(report.train_accuracy.unwrap() >= 0.99);
        for (i, q) in e.questions.iter().enumerate() {
            if q.category == QuestionCategory::Known {
                let f = rm.reward(i, &q.factual).unwrap();
                let h = rm.reward(i, &q.hallucination).unwrap();
                assert!(f > h, "{}: {f} vs {h}", q.id);
            }
        }
    }
}
