//! Deterministic synthetic corpus with planted structure.
//!
//! Each question gets a latent knowledge state. Known questions answer with
//! the reference answer in every generation, Unknown ones with a different
//! invented name each time, Mixed ones with both. Activations are Gaussian
//! noise except along one direction at a planted `(site, layer)`, where
//! Known questions sit at `+signal` and Unknown at `-signal`. Neighbouring
//! layers of the same site carry a weaker copy of the signal.

use crate::config::{Paths, PipelineConfig};
use crate::corpus::{
    write_jsonl, ActivationManifest, ActivationWriter, CorpusError, GenMode, Generation, GoldLabel, Question, Site,
    Verdict,
};
use crate::embedder::EmbedderConfig;
use crate::labeling::QuestionCategory;
use crate::rlkf::PpoConfig;
use crate::seed::rng_for;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub questions: usize,
    pub k: usize,
    pub known_fraction: f64,
    pub unknown_fraction: f64,
    /// Share of questions written in Chinese.
    pub zh_fraction: f64,
    pub num_layers: usize,
    pub hidden_size: usize,
    pub planted_site: Site,
    pub planted_layer: usize,
    pub signal: f64,
    /// Signal multiplier per layer of distance from the planted layer.
    pub neighbour_decay: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            questions: 200,
            k: 5,
            known_fraction: 0.3,
            unknown_fraction: 0.3,
            zh_fraction: 0.2,
            num_layers: 8,
            hidden_size: 32,
            planted_site: Site::MlpOutput,
            planted_layer: 5,
            signal: 4.0,
            neighbour_decay: 0.25,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.questions == 0 || self.k < 2 {
            return Err("need at least one question and k >= 2".into());
        }
        if self.known_fraction < 0.0 || self.unknown_fraction < 0.0 || self.known_fraction + self.unknown_fraction > 1.0 {
            return Err("known_fraction + unknown_fraction must lie in [0, 1]".into());
        }
        if !(0.0..=1.0).contains(&self.zh_fraction) {
            return Err("zh_fraction must be in [0, 1]".into());
        }
        if self.planted_layer >= self.num_layers || self.hidden_size == 0 {
            return Err("planted_layer must be < num_layers and hidden_size > 0".into());
        }
        Ok(())
    }
}

/// What the generator planted, for checking downstream stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthTruth {
    pub planted_site: Site,
    pub planted_layer: usize,
    pub categories: Vec<(String, QuestionCategory)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fixture {
    pub questions: Vec<Question>,
    pub generations: Vec<Generation>,
    pub gold: Vec<GoldLabel>,
    pub manifest: ActivationManifest,
    pub activation_bytes: Vec<u8>,
    pub truth: SynthTruth,
}

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";
const HANZI: &[char] = &[
    '王', '李', '张', '刘', '陈', '杨', '黄', '赵', '周', '吴', '明', '华', '国', '平', '文', '德', '安', '海', '林', '清',
];

fn word(rng: &mut ChaCha8Rng, syllables: usize) -> String {
    let mut s = String::new();
    for _ in 0..syllables {
        s.push(CONSONANTS[rng.gen_range(0..CONSONANTS.len())] as char);
        s.push(VOWELS[rng.gen_range(0..VOWELS.len())] as char);
    }
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => s,
    }
}

fn name(rng: &mut ChaCha8Rng, zh: bool) -> String {
    if zh {
        (0..rng.gen_range(2..=3)).map(|_| HANZI[rng.gen_range(0..HANZI.len())]).collect()
    } else {
        let syllables = rng.gen_range(2..=3);
        format!("{} {}", word(rng, syllables), word(rng, 2))
    }
}

fn answer_text(rng: &mut ChaCha8Rng, zh: bool, who: &str) -> String {
    let templates: &[&str] = if zh {
        &["答案是{}。", "是{}。", "我认为是{}。", "{}创立的。"]
    } else {
        &["It was {}.", "The answer is {}.", "I believe it was {}.", "{} founded it.", "{}."]
    };
    templates.choose(rng).expect("non-empty").replace("{}", who)
}

fn uncertainty_text(rng: &mut ChaCha8Rng, zh: bool) -> String {
    let templates: &[&str] = if zh {
        &["我不确定。", "我不知道答案。"]
    } else {
        &["I am not sure.", "I do not know the answer to that.", "I'm not certain who it was."]
    };
    templates.choose(rng).expect("non-empty").to_string()
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller.
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

pub fn generate(cfg: &SynthConfig) -> Result<Fixture, String> {
    cfg.validate()?;
    let mut rng = rng_for(cfg.seed, "synth/corpus");
    let n_known = (cfg.questions as f64 * cfg.known_fraction).round() as usize;
    let n_unknown = ((cfg.questions as f64 * cfg.unknown_fraction).round() as usize).min(cfg.questions - n_known);
    let mut states: Vec<QuestionCategory> = (0..cfg.questions)
        .map(|i| {
            if i < n_known {
                QuestionCategory::Known
            } else if i < n_known + n_unknown {
                QuestionCategory::Unknown
            } else {
                QuestionCategory::Mixed
            }
        })
        .collect();
    states.shuffle(&mut rng);

    let mut questions = Vec::with_capacity(cfg.questions);
    let mut generations = Vec::new();
    let mut gold = Vec::new();
    let mut categories = Vec::with_capacity(cfg.questions);
    for (i, &state) in states.iter().enumerate() {
        let zh = rng.gen::<f64>() < cfg.zh_fraction;
        let id = format!("q{i:04}");
        let subject = if zh { name(&mut rng, true) } else { word(&mut rng, 3) };
        let answer = name(&mut rng, zh);
        let text = if zh {
            format!("谁创立了{subject}？")
        } else {
            format!("Who founded {subject}?")
        };
        let correct: Vec<bool> = match state {
            QuestionCategory::Known => vec![true; cfg.k],
            QuestionCategory::Unknown => vec![false; cfg.k],
            QuestionCategory::Mixed => {
                let n_right = rng.gen_range(1..cfg.k);
                let mut v: Vec<bool> = (0..cfg.k).map(|j| j < n_right).collect();
                v.shuffle(&mut rng);
                v
            }
        };
        for (j, &ok) in correct.iter().enumerate() {
            let who = if ok {
                answer.clone()
            } else {
                loop {
                    let w = name(&mut rng, zh);
                    if w != answer {
                        break w;
                    }
                }
            };
            generations.push(Generation {
                question_id: id.clone(),
                mode: GenMode::Normal,
                index: j,
                text: answer_text(&mut rng, zh, &who),
            });
            gold.push(GoldLabel {
                question_id: id.clone(),
                mode: GenMode::Normal,
                index: j,
                verdict: if ok { Verdict::Correct } else { Verdict::Incorrect },
            });
        }
        generations.push(Generation {
            question_id: id.clone(),
            mode: GenMode::Uncertainty,
            index: 0,
            text: uncertainty_text(&mut rng, zh),
        });
        questions.push(Question {
            id: id.clone(),
            text,
            language: if zh { "zh" } else { "en" }.into(),
            answer: Some(answer),
            qtype: Some("founder".into()),
        });
        categories.push((id, state));
    }

    let mut arng = rng_for(cfg.seed, "synth/activations");
    let mut direction: Vec<f64> = (0..cfg.hidden_size).map(|_| gaussian(&mut arng)).collect();
    let norm = direction.iter().map(|x| x * x).sum::<f64>().sqrt();
    direction.iter_mut().for_each(|x| *x /= norm);
    let mut writer = ActivationWriter::new("synthetic", cfg.num_layers, cfg.hidden_size, Site::ALL.to_vec());
    for (q, &state) in questions.iter().zip(&states) {
        let sign = match state {
            QuestionCategory::Known => 1.0,
            QuestionCategory::Unknown => -1.0,
            QuestionCategory::Mixed => 0.0,
        };
        for site in Site::ALL {
            for layer in 0..cfg.num_layers {
                let strength = if site == cfg.planted_site {
                    cfg.signal * cfg.neighbour_decay.powi(layer.abs_diff(cfg.planted_layer) as i32)
                } else {
                    0.0
                };
                let v: Vec<f32> = direction
                    .iter()
                    .map(|d| (gaussian(&mut arng) + sign * strength * d) as f32)
                    .collect();
                writer.push(&q.id, site, layer, &v).map_err(|e| e.to_string())?;
            }
        }
    }
    let (manifest, activation_bytes) = writer.finish().map_err(|e| e.to_string())?;
    Ok(Fixture {
        questions,
        generations,
        gold,
        manifest,
        activation_bytes,
        truth: SynthTruth {
            planted_site: cfg.planted_site,
            planted_layer: cfg.planted_layer,
            categories,
        },
    })
}

/// Pipeline config pointing at the files written by [`write_fixture`].
pub fn fixture_config(cfg: &SynthConfig) -> PipelineConfig {
    PipelineConfig {
        paths: Paths {
            gold: Some("gold.jsonl".into()),
            activations_manifest: Some("activations.manifest.json".into()),
            activations_bin: Some("activations.bin".into()),
            cache_dir: Some("cache".into()),
            ..Paths::default()
        },
        embedder: EmbedderConfig::hashed(128),
        k: cfg.k,
        ppo: PpoConfig::toy(),
        seed: cfg.seed,
        ..PipelineConfig::default()
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CorpusError> {
    let text = serde_json::to_string_pretty(value).expect("value serializes");
    fs::write(path, text + "\n").map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Writes questions, generations, gold labels, activations, `truth.json`
/// and `config.json` into `dir`.
pub fn write_fixture(dir: &Path, cfg: &SynthConfig) -> Result<Fixture, String> {
    let fx = generate(cfg)?;
    let run = || -> Result<(), CorpusError> {
        fs::create_dir_all(dir).map_err(|source| CorpusError::Io {
            path: dir.display().to_string(),
            source,
        })?;
        write_jsonl(&dir.join("questions.jsonl"), &fx.questions)?;
        write_jsonl(&dir.join("generations.jsonl"), &fx.generations)?;
        write_jsonl(&dir.join("gold.jsonl"), &fx.gold)?;
        write_json(&dir.join("activations.manifest.json"), &fx.manifest)?;
        let bin = dir.join("activations.bin");
        fs::write(&bin, &fx.activation_bytes).map_err(|source| CorpusError::Io {
            path: bin.display().to_string(),
            source,
        })?;
        write_json(&dir.join("truth.json"), &fx.truth)?;
        write_json(&dir.join("config.json"), &fixture_config(cfg))
    };
    run().map_err(|e| e.to_string())?;
    Ok(fx)
}
