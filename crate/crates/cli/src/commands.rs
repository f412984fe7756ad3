use crate::{Cli, Command, ConfigArg, EXIT_INVALID, EXIT_IO, EXIT_OK};
use dreamcatcher_core::config::{load_config, ConfigError, PipelineConfig};
use dreamcatcher_core::corpus::{
    load_activations, load_generations, load_gold, load_questions, read_generations, validate_corpus, write_jsonl,
    ActivationStore, CorpusError, GenMode, Generation, GoldLabel, Question,
};
use dreamcatcher_core::embedder::{EmbedError, Embedder, Embedding};
use dreamcatcher_core::labeling::{evaluate_agreement, run_labeling, CategoryReport, LabelError, PreferencePair};
use dreamcatcher_core::probes::{
    build_probe_dataset, eval_probe_grid, group_by_question, prelabel_generations, probe_score, train_probe,
    ProbeDataset, ProbeError, ProbeModel,
};
use dreamcatcher_core::reward::{
    build_general_features, build_pair_features, eval_reward_model, train_reward_model, GeneralPair, RewardError,
    RewardModel, RmEvalReport,
};
use dreamcatcher_core::rlkf::{curve_csv, train_rlkf, train_toy_reward, PolicyEval, RlkfError, ToyEnv};
use dreamcatcher_core::scorers::{
    aggregate_scorecards, fit_normalizer, score_question, QuestionInputs, RawScores, ScoreCard, ScoreError, Scorer,
};
use dreamcatcher_core::seed::unit_hash;
use dreamcatcher_core::synth::{write_fixture, SynthConfig};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Io(String),
    /// The inputs were read but a stage rejected them.
    #[error("{0}")]
    Invalid(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Io(_) => EXIT_IO,
            CliError::Invalid(_) => EXIT_INVALID,
        }
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        match e {
            CorpusError::Io { .. } => CliError::Io(e.to_string()),
            other => CliError::Invalid(other.to_string()),
        }
    }
}

impl From<EmbedError> for CliError {
    fn from(e: EmbedError) -> Self {
        match e {
            EmbedError::Transport { .. } | EmbedError::Cache { .. } => CliError::Io(e.to_string()),
            EmbedError::Config(_) => CliError::Io(e.to_string()),
            other => CliError::Invalid(other.to_string()),
        }
    }
}

impl From<RewardError> for CliError {
    fn from(e: RewardError) -> Self {
        match e {
            RewardError::Embed(inner) => inner.into(),
            other => CliError::Invalid(other.to_string()),
        }
    }
}

impl From<RlkfError> for CliError {
    fn from(e: RlkfError) -> Self {
        match e {
            RlkfError::Reward(inner) => inner.into(),
            other => CliError::Invalid(other.to_string()),
        }
    }
}

macro_rules! invalid_from {
    ($($t:ty),*) => {
        $(impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Invalid(e.to_string())
            }
        })*
    };
}

invalid_from!(ProbeError, LabelError, ScoreError);

type Result<T> = std::result::Result<T, CliError>;

pub fn dispatch(cli: &Cli) -> Result<i32> {
    if let Command::Synth { out, questions } = &cli.command {
        return synth(out, *questions, cli.seed.unwrap_or(0));
    }
    let arg = match &cli.command {
        Command::Validate(a)
        | Command::Embed(a)
        | Command::ProbeTrain(a)
        | Command::ProbeEval(a)
        | Command::Score(a)
        | Command::Label(a)
        | Command::RmTrain(a)
        | Command::RmEval(a)
        | Command::Ppo(a)
        | Command::Report(a) => a,
        Command::Synth { .. } => unreachable!("handled above"),
    };
    let ctx = Ctx::load(arg, cli.seed)?;
    match &cli.command {
        Command::Validate(_) => validate(&ctx),
        Command::Embed(_) => embed(&ctx),
        Command::ProbeTrain(_) => probe_train(&ctx),
        Command::ProbeEval(_) => probe_eval(&ctx),
        Command::Score(_) => score(&ctx),
        Command::Label(_) => label(&ctx),
        Command::RmTrain(_) => rm_train(&ctx),
        Command::RmEval(_) => rm_eval(&ctx),
        Command::Ppo(_) => ppo(&ctx),
        Command::Report(_) => report(&ctx),
        Command::Synth { .. } => unreachable!("handled above"),
    }
}

struct Ctx {
    cfg: PipelineConfig,
    out: PathBuf,
}

fn require(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Io(format!("{what} not found: {}", path.display())))
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

impl Ctx {
    fn load(arg: &ConfigArg, seed: Option<u64>) -> Result<Self> {
        let mut cfg = load_config(&arg.config)?;
        if let Some(s) = seed {
            cfg.seed = s;
        }
        let p = &cfg.paths;
        require(&p.questions, "questions file")?;
        require(&p.generations, "generations file")?;
        for (path, what) in [
            (&p.gold, "gold file"),
            (&p.activations_manifest, "activation manifest"),
            (&p.activations_bin, "activation file"),
            (&p.general_pairs, "general pairs file"),
        ] {
            if let Some(path) = path {
                require(path, what)?;
            }
        }
        let out = cfg.paths.output_dir.clone();
        fs::create_dir_all(&out).map_err(|e| io_err(&out, e))?;
        Ok(Self { cfg, out })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn questions(&self) -> Result<Vec<Question>> {
        Ok(load_questions(&self.cfg.paths.questions)?)
    }

    fn generations(&self) -> Result<Vec<Generation>> {
        Ok(load_generations(&self.cfg.paths.generations, self.cfg.k)?)
    }

    fn gold(&self) -> Result<Option<Vec<GoldLabel>>> {
        self.cfg.paths.gold.as_deref().map(load_gold).transpose().map_err(Into::into)
    }

    fn activations(&self) -> Result<Option<ActivationStore>> {
        match (&self.cfg.paths.activations_manifest, &self.cfg.paths.activations_bin) {
            (Some(m), Some(b)) => Ok(Some(load_activations(m, b)?)),
            _ => Ok(None),
        }
    }

    fn require_activations(&self) -> Result<ActivationStore> {
        self.activations()?
            .ok_or_else(|| CliError::Io("config sets no `paths.activations_manifest`".into()))
    }

    fn embedder(&self) -> Result<Embedder> {
        Ok(Embedder::new(self.cfg.embedder_config())?)
    }

    fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<PathBuf> {
        let path = self.path(name);
        let text = serde_json::to_string_pretty(value).expect("report serializes");
        fs::write(&path, text + "\n").map_err(|e| io_err(&path, e))?;
        Ok(path)
    }

    fn write_text(&self, name: &str, text: &str) -> Result<PathBuf> {
        let path = self.path(name);
        fs::write(&path, text).map_err(|e| io_err(&path, e))?;
        Ok(path)
    }

    fn write_jsonl<T: Serialize>(&self, name: &str, items: &[T]) -> Result<PathBuf> {
        let path = self.path(name);
        write_jsonl(&path, items)?;
        Ok(path)
    }

    fn read_json<T: DeserializeOwned>(&self, name: &str, produced_by: &str) -> Result<T> {
        let path = self.path(name);
        let text = fs::read_to_string(&path)
            .map_err(|e| CliError::Io(format!("{}: {e} (run `{produced_by}` first)", path.display())))?;
        serde_json::from_str(&text).map_err(|e| io_err(&path, e))
    }

    fn read_jsonl<T: DeserializeOwned>(&self, name: &str, produced_by: &str) -> Result<Vec<T>> {
        let path = self.path(name);
        let text = fs::read_to_string(&path)
            .map_err(|e| CliError::Io(format!("{}: {e} (run `{produced_by}` first)", path.display())))?;
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .enumerate()
            .map(|(i, l)| serde_json::from_str(l).map_err(|e| io_err(&path, format!("line {}: {e}", i + 1))))
            .collect()
    }
}

fn synth(out: &Path, questions: Option<usize>, seed: u64) -> Result<i32> {
    let mut cfg = SynthConfig {
        seed,
        ..SynthConfig::default()
    };
    if let Some(n) = questions {
        cfg.questions = n;
    }
    let fx = write_fixture(out, &cfg).map_err(CliError::Io)?;
    println!(
        "wrote {} questions, {} generations to {}",
        fx.questions.len(),
        fx.generations.len(),
        out.display()
    );
    Ok(EXIT_OK)
}

fn validate(ctx: &Ctx) -> Result<i32> {
    let questions = ctx.questions()?;
    let generations = read_generations(&ctx.cfg.paths.generations)?;
    let gold = ctx.gold()?;
    let store = ctx.activations()?;
    let report = validate_corpus(&questions, &generations, store.as_ref(), gold.as_deref(), ctx.cfg.k);
    let path = ctx.write_json("validation.json", &report)?;
    println!("{} findings; report at {}", report.findings.len(), path.display());
    Ok(if report.is_empty() { EXIT_OK } else { EXIT_INVALID })
}

/// Every text the scorers embed: answers and Normal generations.
fn scoring_texts(questions: &[Question], generations: &[Generation]) -> Vec<String> {
    let set: BTreeSet<&str> = questions
        .iter()
        .filter_map(|q| q.answer.as_deref())
        .chain(generations.iter().filter(|g| g.mode == GenMode::Normal).map(|g| g.text.as_str()))
        .collect();
    set.into_iter().map(String::from).collect()
}

fn embed_map(embedder: &Embedder, texts: Vec<String>) -> Result<HashMap<String, Embedding>> {
    let embs = embedder.embed_texts(&texts)?;
    Ok(texts.into_iter().zip(embs).collect())
}

#[derive(Serialize)]
struct EmbedSummary {
    backend: String,
    dim: usize,
    texts: usize,
    service_requests: usize,
}

fn embed(ctx: &Ctx) -> Result<i32> {
    let questions = ctx.questions()?;
    let generations = ctx.generations()?;
    let mut texts: BTreeSet<String> = scoring_texts(&questions, &generations).into_iter().collect();
    texts.extend(questions.iter().map(|q| q.text.clone()));
    texts.extend(generations.iter().map(|g| g.text.clone()));
    let texts: Vec<String> = texts.into_iter().collect();
    let embedder = ctx.embedder()?;
    let embs = embedder.embed_texts(&texts)?;
    let summary = EmbedSummary {
        backend: embedder.backend_id().to_string(),
        dim: embs.first().map_or(0, Embedding::dim),
        texts: texts.len(),
        service_requests: embedder.requests_made(),
    };
    ctx.write_json("embed.json", &summary)?;
    println!("embedded {} texts with {}", summary.texts, summary.backend);
    Ok(EXIT_OK)
}

/// Raw scores for every Normal generation, in corpus order.
fn raw_scores(
    questions: &[Question],
    generations: &[Generation],
    embedder: &Embedder,
    probe: Option<(&ProbeModel, &ActivationStore)>,
) -> Result<Vec<RawScores>> {
    let embs = embed_map(embedder, scoring_texts(questions, generations))?;
    let mut by_question: HashMap<&str, Vec<&Generation>> = HashMap::new();
    for g in generations.iter().filter(|g| g.mode == GenMode::Normal) {
        by_question.entry(g.question_id.as_str()).or_default().push(g);
    }
    let mut rows = Vec::new();
    for q in questions {
        let Some(gens) = by_question.get_mut(q.id.as_str()) else {
            continue;
        };
        gens.sort_by_key(|g| g.index);
        let s_p = match probe {
            Some((model, store)) => Some(probe_score(model, store.get(&q.id, model.site, model.layer)?)?),
            None => None,
        };
        let inputs = QuestionInputs {
            question_id: &q.id,
            language: &q.language,
            answer: q.answer.as_deref(),
            answer_embedding: q.answer.as_deref().map(|a| &embs[a]),
            generations: gens.iter().map(|g| (g.index, g.text.as_str(), &embs[g.text.as_str()])).collect(),
            probe: s_p,
        };
        rows.extend(score_question(&inputs)?);
    }
    Ok(rows)
}

struct Prelabeled {
    cards: Vec<ScoreCard>,
    upper: f64,
    lower: f64,
    groups: Vec<(String, Vec<dreamcatcher_core::probes::PrelabelVerdict>)>,
}

fn prelabel(ctx: &Ctx, questions: &[Question], generations: &[Generation]) -> Result<Prelabeled> {
    let embedder = ctx.embedder()?;
    let rows = raw_scores(questions, generations, &embedder, None)?;
    let spec = fit_normalizer(&rows);
    let cards = aggregate_scorecards(&rows, &spec, &ctx.cfg.prelabel.scorers)?;
    let pre = prelabel_generations(&cards, &ctx.cfg.prelabel)?;
    let groups = group_by_question(&cards, &pre.verdicts);
    Ok(Prelabeled {
        upper: pre.upper_threshold,
        lower: pre.lower_threshold,
        cards,
        groups,
    })
}

fn datasets(ctx: &Ctx, pre: &Prelabeled, store: &ActivationStore) -> Result<Vec<ProbeDataset>> {
    let mut out = Vec::new();
    for &site in store.sites() {
        for layer in store.layers() {
            out.push(build_probe_dataset(&pre.groups, store, site, layer, ctx.cfg.k)?);
        }
    }
    Ok(out)
}

#[derive(Serialize)]
struct ProbeTrainSummary {
    upper_threshold: f64,
    lower_threshold: f64,
    generations: usize,
    known: usize,
    unknown: usize,
    seeds: Vec<u64>,
    best_site: String,
    best_layer: usize,
    best_mean_accuracy: f64,
    model_val_accuracy: Option<f64>,
}

fn probe_train(ctx: &Ctx) -> Result<i32> {
    let questions = ctx.questions()?;
    let generations = ctx.generations()?;
    let store = ctx.require_activations()?;
    let pre = prelabel(ctx, &questions, &generations)?;
    let sets = datasets(ctx, &pre, &store)?;
    let seeds = ctx.cfg.probe_grid_seeds();
    let hyper = ctx.cfg.probe_hyper();
    let grid = eval_probe_grid(&sets, &hyper, &seeds)?;
    ctx.write_text("probe_grid.csv", &grid.to_csv())?;
    let best = grid.best().ok_or_else(|| CliError::Invalid("activation store has no cells".into()))?;
    let ds = sets
        .iter()
        .find(|d| d.site == best.site && d.layer == best.layer)
        .expect("best cell comes from the datasets");
    let (model, _) = train_probe(
        ds,
        &dreamcatcher_core::probes::ProbeHyper {
            seed: seeds[0],
            ..hyper
        },
    )?;
    ctx.write_json("probe_model.json", &model)?;
    let count = |l| ds.rows.iter().filter(|r| r.label == l).count();
    let summary = ProbeTrainSummary {
        upper_threshold: pre.upper,
        lower_threshold: pre.lower,
        generations: pre.cards.len(),
        known: count(dreamcatcher_core::probes::KnowledgeLabel::Known),
        unknown: count(dreamcatcher_core::probes::KnowledgeLabel::Unknown),
        seeds,
        best_site: best.site.to_string(),
        best_layer: best.layer,
        best_mean_accuracy: best.mean,
        model_val_accuracy: model.val_accuracy,
    };
    ctx.write_json("probe_train.json", &summary)?;
    println!(
        "best probe at {}/{}: mean held-out accuracy {:.3}",
        summary.best_site, summary.best_layer, summary.best_mean_accuracy
    );
    Ok(EXIT_OK)
}

#[derive(Serialize, Deserialize)]
struct ProbeScoreLine {
    question_id: String,
    s_p: f64,
}

#[derive(Serialize)]
struct ProbeEvalSummary {
    site: String,
    layer: usize,
    rows: usize,
    accuracy: f64,
}

fn probe_eval(ctx: &Ctx) -> Result<i32> {
    let model: ProbeModel = ctx.read_json("probe_model.json", "probe-train")?;
    let questions = ctx.questions()?;
    let generations = ctx.generations()?;
    let store = ctx.require_activations()?;
    let pre = prelabel(ctx, &questions, &generations)?;
    let ds = build_probe_dataset(&pre.groups, &store, model.site, model.layer, ctx.cfg.k)?;
    let mut correct = 0;
    for row in &ds.rows {
        if model.predict(&row.features)? == row.label {
            correct += 1;
        }
    }
    let summary = ProbeEvalSummary {
        site: model.site.to_string(),
        layer: model.layer,
        rows: ds.rows.len(),
        accuracy: if ds.rows.is_empty() { 0.0 } else { correct as f64 / ds.rows.len() as f64 },
    };
    let scores = questions
        .iter()
        .map(|q| {
            Ok(ProbeScoreLine {
                question_id: q.id.clone(),
                s_p: probe_score(&model, store.get(&q.id, model.site, model.layer)?)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    ctx.write_jsonl("probe_scores.jsonl", &scores)?;
    ctx.write_json("probe_eval.json", &summary)?;
    println!("probe accuracy on {} labeled questions: {:.3}", summary.rows, summary.accuracy);
    Ok(EXIT_OK)
}

fn score(ctx: &Ctx) -> Result<i32> {
    let questions = ctx.questions()?;
    let generations = ctx.generations()?;
    let mut enabled = ctx.cfg.scorers.clone();
    let probe_path = ctx.path("probe_model.json");
    let probe = if enabled.contains(&Scorer::Probe) && probe_path.exists() {
        let model: ProbeModel = ctx.read_json("probe_model.json", "probe-train")?;
        Some((model, ctx.require_activations()?))
    } else {
        if enabled.remove(&Scorer::Probe) {
            log::warn!("no probe model in the output directory; scoring without s_p");
        }
        None
    };
    let embedder = ctx.embedder()?;
    let rows = raw_scores(&questions, &generations, &embedder, probe.as_ref().map(|(m, s)| (m, s)))?;
    let spec = fit_normalizer(&rows);
    let cards = aggregate_scorecards(&rows, &spec, &enabled)?;
    ctx.write_json("normalization.json", &spec)?;
    ctx.write_jsonl("scores.jsonl", &cards)?;
    let names: Vec<String> = enabled.iter().map(ToString::to_string).collect();
    println!("scored {} generations with {}", cards.len(), names.join("+"));
    Ok(EXIT_OK)
}

fn label(ctx: &Ctx) -> Result<i32> {
    let questions = ctx.questions()?;
    let generations = ctx.generations()?;
    let cards: Vec<ScoreCard> = ctx.read_jsonl("scores.jsonl", "score")?;
    let out = run_labeling(&questions, &generations, &cards, ctx.cfg.k, ctx.cfg.pair_mode)?;
    ctx.write_jsonl("labels.jsonl", &out.labels)?;
    #[derive(Serialize)]
    struct CategoryLine<'a> {
        question_id: &'a str,
        category: dreamcatcher_core::labeling::QuestionCategory,
    }
    let cats: Vec<CategoryLine> = out
        .categories
        .iter()
        .map(|(id, c)| CategoryLine {
            question_id: id,
            category: *c,
        })
        .collect();
    ctx.write_jsonl("categories.jsonl", &cats)?;
    ctx.write_jsonl("pairs.jsonl", &out.pairs)?;
    ctx.write_jsonl("skipped.jsonl", &out.skipped)?;
    ctx.write_json("report.json", &out.report)?;
    if let Some(gold) = ctx.gold()? {
        let language: HashMap<String, String> = questions.iter().map(|q| (q.id.clone(), q.language.clone())).collect();
        let agreement = evaluate_agreement(&out.predictions(), &gold, &language)?;
        ctx.write_json("agreement.json", &agreement)?;
        println!("agreement with gold: accuracy {:.3}", agreement.overall.accuracy);
    }
    let r = &out.report;
    println!(
        "{} questions: known {} / unknown {} / mixed {}; {} pairs, {} skipped",
        r.total, r.known.questions, r.unknown.questions, r.mixed.questions, r.total_pairs, r.skipped
    );
    Ok(EXIT_OK)
}

fn split_pairs(ctx: &Ctx, pairs: Vec<PreferencePair>) -> (Vec<PreferencePair>, Vec<PreferencePair>) {
    let seed = ctx.cfg.stage_seed("rm-split");
    pairs
        .into_iter()
        .partition(|p| unit_hash(seed, &p.question_id) >= ctx.cfg.rm_test_fraction)
}

fn question_texts(questions: &[Question]) -> HashMap<String, String> {
    questions.iter().map(|q| (q.id.clone(), q.text.clone())).collect()
}

#[derive(Serialize)]
struct RmTrainSummary {
    train_pairs: usize,
    test_pairs: usize,
    general_pairs: usize,
    steps: usize,
    final_loss: Option<f64>,
    train_accuracy: Option<f64>,
}

fn rm_train(ctx: &Ctx) -> Result<i32> {
    let questions = ctx.questions()?;
    let pairs: Vec<PreferencePair> = ctx.read_jsonl("pairs.jsonl", "label")?;
    let (train, test) = split_pairs(ctx, pairs);
    let hyper = ctx.cfg.rm_hyper();
    let embedder = ctx.embedder()?;
    let texts = question_texts(&questions);
    let batch = build_pair_features(&train, &texts, &embedder, hyper.feature_map)?;
    let general = match &ctx.cfg.paths.general_pairs {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
            let pairs = text
                .lines()
                .filter(|l| !l.trim().is_empty())
                .map(serde_json::from_str)
                .collect::<std::result::Result<Vec<GeneralPair>, _>>()
                .map_err(|e| io_err(path, e))?;
            Some(build_general_features(&pairs, &embedder, hyper.feature_map)?)
        }
        None => None,
    };
    let (model, report) = train_reward_model(&batch, general.as_ref(), &hyper)?;
    ctx.write_json("reward_model.json", &model)?;
    ctx.write_jsonl("rm_test_pairs.jsonl", &test)?;
    let summary = RmTrainSummary {
        train_pairs: train.len(),
        test_pairs: test.len(),
        general_pairs: general.as_ref().map_or(0, |g| g.pairs.len()),
        steps: report.steps,
        final_loss: report.loss_curve.last().copied(),
        train_accuracy: report.train_accuracy,
    };
    ctx.write_json("rm_train.json", &summary)?;
    println!(
        "trained reward model on {} pairs ({} steps); train accuracy {:?}",
        summary.train_pairs, summary.steps, summary.train_accuracy
    );
    Ok(EXIT_OK)
}

fn rm_eval(ctx: &Ctx) -> Result<i32> {
    let questions = ctx.questions()?;
    let model: RewardModel = ctx.read_json("reward_model.json", "rm-train")?;
    let test: Vec<PreferencePair> = ctx.read_jsonl("rm_test_pairs.jsonl", "rm-train")?;
    let embedder = ctx.embedder()?;
    if embedder.backend_id() != model.feature_spec.embedder_id {
        return Err(CliError::Io(format!(
            "reward model was trained with embedder `{}` but the config uses `{}`",
            model.feature_spec.embedder_id,
            embedder.backend_id()
        )));
    }
    let report: RmEvalReport = if test.is_empty() {
        log::warn!("no held-out pairs; every category is absent");
        RmEvalReport {
            overall: None,
            per_category: BTreeMap::new(),
        }
    } else {
        let batch = build_pair_features(&test, &question_texts(&questions), &embedder, model.feature_spec.feature_map)?;
        eval_reward_model(&model, &batch)
    };
    ctx.write_json("rm_eval.json", &report)?;
    println!("reward model held-out accuracy {:?}", report.overall);
    Ok(EXIT_OK)
}

#[derive(Serialize)]
struct PpoSummary {
    episodes: usize,
    steps: usize,
    rm_train_accuracy: Option<f64>,
    steps_to_threshold: Option<usize>,
    factual_rate_known: f64,
    uncertainty_rate_unknown: f64,
    final_eval: PolicyEval,
}

fn ppo(ctx: &Ctx) -> Result<i32> {
    let env = ToyEnv::synthetic(&ctx.cfg.toy_env_config())?;
    let embedder = ctx.embedder()?;
    let (rm, rm_report) = train_toy_reward(&env, &embedder, &ctx.cfg.toy_rm_config())?;
    let cfg = ctx.cfg.ppo_config();
    let run = train_rlkf(&env, &rm, &cfg)?;
    ctx.write_json("toy_env.json", &env)?;
    ctx.write_json("toy_reward_model.json", rm.model())?;
    ctx.write_json("policy.json", &run.policy)?;
    ctx.write_text("ppo_curve.csv", &curve_csv(&run.curve))?;
    let summary = PpoSummary {
        episodes: cfg.episodes,
        steps: run.curve.len(),
        rm_train_accuracy: rm_report.train_accuracy,
        steps_to_threshold: run.steps_to_threshold,
        factual_rate_known: run.final_eval.factual_rate_known(),
        uncertainty_rate_unknown: run.final_eval.uncertainty_rate_unknown(),
        final_eval: run.final_eval,
    };
    ctx.write_json("ppo_eval.json", &summary)?;
    println!(
        "P(factual | known) {:.3}, P(uncertainty | unknown) {:.3}, threshold reached at step {:?}",
        summary.factual_rate_known, summary.uncertainty_rate_unknown, summary.steps_to_threshold
    );
    Ok(EXIT_OK)
}

/// Row of the preference-data statistics table.
#[derive(Debug, Serialize)]
struct PreferenceRow {
    total: usize,
    known_percent: f64,
    unknown_percent: f64,
    mixed_percent: f64,
    pairs: usize,
}

fn optional_json(ctx: &Ctx, name: &str) -> Result<Option<serde_json::Value>> {
    let path = ctx.path(name);
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    serde_json::from_str(&text).map(Some).map_err(|e| io_err(&path, e))
}

fn report(ctx: &Ctx) -> Result<i32> {
    let cats: CategoryReport = ctx.read_json("report.json", "label")?;
    let row = PreferenceRow {
        total: cats.total,
        known_percent: cats.known.percent,
        unknown_percent: cats.unknown.percent,
        mixed_percent: cats.mixed.percent,
        pairs: cats.total_pairs,
    };
    let mut summary = serde_json::Map::new();
    summary.insert("preference_data".into(), serde_json::to_value(&row).expect("row serializes"));
    for (key, file) in [
        ("agreement", "agreement.json"),
        ("probe", "probe_train.json"),
        ("reward_model", "rm_eval.json"),
        ("rlkf", "ppo_eval.json"),
    ] {
        if let Some(v) = optional_json(ctx, file)? {
            summary.insert(key.into(), v);
        }
    }
    ctx.write_json("summary.json", &summary)?;
    let table = format!(
        "| Total | Known | Unknown | Mixed |\n|---|---|---|---|\n| {} | {:.0}% | {:.0}% | {:.0}% |\n",
        row.total, row.known_percent, row.unknown_percent, row.mixed_percent
    );
    ctx.write_text("summary.md", &table)?;
    print!("{table}");
    Ok(EXIT_OK)
}
