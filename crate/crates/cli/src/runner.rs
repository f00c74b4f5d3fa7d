//! `prepare` and `run`: the split, the manifest, and the resumable ledger.

use std::collections::{BTreeMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc;

use anyhow::{anyhow, bail, Context};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tracing::{info, warn};

use coo_core::dataset::{load_dataset, read_dataset, sample_evaluation_split, write_dataset};
use coo_core::model::{AttributeSchema, OpinionQuestion, UserRecord};
use coo_core::pipeline::{Pipeline, PipelineConfig, QuestionResult};
use coo_core::provider::{
    HashingEmbedder, HttpBackend, JsonlStore, Provider, ProviderError, ProviderMode, ProviderStats,
    ScriptedOracle, UsageRecord,
};
use coo_core::reasoning::AnswerExtractor;
use coo_core::templates;

use crate::config::{BackendKind, RunConfig};

pub const VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));

/// File layout of one run directory.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }
    pub fn split(&self) -> PathBuf {
        self.root.join("split.jsonl")
    }
    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.json")
    }
    pub fn ledger(&self) -> PathBuf {
        self.root.join("ledger.jsonl")
    }
    pub fn results(&self) -> PathBuf {
        self.root.join("results.jsonl")
    }
    pub fn predictions(&self) -> PathBuf {
        self.root.join("predictions.csv")
    }
    pub fn usage(&self) -> PathBuf {
        self.root.join("usage.jsonl")
    }
    pub fn failures(&self) -> PathBuf {
        self.root.join("failures.jsonl")
    }
    pub fn run_manifest(&self) -> PathBuf {
        self.root.join("run_manifest.json")
    }
    pub fn report(&self) -> PathBuf {
        self.root.join("report")
    }
    pub fn studies(&self) -> PathBuf {
        self.root.join("studies")
    }
}

pub fn sha256_file(path: &Path) -> anyhow::Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn sha256_json<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("config serializes");
    hex::encode(Sha256::digest(&bytes))
}

/// Written by `prepare`; pins the split and the templates a run may use.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub config: RunConfig,
    pub template_digests: BTreeMap<String, String>,
    pub split_sha256: String,
    pub users: usize,
    pub questions: usize,
    pub topics: usize,
    pub created_at: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrepareSummary {
    pub loaded_users: usize,
    pub users: usize,
    pub topics: usize,
    pub questions: usize,
    pub split_sha256: String,
}

pub fn template_digests() -> BTreeMap<String, String> {
    templates::digests().into_iter().collect()
}

/// Loads the corpus, draws the evaluation split and writes it with the
/// manifest into the run directory.
pub fn prepare(cfg: &RunConfig) -> anyhow::Result<PrepareSummary> {
    let schema = AttributeSchema::default();
    let users = load_dataset(&cfg.dataset, &schema)
        .with_context(|| format!("loading dataset {}", cfg.dataset.display()))?;
    let split = sample_evaluation_split(&users, &cfg.split_config())?;
    let dir = RunDir::new(&cfg.out);
    fs::create_dir_all(&dir.root)?;
    let mut w = BufWriter::new(File::create(dir.split())?);
    write_dataset(&split, &mut w)?;
    w.flush()?;
    drop(w);
    let topics: HashSet<&str> = split.iter().map(|u| u.topic.as_str()).collect();
    let summary = PrepareSummary {
        loaded_users: users.len(),
        users: split.len(),
        topics: topics.len(),
        questions: split.iter().map(|u| u.tests.len()).sum(),
        split_sha256: sha256_file(&dir.split())?,
    };
    let manifest = Manifest {
        version: VERSION.to_string(),
        config: cfg.clone(),
        template_digests: template_digests(),
        split_sha256: summary.split_sha256.clone(),
        users: summary.users,
        questions: summary.questions,
        topics: summary.topics,
        created_at: chrono::Utc::now().to_rfc3339(),
    };
    fs::write(dir.manifest(), serde_json::to_string_pretty(&manifest)? + "\n")?;
    info!(users = summary.users, questions = summary.questions, "split written");
    Ok(summary)
}

/// Reads the manifest and split, checking that neither the split file nor
/// the templates changed since `prepare`.
pub fn load_prepared(dir: &RunDir) -> anyhow::Result<(Manifest, Vec<UserRecord>)> {
    let text = fs::read_to_string(dir.manifest())
        .with_context(|| format!("no manifest in {}; run `prepare` first", dir.root.display()))?;
    let manifest: Manifest = serde_json::from_str(&text).context("malformed manifest")?;
    let digest = sha256_file(&dir.split())?;
    if digest != manifest.split_sha256 {
        bail!("split file digest {digest} does not match the manifest");
    }
    if manifest.template_digests != template_digests() {
        bail!("prompt templates changed since the split was prepared");
    }
    let users = read_dataset(BufReader::new(File::open(dir.split())?), &AttributeSchema::default())?;
    Ok((manifest, users))
}

/// Builds the provider for `cfg`. Fails before any call on misconfiguration.
pub fn build_provider(cfg: &RunConfig) -> anyhow::Result<Provider> {
    let mode = cfg.provider.mode;
    let cache_path = cfg.cache_path();
    let builder = Provider::builder(mode);
    let builder = match mode {
        ProviderMode::Live => builder,
        ProviderMode::StrictReplay => {
            if !cache_path.exists() {
                return Err(ProviderError::ReplayMiss {
                    key: format!("(cache {} does not exist)", cache_path.display()),
                }
                .into());
            }
            builder
                .cache(JsonlStore::open(&cache_path)?)
                .embed_cache(JsonlStore::open(cfg.embed_cache_path())?)
        }
        ProviderMode::Record | ProviderMode::Scripted => builder
            .cache(JsonlStore::open(&cache_path)?)
            .embed_cache(JsonlStore::open(cfg.embed_cache_path())?),
    };
    let builder = match (mode, cfg.provider.effective_backend()) {
        (_, BackendKind::Scripted) => builder
            .generator(ScriptedOracle::new(cfg.provider.scripted_answer))
            .embedder(HashingEmbedder::default()),
        // Replay never reaches the network, but embedding keys carry the
        // embedder's model id.
        (ProviderMode::StrictReplay, BackendKind::Http) => {
            builder.embedder(HttpBackend::with_key(cfg.provider.http(), String::new()))
        }
        (_, BackendKind::Http) => {
            let http = std::sync::Arc::new(HttpBackend::from_env(cfg.provider.http())?);
            builder.shared_generator(http.clone()).shared_embedder(http)
        }
    };
    let provider = builder.build()?;
    if provider.corrupt_cache_lines() > 0 {
        warn!(lines = provider.corrupt_cache_lines(), "skipped corrupt cache lines");
    }
    Ok(provider)
}

/// One completed question in the ledger.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub config_digest: String,
    pub result: QuestionResult,
    pub usage: Vec<UsageRecord>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Failure {
    pub question_id: String,
    pub error: String,
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Stop after this many pending questions; used to simulate an
    /// interrupted run.
    pub limit: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub total: usize,
    pub skipped: usize,
    pub completed: usize,
    pub failed: usize,
    pub generation_calls: u64,
    pub backend_calls: u64,
    pub cache_hits: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RunManifest {
    version: String,
    config: RunConfig,
    config_digest: String,
    template_digests: BTreeMap<String, String>,
    started_at: String,
    finished_at: String,
    summary: RunSummary,
    stats: ProviderStats,
}

pub fn config_digest(p: &PipelineConfig) -> String {
    sha256_json(p)
}

/// Ledger entries, skipping a torn final line from an interrupted write.
pub fn read_ledger(path: &Path) -> anyhow::Result<Vec<LedgerEntry>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut entries = Vec::new();
    for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(&line) {
            Ok(e) => entries.push(e),
            Err(e) => warn!(line = i + 1, error = %e, "skipping unreadable ledger line"),
        }
    }
    Ok(entries)
}

enum Event {
    Done(Box<LedgerEntry>),
    Failed(Failure),
}

fn append_line(file: &mut Option<File>, path: &Path, line: &str) -> std::io::Result<()> {
    if file.is_none() {
        *file = Some(OpenOptions::new().create(true).append(true).open(path)?);
    }
    let f = file.as_mut().expect("opened above");
    f.write_all(line.as_bytes())?;
    f.write_all(b"\n")?;
    f.flush()
}

pub fn run(cfg: &RunConfig, opts: &RunOptions) -> anyhow::Result<RunSummary> {
    let provider = build_provider(cfg)?;
    run_with_provider(cfg, &provider, opts)
}

/// Answers every pending test question of the prepared split.
pub fn run_with_provider(cfg: &RunConfig, provider: &Provider, opts: &RunOptions) -> anyhow::Result<RunSummary> {
    cfg.validate()?;
    let started_at = chrono::Utc::now().to_rfc3339();
    let dir = RunDir::new(&cfg.out);
    let (_, users) = load_prepared(&dir)?;
    let pipeline_cfg = cfg.pipeline();
    let digest = config_digest(&pipeline_cfg);

    let ledger = read_ledger(&dir.ledger())?;
    if let Some(e) = ledger.iter().find(|e| e.config_digest != digest) {
        bail!(
            "ledger entry {} was produced by a different configuration; use a fresh output directory",
            e.result.question.question_id
        );
    }
    let done: HashSet<String> = ledger.iter().map(|e| e.result.question.question_id.clone()).collect();
    let mut all: Vec<(&UserRecord, &OpinionQuestion)> =
        users.iter().flat_map(|u| u.tests.iter().map(move |q| (u, q))).collect();
    all.sort_by(|a, b| a.1.question_id.cmp(&b.1.question_id));
    let total = all.len();
    let mut todo: Vec<_> = all.into_iter().filter(|(_, q)| !done.contains(&q.question_id)).collect();
    if let Some(limit) = opts.limit {
        todo.truncate(limit);
    }
    info!(total, pending = todo.len(), "starting run");

    let schema = AttributeSchema::default();
    let extractor = AnswerExtractor::default();
    let pipeline = Pipeline {
        provider,
        schema: &schema,
        extractor: &extractor,
        config: &pipeline_cfg,
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.parallelism)
        .build()
        .context("building worker pool")?;
    let (tx, rx) = mpsc::channel::<Event>();
    let ledger_path = dir.ledger();
    let (outcome, written) = std::thread::scope(|s| {
        // Single writer: every ledger append goes through this thread.
        let writer = s.spawn(move || -> anyhow::Result<(usize, Vec<Failure>)> {
            let mut file = None;
            let mut completed = 0;
            let mut failures = Vec::new();
            for event in rx {
                match event {
                    Event::Done(entry) => {
                        append_line(&mut file, &ledger_path, &serde_json::to_string(&entry)?)?;
                        completed += 1;
                    }
                    Event::Failed(f) => failures.push(f),
                }
            }
            Ok((completed, failures))
        });
        let outcome = pool.install(|| {
            todo.par_iter().try_for_each_with(tx, |tx, (user, q)| {
                match pipeline.run_question(user, q) {
                    Ok(result) => {
                        let usage = provider.drain_usage(&q.question_id);
                        let entry = LedgerEntry { config_digest: digest.clone(), result, usage };
                        let _ = tx.send(Event::Done(Box::new(entry)));
                        Ok(())
                    }
                    Err(e) if e.is_replay_miss() => Err(anyhow::Error::new(e).context(format!("question {}", q.question_id))),
                    Err(e) => {
                        provider.drain_usage(&q.question_id);
                        warn!(question = %q.question_id, error = %e, "question failed");
                        let _ = tx.send(Event::Failed(Failure { question_id: q.question_id.clone(), error: e.to_string() }));
                        Ok(())
                    }
                }
            })
        });
        let written = writer.join().map_err(|_| anyhow!("ledger writer panicked"));
        (outcome, written)
    });
    let (completed, mut failures) = written??;
    outcome?;

    failures.sort_by(|a, b| a.question_id.cmp(&b.question_id));
    let stats = provider.stats();
    let summary = RunSummary {
        total,
        skipped: done.len(),
        completed,
        failed: failures.len(),
        generation_calls: stats.generation_calls,
        backend_calls: stats.backend_calls,
        cache_hits: stats.cache_hits,
    };
    finalize(&dir, &failures)?;
    let run_manifest = RunManifest {
        version: VERSION.to_string(),
        config: cfg.clone(),
        config_digest: digest,
        template_digests: template_digests(),
        started_at,
        finished_at: chrono::Utc::now().to_rfc3339(),
        summary: summary.clone(),
        stats,
    };
    fs::write(dir.run_manifest(), serde_json::to_string_pretty(&run_manifest)? + "\n")?;
    Ok(summary)
}

/// Rewrites the ordered outputs from the ledger.
fn finalize(dir: &RunDir, failures: &[Failure]) -> anyhow::Result<()> {
    let mut entries = read_ledger(&dir.ledger())?;
    entries.sort_by(|a, b| a.result.question.question_id.cmp(&b.result.question.question_id));
    entries.dedup_by(|a, b| a.result.question.question_id == b.result.question.question_id);

    let mut results = BufWriter::new(File::create(dir.results())?);
    let mut usage = BufWriter::new(File::create(dir.usage())?);
    let mut preds = csv::Writer::from_path(dir.predictions())?;
    preds.write_record(["question_id", "user_id", "topic", "method", "final", "gold", "correct", "winning_k"])?;
    for e in &entries {
        let r = &e.result;
        serde_json::to_writer(&mut results, r)?;
        results.write_all(b"\n")?;
        for u in &e.usage {
            serde_json::to_writer(&mut usage, u)?;
            usage.write_all(b"\n")?;
        }
        let gold = r.question.gold_index;
        preds.write_record([
            r.question.question_id.clone(),
            r.user_id.clone(),
            r.topic.clone(),
            r.method.name().to_string(),
            r.prediction.final_answer.label(),
            coo_core::model::letter_of(gold).map(String::from).unwrap_or_default(),
            u8::from(r.prediction.final_answer.choice_index() == Some(gold)).to_string(),
            r.winning_k.map(|k| k.to_string()).unwrap_or_default(),
        ])?;
    }
    results.flush()?;
    usage.flush()?;
    preds.flush()?;
    if failures.is_empty() {
        if dir.failures().exists() {
            fs::remove_file(dir.failures())?;
        }
    } else {
        let mut f = BufWriter::new(File::create(dir.failures())?);
        for fail in failures {
            serde_json::to_writer(&mut f, fail)?;
            f.write_all(b"\n")?;
        }
        f.flush()?;
    }
    Ok(())
}

/// Completed results of a run directory, ordered by question id.
pub fn load_results(dir: &RunDir) -> anyhow::Result<Vec<QuestionResult>> {
    let path = dir.results();
    let file = File::open(&path).with_context(|| format!("no results in {}; run `run` first", dir.root.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).with_context(|| format!("{} line {}", path.display(), i + 1))?);
    }
    Ok(out)
}
