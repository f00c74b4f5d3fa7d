//! Analysis studies over a prepared split.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use coo_core::experiments::{
    run_ranking_agreement_study, run_ranking_consistency_study, run_sensitivity_study,
    run_temperature_consistency_study, write_sensitivity_csv, write_summary_csv, write_temperature_csv,
    AgreementReport, PersonaKind, ReasoningStyle, RelevanceLabels, SensitivityCase, SensitivityReport,
    TemperatureRow,
};
use coo_core::model::{OpinionQuestion, UserRecord};
use coo_core::provider::{cost_report, CostLine, PriceTable, Provider, UsageRecord};
use coo_core::ranking::{write_overlap_csv, write_tau_csv};
use coo_core::reasoning::AnswerExtractor;

use crate::config::RunConfig;
use crate::runner::{load_prepared, RunDir};

fn cases(users: &[UserRecord], limit: Option<usize>) -> Vec<(&UserRecord, &OpinionQuestion)> {
    let mut all: Vec<_> = users.iter().flat_map(|u| u.tests.iter().map(move |q| (u, q))).collect();
    all.sort_by(|a, b| a.1.question_id.cmp(&b.1.question_id));
    if let Some(n) = limit {
        all.truncate(n);
    }
    all
}

fn studies_dir(cfg: &RunConfig) -> anyhow::Result<PathBuf> {
    let dir = RunDir::new(&cfg.out).studies();
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn create(path: PathBuf) -> anyhow::Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(&path).with_context(|| format!("creating {}", path.display()))?))
}

/// Prediction change under growing personae, from a relevance-label file.
pub fn sensitivity(
    cfg: &RunConfig,
    provider: &Provider,
    labels_path: &Path,
    kind: PersonaKind,
    samples: usize,
    limit: Option<usize>,
) -> anyhow::Result<SensitivityReport> {
    let (_, users) = load_prepared(&RunDir::new(&cfg.out))?;
    let labels = RelevanceLabels::read(BufReader::new(
        File::open(labels_path).with_context(|| format!("opening labels {}", labels_path.display()))?,
    ))?;
    let mut study_cases = Vec::new();
    for (user, q) in cases(&users, limit) {
        let n = match kind {
            PersonaKind::Explicit => user.explicit.len(),
            PersonaKind::Implicit => user.implicit.len(),
        };
        study_cases.push(SensitivityCase {
            user,
            question: q,
            labels: labels.for_items(&user.user_id, &q.question_id, kind, n)?,
            kind,
        });
    }
    let report = run_sensitivity_study(
        &study_cases,
        provider,
        &cfg.provider.settings(),
        &AnswerExtractor::default(),
        samples,
        cfg.seed,
    )?;
    let name = match kind {
        PersonaKind::Explicit => "sensitivity_explicit.csv",
        PersonaKind::Implicit => "sensitivity_implicit.csv",
    };
    write_sensitivity_csv(&report, create(studies_dir(cfg)?.join(name))?)?;
    Ok(report)
}

/// Kendall's tau between the model's usefulness ranking and the semantic
/// ranking, per question.
pub fn agreement(cfg: &RunConfig, provider: &Provider, limit: Option<usize>) -> anyhow::Result<AgreementReport> {
    let (_, users) = load_prepared(&RunDir::new(&cfg.out))?;
    let report = run_ranking_agreement_study(&cases(&users, limit), provider, &cfg.provider.settings(), cfg.seed)?;
    let dir = studies_dir(cfg)?;
    write_tau_csv(&report.per_question, create(dir.join("agreement_tau.csv"))?)?;
    write_summary_csv(report.summary.as_ref(), create(dir.join("agreement_summary.csv"))?)?;
    Ok(report)
}

/// Mean overlap coefficient of top-K sets across repeated rankings.
pub fn ranking_consistency(
    cfg: &RunConfig,
    provider: &Provider,
    runs: usize,
    k_max: usize,
    limit: Option<usize>,
) -> anyhow::Result<Vec<(usize, f64)>> {
    let (_, users) = load_prepared(&RunDir::new(&cfg.out))?;
    let rows = run_ranking_consistency_study(&cases(&users, limit), provider, &cfg.provider.settings(), cfg.seed, runs, k_max)?;
    write_overlap_csv(&rows, create(studies_dir(cfg)?.join("ranking_overlap.csv"))?)?;
    Ok(rows)
}

/// Agreement of five samples per question across temperatures.
pub fn temperature_consistency(
    cfg: &RunConfig,
    provider: &Provider,
    temperatures: &[f64],
    styles: &[ReasoningStyle],
    limit: Option<usize>,
) -> anyhow::Result<Vec<TemperatureRow>> {
    let (_, users) = load_prepared(&RunDir::new(&cfg.out))?;
    let rows = run_temperature_consistency_study(
        &cases(&users, limit),
        temperatures,
        styles,
        provider,
        &cfg.provider.settings(),
        &AnswerExtractor::default(),
    )?;
    write_temperature_csv(&rows, create(studies_dir(cfg)?.join("temperature_consistency.csv"))?)?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    pub model: String,
    #[serde(flatten)]
    pub line: CostLine,
}

/// Token and dollar totals from a run's usage log.
pub fn cost(cfg: &RunConfig, prices: Option<&Path>) -> anyhow::Result<Vec<CostRow>> {
    let dir = RunDir::new(&cfg.out);
    let Some(price_path) = prices.or(cfg.price_table.as_deref()) else {
        bail!("no price table given; set price_table or pass --prices");
    };
    let prices: PriceTable = serde_json::from_str(
        &fs::read_to_string(price_path).with_context(|| format!("reading {}", price_path.display()))?,
    )
    .context("malformed price table")?;
    let usage_path = dir.usage();
    let file = File::open(&usage_path).with_context(|| format!("no usage log at {}", usage_path.display()))?;
    let mut records: Vec<UsageRecord> = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if !line.trim().is_empty() {
            records.push(serde_json::from_str(&line).with_context(|| format!("usage line {}", i + 1))?);
        }
    }
    let rows: Vec<CostRow> = cost_report(&records, &prices)?
        .into_iter()
        .map(|(model, line)| CostRow { model, line })
        .collect();
    let mut w = csv::Writer::from_writer(create(studies_dir(cfg)?.join("cost.csv"))?);
    w.write_record(["model", "calls", "tokens", "questions", "avg_tokens_per_question", "usd", "estimated"])?;
    for r in &rows {
        w.write_record([
            r.model.clone(),
            r.line.total_calls.to_string(),
            r.line.total_tokens.to_string(),
            r.line.questions.to_string(),
            format!("{:.1}", r.line.avg_tokens_per_question),
            format!("{:.4}", r.line.total_usd),
            r.line.estimated.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(rows)
}
