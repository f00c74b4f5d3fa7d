//! `eval` and `export-finetune` over a finished run directory.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::Path;

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use tracing::warn;

use coo_core::consistency::{consistency_score, ita_rate, parse_failure_rate, write_dynamic_k_csv, CONSISTENCY_SAMPLES};
use coo_core::dataset::{export_finetune_records, FinetuneRecord};
use coo_core::eval::{
    collapsed_correctness, correctness, score, CollapseRule, score_by_topic, t_test, write_ita_csv, write_score_csv, ItaRow,
    ScoreRow, TTest, TTestKind,
};
use coo_core::fea::{removed_attribute_stats, write_removal_csv};
use coo_core::model::{AttributeSchema, ExplicitPersona, OpinionQuestion, Prediction};
use coo_core::pipeline::QuestionResult;

use crate::runner::{load_prepared, load_results, RunDir};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub other: String,
    pub kind: TTestKind,
    pub other_acc: f64,
    pub acc: TTest,
    pub cacc: TTest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub overall: ScoreRow,
    pub by_topic: Vec<ScoreRow>,
    pub ita: Vec<ItaRow>,
    /// Share of questions whose sampled answers all agree, for sampled
    /// methods.
    pub consistency: Option<f64>,
    pub compare: Option<Comparison>,
}

impl EvalReport {
    /// `Acc / CAcc` in percent, the shape of the main results table.
    pub fn headline(&self) -> String {
        format!("{:.2} / {:.2}", 100.0 * self.overall.acc, 100.0 * self.overall.cacc)
    }
}

struct LoadedRun {
    results: Vec<QuestionResult>,
    questions: HashMap<String, OpinionQuestion>,
    explicit: HashMap<String, ExplicitPersona>,
    model: String,
    method: String,
}

fn load_run(dir: &RunDir) -> anyhow::Result<LoadedRun> {
    let (manifest, users) = load_prepared(dir)?;
    let results = load_results(dir)?;
    if results.is_empty() {
        bail!("{} has no completed predictions", dir.root.display());
    }
    let explicit = users.iter().map(|u| (u.user_id.clone(), u.explicit.clone())).collect();
    // Golds come from the prepared split, not from the result records.
    let questions: HashMap<String, OpinionQuestion> = users
        .into_iter()
        .flat_map(|u| u.tests)
        .map(|q| (q.question_id.clone(), q))
        .collect();
    for r in &results {
        if !questions.contains_key(&r.question.question_id) {
            bail!("no gold answer for question {}", r.question.question_id);
        }
    }
    Ok(LoadedRun {
        method: results[0].method.name().to_string(),
        model: manifest.config.provider.model.clone(),
        results,
        questions,
        explicit,
    })
}

fn predictions(results: &[QuestionResult]) -> Vec<Prediction> {
    results.iter().map(|r| r.prediction.clone()).collect()
}

fn as_f64(v: Vec<bool>) -> Vec<f64> {
    v.into_iter().map(|b| f64::from(u8::from(b))).collect()
}

fn golds(questions: &HashMap<String, OpinionQuestion>) -> HashMap<String, usize> {
    questions.iter().map(|(id, q)| (id.clone(), q.gold_index)).collect()
}

/// Per-question 0/1 vectors for accuracy and collapsed accuracy, aligned on
/// `ids` when given.
fn indicator_vectors(run: &LoadedRun, ids: Option<&[String]>) -> anyhow::Result<(Vec<f64>, Vec<f64>)> {
    let mut preds = predictions(&run.results);
    if let Some(ids) = ids {
        let by_id: HashMap<&str, &Prediction> = preds.iter().map(|p| (p.question_id.as_str(), p)).collect();
        preds = ids
            .iter()
            .map(|id| by_id.get(id.as_str()).map(|p| (*p).clone()).with_context(|| format!("paired test: question {id} missing")))
            .collect::<anyhow::Result<_>>()?;
    }
    let g = golds(&run.questions);
    Ok((
        as_f64(correctness(&preds, &g)?),
        as_f64(collapsed_correctness(&preds, &g, &run.questions, &CollapseRule::default())?),
    ))
}

fn compare(a: &LoadedRun, other_dir: &Path, kind: TTestKind) -> anyhow::Result<Comparison> {
    let b = load_run(&RunDir::new(other_dir))?;
    let ids: Vec<String> = a.results.iter().map(|r| r.question.question_id.clone()).collect();
    let align = matches!(kind, TTestKind::Paired).then_some(ids.as_slice());
    let (acc_a, cacc_a) = indicator_vectors(a, None)?;
    let (acc_b, cacc_b) = indicator_vectors(&b, align)?;
    let other_acc = acc_b.iter().sum::<f64>() / acc_b.len() as f64;
    Ok(Comparison {
        other: other_dir.display().to_string(),
        kind,
        other_acc,
        acc: t_test(kind, &acc_a, &acc_b)?,
        cacc: t_test(kind, &cacc_a, &cacc_b)?,
    })
}

/// Computes the metrics of a run and writes them under `<run>/report/`.
pub fn eval(run_dir: &Path, other: Option<&Path>, kind: TTestKind) -> anyhow::Result<EvalReport> {
    let dir = RunDir::new(run_dir);
    let run = load_run(&dir)?;
    let preds = predictions(&run.results);
    let overall = score(&run.method, &run.model, None, &preds, &run.questions)?;
    let by_topic = score_by_topic(&run.method, &run.model, &preds, &run.questions)?;

    let mut k_values: Vec<usize> = preds.first().map(|p| p.per_k.keys().copied().collect()).unwrap_or_default();
    if preds.iter().any(|p| p.per_k.keys().copied().ne(k_values.iter().copied())) {
        warn!("predictions disagree on their K values; skipping per-K rates");
        k_values.clear();
    }
    let ita = k_values
        .iter()
        .map(|&k| {
            Ok(ItaRow {
                model: run.model.clone(),
                k,
                ita_pct: ita_rate(&preds, k)?,
                parse_failure_pct: parse_failure_rate(&preds, k)?,
            })
        })
        .collect::<anyhow::Result<Vec<_>>>()?;

    let samples: BTreeMap<String, Vec<_>> = run
        .results
        .iter()
        .filter(|r| r.samples.len() == CONSISTENCY_SAMPLES)
        .map(|r| (r.question.question_id.clone(), r.samples.clone()))
        .collect();
    let consistency = if samples.len() == run.results.len() {
        match consistency_score(&samples) {
            Ok(c) => Some(c),
            Err(e) => {
                warn!(error = %e, "consistency score undefined");
                None
            }
        }
    } else {
        None
    };

    let compare = other.map(|o| compare(&run, o, kind)).transpose()?;

    let report_dir = dir.report();
    fs::create_dir_all(&report_dir)?;
    let mut rows = vec![overall.clone()];
    rows.extend(by_topic.iter().cloned());
    write_score_csv(&rows, BufWriter::new(File::create(report_dir.join("scores.csv"))?))?;
    if !ita.is_empty() {
        write_ita_csv(&ita, BufWriter::new(File::create(report_dir.join("ita.csv"))?))?;
        let dk: Vec<(Prediction, usize)> = run
            .results
            .iter()
            .filter_map(|r| r.winning_k.map(|k| (r.prediction.clone(), k)))
            .collect();
        write_dynamic_k_csv(&dk, &k_values, BufWriter::new(File::create(report_dir.join("dynamic_k.csv"))?))?;
    }
    let fea: Vec<_> = run
        .results
        .iter()
        .filter_map(|r| Some((r.topic.clone(), r.fea.clone()?, run.explicit.get(&r.user_id)?.clone())))
        .collect();
    if !fea.is_empty() {
        let stats = removed_attribute_stats(&fea, &AttributeSchema::default());
        write_removal_csv(&stats, BufWriter::new(File::create(report_dir.join("fea_removal.csv"))?))?;
    }
    let report = EvalReport { overall, by_topic, ita, consistency, compare };
    fs::write(report_dir.join("report.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExportSummary {
    pub written: usize,
    pub skipped: usize,
}

/// Writes one fine-tuning line per complete question of a run.
pub fn export_finetune(run_dir: &Path, path: &Path) -> anyhow::Result<ExportSummary> {
    let dir = RunDir::new(run_dir);
    let results = load_results(&dir)?;
    let mut records = Vec::new();
    let mut skipped = 0;
    for r in results {
        let missing: Vec<&str> = [
            ("EV", r.prediction.ev_text.trim().is_empty()),
            ("PBN", r.prediction.pbn_text.trim().is_empty()),
            ("implicit opinions", r.implicit_rel.is_empty()),
        ]
        .into_iter()
        .filter_map(|(name, missing)| missing.then_some(name))
        .collect();
        if !missing.is_empty() {
            warn!(question = %r.question.question_id, missing = ?missing, "skipping incomplete record");
            skipped += 1;
            continue;
        }
        records.push(FinetuneRecord::new(
            r.explicit_rel,
            r.implicit_rel,
            r.prediction.ev_text,
            r.prediction.pbn_text,
            r.question,
        ));
    }
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let written = export_finetune_records(&records, path)?;
    Ok(ExportSummary { written, skipped })
}
