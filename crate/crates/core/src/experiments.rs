//! Study harnesses: persona sensitivity, ranking agreement and stability,
//! and answer consistency across temperatures.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::consistency::{consistency_score, self_consistency, ConsistencyError, CONSISTENCY_SAMPLES};
use crate::dataset::derive_seed;
use crate::model::{AnswerKind, AnswerOutcome, ExplicitPersona, ImplicitOpinion, OpinionQuestion, UserRecord};
use crate::provider::{GenerationSettings, Provider};
use crate::ranking::{llm_rank, llm_rank_semantic_fed, order_agreement, ranking_consistency_sweep, semantic_ranking, Ranking, RankingError};
use crate::reasoning::{build_prompt, AnswerExtractor, ReasoningError, Strategy};

#[derive(Debug, Error)]
pub enum StudyError {
    #[error("{0}")]
    Domain(String),
    #[error("relevance labels line {line}: {message}")]
    Labels { line: usize, message: String },
    #[error(transparent)]
    Consistency(#[from] ConsistencyError),
    #[error(transparent)]
    Ranking(#[from] RankingError),
    #[error(transparent)]
    Reasoning(#[from] ReasoningError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PersonaKind {
    Explicit,
    Implicit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Relevance {
    Relevant,
    Irrelevant,
}

/// One line of a relevance-label file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelevanceLabel {
    pub user_id: String,
    /// Labels may be specific to one test question; without one they apply
    /// to every question of the user.
    #[serde(default)]
    pub question_id: Option<String>,
    pub kind: PersonaKind,
    pub item_index: usize,
    pub label: Relevance,
}

type LabelKey = (String, Option<String>, PersonaKind);

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RelevanceLabels {
    by_key: HashMap<LabelKey, BTreeMap<usize, Relevance>>,
}

impl RelevanceLabels {
    pub fn from_labels(labels: impl IntoIterator<Item = RelevanceLabel>) -> Self {
        let mut by_key: HashMap<LabelKey, BTreeMap<usize, Relevance>> = HashMap::new();
        for l in labels {
            by_key
                .entry((l.user_id, l.question_id, l.kind))
                .or_default()
                .insert(l.item_index, l.label);
        }
        Self { by_key }
    }

    pub fn read(reader: impl BufRead) -> Result<Self, StudyError> {
        let mut labels = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            labels.push(serde_json::from_str(&line).map_err(|e| StudyError::Labels {
                line: i + 1,
                message: e.to_string(),
            })?);
        }
        Ok(Self::from_labels(labels))
    }

    /// Labels for every item, question-specific labels taking precedence.
    pub fn for_items(
        &self,
        user_id: &str,
        question_id: &str,
        kind: PersonaKind,
        n_items: usize,
    ) -> Result<Vec<Relevance>, StudyError> {
        let specific = self.by_key.get(&(user_id.to_string(), Some(question_id.to_string()), kind));
        let general = self.by_key.get(&(user_id.to_string(), None, kind));
        (0..n_items)
            .map(|i| {
                specific
                    .and_then(|m| m.get(&i))
                    .or_else(|| general.and_then(|m| m.get(&i)))
                    .copied()
                    .ok_or_else(|| {
                        StudyError::Domain(format!(
                            "no {kind:?} relevance label for item {i} of user {user_id} (question {question_id})"
                        ))
                    })
            })
            .collect()
    }
}

/// Marks the `top` most similar opinions relevant, the rest irrelevant.
pub fn implicit_labels_from_similarity(
    implicit: &[ImplicitOpinion],
    q: &OpinionQuestion,
    top: usize,
    provider: &Provider,
) -> Result<Vec<Relevance>, StudyError> {
    let order = semantic_ranking(implicit, q, provider)?.order;
    let mut labels = vec![Relevance::Irrelevant; implicit.len()];
    for &i in order.iter().take(top) {
        labels[i] = Relevance::Relevant;
    }
    Ok(labels)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VariantLabel {
    RelevantOnly,
    PlusOne,
    PlusThree,
    PlusAll,
}

impl VariantLabel {
    pub const ALL: [VariantLabel; 4] = [Self::RelevantOnly, Self::PlusOne, Self::PlusThree, Self::PlusAll];

    fn extra(self) -> Option<usize> {
        match self {
            Self::RelevantOnly => Some(0),
            Self::PlusOne => Some(1),
            Self::PlusThree => Some(3),
            Self::PlusAll => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::RelevantOnly => "relevant-only",
            Self::PlusOne => "plus-one",
            Self::PlusThree => "plus-three",
            Self::PlusAll => "plus-all",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SensitivityVariant {
    pub label: VariantLabel,
    pub kind: PersonaKind,
    /// Kept item indices, ascending.
    pub indices: Vec<usize>,
    pub explicit: ExplicitPersona,
    pub implicit: Vec<ImplicitOpinion>,
}

/// The four nested persona variants for one user and question. Irrelevant
/// items are drawn without replacement from a seeded shuffle, so each
/// variant extends the previous one.
pub fn build_sensitivity_variants(
    user: &UserRecord,
    labels: &[Relevance],
    kind: PersonaKind,
    seed: u64,
) -> Result<Vec<SensitivityVariant>, StudyError> {
    let n_items = match kind {
        PersonaKind::Explicit => user.explicit.len(),
        PersonaKind::Implicit => user.implicit.len(),
    };
    if labels.len() != n_items {
        return Err(StudyError::Domain(format!(
            "{} labels for {n_items} {kind:?} items",
            labels.len()
        )));
    }
    let relevant: Vec<usize> = (0..n_items).filter(|&i| labels[i] == Relevance::Relevant).collect();
    if relevant.is_empty() {
        tracing::warn!(user = %user.user_id, ?kind, "no relevant items; variants start empty");
    }
    let mut irrelevant: Vec<usize> = (0..n_items).filter(|&i| labels[i] == Relevance::Irrelevant).collect();
    irrelevant.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(VariantLabel::ALL
        .iter()
        .map(|&label| {
            let extra = label.extra().unwrap_or(irrelevant.len()).min(irrelevant.len());
            let mut indices: Vec<usize> = relevant.iter().chain(&irrelevant[..extra]).copied().collect();
            indices.sort_unstable();
            let (explicit, implicit) = match kind {
                PersonaKind::Explicit => (
                    user.explicit.retain_indices(|i| indices.binary_search(&i).is_ok()),
                    Vec::new(),
                ),
                PersonaKind::Implicit => (
                    ExplicitPersona::empty(),
                    indices.iter().map(|&i| user.implicit[i].clone()).collect(),
                ),
            };
            SensitivityVariant { label, kind, indices, explicit, implicit }
        })
        .collect())
}

/// One question of the sensitivity study.
#[derive(Debug, Clone)]
pub struct SensitivityCase<'a> {
    pub user: &'a UserRecord,
    pub question: &'a OpinionQuestion,
    pub labels: Vec<Relevance>,
    pub kind: PersonaKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityAnswer {
    pub question_id: String,
    pub kind: PersonaKind,
    pub label: VariantLabel,
    pub size: usize,
    pub answer: AnswerOutcome,
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityRow {
    pub kind: PersonaKind,
    pub label: VariantLabel,
    pub n: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub rows: Vec<SensitivityRow>,
    /// Share of questions whose answer differs between the relevant-only
    /// and plus-one variants, per persona kind.
    pub change_rate: BTreeMap<PersonaKind, f64>,
    pub answers: Vec<SensitivityAnswer>,
}

/// Answers every case under each variant with the demographic-and-opinion
/// prompt and sampled voting.
pub fn run_sensitivity_study(
    cases: &[SensitivityCase<'_>],
    provider: &Provider,
    settings: &GenerationSettings,
    extractor: &AnswerExtractor,
    n_samples: usize,
    seed: u64,
) -> Result<SensitivityReport, StudyError> {
    let mut answers = Vec::new();
    for case in cases {
        let q = case.question;
        let draw_seed = derive_seed(seed, &format!("sensitivity:{:?}:{}", case.kind, q.question_id));
        for v in build_sensitivity_variants(case.user, &case.labels, case.kind, draw_seed)? {
            let prompt = build_prompt(&Strategy::dio(), &v.explicit, &v.implicit, q, &q.topic)?;
            let sampled = self_consistency(&prompt, q, n_samples, provider, settings, extractor)?;
            answers.push(SensitivityAnswer {
                question_id: q.question_id.clone(),
                kind: v.kind,
                label: v.label,
                size: v.indices.len(),
                correct: sampled.answer.choice_index() == Some(q.gold_index),
                answer: sampled.answer,
            });
        }
    }
    let mut cells: BTreeMap<(PersonaKind, VariantLabel), (usize, usize)> = BTreeMap::new();
    for a in &answers {
        let cell = cells.entry((a.kind, a.label)).or_default();
        cell.0 += 1;
        cell.1 += usize::from(a.correct);
    }
    let rows = cells
        .into_iter()
        .map(|((kind, label), (n, hits))| SensitivityRow { kind, label, n, accuracy: hits as f64 / n as f64 })
        .collect();
    let mut change: BTreeMap<PersonaKind, (usize, usize)> = BTreeMap::new();
    let lookup: HashMap<(&str, PersonaKind, VariantLabel), AnswerKind> = answers
        .iter()
        .map(|a| ((a.question_id.as_str(), a.kind, a.label), a.answer.kind))
        .collect();
    for a in answers.iter().filter(|a| a.label == VariantLabel::RelevantOnly) {
        let plus_one = lookup[&(a.question_id.as_str(), a.kind, VariantLabel::PlusOne)];
        let cell = change.entry(a.kind).or_default();
        cell.0 += 1;
        cell.1 += usize::from(plus_one != a.answer.kind);
    }
    Ok(SensitivityReport {
        rows,
        change_rate: change.into_iter().map(|(k, (n, c))| (k, c as f64 / n as f64)).collect(),
        answers,
    })
}

pub fn write_sensitivity_csv(report: &SensitivityReport, out: impl Write) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["persona_kind", "variant", "n", "accuracy", "change_rate"])?;
    for r in &report.rows {
        let change = if r.label == VariantLabel::PlusOne {
            report.change_rate.get(&r.kind).map(|c| format!("{:.4}", c)).unwrap_or_default()
        } else {
            String::new()
        };
        w.write_record([
            format!("{:?}", r.kind).to_lowercase(),
            r.label.name().to_string(),
            r.n.to_string(),
            format!("{:.4}", r.accuracy),
            change,
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Descriptive statistics of a sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub min: f64,
    pub max: f64,
    /// Population excess kurtosis; `None` when the variance is zero.
    pub kurtosis: Option<f64>,
}

pub fn summarize(values: &[f64]) -> Option<Summary> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let m2 = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let m4 = values.iter().map(|v| (v - mean).powi(4)).sum::<f64>() / n;
    Some(Summary {
        n: values.len(),
        mean,
        std: m2.sqrt(),
        min: values.iter().copied().fold(f64::INFINITY, f64::min),
        max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        kurtosis: (m2 > 0.0).then(|| m4 / (m2 * m2) - 3.0),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    /// Sorted by question id.
    pub per_question: Vec<(String, f64)>,
    pub summary: Option<Summary>,
}

/// Kendall's tau between the model's usefulness order and the similarity
/// order, per question. Questions with fewer than two opinions are skipped.
pub fn run_ranking_agreement_study(
    cases: &[(&UserRecord, &OpinionQuestion)],
    provider: &Provider,
    settings: &GenerationSettings,
    seed: u64,
) -> Result<AgreementReport, StudyError> {
    let mut per_question = Vec::new();
    for (user, q) in cases {
        if user.implicit.len() < 2 {
            continue;
        }
        let semantic = semantic_ranking(&user.implicit, q, provider)?;
        let ranking_seed = derive_seed(seed, &format!("ranking:{}", q.question_id));
        let llm = llm_rank(&user.implicit, q, &q.topic, ranking_seed, provider, settings)?;
        per_question.push((q.question_id.clone(), order_agreement(&llm.ranking, &semantic)?));
    }
    per_question.sort_by(|a, b| a.0.cmp(&b.0));
    let taus: Vec<f64> = per_question.iter().map(|(_, t)| *t).collect();
    Ok(AgreementReport { summary: summarize(&taus), per_question })
}

pub fn write_summary_csv(summary: Option<&Summary>, out: impl Write) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["n", "mean", "std", "min", "max", "kurtosis"])?;
    if let Some(s) = summary {
        w.write_record([
            s.n.to_string(),
            format!("{:.4}", s.mean),
            format!("{:.4}", s.std),
            format!("{:.4}", s.min),
            format!("{:.4}", s.max),
            s.kurtosis.map(|k| format!("{k:.4}")).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Mean top-K overlap between `runs` model rankings (all but one over a
/// seeded shuffle, the last over the similarity order), averaged over
/// questions, for K in `1..=k_max`.
pub fn run_ranking_consistency_study(
    cases: &[(&UserRecord, &OpinionQuestion)],
    provider: &Provider,
    settings: &GenerationSettings,
    seed: u64,
    runs: usize,
    k_max: usize,
) -> Result<Vec<(usize, f64)>, StudyError> {
    if runs < 2 {
        return Err(StudyError::Domain("need at least two ranking runs".into()));
    }
    let mut totals = vec![0.0; k_max];
    let mut questions = 0usize;
    for (user, q) in cases {
        if user.implicit.is_empty() {
            continue;
        }
        let mut rankings: Vec<Ranking> = (0..runs - 1)
            .map(|r| {
                let s = derive_seed(seed, &format!("ranking:{}:{r}", q.question_id));
                Ok(llm_rank(&user.implicit, q, &q.topic, s, provider, settings)?.ranking)
            })
            .collect::<Result<_, StudyError>>()?;
        rankings.push(llm_rank_semantic_fed(&user.implicit, q, &q.topic, provider, settings)?.ranking);
        for (k, oc) in ranking_consistency_sweep(&rankings, k_max)? {
            totals[k - 1] += oc;
        }
        questions += 1;
    }
    if questions == 0 {
        return Err(StudyError::Domain("no questions with opinions to rank".into()));
    }
    Ok(totals
        .into_iter()
        .enumerate()
        .map(|(i, t)| (i + 1, t / questions as f64))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReasoningStyle {
    Cot,
    Vbn,
}

impl ReasoningStyle {
    fn strategy(self) -> Strategy {
        match self {
            Self::Cot => Strategy::dio_cot(),
            Self::Vbn => Strategy::vbn(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemperatureRow {
    pub style: ReasoningStyle,
    pub temperature: f64,
    pub questions: usize,
    pub consistency: f64,
}

pub const STUDY_HISTORY: usize = 8;

/// Five samples per question at each temperature for each reasoning style.
/// Prompts carry the full explicit persona and the eight most similar
/// opinions.
pub fn run_temperature_consistency_study(
    cases: &[(&UserRecord, &OpinionQuestion)],
    temperatures: &[f64],
    styles: &[ReasoningStyle],
    provider: &Provider,
    settings: &GenerationSettings,
    extractor: &AnswerExtractor,
) -> Result<Vec<TemperatureRow>, StudyError> {
    let mut prompts: Vec<(ReasoningStyle, &OpinionQuestion, String)> = Vec::new();
    for (user, q) in cases {
        let history = semantic_ranking(&user.implicit, q, provider)?.select(&user.implicit, STUDY_HISTORY);
        for &style in styles {
            prompts.push((style, q, build_prompt(&style.strategy(), &user.explicit, &history, q, &q.topic)?));
        }
    }
    let mut rows = Vec::new();
    for &style in styles {
        for &t in temperatures {
            let settings = settings.clone().with_temperature(t);
            let mut samples = BTreeMap::new();
            for (_, q, prompt) in prompts.iter().filter(|(s, _, _)| *s == style) {
                let sampled = self_consistency(prompt, q, CONSISTENCY_SAMPLES, provider, &settings, extractor)?;
                samples.insert(q.question_id.clone(), sampled.samples);
            }
            rows.push(TemperatureRow {
                style,
                temperature: t,
                questions: samples.len(),
                consistency: consistency_score(&samples)?,
            });
        }
    }
    Ok(rows)
}

pub fn write_temperature_csv(rows: &[TemperatureRow], out: impl Write) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["strategy", "temperature", "questions", "consistency"])?;
    for r in rows {
        w.write_record([
            format!("{:?}", r.style).to_lowercase(),
            format!("{:.1}", r.temperature),
            r.questions.to_string(),
            format!("{:.4}", r.consistency),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::AttributeSchema;
    use crate::provider::{GenerationRequest, ScriptedBackend};
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    fn user(n_implicit: usize) -> UserRecord {
        let schema = AttributeSchema::default();
        let explicit = ExplicitPersona::new(
            schema.names().iter().enumerate().map(|(i, n)| (n.clone(), format!("v{i}"))),
            &schema,
        )
        .unwrap();
        UserRecord {
            user_id: "u1".into(),
            topic: "guns".into(),
            explicit,
            implicit: (0..n_implicit)
                .map(|i| ImplicitOpinion::new(format!("h{i}"), vec!["Yes".into(), "No".into()], 0).unwrap())
                .collect(),
            tests: vec![],
        }
    }

    fn question(id: &str) -> OpinionQuestion {
        OpinionQuestion::new(id, "guns", format!("target {id}"), vec!["Yes".into(), "No".into()], 0).unwrap()
    }

    fn labels(relevant: &[usize], n: usize) -> Vec<Relevance> {
        (0..n)
            .map(|i| if relevant.contains(&i) { Relevance::Relevant } else { Relevance::Irrelevant })
            .collect()
    }

    #[test]
    fn variant_sizes() {
        let u = user(0);
        let v = build_sensitivity_variants(&u, &labels(&[0, 2, 4, 6, 8], 12), PersonaKind::Explicit, 3).unwrap();
        let sizes: Vec<usize> = v.iter().map(|v| v.explicit.len()).collect();
        assert_eq!(sizes, vec![5, 6, 8, 12]);
        let again = build_sensitivity_variants(&u, &labels(&[0, 2, 4, 6, 8], 12), PersonaKind::Explicit, 3).unwrap();
        assert_eq!(v, again);

        let v = build_sensitivity_variants(&u, &labels(&[0, 1, 2, 3, 4, 5, 6, 7, 8, 9], 12), PersonaKind::Explicit, 3).unwrap();
        assert_eq!(v[2].indices.len(), 12);
        let sizes: Vec<usize> = v.iter().map(|v| v.indices.len()).collect();
        assert_eq!(sizes, vec![10, 11, 12, 12]);

        let u = user(10);
        let v = build_sensitivity_variants(&u, &labels(&[], 10), PersonaKind::Implicit, 3).unwrap();
        assert_eq!(v[0].implicit.len(), 0);
        assert!(v.iter().all(|v| v.explicit.is_empty()));
        assert!(build_sensitivity_variants(&u, &labels(&[], 9), PersonaKind::Implicit, 3).is_err());
    }

    #[test]
    fn label_file() {
        let text = concat!(
            r#"{"user_id":"u1","kind":"explicit","item_index":0,"label":"relevant"}"#, "\n",
            r#"{"user_id":"u1","kind":"explicit","item_index":1,"label":"irrelevant"}"#, "\n",
            r#"{"user_id":"u1","question_id":"q2","kind":"explicit","item_index":1,"label":"relevant"}"#, "\n",
        );
        let l = RelevanceLabels::read(text.as_bytes()).unwrap();
        assert_eq!(l.for_items("u1", "q1", PersonaKind::Explicit, 2).unwrap(), vec![Relevance::Relevant, Relevance::Irrelevant]);
        assert_eq!(l.for_items("u1", "q2", PersonaKind::Explicit, 2).unwrap(), vec![Relevance::Relevant, Relevance::Relevant]);
        assert!(l.for_items("u1", "q1", PersonaKind::Explicit, 3).is_err());
        assert!(matches!(RelevanceLabels::read("{bad".as_bytes()), Err(StudyError::Labels { line: 1, .. })));
    }

    #[test]
    fn indifferent_model_has_no_change() {
        let provider = Provider::scripted(ScriptedBackend::constant("Answer: A"));
        let u = user(0);
        let qs: Vec<OpinionQuestion> = (0..4).map(|i| question(&format!("q{i}"))).collect();
        let cases: Vec<SensitivityCase> = qs
            .iter()
            .map(|q| SensitivityCase { user: &u, question: q, labels: labels(&[0, 1], 12), kind: PersonaKind::Explicit })
            .collect();
        let r = run_sensitivity_study(&cases, &provider, &GenerationSettings::new("m"), &AnswerExtractor::default(), 5, 1).unwrap();
        assert_eq!(r.rows.len(), 4);
        assert!(r.rows.iter().all(|row| row.accuracy == 1.0));
        assert_eq!(r.change_rate[&PersonaKind::Explicit], 0.0);
        assert_eq!(provider.stats().generation_calls, 4 * 4 * 5);
    }

    #[test]
    fn distractor_flips_answers() {
        // Answers B whenever Religion is in the persona.
        let provider = Provider::scripted(ScriptedBackend::new(|req: &GenerationRequest| {
            if req.prompt.contains("Religion:") { "Answer: B".into() } else { "Answer: A".into() }
        }));
        let u = user(0);
        let relevant = labels(&[0, 1, 2], 12);
        let qs: Vec<OpinionQuestion> = (0..30).map(|i| question(&format!("q{i:02}"))).collect();
        let cases: Vec<SensitivityCase> = qs
            .iter()
            .map(|q| SensitivityCase { user: &u, question: q, labels: relevant.clone(), kind: PersonaKind::Explicit })
            .collect();
        let seed = 9;
        let r = run_sensitivity_study(&cases, &provider, &GenerationSettings::new("m"), &AnswerExtractor::default(), 5, seed).unwrap();
        let religion = AttributeSchema::default().position("Religion").unwrap();
        let drew = qs
            .iter()
            .filter(|q| {
                let s = derive_seed(seed, &format!("sensitivity:{:?}:{}", PersonaKind::Explicit, q.question_id));
                let v = build_sensitivity_variants(&u, &relevant, PersonaKind::Explicit, s).unwrap();
                v[1].indices.contains(&religion)
            })
            .count();
        assert_eq!(r.change_rate[&PersonaKind::Explicit], drew as f64 / qs.len() as f64);
        assert!(drew > 0 && drew < qs.len());
        let plus_all = r.rows.iter().find(|row| row.label == VariantLabel::PlusAll).unwrap();
        assert_eq!(plus_all.accuracy, 0.0);
    }

    #[test]
    fn summary_values() {
        let s = summarize(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(s.mean, 2.5);
        assert!((s.std - 1.25f64.sqrt()).abs() < 1e-15);
        // m4 = (2*5.0625 + 2*0.0625)/4 = 2.5625, m2^2 = 1.5625
        assert!((s.kurtosis.unwrap() - (2.5625 / 1.5625 - 3.0)).abs() < 1e-12);
        assert_eq!(summarize(&[1.0, 1.0]).unwrap().kurtosis, None);
        assert!(summarize(&[]).is_none());
    }

    fn history_order(prompt: &str) -> Vec<usize> {
        prompt
            .lines()
            .filter_map(|l| l.split_once(". Question: h"))
            .map(|(_, rest)| rest.split_whitespace().next().unwrap().parse().unwrap())
            .collect()
    }

    fn similarity_provider(ranker: impl Fn(Vec<usize>) -> Vec<usize> + Send + Sync + 'static) -> Provider {
        let mut e = crate::provider::FixedEmbedder::default();
        for q in 0..3 {
            e.insert(format!("target q{q}"), vec![1.0, 0.0]);
        }
        for i in 0..6 {
            let s = 1.0 - i as f64 / 10.0;
            e.insert(format!("h{i}"), vec![s, (1.0 - s * s).sqrt()]);
        }
        Provider::builder(crate::provider::ProviderMode::Scripted)
            .generator(ScriptedBackend::new(move |req: &GenerationRequest| {
                // Presented items, mapped to the positions the ranker wants first.
                let shown = history_order(&req.prompt);
                let wanted = ranker(shown.clone());
                let positions: Vec<String> = wanted
                    .iter()
                    .map(|item| (shown.iter().position(|s| s == item).unwrap() + 1).to_string())
                    .collect();
                format!("Answer: [{}]", positions.join(", "))
            }))
            .embedder(e)
            .build()
            .unwrap()
    }

    #[test]
    fn agreement_identity_and_reverse() {
        let u = user(6);
        let qs: Vec<OpinionQuestion> = (0..3).map(|i| question(&format!("q{i}"))).collect();
        let cases: Vec<(&UserRecord, &OpinionQuestion)> = qs.iter().map(|q| (&u, q)).collect();
        let settings = GenerationSettings::new("m");

        let same = similarity_provider(|_| (0..6).collect());
        let r = run_ranking_agreement_study(&cases, &same, &settings, 4).unwrap();
        assert!(r.per_question.iter().all(|(_, t)| *t == 1.0));
        assert_eq!(r.summary.unwrap().mean, 1.0);

        let reversed = similarity_provider(|_| (0..6).rev().collect());
        let r = run_ranking_agreement_study(&cases, &reversed, &settings, 4).unwrap();
        assert_eq!(r.summary.unwrap().mean, -1.0);
    }

    #[test]
    fn ranking_consistency_identity() {
        let u = user(6);
        let qs: Vec<OpinionQuestion> = (0..2).map(|i| question(&format!("q{i}"))).collect();
        let cases: Vec<(&UserRecord, &OpinionQuestion)> = qs.iter().map(|q| (&u, q)).collect();
        let p = similarity_provider(|_| (0..6).collect());
        let sweep = run_ranking_consistency_study(&cases, &p, &GenerationSettings::new("m"), 1, 5, 6).unwrap();
        assert!(sweep.iter().all(|(_, oc)| *oc == 1.0));

        // Echoing the presentation order follows the seeded shuffle instead.
        let p = similarity_provider(|shown| shown);
        let sweep = run_ranking_consistency_study(&cases, &p, &GenerationSettings::new("m"), 1, 5, 6).unwrap();
        assert!(sweep[0].1 < 1.0);
        assert_eq!(sweep[5].1, 1.0);
    }

    #[test]
    fn temperature_study() {
        let u = user(10);
        let qs: Vec<OpinionQuestion> = (0..20).map(|i| question(&format!("q{i:02}"))).collect();
        let cases: Vec<(&UserRecord, &OpinionQuestion)> = qs.iter().map(|q| (&u, q)).collect();
        let settings = GenerationSettings::new("m");
        let x = AnswerExtractor::default();
        let temps = [0.3, 0.6, 0.9];
        let styles = [ReasoningStyle::Cot, ReasoningStyle::Vbn];

        let det = Provider::scripted(ScriptedBackend::constant("Answer: A"));
        let rows = run_temperature_consistency_study(&cases, &temps, &styles, &det, &settings, &x).unwrap();
        assert_eq!(rows.len(), 6);
        assert!(rows.iter().all(|r| r.consistency == 1.0));

        // At 0.9 the answer depends on the sample index for every odd question.
        let noisy = Provider::scripted(ScriptedBackend::new(|req: &GenerationRequest| {
            let odd = req.prompt.contains("target q") && {
                let id = req.prompt.split("target q").nth(1).unwrap();
                id[..2].parse::<usize>().unwrap() % 2 == 1
            };
            if req.temperature > 0.8 && odd && req.sample_index % 2 == 1 {
                "Answer: B".into()
            } else {
                "Answer: A".into()
            }
        }));
        let rows = run_temperature_consistency_study(&cases, &temps, &styles, &noisy, &settings, &x).unwrap();
        for r in &rows {
            let expected = if r.temperature > 0.8 { 0.5 } else { 1.0 };
            assert_eq!(r.consistency, expected, "{r:?}");
        }
        let mut buf = Vec::new();
        write_temperature_csv(&rows[..1], &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "strategy,temperature,questions,consistency\ncot,0.3,20,1.0000\n");
    }

    proptest! {
        #[test]
        fn variants_nest(mask in prop::collection::vec(any::<bool>(), 12), seed in any::<u64>()) {
            let u = user(0);
            let l: Vec<Relevance> = mask.iter().map(|m| if *m { Relevance::Relevant } else { Relevance::Irrelevant }).collect();
            let v = build_sensitivity_variants(&u, &l, PersonaKind::Explicit, seed).unwrap();
            let sets: Vec<BTreeSet<usize>> = v.iter().map(|v| v.indices.iter().copied().collect()).collect();
            for w in sets.windows(2) {
                prop_assert!(w[0].is_subset(&w[1]));
            }
            prop_assert_eq!(sets[3].len(), 12);
            for variant in &v {
                let names: Vec<&str> = variant.explicit.names().collect();
                let expected: Vec<&str> = variant.indices.iter().map(|&i| u.explicit.entries()[i].name.as_str()).collect();
                prop_assert_eq!(names, expected);
            }
        }
    }
}
