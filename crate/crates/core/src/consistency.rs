//! Step 4: answering with several history sizes and voting, plus the
//! self-consistency baseline and the answer-stability study.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{AnswerKind, AnswerOutcome, ExplicitPersona, ImplicitOpinion, OpinionQuestion, Prediction};
use crate::provider::{GenerationSettings, Provider, ProviderError, DEFAULT_TEMPERATURE};
use crate::ranking::Ranking;
use crate::reasoning::{build_prompt, extract_vbn_sections, AnswerExtractor, ReasoningError, Strategy};

pub const DEFAULT_K_VALUES: [usize; 3] = [8, 10, 12];
pub const DEFAULT_SC_SAMPLES: usize = 5;

#[derive(Debug, Error)]
pub enum ConsistencyError {
    #[error("{0}")]
    Domain(String),
    #[error("every generation failed for question {question_id}: {last}")]
    AllFailed { question_id: String, last: ProviderError },
    #[error(transparent)]
    Reasoning(#[from] ReasoningError),
    #[error(transparent)]
    Provider(#[from] ProviderError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DynamicKConfig {
    pub k_values: Vec<usize>,
    pub temperature: f64,
}

impl Default for DynamicKConfig {
    fn default() -> Self {
        Self {
            k_values: DEFAULT_K_VALUES.to_vec(),
            temperature: DEFAULT_TEMPERATURE,
        }
    }
}

impl DynamicKConfig {
    pub fn validate(&self) -> Result<(), ConsistencyError> {
        if self.k_values.is_empty() {
            return Err(ConsistencyError::Domain("k_values must not be empty".into()));
        }
        if self.k_values.windows(2).any(|w| w[0] >= w[1]) || self.k_values[0] == 0 {
            return Err(ConsistencyError::Domain(
                "k_values must be positive and strictly increasing".into(),
            ));
        }
        Ok(())
    }
}

/// Position of the winning outcome in `outcomes`: the most frequent choice
/// index, ties going to the one seen first. `None` if nothing is a choice.
fn plurality(outcomes: &[&AnswerOutcome]) -> Option<usize> {
    let mut counts: HashMap<usize, (usize, usize)> = HashMap::new();
    for (pos, o) in outcomes.iter().enumerate() {
        if let Some(i) = o.choice_index() {
            counts.entry(i).or_insert((0, pos)).0 += 1;
        }
    }
    counts
        .into_values()
        .max_by(|a, b| a.0.cmp(&b.0).then(b.1.cmp(&a.1)))
        .map(|(_, first)| first)
}

/// Majority vote over answers ordered by ascending K. Returns the winner
/// and the smallest K that produced it.
pub fn majority_vote(answers: &[(usize, AnswerOutcome)]) -> Result<(AnswerOutcome, usize), ConsistencyError> {
    if answers.is_empty() {
        return Err(ConsistencyError::Domain("cannot vote over no answers".into()));
    }
    if answers.windows(2).any(|w| w[0].0 >= w[1].0) {
        return Err(ConsistencyError::Domain("answers must be ordered by ascending K".into()));
    }
    let outcomes: Vec<&AnswerOutcome> = answers.iter().map(|(_, a)| a).collect();
    if let Some(pos) = plurality(&outcomes) {
        return Ok((answers[pos].1.clone(), answers[pos].0));
    }
    let k = answers
        .iter()
        .find(|(_, a)| a.is_ita())
        .map_or(answers[0].0, |(k, _)| *k);
    Ok((AnswerOutcome::ita(""), k))
}

/// One question's result from [`run_dynamic_k`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DynamicKOutcome {
    pub prediction: Prediction,
    pub winning_k: usize,
    /// The opinions given to the model at each K.
    pub implicit_by_k: BTreeMap<usize, Vec<ImplicitOpinion>>,
    /// Ks whose generation failed at the transport level.
    pub failed_k: Vec<usize>,
}

/// Inputs shared by every K for one question.
#[derive(Debug, Clone, Copy)]
pub struct DynamicKInput<'a> {
    pub explicit: &'a ExplicitPersona,
    pub implicit: &'a [ImplicitOpinion],
    pub ranking: &'a Ranking,
    pub question: &'a OpinionQuestion,
    pub topic: &'a str,
}

/// Answers `input.question` once per K using the ranking's top-K opinions,
/// then votes. Explanations come from the exchange at the winning K.
pub fn run_dynamic_k(
    input: DynamicKInput<'_>,
    cfg: &DynamicKConfig,
    strategy: &Strategy,
    provider: &Provider,
    settings: &GenerationSettings,
    extractor: &AnswerExtractor,
) -> Result<DynamicKOutcome, ConsistencyError> {
    cfg.validate()?;
    let q = input.question;
    let settings = settings.clone().with_temperature(cfg.temperature);
    let mut per_k = BTreeMap::new();
    let mut texts = BTreeMap::new();
    let mut implicit_by_k = BTreeMap::new();
    let mut failed_k = Vec::new();
    let mut last_error = None;
    for &k in &cfg.k_values {
        let history = input.ranking.select(input.implicit, k);
        let prompt = build_prompt(strategy, input.explicit, &history, q, input.topic)?;
        implicit_by_k.insert(k, history);
        match provider.generate(&settings.request(prompt).for_question(&q.question_id)) {
            Ok(reply) => {
                per_k.insert(k, extractor.extract(&reply.text, q.choices.len()));
                texts.insert(k, reply.text);
            }
            Err(e @ ProviderError::ReplayMiss { .. }) => return Err(e.into()),
            Err(e) => {
                tracing::warn!(question = %q.question_id, k, error = %e, "generation failed");
                per_k.insert(k, AnswerOutcome::parse_failure(""));
                failed_k.push(k);
                last_error = Some(e);
            }
        }
    }
    if failed_k.len() == cfg.k_values.len() {
        return Err(ConsistencyError::AllFailed {
            question_id: q.question_id.clone(),
            last: last_error.expect("at least one failure"),
        });
    }
    let ordered: Vec<(usize, AnswerOutcome)> = per_k.iter().map(|(k, a)| (*k, a.clone())).collect();
    let (mut final_answer, winning_k) = majority_vote(&ordered)?;
    let explanation = texts.get(&winning_k).cloned().unwrap_or_default();
    final_answer.raw_text = explanation.clone();
    let sections = extract_vbn_sections(&explanation);
    Ok(DynamicKOutcome {
        prediction: Prediction {
            question_id: q.question_id.clone(),
            final_answer,
            per_k,
            ev_text: sections.ev_text,
            pbn_text: sections.pbn_text,
            explanation,
        },
        winning_k,
        implicit_by_k,
        failed_k,
    })
}

/// Samples of one prompt and the vote over them.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampledAnswer {
    pub answer: AnswerOutcome,
    pub samples: Vec<AnswerOutcome>,
}

/// Issues `n` generations of `prompt` that differ only in sample index and
/// takes the plurality choice, ties going to the lowest sample index.
pub fn self_consistency(
    prompt: &str,
    q: &OpinionQuestion,
    n: usize,
    provider: &Provider,
    settings: &GenerationSettings,
    extractor: &AnswerExtractor,
) -> Result<SampledAnswer, ConsistencyError> {
    if n == 0 {
        return Err(ConsistencyError::Domain("need at least one sample".into()));
    }
    let mut samples = Vec::with_capacity(n);
    let mut last_error = None;
    for i in 0..n {
        let req = settings
            .request(prompt)
            .with_sample_index(i as u32)
            .for_question(&q.question_id);
        match provider.generate(&req) {
            Ok(reply) => samples.push(extractor.extract(&reply.text, q.choices.len())),
            Err(e @ ProviderError::ReplayMiss { .. }) => return Err(e.into()),
            Err(e) => {
                tracing::warn!(question = %q.question_id, sample = i, error = %e, "generation failed");
                samples.push(AnswerOutcome::parse_failure(""));
                last_error = Some(e);
            }
        }
    }
    if let Some(last) = last_error.filter(|_| samples.iter().all(AnswerOutcome::is_parse_failure)) {
        return Err(ConsistencyError::AllFailed { question_id: q.question_id.clone(), last });
    }
    let refs: Vec<&AnswerOutcome> = samples.iter().collect();
    let answer = match plurality(&refs) {
        Some(pos) => samples[pos].clone(),
        None => AnswerOutcome::ita(""),
    };
    Ok(SampledAnswer { answer, samples })
}

pub const CONSISTENCY_SAMPLES: usize = 5;

/// Fraction of questions whose samples all agree. A parse failure never
/// agrees with anything; ITA agrees with ITA.
pub fn consistency_score(samples: &BTreeMap<String, Vec<AnswerOutcome>>) -> Result<f64, ConsistencyError> {
    if samples.is_empty() {
        return Err(ConsistencyError::Domain("no questions to score".into()));
    }
    let mut unanimous = 0usize;
    for (qid, list) in samples {
        if list.len() != CONSISTENCY_SAMPLES {
            return Err(ConsistencyError::Domain(format!(
                "question {qid} has {} samples, expected {CONSISTENCY_SAMPLES}",
                list.len()
            )));
        }
        let first = list[0].kind;
        if first != AnswerKind::ParseFailure && list.iter().all(|a| a.kind == first) {
            unanimous += 1;
        }
    }
    Ok(unanimous as f64 / samples.len() as f64)
}

/// Percentage of predictions whose answer at `k` was a refusal.
pub fn ita_rate(predictions: &[Prediction], k: usize) -> Result<f64, ConsistencyError> {
    rate_at(predictions, k, AnswerOutcome::is_ita)
}

/// Percentage of predictions whose answer at `k` could not be read.
pub fn parse_failure_rate(predictions: &[Prediction], k: usize) -> Result<f64, ConsistencyError> {
    rate_at(predictions, k, AnswerOutcome::is_parse_failure)
}

fn rate_at(
    predictions: &[Prediction],
    k: usize,
    pred: impl Fn(&AnswerOutcome) -> bool,
) -> Result<f64, ConsistencyError> {
    if predictions.is_empty() {
        return Err(ConsistencyError::Domain("no predictions".into()));
    }
    let mut hits = 0usize;
    for p in predictions {
        let a = p.per_k.get(&k).ok_or_else(|| {
            ConsistencyError::Domain(format!("prediction {} has no answer at K={k}", p.question_id))
        })?;
        hits += usize::from(pred(a));
    }
    Ok(100.0 * hits as f64 / predictions.len() as f64)
}

/// `question_id,k_<K>...,final,winning_k,ita_<K>...` rows.
pub fn write_dynamic_k_csv(
    rows: &[(Prediction, usize)],
    k_values: &[usize],
    out: impl Write,
) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["question_id".to_string()];
    header.extend(k_values.iter().map(|k| format!("k_{k}")));
    header.extend(["final".to_string(), "winning_k".to_string()]);
    header.extend(k_values.iter().map(|k| format!("ita_{k}")));
    w.write_record(&header)?;
    for (p, winning_k) in rows {
        let mut rec = vec![p.question_id.clone()];
        rec.extend(k_values.iter().map(|k| p.per_k.get(k).map(AnswerOutcome::label).unwrap_or_default()));
        rec.push(p.final_answer.label());
        rec.push(winning_k.to_string());
        rec.extend(
            k_values
                .iter()
                .map(|k| u8::from(p.per_k.get(k).is_some_and(AnswerOutcome::is_ita)).to_string()),
        );
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
