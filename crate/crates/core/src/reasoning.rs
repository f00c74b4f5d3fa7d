//! Answer prompts for every strategy, answer extraction, refusal detection,
//! and extraction of the value and belief/norm analyses.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{letter_of, AnswerOutcome, ExplicitPersona, ImplicitOpinion, OpinionQuestion};
use crate::provider::{GenerationSettings, Provider, ProviderError};
use crate::templates;

/// Refusal phrases matched case-insensitively as substrings.
pub const DEFAULT_ITA_PHRASES: [&str; 4] = [
    "cannot be determined",
    "impossible to answer",
    "not enough information",
    "cannot answer",
];

pub const DEFAULT_REFINE_ROUNDS: usize = 2;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ReasoningError {
    #[error("strategy configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Provider(#[from] ProviderError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StrategyKind {
    WithoutPersona,
    DioTopK,
    DioTopKCot,
    Vbn,
    SelfRefine,
}

/// Which prompt to build and which persona kinds it may carry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Strategy {
    pub kind: StrategyKind,
    pub uses_explicit: bool,
    pub uses_implicit: bool,
    /// With `Vbn`, use the older "explain each opinion" instruction instead
    /// of the EV/PBN steps.
    #[serde(default)]
    pub legacy_coo: bool,
}

impl Strategy {
    pub fn new(kind: StrategyKind) -> Self {
        let with_persona = kind != StrategyKind::WithoutPersona;
        Self {
            kind,
            uses_explicit: with_persona,
            uses_implicit: with_persona,
            legacy_coo: false,
        }
    }

    pub fn without_persona() -> Self {
        Self::new(StrategyKind::WithoutPersona)
    }

    pub fn dio() -> Self {
        Self::new(StrategyKind::DioTopK)
    }

    pub fn dio_cot() -> Self {
        Self::new(StrategyKind::DioTopKCot)
    }

    pub fn vbn() -> Self {
        Self::new(StrategyKind::Vbn)
    }

    pub fn legacy_coo() -> Self {
        Self {
            legacy_coo: true,
            ..Self::new(StrategyKind::Vbn)
        }
    }

    pub fn self_refine() -> Self {
        Self::new(StrategyKind::SelfRefine)
    }

    pub fn validate(&self) -> Result<(), ReasoningError> {
        if self.kind == StrategyKind::WithoutPersona && (self.uses_explicit || self.uses_implicit) {
            return Err(ReasoningError::Config(
                "the without-persona strategy cannot use personae".into(),
            ));
        }
        if self.legacy_coo && self.kind != StrategyKind::Vbn {
            return Err(ReasoningError::Config(
                "the legacy chain-of-opinion flag only applies to VBN".into(),
            ));
        }
        Ok(())
    }
}

/// `A. text` lines.
pub fn render_choices(choices: &[String]) -> String {
    choices
        .iter()
        .enumerate()
        .map(|(i, c)| format!("{}. {c}", letter_of(i).unwrap_or('?')))
        .collect::<Vec<_>>()
        .join("\n")
}

/// `Name: value` lines.
pub fn render_explicit(e: &ExplicitPersona) -> String {
    e.entries()
        .iter()
        .map(|entry| format!("{}: {}", entry.name, entry.value))
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn render_opinion(op: &ImplicitOpinion) -> String {
    format!("Question: {} Answer: {}", op.question_text, op.chosen_text())
}

/// One line per opinion.
pub fn render_implicit(ops: &[ImplicitOpinion]) -> String {
    ops.iter().map(render_opinion).collect::<Vec<_>>().join("\n")
}

fn persona_lines(e_rel: &ExplicitPersona, i_rel: &[ImplicitOpinion], topic: &str) -> Vec<String> {
    let mut lines = Vec::new();
    if !e_rel.is_empty() {
        let explicit = render_explicit(e_rel);
        lines.extend(templates::render(
            templates::EXPLICIT_BLOCK,
            &[("explicit_persona_str", &explicit)],
        ));
    }
    if !i_rel.is_empty() {
        let implicit = render_implicit(i_rel);
        lines.extend(templates::render(
            templates::IMPLICIT_BLOCK,
            &[("topic", topic), ("implicit_persona_str", &implicit)],
        ));
    }
    lines
}

/// Answer prompt for `strategy`. Persona blocks (and, for VBN, the matching
/// analysis step) are omitted when the corresponding persona is empty.
pub fn build_prompt(
    strategy: &Strategy,
    e_rel: &ExplicitPersona,
    i_rel: &[ImplicitOpinion],
    q: &OpinionQuestion,
    topic: &str,
) -> Result<String, ReasoningError> {
    strategy.validate()?;
    if !strategy.uses_explicit && !e_rel.is_empty() {
        return Err(ReasoningError::Config(format!(
            "{:?} was given an explicit persona it does not use",
            strategy.kind
        )));
    }
    if !strategy.uses_implicit && !i_rel.is_empty() {
        return Err(ReasoningError::Config(format!(
            "{:?} was given implicit opinions it does not use",
            strategy.kind
        )));
    }
    let choices = render_choices(&q.choices);
    let question_slots = [("question", q.text.as_str()), ("choice", choices.as_str())];
    let mut lines = Vec::new();
    match strategy.kind {
        StrategyKind::WithoutPersona => {
            lines.extend(templates::render(templates::WITHOUT_PERSONA, &question_slots));
        }
        StrategyKind::DioTopK | StrategyKind::SelfRefine => {
            lines.extend(persona_lines(e_rel, i_rel, topic));
            lines.extend(templates::render(templates::DIO_QUESTION, &question_slots));
        }
        StrategyKind::DioTopKCot => {
            lines.extend(persona_lines(e_rel, i_rel, topic));
            lines.extend(templates::render(templates::COT_QUESTION, &question_slots));
        }
        StrategyKind::Vbn if strategy.legacy_coo => {
            lines.extend(persona_lines(e_rel, i_rel, topic));
            lines.extend(templates::render(templates::LEGACY_COO_QUESTION, &question_slots));
        }
        StrategyKind::Vbn => {
            lines.extend(persona_lines(e_rel, i_rel, topic));
            lines.extend(templates::render(templates::VBN_QUESTION, &question_slots));
            if !e_rel.is_empty() {
                lines.push(templates::VBN_EV_STEP.to_string());
            }
            if !i_rel.is_empty() {
                lines.push(templates::VBN_PBN_STEP.to_string());
            }
            lines.push(templates::VBN_FINAL_STEP.to_string());
        }
    }
    Ok(lines.join("\n"))
}

/// Self-refine feedback request for the current answer.
pub fn build_feedback_prompt(q: &OpinionQuestion, selected: &AnswerOutcome) -> String {
    let choices = render_choices(&q.choices);
    let selected = describe_selection(q, selected);
    templates::render(
        templates::REFINE_FEEDBACK,
        &[
            ("test_question", &q.text),
            ("choices", &choices),
            ("selected_choice", &selected),
        ],
    )
    .join("\n")
}

/// Self-refine edit request given the feedback text.
pub fn build_refine_prompt(q: &OpinionQuestion, selected: &AnswerOutcome, feedback: &str) -> String {
    let selected = describe_selection(q, selected);
    templates::render(
        templates::REFINE_EDIT,
        &[
            ("test_question", &q.text),
            ("selected_choice", &selected),
            ("feedback", feedback.trim()),
        ],
    )
    .join("\n")
}

fn describe_selection(q: &OpinionQuestion, a: &AnswerOutcome) -> String {
    match a.choice_index() {
        Some(i) if i < q.choices.len() => {
            format!("{}. {}", letter_of(i).unwrap_or('?'), q.choices[i])
        }
        _ if a.is_ita() => "The answer cannot be determined.".to_string(),
        _ => a.raw_text.trim().to_string(),
    }
}

/// Reads answers out of model text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerExtractor {
    pub ita_phrases: Vec<String>,
}

impl Default for AnswerExtractor {
    fn default() -> Self {
        Self {
            ita_phrases: DEFAULT_ITA_PHRASES.iter().map(|s| s.to_string()).collect(),
        }
    }
}

const MARKER: &str = "answer:";

/// Byte offset and index of the first single-letter word in `s`, skipping
/// filler words such as "option".
fn first_letter_token(s: &str) -> Option<(usize, char)> {
    let mut pos = 0;
    let bytes = s.as_bytes();
    while pos < bytes.len() {
        let c = s[pos..].chars().next()?;
        if c.is_alphanumeric() {
            let start = pos;
            let end = s[start..]
                .char_indices()
                .find(|(_, ch)| !ch.is_alphanumeric())
                .map(|(i, _)| start + i)
                .unwrap_or(s.len());
            let word = &s[start..end];
            let mut chars = word.chars();
            if let (Some(ch), None) = (chars.next(), chars.next()) {
                return ch.is_ascii_alphabetic().then_some((start, ch));
            }
            if !matches!(
                word.to_ascii_lowercase().as_str(),
                "option" | "choice" | "answer"
            ) {
                return None;
            }
            pos = end;
        } else {
            pos += c.len_utf8();
        }
    }
    None
}

impl AnswerExtractor {
    fn find_ita(&self, lower: &str) -> Option<usize> {
        self.ita_phrases
            .iter()
            .filter_map(|p| lower.find(&p.to_ascii_lowercase()))
            .min()
    }

    /// Reads the answer after the last `Answer:` marker. A refusal phrase
    /// before the letter (or in place of one) yields ITA; a letter beyond
    /// the choice count yields a parse failure. Never panics.
    pub fn extract(&self, text: &str, n_choices: usize) -> AnswerOutcome {
        let lower = text.to_ascii_lowercase();
        let Some(m) = lower.rfind(MARKER) else {
            return match self.find_ita(&lower) {
                Some(_) => AnswerOutcome::ita(text),
                None => AnswerOutcome::parse_failure(text),
            };
        };
        let segment = &text[m + MARKER.len()..];
        let segment_lower = &lower[m + MARKER.len()..];
        match first_letter_token(segment) {
            Some((pos, letter)) => {
                if self.find_ita(segment_lower).is_some_and(|ita| ita < pos) {
                    return AnswerOutcome::ita(text);
                }
                let index = (letter.to_ascii_uppercase() as u8 - b'A') as usize;
                if index < n_choices {
                    AnswerOutcome::choice(index, text)
                } else {
                    AnswerOutcome::parse_failure(text)
                }
            }
            None if self.find_ita(&lower).is_some() => AnswerOutcome::ita(text),
            None => AnswerOutcome::parse_failure(text),
        }
    }

    /// Like [`extract`](Self::extract), but also accepts a bare leading
    /// letter (`B. because ...`), which is how refined answers usually
    /// start.
    pub fn extract_refined(&self, text: &str, n_choices: usize) -> AnswerOutcome {
        let outcome = self.extract(text, n_choices);
        if !outcome.is_parse_failure() {
            return outcome;
        }
        let trimmed = text.trim_start();
        let mut chars = trimmed.chars();
        if let (Some(c), next) = (chars.next(), chars.next()) {
            let delimited = next.is_none_or(|n| matches!(n, '.' | ')' | ':' | ' ' | '\n'));
            if c.is_ascii_alphabetic() && delimited {
                let index = (c.to_ascii_uppercase() as u8 - b'A') as usize;
                if index < n_choices {
                    return AnswerOutcome::choice(index, text);
                }
            }
        }
        outcome
    }
}

/// [`AnswerExtractor::extract`] with the default refusal phrases.
pub fn extract_answer(text: &str, n_choices: usize) -> AnswerOutcome {
    AnswerExtractor::default().extract(text, n_choices)
}

/// Environmental-values and beliefs/norms analyses from a VBN response.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct VbnSections {
    pub ev_text: String,
    pub pbn_text: String,
    /// A tag was opened without being closed (or the reverse).
    pub repaired: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VbnOutput {
    pub ev_text: String,
    pub pbn_text: String,
    pub answer: AnswerOutcome,
    pub repaired: bool,
}

impl VbnOutput {
    pub fn parse(text: &str, n_choices: usize, extractor: &AnswerExtractor) -> Self {
        let sections = extract_vbn_sections(text);
        Self {
            ev_text: sections.ev_text,
            pbn_text: sections.pbn_text,
            answer: extractor.extract(text, n_choices),
            repaired: sections.repaired,
        }
    }
}

fn tagged(text: &str, lower: &str, tag: &str) -> (String, bool) {
    let open = format!("<{tag}>");
    let close = format!("</{tag}>");
    match lower.find(&open) {
        Some(start) => {
            let inner = start + open.len();
            match lower[inner..].find(&close) {
                Some(end) => (text[inner..inner + end].trim().to_string(), false),
                None => (String::new(), true),
            }
        }
        None => (String::new(), lower.contains(&close)),
    }
}

/// Inner text of the first `<EV>` and `<PBN>` pairs; tags match
/// case-insensitively.
pub fn extract_vbn_sections(text: &str) -> VbnSections {
    let lower = text.to_ascii_lowercase();
    let (ev_text, ev_repaired) = tagged(text, &lower, "ev");
    let (pbn_text, pbn_repaired) = tagged(text, &lower, "pbn");
    VbnSections {
        ev_text,
        pbn_text,
        repaired: ev_repaired || pbn_repaired,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefineOutcome {
    pub answer: AnswerOutcome,
    /// The last round's answer could not be read; `answer` is the latest
    /// one that could.
    pub flagged: bool,
    pub calls: usize,
}

/// Alternates feedback and refine prompts for `rounds` rounds.
pub fn run_self_refine(
    provider: &Provider,
    settings: &GenerationSettings,
    extractor: &AnswerExtractor,
    q: &OpinionQuestion,
    initial: &AnswerOutcome,
    rounds: usize,
) -> Result<RefineOutcome, ReasoningError> {
    if rounds == 0 {
        return Err(ReasoningError::Config("self-refine needs at least one round".into()));
    }
    let mut current = initial.clone();
    let mut flagged = false;
    let mut calls = 0;
    for _ in 0..rounds {
        let feedback_req = settings
            .request(build_feedback_prompt(q, &current))
            .for_question(&q.question_id);
        let feedback = provider.generate(&feedback_req)?.text;
        calls += 1;
        let refine_req = settings
            .request(build_refine_prompt(q, &current, &feedback))
            .for_question(&q.question_id);
        let refined = provider.generate(&refine_req)?.text;
        calls += 1;
        let outcome = extractor.extract_refined(&refined, q.choices.len());
        if outcome.is_parse_failure() {
            flagged = true;
        } else {
            flagged = false;
            current = outcome;
        }
    }
    Ok(RefineOutcome {
        answer: current,
        flagged,
        calls,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{AnswerKind, AttributeSchema};
    use crate::provider::{GenerationRequest, ScriptedBackend};
    use proptest::prelude::*;
    use super::Strategy;

    fn question() -> OpinionQuestion {
        OpinionQuestion::new(
            "q1",
            "guns",
            "How important is gun ownership to you?",
            vec![
                "Strongly agree".into(),
                "Somewhat agree".into(),
                "Somewhat disagree".into(),
                "Strongly disagree".into(),
            ],
            1,
        )
        .unwrap()
    }

    fn persona() -> ExplicitPersona {
        ExplicitPersona::new(
            [("Age", "30-49"), ("Political party", "Democrat")],
            &AttributeSchema::default(),
        )
        .unwrap()
    }

    fn opinions(n: usize) -> Vec<ImplicitOpinion> {
        (0..n)
            .map(|i| {
                ImplicitOpinion::new(format!("History question {i}?"), vec!["Yes".into(), "No".into()], i % 2)
                    .unwrap()
            })
            .collect()
    }

    #[test]
    fn vbn_has_both_analysis_steps() {
        let p = build_prompt(&Strategy::vbn(), &persona(), &opinions(3), &question(), "guns").unwrap();
        assert!(p.contains("Wrap this analysis by <EV> and </EV>"));
        assert!(p.contains("Wrap this analysis by <PBN> and </PBN>"));
    }

    #[test]
    fn vbn_skips_steps_for_missing_personae() {
        let q = question();
        let no_e = build_prompt(&Strategy::vbn(), &ExplicitPersona::empty(), &opinions(2), &q, "guns").unwrap();
        assert!(!no_e.contains("<EV>"));
        assert!(!no_e.contains("A person can be described"));
        assert!(no_e.contains("<PBN>"));
        let none = build_prompt(&Strategy::vbn(), &ExplicitPersona::empty(), &[], &q, "guns").unwrap();
        assert!(!none.contains("A person can be described"));
        assert!(!none.contains("Opinions:"));
        assert!(!none.contains("<PBN>"));
        assert!(none.ends_with("Answer: A. or B. or C. or D. or E...."));
    }

    #[test]
    fn dio_lists_each_opinion() {
        let p = build_prompt(&Strategy::dio(), &persona(), &opinions(8), &question(), "guns").unwrap();
        let block: Vec<&str> = p
            .lines()
            .skip_while(|l| *l != "Opinions:")
            .skip(1)
            .take_while(|l| l.starts_with("Question: History"))
            .collect();
        assert_eq!(block.len(), 8);
        assert!(p.contains("\nAnswer: A. or B. or C. or D. or E....\n") || p.ends_with("Answer: A. or B. or C. or D. or E...."));
    }

    #[test]
    fn without_persona_rejects_personae() {
        let q = question();
        assert!(build_prompt(&Strategy::without_persona(), &persona(), &[], &q, "guns").is_err());
        let mut bad = Strategy::without_persona();
        bad.uses_explicit = true;
        assert!(build_prompt(&bad, &ExplicitPersona::empty(), &[], &q, "guns").is_err());
        let p = build_prompt(&Strategy::without_persona(), &ExplicitPersona::empty(), &[], &q, "guns").unwrap();
        assert!(p.contains("without any explanation"));
    }

    #[test]
    fn extraction_examples() {
        let a = extract_answer("<EV>x</EV><PBN>y</PBN>\nAnswer: B. Somewhat agree", 4);
        assert_eq!(a.kind, AnswerKind::Choice(1));
        let a = extract_answer("Given the personae, the answer cannot be determined.", 4);
        assert_eq!(a.kind, AnswerKind::ImpossibleToAnswer);
        let a = extract_answer("Answer: F.", 4);
        assert_eq!(a.kind, AnswerKind::ParseFailure);
        let a = extract_answer("Answer: A. ... on reflection\nAnswer: (C)", 4);
        assert_eq!(a.kind, AnswerKind::Choice(2));
        let a = extract_answer("Answer: Not enough information to say. Maybe B", 4);
        assert_eq!(a.kind, AnswerKind::ImpossibleToAnswer);
        let a = extract_answer("**Answer:** Option D", 4);
        assert_eq!(a.kind, AnswerKind::Choice(3));
        let a = extract_answer("<PBN>it cannot be determined from one opinion</PBN> Answer: A.", 4);
        assert_eq!(a.kind, AnswerKind::Choice(0));
        assert_eq!(extract_answer("", 4).kind, AnswerKind::ParseFailure);
    }

    #[test]
    fn custom_ita_phrases() {
        let ex = AnswerExtractor {
            ita_phrases: vec!["no idea".into()],
        };
        assert!(ex.extract("Answer: no idea", 3).is_ita());
        assert!(ex.extract("cannot be determined", 3).is_parse_failure());
    }

    #[test]
    fn refined_leading_letter() {
        let ex = AnswerExtractor::default();
        assert_eq!(ex.extract_refined("B. Because the user...", 4).kind, AnswerKind::Choice(1));
        assert_eq!(ex.extract_refined("Bob thinks", 4).kind, AnswerKind::ParseFailure);
        assert_eq!(ex.extract_refined("Answer: C", 4).kind, AnswerKind::Choice(2));
    }

    #[test]
    fn section_examples() {
        let s = extract_vbn_sections("<EV>likes safety</EV><PBN>trusts rules</PBN>Answer: C.");
        assert_eq!((s.ev_text.as_str(), s.pbn_text.as_str(), s.repaired), ("likes safety", "trusts rules", false));
        assert_eq!(extract_vbn_sections("no tags"), VbnSections::default());
        let s = extract_vbn_sections("<EV>open tag only ... Answer: A.");
        assert_eq!((s.ev_text.as_str(), s.pbn_text.as_str(), s.repaired), ("", "", true));
        let out = VbnOutput::parse("<ev> a </ev>\nAnswer: A", 2, &AnswerExtractor::default());
        assert_eq!(out.ev_text, "a");
        assert_eq!(out.answer.kind, AnswerKind::Choice(0));
    }

    fn refine_provider(flip: bool) -> Provider {
        Provider::scripted(ScriptedBackend::new(move |req: &GenerationRequest| {
            if req.prompt.ends_with("Feedback:") {
                return "The answer is reasonable.".to_string();
            }
            let selected = req
                .prompt
                .lines()
                .find_map(|l| l.strip_prefix("Answer: "))
                .unwrap_or("A")
                .chars()
                .next()
                .unwrap();
            let next = match (flip, selected) {
                (true, 'A') => 'B',
                (true, 'B') => 'A',
                (_, c) => c,
            };
            format!("{next}. Because of the feedback.")
        }))
    }

    #[test]
    fn self_refine_fixed_point_and_flip() {
        let q = question();
        let settings = GenerationSettings::new("m");
        let ex = AnswerExtractor::default();
        let initial = AnswerOutcome::choice(0, "Answer: A.");
        let out = run_self_refine(&refine_provider(false), &settings, &ex, &q, &initial, 2).unwrap();
        assert_eq!(out.answer.kind, AnswerKind::Choice(0));
        assert_eq!(out.calls, 4);
        let out = run_self_refine(&refine_provider(true), &settings, &ex, &q, &initial, 2).unwrap();
        assert_eq!(out.answer.kind, AnswerKind::Choice(0));
        let out = run_self_refine(&refine_provider(true), &settings, &ex, &q, &initial, 1).unwrap();
        assert_eq!(out.answer.kind, AnswerKind::Choice(1));
        assert!(run_self_refine(&refine_provider(true), &settings, &ex, &q, &initial, 0).is_err());
    }

    #[test]
    fn self_refine_keeps_last_good_answer() {
        let p = Provider::scripted(ScriptedBackend::constant("I would rather not say"));
        let q = question();
        let initial = AnswerOutcome::choice(2, "Answer: C.");
        let out = run_self_refine(&p, &GenerationSettings::new("m"), &AnswerExtractor::default(), &q, &initial, 2).unwrap();
        assert_eq!(out.answer, initial);
        assert!(out.flagged);
    }

    proptest! {
        #[test]
        fn extraction_is_total(text in ".{0,200}", n in 2usize..8) {
            let out = extract_answer(&text, n);
            if let Some(i) = out.choice_index() {
                prop_assert!(i < n);
            }
            let _ = AnswerExtractor::default().extract_refined(&text, n);
            let _ = extract_vbn_sections(&text);
        }

        #[test]
        fn letter_after_marker_is_read(prose in "[a-z ,.]{0,60}", idx in 0usize..4) {
            let letter = (b'A' + idx as u8) as char;
            let text = format!("{prose}\nAnswer: {letter}. because");
            prop_assert_eq!(extract_answer(&text, 4).kind, AnswerKind::Choice(idx));
        }
    }
}
