//! Value types shared by every stage of the pipeline.
//!
//! Everything here is an immutable value after construction. Validation
//! happens in the constructors (or in [`UserRecord::validate`]) so later
//! stages can assume well-formed indices.

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Largest number of answer choices a question may carry (one per letter).
pub const MAX_CHOICES: usize = 26;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ModelError {
    #[error("choice index {0} is outside the letter range A..Z")]
    IndexOutOfRange(usize),
    #[error("cannot read {0:?} as a choice letter")]
    NotALetter(String),
    #[error("{context}: expected at least 2 choices, found {found}")]
    TooFewChoices { context: String, found: usize },
    #[error("{context}: {found} choices exceeds the limit of {MAX_CHOICES}")]
    TooManyChoices { context: String, found: usize },
    #[error("{context}: index {index} does not address one of {len} choices")]
    ChoiceOutOfRange {
        context: String,
        index: usize,
        len: usize,
    },
    #[error("attribute {0:?} is not part of the attribute schema")]
    UnknownAttribute(String),
    #[error("attribute {0:?} appears more than once")]
    DuplicateAttribute(String),
    #[error("duplicate question id {0:?}")]
    DuplicateQuestionId(String),
    #[error("test {question_id:?} has topic {found:?} but the user record is {expected:?}")]
    TopicMismatch {
        question_id: String,
        expected: String,
        found: String,
    },
    #[error("question text {0:?} appears both as an implicit opinion and as a test")]
    OverlappingQuestion(String),
}

/// Uppercase letter for a zero-based choice index.
pub fn letter_of(index: usize) -> Result<char, ModelError> {
    if index >= MAX_CHOICES {
        return Err(ModelError::IndexOutOfRange(index));
    }
    Ok((b'A' + index as u8) as char)
}

/// Inverse of [`letter_of`]; accepts either case.
pub fn index_of_letter(letter: &str) -> Result<usize, ModelError> {
    let mut chars = letter.chars();
    match (chars.next(), chars.next()) {
        (Some(c), None) if c.is_ascii_alphabetic() => {
            Ok((c.to_ascii_uppercase() as u8 - b'A') as usize)
        }
        _ => Err(ModelError::NotALetter(letter.to_string())),
    }
}

/// Key used to compare attribute names: lowercase, punctuation stripped,
/// whitespace collapsed.
pub fn normalize_attribute_name(name: &str) -> String {
    let cleaned: String = name
        .chars()
        .map(|c| {
            if c.is_alphanumeric() {
                c.to_ascii_lowercase()
            } else {
                ' '
            }
        })
        .collect();
    cleaned.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Ordered universe of explicit attribute names for a run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct AttributeSchema {
    names: Vec<String>,
}

impl AttributeSchema {
    pub const DEFAULT_NAMES: [&'static str; 12] = [
        "Age",
        "Gender",
        "Race",
        "Citizenship",
        "Education",
        "Income",
        "Marital status",
        "Religion",
        "Frequency of religious attendance",
        "Region",
        "Political party",
        "Political ideology",
    ];

    pub fn new<I, S>(names: I) -> Result<Self, ModelError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for name in names {
            let name: String = name.into();
            let name = name.trim().to_string();
            if !seen.insert(normalize_attribute_name(&name)) {
                return Err(ModelError::DuplicateAttribute(name));
            }
            out.push(name);
        }
        Ok(Self { names: out })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Position of `name` after normalization, if present.
    pub fn position(&self, name: &str) -> Option<usize> {
        let key = normalize_attribute_name(name);
        self.names
            .iter()
            .position(|n| normalize_attribute_name(n) == key)
    }

    /// Canonical spelling of `name`, if the schema knows it.
    pub fn canonical(&self, name: &str) -> Option<&str> {
        self.position(name).map(|i| self.names[i].as_str())
    }
}

impl Default for AttributeSchema {
    fn default() -> Self {
        Self {
            names: Self::DEFAULT_NAMES.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl TryFrom<Vec<String>> for AttributeSchema {
    type Error = ModelError;

    fn try_from(names: Vec<String>) -> Result<Self, Self::Error> {
        Self::new(names)
    }
}

impl From<AttributeSchema> for Vec<String> {
    fn from(schema: AttributeSchema) -> Self {
        schema.names
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PersonaEntry {
    pub name: String,
    pub value: String,
}

/// A user's declared demographics and ideology, in presentation order.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ExplicitPersona {
    entries: Vec<PersonaEntry>,
}

impl ExplicitPersona {
    /// Builds a persona whose names are checked against `schema` and stored
    /// in the schema's spelling.
    pub fn new<I, N, V>(entries: I, schema: &AttributeSchema) -> Result<Self, ModelError>
    where
        I: IntoIterator<Item = (N, V)>,
        N: Into<String>,
        V: Into<String>,
    {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for (name, value) in entries {
            let name: String = name.into();
            let canonical = schema
                .canonical(&name)
                .ok_or_else(|| ModelError::UnknownAttribute(name.clone()))?;
            if !seen.insert(canonical.to_string()) {
                return Err(ModelError::DuplicateAttribute(canonical.to_string()));
            }
            out.push(PersonaEntry {
                name: canonical.to_string(),
                value: value.into(),
            });
        }
        Ok(Self { entries: out })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn entries(&self) -> &[PersonaEntry] {
        &self.entries
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Keeps the entries whose index satisfies `keep`, preserving order.
    pub fn retain_indices(&self, keep: impl Fn(usize) -> bool) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .enumerate()
                .filter(|(i, _)| keep(*i))
                .map(|(_, e)| e.clone())
                .collect(),
        }
    }
}

fn check_choices(context: &str, choices: &[String], index: usize) -> Result<(), ModelError> {
    if choices.len() < 2 {
        return Err(ModelError::TooFewChoices {
            context: context.to_string(),
            found: choices.len(),
        });
    }
    if choices.len() > MAX_CHOICES {
        return Err(ModelError::TooManyChoices {
            context: context.to_string(),
            found: choices.len(),
        });
    }
    if index >= choices.len() {
        return Err(ModelError::ChoiceOutOfRange {
            context: context.to_string(),
            index,
            len: choices.len(),
        });
    }
    Ok(())
}

/// One historical question the user answered.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImplicitOpinion {
    pub question_text: String,
    pub choices: Vec<String>,
    pub chosen_index: usize,
}

impl ImplicitOpinion {
    pub fn new(
        question_text: impl Into<String>,
        choices: Vec<String>,
        chosen_index: usize,
    ) -> Result<Self, ModelError> {
        let question_text = question_text.into();
        check_choices(&question_text, &choices, chosen_index)?;
        Ok(Self {
            question_text,
            choices,
            chosen_index,
        })
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        check_choices(&self.question_text, &self.choices, self.chosen_index)
    }

    pub fn chosen_text(&self) -> &str {
        &self.choices[self.chosen_index]
    }
}

/// A multiple-choice test item with its gold label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpinionQuestion {
    pub question_id: String,
    pub topic: String,
    pub text: String,
    pub choices: Vec<String>,
    pub gold_index: usize,
}

impl OpinionQuestion {
    pub fn new(
        question_id: impl Into<String>,
        topic: impl Into<String>,
        text: impl Into<String>,
        choices: Vec<String>,
        gold_index: usize,
    ) -> Result<Self, ModelError> {
        let q = Self {
            question_id: question_id.into(),
            topic: topic.into(),
            text: text.into(),
            choices,
            gold_index,
        };
        q.validate()?;
        Ok(q)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        check_choices(&self.question_id, &self.choices, self.gold_index)
    }

    pub fn gold_text(&self) -> &str {
        &self.choices[self.gold_index]
    }
}

/// One survey participant with persona and held-out tests.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserRecord {
    pub user_id: String,
    pub topic: String,
    pub explicit: ExplicitPersona,
    pub implicit: Vec<ImplicitOpinion>,
    pub tests: Vec<OpinionQuestion>,
}

impl UserRecord {
    /// Checks every index range, topic agreement, and persona/test
    /// disjointness.
    pub fn validate(&self) -> Result<(), ModelError> {
        for op in &self.implicit {
            op.validate()?;
        }
        let history: HashSet<&str> = self
            .implicit
            .iter()
            .map(|op| op.question_text.as_str())
            .collect();
        let mut ids = HashSet::new();
        for t in &self.tests {
            t.validate()?;
            if t.topic != self.topic {
                return Err(ModelError::TopicMismatch {
                    question_id: t.question_id.clone(),
                    expected: self.topic.clone(),
                    found: t.topic.clone(),
                });
            }
            if !ids.insert(t.question_id.as_str()) {
                return Err(ModelError::DuplicateQuestionId(t.question_id.clone()));
            }
            if history.contains(t.text.as_str()) {
                return Err(ModelError::OverlappingQuestion(t.text.clone()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", content = "index")]
pub enum AnswerKind {
    Choice(usize),
    ImpossibleToAnswer,
    /// The response carried neither a usable letter nor a refusal.
    ParseFailure,
}

/// A parsed model answer together with the text it was read from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerOutcome {
    pub kind: AnswerKind,
    pub raw_text: String,
}

impl AnswerOutcome {
    pub fn choice(index: usize, raw_text: impl Into<String>) -> Self {
        Self {
            kind: AnswerKind::Choice(index),
            raw_text: raw_text.into(),
        }
    }

    pub fn ita(raw_text: impl Into<String>) -> Self {
        Self {
            kind: AnswerKind::ImpossibleToAnswer,
            raw_text: raw_text.into(),
        }
    }

    pub fn parse_failure(raw_text: impl Into<String>) -> Self {
        Self {
            kind: AnswerKind::ParseFailure,
            raw_text: raw_text.into(),
        }
    }

    pub fn choice_index(&self) -> Option<usize> {
        match self.kind {
            AnswerKind::Choice(i) => Some(i),
            _ => None,
        }
    }

    pub fn is_ita(&self) -> bool {
        self.kind == AnswerKind::ImpossibleToAnswer
    }

    pub fn is_parse_failure(&self) -> bool {
        self.kind == AnswerKind::ParseFailure
    }

    /// Short label used in CSV output: a letter, `ITA`, or `FAIL`.
    pub fn label(&self) -> String {
        match self.kind {
            AnswerKind::Choice(i) => letter_of(i).map(String::from).unwrap_or_default(),
            AnswerKind::ImpossibleToAnswer => "ITA".to_string(),
            AnswerKind::ParseFailure => "FAIL".to_string(),
        }
    }
}

impl fmt::Display for AnswerOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

/// Final output for one test question.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub question_id: String,
    pub final_answer: AnswerOutcome,
    pub per_k: BTreeMap<usize, AnswerOutcome>,
    #[serde(default)]
    pub ev_text: String,
    #[serde(default)]
    pub pbn_text: String,
    #[serde(default)]
    pub explanation: String,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn choices(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("choice {i}")).collect()
    }

    #[test]
    fn letters() {
        assert_eq!(letter_of(0).unwrap(), 'A');
        assert_eq!(letter_of(3).unwrap(), 'D');
        assert_eq!(letter_of(26), Err(ModelError::IndexOutOfRange(26)));
        assert_eq!(index_of_letter("B").unwrap(), 1);
        assert_eq!(index_of_letter("e").unwrap(), 4);
        assert!(index_of_letter("1").is_err());
        assert!(index_of_letter("AB").is_err());
        assert!(index_of_letter("").is_err());
    }

    #[test]
    fn letter_round_trip() {
        for i in 0..MAX_CHOICES {
            let l = letter_of(i).unwrap().to_string();
            assert_eq!(index_of_letter(&l).unwrap(), i);
        }
    }

    #[test]
    fn default_schema_has_twelve_unique_names() {
        let s = AttributeSchema::default();
        assert_eq!(s.len(), 12);
        assert!(AttributeSchema::new(s.names().to_vec()).is_ok());
        assert_eq!(s.canonical("  political PARTY "), Some("Political party"));
        assert!(AttributeSchema::new(["Age", " age "]).is_err());
    }

    #[test]
    fn persona_rejects_unknown_and_duplicate_names() {
        let s = AttributeSchema::default();
        assert!(ExplicitPersona::new([("Zodiac", "Leo")], &s).is_err());
        assert!(ExplicitPersona::new([("Age", "18-29"), ("age", "30-49")], &s).is_err());
        let p = ExplicitPersona::new([("gender", "Female")], &s).unwrap();
        assert_eq!(p.entries()[0].name, "Gender");
    }

    #[test]
    fn question_ranges() {
        assert!(OpinionQuestion::new("q", "t", "x", choices(4), 3).is_ok());
        assert!(OpinionQuestion::new("q", "t", "x", choices(4), 4).is_err());
        assert!(OpinionQuestion::new("q", "t", "x", choices(1), 0).is_err());
        assert!(OpinionQuestion::new("q", "t", "x", choices(27), 0).is_err());
        assert!(ImplicitOpinion::new("x", choices(4), 7).is_err());
    }

    #[test]
    fn user_validation_catches_overlap_and_topic() {
        let mut u = UserRecord {
            user_id: "u".into(),
            topic: "guns".into(),
            explicit: ExplicitPersona::empty(),
            implicit: vec![ImplicitOpinion::new("same", choices(2), 0).unwrap()],
            tests: vec![OpinionQuestion::new("q1", "guns", "other", choices(2), 1).unwrap()],
        };
        assert!(u.validate().is_ok());
        u.tests[0].text = "same".into();
        assert!(matches!(
            u.validate(),
            Err(ModelError::OverlappingQuestion(_))
        ));
        u.tests[0].text = "other".into();
        u.tests[0].topic = "science".into();
        assert!(matches!(u.validate(), Err(ModelError::TopicMismatch { .. })));
    }

    proptest! {
        #[test]
        fn malformed_indices_are_rejected(
            n_choices in 2usize..8,
            index in 0usize..16,
            as_test in any::<bool>(),
        ) {
            let opinion = ImplicitOpinion {
                question_text: "h".into(),
                choices: choices(n_choices),
                chosen_index: if as_test { 0 } else { index },
            };
            let test = OpinionQuestion {
                question_id: "q".into(),
                topic: "t".into(),
                text: "x".into(),
                choices: choices(n_choices),
                gold_index: if as_test { index } else { 0 },
            };
            let u = UserRecord {
                user_id: "u".into(),
                topic: "t".into(),
                explicit: ExplicitPersona::empty(),
                implicit: vec![opinion],
                tests: vec![test],
            };
            prop_assert_eq!(u.validate().is_ok(), index < n_choices);
        }
    }
}
