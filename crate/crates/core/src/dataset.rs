//! Dataset loading, evaluation-split sampling and fine-tuning export.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::{
    letter_of, index_of_letter, AttributeSchema, ExplicitPersona, ImplicitOpinion, ModelError, OpinionQuestion,
    UserRecord,
};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("line {line}: {message}")]
    Line { line: usize, message: String },
    #[error("duplicate user id {user_id:?} on line {line}")]
    DuplicateUser { user_id: String, line: usize },
    #[error("invalid split config: {0}")]
    Config(String),
    #[error("malformed fine-tuning line: {0}")]
    Format(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RawEntry {
    name: String,
    value: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RawOpinion {
    question: String,
    choices: Vec<String>,
    chosen_index: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RawTest {
    question_id: String,
    question: String,
    choices: Vec<String>,
    gold_index: usize,
}

/// One line of the canonical dataset file.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct RawUser {
    user_id: String,
    topic: String,
    #[serde(default)]
    explicit: Vec<RawEntry>,
    #[serde(default)]
    implicit: Vec<RawOpinion>,
    #[serde(default)]
    tests: Vec<RawTest>,
}

impl RawUser {
    fn into_record(self, schema: &AttributeSchema) -> Result<UserRecord, ModelError> {
        let explicit = ExplicitPersona::new(self.explicit.into_iter().map(|e| (e.name, e.value)), schema)?;
        let implicit = self
            .implicit
            .into_iter()
            .map(|o| ImplicitOpinion::new(o.question, o.choices, o.chosen_index))
            .collect::<Result<Vec<_>, _>>()?;
        let tests = self
            .tests
            .into_iter()
            .map(|t| OpinionQuestion::new(t.question_id, &self.topic, t.question, t.choices, t.gold_index))
            .collect::<Result<Vec<_>, _>>()?;
        let record = UserRecord {
            user_id: self.user_id,
            topic: self.topic,
            explicit,
            implicit,
            tests,
        };
        record.validate()?;
        Ok(record)
    }

    fn from_record(u: &UserRecord) -> Self {
        Self {
            user_id: u.user_id.clone(),
            topic: u.topic.clone(),
            explicit: u
                .explicit
                .entries()
                .iter()
                .map(|e| RawEntry { name: e.name.clone(), value: e.value.clone() })
                .collect(),
            implicit: u
                .implicit
                .iter()
                .map(|o| RawOpinion {
                    question: o.question_text.clone(),
                    choices: o.choices.clone(),
                    chosen_index: o.chosen_index,
                })
                .collect(),
            tests: u
                .tests
                .iter()
                .map(|t| RawTest {
                    question_id: t.question_id.clone(),
                    question: t.text.clone(),
                    choices: t.choices.clone(),
                    gold_index: t.gold_index,
                })
                .collect(),
        }
    }
}

/// Reads validated user records, one JSON object per line. Blank lines are
/// ignored.
pub fn read_dataset(reader: impl BufRead, schema: &AttributeSchema) -> Result<Vec<UserRecord>, DatasetError> {
    let mut users = Vec::new();
    let mut ids = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawUser = serde_json::from_str(&line).map_err(|e| DatasetError::Line {
            line: line_no,
            message: e.to_string(),
        })?;
        let record = raw.into_record(schema).map_err(|e| DatasetError::Line {
            line: line_no,
            message: e.to_string(),
        })?;
        if !ids.insert(record.user_id.clone()) {
            return Err(DatasetError::DuplicateUser { user_id: record.user_id, line: line_no });
        }
        users.push(record);
    }
    Ok(users)
}

pub fn load_dataset(path: impl AsRef<Path>, schema: &AttributeSchema) -> Result<Vec<UserRecord>, DatasetError> {
    read_dataset(BufReader::new(File::open(path)?), schema)
}

/// Writes users in the canonical line format.
pub fn write_dataset(users: &[UserRecord], mut out: impl Write) -> Result<(), DatasetError> {
    for u in users {
        serde_json::to_writer(&mut out, &RawUser::from_record(u)).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Stable 64-bit seed for a named sub-stream of `seed`.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    pub users_per_topic: usize,
    pub persona_fraction: f64,
    pub max_tests_per_user: usize,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            users_per_topic: 25,
            persona_fraction: 0.2,
            max_tests_per_user: 15,
            seed: 0,
        }
    }
}

impl SplitConfig {
    pub fn validate(&self) -> Result<(), DatasetError> {
        if !(self.persona_fraction > 0.0 && self.persona_fraction < 1.0) {
            return Err(DatasetError::Config("persona_fraction must lie strictly between 0 and 1".into()));
        }
        if self.users_per_topic == 0 || self.max_tests_per_user == 0 {
            return Err(DatasetError::Config(
                "users_per_topic and max_tests_per_user must be at least 1".into(),
            ));
        }
        Ok(())
    }

    pub fn persona_size(&self, n: usize) -> usize {
        (self.persona_fraction * n as f64).floor() as usize
    }
}

/// A user's full answered history: existing tests are folded back in as
/// opinions, and repeated question texts keep their first occurrence.
fn full_history(u: &UserRecord) -> Vec<ImplicitOpinion> {
    let mut seen = HashSet::new();
    u.implicit
        .iter()
        .cloned()
        .chain(u.tests.iter().map(|t| ImplicitOpinion {
            question_text: t.text.clone(),
            choices: t.choices.clone(),
            chosen_index: t.gold_index,
        }))
        .filter(|o| seen.insert(o.question_text.clone()))
        .collect()
}

fn split_user(u: &UserRecord, history: Vec<ImplicitOpinion>, cfg: &SplitConfig) -> UserRecord {
    let n = history.len();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &format!("user:{}", u.user_id)));
    let persona_n = cfg.persona_size(n);
    let test_n = cfg.max_tests_per_user.min(n - persona_n);
    // A full permutation keeps the persona independent of the test cap.
    let mut picked: Vec<usize> = (0..n).collect();
    picked.shuffle(&mut rng);
    let mut persona_idx = picked[..persona_n].to_vec();
    let mut test_idx = picked[persona_n..persona_n + test_n].to_vec();
    persona_idx.sort_unstable();
    test_idx.sort_unstable();
    UserRecord {
        user_id: u.user_id.clone(),
        topic: u.topic.clone(),
        explicit: u.explicit.clone(),
        implicit: persona_idx.iter().map(|&i| history[i].clone()).collect(),
        tests: test_idx
            .iter()
            .map(|&i| OpinionQuestion {
                question_id: format!("{}:{i}", u.user_id),
                topic: u.topic.clone(),
                text: history[i].question_text.clone(),
                choices: history[i].choices.clone(),
                gold_index: history[i].chosen_index,
            })
            .collect(),
    }
}

/// Samples users per topic and splits each user's history into persona and
/// tests. Output is ordered by topic, then user id.
pub fn sample_evaluation_split(users: &[UserRecord], cfg: &SplitConfig) -> Result<Vec<UserRecord>, DatasetError> {
    cfg.validate()?;
    let mut by_topic: BTreeMap<&str, Vec<(&UserRecord, Vec<ImplicitOpinion>)>> = BTreeMap::new();
    for u in users {
        let history = full_history(u);
        if history.len() < 2 {
            tracing::warn!(user = %u.user_id, items = history.len(), "skipping user with too little history");
            continue;
        }
        by_topic.entry(u.topic.as_str()).or_default().push((u, history));
    }
    let mut out = Vec::new();
    for (topic, mut pool) in by_topic {
        pool.sort_by(|a, b| a.0.user_id.cmp(&b.0.user_id));
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &format!("topic:{topic}")));
        let take = cfg.users_per_topic.min(pool.len());
        let mut chosen = sample(&mut rng, pool.len(), take).into_vec();
        chosen.sort_unstable();
        for i in chosen {
            let (u, history) = &pool[i];
            out.push(split_user(u, history.clone(), cfg));
        }
    }
    Ok(out)
}

/// Inputs and target for one fine-tuning example.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FinetuneRecord {
    pub explicit_rel: ExplicitPersona,
    pub implicit_rel: Vec<ImplicitOpinion>,
    pub ev_text: String,
    pub pbn_text: String,
    pub question: OpinionQuestion,
    pub answer_text: String,
}

impl FinetuneRecord {
    pub fn new(
        explicit_rel: ExplicitPersona,
        implicit_rel: Vec<ImplicitOpinion>,
        ev_text: impl Into<String>,
        pbn_text: impl Into<String>,
        question: OpinionQuestion,
    ) -> Self {
        let answer_text = question.gold_text().to_string();
        Self {
            explicit_rel,
            implicit_rel,
            ev_text: ev_text.into(),
            pbn_text: pbn_text.into(),
            question,
            answer_text,
        }
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        self.question.validate()?;
        if self.answer_text != self.question.gold_text() {
            return Err(DatasetError::Format(format!(
                "answer text {:?} is not the gold choice of {}",
                self.answer_text, self.question.question_id
            )));
        }
        Ok(())
    }

    /// The fields that survive the text format.
    pub fn line(&self) -> FinetuneLine {
        FinetuneLine {
            explicit: self
                .explicit_rel
                .entries()
                .iter()
                .map(|e| (e.name.clone(), e.value.clone()))
                .collect(),
            implicit: self
                .implicit_rel
                .iter()
                .map(|o| (o.question_text.clone(), o.chosen_text().to_string()))
                .collect(),
            ev_text: self.ev_text.clone(),
            pbn_text: self.pbn_text.clone(),
            question: self.question.text.clone(),
            choices: self.question.choices.clone(),
            answer_text: self.answer_text.clone(),
        }
    }
}

/// Parsed form of one exported line. Opinions keep only the chosen answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FinetuneLine {
    pub explicit: Vec<(String, String)>,
    pub implicit: Vec<(String, String)>,
    pub ev_text: String,
    pub pbn_text: String,
    pub question: String,
    pub choices: Vec<String>,
    pub answer_text: String,
}

const SEP: &str = " <SEP> ";
const ITEM_SEP: &str = " | ";
const OUTPUT: &str = "; Output: ";
const INPUT: &str = "Input: ";

fn escape(s: &str, extra: &[char]) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            '\\' | '<' | ';' | '|' => {
                out.push('\\');
                out.push(c);
            }
            c if extra.contains(&c) => {
                out.push('\\');
                out.push(c);
            }
            c => out.push(c),
        }
    }
    out
}

fn unescape(s: &str) -> Result<String, DatasetError> {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('n') => out.push('\n'),
            Some('r') => out.push('\r'),
            Some(c) => out.push(c),
            None => return Err(DatasetError::Format("dangling escape".into())),
        }
    }
    Ok(out)
}

/// Unescaped positions in raw (still escaped) text where `pat` begins.
fn unescaped_matches(s: &str, pat: &str) -> Vec<usize> {
    let bytes = s.as_bytes();
    let pat = pat.as_bytes();
    let mut hits = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i..].starts_with(pat) {
            hits.push(i);
            i += pat.len();
        } else if bytes[i] == b'\\' {
            i += 2;
        } else {
            i += 1;
        }
    }
    hits
}

/// Splits raw text on `sep`. Separators contain a character that content
/// always escapes, so an escaped one can never match.
fn split_raw<'a>(s: &'a str, sep: &str) -> Vec<&'a str> {
    let mut parts = Vec::new();
    let mut start = 0;
    for at in unescaped_matches(s, sep) {
        parts.push(&s[start..at]);
        start = at + sep.len();
    }
    parts.push(&s[start..]);
    parts
}

fn join_items(items: impl Iterator<Item = String>) -> String {
    items.collect::<Vec<_>>().join(ITEM_SEP)
}

fn split_items(raw: &str) -> Vec<&str> {
    if raw.is_empty() {
        Vec::new()
    } else {
        split_raw(raw, ITEM_SEP)
    }
}

fn split_pair(raw: &str, delim: &str) -> Result<(String, String), DatasetError> {
    let at = *unescaped_matches(raw, delim)
        .first()
        .ok_or_else(|| DatasetError::Format(format!("missing {delim:?} in {raw:?}")))?;
    Ok((unescape(&raw[..at])?, unescape(&raw[at + delim.len()..])?))
}

pub fn format_finetune_line(line: &FinetuneLine) -> String {
    let item = |s: &str| escape(s, &[':', '=']);
    let explicit = join_items(line.explicit.iter().map(|(n, v)| format!("{}: {}", item(n), item(v))));
    let implicit = join_items(line.implicit.iter().map(|(q, a)| format!("{} => {}", item(q), item(a))));
    let choices = join_items(
        line.choices
            .iter()
            .enumerate()
            .map(|(i, c)| format!("{}. {}", letter_of(i).unwrap_or('?'), escape(c, &[]))),
    );
    let fields = [
        explicit,
        implicit,
        escape(&line.ev_text, &[]),
        escape(&line.pbn_text, &[]),
        escape(&line.question, &[]),
        choices,
    ];
    format!("{INPUT}{}{OUTPUT}{}", fields.join(SEP), escape(&line.answer_text, &[]))
}

pub fn format_finetune_record(record: &FinetuneRecord) -> String {
    format_finetune_line(&record.line())
}

pub fn parse_finetune_line(text: &str) -> Result<FinetuneLine, DatasetError> {
    let body = text
        .strip_prefix(INPUT)
        .ok_or_else(|| DatasetError::Format("line does not start with \"Input: \"".into()))?;
    let out_at = *unescaped_matches(body, OUTPUT)
        .first()
        .ok_or_else(|| DatasetError::Format("missing \"; Output: \"".into()))?;
    let answer_text = unescape(&body[out_at + OUTPUT.len()..])?;
    let fields = split_raw(&body[..out_at], SEP);
    let [explicit, implicit, ev, pbn, question, choices] = fields[..] else {
        return Err(DatasetError::Format(format!("expected 6 fields, found {}", fields.len())));
    };
    let choices = split_items(choices)
        .into_iter()
        .enumerate()
        .map(|(i, c)| {
            let (letter, text) = c
                .split_once(". ")
                .ok_or_else(|| DatasetError::Format(format!("choice {c:?} has no letter")))?;
            if index_of_letter(letter).ok() != Some(i) {
                return Err(DatasetError::Format(format!("choice {c:?} is out of order")));
            }
            unescape(text)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(FinetuneLine {
        explicit: split_items(explicit)
            .into_iter()
            .map(|e| split_pair(e, ": "))
            .collect::<Result<_, _>>()?,
        implicit: split_items(implicit)
            .into_iter()
            .map(|e| split_pair(e, " => "))
            .collect::<Result<_, _>>()?,
        ev_text: unescape(ev)?,
        pbn_text: unescape(pbn)?,
        question: unescape(question)?,
        choices,
        answer_text,
    })
}

pub fn write_finetune_records(records: &[FinetuneRecord], mut out: impl Write) -> Result<usize, DatasetError> {
    for r in records {
        r.validate()?;
    }
    for r in records {
        writeln!(out, "{}", format_finetune_record(r))?;
    }
    out.flush()?;
    Ok(records.len())
}

/// Writes one line per record and returns the count.
pub fn export_finetune_records(records: &[FinetuneRecord], path: impl AsRef<Path>) -> Result<usize, DatasetError> {
    let file = File::create(path)?;
    write_finetune_records(records, BufWriter::new(file))
}
