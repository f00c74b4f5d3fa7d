//! A deterministic stand-in model that recognizes every prompt this crate
//! builds and answers in the expected format. Used for offline runs.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{BackendReply, GenerationRequest, ProviderError, TextGenerator};
use crate::templates;

/// How the oracle picks answer letters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScriptedAnswer {
    /// Always the first choice; keeps every attribute and the given order.
    #[default]
    First,
    /// A choice, attribute subset and order derived from a digest of the
    /// prompt and sample index.
    Hash,
}

#[derive(Debug, Clone, Default)]
pub struct ScriptedOracle {
    pub answer: ScriptedAnswer,
}

fn digest_u64(parts: &[&[u8]]) -> u64 {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("digest has 32 bytes"))
}

/// Number of lettered choice lines ("A. ...", "B. ...") in an answer prompt.
fn count_choices(prompt: &str) -> usize {
    let mut n = 0;
    for line in prompt.lines() {
        let line = line.strip_prefix("Answer choices: ").unwrap_or(line);
        let expected = (b'A' + n as u8) as char;
        if n < 26 && line.starts_with(expected) && line[1..].starts_with(". ") {
            n += 1;
        }
    }
    n
}

impl ScriptedOracle {
    pub fn new(answer: ScriptedAnswer) -> Self {
        Self { answer }
    }

    fn fea(&self, prompt: &str) -> String {
        let names: Vec<&str> = prompt
            .lines()
            .skip(1)
            .take_while(|l| *l != templates::FEA[2])
            .filter_map(|l| l.split_once(": ").map(|(n, _)| n))
            .collect();
        let kept: Vec<String> = names
            .iter()
            .filter(|n| match self.answer {
                ScriptedAnswer::First => true,
                ScriptedAnswer::Hash => !digest_u64(&[n.as_bytes(), prompt.as_bytes()]).is_multiple_of(3),
            })
            .map(|n| format!("'{n}'"))
            .collect();
        format!("Explanations: these attributes relate to the question.\nAnswer: [{}]", kept.join(", "))
    }

    fn ranking(&self, prompt: &str) -> String {
        let pairs: Vec<&str> = prompt
            .lines()
            .skip(1)
            .take_while(|l| *l != templates::RANKING[2])
            .collect();
        let target = prompt
            .lines()
            .skip_while(|l| *l != templates::RANKING[2])
            .nth(1)
            .unwrap_or("");
        let mut order: Vec<usize> = (1..=pairs.len()).collect();
        if self.answer == ScriptedAnswer::Hash {
            // Order by a digest of the pair text so the ranking does not
            // depend on presentation order.
            order.sort_by_key(|&i| {
                let text = pairs[i - 1].split_once(". ").map_or(pairs[i - 1], |(_, t)| t);
                digest_u64(&[text.as_bytes(), target.as_bytes()])
            });
        }
        let list: Vec<String> = order.iter().map(usize::to_string).collect();
        format!("Answer: [{}]", list.join(", "))
    }

    fn letter(&self, prompt: &str, sample_index: u32, n: usize) -> char {
        let i = match self.answer {
            ScriptedAnswer::First => 0,
            ScriptedAnswer::Hash => (digest_u64(&[prompt.as_bytes(), &sample_index.to_le_bytes()]) % n as u64) as usize,
        };
        (b'A' + i as u8) as char
    }

    fn answer(&self, req: &GenerationRequest) -> String {
        let prompt = &req.prompt;
        let n = count_choices(prompt).max(1);
        let letter = self.letter(prompt, req.sample_index, n);
        let mut out = String::new();
        if prompt.contains("<EV> and </EV>") {
            out.push_str("<EV>The demographics suggest stable values.</EV>\n");
        }
        if prompt.contains("<PBN> and </PBN>") {
            out.push_str("<PBN>Past opinions reflect these values.</PBN>\n");
        }
        out.push_str(&format!("Answer: {letter}."));
        if prompt.contains("Explanations:...") {
            out.push_str("\nExplanations: the opinions point this way.");
        }
        out
    }

    pub fn respond(&self, req: &GenerationRequest) -> String {
        let prompt = req.prompt.as_str();
        let first = prompt.lines().next().unwrap_or("");
        if first == templates::FEA[0] {
            self.fea(prompt)
        } else if prompt.contains(templates::RANKING[4]) {
            self.ranking(prompt)
        } else if first == templates::REFINE_FEEDBACK[0] {
            "The answer is consistent with the question.".to_string()
        } else if first == templates::REFINE_EDIT[0] {
            let current = prompt
                .lines()
                .find_map(|l| l.strip_prefix("Answer: "))
                .and_then(|a| a.chars().next())
                .filter(char::is_ascii_uppercase)
                .unwrap_or('A');
            format!("Answer: {current}.")
        } else {
            self.answer(req)
        }
    }
}

impl TextGenerator for ScriptedOracle {
    fn complete(&self, req: &GenerationRequest) -> Result<BackendReply, ProviderError> {
        Ok(BackendReply::text(self.respond(req)))
    }
}
