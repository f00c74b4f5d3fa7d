//! Prompt templates, stored line by line.
//!
//! Lines are joined with `\n`. A line that is exactly `{slot}` is replaced by
//! a (possibly multi-line) block; `{slot}` inside a longer line is replaced
//! inline. Builders in [`crate::fea`], [`crate::ranking`] and
//! [`crate::reasoning`] decide which lines to keep.

use crate::provider::digest_hex;

pub const FEA: &[&str] = &[
    "A person can be described by the following attributes:",
    "{original_attribute_list}",
    "Based on the above list of demographic information above, now I give you a new question with possible answer choices:",
    "Question: '{test_question}'",
    "Answer choices: '{test_choices}'",
    "Please analyze which attributes in the demographic information are useful for you to answer the above question step by step. Give me the output in the Python list format: [...]",
    "Give me the answer in the format below:",
    "Explanations: ... ",
    "Answer: [...]",
];

pub const RANKING: &[&str] = &[
    "Given social behavior question-answer pairs answered by a user about his/her opinions about {subtopic}:",
    "{original_persona_question_order}",
    "You are an expert in analyzing the social behaviors of a user. Given a new question asking him/her:",
    "'{test_question}'",
    "Your task is to sort the list of given question-answer pairs in descending order such that the first question-answer pair brings the most useful information to answer the new question, whilst the last question-answer pair brings the least useful information.",
    "Give me the answer in the form of a Python list of indexes:",
    "Answer: [...]",
];

/// Opening lines for the explicit persona; dropped when it is empty.
pub const EXPLICIT_BLOCK: &[&str] = &["A person can be described as follows:", "{explicit_persona_str}"];

/// Opening lines for the implicit persona; dropped when it is empty.
pub const IMPLICIT_BLOCK: &[&str] = &[
    "The person has the following opinions on {topic}.",
    "Opinions:",
    "{implicit_persona_str}",
];

pub const VBN_QUESTION: &[&str] = &[
    "Given the following question:",
    "Question: {question}",
    "Answer choices: {choice}",
    "Answer the above question by following the steps below:",
];
pub const VBN_EV_STEP: &str = "Analyze the user's demographics and ideology one by one to infer their social and environmental values. Wrap this analysis by <EV> and </EV>.";
pub const VBN_PBN_STEP: &str = "Analyze the user's historical opinions to infer their beliefs and norms from their social and environmental values. Wrap this analysis by <PBN> and </PBN>.";
pub const VBN_FINAL_STEP: &str =
    "From the above analyses, which opinion he is likely to choose? Answer: A. or B. or C. or D. or E....";

pub const WITHOUT_PERSONA: &[&str] = &[
    "Question: {question}",
    "Answer choices:",
    "{choice}",
    "Complete the answer by the following format without any explanation:",
    "Answer: A. or B. or C. or D. or E...",
];

pub const DIO_QUESTION: &[&str] = &[
    "Based on the above information, which answer choice is the user most likely to choose?",
    "Question: {question}",
    "Answer choices: {choice}",
    "Give the answer in the format:",
    "Answer: A. or B. or C. or D. or E....",
];

pub const COT_QUESTION: &[&str] = &[
    "Based on the above information, answer the following question step-by-step:",
    "Question: {question}",
    "Answer choices: {choice}",
    "Give the answer in the format:",
    "Answer: A. or B. or C. or D. or E....",
    "Explanations:...",
];

/// Earlier chain-of-opinion instruction, kept for the ablation rows.
pub const LEGACY_COO_QUESTION: &[&str] = &[
    "Based on the above information, answer the following question step-by-step by explaining and analyzing each of the Opinions and Demographic Information:",
    "Question: {question}",
    "Answer choices: {choice}",
    "Give the answer in the format:",
    "Answer: A. or B. or C. or D. or E....",
    "Explanations:...",
];

pub const REFINE_FEEDBACK: &[&str] = &[
    "You are given a question and an answer for that question. Analyze the question and the answer and provide some feedback on the answer to the question. Don't change the answer, just provide feedback.",
    "Question: {test_question}",
    "Choices: {choices}",
    "Answer: {selected_choice}",
    "Feedback:",
];

pub const REFINE_EDIT: &[&str] = &[
    "You are given a question, an answer to that question, and feedback to the answer. Based on the feedback, refine your answer and generate the final answer in around 170 words.",
    "Question: {test_question}",
    "Answer: {selected_choice}",
    "Feedback: {feedback}",
    "Refined answer:",
];

/// Every template with a stable name, for manifests.
pub const ALL: &[(&str, &[&str])] = &[
    ("fea", FEA),
    ("ranking", RANKING),
    ("explicit_block", EXPLICIT_BLOCK),
    ("implicit_block", IMPLICIT_BLOCK),
    ("vbn_question", VBN_QUESTION),
    ("vbn_ev_step", &[VBN_EV_STEP]),
    ("vbn_pbn_step", &[VBN_PBN_STEP]),
    ("vbn_final_step", &[VBN_FINAL_STEP]),
    ("without_persona", WITHOUT_PERSONA),
    ("dio_question", DIO_QUESTION),
    ("cot_question", COT_QUESTION),
    ("legacy_coo_question", LEGACY_COO_QUESTION),
    ("refine_feedback", REFINE_FEEDBACK),
    ("refine_edit", REFINE_EDIT),
];

/// SHA-256 of each template's joined text.
pub fn digests() -> Vec<(String, String)> {
    ALL.iter()
        .map(|(name, lines)| (name.to_string(), digest_hex(lines.join("\n").as_bytes())))
        .collect()
}

/// Substitutes `slots` into `lines` in a single pass, so substituted text is
/// never rescanned. Unknown placeholders are left as is.
pub fn render(lines: &[&str], slots: &[(&str, &str)]) -> Vec<String> {
    lines
        .iter()
        .map(|line| {
            let mut out = String::with_capacity(line.len());
            let mut rest = *line;
            while let Some(open) = rest.find('{') {
                out.push_str(&rest[..open]);
                let tail = &rest[open + 1..];
                let slot = tail
                    .find('}')
                    .and_then(|close| slots.iter().find(|(n, _)| *n == &tail[..close]).map(|s| (close, s.1)));
                match slot {
                    Some((close, value)) => {
                        out.push_str(value);
                        rest = &tail[close + 1..];
                    }
                    None => {
                        out.push('{');
                        rest = tail;
                    }
                }
            }
            out.push_str(rest);
            out
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn anchors_present() {
        assert!(RANKING.join("\n").contains("sort the list of given question-answer pairs"));
        assert!(VBN_EV_STEP.contains("Wrap this analysis by <EV> and </EV>"));
        assert!(DIO_QUESTION.contains(&"Answer: A. or B. or C. or D. or E...."));
        assert!(FEA.contains(&"Explanations: ... "));
    }

    #[test]
    fn render_inline_and_block() {
        let out = render(&["a {x} b", "{y}"], &[("x", "1"), ("y", "l1\nl2")]);
        assert_eq!(out, vec!["a 1 b".to_string(), "l1\nl2".to_string()]);
        let out = render(&["{x} {y} {z}"], &[("x", "{y}"), ("y", "2")]);
        assert_eq!(out, vec!["{y} 2 {z}".to_string()]);
    }

    #[test]
    fn digests_are_stable_and_distinct() {
        let d = digests();
        assert_eq!(d, digests());
        let unique: std::collections::HashSet<_> = d.iter().map(|(_, h)| h).collect();
        assert_eq!(unique.len(), d.len());
    }
}
