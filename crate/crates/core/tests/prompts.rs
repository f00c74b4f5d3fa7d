//! Byte-exact prompt fixtures. Set `UPDATE_GOLDEN=1` to rewrite them after
//! a deliberate template change.

use std::path::PathBuf;

use coo_core::fea::build_fea_prompt;
use coo_core::model::{AnswerOutcome, AttributeSchema, ExplicitPersona, ImplicitOpinion, OpinionQuestion};
use coo_core::ranking::build_ranking_prompt;
use coo_core::reasoning::{build_feedback_prompt, build_prompt, build_refine_prompt, Strategy};
use coo_core::templates;

fn explicit() -> ExplicitPersona {
    ExplicitPersona::new(
        [
            ("Age", "30-49"),
            ("Gender", "Female"),
            ("Region", "South"),
            ("Political party", "Independent"),
            ("Political ideology", "Moderate"),
        ],
        &AttributeSchema::default(),
    )
    .unwrap()
}

fn implicit() -> Vec<ImplicitOpinion> {
    let scale = || ["Very important", "Somewhat important", "Not too important", "Not at all important"].map(String::from).to_vec();
    vec![
        ImplicitOpinion::new("How important is the right to own guns to your sense of freedom?", scale(), 1).unwrap(),
        ImplicitOpinion::new("Have you ever taken a gun safety course?", vec!["Yes".into(), "No".into()], 0).unwrap(),
        ImplicitOpinion::new("How important is hunting to you personally?", scale(), 3).unwrap(),
    ]
}

fn question() -> OpinionQuestion {
    OpinionQuestion::new(
        "u1:0",
        "guns",
        "Do you think it should be easier or harder to buy a gun?",
        ["Easier", "About the same", "Harder", "Refused"].map(String::from).to_vec(),
        2,
    )
    .unwrap()
}

fn cases() -> Vec<(&'static str, String)> {
    let (e, i, q) = (explicit(), implicit(), question());
    let none = ExplicitPersona::empty();
    let selected = AnswerOutcome::choice(2, "Answer: C.");
    vec![
        ("without_persona", build_prompt(&Strategy::without_persona(), &none, &[], &q, "guns").unwrap()),
        ("dio_top_k", build_prompt(&Strategy::dio(), &e, &i, &q, "guns").unwrap()),
        ("dio_top_k_cot", build_prompt(&Strategy::dio_cot(), &e, &i, &q, "guns").unwrap()),
        ("vbn", build_prompt(&Strategy::vbn(), &e, &i, &q, "guns").unwrap()),
        ("vbn_explicit_only", build_prompt(&Strategy::vbn(), &e, &[], &q, "guns").unwrap()),
        ("legacy_coo", build_prompt(&Strategy::legacy_coo(), &e, &i, &q, "guns").unwrap()),
        ("self_refine_initial", build_prompt(&Strategy::self_refine(), &e, &i, &q, "guns").unwrap()),
        ("refine_feedback", build_feedback_prompt(&q, &selected)),
        ("refine_edit", build_refine_prompt(&q, &selected, "The answer fits the stated views.")),
        ("fea", build_fea_prompt(&e, &q)),
        ("ranking", build_ranking_prompt(&i, &q, "guns", 7).0),
    ]
}

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/prompts").join(format!("{name}.txt"))
}

#[test]
fn prompts_match_fixtures() {
    let update = std::env::var_os("UPDATE_GOLDEN").is_some();
    for (name, prompt) in cases() {
        let path = fixture(name);
        if update {
            std::fs::write(&path, &prompt).unwrap();
            continue;
        }
        let expected = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        assert_eq!(prompt, expected, "prompt {name} drifted from its fixture");
    }
}

#[test]
fn fixtures_carry_anchor_strings() {
    let read = |n: &str| std::fs::read_to_string(fixture(n)).unwrap();
    assert!(read("ranking").contains("sort the list of given question-answer pairs"));
    assert!(read("vbn").contains("Wrap this analysis by <EV> and </EV>"));
    assert!(read("vbn").contains("Wrap this analysis by <PBN> and </PBN>"));
    for n in ["dio_top_k", "dio_top_k_cot", "vbn", "legacy_coo", "without_persona"] {
        assert!(read(n).contains("Answer: A. or B. or C. or D. or E..."), "{n}");
    }
    assert!(read("dio_top_k").contains("Answer: A. or B. or C. or D. or E...."));
}

/// Each prompt is made only of its own template lines plus rendered data.
#[test]
fn templates_do_not_leak_between_strategies() {
    let prompts: std::collections::HashMap<_, _> = cases().into_iter().collect();
    let has = |name: &str, line: &str| prompts[name].lines().any(|l| l == line);
    for name in ["without_persona", "dio_top_k", "dio_top_k_cot", "legacy_coo", "self_refine_initial"] {
        assert!(!has(name, templates::VBN_EV_STEP) && !has(name, templates::VBN_PBN_STEP), "{name}");
    }
    assert!(!has("vbn_explicit_only", templates::VBN_PBN_STEP));
    assert!(has("vbn_explicit_only", templates::VBN_EV_STEP));
    assert!(!prompts["without_persona"].contains("30-49"));
    assert!(!prompts["dio_top_k"].contains("Explanations:"));
    assert!(prompts["dio_top_k_cot"].ends_with("Explanations:..."));
    assert_eq!(prompts["self_refine_initial"], prompts["dio_top_k"]);
    for (name, p) in &prompts {
        assert!(!p.contains('{') && !p.contains('}'), "unfilled slot in {name}");
    }
}
