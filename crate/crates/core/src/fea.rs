//! Step 1: filtering the explicit persona down to the attributes the model
//! considers relevant to the test question.

use std::collections::{BTreeMap, HashSet};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::listparse::answer_list;
use crate::model::{AttributeSchema, ExplicitPersona, OpinionQuestion};
use crate::reasoning::{render_choices, render_explicit};
use crate::templates;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParseStatus {
    Clean,
    Repaired,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeaResult {
    /// Canonical schema names, in the order the model listed them.
    pub selected: Vec<String>,
    pub dropped_unknown: Vec<String>,
    pub parse_status: ParseStatus,
}

impl FeaResult {
    /// Keep-everything result used when the step is skipped or fails.
    pub fn keep_all(persona: &ExplicitPersona, status: ParseStatus) -> Self {
        Self {
            selected: persona.names().map(String::from).collect(),
            dropped_unknown: Vec::new(),
            parse_status: status,
        }
    }
}

pub fn build_fea_prompt(e: &ExplicitPersona, q: &OpinionQuestion) -> String {
    let attributes = render_explicit(e);
    let choices = render_choices(&q.choices);
    templates::render(
        templates::FEA,
        &[
            ("original_attribute_list", &attributes),
            ("test_question", &q.text),
            ("test_choices", &choices),
        ],
    )
    .join("\n")
}

fn match_item<'s>(item: &str, schema: &'s AttributeSchema) -> Option<&'s str> {
    schema.canonical(item).or_else(|| {
        // "Age: 30-49" style echoes of the attribute line.
        item.split_once(':')
            .and_then(|(name, _)| schema.canonical(name))
    })
}

/// Reads the attribute list from an FEA response. Total: if no list can be
/// found the result keeps the whole persona with status `Failed`.
pub fn parse_fea_response(
    text: &str,
    persona: &ExplicitPersona,
    schema: &AttributeSchema,
) -> FeaResult {
    let Some(items) = answer_list(text, |_| true) else {
        return FeaResult::keep_all(persona, ParseStatus::Failed);
    };
    let mut selected = Vec::new();
    let mut dropped_unknown = Vec::new();
    let mut seen = HashSet::new();
    let mut repaired = false;
    for item in items {
        match match_item(&item, schema) {
            Some(name) => {
                repaired |= name != item;
                if seen.insert(name) {
                    selected.push(name.to_string());
                } else {
                    repaired = true;
                }
            }
            None => {
                repaired = true;
                dropped_unknown.push(item);
            }
        }
    }
    FeaResult {
        selected,
        dropped_unknown,
        parse_status: if repaired {
            ParseStatus::Repaired
        } else {
            ParseStatus::Clean
        },
    }
}

/// Entries of `e` named in `r.selected`, in `e`'s order.
pub fn filter_explicit(e: &ExplicitPersona, r: &FeaResult) -> ExplicitPersona {
    let keep: HashSet<&str> = r.selected.iter().map(String::as_str).collect();
    e.retain_indices(|i| keep.contains(e.entries()[i].name.as_str()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemovalCount {
    pub attribute: String,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemovalReport {
    /// Removed attributes per topic, most frequent first.
    pub per_topic: BTreeMap<String, Vec<RemovalCount>>,
    pub runs: usize,
    /// Mean number of attributes kept per run.
    pub mean_selected: f64,
    pub schema_size: usize,
}

pub fn removed_attribute_stats(
    results: &[(String, FeaResult, ExplicitPersona)],
    schema: &AttributeSchema,
) -> RemovalReport {
    let mut counts: BTreeMap<String, BTreeMap<String, usize>> = BTreeMap::new();
    let mut kept_total = 0usize;
    for (topic, result, persona) in results {
        let kept = filter_explicit(persona, result);
        kept_total += kept.len();
        let kept_names: HashSet<&str> = kept.names().collect();
        let topic_counts = counts.entry(topic.clone()).or_default();
        for name in persona.names().filter(|n| !kept_names.contains(n)) {
            *topic_counts.entry(name.to_string()).or_default() += 1;
        }
    }
    let order = |name: &str| schema.position(name).unwrap_or(usize::MAX);
    let per_topic = counts
        .into_iter()
        .map(|(topic, by_attr)| {
            let mut ranked: Vec<RemovalCount> = by_attr
                .into_iter()
                .map(|(attribute, count)| RemovalCount { attribute, count })
                .collect();
            ranked.sort_by(|a, b| {
                b.count
                    .cmp(&a.count)
                    .then_with(|| order(&a.attribute).cmp(&order(&b.attribute)))
            });
            (topic, ranked)
        })
        .collect();
    RemovalReport {
        per_topic,
        runs: results.len(),
        mean_selected: if results.is_empty() {
            0.0
        } else {
            kept_total as f64 / results.len() as f64
        },
        schema_size: schema.len(),
    }
}

/// `topic,attribute,removal_count,rank` rows, rank starting at 1.
pub fn write_removal_csv(report: &RemovalReport, out: impl Write) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["topic", "attribute", "removal_count", "rank"])?;
    for (topic, ranked) in &report.per_topic {
        for (i, r) in ranked.iter().enumerate() {
            w.write_record([
                topic.as_str(),
                r.attribute.as_str(),
                &r.count.to_string(),
                &(i + 1).to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}
