use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{CacheRecord, ProviderError};

/// One served generation, for accounting.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UsageRecord {
    pub question_id: String,
    pub model_id: String,
    pub key: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    #[serde(default)]
    pub estimated: bool,
    #[serde(default)]
    pub cached: bool,
}

impl From<&CacheRecord> for UsageRecord {
    fn from(r: &CacheRecord) -> Self {
        Self {
            question_id: r.request.question_id.clone().unwrap_or_default(),
            model_id: r.request.model_id.clone(),
            key: r.key.clone(),
            prompt_tokens: r.response.prompt_tokens,
            completion_tokens: r.response.completion_tokens,
            estimated: r.response.estimated,
            cached: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelPrice {
    pub input_per_token: f64,
    pub output_per_token: f64,
}

/// USD prices per token, keyed by model id.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PriceTable {
    pub models: BTreeMap<String, ModelPrice>,
}

impl PriceTable {
    pub fn with(mut self, model: impl Into<String>, input: f64, output: f64) -> Self {
        self.models.insert(
            model.into(),
            ModelPrice {
                input_per_token: input,
                output_per_token: output,
            },
        );
        self
    }

    pub fn validate(&self) -> Result<(), ProviderError> {
        for (model, p) in &self.models {
            if !(p.input_per_token >= 0.0 && p.output_per_token >= 0.0) {
                return Err(ProviderError::Config(format!(
                    "negative price for model {model:?}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostLine {
    pub total_calls: u64,
    pub total_tokens: u64,
    pub questions: u64,
    pub avg_tokens_per_question: f64,
    pub total_usd: f64,
    /// Some counts in this line were estimated rather than reported.
    pub estimated: bool,
}

/// Per-model call counts, average tokens per question, and dollar cost.
pub fn cost_report(
    records: &[UsageRecord],
    prices: &PriceTable,
) -> Result<BTreeMap<String, CostLine>, ProviderError> {
    prices.validate()?;
    struct Acc {
        calls: u64,
        tokens: u64,
        usd: f64,
        questions: BTreeSet<String>,
        estimated: bool,
    }
    let mut acc: BTreeMap<String, Acc> = BTreeMap::new();
    for r in records {
        let price = prices.models.get(&r.model_id).ok_or_else(|| {
            ProviderError::Config(format!("no price for model {:?}", r.model_id))
        })?;
        let a = acc.entry(r.model_id.clone()).or_insert_with(|| Acc {
            calls: 0,
            tokens: 0,
            usd: 0.0,
            questions: BTreeSet::new(),
            estimated: false,
        });
        a.calls += 1;
        a.tokens += r.prompt_tokens + r.completion_tokens;
        a.usd += r.prompt_tokens as f64 * price.input_per_token
            + r.completion_tokens as f64 * price.output_per_token;
        a.questions.insert(r.question_id.clone());
        a.estimated |= r.estimated;
    }
    Ok(acc
        .into_iter()
        .map(|(model, a)| {
            let questions = a.questions.len() as u64;
            let line = CostLine {
                total_calls: a.calls,
                total_tokens: a.tokens,
                questions,
                avg_tokens_per_question: a.tokens as f64 / questions as f64,
                total_usd: a.usd,
                estimated: a.estimated,
            };
            (model, line)
        })
        .collect())
}
