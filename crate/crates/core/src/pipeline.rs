//! Per-question orchestration of the four-step method and every baseline.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::consistency::{
    run_dynamic_k, self_consistency, ConsistencyError, DynamicKConfig, DynamicKInput, DEFAULT_SC_SAMPLES,
};
use crate::dataset::derive_seed;
use crate::fea::{build_fea_prompt, filter_explicit, parse_fea_response, FeaResult, ParseStatus};
use crate::model::{AnswerOutcome, AttributeSchema, ExplicitPersona, ImplicitOpinion, OpinionQuestion, Prediction, UserRecord};
use crate::provider::{GenerationSettings, Provider, ProviderError};
use crate::ranking::{llm_rank, semantic_ranking, Ranking, RankingError, RankingSource};
use crate::reasoning::{
    build_prompt, extract_vbn_sections, run_self_refine, AnswerExtractor, ReasoningError, Strategy,
    DEFAULT_REFINE_ROUNDS,
};

pub const DEFAULT_DIO_K: usize = 8;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Ranking(#[from] RankingError),
    #[error(transparent)]
    Reasoning(#[from] ReasoningError),
    #[error(transparent)]
    Consistency(#[from] ConsistencyError),
}

impl PipelineError {
    /// A cache miss under strict replay; callers abort the whole run.
    pub fn is_replay_miss(&self) -> bool {
        matches!(
            self,
            Self::Provider(ProviderError::ReplayMiss { .. })
                | Self::Ranking(RankingError::Provider(ProviderError::ReplayMiss { .. }))
                | Self::Reasoning(ReasoningError::Provider(ProviderError::ReplayMiss { .. }))
                | Self::Consistency(ConsistencyError::Provider(ProviderError::ReplayMiss { .. }))
        ) || matches!(self, Self::Consistency(ConsistencyError::Reasoning(ReasoningError::Provider(ProviderError::ReplayMiss { .. }))))
    }
}

/// Prediction method: the full method or one of the baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Coo,
    WithoutPersona,
    DioTopK,
    DioTopKCot,
    DioTopKSc,
    DioTopKCotSc,
    SelfRefine,
    /// Demographics, ideology and top-K opinions with the earlier
    /// explain-each-opinion instruction.
    LegacyCoo,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::Coo,
        Method::WithoutPersona,
        Method::DioTopK,
        Method::DioTopKCot,
        Method::DioTopKSc,
        Method::DioTopKCotSc,
        Method::SelfRefine,
        Method::LegacyCoo,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Coo => "coo",
            Method::WithoutPersona => "without-persona",
            Method::DioTopK => "dio-top-k",
            Method::DioTopKCot => "dio-top-k-cot",
            Method::DioTopKSc => "dio-top-k-sc",
            Method::DioTopKCotSc => "dio-top-k-cot-sc",
            Method::SelfRefine => "self-refine",
            Method::LegacyCoo => "legacy-coo",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| PipelineError::Config(format!("unknown method {s:?}")))
    }
}

/// Switches for ablating steps of the full method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CooOptions {
    pub fea: bool,
    pub llm_ranking: bool,
    pub dynamic_k: bool,
}

impl Default for CooOptions {
    fn default() -> Self {
        Self { fea: true, llm_ranking: true, dynamic_k: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub method: Method,
    pub settings: GenerationSettings,
    pub dynamic_k: DynamicKConfig,
    pub coo: CooOptions,
    pub dio_k: usize,
    pub sc_samples: usize,
    pub refine_rounds: usize,
    pub seed: u64,
}

impl PipelineConfig {
    pub fn new(method: Method, settings: GenerationSettings) -> Self {
        Self {
            method,
            settings,
            dynamic_k: DynamicKConfig::default(),
            coo: CooOptions::default(),
            dio_k: DEFAULT_DIO_K,
            sc_samples: DEFAULT_SC_SAMPLES,
            refine_rounds: DEFAULT_REFINE_ROUNDS,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        self.dynamic_k.validate()?;
        if self.dio_k == 0 || self.sc_samples == 0 || self.refine_rounds == 0 {
            return Err(PipelineError::Config(
                "dio_k, sc_samples and refine_rounds must be at least 1".into(),
            ));
        }
        Ok(())
    }

    /// Seed of the ranking prompt shuffle for one question.
    pub fn ranking_seed(&self, question_id: &str) -> u64 {
        derive_seed(self.seed, &format!("ranking:{question_id}"))
    }
}

/// Everything recorded for one answered test question.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionResult {
    pub user_id: String,
    pub topic: String,
    pub method: Method,
    pub question: OpinionQuestion,
    pub prediction: Prediction,
    #[serde(default)]
    pub winning_k: Option<usize>,
    /// The explicit persona given to the answer prompt.
    pub explicit_rel: ExplicitPersona,
    /// Opinions given to the answer prompt; for the full method, the
    /// smallest K.
    pub implicit_rel: Vec<ImplicitOpinion>,
    #[serde(default)]
    pub fea: Option<FeaResult>,
    #[serde(default)]
    pub ranking: Option<Ranking>,
    #[serde(default)]
    pub ranking_status: Option<ParseStatus>,
    /// Individual samples for sampled methods.
    #[serde(default)]
    pub samples: Vec<AnswerOutcome>,
    #[serde(default)]
    pub refine_flagged: bool,
}

pub struct Pipeline<'a> {
    pub provider: &'a Provider,
    pub schema: &'a AttributeSchema,
    pub extractor: &'a AnswerExtractor,
    pub config: &'a PipelineConfig,
}

fn single_prediction(q: &OpinionQuestion, answer: AnswerOutcome, text: String) -> Prediction {
    let sections = extract_vbn_sections(&text);
    Prediction {
        question_id: q.question_id.clone(),
        final_answer: answer,
        per_k: Default::default(),
        ev_text: sections.ev_text,
        pbn_text: sections.pbn_text,
        explanation: text,
    }
}

impl Pipeline<'_> {
    fn settings(&self) -> &GenerationSettings {
        &self.config.settings
    }

    fn base_result(&self, user: &UserRecord, q: &OpinionQuestion, prediction: Prediction) -> QuestionResult {
        QuestionResult {
            user_id: user.user_id.clone(),
            topic: user.topic.clone(),
            method: self.config.method,
            question: q.clone(),
            prediction,
            winning_k: None,
            explicit_rel: ExplicitPersona::empty(),
            implicit_rel: Vec::new(),
            fea: None,
            ranking: None,
            ranking_status: None,
            samples: Vec::new(),
            refine_flagged: false,
        }
    }

    fn generate_once(&self, q: &OpinionQuestion, prompt: String) -> Result<(AnswerOutcome, String), PipelineError> {
        let reply = self
            .provider
            .generate(&self.settings().request(prompt).for_question(&q.question_id))?;
        Ok((self.extractor.extract(&reply.text, q.choices.len()), reply.text))
    }

    /// Steps 1 and 2 of the full method: the filtered explicit persona and
    /// a complete usefulness ranking.
    fn select_personae(
        &self,
        user: &UserRecord,
        q: &OpinionQuestion,
    ) -> Result<(FeaResult, ExplicitPersona, Ranking, Option<ParseStatus>), PipelineError> {
        let opts = &self.config.coo;
        let fea = if opts.fea && !user.explicit.is_empty() {
            let reply = self.provider.generate(
                &self
                    .settings()
                    .request(build_fea_prompt(&user.explicit, q))
                    .for_question(&q.question_id),
            )?;
            parse_fea_response(&reply.text, &user.explicit, self.schema)
        } else {
            FeaResult::keep_all(&user.explicit, ParseStatus::Clean)
        };
        let explicit = filter_explicit(&user.explicit, &fea);
        let (ranking, status) = if user.implicit.is_empty() {
            (Ranking { order: Vec::new(), source: RankingSource::Semantic }, None)
        } else if opts.llm_ranking {
            let seed = self.config.ranking_seed(&q.question_id);
            let ranked = llm_rank(&user.implicit, q, &q.topic, seed, self.provider, self.settings())?;
            (ranked.ranking, Some(ranked.status))
        } else {
            (semantic_ranking(&user.implicit, q, self.provider)?, None)
        };
        Ok((fea, explicit, ranking, status))
    }

    fn run_coo(&self, user: &UserRecord, q: &OpinionQuestion) -> Result<QuestionResult, PipelineError> {
        let (fea, explicit, ranking, ranking_status) = self.select_personae(user, q)?;
        let mut cfg = self.config.dynamic_k.clone();
        if !self.config.coo.dynamic_k {
            cfg.k_values.truncate(1);
        }
        let input = DynamicKInput {
            explicit: &explicit,
            implicit: &user.implicit,
            ranking: &ranking,
            question: q,
            topic: &q.topic,
        };
        let out = run_dynamic_k(input, &cfg, &Strategy::vbn(), self.provider, self.settings(), self.extractor)?;
        let mut result = self.base_result(user, q, out.prediction);
        result.winning_k = Some(out.winning_k);
        result.implicit_rel = out.implicit_by_k.into_values().next().unwrap_or_default();
        result.explicit_rel = explicit;
        result.fea = Some(fea);
        result.ranking = Some(ranking);
        result.ranking_status = ranking_status;
        Ok(result)
    }

    fn dio_history(&self, user: &UserRecord, q: &OpinionQuestion) -> Result<Vec<ImplicitOpinion>, PipelineError> {
        if user.implicit.is_empty() {
            return Ok(Vec::new());
        }
        Ok(semantic_ranking(&user.implicit, q, self.provider)?.select(&user.implicit, self.config.dio_k))
    }

    fn run_persona_baseline(
        &self,
        user: &UserRecord,
        q: &OpinionQuestion,
        strategy: Strategy,
        sampled: bool,
    ) -> Result<QuestionResult, PipelineError> {
        let history = self.dio_history(user, q)?;
        let prompt = build_prompt(&strategy, &user.explicit, &history, q, &q.topic)?;
        let mut result = if sampled {
            let s = self_consistency(&prompt, q, self.config.sc_samples, self.provider, self.settings(), self.extractor)?;
            let mut r = self.base_result(user, q, single_prediction(q, s.answer, String::new()));
            r.samples = s.samples;
            r
        } else {
            let (answer, text) = self.generate_once(q, prompt)?;
            self.base_result(user, q, single_prediction(q, answer, text))
        };
        result.explicit_rel = user.explicit.clone();
        result.implicit_rel = history;
        Ok(result)
    }

    fn run_self_refine(&self, user: &UserRecord, q: &OpinionQuestion) -> Result<QuestionResult, PipelineError> {
        let history = self.dio_history(user, q)?;
        let prompt = build_prompt(&Strategy::self_refine(), &user.explicit, &history, q, &q.topic)?;
        let (initial, text) = self.generate_once(q, prompt)?;
        let refined = run_self_refine(
            self.provider,
            self.settings(),
            self.extractor,
            q,
            &initial,
            self.config.refine_rounds,
        )?;
        let mut result = self.base_result(user, q, single_prediction(q, refined.answer, text));
        result.samples = vec![initial];
        result.refine_flagged = refined.flagged;
        result.explicit_rel = user.explicit.clone();
        result.implicit_rel = history;
        Ok(result)
    }

    /// Answers one test question of `user` with the configured method.
    pub fn run_question(&self, user: &UserRecord, q: &OpinionQuestion) -> Result<QuestionResult, PipelineError> {
        self.config.validate()?;
        match self.config.method {
            Method::Coo => self.run_coo(user, q),
            Method::WithoutPersona => {
                let prompt = build_prompt(&Strategy::without_persona(), &ExplicitPersona::empty(), &[], q, &q.topic)?;
                let (answer, text) = self.generate_once(q, prompt)?;
                Ok(self.base_result(user, q, single_prediction(q, answer, text)))
            }
            Method::DioTopK => self.run_persona_baseline(user, q, Strategy::dio(), false),
            Method::DioTopKCot => self.run_persona_baseline(user, q, Strategy::dio_cot(), false),
            Method::DioTopKSc => self.run_persona_baseline(user, q, Strategy::dio(), true),
            Method::DioTopKCotSc => self.run_persona_baseline(user, q, Strategy::dio_cot(), true),
            Method::LegacyCoo => self.run_persona_baseline(user, q, Strategy::legacy_coo(), false),
            Method::SelfRefine => self.run_self_refine(user, q),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::AnswerKind;
    use crate::provider::{ScriptedAnswer, ScriptedOracle};

    fn user() -> UserRecord {
        let schema = AttributeSchema::default();
        UserRecord {
            user_id: "u1".into(),
            topic: "guns".into(),
            explicit: ExplicitPersona::new([("Age", "30-49"), ("Religion", "None")], &schema).unwrap(),
            implicit: (0..14)
                .map(|i| ImplicitOpinion::new(format!("History {i}?"), vec!["Yes".into(), "No".into()], i % 2).unwrap())
                .collect(),
            tests: vec![OpinionQuestion::new("u1:0", "guns", "Own a gun?", vec!["Yes".into(), "No".into()], 0).unwrap()],
        }
    }

    fn calls_for(method: Method) -> u64 {
        let provider = Provider::scripted(ScriptedOracle::new(ScriptedAnswer::First));
        let config = PipelineConfig::new(method, GenerationSettings::new("m"));
        let p = Pipeline {
            provider: &provider,
            schema: &AttributeSchema::default(),
            extractor: &AnswerExtractor::default(),
            config: &config,
        };
        let u = user();
        let r = p.run_question(&u, &u.tests[0]).unwrap();
        assert_eq!(r.prediction.final_answer.kind, AnswerKind::Choice(0), "{method:?}");
        provider.stats().generation_calls
    }

    #[test]
    fn call_budgets() {
        assert_eq!(calls_for(Method::Coo), 5);
        assert_eq!(calls_for(Method::WithoutPersona), 1);
        assert_eq!(calls_for(Method::DioTopK), 1);
        assert_eq!(calls_for(Method::DioTopKCot), 1);
        assert_eq!(calls_for(Method::DioTopKSc), 5);
        assert_eq!(calls_for(Method::DioTopKCotSc), 5);
        assert_eq!(calls_for(Method::SelfRefine), 5);
        assert_eq!(calls_for(Method::LegacyCoo), 1);
    }

    #[test]
    fn coo_records_artifacts() {
        let provider = Provider::scripted(ScriptedOracle::default());
        let config = PipelineConfig::new(Method::Coo, GenerationSettings::new("m"));
        let p = Pipeline {
            provider: &provider,
            schema: &AttributeSchema::default(),
            extractor: &AnswerExtractor::default(),
            config: &config,
        };
        let u = user();
        let r = p.run_question(&u, &u.tests[0]).unwrap();
        assert_eq!(r.winning_k, Some(8));
        assert_eq!(r.implicit_rel.len(), 8);
        assert_eq!(r.explicit_rel, u.explicit);
        assert!(!r.prediction.ev_text.is_empty());
        assert_eq!(r.prediction.per_k.len(), 3);
        assert_eq!(r.ranking_status, Some(ParseStatus::Clean));
        let expected: Vec<usize> = crate::ranking::shuffled_order(14, config.ranking_seed("u1:0"));
        assert_eq!(r.ranking.unwrap().order, expected);
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!("nope".parse::<Method>().is_err());
    }
}
