//! Step 2: ordering implicit opinions by usefulness, plus the similarity
//! baseline and rank-agreement statistics.

use std::collections::BTreeSet;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fea::ParseStatus;
use crate::listparse::answer_list;
use crate::model::{ImplicitOpinion, OpinionQuestion};
use crate::provider::{EmbeddingVector, GenerationSettings, Provider, ProviderError};
use crate::reasoning::render_opinion;
use crate::templates;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RankingError {
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("zero vector has no direction")]
    ZeroVector,
    #[error("{0}")]
    Domain(String),
    #[error("no index list found in ranking response")]
    NoList,
    #[error(transparent)]
    Provider(#[from] ProviderError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum RankingSource {
    Semantic,
    Llm { seed: u64 },
    SemanticFedLlm,
}

/// Indices into the user's original implicit list, most useful first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ranking {
    pub order: Vec<usize>,
    pub source: RankingSource,
}

impl Ranking {
    pub fn top(&self, k: usize) -> &[usize] {
        &self.order[..k.min(self.order.len())]
    }

    pub fn top_set(&self, k: usize) -> BTreeSet<usize> {
        self.top(k).iter().copied().collect()
    }

    pub fn select(&self, implicit: &[ImplicitOpinion], k: usize) -> Vec<ImplicitOpinion> {
        self.top(k).iter().map(|&i| implicit[i].clone()).collect()
    }
}

pub fn is_permutation(order: &[usize], n: usize) -> bool {
    if order.len() != n {
        return false;
    }
    let mut seen = vec![false; n];
    order
        .iter()
        .all(|&i| i < n && !std::mem::replace(&mut seen[i], true))
}

pub fn cosine_similarity(u: &EmbeddingVector, v: &EmbeddingVector) -> Result<f64, RankingError> {
    if u.dimension() != v.dimension() {
        return Err(RankingError::DimensionMismatch(u.dimension(), v.dimension()));
    }
    let dot: f64 = u.values.iter().zip(&v.values).map(|(a, b)| a * b).sum();
    let nu: f64 = u.values.iter().map(|a| a * a).sum();
    let nv: f64 = v.values.iter().map(|a| a * a).sum();
    if nu == 0.0 || nv == 0.0 {
        return Err(RankingError::ZeroVector);
    }
    Ok((dot / (nu * nv).sqrt()).clamp(-1.0, 1.0))
}

/// Indices sorted by score descending, ties by index ascending.
pub fn order_by_scores(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// Similarity of each opinion's question text to the test question.
pub fn semantic_scores(
    implicit: &[ImplicitOpinion],
    q: &OpinionQuestion,
    provider: &Provider,
) -> Result<Vec<f64>, RankingError> {
    let target = provider.embed(&q.text)?;
    implicit
        .iter()
        .map(|op| cosine_similarity(&provider.embed(&op.question_text)?, &target))
        .collect()
}

pub fn semantic_ranking(
    implicit: &[ImplicitOpinion],
    q: &OpinionQuestion,
    provider: &Provider,
) -> Result<Ranking, RankingError> {
    Ok(Ranking {
        order: order_by_scores(&semantic_scores(implicit, q, provider)?),
        source: RankingSource::Semantic,
    })
}

/// The `k` most similar opinions, as a truncated ranking.
pub fn semantic_topk(
    implicit: &[ImplicitOpinion],
    q: &OpinionQuestion,
    k: usize,
    provider: &Provider,
) -> Result<Ranking, RankingError> {
    if k == 0 {
        return Err(RankingError::Domain("k must be at least 1".into()));
    }
    let mut ranking = semantic_ranking(implicit, q, provider)?;
    ranking.order.truncate(k);
    Ok(ranking)
}

/// Seeded shuffle of `0..n`.
pub fn shuffled_order(n: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order
}

/// Ranking prompt listing the opinions in `presentation` order, numbered
/// from 1.
pub fn build_ranking_prompt_in_order(
    implicit: &[ImplicitOpinion],
    q: &OpinionQuestion,
    subtopic: &str,
    presentation: &[usize],
) -> String {
    let pairs = presentation
        .iter()
        .enumerate()
        .map(|(slot, &i)| format!("{}. {}", slot + 1, render_opinion(&implicit[i])))
        .collect::<Vec<_>>()
        .join("\n");
    templates::render(
        templates::RANKING,
        &[
            ("subtopic", subtopic),
            ("original_persona_question_order", &pairs),
            ("test_question", &q.text),
        ],
    )
    .join("\n")
}

/// Ranking prompt with the opinions shuffled by `seed`. Returns the
/// presentation order so parsed positions can be mapped back.
pub fn build_ranking_prompt(
    implicit: &[ImplicitOpinion],
    q: &OpinionQuestion,
    subtopic: &str,
    seed: u64,
) -> (String, Vec<usize>) {
    let presentation = shuffled_order(implicit.len(), seed);
    let prompt = build_ranking_prompt_in_order(implicit, q, subtopic, &presentation);
    (prompt, presentation)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedRanking {
    /// Zero-based presentation positions, always a full permutation.
    pub order: Vec<usize>,
    pub repaired: bool,
}

fn is_integer_list(items: &[String]) -> bool {
    items.iter().any(|s| s.parse::<i64>().is_ok())
}

/// Reads a 1-based index list and repairs it into a permutation of `0..n`:
/// out-of-range and non-integer items are dropped, duplicates keep their
/// first occurrence, and missing positions are appended in ascending order.
pub fn parse_ranking_response(text: &str, n: usize) -> Result<ParsedRanking, RankingError> {
    if n == 0 {
        return Err(RankingError::Domain("cannot rank zero opinions".into()));
    }
    let items = answer_list(text, |l| is_integer_list(&l.items)).ok_or(RankingError::NoList)?;
    let mut seen = vec![false; n];
    let mut order = Vec::with_capacity(n);
    let mut repaired = false;
    for item in &items {
        match item.parse::<i64>() {
            Ok(v) if v >= 1 && (v as u64) <= n as u64 => {
                let p = (v - 1) as usize;
                if std::mem::replace(&mut seen[p], true) {
                    repaired = true;
                } else {
                    order.push(p);
                }
            }
            _ => repaired = true,
        }
    }
    for (p, was_seen) in seen.iter().enumerate() {
        if !was_seen {
            order.push(p);
            repaired = true;
        }
    }
    Ok(ParsedRanking { order, repaired })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LlmRanking {
    pub ranking: Ranking,
    pub presentation: Vec<usize>,
    pub status: ParseStatus,
}

fn llm_rank_in_order(
    implicit: &[ImplicitOpinion],
    q: &OpinionQuestion,
    subtopic: &str,
    presentation: Vec<usize>,
    source: RankingSource,
    provider: &Provider,
    settings: &GenerationSettings,
) -> Result<LlmRanking, RankingError> {
    let prompt = build_ranking_prompt_in_order(implicit, q, subtopic, &presentation);
    let reply = provider.generate(&settings.request(prompt).for_question(&q.question_id))?;
    let (positions, status) = match parse_ranking_response(&reply.text, implicit.len()) {
        Ok(p) if p.repaired => (p.order, ParseStatus::Repaired),
        Ok(p) => (p.order, ParseStatus::Clean),
        Err(_) => {
            tracing::warn!(question = %q.question_id, "unparseable ranking; keeping presentation order");
            ((0..implicit.len()).collect(), ParseStatus::Failed)
        }
    };
    Ok(LlmRanking {
        ranking: Ranking {
            order: positions.iter().map(|&p| presentation[p]).collect(),
            source,
        },
        presentation,
        status,
    })
}

/// Full usefulness ranking from one model call over a seeded shuffle.
pub fn llm_rank(
    implicit: &[ImplicitOpinion],
    q: &OpinionQuestion,
    subtopic: &str,
    seed: u64,
    provider: &Provider,
    settings: &GenerationSettings,
) -> Result<LlmRanking, RankingError> {
    if implicit.is_empty() {
        return Err(RankingError::Domain("no implicit opinions to rank".into()));
    }
    let presentation = shuffled_order(implicit.len(), seed);
    llm_rank_in_order(implicit, q, subtopic, presentation, RankingSource::Llm { seed }, provider, settings)
}

/// Like [`llm_rank`] but presents the opinions in similarity order.
pub fn llm_rank_semantic_fed(
    implicit: &[ImplicitOpinion],
    q: &OpinionQuestion,
    subtopic: &str,
    provider: &Provider,
    settings: &GenerationSettings,
) -> Result<LlmRanking, RankingError> {
    if implicit.is_empty() {
        return Err(RankingError::Domain("no implicit opinions to rank".into()));
    }
    let presentation = semantic_ranking(implicit, q, provider)?.order;
    llm_rank_in_order(implicit, q, subtopic, presentation, RankingSource::SemanticFedLlm, provider, settings)
}

/// The `min(k, n)` most useful opinions according to the model.
pub fn llm_topk(
    implicit: &[ImplicitOpinion],
    q: &OpinionQuestion,
    k: usize,
    seed: u64,
    subtopic: &str,
    provider: &Provider,
    settings: &GenerationSettings,
) -> Result<Vec<ImplicitOpinion>, RankingError> {
    let ranked = llm_rank(implicit, q, subtopic, seed, provider, settings)?;
    Ok(ranked.ranking.select(implicit, k))
}

/// `rank[item] = position` for an order.
pub fn rank_vector(order: &[usize]) -> Vec<usize> {
    let mut rank = vec![0; order.len()];
    for (pos, &item) in order.iter().enumerate() {
        rank[item] = pos;
    }
    rank
}

/// Kendall's tau-a between two paired sequences that are permutations of
/// the same values.
pub fn kendall_tau(a: &[usize], b: &[usize]) -> Result<f64, RankingError> {
    let n = a.len();
    if n != b.len() {
        return Err(RankingError::Domain(format!("lengths differ: {n} vs {}", b.len())));
    }
    if n < 2 {
        return Err(RankingError::Domain("need at least two items".into()));
    }
    let mut sa = a.to_vec();
    let mut sb = b.to_vec();
    sa.sort_unstable();
    sb.sort_unstable();
    if sa != sb || sa.windows(2).any(|w| w[0] == w[1]) {
        return Err(RankingError::Domain("inputs are not permutations of one set".into()));
    }
    let mut net: i64 = 0;
    for i in 0..n {
        for j in i + 1..n {
            let da = a[i].cmp(&a[j]);
            let db = b[i].cmp(&b[j]);
            net += if da == db { 1 } else { -1 };
        }
    }
    Ok(net as f64 / (n * (n - 1) / 2) as f64)
}

/// Tau between two orders over the same items.
pub fn order_agreement(a: &Ranking, b: &Ranking) -> Result<f64, RankingError> {
    let n = a.order.len();
    if !is_permutation(&a.order, n) || !is_permutation(&b.order, n) {
        return Err(RankingError::Domain("rankings are not full permutations".into()));
    }
    kendall_tau(&rank_vector(&a.order), &rank_vector(&b.order))
}

/// `|A ∩ B| / min(|A|, |B|)`.
pub fn overlap_coefficient(a: &BTreeSet<usize>, b: &BTreeSet<usize>) -> Result<f64, RankingError> {
    if a.is_empty() || b.is_empty() {
        return Err(RankingError::Domain("overlap of an empty set".into()));
    }
    Ok(a.intersection(b).count() as f64 / a.len().min(b.len()) as f64)
}

/// Mean pairwise overlap of the rankings' top-K sets for K in `1..=k_max`.
pub fn ranking_consistency_sweep(
    rankings: &[Ranking],
    k_max: usize,
) -> Result<Vec<(usize, f64)>, RankingError> {
    if rankings.len() < 2 {
        return Err(RankingError::Domain("need at least two rankings".into()));
    }
    let n = rankings[0].order.len();
    if rankings.iter().any(|r| !is_permutation(&r.order, n)) {
        return Err(RankingError::Domain("rankings must order the same opinion set".into()));
    }
    (1..=k_max)
        .map(|k| {
            let sets: Vec<BTreeSet<usize>> = rankings.iter().map(|r| r.top_set(k)).collect();
            let mut total = 0.0;
            let mut pairs = 0;
            for i in 0..sets.len() {
                for j in i + 1..sets.len() {
                    total += overlap_coefficient(&sets[i], &sets[j])?;
                    pairs += 1;
                }
            }
            Ok((k, total / pairs as f64))
        })
        .collect()
}

pub fn write_tau_csv(rows: &[(String, f64)], out: impl Write) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["question_id", "tau"])?;
    for (q, tau) in rows {
        w.write_record([q.as_str(), &format!("{tau:.6}")])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_overlap_csv(rows: &[(usize, f64)], out: impl Write) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["k", "mean_oc"])?;
    for (k, oc) in rows {
        w.write_record([k.to_string(), format!("{oc:.6}")])?;
    }
    w.flush()?;
    Ok(())
}
