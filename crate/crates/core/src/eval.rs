//! Accuracy metrics, significance tests and inter-annotator agreement.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

use crate::model::{OpinionQuestion, Prediction};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EvalError {
    #[error("{0}")]
    Domain(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("agreement is undefined when every rating is the same value")]
    UndefinedAgreement,
}

fn gold_of(golds: &HashMap<String, usize>, qid: &str) -> Result<usize, EvalError> {
    golds
        .get(qid)
        .copied()
        .ok_or_else(|| EvalError::Domain(format!("no gold answer for question {qid}")))
}

/// Per-prediction exact correctness, in input order.
pub fn correctness(preds: &[Prediction], golds: &HashMap<String, usize>) -> Result<Vec<bool>, EvalError> {
    preds
        .iter()
        .map(|p| Ok(p.final_answer.choice_index() == Some(gold_of(golds, &p.question_id)?)))
        .collect()
}

fn fraction(hits: &[bool]) -> Result<f64, EvalError> {
    if hits.is_empty() {
        return Err(EvalError::Domain("no predictions to score".into()));
    }
    Ok(hits.iter().filter(|h| **h).count() as f64 / hits.len() as f64)
}

/// Exact-match accuracy; refusals and unreadable answers are wrong.
pub fn accuracy(preds: &[Prediction], golds: &HashMap<String, usize>) -> Result<f64, EvalError> {
    fraction(&correctness(preds, golds)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Bucket {
    Low,
    High,
    Excluded,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CollapseMap {
    pub question_id: String,
    pub bucket_of: Vec<Bucket>,
}

/// How ordinal choices are folded into two sides.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CollapseRule {
    pub min_choices: usize,
    pub refusal_lexicon: Vec<String>,
}

impl Default for CollapseRule {
    fn default() -> Self {
        Self {
            min_choices: 4,
            refusal_lexicon: vec!["refused".into(), "don't know".into(), "not sure".into()],
        }
    }
}

impl CollapseRule {
    fn is_refusal(&self, choice: &str) -> bool {
        let norm = choice
            .trim()
            .trim_end_matches(['.', '!', '?'])
            .replace('\u{2019}', "'")
            .to_lowercase();
        self.refusal_lexicon.iter().any(|r| r.to_lowercase() == norm)
    }

    /// `None` when the question has too few substantive choices. Trailing
    /// refusal choices are excluded; of the remaining `m`, the first
    /// `ceil(m/2)` go low and the rest high.
    pub fn collapse(&self, q: &OpinionQuestion) -> Option<CollapseMap> {
        let n = q.choices.len();
        if n < self.min_choices {
            return None;
        }
        let m = n - q.choices.iter().rev().take_while(|c| self.is_refusal(c)).count();
        if m < 2 {
            return None;
        }
        let low = m.div_ceil(2);
        let bucket_of = (0..n)
            .map(|i| match i {
                i if i >= m => Bucket::Excluded,
                i if i < low => Bucket::Low,
                _ => Bucket::High,
            })
            .collect();
        Some(CollapseMap {
            question_id: q.question_id.clone(),
            bucket_of,
        })
    }
}

pub fn build_collapse_map(q: &OpinionQuestion) -> Option<CollapseMap> {
    CollapseRule::default().collapse(q)
}

fn collapsed_hit(map: Option<&CollapseMap>, pred: Option<usize>, gold: usize) -> bool {
    let Some(pred) = pred else { return false };
    match map {
        None => pred == gold,
        Some(m) => match (m.bucket_of.get(pred), m.bucket_of.get(gold)) {
            (Some(Bucket::Excluded), _) | (_, Some(Bucket::Excluded)) => pred == gold,
            (Some(a), Some(b)) => a == b,
            _ => false,
        },
    }
}

/// Per-prediction collapsed correctness, in input order.
pub fn collapsed_correctness(
    preds: &[Prediction],
    golds: &HashMap<String, usize>,
    questions: &HashMap<String, OpinionQuestion>,
    rule: &CollapseRule,
) -> Result<Vec<bool>, EvalError> {
    preds
        .iter()
        .map(|p| {
            let gold = gold_of(golds, &p.question_id)?;
            let q = questions
                .get(&p.question_id)
                .ok_or_else(|| EvalError::Domain(format!("unknown question {}", p.question_id)))?;
            let map = rule.collapse(q);
            Ok(collapsed_hit(map.as_ref(), p.final_answer.choice_index(), gold))
        })
        .collect()
}

/// Accuracy after folding ordinal choices into two sides.
pub fn collapsed_accuracy(
    preds: &[Prediction],
    golds: &HashMap<String, usize>,
    questions: &HashMap<String, OpinionQuestion>,
) -> Result<f64, EvalError> {
    fraction(&collapsed_correctness(preds, golds, questions, &CollapseRule::default())?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub p: f64,
    pub df: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TTestKind {
    /// Pooled-variance Student test.
    #[default]
    Student,
    Welch,
    Paired,
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let ss = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>();
    (mean, ss / (n - 1.0))
}

fn two_sided(t: f64, df: f64) -> Result<f64, EvalError> {
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| EvalError::Degenerate(e.to_string()))?;
    Ok((2.0 * dist.sf(t.abs())).min(1.0))
}

fn check_sizes(x: &[f64], y: &[f64]) -> Result<(), EvalError> {
    if x.len() < 2 || y.len() < 2 {
        return Err(EvalError::Domain("each sample needs at least two values".into()));
    }
    Ok(())
}

/// Student's two-sample t-test with pooled variance, two-sided.
pub fn two_sample_t_test(x: &[f64], y: &[f64]) -> Result<TTest, EvalError> {
    check_sizes(x, y)?;
    let (nx, ny) = (x.len() as f64, y.len() as f64);
    let (mx, vx) = mean_var(x);
    let (my, vy) = mean_var(y);
    let df = nx + ny - 2.0;
    let pooled = ((nx - 1.0) * vx + (ny - 1.0) * vy) / df;
    if pooled == 0.0 {
        return Err(EvalError::Degenerate("both samples have zero variance".into()));
    }
    let t = (mx - my) / (pooled * (1.0 / nx + 1.0 / ny)).sqrt();
    Ok(TTest { t, p: two_sided(t, df)?, df })
}

/// Welch's unequal-variance t-test, two-sided.
pub fn welch_t_test(x: &[f64], y: &[f64]) -> Result<TTest, EvalError> {
    check_sizes(x, y)?;
    let (nx, ny) = (x.len() as f64, y.len() as f64);
    let (mx, vx) = mean_var(x);
    let (my, vy) = mean_var(y);
    let (sx, sy) = (vx / nx, vy / ny);
    if sx + sy == 0.0 {
        return Err(EvalError::Degenerate("both samples have zero variance".into()));
    }
    let t = (mx - my) / (sx + sy).sqrt();
    let df = (sx + sy).powi(2) / (sx * sx / (nx - 1.0) + sy * sy / (ny - 1.0));
    Ok(TTest { t, p: two_sided(t, df)?, df })
}

/// Paired t-test over per-item differences, two-sided.
pub fn paired_t_test(x: &[f64], y: &[f64]) -> Result<TTest, EvalError> {
    check_sizes(x, y)?;
    if x.len() != y.len() {
        return Err(EvalError::Domain("paired samples must have equal length".into()));
    }
    let d: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).collect();
    let (md, vd) = mean_var(&d);
    if vd == 0.0 {
        return Err(EvalError::Degenerate("differences have zero variance".into()));
    }
    let n = d.len() as f64;
    let t = md / (vd / n).sqrt();
    let df = n - 1.0;
    Ok(TTest { t, p: two_sided(t, df)?, df })
}

pub fn t_test(kind: TTestKind, x: &[f64], y: &[f64]) -> Result<TTest, EvalError> {
    match kind {
        TTestKind::Student => two_sample_t_test(x, y),
        TTestKind::Welch => welch_t_test(x, y),
        TTestKind::Paired => paired_t_test(x, y),
    }
}

/// Krippendorff's alpha for nominal data. `ratings[a][i]` is annotator
/// `a`'s value for item `i`, `None` when missing.
pub fn krippendorff_alpha_nominal<T: Ord + Clone>(ratings: &[Vec<Option<T>>]) -> Result<f64, EvalError> {
    let items = ratings.iter().map(Vec::len).max().unwrap_or(0);
    if ratings.iter().any(|r| r.len() != items) {
        return Err(EvalError::Domain("every annotator must rate the same items".into()));
    }
    // Coincidence matrix over the values that occur in pairable units.
    let mut coincidence: BTreeMap<(T, T), f64> = BTreeMap::new();
    let mut pairable_units = 0usize;
    for i in 0..items {
        let values: Vec<&T> = ratings.iter().filter_map(|r| r[i].as_ref()).collect();
        let m = values.len();
        if m < 2 {
            continue;
        }
        pairable_units += 1;
        let w = 1.0 / (m - 1) as f64;
        for (a, va) in values.iter().enumerate() {
            for (b, vb) in values.iter().enumerate() {
                if a != b {
                    *coincidence.entry(((*va).clone(), (*vb).clone())).or_default() += w;
                }
            }
        }
    }
    if pairable_units < 2 {
        return Err(EvalError::Domain("need at least two items with two or more ratings".into()));
    }
    let mut marginals: BTreeMap<&T, f64> = BTreeMap::new();
    for ((c, _), o) in &coincidence {
        *marginals.entry(c).or_default() += o;
    }
    let n: f64 = marginals.values().sum();
    let observed: f64 = coincidence.iter().filter(|((c, k), _)| c != k).map(|(_, o)| o).sum();
    let total_sq: f64 = marginals.values().map(|v| v * v).sum();
    let expected_pairs = n * n - total_sq;
    if expected_pairs == 0.0 {
        return Err(EvalError::UndefinedAgreement);
    }
    Ok(1.0 - (n - 1.0) * observed / expected_pairs)
}

/// Accuracy pair for one slice of predictions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub strategy: String,
    pub model: String,
    pub topic: Option<String>,
    pub n: usize,
    pub acc: f64,
    pub cacc: f64,
}

pub fn score(
    strategy: &str,
    model: &str,
    topic: Option<&str>,
    preds: &[Prediction],
    questions: &HashMap<String, OpinionQuestion>,
) -> Result<ScoreRow, EvalError> {
    let golds: HashMap<String, usize> = questions
        .iter()
        .map(|(id, q)| (id.clone(), q.gold_index))
        .collect();
    Ok(ScoreRow {
        strategy: strategy.to_string(),
        model: model.to_string(),
        topic: topic.map(String::from),
        n: preds.len(),
        acc: accuracy(preds, &golds)?,
        cacc: collapsed_accuracy(preds, &golds, questions)?,
    })
}

/// One row per topic, in topic order.
pub fn score_by_topic(
    strategy: &str,
    model: &str,
    preds: &[Prediction],
    questions: &HashMap<String, OpinionQuestion>,
) -> Result<Vec<ScoreRow>, EvalError> {
    let mut by_topic: BTreeMap<&str, Vec<Prediction>> = BTreeMap::new();
    for p in preds {
        let q = questions
            .get(&p.question_id)
            .ok_or_else(|| EvalError::Domain(format!("unknown question {}", p.question_id)))?;
        by_topic.entry(q.topic.as_str()).or_default().push(p.clone());
    }
    by_topic
        .into_iter()
        .map(|(topic, ps)| score(strategy, model, Some(topic), &ps, questions))
        .collect()
}

/// Percentages in the shape of the main results table.
pub fn write_score_csv(rows: &[ScoreRow], out: impl Write) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["strategy", "model", "topic", "n", "acc", "cacc"])?;
    for r in rows {
        w.write_record([
            r.strategy.clone(),
            r.model.clone(),
            r.topic.clone().unwrap_or_default(),
            r.n.to_string(),
            format!("{:.2}", 100.0 * r.acc),
            format!("{:.2}", 100.0 * r.cacc),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItaRow {
    pub model: String,
    pub k: usize,
    pub ita_pct: f64,
    pub parse_failure_pct: f64,
}

pub fn write_ita_csv(rows: &[ItaRow], out: impl Write) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["model", "k", "ita_pct", "parse_failure_pct"])?;
    for r in rows {
        w.write_record([
            r.model.clone(),
            r.k.to_string(),
            format!("{:.2}", r.ita_pct),
            format!("{:.2}", r.parse_failure_pct),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::AnswerOutcome;
    use proptest::prelude::*;

    fn q4(id: &str, gold: usize) -> OpinionQuestion {
        OpinionQuestion::new(
            id,
            "t",
            "How much?",
            ["Strongly agree", "Somewhat agree", "Somewhat disagree", "Strongly disagree"]
                .map(String::from)
                .to_vec(),
            gold,
        )
        .unwrap()
    }

    fn pred(id: &str, a: AnswerOutcome) -> Prediction {
        Prediction {
            question_id: id.into(),
            final_answer: a,
            per_k: BTreeMap::new(),
            ev_text: String::new(),
            pbn_text: String::new(),
            explanation: String::new(),
        }
    }

    fn golds(pairs: &[(&str, usize)]) -> HashMap<String, usize> {
        pairs.iter().map(|(q, g)| (q.to_string(), *g)).collect()
    }

    #[test]
    fn accuracy_examples() {
        let g = golds(&[("a", 0), ("b", 1), ("c", 2), ("d", 3)]);
        let all: Vec<_> = g.iter().map(|(q, i)| pred(q, AnswerOutcome::choice(*i, ""))).collect();
        assert_eq!(accuracy(&all, &g).unwrap(), 1.0);
        let itas: Vec<_> = g.keys().map(|q| pred(q, AnswerOutcome::ita(""))).collect();
        assert_eq!(accuracy(&itas, &g).unwrap(), 0.0);
        let mut three = all.clone();
        three[0].final_answer = AnswerOutcome::parse_failure("");
        assert_eq!(accuracy(&three, &g).unwrap(), 0.75);
        assert!(accuracy(&[pred("zzz", AnswerOutcome::choice(0, ""))], &g).is_err());
    }

    #[test]
    fn collapse_examples() {
        let m = build_collapse_map(&q4("a", 0)).unwrap();
        assert_eq!(m.bucket_of, vec![Bucket::Low, Bucket::Low, Bucket::High, Bucket::High]);

        let mut q = q4("b", 0);
        q.choices.push("Refused".into());
        let m = build_collapse_map(&q).unwrap();
        assert_eq!(m.bucket_of, vec![Bucket::Low, Bucket::Low, Bucket::High, Bucket::High, Bucket::Excluded]);

        let mut q = q4("c", 0);
        q.choices.truncate(3);
        assert!(build_collapse_map(&q).is_none());

        let q = OpinionQuestion::new("d", "t", "?", ["A", "B", "C", "D", "E", "Not sure"].map(String::from).to_vec(), 0).unwrap();
        let m = build_collapse_map(&q).unwrap();
        assert_eq!(&m.bucket_of[..5], &[Bucket::Low, Bucket::Low, Bucket::Low, Bucket::High, Bucket::High]);
    }

    #[test]
    fn collapsed_accuracy_examples() {
        let questions: HashMap<String, OpinionQuestion> =
            [("a", 1), ("b", 3)].iter().map(|(id, g)| (id.to_string(), q4(id, *g))).collect();
        let g = golds(&[("a", 1), ("b", 3)]);
        let near = [pred("a", AnswerOutcome::choice(0, ""))];
        assert_eq!(collapsed_accuracy(&near, &g, &questions).unwrap(), 1.0);
        assert_eq!(accuracy(&near, &g).unwrap(), 0.0);
        let far = [pred("b", AnswerOutcome::choice(0, ""))];
        assert_eq!(collapsed_accuracy(&far, &g, &questions).unwrap(), 0.0);
        let refuse = [pred("b", AnswerOutcome::ita(""))];
        assert_eq!(collapsed_accuracy(&refuse, &g, &questions).unwrap(), 0.0);

        let mut q = q4("x", 0);
        q.choices.push("Refused".into());
        q.gold_index = 4;
        let questions = HashMap::from([("x".to_string(), q)]);
        let g = golds(&[("x", 4)]);
        assert_eq!(collapsed_accuracy(&[pred("x", AnswerOutcome::choice(3, ""))], &g, &questions).unwrap(), 0.0);
        assert_eq!(collapsed_accuracy(&[pred("x", AnswerOutcome::choice(4, ""))], &g, &questions).unwrap(), 1.0);
    }

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    // Reference values computed with scipy.stats.ttest_ind / ttest_rel.
    #[test]
    fn t_test_reference_values() {
        let r = two_sample_t_test(&[1.0, 1.0, 1.0, 0.0], &[0.0, 0.0, 0.0, 1.0]).unwrap();
        assert!(close(r.t, std::f64::consts::SQRT_2, 1e-12));
        assert!(close(r.p, 0.20703125, 1e-9));
        assert_eq!(r.df, 6.0);

        let x = [0.5, 1.5, 2.0, 3.25, 4.0];
        let y = [1.0, 0.0, 2.5, 0.75];
        let r = two_sample_t_test(&x, &y).unwrap();
        assert!(close(r.t, 1.409148171718285, 1e-12));
        assert!(close(r.p, 0.20163192793762835, 1e-9));
        let r = welch_t_test(&x, &y).unwrap();
        assert!(close(r.t, 1.4592377305385476, 1e-12));
        assert!(close(r.df, 6.994633752915401, 1e-9));
        assert!(close(r.p, 0.1878997717241894, 1e-9));

        let r = paired_t_test(&[1.0, 0.0, 1.0, 1.0, 0.0, 1.0], &[0.0, 0.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
        assert!(close(r.t, 1.5811388300841895, 1e-12));
        assert!(close(r.p, 0.17468781426411925, 1e-9));
    }

    #[test]
    fn t_test_edges() {
        let x = [1.0, 0.0, 1.0, 1.0];
        let r = two_sample_t_test(&x, &x).unwrap();
        assert_eq!((r.t, r.p), (0.0, 1.0));
        assert!(matches!(two_sample_t_test(&[1.0, 1.0], &[1.0, 1.0]), Err(EvalError::Degenerate(_))));
        assert!(matches!(two_sample_t_test(&[1.0], &[1.0, 0.0]), Err(EvalError::Domain(_))));
        assert!(paired_t_test(&[1.0, 0.0], &[1.0, 0.0, 1.0]).is_err());
    }

    /// Pairwise definition: alpha = 1 - D_o / D_e with every ordered pair of
    /// values inside a unit weighted by 1/(m_u - 1).
    fn alpha_oracle(ratings: &[Vec<Option<u32>>]) -> f64 {
        let items = ratings[0].len();
        let units: Vec<Vec<u32>> = (0..items)
            .map(|i| ratings.iter().filter_map(|r| r[i]).collect::<Vec<_>>())
            .filter(|v| v.len() >= 2)
            .collect();
        let all: Vec<u32> = units.iter().flatten().copied().collect();
        let n = all.len() as f64;
        let mut d_o = 0.0;
        for u in &units {
            let mut diff = 0.0;
            for a in 0..u.len() {
                for b in 0..u.len() {
                    if a != b && u[a] != u[b] {
                        diff += 1.0;
                    }
                }
            }
            d_o += diff / (u.len() - 1) as f64;
        }
        d_o /= n;
        let mut d_e = 0.0;
        for a in 0..all.len() {
            for b in 0..all.len() {
                if a != b && all[a] != all[b] {
                    d_e += 1.0;
                }
            }
        }
        d_e /= n * (n - 1.0);
        1.0 - d_o / d_e
    }

    #[test]
    fn alpha_examples() {
        let full = vec![vec![Some(1), Some(2), Some(1)]; 3];
        assert_eq!(krippendorff_alpha_nominal(&full).unwrap(), 1.0);
        let same = vec![vec![Some(4), Some(4)]; 3];
        assert_eq!(krippendorff_alpha_nominal(&same), Err(EvalError::UndefinedAgreement));

        let m = vec![vec![Some(1), Some(2), Some(1), None], vec![Some(1), Some(1), Some(1), Some(2)]];
        let a = krippendorff_alpha_nominal(&m).unwrap();
        assert!(close(a, alpha_oracle(&m), 1e-9), "{a}");

        assert!(krippendorff_alpha_nominal(&[vec![Some(1), None], vec![Some(1), Some(2)]]).is_err());
    }

    // Krippendorff's published nominal example: four coders, twelve units.
    #[test]
    fn alpha_published_example() {
        let n = None;
        let s = Some;
        let m = vec![
            vec![s(1), s(2), s(3), s(3), s(2), s(1), s(4), s(1), s(2), n, n, n],
            vec![s(1), s(2), s(3), s(3), s(2), s(2), s(4), s(1), s(2), s(5), n, s(3)],
            vec![n, s(3), s(3), s(3), s(2), s(3), s(4), s(2), s(2), s(5), s(1), n],
            vec![s(1), s(2), s(3), s(3), s(2), s(4), s(4), s(1), s(2), s(5), s(1), n],
        ];
        let a = krippendorff_alpha_nominal(&m).unwrap();
        assert!(close(a, 0.743, 5e-4), "{a}");
        assert!(close(a, alpha_oracle(&m), 1e-12));
    }

    #[test]
    fn report_csv() {
        let rows = [ScoreRow { strategy: "coo".into(), model: "m".into(), topic: None, n: 4, acc: 0.5, cacc: 0.75 }];
        let mut buf = Vec::new();
        write_score_csv(&rows, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "strategy,model,topic,n,acc,cacc\ncoo,m,,4,50.00,75.00\n");
    }

    fn t_oracle(x: &[f64], y: &[f64]) -> f64 {
        let m = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let ss = |v: &[f64]| {
            let mu = m(v);
            v.iter().map(|a| (a - mu) * (a - mu)).sum::<f64>()
        };
        let (nx, ny) = (x.len() as f64, y.len() as f64);
        let sp = (ss(x) + ss(y)) / (nx + ny - 2.0);
        (m(x) - m(y)) / (sp / nx + sp / ny).sqrt()
    }

    proptest! {
        #[test]
        fn cacc_at_least_acc(
            cases in prop::collection::vec((4usize..8, 0usize..8, prop::option::of(0usize..8), any::<bool>()), 1..40)
        ) {
            let mut questions = HashMap::new();
            let mut g = HashMap::new();
            let mut preds = Vec::new();
            for (i, (n, gold, pick, refusal)) in cases.into_iter().enumerate() {
                let id = format!("q{i}");
                let mut choices: Vec<String> = (0..n).map(|c| format!("c{c}")).collect();
                if refusal { choices[n - 1] = "Refused".into(); }
                let gold = gold % n;
                questions.insert(id.clone(), OpinionQuestion::new(&id, "t", "?", choices, gold).unwrap());
                g.insert(id.clone(), gold);
                preds.push(pred(&id, pick.map_or(AnswerOutcome::ita(""), |p| AnswerOutcome::choice(p % n, ""))));
            }
            let acc = accuracy(&preds, &g).unwrap();
            let cacc = collapsed_accuracy(&preds, &g, &questions).unwrap();
            prop_assert!(cacc >= acc);
            preds.reverse();
            prop_assert_eq!(accuracy(&preds, &g).unwrap(), acc);
        }

        #[test]
        fn collapse_partitions(n in 4usize..12, refusals in 0usize..3) {
            let mut choices: Vec<String> = (0..n).map(|c| format!("c{c}")).collect();
            for c in choices.iter_mut().rev().take(refusals) { *c = "Don't know".into(); }
            let q = OpinionQuestion::new("q", "t", "?", choices, 0).unwrap();
            let m = build_collapse_map(&q).unwrap();
            prop_assert!(m.bucket_of.contains(&Bucket::Low));
            prop_assert!(m.bucket_of.contains(&Bucket::High));
            prop_assert_eq!(m.bucket_of.iter().filter(|b| **b == Bucket::Excluded).count(), refusals);
        }

        #[test]
        fn t_matches_formula(
            x in prop::collection::vec(-50i32..50, 2..12),
            y in prop::collection::vec(-50i32..50, 2..12),
        ) {
            let x: Vec<f64> = x.into_iter().map(f64::from).collect();
            let y: Vec<f64> = y.into_iter().map(f64::from).collect();
            if let Ok(r) = two_sample_t_test(&x, &y) {
                prop_assert!((r.t - t_oracle(&x, &y)).abs() <= 1e-9 * r.t.abs().max(1.0));
                let s = two_sample_t_test(&y, &x).unwrap();
                prop_assert!((s.t + r.t).abs() <= 1e-9 * r.t.abs().max(1.0));
                prop_assert!((s.p - r.p).abs() <= 1e-12);
                prop_assert!((0.0..=1.0).contains(&r.p));
            }
        }
    }
}
