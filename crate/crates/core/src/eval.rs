//! Answer and ranking metrics, experiment harnesses, and reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::QaExample;
use crate::error::Result;
use crate::inference::{predict_parallel, InferenceConfig, Prediction, ResolutionStrategy};
use crate::model::{Model, ModelConfig, Token};
use crate::training::{train, MetricsRecord, SpanStrategy, TrainConfig, TrainOptions};

/// 1.0 iff the sequences are identical.
pub fn exact_match(pred: &[Token], gold: &[Token]) -> f64 {
    f64::from(u8::from(pred == gold))
}

/// Harmonic mean of bag-of-tokens precision and recall (multiset overlap).
pub fn token_f1(pred: &[Token], gold: &[Token]) -> f64 {
    if pred.is_empty() || gold.is_empty() {
        return f64::from(u8::from(pred.is_empty() && gold.is_empty()));
    }
    let mut counts: BTreeMap<Token, usize> = BTreeMap::new();
    for t in gold {
        *counts.entry(*t).or_default() += 1;
    }
    let mut common = 0usize;
    for t in pred {
        if let Some(c) = counts.get_mut(t) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let p = common as f64 / pred.len() as f64;
    let r = common as f64 / gold.len() as f64;
    2.0 * p * r / (p + r)
}

/// Relevant items among the first `k`, divided by `k`.
pub fn precision_at_k(relevance: &[bool], k: usize) -> f64 {
    assert!(k >= 1, "k must be >= 1");
    relevance.iter().take(k).filter(|r| **r).count() as f64 / k as f64
}

fn dcg(relevance: impl Iterator<Item = bool>) -> f64 {
    relevance
        .enumerate()
        .filter(|(_, r)| *r)
        .map(|(i, _)| 1.0 / ((i + 2) as f64).log2())
        .sum()
}

/// Binary-relevance nDCG@k; 0 when nothing is relevant.
pub fn ndcg_at_k(relevance: &[bool], k: usize) -> f64 {
    assert!(k >= 1, "k must be >= 1");
    let n_rel = relevance.iter().filter(|r| **r).count();
    if n_rel == 0 {
        return 0.0;
    }
    let ideal = dcg((0..relevance.len()).map(|i| i < n_rel).take(k));
    dcg(relevance.iter().copied().take(k)) / ideal
}

/// Indices sorted by descending score; equal scores keep original order.
pub fn rank_by_scores(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order
}

/// Worker threads for evaluation, from `XAQA_THREADS` (default 1).
pub fn worker_count() -> usize {
    std::env::var("XAQA_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|n| *n >= 1)
        .unwrap_or(1)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AnswerScores {
    pub em: f64,
    pub f1: f64,
}

fn mean_scores<'a>(pairs: impl Iterator<Item = (&'a [Token], &'a [Token])>) -> AnswerScores {
    let mut n = 0usize;
    let (mut em, mut f1) = (0.0, 0.0);
    for (p, g) in pairs {
        em += exact_match(p, g);
        f1 += token_f1(p, g);
        n += 1;
    }
    if n == 0 {
        return AnswerScores::default();
    }
    AnswerScores {
        em: em / n as f64,
        f1: f1 / n as f64,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnswerSection {
    pub queries: usize,
    pub generative: AnswerScores,
    pub extractive: AnswerScores,
}

fn extracted(p: &Prediction) -> &[Token] {
    p.extractive.as_ref().map_or(&[], |s| s.tokens.as_slice())
}

pub fn answer_section(examples: &[QaExample], preds: &[Prediction]) -> AnswerSection {
    AnswerSection {
        queries: examples.len(),
        generative: mean_scores(preds.iter().zip(examples).map(|(p, e)| (p.generative.as_slice(), e.answer.as_slice()))),
        extractive: mean_scores(preds.iter().zip(examples).map(|(p, e)| (extracted(p), e.answer.as_slice()))),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrategyResult {
    pub strategy: ResolutionStrategy,
    pub em: f64,
    pub f1: f64,
    /// Fraction of resolved answers that are not in any passage.
    pub hallucination_rate: f64,
    #[serde(skip)]
    pub per_example_em: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HallucinationSection {
    pub total: usize,
    /// Queries whose passages contain the gold answer.
    pub effective: usize,
    /// Fraction of effective queries whose generated answer is ungrounded.
    pub hallucination_rate: f64,
    pub strategies: Vec<StrategyResult>,
}

impl HallucinationSection {
    pub fn get(&self, s: ResolutionStrategy) -> &StrategyResult {
        self.strategies.iter().find(|r| r.strategy == s).expect("every strategy is reported")
    }
}

/// Scores every resolution strategy on the answerable subset.
pub fn hallucination_section(examples: &[QaExample], preds: &[Prediction]) -> HallucinationSection {
    let kept: Vec<(&QaExample, &Prediction)> = examples
        .iter()
        .zip(preds)
        .filter(|(e, _)| !crate::data::find_occurrences(&e.answer, &e.passages).is_empty() && !e.answer.is_empty())
        .collect();
    let n = kept.len().max(1) as f64;
    let strategies = ResolutionStrategy::ALL
        .iter()
        .map(|&s| {
            let per_example_em: Vec<f64> = kept.iter().map(|(e, p)| exact_match(p.resolved.get(s), &e.answer)).collect();
            let f1: f64 = kept.iter().map(|(e, p)| token_f1(p.resolved.get(s), &e.answer)).sum();
            let halluc = kept
                .iter()
                .filter(|(e, p)| crate::inference::is_hallucination(p.resolved.get(s), &e.passages))
                .count();
            StrategyResult {
                strategy: s,
                em: per_example_em.iter().sum::<f64>() / n,
                f1: f1 / n,
                hallucination_rate: halluc as f64 / n,
                per_example_em,
            }
        })
        .collect();
    HallucinationSection {
        total: examples.len(),
        effective: kept.len(),
        hallucination_rate: kept.iter().filter(|(_, p)| p.hallucination).count() as f64 / n,
        strategies,
    }
}

pub fn run_hallucination_experiment(examples: &[QaExample], model: &Model, cfg: &InferenceConfig) -> Result<HallucinationSection> {
    let preds = predict_parallel(model, examples, cfg, worker_count())?;
    Ok(hallucination_section(examples, &preds))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RankingMetrics {
    pub p_at_1: f64,
    pub p_at_k: f64,
    pub ndcg_at_k: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RerankSection {
    pub k: usize,
    pub queries: usize,
    pub original: RankingMetrics,
    pub reranked: RankingMetrics,
}

fn ranking_metrics(lists: &[Vec<bool>], k: usize) -> RankingMetrics {
    let n = lists.len().max(1) as f64;
    RankingMetrics {
        p_at_1: lists.iter().map(|r| precision_at_k(r, 1)).sum::<f64>() / n,
        p_at_k: lists.iter().map(|r| precision_at_k(r, k)).sum::<f64>() / n,
        ndcg_at_k: lists.iter().map(|r| ndcg_at_k(r, k)).sum::<f64>() / n,
    }
}

/// Original passage order versus order by passage score, over queries with
/// at least one relevant passage.
pub fn rerank_section(examples: &[QaExample], scores: &[Vec<f64>], k: usize) -> RerankSection {
    let mut original = Vec::new();
    let mut reranked = Vec::new();
    for (e, s) in examples.iter().zip(scores) {
        let rel = e.relevant_passages();
        if !rel.iter().any(|r| *r) {
            continue;
        }
        reranked.push(rank_by_scores(s).into_iter().map(|i| rel[i]).collect());
        original.push(rel);
    }
    RerankSection {
        k,
        queries: original.len(),
        original: ranking_metrics(&original, k),
        reranked: ranking_metrics(&reranked, k),
    }
}

pub fn run_rerank_experiment(examples: &[QaExample], model: &Model, cfg: &InferenceConfig, k: usize) -> Result<RerankSection> {
    let preds = predict_parallel(model, examples, cfg, worker_count())?;
    let scores: Vec<Vec<f64>> = preds.into_iter().map(|p| p.passage_scores).collect();
    Ok(rerank_section(examples, &scores, k))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub lambda: f64,
    pub strategy: SpanStrategy,
    pub dev_em_gen: f64,
    pub dev_em_ext: f64,
    pub curve: Vec<MetricsRecord>,
}

/// Trains one model per `(λ, strategy)` cell from `base`. The λ=0 model
/// ignores the strategy, so it is trained once and shared by every row.
pub fn run_lambda_ablation(
    train_set: &[QaExample],
    dev: &[QaExample],
    model_cfg: &ModelConfig,
    base: &TrainConfig,
    lambdas: &[f64],
    strategies: &[SpanStrategy],
    opts: &TrainOptions,
) -> Result<Vec<AblationCell>> {
    let mut baseline: Option<(f64, f64, Vec<MetricsRecord>)> = None;
    let mut cells = Vec::with_capacity(lambdas.len() * strategies.len());
    for &strategy in strategies {
        for &lambda in lambdas {
            let cfg = TrainConfig {
                lambda,
                strategy,
                ..base.clone()
            };
            let (g, e, curve) = match (&baseline, lambda == 0.0) {
                (Some(b), true) => b.clone(),
                _ => {
                    let run = train(train_set, dev, model_cfg, &cfg, &TrainOptions { out_dir: None, ..opts.clone() })?;
                    let last = run.log.last().expect("at least one validation");
                    let r = (last.dev_em_gen, last.dev_em_ext, run.log.clone());
                    if lambda == 0.0 {
                        baseline = Some(r.clone());
                    }
                    r
                }
            };
            cells.push(AblationCell {
                lambda,
                strategy,
                dev_em_gen: g,
                dev_em_ext: e,
                curve,
            });
        }
    }
    Ok(cells)
}

/// Everything an evaluation run produced; sections are optional.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub answers: Option<AnswerSection>,
    pub hallucination: Option<HallucinationSection>,
    pub rerank: Option<RerankSection>,
    pub ablation: Option<Vec<AblationCell>>,
}

impl EvalReport {
    /// Human-readable report with one block per section.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        if let Some(a) = &self.answers {
            let _ = writeln!(s, "== answers ({} queries) ==", a.queries);
            let _ = writeln!(s, "{:<12} {:>7} {:>7}", "mode", "EM", "F1");
            for (name, sc) in [("generative", a.generative), ("extractive", a.extractive)] {
                let _ = writeln!(s, "{:<12} {:>7.4} {:>7.4}", name, sc.em, sc.f1);
            }
            s.push('\n');
        }
        if let Some(h) = &self.hallucination {
            let _ = writeln!(s, "== hallucination ({} of {} queries with the answer in context) ==", h.effective, h.total);
            let _ = writeln!(s, "generated answers not in any passage: {:.4}", h.hallucination_rate);
            let _ = writeln!(s, "{:<12} {:>7} {:>7} {:>9}", "strategy", "EM", "F1", "halluc");
            for r in &h.strategies {
                let _ = writeln!(s, "{:<12} {:>7.4} {:>7.4} {:>9.4}", r.strategy.name(), r.em, r.f1, r.hallucination_rate);
            }
            s.push('\n');
        }
        if let Some(r) = &self.rerank {
            let _ = writeln!(s, "== reranking ({} queries, k={}) ==", r.queries, r.k);
            let _ = writeln!(s, "{:<10} {:>7} {:>7} {:>9}", "order", "P@1", format!("P@{}", r.k), format!("nDCG@{}", r.k));
            for (name, m) in [("original", r.original), ("attention", r.reranked)] {
                let _ = writeln!(s, "{:<10} {:>7.4} {:>7.4} {:>9.4}", name, m.p_at_1, m.p_at_k, m.ndcg_at_k);
            }
            s.push('\n');
        }
        if let Some(cells) = &self.ablation {
            let _ = writeln!(s, "== lambda ablation ==");
            let _ = writeln!(s, "{:<12} {:>6} {:>8} {:>8}", "strategy", "lambda", "gen EM", "ext EM");
            for c in cells {
                let _ = writeln!(s, "{:<12} {:>6.2} {:>8.4} {:>8.4}", c.strategy.name(), c.lambda, c.dev_em_gen, c.dev_em_ext);
            }
            s.push('\n');
        }
        s
    }

    /// One JSON object per line, tagged by section.
    pub fn to_jsonl(&self) -> String {
        let mut lines = Vec::new();
        let mut push = |section: &str, v: serde_json::Value| {
            lines.push(serde_json::json!({ "section": section, "data": v }).to_string());
        };
        if let Some(a) = &self.answers {
            push("answers", serde_json::to_value(a).expect("serialize"));
        }
        if let Some(h) = &self.hallucination {
            push("hallucination", serde_json::to_value(h).expect("serialize"));
        }
        if let Some(r) = &self.rerank {
            push("rerank", serde_json::to_value(r).expect("serialize"));
        }
        if let Some(cells) = &self.ablation {
            for c in cells {
                push("ablation", serde_json::to_value(c).expect("serialize"));
            }
        }
        lines.into_iter().map(|l| l + "\n").collect()
    }
}

#[cfg(test)]
mod tests;
