use super::*;
use crate::data::find_occurrences;
use crate::inference::{Resolved, SpanPrediction};

#[test]
fn exact_match_cases() {
    assert_eq!(exact_match(&[4, 5], &[4, 5]), 1.0);
    assert_eq!(exact_match(&[4, 6], &[4, 5]), 0.0);
    assert_eq!(exact_match(&[], &[4]), 0.0);
}

#[test]
fn token_f1_cases() {
    assert_eq!(token_f1(&[4, 5], &[4, 5]), 1.0);
    assert!((token_f1(&[10, 11], &[11, 12]) - 0.5).abs() < 1e-15);
    assert_eq!(token_f1(&[10], &[11]), 0.0);
    assert_eq!(token_f1(&[], &[]), 1.0);
    assert_eq!(token_f1(&[], &[3]), 0.0);
    assert_eq!(token_f1(&[3], &[]), 0.0);
    // multiplicity counts: pred {7,7}, gold {7} → p 0.5, r 1
    assert!((token_f1(&[7, 7], &[7]) - 2.0 / 3.0).abs() < 1e-15);
}

#[test]
fn precision_cases() {
    assert_eq!(precision_at_k(&[true, true, false], 2), 1.0);
    assert_eq!(precision_at_k(&[false, false], 2), 0.0);
    assert_eq!(precision_at_k(&[true, false, true, false], 2), 0.5);
    assert_eq!(precision_at_k(&[true], 4), 0.25);
}

#[test]
fn ndcg_cases() {
    assert_eq!(ndcg_at_k(&[true, true, false], 3), 1.0);
    let want = 1.5 / (1.0 + 1.0 / 3f64.log2());
    assert!((ndcg_at_k(&[true, false, true], 3) - want).abs() < 1e-12);
    assert!((want - 0.9197).abs() < 1e-4);
    assert_eq!(ndcg_at_k(&[false, false], 2), 0.0);
}

#[test]
fn ranking_is_stable() {
    assert_eq!(rank_by_scores(&[0.1, 0.5, 0.1, 0.5]), vec![1, 3, 0, 2]);
}

fn example(passages: Vec<Vec<Token>>, answer: Vec<Token>) -> QaExample {
    let occurrences = find_occurrences(&answer, &passages);
    QaExample {
        id: "e".into(),
        question: vec![4, 5],
        answerable: !occurrences.is_empty(),
        passages,
        answer,
        occurrences,
    }
}

fn prediction(ex: &QaExample, generative: Vec<Token>, ext: Vec<Token>) -> Prediction {
    use crate::inference::resolve;
    use ResolutionStrategy::*;
    let span = SpanPrediction {
        passage: 0,
        start: 0,
        end: ext.len().saturating_sub(1),
        score: 1.0,
        tokens: ext,
    };
    let r = |s| resolve(&ex.passages, &generative, Some(&span), s);
    Prediction {
        id: ex.id.clone(),
        hallucination: crate::inference::is_hallucination(&generative, &ex.passages),
        resolved: Resolved {
            generative: r(Generative),
            attention: r(Attention),
            drop: r(Drop),
            backoff: r(Backoff),
        },
        generative,
        extractive: Some(span),
        truncated: false,
        passage_scores: vec![0.0; ex.passages.len()],
    }
}

#[test]
fn hallucination_section_filters_and_orders() {
    let exs = vec![
        example(vec![vec![10, 11, 12]], vec![11]),
        example(vec![vec![10, 11, 12]], vec![12]),
        example(vec![vec![10, 11, 12]], vec![30]),
    ];
    let preds = vec![
        prediction(&exs[0], vec![11], vec![10]),
        prediction(&exs[1], vec![40], vec![12]),
        prediction(&exs[2], vec![30], vec![10]),
    ];
    let h = hallucination_section(&exs, &preds);
    assert_eq!((h.total, h.effective), (3, 2));
    assert_eq!(h.hallucination_rate, 0.5);
    assert_eq!(h.get(ResolutionStrategy::Generative).em, 0.5);
    assert_eq!(h.get(ResolutionStrategy::Attention).em, 0.5);
    assert_eq!(h.get(ResolutionStrategy::Drop).em, 0.5);
    assert_eq!(h.get(ResolutionStrategy::Backoff).em, 1.0);
    assert_eq!(h.get(ResolutionStrategy::Attention).hallucination_rate, 0.0);
    let (d, b) = (h.get(ResolutionStrategy::Drop), h.get(ResolutionStrategy::Backoff));
    assert!(d.per_example_em.iter().zip(&b.per_example_em).all(|(d, b)| d <= b));
}

#[test]
fn oracle_scores_rank_the_gold_passage_first() {
    let exs = vec![
        example(vec![vec![10], vec![11], vec![12]], vec![12]),
        example(vec![vec![13], vec![14], vec![15]], vec![14]),
    ];
    let oracle = vec![vec![0.0, 0.0, 1.0], vec![0.0, 1.0, 0.0]];
    let r = rerank_section(&exs, &oracle, 2);
    assert_eq!(r.queries, 2);
    assert_eq!(r.reranked.p_at_1, 1.0);
    assert_eq!(r.original.p_at_1, 0.0);
    assert_eq!(r.reranked.ndcg_at_k, 1.0);
    assert!((r.original.ndcg_at_k - 0.5 / 3f64.log2()).abs() < 1e-12);
}

#[test]
fn report_renders_every_section() {
    let exs = vec![example(vec![vec![10, 11]], vec![11])];
    let preds = vec![prediction(&exs[0], vec![11], vec![11])];
    let report = EvalReport {
        answers: Some(answer_section(&exs, &preds)),
        hallucination: Some(hallucination_section(&exs, &preds)),
        rerank: Some(rerank_section(&exs, &[vec![1.0]], 1)),
        ablation: Some(vec![AblationCell {
            lambda: 0.5,
            strategy: SpanStrategy::FirstSpan,
            dev_em_gen: 1.0,
            dev_em_ext: 0.5,
            curve: vec![],
        }]),
    };
    let text = report.to_text();
    for head in ["== answers", "== hallucination", "== reranking", "== lambda ablation"] {
        assert!(text.contains(head), "{head}");
    }
    assert_eq!(report.to_jsonl().lines().count(), 4);
    for line in report.to_jsonl().lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["section"].is_string());
    }
}
