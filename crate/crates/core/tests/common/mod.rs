use proptest::prelude::*;
use proptest::test_runner::{TestError, TestRunner};
use xaqa_core::autodiff::Graph;
use xaqa_core::data::{find_occurrences, generate_example, GenSpec};
use xaqa_core::eval::{exact_match, ndcg_at_k, precision_at_k, rank_by_scores, token_f1};
use xaqa_core::inference::{extract_span, is_hallucination, passage_scores, resolve, ResolutionStrategy, SpanDistribution};
use xaqa_core::model::{Boundaries, Model, ModelConfig, SegmentBounds, Token, BOS, SEP};
use xaqa_core::training::{build_span_targets, loss_values, SpanStrategy, TrainConfig};
use xaqa_core::Tensor;

fn runner(cases: u32) -> TestRunner {
    TestRunner::new(ProptestConfig {
        cases,
        failure_persistence: None,
        ..ProptestConfig::default()
    })
}

fn report<V: std::fmt::Debug>(r: Result<(), TestError<V>>) -> Result<(), String> {
    r.map_err(|e| e.to_string())
}

/// Segments of `[q0, q1, SEP, passage…]` laid end to end.
fn boundaries(passage_lens: &[usize]) -> Boundaries {
    let mut start = 0;
    let segments = passage_lens
        .iter()
        .enumerate()
        .map(|(i, &len)| {
            let mut tokens = vec![5, 6, SEP];
            tokens.extend((0..len).map(|j| 20 + ((i * 7 + j * 3) % 40) as Token));
            let s = SegmentBounds::new(i, start, 2, tokens, 0);
            start += s.len();
            s
        })
        .collect();
    Boundaries { segments }
}

fn normalized(weights: &[f64]) -> Vec<f64> {
    let z: f64 = weights.iter().sum();
    weights.iter().map(|w| w / z).collect()
}

fn span_case() -> impl Strategy<Value = (Vec<usize>, Vec<f64>, Vec<f64>, usize, bool)> {
    prop::collection::vec(1usize..7, 1..4).prop_flat_map(|lens| {
        let n: usize = lens.iter().map(|l| l + 3).sum();
        (
            Just(lens),
            prop::collection::vec(prop_oneof![Just(0.25), 0.001f64..1.0], n),
            prop::collection::vec(prop_oneof![Just(0.25), 0.001f64..1.0], n),
            1usize..5,
            any::<bool>(),
        )
    })
}

fn brute_precision(rel: &[bool], k: usize) -> f64 {
    let mut hits = 0;
    for (i, r) in rel.iter().enumerate() {
        if i < k && *r {
            hits += 1;
        }
    }
    hits as f64 / k as f64
}

fn brute_ndcg(rel: &[bool], k: usize) -> f64 {
    let gain = |list: &[bool]| -> f64 {
        let mut s = 0.0;
        for (i, r) in list.iter().enumerate().take(k) {
            if *r {
                s += 1.0 / (i as f64 + 2.0).log2();
            }
        }
        s
    };
    let mut ideal = rel.to_vec();
    ideal.sort_by(|a, b| b.cmp(a));
    let best = gain(&ideal);
    if best == 0.0 {
        0.0
    } else {
        gain(rel) / best
    }
}

fn tiny_model(seed: u64) -> Model {
    let cfg = ModelConfig {
        vocab_size: 40,
        d_model: 8,
        n_heads: 2,
        n_enc_layers: 1,
        n_dec_layers: 1,
        d_ff: 16,
        max_seq_len: 16,
        max_decode_len: 6,
    };
    Model::new(cfg, seed).unwrap()
}


/// Randomized invariant suites shared by the test and acceptance targets.
/// Each runs `cases` trials and returns the minimal failing input on error.
pub type Suite = (&'static str, fn(u32) -> Result<(), String>);

pub const SUITES: [Suite; 10] = [
    ("softmax rows are distributions", softmax_rows),
    ("attention records are normalized head means", attention_records),
    ("extracted spans are well formed", extracted_spans),
    ("passage score factors sum to one", passage_score_factors),
    ("exact match implies full F1", em_implies_f1),
    ("ranking metrics match a brute-force oracle", ranking_oracle),
    ("nDCG ignores trailing irrelevant order", ndcg_permutation),
    ("ranking is a stable descending permutation", stable_ranking),
    ("generated spans slice to the answer", generated_spans),
    ("span targets and losses are well formed", span_targets),
];

pub fn run_suite(name: &str, cases: u32) -> Result<(), String> {
    let (_, f) = SUITES.iter().find(|(n, _)| *n == name).expect("known suite");
    f(cases)
}

fn softmax_rows(cases: u32) -> Result<(), String> {
    let strat = (1usize..5, 1usize..9, prop::collection::vec(-60.0f64..60.0, 40));
    report(runner(cases).run(&strat, |(rows, cols, seed)| {
        let data: Vec<f64> = (0..rows * cols).map(|i| seed[i % seed.len()] * (1.0 + i as f64 * 0.01)).collect();
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(rows, cols, data).unwrap());
        let y = g.softmax_rows(x).unwrap();
        let v = g.value(y);
        for r in 0..rows {
            let row = v.row(r);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(row.iter().all(|p| (0.0..=1.0).contains(p)));
        }
        Ok(())
    }))
}

fn attention_records(cases: u32) -> Result<(), String> {
    let strat = (0u64..10_000, 1usize..4, 1usize..8, prop::collection::vec(4u32..40, 0..4));
    report(runner(cases).run(&strat, |(seed, n_passages, passage_len, prefix)| {
        let model = tiny_model(seed % 7);
        let passages: Vec<Vec<Token>> = (0..n_passages)
            .map(|p| (0..passage_len).map(|j| 4 + ((seed as usize + p * 11 + j * 5) % 36) as Token).collect())
            .collect();
        let mut net = model.net();
        let fused = net.encode_example(&[7, 9], &passages).unwrap();
        let mut full = vec![BOS];
        full.extend(&prefix);
        let (_, records) = net.decode_forward(&full, &fused).unwrap();
        prop_assert_eq!(records.len(), full.len());
        for r in &records {
            prop_assert_eq!(r.probs_avg.len(), fused.len());
            prop_assert!((r.probs_avg.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            for j in 0..r.probs_avg.len() {
                let mut s = 0.0;
                for h in &r.probs_per_head {
                    s += h[j];
                }
                prop_assert_eq!(r.probs_avg[j], s / r.probs_per_head.len() as f64);
            }
        }
        Ok(())
    }))
}

fn extracted_spans(cases: u32) -> Result<(), String> {
    report(runner(cases).run(&span_case(), |(lens, ws, we, l_max, mask)| {
        let b = boundaries(&lens);
        let dist = SpanDistribution::new(normalized(&ws), normalized(&we), b.clone(), mask);
        let span = extract_span(&dist, l_max).unwrap();
        let seg = &b.segments[span.passage];
        prop_assert!(span.start <= span.end);
        prop_assert!(span.end - span.start < l_max);
        prop_assert!(span.end < seg.context.len());
        prop_assert_eq!(span.tokens.len(), span.end - span.start + 1);
        let s = seg.context.start + span.start;
        let e = seg.context.start + span.end;
        prop_assert_eq!(span.score, dist.p_start[s] * dist.p_end[e]);

        // no window-respecting span anchored at either argmax beats it
        let ctx: Vec<usize> = b.segments.iter().flat_map(|s| s.context.clone()).collect();
        let arg = |v: &[f64]| ctx.iter().copied().fold(ctx[0], |best, i| if v[i] > v[best] { i } else { best });
        let (s1, e2) = (arg(&dist.p_start), arg(&dist.p_end));
        for &(anchor, is_start) in &[(s1, true), (e2, false)] {
            let sg = b.segment_of(anchor).unwrap();
            for other in sg.context.clone() {
                let (a, z) = if is_start { (anchor, other) } else { (other, anchor) };
                if a <= z && z - a < l_max {
                    prop_assert!(dist.p_start[a] * dist.p_end[z] <= span.score);
                }
            }
        }

        let passages: Vec<Vec<Token>> = b.segments.iter().map(|s| s.tokens[3..].to_vec()).collect();
        let attention = resolve(&passages, &[99], Some(&span), ResolutionStrategy::Attention);
        prop_assert!(!is_hallucination(&attention, &passages));
        Ok(())
    }))
}

fn passage_score_factors(cases: u32) -> Result<(), String> {
    report(runner(cases).run(&span_case(), |(lens, ws, we, _l, mask)| {
        let b = boundaries(&lens);
        let dist = SpanDistribution::new(normalized(&ws), normalized(&we), b.clone(), mask);
        let start_mass: f64 = b.segments.iter().map(|s| dist.raw_start[s.span.clone()].iter().sum::<f64>()).sum();
        let end_mass: f64 = b.segments.iter().map(|s| dist.raw_end[s.span.clone()].iter().sum::<f64>()).sum();
        prop_assert!((start_mass - 1.0).abs() < 1e-6);
        prop_assert!((end_mass - 1.0).abs() < 1e-6);
        let scores = passage_scores(&dist);
        prop_assert_eq!(scores.len(), lens.len());
        prop_assert!(scores.iter().all(|s| *s >= 0.0));
        prop_assert!(scores.iter().sum::<f64>() <= 1.0 + 1e-12);
        if mask {
            prop_assert!((dist.p_start.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            for s in &b.segments {
                for i in s.question.clone().chain(s.sep) {
                    prop_assert_eq!(dist.p_start[i], 0.0);
                }
            }
        }
        Ok(())
    }))
}

fn em_implies_f1(cases: u32) -> Result<(), String> {
    let strat = (prop::collection::vec(4u32..9, 0..6), prop::collection::vec(4u32..9, 0..6));
    report(runner(cases).run(&strat, |(pred, gold)| {
        let f = token_f1(&pred, &gold);
        prop_assert!((0.0..=1.0).contains(&f));
        prop_assert_eq!(f, token_f1(&gold, &pred));
        if exact_match(&pred, &gold) == 1.0 {
            prop_assert_eq!(f, 1.0);
        }
        prop_assert_eq!(token_f1(&gold, &gold), 1.0);
        Ok(())
    }))
}

fn ranking_oracle(cases: u32) -> Result<(), String> {
    let strat = (prop::collection::vec(any::<bool>(), 1..12), 1usize..14);
    report(runner(cases).run(&strat, |(rel, k)| {
        prop_assert!((precision_at_k(&rel, k) - brute_precision(&rel, k)).abs() < 1e-9);
        let n = ndcg_at_k(&rel, k);
        prop_assert!((n - brute_ndcg(&rel, k)).abs() < 1e-9);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&n));
        Ok(())
    }))
}

fn ndcg_permutation(cases: u32) -> Result<(), String> {
    let strat = (prop::collection::vec(any::<bool>(), 1..12), 1usize..14, 0usize..12);
    report(runner(cases).run(&strat, |(rel, k, rot)| {
        let last = rel.iter().rposition(|r| *r).map_or(0, |i| i + 1);
        let mut permuted = rel.clone();
        let tail = &mut permuted[last..];
        if !tail.is_empty() {
            let r = rot % tail.len();
            tail.rotate_left(r);
        }
        prop_assert_eq!(ndcg_at_k(&rel, k), ndcg_at_k(&permuted, k));
        Ok(())
    }))
}

fn stable_ranking(cases: u32) -> Result<(), String> {
    let strat = prop::collection::vec(prop_oneof![Just(0.5), 0.0f64..1.0], 0..8);
    report(runner(cases).run(&strat, |scores| {
        let order = rank_by_scores(&scores);
        let mut seen = order.clone();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..scores.len()).collect::<Vec<_>>());
        for w in order.windows(2) {
            prop_assert!(scores[w[0]] > scores[w[1]] || (scores[w[0]] == scores[w[1]] && w[0] < w[1]));
        }
        Ok(())
    }))
}

fn generated_spans(cases: u32) -> Result<(), String> {
    let strat = (0u64..1_000_000, 0usize..50, 0.0f64..1.0, 0.0f64..0.5);
    report(runner(cases).run(&strat, |(seed, index, multi, unans)| {
        let spec = GenSpec { seed, p_multi_occurrence: multi, p_unanswerable: unans, ..GenSpec::default() };
        let ex = generate_example(&spec, index).unwrap();
        prop_assert_eq!(&ex.occurrences, &find_occurrences(&ex.answer, &ex.passages));
        prop_assert_eq!(ex.answerable, !ex.occurrences.is_empty());
        for o in &ex.occurrences {
            prop_assert_eq!(&ex.passages[o.passage][o.start..=o.end], ex.answer.as_slice());
        }
        Ok(())
    }))
}

fn span_targets(cases: u32) -> Result<(), String> {
    let strat = (0u64..100_000, 0usize..20, 0usize..3, 0.0f64..=1.0);
    report(runner(cases).run(&strat, |(seed, index, strat, lambda)| {
        let spec = GenSpec { seed, p_multi_occurrence: 0.5, vocab_size: 40, passage_len: 12, ..GenSpec::default() };
        let ex = generate_example(&spec, index).unwrap();
        let model = tiny_model(seed % 3);
        let fused = model.net().encode_example(&ex.question, &ex.passages).unwrap();
        let b = &fused.boundaries;
        let strategy = SpanStrategy::ALL[strat];
        let n = b.total_len();
        let uniform = vec![1.0 / n as f64; n];
        let attention = (strategy == SpanStrategy::MostLikely).then_some((uniform.as_slice(), uniform.as_slice()));
        let t = build_span_targets(&ex, b, strategy, attention).unwrap().unwrap();
        let gold: Vec<usize> = ex.occurrences.iter().map(|o| o.passage).collect();
        for target in [&t.start_target, &t.end_target] {
            prop_assert!((target.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for (i, w) in target.iter().enumerate() {
                if *w > 0.0 {
                    let (p, _) = b.locate(i).expect("support is context");
                    prop_assert!(gold.contains(&p));
                }
            }
        }

        let cfg = TrainConfig { lambda, strategy, ..TrainConfig::default() };
        let l = loss_values(&model, &ex, &cfg).unwrap();
        prop_assert!(l.gen >= 0.0 && l.joint >= 0.0);
        prop_assert!(l.span.is_none_or(|s| s >= 0.0));
        Ok(())
    }))
}
