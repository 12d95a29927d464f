//! Decoding, attention-based span extraction, hallucination handling, and
//! passage scoring.

use serde::{Deserialize, Serialize};

use crate::data::{find_occurrences, QaExample};
use crate::error::{Result, XaqaError};
use crate::model::{AttentionRecord, Boundaries, DecodeRequest, Model, Token, BOS, EOS};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferenceConfig {
    pub beam_size: usize,
    pub l_max: usize,
    /// Zero question/separator mass before extraction and renormalize.
    pub mask_non_context: bool,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            beam_size: 1,
            l_max: 10,
            mask_non_context: true,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_size == 0 || self.l_max == 0 {
            return Err(XaqaError::contract("inference config: beam_size and l_max must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeResult {
    /// Answer tokens, BOS and EOS stripped.
    pub generated: Vec<Token>,
    /// One record per decoder input position: `generated.len() + 1`.
    pub records: Vec<AttentionRecord>,
    pub beam_score: f64,
    /// Hit `max_decode_len` before emitting EOS.
    pub truncated: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpanDistribution {
    pub p_start: Vec<f64>,
    pub p_end: Vec<f64>,
    /// Unmasked head-averaged vectors, used for passage scores.
    pub raw_start: Vec<f64>,
    pub raw_end: Vec<f64>,
    pub boundaries: Boundaries,
}

/// An extracted span; `start`/`end` are inclusive context offsets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpanPrediction {
    pub passage: usize,
    pub start: usize,
    pub end: usize,
    pub score: f64,
    pub tokens: Vec<Token>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResolutionStrategy {
    Generative,
    Attention,
    Drop,
    Backoff,
}

impl ResolutionStrategy {
    pub const ALL: [ResolutionStrategy; 4] = [
        ResolutionStrategy::Generative,
        ResolutionStrategy::Attention,
        ResolutionStrategy::Drop,
        ResolutionStrategy::Backoff,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ResolutionStrategy::Generative => "generative",
            ResolutionStrategy::Attention => "attention",
            ResolutionStrategy::Drop => "drop",
            ResolutionStrategy::Backoff => "backoff",
        }
    }
}

/// Beam search over a step function that maps live prefixes (BOS first) to
/// next-token log-probabilities. Scores are raw log-probability sums.
///
/// Returns the best hypothesis without BOS/EOS, its score, and whether it
/// was cut off at `max_len` decoder positions.
pub fn beam_search(
    mut step: impl FnMut(&[Vec<Token>]) -> Result<Vec<Vec<f64>>>,
    beam_size: usize,
    max_len: usize,
) -> Result<(Vec<Token>, f64, bool)> {
    #[derive(Clone)]
    struct Hyp {
        prefix: Vec<Token>,
        score: f64,
        done: bool,
        truncated: bool,
    }
    let mut beams = vec![Hyp {
        prefix: vec![BOS],
        score: 0.0,
        done: false,
        truncated: false,
    }];
    while beams.iter().any(|h| !h.done) {
        let live: Vec<Vec<Token>> = beams.iter().filter(|h| !h.done).map(|h| h.prefix.clone()).collect();
        let mut dists = step(&live)?.into_iter();
        let mut cands: Vec<Hyp> = beams.iter().filter(|h| h.done).cloned().collect();
        for h in beams.iter().filter(|h| !h.done) {
            let lp = dists.next().expect("one distribution per live prefix");
            let mut order: Vec<usize> = (0..lp.len()).collect();
            order.sort_by(|&a, &b| lp[b].total_cmp(&lp[a]).then(a.cmp(&b)));
            for &tok in order.iter().filter(|&&t| lp[t] > f64::NEG_INFINITY).take(beam_size) {
                let eos = tok as Token == EOS;
                // a full-length prefix cannot grow; a non-EOS choice ends it
                let full = h.prefix.len() >= max_len;
                let mut prefix = h.prefix.clone();
                if !eos && !full {
                    prefix.push(tok as Token);
                }
                cands.push(Hyp {
                    prefix,
                    score: h.score + lp[tok],
                    done: eos || full,
                    truncated: !eos && full,
                });
            }
        }
        cands.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.prefix.cmp(&b.prefix)));
        cands.truncate(beam_size);
        beams = cands;
    }
    let best = beams.into_iter().next().expect("non-empty beam");
    Ok((best.prefix[1..].to_vec(), best.score, best.truncated))
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

fn log_softmax(p: Vec<f64>) -> Vec<f64> {
    p.into_iter().map(|x| x.ln()).collect()
}

/// Decodes every example. Greedy decoding (`beam_size == 1`) runs all
/// examples of a chunk through the decoder together; beam search decodes
/// one example at a time and replays the winner to record attention.
pub fn generate_batch(model: &Model, examples: &[&QaExample], cfg: &InferenceConfig) -> Result<Vec<(DecodeResult, Boundaries)>> {
    cfg.validate()?;
    let mut out = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(64) {
        if cfg.beam_size == 1 {
            out.extend(greedy_chunk(model, chunk)?);
        } else {
            for ex in chunk {
                out.push(beam_one(model, ex, cfg.beam_size)?);
            }
        }
    }
    Ok(out)
}

pub fn generate(model: &Model, example: &QaExample, cfg: &InferenceConfig) -> Result<(DecodeResult, Boundaries)> {
    Ok(generate_batch(model, &[example], cfg)?.remove(0))
}

fn greedy_chunk(model: &Model, chunk: &[&QaExample]) -> Result<Vec<(DecodeResult, Boundaries)>> {
    let max_len = model.config.max_decode_len;
    let mut net = model.net();
    let inputs: Vec<(&[Token], &[Vec<Token>])> = chunk.iter().map(|e| (e.question.as_slice(), e.passages.as_slice())).collect();
    let fused = net.encode_examples(&inputs)?;
    let mut prefixes: Vec<Vec<Token>> = vec![vec![BOS]; chunk.len()];
    let mut scores = vec![0.0; chunk.len()];
    let mut results: Vec<Option<DecodeResult>> = vec![None; chunk.len()];
    loop {
        let live: Vec<usize> = (0..chunk.len()).filter(|&i| results[i].is_none()).collect();
        if live.is_empty() {
            break;
        }
        let requests: Vec<DecodeRequest> = live
            .iter()
            .map(|&i| DecodeRequest {
                prefix: &prefixes[i],
                fused: &fused[i],
            })
            .collect();
        let dec = net.decode(&requests)?;
        for (r, &i) in live.iter().enumerate() {
            let row = prefixes[i].len() - 1;
            let probs = net.next_token_probs(&dec, r, row);
            let tok = argmax(&probs);
            scores[i] += probs[tok].ln();
            let capped = prefixes[i].len() >= max_len;
            if tok == EOS as usize || capped {
                results[i] = Some(DecodeResult {
                    generated: prefixes[i][1..].to_vec(),
                    records: net.records(&dec, r),
                    beam_score: scores[i],
                    truncated: tok != EOS as usize,
                });
            } else {
                prefixes[i].push(tok as Token);
            }
        }
    }
    Ok(results
        .into_iter()
        .zip(fused)
        .map(|(r, f)| (r.expect("decoded"), f.boundaries))
        .collect())
}

fn beam_one(model: &Model, ex: &QaExample, beam_size: usize) -> Result<(DecodeResult, Boundaries)> {
    let mut net = model.net();
    let fused = net.encode_example(&ex.question, &ex.passages)?;
    let (generated, score, truncated) = beam_search(
        |prefixes| {
            let requests: Vec<DecodeRequest> = prefixes.iter().map(|p| DecodeRequest { prefix: p, fused: &fused }).collect();
            let dec = net.decode(&requests)?;
            Ok((0..prefixes.len())
                .map(|r| log_softmax(net.next_token_probs(&dec, r, prefixes[r].len() - 1)))
                .collect())
        },
        beam_size,
        model.config.max_decode_len,
    )?;
    let mut replay = vec![BOS];
    replay.extend_from_slice(&generated);
    let (_, records) = net.decode_forward(&replay, &fused)?;
    Ok((
        DecodeResult {
            generated,
            records,
            beam_score: score,
            truncated,
        },
        fused.boundaries,
    ))
}

fn mask_to_context(v: &[f64], b: &Boundaries) -> Vec<f64> {
    let mut out: Vec<f64> = v.iter().enumerate().map(|(i, &p)| if b.is_context(i) { p } else { 0.0 }).collect();
    let total: f64 = out.iter().sum();
    if total > 0.0 {
        out.iter_mut().for_each(|p| *p /= total);
    } else {
        let n = (0..v.len()).filter(|&i| b.is_context(i)).count().max(1) as f64;
        for (i, p) in out.iter_mut().enumerate() {
            if b.is_context(i) {
                *p = 1.0 / n;
            }
        }
    }
    out
}

impl SpanDistribution {
    pub fn new(raw_start: Vec<f64>, raw_end: Vec<f64>, boundaries: Boundaries, mask_non_context: bool) -> Self {
        let (p_start, p_end) = if mask_non_context {
            (mask_to_context(&raw_start, &boundaries), mask_to_context(&raw_end, &boundaries))
        } else {
            (raw_start.clone(), raw_end.clone())
        };
        SpanDistribution {
            p_start,
            p_end,
            raw_start,
            raw_end,
            boundaries,
        }
    }
}

/// Start/end distributions from the steps that emitted the first and last
/// answer tokens. `None` when nothing was generated.
pub fn span_distributions(result: &DecodeResult, boundaries: &Boundaries, mask_non_context: bool) -> Option<SpanDistribution> {
    let t = result.generated.len();
    if t == 0 {
        return None;
    }
    Some(SpanDistribution::new(
        result.records[0].probs_avg.clone(),
        result.records[t - 1].probs_avg.clone(),
        boundaries.clone(),
        mask_non_context,
    ))
}

/// Lowest-index argmax of `v` over `positions`.
fn argmax_over(v: &[f64], positions: impl Iterator<Item = usize>) -> Option<usize> {
    let mut best: Option<usize> = None;
    for i in positions {
        if best.is_none_or(|b| v[i] > v[b]) {
            best = Some(i);
        }
    }
    best
}

/// Two-candidate span extraction. Candidate one fixes the best start and
/// searches ends in `start..start + l_max`; candidate two fixes the best end
/// and searches starts in `end + 1 - l_max..=end`. Windows never cross the
/// passage's context range. Argmaxes consider context positions only.
pub fn extract_span(dist: &SpanDistribution, l_max: usize) -> Result<SpanPrediction> {
    if l_max == 0 {
        return Err(XaqaError::contract("l_max must be >= 1"));
    }
    let b = &dist.boundaries;
    let context = || b.segments.iter().flat_map(|s| s.context.clone());
    let s1 = argmax_over(&dist.p_start, context()).ok_or_else(|| XaqaError::contract("no context positions"))?;
    let seg1 = b.segment_of(s1).expect("context position has a segment");
    let e1 = argmax_over(&dist.p_end, s1..(s1 + l_max).min(seg1.context.end)).expect("window contains start");

    let e2 = argmax_over(&dist.p_end, context()).expect("context exists");
    let seg2 = b.segment_of(e2).expect("context position has a segment");
    let lo = (e2 + 1).saturating_sub(l_max).max(seg2.context.start);
    let s2 = argmax_over(&dist.p_start, lo..e2 + 1).expect("window contains end");

    let score1 = dist.p_start[s1] * dist.p_end[e1];
    let score2 = dist.p_start[s2] * dist.p_end[e2];
    let (s, e, score) = if score1 >= score2 { (s1, e1, score1) } else { (s2, e2, score2) };
    let seg = b.segment_of(s).expect("segment");
    Ok(SpanPrediction {
        passage: seg.passage,
        start: s - seg.context.start,
        end: e - seg.context.start,
        score,
        tokens: (s..=e).map(|i| seg.token_at(i)).collect(),
    })
}

/// True iff `answer` is not a contiguous token run of any passage. Empty
/// answers count as hallucinations.
pub fn is_hallucination(answer: &[Token], passages: &[Vec<Token>]) -> bool {
    answer.is_empty() || find_occurrences(answer, passages).is_empty()
}

/// Final answer under a resolution strategy.
pub fn resolve(passages: &[Vec<Token>], generated: &[Token], extracted: Option<&SpanPrediction>, strategy: ResolutionStrategy) -> Vec<Token> {
    let ext = || extracted.map(|s| s.tokens.clone()).unwrap_or_default();
    match strategy {
        ResolutionStrategy::Generative => generated.to_vec(),
        ResolutionStrategy::Attention => ext(),
        ResolutionStrategy::Drop => {
            if is_hallucination(generated, passages) {
                Vec::new()
            } else {
                generated.to_vec()
            }
        }
        ResolutionStrategy::Backoff => {
            if is_hallucination(generated, passages) {
                ext()
            } else {
                generated.to_vec()
            }
        }
    }
}

/// `(Σ start mass in segment i) · (Σ end mass in segment i)`, using the
/// unmasked distributions so question and separator positions count.
pub fn passage_scores(dist: &SpanDistribution) -> Vec<f64> {
    dist.boundaries
        .segments
        .iter()
        .map(|s| {
            let a: f64 = dist.raw_start[s.span.clone()].iter().sum();
            let b: f64 = dist.raw_end[s.span.clone()].iter().sum();
            a * b
        })
        .collect()
}

/// Everything inference produces for one example; serialized one per line
/// in prediction dumps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub generative: Vec<Token>,
    pub extractive: Option<SpanPrediction>,
    pub hallucination: bool,
    pub truncated: bool,
    pub resolved: Resolved,
    pub passage_scores: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Resolved {
    pub generative: Vec<Token>,
    pub attention: Vec<Token>,
    pub drop: Vec<Token>,
    pub backoff: Vec<Token>,
}

impl Resolved {
    pub fn get(&self, s: ResolutionStrategy) -> &[Token] {
        match s {
            ResolutionStrategy::Generative => &self.generative,
            ResolutionStrategy::Attention => &self.attention,
            ResolutionStrategy::Drop => &self.drop,
            ResolutionStrategy::Backoff => &self.backoff,
        }
    }
}

/// Builds the prediction record from a decode result. When nothing was
/// generated, the EOS step's attention serves as both start and end.
pub fn prediction_from(example: &QaExample, result: &DecodeResult, boundaries: &Boundaries, cfg: &InferenceConfig) -> Result<Prediction> {
    let dist = span_distributions(result, boundaries, cfg.mask_non_context).unwrap_or_else(|| {
        let r = result.records[0].probs_avg.clone();
        SpanDistribution::new(r.clone(), r, boundaries.clone(), cfg.mask_non_context)
    });
    let span = extract_span(&dist, cfg.l_max)?;
    let g = &result.generated;
    let resolved = Resolved {
        generative: resolve(&example.passages, g, Some(&span), ResolutionStrategy::Generative),
        attention: resolve(&example.passages, g, Some(&span), ResolutionStrategy::Attention),
        drop: resolve(&example.passages, g, Some(&span), ResolutionStrategy::Drop),
        backoff: resolve(&example.passages, g, Some(&span), ResolutionStrategy::Backoff),
    };
    Ok(Prediction {
        id: example.id.clone(),
        generative: g.clone(),
        hallucination: is_hallucination(g, &example.passages),
        truncated: result.truncated,
        passage_scores: passage_scores(&dist),
        extractive: Some(span),
        resolved,
    })
}

/// Runs decoding and extraction over a dataset, in order.
pub fn predict(model: &Model, examples: &[QaExample], cfg: &InferenceConfig) -> Result<Vec<Prediction>> {
    let refs: Vec<&QaExample> = examples.iter().collect();
    let decoded = generate_batch(model, &refs, cfg)?;
    examples
        .iter()
        .zip(&decoded)
        .map(|(ex, (res, b))| prediction_from(ex, res, b, cfg))
        .collect()
}

/// Like [`predict`], split across `workers` threads; output order matches
/// input order.
pub fn predict_parallel(model: &Model, examples: &[QaExample], cfg: &InferenceConfig, workers: usize) -> Result<Vec<Prediction>> {
    if workers <= 1 || examples.len() < 2 {
        return predict(model, examples, cfg);
    }
    let chunk = examples.len().div_ceil(workers);
    let parts: Vec<Result<Vec<Prediction>>> = std::thread::scope(|s| {
        let handles: Vec<_> = examples
            .chunks(chunk)
            .map(|c| s.spawn(move || predict(model, c, cfg)))
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(examples.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}
