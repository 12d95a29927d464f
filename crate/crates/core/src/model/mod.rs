//! Encoder-decoder transformer with fusion-in-decoder encoding.
//!
//! Each `(question, passage)` pair is encoded on its own as
//! `[question, SEP, passage]`; the per-passage encoder states are stacked
//! into one [`FusedEncoding`] that the decoder cross-attends over with a
//! single softmax. The last decoder layer's cross-attention probabilities
//! are exposed per head and head-averaged as [`AttentionRecord`]s.

mod checkpoint;
mod config;
mod layout;

use std::ops::Range;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{mean_of_rows, AttnBlock, AttnLayout, Graph, ParamStore, Var};
use crate::error::{Result, XaqaError};
use crate::tensor::Tensor;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{ModelConfig, Token, BOS, EOS, FIRST_WORD, PAD, SEP};
use layout::{BoundLayout, LnIds, ParamLayout};
pub use layout::AttnVars;

/// Trainable parameters plus the configuration that shapes them.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    layout: ParamLayout,
}

impl Model {
    /// Fresh model with deterministic initialization from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let layout = ParamLayout::build(&config, &mut params, &mut |shape, kind| init_tensor(&mut rng, shape, kind));
        Ok(Model { config, params, layout })
    }

    /// Rebuilds a model from named parameters (e.g. read from a checkpoint).
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let mut expected = ParamStore::new();
        let layout = ParamLayout::build(&config, &mut expected, &mut |shape, _| Tensor::zeros(shape));
        if expected.len() != params.len() {
            return Err(XaqaError::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                expected.len(),
                params.len()
            )));
        }
        for ((name, want), (got_name, got)) in expected.iter().zip(params.iter()) {
            if name != got_name || want.shape() != got.shape() {
                return Err(XaqaError::Checkpoint(format!(
                    "parameter mismatch: expected {name} {:?}, found {got_name} {:?}",
                    want.shape(),
                    got.shape()
                )));
            }
        }
        Ok(Model { config, params, layout })
    }

    pub fn num_parameters(&self) -> usize {
        self.params.total_len()
    }

    /// Starts a forward pass over this model's parameters.
    pub fn net(&self) -> Net<'_> {
        Net::new(self)
    }

    /// Parameters of cross-attention in the last decoder layer.
    pub fn last_cross_attention_params(&self) -> Vec<crate::autodiff::ParamId> {
        let a = &self.layout.dec_layers.last().expect("at least one decoder layer").cross_attn;
        a.ids().to_vec()
    }
}

#[derive(Clone, Copy)]
enum Init {
    Embedding,
    Linear { fan_in: usize },
    Ones,
    Zeros,
}

fn init_tensor(rng: &mut ChaCha8Rng, shape: &[usize], kind: Init) -> Tensor {
    let n: usize = shape.iter().product();
    let data = match kind {
        Init::Ones => vec![1.0; n],
        Init::Zeros => vec![0.0; n],
        Init::Embedding => {
            let dist = Normal::new(0.0, 1.0 / (shape[1] as f64).sqrt()).expect("valid normal");
            (0..n).map(|_| dist.sample(rng)).collect()
        }
        Init::Linear { fan_in } => {
            let dist = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt()).expect("valid normal");
            (0..n).map(|_| dist.sample(rng)).collect()
        }
    };
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

/// Sinusoidal position table, `rows × d`.
pub fn sinusoidal_positions(rows: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * d];
    for pos in 0..rows {
        for i in 0..d / 2 {
            let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / d as f64);
            out[pos * d + 2 * i] = (pos as f64 * freq).sin();
            out[pos * d + 2 * i + 1] = (pos as f64 * freq).cos();
        }
        if d % 2 == 1 {
            out[pos * d + d - 1] = (pos as f64).sin();
        }
    }
    out
}

/// Where one passage's segment sits inside a fused encoding. All ranges are
/// fused-row indices relative to the start of the example.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegmentBounds {
    pub passage: usize,
    pub span: Range<usize>,
    pub question: Range<usize>,
    pub sep: Option<usize>,
    pub context: Range<usize>,
    /// Passage tokens dropped from the tail to respect `max_seq_len`.
    pub truncated: usize,
    /// Tokens of the whole segment, in encoder order.
    pub tokens: Vec<Token>,
}

impl SegmentBounds {
    /// Context-token bounds for a segment that starts at `start`.
    pub fn new(passage: usize, start: usize, question_len: usize, tokens: Vec<Token>, truncated: usize) -> Self {
        let len = tokens.len();
        let (sep, context_start) = if question_len < len && tokens[question_len] == SEP {
            (Some(start + question_len), start + question_len + 1)
        } else {
            (None, start + question_len)
        };
        SegmentBounds {
            passage,
            span: start..start + len,
            question: start..start + question_len,
            sep,
            context: context_start..start + len,
            truncated,
            tokens,
        }
    }

    pub fn len(&self) -> usize {
        self.span.len()
    }

    pub fn is_empty(&self) -> bool {
        self.span.is_empty()
    }

    pub fn token_at(&self, fused_pos: usize) -> Token {
        self.tokens[fused_pos - self.span.start]
    }
}

/// Passage boundary map of a fused encoding.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct Boundaries {
    pub segments: Vec<SegmentBounds>,
}

impl Boundaries {
    pub fn total_len(&self) -> usize {
        self.segments.last().map_or(0, |s| s.span.end)
    }

    pub fn segment_of(&self, fused_pos: usize) -> Option<&SegmentBounds> {
        self.segments.iter().find(|s| s.span.contains(&fused_pos))
    }

    /// `(passage, offset)` of a context position; `None` for question,
    /// separator, or out-of-range positions.
    pub fn locate(&self, fused_pos: usize) -> Option<(usize, usize)> {
        let seg = self.segment_of(fused_pos)?;
        seg.context
            .contains(&fused_pos)
            .then(|| (seg.passage, fused_pos - seg.context.start))
    }

    pub fn fused_position(&self, passage: usize, offset: usize) -> Option<usize> {
        let seg = self.segments.get(passage)?;
        let pos = seg.context.start + offset;
        seg.context.contains(&pos).then_some(pos)
    }

    pub fn is_context(&self, fused_pos: usize) -> bool {
        self.locate(fused_pos).is_some()
    }
}

/// Concatenated per-passage encoder states.
///
/// `states` may be a larger matrix shared by several examples of a batch;
/// this example owns rows `offset..offset + boundaries.total_len()`.
#[derive(Clone, Debug)]
pub struct FusedEncoding {
    pub states: Var,
    pub offset: usize,
    pub boundaries: Boundaries,
}

impl FusedEncoding {
    pub fn len(&self) -> usize {
        self.boundaries.total_len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Head-averaged last-layer cross-attention at one decode step.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRecord {
    pub step: usize,
    pub probs_per_head: Vec<Vec<f64>>,
    pub probs_avg: Vec<f64>,
}

impl AttentionRecord {
    pub fn from_heads(step: usize, probs_per_head: Vec<Vec<f64>>) -> Self {
        let n = probs_per_head.first().map_or(0, Vec::len);
        let flat: Vec<f64> = probs_per_head.iter().flatten().copied().collect();
        let probs_avg = mean_of_rows(&flat, probs_per_head.len(), n);
        AttentionRecord {
            step,
            probs_per_head,
            probs_avg,
        }
    }
}

/// One decoder input sequence and the fused encoding it attends over.
#[derive(Clone, Debug)]
pub struct DecodeRequest<'a> {
    pub prefix: &'a [Token],
    pub fused: &'a FusedEncoding,
}

/// Output of a batched decoder pass.
#[derive(Clone, Debug)]
pub struct DecodeOutput {
    /// `Σ prefix lengths × vocab`.
    pub logits: Var,
    /// Flat last-layer cross-attention probabilities.
    pub cross_probs: Var,
    pub cross_layout: Rc<AttnLayout>,
    /// First logits row of each request.
    pub row_starts: Vec<usize>,
    pub lens: Vec<usize>,
}

/// Builds the question/separator/passage token sequence for one segment,
/// truncating the passage tail if the segment exceeds `max_len`.
pub fn segment_tokens(question: &[Token], passage: &[Token], max_len: usize) -> Result<(Vec<Token>, usize)> {
    if question.len() + 1 > max_len {
        return Err(XaqaError::contract(format!(
            "question of {} tokens does not fit max_seq_len {max_len}",
            question.len()
        )));
    }
    let room = max_len - question.len() - 1;
    let kept = passage.len().min(room);
    let mut toks = Vec::with_capacity(question.len() + 1 + kept);
    toks.extend_from_slice(question);
    toks.push(SEP);
    toks.extend_from_slice(&passage[..kept]);
    Ok((toks, passage.len() - kept))
}

/// Multi-head attention: queries from `x_q`, keys and values from `x_kv`.
/// Returns the projected output (rows of `x_q`) and the flat probabilities.
pub fn multi_head_attention(
    g: &mut Graph,
    x_q: Var,
    x_kv: Var,
    layer: &AttnVars,
    layout: Rc<AttnLayout>,
) -> Result<(Var, Var)> {
    let q = g.matmul(x_q, layer.w_q)?;
    let k = g.matmul(x_kv, layer.w_k)?;
    let v = g.matmul(x_kv, layer.w_v)?;
    let probs = g.attention_probs(q, k, layout.clone())?;
    let rows = g.value(x_q).rows();
    let mixed = g.attention_mix(probs, v, layout, rows)?;
    let out = g.matmul(mixed, layer.w_o)?;
    Ok((out, probs))
}

/// Per-head probability vectors of `row` in `block`, read from a flat
/// probability tensor.
pub fn heads_at(probs: &[f64], layout: &AttnLayout, block: usize, row: usize) -> Vec<Vec<f64>> {
    let k_len = layout.blocks[block].k_len;
    (0..layout.n_heads)
        .map(|h| {
            let s = layout.index(block, h, row, 0);
            probs[s..s + k_len].to_vec()
        })
        .collect()
}

/// Cross-attention of decoder states `h` over a fused encoding, for a
/// single example. Returns the updated states and one record per row of `h`.
pub fn cross_attention(
    g: &mut Graph,
    h: Var,
    fused: &FusedEncoding,
    layer: &AttnVars,
    n_heads: usize,
) -> Result<(Var, Vec<AttentionRecord>)> {
    let rows = g.value(h).rows();
    let layout = Rc::new(AttnLayout::new(
        n_heads,
        vec![AttnBlock {
            q_start: 0,
            q_len: rows,
            k_start: fused.offset,
            k_len: fused.len(),
            causal: false,
        }],
    ));
    let (out, probs) = multi_head_attention(g, h, fused.states, layer, layout.clone())?;
    let pv = g.value(probs).data();
    let records = (0..rows)
        .map(|i| AttentionRecord::from_heads(i, heads_at(pv, &layout, 0, i)))
        .collect();
    Ok((out, records))
}

/// A forward pass in progress: a graph bound to one model's parameters.
pub struct Net<'p> {
    pub graph: Graph<'p>,
    config: ModelConfig,
    vars: BoundLayout,
    positions: Rc<Vec<f64>>,
    dropout: Option<(f64, ChaCha8Rng)>,
}

impl<'p> Net<'p> {
    pub fn new(model: &'p Model) -> Self {
        let mut graph = Graph::with_params(&model.params);
        let vars = model.layout.bind(&mut graph);
        let rows = model.config.max_seq_len.max(model.config.max_decode_len);
        Net {
            graph,
            config: model.config,
            vars,
            positions: Rc::new(sinusoidal_positions(rows, model.config.d_model)),
            dropout: None,
        }
    }

    /// Enables inverted dropout on embeddings and residual branches, with
    /// masks drawn from `seed`. Attention probabilities are never dropped.
    pub fn with_dropout(mut self, rate: f64, seed: u64) -> Self {
        if rate > 0.0 {
            self.dropout = Some((rate, ChaCha8Rng::seed_from_u64(seed)));
        }
        self
    }

    fn drop(&mut self, x: Var) -> Result<Var> {
        let Some((rate, rng)) = self.dropout.as_mut() else {
            return Ok(x);
        };
        let keep = 1.0 - *rate;
        let shape = self.graph.shape(x).to_vec();
        let n: usize = shape.iter().product();
        let mask: Vec<f64> = (0..n).map(|_| if rng.random_bool(keep) { 1.0 / keep } else { 0.0 }).collect();
        let m = self.graph.constant(Tensor::new(shape, mask)?);
        self.graph.mul(x, m)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn check_tokens(&self, toks: &[Token]) -> Result<()> {
        if let Some(t) = toks.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(XaqaError::contract(format!(
                "token {t} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    /// Embeds stacked sequences, restarting positions at each sequence.
    fn embed(&mut self, table: Var, seqs: &[&[Token]]) -> Result<Var> {
        let d = self.config.d_model;
        let ids: Vec<usize> = seqs.iter().flat_map(|s| s.iter().map(|&t| t as usize)).collect();
        let mut pos = Vec::with_capacity(ids.len() * d);
        for s in seqs {
            pos.extend_from_slice(&self.positions[..s.len() * d]);
        }
        let emb = self.graph.gather(table, &ids)?;
        let emb = self.graph.scale(emb, (d as f64).sqrt());
        let pe = self.graph.constant(Tensor::matrix(ids.len(), d, pos)?);
        let x = self.graph.add(emb, pe)?;
        self.drop(x)
    }

    fn norm(&mut self, x: Var, ln: LnIds<Var>) -> Result<Var> {
        self.graph.layer_norm(x, ln.gamma, ln.beta)
    }

    fn feed_forward(&mut self, x: Var, ffn: &layout::FfnIds<Var>) -> Result<Var> {
        let h = self.graph.matmul(x, ffn.w1)?;
        let h = self.graph.add_row(h, ffn.b1)?;
        let h = self.graph.gelu(h);
        let o = self.graph.matmul(h, ffn.w2)?;
        self.graph.add_row(o, ffn.b2)
    }

    /// Encodes already-built segment token sequences, each independently,
    /// and returns their states stacked in order.
    pub fn encode_sequences(&mut self, seqs: &[&[Token]]) -> Result<Var> {
        for s in seqs {
            self.check_tokens(s)?;
            if s.is_empty() || s.len() > self.config.max_seq_len {
                return Err(XaqaError::contract(format!(
                    "segment length {} outside 1..={}",
                    s.len(),
                    self.config.max_seq_len
                )));
            }
        }
        let mut blocks = Vec::with_capacity(seqs.len());
        let mut start = 0;
        for s in seqs {
            blocks.push(AttnBlock {
                q_start: start,
                q_len: s.len(),
                k_start: start,
                k_len: s.len(),
                causal: false,
            });
            start += s.len();
        }
        let layout = Rc::new(AttnLayout::new(self.config.n_heads, blocks));
        let mut x = self.embed(self.vars.embed, seqs)?;
        for l in 0..self.vars.enc_layers.len() {
            let layer = self.vars.enc_layers[l].clone();
            let h = self.norm(x, layer.ln1)?;
            let (a, _) = multi_head_attention(&mut self.graph, h, h, &layer.attn, layout.clone())?;
            let a = self.drop(a)?;
            x = self.graph.add(x, a)?;
            let h = self.norm(x, layer.ln2)?;
            let f = self.feed_forward(h, &layer.ffn)?;
            let f = self.drop(f)?;
            x = self.graph.add(x, f)?;
        }
        self.norm(x, self.vars.enc_ln)
    }

    /// Encodes `[question, SEP, passage]` on its own.
    pub fn encode_segment(&mut self, question: &[Token], passage: &[Token]) -> Result<(Var, SegmentBounds)> {
        let (toks, truncated) = segment_tokens(question, passage, self.config.max_seq_len)?;
        let states = self.encode_sequences(&[&toks])?;
        Ok((states, SegmentBounds::new(0, 0, question.len(), toks, truncated)))
    }

    /// Row-concatenates independently encoded segments in passage order.
    pub fn fuse(&mut self, segments: Vec<(Var, SegmentBounds)>) -> Result<FusedEncoding> {
        if segments.is_empty() {
            return Err(XaqaError::contract("fuse needs at least one segment"));
        }
        let mut parts = Vec::with_capacity(segments.len());
        let mut bounds = Vec::with_capacity(segments.len());
        let mut start = 0;
        for (i, (states, seg)) in segments.into_iter().enumerate() {
            let q_len = seg.question.len();
            let rebased = SegmentBounds::new(i, start, q_len, seg.tokens, seg.truncated);
            if self.graph.value(states).rows() != rebased.len() {
                return Err(XaqaError::Dimension {
                    op: "fuse",
                    lhs: self.graph.shape(states).to_vec(),
                    rhs: vec![rebased.len()],
                });
            }
            start = rebased.span.end;
            parts.push(states);
            bounds.push(rebased);
        }
        let states = if parts.len() == 1 {
            parts[0]
        } else {
            self.graph.concat_rows(&parts)?
        };
        Ok(FusedEncoding {
            states,
            offset: 0,
            boundaries: Boundaries { segments: bounds },
        })
    }

    /// Encodes several examples in one pass. Each example's passages are
    /// encoded independently and fused; all results share one state matrix.
    pub fn encode_examples(&mut self, examples: &[(&[Token], &[Vec<Token>])]) -> Result<Vec<FusedEncoding>> {
        let mut seqs = Vec::new();
        let mut metas = Vec::with_capacity(examples.len());
        let mut offset = 0;
        for (question, passages) in examples {
            if passages.is_empty() {
                return Err(XaqaError::contract("example has no passages"));
            }
            let mut bounds = Vec::with_capacity(passages.len());
            let mut start = 0;
            for (pi, p) in passages.iter().enumerate() {
                let (toks, truncated) = segment_tokens(question, p, self.config.max_seq_len)?;
                let seg = SegmentBounds::new(pi, start, question.len(), toks.clone(), truncated);
                start = seg.span.end;
                seqs.push(toks);
                bounds.push(seg);
            }
            metas.push((offset, Boundaries { segments: bounds }));
            offset += start;
        }
        let refs: Vec<&[Token]> = seqs.iter().map(Vec::as_slice).collect();
        let states = self.encode_sequences(&refs)?;
        Ok(metas
            .into_iter()
            .map(|(offset, boundaries)| FusedEncoding {
                states,
                offset,
                boundaries,
            })
            .collect())
    }

    pub fn encode_example(&mut self, question: &[Token], passages: &[Vec<Token>]) -> Result<FusedEncoding> {
        Ok(self.encode_examples(&[(question, passages)])?.remove(0))
    }

    /// Runs the decoder over several prefixes at once. All requests must
    /// share the same encoder state matrix.
    pub fn decode(&mut self, requests: &[DecodeRequest<'_>]) -> Result<DecodeOutput> {
        let first = requests
            .first()
            .ok_or_else(|| XaqaError::contract("decode needs at least one request"))?;
        let enc = first.fused.states;
        let mut self_blocks = Vec::with_capacity(requests.len());
        let mut cross_blocks = Vec::with_capacity(requests.len());
        let mut row_starts = Vec::with_capacity(requests.len());
        let mut lens = Vec::with_capacity(requests.len());
        let mut start = 0;
        for r in requests {
            if r.fused.states != enc {
                return Err(XaqaError::contract("decode requests must share encoder states"));
            }
            if r.prefix.first() != Some(&BOS) {
                return Err(XaqaError::contract("decoder prefix must start with BOS"));
            }
            if r.prefix.len() > self.config.max_decode_len {
                return Err(XaqaError::contract(format!(
                    "decoder prefix of {} tokens exceeds max_decode_len {}",
                    r.prefix.len(),
                    self.config.max_decode_len
                )));
            }
            self.check_tokens(r.prefix)?;
            let t = r.prefix.len();
            self_blocks.push(AttnBlock {
                q_start: start,
                q_len: t,
                k_start: start,
                k_len: t,
                causal: true,
            });
            cross_blocks.push(AttnBlock {
                q_start: start,
                q_len: t,
                k_start: r.fused.offset,
                k_len: r.fused.len(),
                causal: false,
            });
            row_starts.push(start);
            lens.push(t);
            start += t;
        }
        let self_layout = Rc::new(AttnLayout::new(self.config.n_heads, self_blocks));
        let cross_layout = Rc::new(AttnLayout::new(self.config.n_heads, cross_blocks));
        let prefixes: Vec<&[Token]> = requests.iter().map(|r| r.prefix).collect();
        let mut x = self.embed(self.vars.embed, &prefixes)?;
        let mut cross_probs = None;
        for l in 0..self.vars.dec_layers.len() {
            let layer = self.vars.dec_layers[l].clone();
            let h = self.norm(x, layer.ln1)?;
            let (a, _) = multi_head_attention(&mut self.graph, h, h, &layer.self_attn, self_layout.clone())?;
            let a = self.drop(a)?;
            x = self.graph.add(x, a)?;
            let h = self.norm(x, layer.ln2)?;
            let (c, probs) = multi_head_attention(&mut self.graph, h, enc, &layer.cross_attn, cross_layout.clone())?;
            cross_probs = Some(probs);
            let c = self.drop(c)?;
            x = self.graph.add(x, c)?;
            let h = self.norm(x, layer.ln3)?;
            let f = self.feed_forward(h, &layer.ffn)?;
            let f = self.drop(f)?;
            x = self.graph.add(x, f)?;
        }
        let x = self.norm(x, self.vars.dec_ln)?;
        let logits = self.graph.matmul_t(x, self.vars.embed)?;
        let logits = self.graph.add_row(logits, self.vars.out_b)?;
        Ok(DecodeOutput {
            logits,
            cross_probs: cross_probs.expect("at least one decoder layer"),
            cross_layout,
            row_starts,
            lens,
        })
    }

    /// Teacher-forced decoder pass for one example: logits for every prefix
    /// position and the last layer's attention record per position.
    pub fn decode_forward(&mut self, prefix: &[Token], fused: &FusedEncoding) -> Result<(Var, Vec<AttentionRecord>)> {
        let out = self.decode(&[DecodeRequest { prefix, fused }])?;
        let records = self.records(&out, 0);
        Ok((out.logits, records))
    }

    /// Attention records of request `r`, one per prefix position.
    pub fn records(&self, out: &DecodeOutput, r: usize) -> Vec<AttentionRecord> {
        let pv = self.graph.value(out.cross_probs).data();
        (0..out.lens[r])
            .map(|i| AttentionRecord::from_heads(i, heads_at(pv, &out.cross_layout, r, i)))
            .collect()
    }

    /// Differentiable head-averaged attention of request `r` at prefix row `row`.
    pub fn attention_avg(&mut self, out: &DecodeOutput, r: usize, row: usize) -> Result<Var> {
        let idx = out.cross_layout.row_indices(r, row);
        let k_len = out.cross_layout.blocks[r].k_len;
        let heads = self.graph.select(out.cross_probs, idx, vec![self.config.n_heads, k_len])?;
        self.graph.mean_rows(heads)
    }

    /// Next-token probabilities of request `r` at prefix row `row`.
    pub fn next_token_probs(&self, out: &DecodeOutput, r: usize, row: usize) -> Vec<f64> {
        let mut logits = self.graph.value(out.logits).row(out.row_starts[r] + row).to_vec();
        crate::autodiff::softmax_in_place(&mut logits);
        logits
    }
}

#[cfg(test)]
mod tests;
