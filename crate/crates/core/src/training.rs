//! Losses, span-target construction, Adam, and the training loop.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, ParamStore, Var};
use crate::data::QaExample;
use crate::error::{Result, XaqaError};
use crate::inference::{predict, InferenceConfig};
use crate::model::{save_checkpoint, Boundaries, DecodeRequest, Model, ModelConfig, Net, Token, BOS, EOS};
use crate::tensor::Tensor;

/// How span targets are derived when the answer occurs more than once.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpanStrategy {
    MultiLabel,
    FirstSpan,
    MostLikely,
}

impl SpanStrategy {
    pub const ALL: [SpanStrategy; 3] = [SpanStrategy::MultiLabel, SpanStrategy::FirstSpan, SpanStrategy::MostLikely];

    pub fn name(self) -> &'static str {
        match self {
            SpanStrategy::MultiLabel => "multi_label",
            SpanStrategy::FirstSpan => "first_span",
            SpanStrategy::MostLikely => "most_likely",
        }
    }
}

impl std::str::FromStr for SpanStrategy {
    type Err = XaqaError;

    fn from_str(s: &str) -> Result<Self> {
        SpanStrategy::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| XaqaError::contract(format!("unknown span strategy {s:?} (multi_label, first_span, most_likely)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lambda: f64,
    pub strategy: SpanStrategy,
    pub lr: f64,
    pub warmup_frac: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Stops early once this many optimizer steps have run.
    pub max_steps: Option<usize>,
    /// Residual and embedding dropout rate during training.
    pub dropout: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 0.5,
            strategy: SpanStrategy::FirstSpan,
            lr: 3e-3,
            warmup_frac: 0.1,
            epochs: 10,
            batch_size: 32,
            seed: 0,
            max_steps: None,
            dropout: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(XaqaError::contract(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return Err(XaqaError::contract(format!("warmup_frac {} outside [0, 1)", self.warmup_frac)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(XaqaError::contract(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(XaqaError::contract("lr must be positive"));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(XaqaError::contract("epochs and batch_size must be >= 1"));
        }
        Ok(())
    }

    /// Optimizer steps a run over `n` training examples will take.
    pub fn total_steps(&self, n: usize) -> usize {
        let full = self.epochs * n.div_ceil(self.batch_size);
        self.max_steps.map_or(full, |m| m.min(full))
    }
}

/// Start and end target distributions over an example's fused positions.
#[derive(Clone, Debug, PartialEq)]
pub struct SpanTargets {
    pub start_target: Vec<f64>,
    pub end_target: Vec<f64>,
}

/// Decoder input and target sequences under teacher forcing:
/// `[BOS, a…]` predicts `[a…, EOS]`.
pub fn teacher_forcing(answer: &[Token]) -> (Vec<Token>, Vec<Token>) {
    let mut input = Vec::with_capacity(answer.len() + 1);
    input.push(BOS);
    input.extend_from_slice(answer);
    let mut target = answer.to_vec();
    target.push(EOS);
    (input, target)
}

/// Fused `(start, end)` positions of every occurrence that survived
/// truncation, in occurrence order.
fn occurrence_positions(example: &QaExample, boundaries: &Boundaries) -> Vec<(usize, usize)> {
    example
        .occurrences
        .iter()
        .filter_map(|o| Some((boundaries.fused_position(o.passage, o.start)?, boundaries.fused_position(o.passage, o.end)?)))
        .collect()
}

/// Span targets for one example. `attention` holds the current model's
/// teacher-forced start and end distributions and is needed only for
/// [`SpanStrategy::MostLikely`]. Returns `None` when the example has no
/// usable occurrence, in which case it contributes no span loss.
pub fn build_span_targets(
    example: &QaExample,
    boundaries: &Boundaries,
    strategy: SpanStrategy,
    attention: Option<(&[f64], &[f64])>,
) -> Result<Option<SpanTargets>> {
    let occ = occurrence_positions(example, boundaries);
    if occ.is_empty() || example.answer.is_empty() {
        return Ok(None);
    }
    let n = boundaries.total_len();
    let one_hot = |(s, e): (usize, usize)| {
        let mut start_target = vec![0.0; n];
        let mut end_target = vec![0.0; n];
        start_target[s] = 1.0;
        end_target[e] = 1.0;
        SpanTargets { start_target, end_target }
    };
    let targets = match strategy {
        SpanStrategy::FirstSpan => one_hot(occ[0]),
        SpanStrategy::MultiLabel => {
            let w = 1.0 / occ.len() as f64;
            let mut start_target = vec![0.0; n];
            let mut end_target = vec![0.0; n];
            for &(s, e) in &occ {
                start_target[s] += w;
                end_target[e] += w;
            }
            SpanTargets { start_target, end_target }
        }
        SpanStrategy::MostLikely => {
            let (ps, pe) = attention.ok_or_else(|| XaqaError::contract("most_likely targets need the model's attention"))?;
            if ps.len() != n || pe.len() != n {
                return Err(XaqaError::contract("attention length does not match the fused encoding"));
            }
            let mut best = occ[0];
            for &(s, e) in &occ[1..] {
                if ps[s] * pe[e] > ps[best.0] * pe[best.1] {
                    best = (s, e);
                }
            }
            one_hot(best)
        }
    };
    Ok(Some(targets))
}

/// Loss nodes of one example inside a batch graph.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub gen: Var,
    pub span: Option<Var>,
    pub joint: Var,
}

/// Graph of a batch objective: the mean joint loss plus per-example terms.
pub struct BatchObjective {
    pub loss: Var,
    pub terms: Vec<LossTerms>,
    /// How many span-target constructions this batch performed.
    pub span_target_builds: usize,
}

/// Builds the joint objective of a batch on `net`'s graph. `targets`
/// overrides span-target construction for the example at the same index.
pub fn batch_objective(
    net: &mut Net<'_>,
    examples: &[&QaExample],
    cfg: &TrainConfig,
    targets: Option<&[Option<SpanTargets>]>,
) -> Result<BatchObjective> {
    if examples.is_empty() {
        return Err(XaqaError::contract("empty batch"));
    }
    let inputs: Vec<(&[Token], &[Vec<Token>])> = examples.iter().map(|e| (e.question.as_slice(), e.passages.as_slice())).collect();
    let fused = net.encode_examples(&inputs)?;
    let seqs: Vec<(Vec<Token>, Vec<Token>)> = examples.iter().map(|e| teacher_forcing(&e.answer)).collect();
    let requests: Vec<DecodeRequest> = seqs
        .iter()
        .zip(&fused)
        .map(|((input, _), f)| DecodeRequest { prefix: input, fused: f })
        .collect();
    let out = net.decode(&requests)?;
    let probs = net.graph.softmax_rows(out.logits)?;
    let vocab = net.config().vocab_size;

    let mut terms = Vec::with_capacity(examples.len());
    let mut builds = 0;
    for (r, ex) in examples.iter().enumerate() {
        let target_toks = &seqs[r].1;
        let len = target_toks.len();
        let rows = net.graph.slice_rows(probs, out.row_starts[r], len)?;
        let mut onehot = Tensor::zeros(&[len, vocab]);
        for (i, &t) in target_toks.iter().enumerate() {
            onehot.data_mut()[i * vocab + t as usize] = 1.0;
        }
        let ce = net.graph.cross_entropy(rows, onehot)?;
        let gen = net.graph.scale(ce, 1.0 / len as f64);

        let span = if cfg.lambda == 0.0 || ex.answer.is_empty() {
            None
        } else {
            let t = ex.answer.len();
            let p_start = net.attention_avg(&out, r, 0)?;
            let p_end = if t == 1 { p_start } else { net.attention_avg(&out, r, t - 1)? };
            let st = match targets {
                Some(given) => given[r].clone(),
                None => {
                    builds += 1;
                    let att = (net.graph.value(p_start).data(), net.graph.value(p_end).data());
                    build_span_targets(ex, &fused[r].boundaries, cfg.strategy, Some(att))?
                }
            };
            match st {
                Some(st) => {
                    let n = st.start_target.len();
                    let a = net.graph.cross_entropy(p_start, Tensor::vector(st.start_target))?;
                    let b = net.graph.cross_entropy(p_end, Tensor::vector(st.end_target))?;
                    debug_assert_eq!(n, fused[r].len());
                    Some(net.graph.add(a, b)?)
                }
                None => None,
            }
        };

        let joint = if cfg.lambda == 0.0 {
            net.graph.scale(gen, 1.0)
        } else {
            let g = net.graph.scale(gen, 1.0 - cfg.lambda);
            match span {
                Some(s) => {
                    let s = net.graph.scale(s, cfg.lambda);
                    net.graph.add(g, s)?
                }
                None => g,
            }
        };
        terms.push(LossTerms { gen, span, joint });
    }
    let mut total = terms[0].joint;
    for t in &terms[1..] {
        total = net.graph.add(total, t.joint)?;
    }
    let loss = net.graph.scale(total, 1.0 / examples.len() as f64);
    Ok(BatchObjective {
        loss,
        terms,
        span_target_builds: builds,
    })
}

/// Scalar loss values of one example.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValues {
    pub gen: f64,
    pub span: Option<f64>,
    pub joint: f64,
}

fn example_losses(model: &Model, example: &QaExample, cfg: &TrainConfig, targets: Option<SpanTargets>) -> Result<LossValues> {
    let mut net = model.net();
    let given = targets.map(|t| vec![Some(t)]);
    let obj = batch_objective(&mut net, &[example], cfg, given.as_deref())?;
    let t = obj.terms[0];
    Ok(LossValues {
        gen: net.graph.value(t.gen).item(),
        span: t.span.map(|s| net.graph.value(s).item()),
        joint: net.graph.value(t.joint).item(),
    })
}

/// Teacher-forced per-token negative log-likelihood of `[answer…, EOS]`.
pub fn generative_loss(model: &Model, example: &QaExample) -> Result<f64> {
    let cfg = TrainConfig {
        lambda: 0.0,
        ..TrainConfig::default()
    };
    Ok(example_losses(model, example, &cfg, None)?.gen)
}

/// Start plus end cross-entropy of the head-averaged last-layer
/// cross-attention against `targets`.
pub fn span_loss(model: &Model, example: &QaExample, targets: &SpanTargets) -> Result<f64> {
    if example.answer.is_empty() {
        return Err(XaqaError::contract("span loss needs a non-empty answer"));
    }
    let cfg = TrainConfig {
        lambda: 1.0,
        ..TrainConfig::default()
    };
    let v = example_losses(model, example, &cfg, Some(targets.clone()))?;
    Ok(v.span.expect("span term present"))
}

/// `(1 − λ)·ℓ_gen + λ·ℓ_span` for one example, with targets built from
/// `cfg.strategy`.
pub fn joint_loss(model: &Model, example: &QaExample, cfg: &TrainConfig) -> Result<f64> {
    Ok(example_losses(model, example, cfg, None)?.joint)
}

/// All three loss values of one example.
pub fn loss_values(model: &Model, example: &QaExample, cfg: &TrainConfig) -> Result<LossValues> {
    example_losses(model, example, cfg, None)
}

/// Adam moments and step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// One bias-corrected Adam update. `grads[i]` belongs to parameter `i`.
pub fn adam_step(params: &mut ParamStore, grads: &[Vec<f64>], state: &mut AdamState, lr_t: f64) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(XaqaError::contract("adam: gradient/state count does not match parameters"));
    }
    state.t += 1;
    let c1 = 1.0 - ADAM_BETA1.powi(state.t as i32);
    let c2 = 1.0 - ADAM_BETA2.powi(state.t as i32);
    for (i, id) in params.ids().collect::<Vec<_>>().into_iter().enumerate() {
        let p = params.get_mut(id).data_mut();
        let (g, m, v) = (&grads[i], &mut state.m[i], &mut state.v[i]);
        if g.len() != p.len() || m.len() != p.len() {
            return Err(XaqaError::contract("adam: gradient length does not match parameter"));
        }
        for j in 0..p.len() {
            m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * g[j];
            v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * g[j] * g[j];
            let mh = m[j] / c1;
            let vh = v[j] / c2;
            p[j] -= lr_t * mh / (vh.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

/// Linear warmup from 0 over `ceil(warmup_frac · total)` steps, then linear
/// decay towards 0 at `total`.
pub fn learning_rate(cfg: &TrainConfig, step: usize, total: usize) -> f64 {
    let warm = (cfg.warmup_frac * total as f64).ceil() as usize;
    if step < warm {
        cfg.lr * step as f64 / warm as f64
    } else {
        cfg.lr * total.saturating_sub(step) as f64 / (total - warm).max(1) as f64
    }
}

/// Dense per-parameter gradients, zero for parameters the loss never touched.
pub fn param_gradients(params: &ParamStore, grads: &Gradients) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = params.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
    for (id, g) in grads.params() {
        for (o, x) in out[id.0].iter_mut().zip(g) {
            *o += x;
        }
    }
    out
}

/// One line of the metrics log, written after each validation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub step: usize,
    pub loss_gen: f64,
    pub loss_span: f64,
    pub loss_joint: f64,
    pub dev_em_gen: f64,
    pub dev_em_ext: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Where checkpoints and `metrics.jsonl` go; nothing is written if unset.
    pub out_dir: Option<PathBuf>,
    pub inference: InferenceConfig,
}

pub struct TrainOutcome {
    /// Parameters after the final step.
    pub model: Model,
    /// Parameters at the best validation point (generative + extractive EM).
    pub best: Model,
    pub log: Vec<MetricsRecord>,
    pub steps: usize,
    pub span_target_builds: usize,
}

/// Generative and extractive exact match on `dev`.
pub fn dev_exact_match(model: &Model, dev: &[QaExample], inference: &InferenceConfig) -> Result<(f64, f64)> {
    if dev.is_empty() {
        return Ok((0.0, 0.0));
    }
    let preds = predict(model, dev, inference)?;
    let mut gen = 0usize;
    let mut ext = 0usize;
    for (p, ex) in preds.iter().zip(dev) {
        gen += usize::from(p.generative == ex.answer);
        ext += usize::from(p.extractive.as_ref().is_some_and(|s| s.tokens == ex.answer));
    }
    let n = dev.len() as f64;
    Ok((gen as f64 / n, ext as f64 / n))
}

fn write_metrics_line(path: &Path, rec: &MetricsRecord) -> Result<()> {
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| XaqaError::io(path, e))?;
    let line = serde_json::to_string(rec).expect("metrics serialize");
    writeln!(f, "{line}").map_err(|e| XaqaError::io(path, e))
}

/// Trains a fresh model initialized from `cfg.seed`, validating on `dev`
/// after each epoch and when the step budget runs out.
pub fn train(train_set: &[QaExample], dev: &[QaExample], model_cfg: &ModelConfig, cfg: &TrainConfig, opts: &TrainOptions) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(XaqaError::contract("training set is empty"));
    }
    let mut model = Model::new(model_cfg.clone(), cfg.seed)?;
    let mut adam = AdamState::new(&model.params);
    let total = cfg.total_steps(train_set.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);

    let metrics_path = match &opts.out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| XaqaError::io(dir, e))?;
            let p = dir.join("metrics.jsonl");
            fs::write(&p, b"").map_err(|e| XaqaError::io(&p, e))?;
            Some(p)
        }
        None => None,
    };

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut step = 0;
    let mut builds = 0;
    let mut log = Vec::new();
    let mut best: Option<(f64, Model)> = None;
    'epochs: for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut sum_gen, mut sum_span, mut sum_joint) = (0.0, 0.0, 0.0);
        let (mut n_gen, mut n_span, mut n_batches) = (0usize, 0usize, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            if step >= total {
                break;
            }
            let batch: Vec<&QaExample> = chunk.iter().map(|&i| &train_set[i]).collect();
            let grads = {
                let mut net = model.net().with_dropout(cfg.dropout, cfg.seed ^ ((step as u64 + 1) << 20));
                let obj = batch_objective(&mut net, &batch, cfg, None).map_err(|e| match e {
                    XaqaError::Numeric(d) => XaqaError::Divergence { step, detail: d },
                    other => other,
                })?;
                let loss = net.graph.value(obj.loss).item();
                if !loss.is_finite() {
                    return Err(XaqaError::Divergence {
                        step,
                        detail: format!("joint loss is {loss}"),
                    });
                }
                builds += obj.span_target_builds;
                for t in &obj.terms {
                    sum_gen += net.graph.value(t.gen).item();
                    n_gen += 1;
                    if let Some(s) = t.span {
                        sum_span += net.graph.value(s).item();
                        n_span += 1;
                    }
                }
                sum_joint += loss;
                n_batches += 1;
                let g = net.graph.backward(obj.loss)?;
                param_gradients(&model.params, &g)
            };
            adam_step(&mut model.params, &grads, &mut adam, learning_rate(cfg, step, total))?;
            step += 1;
        }
        if n_batches == 0 {
            break 'epochs;
        }
        let (em_gen, em_ext) = dev_exact_match(&model, dev, &opts.inference)?;
        let rec = MetricsRecord {
            epoch,
            step,
            loss_gen: sum_gen / n_gen.max(1) as f64,
            loss_span: sum_span / n_span.max(1) as f64,
            loss_joint: sum_joint / n_batches as f64,
            dev_em_gen: em_gen,
            dev_em_ext: em_ext,
        };
        if let Some(p) = &metrics_path {
            write_metrics_line(p, &rec)?;
        }
        log.push(rec);
        let score = em_gen + em_ext;
        if best.as_ref().is_none_or(|(b, _)| score > *b) {
            if let Some(dir) = &opts.out_dir {
                save_checkpoint(&model, &dir.join("best.xaqa"))?;
            }
            best = Some((score, model.clone()));
        }
        if step >= total {
            break;
        }
    }
    if let Some(dir) = &opts.out_dir {
        save_checkpoint(&model, &dir.join("last.xaqa"))?;
    }
    let best = best.map_or_else(|| model.clone(), |(_, m)| m);
    Ok(TrainOutcome {
        model,
        best,
        log,
        steps: step,
        span_target_builds: builds,
    })
}
