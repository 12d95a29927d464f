use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use xaqa_core::data::{generate_dataset, read_dataset, write_dataset, GenSpec};
use xaqa_core::eval::{
    answer_section, hallucination_section, rerank_section, run_lambda_ablation, worker_count, EvalReport,
};
use xaqa_core::heatmap::render_heatmap;
use xaqa_core::inference::{generate, predict_parallel, InferenceConfig};
use xaqa_core::model::{load_checkpoint, ModelConfig};
use xaqa_core::training::{train, SpanStrategy, TrainConfig, TrainOptions};
use xaqa_core::XaqaError;

#[derive(Parser, Debug)]
#[command(name = "xaqa", version, about = "Cross-attention span extraction lab")]
struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Print the effective configuration as TOML and exit.
    #[arg(long, global = true)]
    dump_config: bool,
    /// Seed for data generation and model initialization.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset.
    GenData {
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        count: Option<usize>,
        #[command(flatten)]
        gen: GenFlags,
    },
    /// Train a model and write checkpoints plus a metrics log.
    Train {
        #[arg(long)]
        train: Option<PathBuf>,
        #[arg(long)]
        dev: Option<PathBuf>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[command(flatten)]
        model: ModelFlags,
        #[command(flatten)]
        train_flags: TrainFlags,
        #[command(flatten)]
        infer: InferFlags,
    },
    /// Answer metrics and hallucination strategies for a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        report: Option<PathBuf>,
        /// Also write one prediction record per line here.
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[command(flatten)]
        infer: InferFlags,
    },
    /// Passage reranking by cross-attention mass.
    RerankEval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long, default_value_t = 2)]
        k: usize,
        #[command(flatten)]
        infer: InferFlags,
    },
    /// Train one model per (lambda, strategy) cell.
    AblateLambda {
        #[arg(long)]
        train: Option<PathBuf>,
        #[arg(long)]
        dev: Option<PathBuf>,
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "0,0.1,0.3,0.5,0.7,0.9")]
        lambdas: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "multi_label,first_span,most_likely")]
        strategies: Vec<SpanStrategy>,
        #[command(flatten)]
        model: ModelFlags,
        #[command(flatten)]
        train_flags: TrainFlags,
        #[command(flatten)]
        infer: InferFlags,
    },
    /// Attention heatmap of one example.
    Visualize {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Output stem; `.pgm` and `.txt` are appended.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        infer: InferFlags,
    },
}

#[derive(Args, Debug, Default)]
struct GenFlags {
    #[arg(long)]
    vocab_size: Option<usize>,
    #[arg(long)]
    n_passages: Option<usize>,
    #[arg(long)]
    passage_len: Option<usize>,
    #[arg(long)]
    answer_len_min: Option<usize>,
    #[arg(long)]
    answer_len_max: Option<usize>,
    #[arg(long)]
    p_multi_occurrence: Option<f64>,
    #[arg(long)]
    p_unanswerable: Option<f64>,
    #[arg(long)]
    p_distractor_key: Option<f64>,
}

#[derive(Args, Debug, Default)]
struct ModelFlags {
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    n_heads: Option<usize>,
    #[arg(long)]
    n_enc_layers: Option<usize>,
    #[arg(long)]
    n_dec_layers: Option<usize>,
    #[arg(long)]
    d_ff: Option<usize>,
    #[arg(long)]
    max_seq_len: Option<usize>,
    #[arg(long)]
    max_decode_len: Option<usize>,
    #[arg(long = "model-vocab-size")]
    vocab_size: Option<usize>,
}

#[derive(Args, Debug, Default)]
struct TrainFlags {
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    strategy: Option<SpanStrategy>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    warmup_frac: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
}

#[derive(Args, Debug, Default)]
struct InferFlags {
    #[arg(long)]
    beam_size: Option<usize>,
    #[arg(long)]
    l_max: Option<usize>,
    /// Keep question and separator mass in the span distributions.
    #[arg(long)]
    no_mask: bool,
}

/// File paths a run reads or writes.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
struct Paths {
    dataset: Option<PathBuf>,
    dev: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    report: Option<PathBuf>,
    predictions: Option<PathBuf>,
    out_dir: Option<PathBuf>,
    heatmap: Option<PathBuf>,
}

/// Everything a subcommand needs, as read from `--config` and flags.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
struct RunConfig {
    seed: u64,
    count: usize,
    gen: GenSpec,
    model: ModelConfig,
    train: TrainConfig,
    inference: InferenceConfig,
    paths: Paths,
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<XaqaError> for Failure {
    fn from(e: XaqaError) -> Self {
        match e {
            XaqaError::Contract(m) => Failure::Usage(m),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn set_path(slot: &mut Option<PathBuf>, v: Option<PathBuf>) {
    if v.is_some() {
        *slot = v;
    }
}

impl GenFlags {
    fn apply(self, g: &mut GenSpec) {
        set(&mut g.vocab_size, self.vocab_size);
        set(&mut g.n_passages, self.n_passages);
        set(&mut g.passage_len, self.passage_len);
        set(&mut g.answer_len_min, self.answer_len_min);
        set(&mut g.answer_len_max, self.answer_len_max);
        set(&mut g.p_multi_occurrence, self.p_multi_occurrence);
        set(&mut g.p_unanswerable, self.p_unanswerable);
        set(&mut g.p_distractor_key, self.p_distractor_key);
    }
}

impl ModelFlags {
    fn apply(self, m: &mut ModelConfig) {
        set(&mut m.vocab_size, self.vocab_size);
        set(&mut m.d_model, self.d_model);
        set(&mut m.n_heads, self.n_heads);
        set(&mut m.n_enc_layers, self.n_enc_layers);
        set(&mut m.n_dec_layers, self.n_dec_layers);
        set(&mut m.d_ff, self.d_ff);
        set(&mut m.max_seq_len, self.max_seq_len);
        set(&mut m.max_decode_len, self.max_decode_len);
    }
}

impl TrainFlags {
    fn apply(self, t: &mut TrainConfig) {
        set(&mut t.lambda, self.lambda);
        set(&mut t.strategy, self.strategy);
        set(&mut t.lr, self.lr);
        set(&mut t.warmup_frac, self.warmup_frac);
        set(&mut t.epochs, self.epochs);
        set(&mut t.batch_size, self.batch_size);
        set(&mut t.dropout, self.dropout);
        if self.max_steps.is_some() {
            t.max_steps = self.max_steps;
        }
    }
}

impl InferFlags {
    fn apply(self, i: &mut InferenceConfig) {
        set(&mut i.beam_size, self.beam_size);
        set(&mut i.l_max, self.l_max);
        if self.no_mask {
            i.mask_non_context = false;
        }
    }
}

fn load_config(path: Option<&Path>) -> CliResult<RunConfig> {
    let Some(path) = path else {
        return Ok(RunConfig::default());
    };
    let text = std::fs::read_to_string(path).map_err(|e| Failure::Usage(format!("--config {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| Failure::Usage(format!("--config {}: {e}", path.display())))
}

/// Applies flags to the file configuration and returns it with the
/// subcommand-specific extras.
fn resolve(cli: Cli) -> CliResult<(RunConfig, Command, bool)> {
    let mut cfg = load_config(cli.config.as_deref())?;
    set(&mut cfg.seed, cli.seed);
    let mut command = cli.command;
    match &mut command {
        Command::GenData { out, count, gen } => {
            set_path(&mut cfg.paths.dataset, out.take());
            set(&mut cfg.count, count.take());
            std::mem::take(gen).apply(&mut cfg.gen);
        }
        Command::Train {
            train,
            dev,
            out_dir,
            model,
            train_flags,
            infer,
        } => {
            set_path(&mut cfg.paths.dataset, train.take());
            set_path(&mut cfg.paths.dev, dev.take());
            set_path(&mut cfg.paths.out_dir, out_dir.take());
            std::mem::take(model).apply(&mut cfg.model);
            std::mem::take(train_flags).apply(&mut cfg.train);
            std::mem::take(infer).apply(&mut cfg.inference);
        }
        Command::Eval {
            checkpoint,
            data,
            report,
            predictions,
            infer,
        } => {
            set_path(&mut cfg.paths.checkpoint, checkpoint.take());
            set_path(&mut cfg.paths.dataset, data.take());
            set_path(&mut cfg.paths.report, report.take());
            set_path(&mut cfg.paths.predictions, predictions.take());
            std::mem::take(infer).apply(&mut cfg.inference);
        }
        Command::RerankEval {
            checkpoint,
            data,
            report,
            infer,
            ..
        } => {
            set_path(&mut cfg.paths.checkpoint, checkpoint.take());
            set_path(&mut cfg.paths.dataset, data.take());
            set_path(&mut cfg.paths.report, report.take());
            std::mem::take(infer).apply(&mut cfg.inference);
        }
        Command::AblateLambda {
            train,
            dev,
            report,
            model,
            train_flags,
            infer,
            ..
        } => {
            set_path(&mut cfg.paths.dataset, train.take());
            set_path(&mut cfg.paths.dev, dev.take());
            set_path(&mut cfg.paths.report, report.take());
            std::mem::take(model).apply(&mut cfg.model);
            std::mem::take(train_flags).apply(&mut cfg.train);
            std::mem::take(infer).apply(&mut cfg.inference);
        }
        Command::Visualize {
            checkpoint,
            data,
            out,
            infer,
            ..
        } => {
            set_path(&mut cfg.paths.checkpoint, checkpoint.take());
            set_path(&mut cfg.paths.dataset, data.take());
            set_path(&mut cfg.paths.heatmap, out.take());
            std::mem::take(infer).apply(&mut cfg.inference);
        }
    }
    cfg.gen.seed = cfg.seed;
    cfg.train.seed = cfg.seed;
    Ok((cfg, command, cli.dump_config))
}

fn required<'a>(p: &'a Option<PathBuf>, flag: &str) -> CliResult<&'a Path> {
    p.as_deref().ok_or_else(|| Failure::Usage(format!("missing required flag {flag}")))
}

fn existing<'a>(p: &'a Option<PathBuf>, flag: &str) -> CliResult<&'a Path> {
    let path = required(p, flag)?;
    if !path.exists() {
        return Err(Failure::Usage(format!("{flag} {} does not exist", path.display())));
    }
    Ok(path)
}

fn write_report(report: &EvalReport, path: &Path) -> CliResult<()> {
    let io = |p: &Path, e: std::io::Error| Failure::Runtime(format!("{}: {e}", p.display()));
    std::fs::write(path, report.to_text()).map_err(|e| io(path, e))?;
    let jsonl = path.with_extension("jsonl");
    std::fs::write(&jsonl, report.to_jsonl()).map_err(|e| io(&jsonl, e))
}

fn run(cfg: RunConfig, command: Command) -> CliResult<()> {
    match command {
        Command::GenData { .. } => {
            let out = required(&cfg.paths.dataset, "--out")?;
            if cfg.count == 0 {
                return Err(Failure::Usage("--count must be >= 1".into()));
            }
            let data = generate_dataset(&cfg.gen, cfg.count)?;
            write_dataset(&data, out)?;
            println!("wrote {} examples to {}", data.len(), out.display());
        }
        Command::Train { .. } => {
            cfg.train.validate()?;
            cfg.model.validate()?;
            let train_set = read_dataset(existing(&cfg.paths.dataset, "--train")?)?;
            let dev = match &cfg.paths.dev {
                Some(_) => read_dataset(existing(&cfg.paths.dev, "--dev")?)?,
                None => Vec::new(),
            };
            let out_dir = required(&cfg.paths.out_dir, "--out-dir")?.to_path_buf();
            let opts = TrainOptions {
                out_dir: Some(out_dir.clone()),
                inference: cfg.inference,
            };
            let run = train(&train_set, &dev, &cfg.model, &cfg.train, &opts)?;
            for m in &run.log {
                println!(
                    "epoch {} step {} loss_gen {:.4} loss_span {:.4} dev_em_gen {:.4} dev_em_ext {:.4}",
                    m.epoch, m.step, m.loss_gen, m.loss_span, m.dev_em_gen, m.dev_em_ext
                );
            }
            println!("checkpoints in {}", out_dir.display());
        }
        Command::Eval { .. } => {
            let model = load_checkpoint(existing(&cfg.paths.checkpoint, "--checkpoint")?)?;
            let data = read_dataset(existing(&cfg.paths.dataset, "--data")?)?;
            let report_path = required(&cfg.paths.report, "--report")?;
            cfg.inference.validate()?;
            let preds = predict_parallel(&model, &data, &cfg.inference, worker_count())?;
            if let Some(p) = &cfg.paths.predictions {
                let lines: String = preds
                    .iter()
                    .map(|p| serde_json::to_string(p).expect("serialize") + "\n")
                    .collect();
                std::fs::write(p, lines).map_err(|e| Failure::Runtime(format!("{}: {e}", p.display())))?;
            }
            let report = EvalReport {
                answers: Some(answer_section(&data, &preds)),
                hallucination: Some(hallucination_section(&data, &preds)),
                ..EvalReport::default()
            };
            write_report(&report, report_path)?;
            print!("{}", report.to_text());
        }
        Command::RerankEval { k, .. } => {
            let model = load_checkpoint(existing(&cfg.paths.checkpoint, "--checkpoint")?)?;
            let data = read_dataset(existing(&cfg.paths.dataset, "--data")?)?;
            let report_path = required(&cfg.paths.report, "--report")?;
            if k == 0 {
                return Err(Failure::Usage("--k must be >= 1".into()));
            }
            let preds = predict_parallel(&model, &data, &cfg.inference, worker_count())?;
            let scores: Vec<Vec<f64>> = preds.into_iter().map(|p| p.passage_scores).collect();
            let report = EvalReport {
                rerank: Some(rerank_section(&data, &scores, k)),
                ..EvalReport::default()
            };
            write_report(&report, report_path)?;
            print!("{}", report.to_text());
        }
        Command::AblateLambda { lambdas, strategies, .. } => {
            cfg.model.validate()?;
            for &l in &lambdas {
                TrainConfig { lambda: l, ..cfg.train.clone() }.validate()?;
            }
            let train_set = read_dataset(existing(&cfg.paths.dataset, "--train")?)?;
            let dev = read_dataset(existing(&cfg.paths.dev, "--dev")?)?;
            let report_path = required(&cfg.paths.report, "--report")?;
            let opts = TrainOptions {
                out_dir: None,
                inference: cfg.inference,
            };
            let cells = run_lambda_ablation(&train_set, &dev, &cfg.model, &cfg.train, &lambdas, &strategies, &opts)?;
            let report = EvalReport {
                ablation: Some(cells),
                ..EvalReport::default()
            };
            write_report(&report, report_path)?;
            print!("{}", report.to_text());
        }
        Command::Visualize { index, .. } => {
            let model = load_checkpoint(existing(&cfg.paths.checkpoint, "--checkpoint")?)?;
            let data = read_dataset(existing(&cfg.paths.dataset, "--data")?)?;
            let stem = required(&cfg.paths.heatmap, "--out")?;
            let ex = data
                .get(index)
                .ok_or_else(|| Failure::Usage(format!("--index {index} outside dataset of {}", data.len())))?;
            let (result, bounds) = generate(&model, ex, &cfg.inference)?;
            let (pgm, txt) = render_heatmap(&result, &bounds, stem).map_err(|e| Failure::Runtime(e.to_string()))?;
            println!("wrote {} and {}", pgm.display(), txt.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let outcome = resolve(cli).and_then(|(cfg, command, dump)| {
        if dump {
            print!("{}", toml::to_string(&cfg).expect("config serializes"));
            Ok(())
        } else {
            run(cfg, command)
        }
    });
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}
