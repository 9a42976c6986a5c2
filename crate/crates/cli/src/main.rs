//! Command-line entry point: train / eval / probe / patterns / ablate.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime error.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use agml_core::data::{encode_sequence, Vocab};
use agml_core::model::ModelConfig;
use agml_core::objective::{default_assignment, GuidanceConfig};
use agml_core::patterns::{build_pattern, emit_pattern_csv, PatternKind};
use agml_core::probe::{emit_probe_report, generate_synthetic, parse_probe_tsv, probe_heads};
use agml_core::trainer::{evaluate_mlm, run_ablation, train_fresh, TrainConfig};
use agml_core::{load_checkpoint, Result};

#[derive(Parser)]
#[command(name = "agml", version, about = "Attention-guided MLM training toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on a text corpus
    Train(TrainArgs),
    /// Compute validation MLM loss for a checkpoint
    Eval(EvalArgs),
    /// Probe attention heads for antecedent selection
    Probe(ProbeArgs),
    /// Emit a guidance pattern matrix as CSV
    Patterns(PatternsArgs),
    /// Run the leave-one-out pattern ablation
    Ablate(AblateArgs),
}

#[derive(Args)]
struct ModelFlags {
    /// Transformer layers
    #[arg(long, default_value_t = 2)]
    layers: usize,
    /// Attention heads per layer
    #[arg(long, default_value_t = 4)]
    heads: usize,
    /// Hidden width d_model
    #[arg(long, default_value_t = 128)]
    hidden: usize,
    /// Sequence length n
    #[arg(long, default_value_t = 64)]
    seq_len: usize,
    /// Maximum vocabulary size including reserved ids
    #[arg(long, default_value_t = 8192)]
    vocab_size: usize,
}

#[derive(Args)]
struct TrainFlags {
    #[command(flatten)]
    model: ModelFlags,
    /// Batch size
    #[arg(long, default_value_t = 32)]
    batch: usize,
    /// Total training steps T
    #[arg(long, default_value_t = 20000)]
    steps: u64,
    /// Peak learning rate
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    /// Linear warmup steps
    #[arg(long, default_value_t = 0)]
    warmup: u64,
    /// Fraction of heads guided per layer
    #[arg(long, default_value_t = 0.5)]
    lambda: f64,
    /// Initial guidance weight alpha_0
    #[arg(long, default_value_t = 100.0)]
    alpha0: f64,
    /// Masked fraction k
    #[arg(long, default_value_t = 0.15)]
    mask_prob: f64,
    /// Base RNG seed
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Disable attention guidance entirely
    #[arg(long)]
    no_ag: bool,
    /// 80/10/10 mask/random/keep replacement instead of plain <mask>
    #[arg(long)]
    bert_style_mask: bool,
    /// Global gradient-norm clip (off by default)
    #[arg(long)]
    clip_norm: Option<f64>,
    /// Checkpoint interval in steps (default: steps/10)
    #[arg(long)]
    checkpoint_every: Option<u64>,
}

impl TrainFlags {
    fn to_config(&self) -> TrainConfig {
        let model = ModelConfig {
            layers: self.model.layers,
            heads: self.model.heads,
            d_model: self.model.hidden,
            max_seq_len: self.model.seq_len,
            vocab_size: self.model.vocab_size,
            attn_dropout: 0.0,
        };
        let guidance = GuidanceConfig {
            lambda: self.lambda,
            alpha0: self.alpha0,
            horizon: self.steps,
            assignment: default_assignment(model.heads, self.lambda, &PatternKind::ALL, false),
        };
        TrainConfig {
            model,
            guidance,
            ag_enabled: !self.no_ag,
            lr: self.lr,
            warmup: self.warmup,
            steps: self.steps,
            batch_size: self.batch,
            mask_prob: self.mask_prob,
            bert_style_mask: self.bert_style_mask,
            clip_norm: self.clip_norm,
            seed: self.seed,
            checkpoint_every: self.checkpoint_every.unwrap_or(0),
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Training corpus, one document per line
    #[arg(long)]
    corpus: PathBuf,
    /// Held-out corpus evaluated after training
    #[arg(long)]
    valid_corpus: Option<PathBuf>,
    /// Output directory (metrics.csv, vocab.txt, checkpoint.ckpt)
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    flags: TrainFlags,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint file
    #[arg(long)]
    checkpoint: PathBuf,
    /// Evaluation corpus
    #[arg(long)]
    corpus: PathBuf,
    /// Seed for the deterministic evaluation masking
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ProbeArgs {
    /// Checkpoint file
    #[arg(long)]
    checkpoint: PathBuf,
    /// Probe dataset TSV (sentence, mention, start, end)
    #[arg(long, conflicts_with_all = ["synthetic", "distractor"])]
    dataset: Option<PathBuf>,
    /// Generate N synthetic examples instead of reading a dataset
    #[arg(long, value_name = "N")]
    synthetic: Option<usize>,
    /// Insert distractor sentences into synthetic examples
    #[arg(long, requires = "synthetic")]
    distractor: bool,
    /// Seed for synthetic generation
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Report file (stdout when omitted)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PatternsArgs {
    /// Pattern kind: next, prev, first, period, delim
    #[arg(long)]
    kind: PatternKind,
    /// Sequence length for content-independent patterns
    #[arg(long, conflicts_with = "sentence")]
    len: Option<usize>,
    /// Sentence to tokenize (adds <s>/</s>); needed for period/delim
    #[arg(long)]
    sentence: Option<String>,
    /// Output CSV file (stdout when omitted)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    /// Training corpus, one document per line
    #[arg(long)]
    corpus: PathBuf,
    /// Comma-separated omission groups, each '+'-joined (e.g. next+prev,delim)
    #[arg(long, default_value = "next+prev,first,period,delim")]
    omit: String,
    /// Step at which losses are compared
    #[arg(long, default_value_t = 400)]
    probe_step: u64,
    /// Refill vacated guided-head slots with the next global pattern
    #[arg(long)]
    refill: bool,
    #[command(flatten)]
    flags: TrainFlags,
}

fn read_lines(path: &PathBuf) -> Result<Vec<String>> {
    Ok(fs::read_to_string(path)?.lines().map(String::from).collect())
}

fn run_train(args: TrainArgs) -> Result<()> {
    let config = args.flags.to_config();
    let lines = read_lines(&args.corpus)?;
    let vocab = Vocab::build(BufReader::new(File::open(&args.corpus)?), config.model.vocab_size)?;
    fs::create_dir_all(&args.out)?;
    let mut vocab_file = BufWriter::new(File::create(args.out.join("vocab.txt"))?);
    vocab.save(&mut vocab_file)?;
    vocab_file.flush()?;
    let mut metrics_file = BufWriter::new(File::create(args.out.join("metrics.csv"))?);
    let ckpt_path = args.out.join("checkpoint.ckpt");
    let (params, _, metrics) =
        train_fresh(&config, &vocab, &lines, &mut metrics_file, Some(&ckpt_path))?;
    metrics_file.flush()?;
    println!(
        "trained {} steps; final mlm_loss {:.4}; {:.0} tokens/sec",
        metrics.records.len(),
        metrics.records.last().map(|r| r.mlm_loss).unwrap_or(f64::NAN),
        metrics.tokens_per_sec
    );
    if let Some(valid) = args.valid_corpus {
        let valid_lines = read_lines(&valid)?;
        let loss = evaluate_mlm(
            &config.model,
            &params,
            &vocab,
            &valid_lines,
            config.mask_prob,
            config.seed,
            config.batch_size,
        )?;
        println!("validation mlm_loss {:.4}", loss);
    }
    Ok(())
}

fn run_eval(args: EvalArgs) -> Result<()> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let vocab = Vocab::from_tokens(ckpt.vocab_tokens)?;
    let lines = read_lines(&args.corpus)?;
    let loss = evaluate_mlm(
        &ckpt.config.model,
        &ckpt.params,
        &vocab,
        &lines,
        ckpt.config.mask_prob,
        args.seed,
        ckpt.config.batch_size,
    )?;
    println!("mlm_loss {:.6}", loss);
    Ok(())
}

fn run_probe(args: ProbeArgs) -> Result<()> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let vocab = Vocab::from_tokens(ckpt.vocab_tokens)?;
    let examples = match (&args.dataset, args.synthetic) {
        (Some(path), None) => parse_probe_tsv(BufReader::new(File::open(path)?))?,
        (None, Some(n)) => generate_synthetic(n, args.distractor, args.seed, &vocab)?,
        _ => {
            return Err(agml_core::Error::Config(
                "pass exactly one of --dataset or --synthetic".into(),
            ))
        }
    };
    let report = probe_heads(&ckpt.config.model, &ckpt.params, &vocab, &examples)?;
    if report.skipped > 0 {
        eprintln!("warning: {} examples exceeded the sequence length", report.skipped);
    }
    match args.out {
        Some(path) => {
            let mut sink = BufWriter::new(File::create(path)?);
            emit_probe_report(&report, &mut sink)?;
            sink.flush()?;
        }
        None => emit_probe_report(&report, &mut std::io::stdout().lock())?,
    }
    Ok(())
}

fn run_patterns(args: PatternsArgs) -> Result<()> {
    let pattern = match (&args.sentence, args.len) {
        (Some(sentence), None) => {
            // throwaway vocab over just this sentence
            let vocab = Vocab::build(std::io::Cursor::new(sentence.clone()), usize::MAX / 2)?;
            let n = sentence.split_whitespace().count() + 2;
            let (ids, valid_len) = encode_sequence(sentence, &vocab, n.max(3));
            build_pattern(args.kind, &ids[..valid_len], &vocab.delim_set(), vocab.period_id())
        }
        (None, Some(len)) => {
            if len == 0 {
                return Err(agml_core::Error::Config("--len must be at least 1".into()));
            }
            let tokens: Vec<usize> = (5..5 + len).collect();
            build_pattern(args.kind, &tokens, &std::collections::HashSet::new(), usize::MAX)
        }
        _ => {
            return Err(agml_core::Error::Config(
                "pass exactly one of --len or --sentence".into(),
            ))
        }
    };
    if pattern.fallback {
        eprintln!("warning: no trigger token found; rows fall back to uniform");
    }
    match args.out {
        Some(path) => {
            let mut sink = BufWriter::new(File::create(path)?);
            emit_pattern_csv(&pattern, &mut sink)?;
            sink.flush()?;
        }
        None => emit_pattern_csv(&pattern, &mut std::io::stdout().lock())?,
    }
    Ok(())
}

fn parse_omissions(spec: &str) -> Result<Vec<Vec<PatternKind>>> {
    let mut out = Vec::new();
    for group in spec.split(',') {
        let group = group.trim();
        if group.is_empty() {
            continue;
        }
        let kinds: Vec<PatternKind> =
            group.split('+').map(|k| k.trim().parse()).collect::<Result<_>>()?;
        out.push(kinds);
    }
    Ok(out)
}

fn run_ablate(args: AblateArgs) -> Result<()> {
    let config = args.flags.to_config();
    let lines = read_lines(&args.corpus)?;
    let vocab = Vocab::build(BufReader::new(File::open(&args.corpus)?), config.model.vocab_size)?;
    let omissions = parse_omissions(&args.omit)?;
    let report = run_ablation(&config, &vocab, &lines, &omissions, args.probe_step, args.refill)?;
    print!("{}", report.render());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help/version requests are successes, not usage errors
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Train(args) => run_train(args),
        Command::Eval(args) => run_eval(args),
        Command::Probe(args) => run_probe(args),
        Command::Patterns(args) => run_patterns(args),
        Command::Ablate(args) => run_ablate(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::from(2)
        }
    }
}
