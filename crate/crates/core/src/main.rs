use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use recgraph::beam::{beam_search, decide, BeamConfig};
use recgraph::bench::{bench_config, format_bench, run_bench, BenchOptions};
use recgraph::bleu::corpus_bleu;
use recgraph::config::{parse_network_config, NetworkConfig};
use recgraph::data::{build_vocab_from_files, generate_toy_task, toy_vocab, ParallelCorpus, ToyKind, Vocab, DEFAULT_MAX_LEN, EOS, PAD};
use recgraph::graph::{compile_with, CompileOptions, ExecMode, ModelDims};
use recgraph::presets::AttentionModel;
use recgraph::train::{load_checkpoint, save_checkpoint, Objective, TrainOptions, Trainer};
use recgraph::{Error, Result};

#[derive(Parser)]
#[command(name = "recgraph", version, about = "Train and decode declarative attention encoder-decoder networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a network on a parallel corpus and write a checkpoint.
    Train(TrainArgs),
    /// Beam-decode source sentences with a checkpoint.
    Decode(DecodeArgs),
    /// Corpus BLEU of a hypothesis file against a reference file.
    EvalBleu(EvalArgs),
    /// Time one training epoch and one decode pass with hoisting on and off.
    Bench(BenchArgs),
    /// Print which layers run before, inside and after the decoder loop.
    DumpSchedule(ScheduleArgs),
    /// Write a synthetic copy/reverse/sort corpus.
    GenToy(ToyArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum OnOff {
    On,
    Off,
}

#[derive(Clone, Copy, ValueEnum)]
enum ObjectiveArg {
    Ce,
    Risk,
}

#[derive(Args)]
struct TrainArgs {
    /// Network description (JSON).
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    train_src: PathBuf,
    #[arg(long)]
    train_trg: PathBuf,
    /// Held-out data for the learning-rate schedule; defaults to the last 5% of the training data.
    #[arg(long, requires = "dev_trg")]
    dev_src: Option<PathBuf>,
    #[arg(long, requires = "dev_src")]
    dev_trg: Option<PathBuf>,
    /// Checkpoint directory to write.
    #[arg(long)]
    out: PathBuf,
    /// Continue from this checkpoint instead of initializing.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 2000)]
    word_budget: usize,
    /// Initial learning rate (default 1e-3). With --resume it replaces the
    /// checkpoint's current rate, e.g. a lower rate for risk fine-tuning.
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, default_value_t = 0.7)]
    lr_decay: f64,
    #[arg(long, default_value_t = 0.001)]
    lr_threshold: f64,
    #[arg(long, default_value_t = 1)]
    lr_patience: usize,
    #[arg(long, default_value_t = 1e-5)]
    min_lr: f64,
    /// Keep the learning rate fixed.
    #[arg(long)]
    fixed_lr: bool,
    #[arg(long, value_enum, default_value_t = OnOff::Off)]
    pretrain: OnOff,
    #[arg(long, default_value_t = 2)]
    pretrain_start_depth: usize,
    #[arg(long, default_value_t = 2)]
    pretrain_epochs_per_stage: usize,
    #[arg(long, value_enum, default_value_t = ObjectiveArg::Ce)]
    objective: ObjectiveArg,
    #[arg(long, default_value_t = 4)]
    risk_beam: usize,
    /// Probability of feeding back a sampled token instead of the reference.
    #[arg(long)]
    scheduled_sampling: Option<f64>,
    /// Overrides the label smoothing of the loss layer.
    #[arg(long)]
    label_smoothing: Option<f64>,
    #[arg(long)]
    no_dropout: bool,
    #[arg(long)]
    no_hoist: bool,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Vocabulary size limit including the four reserved ids.
    #[arg(long)]
    vocab_size: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_MAX_LEN)]
    max_len: usize,
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Source sentences, one per line.
    #[arg(long)]
    input: PathBuf,
    /// Defaults to standard output.
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long, default_value_t = 12)]
    beam: usize,
    #[arg(long, default_value_t = 0.6)]
    len_norm_alpha: f64,
    /// Sentences decoded together.
    #[arg(long, default_value_t = 50)]
    batch_seqs: usize,
    #[arg(long)]
    no_hoist: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    hyp: PathBuf,
    #[arg(long = "ref")]
    reference: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    /// Network to time; defaults to the built-in attention model.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 128)]
    hidden: usize,
    #[arg(long, default_value_t = 2000)]
    word_budget: usize,
    #[arg(long, default_value_t = 1000)]
    sentences: usize,
    #[arg(long, default_value_t = 10)]
    min_len: usize,
    #[arg(long, default_value_t = 40)]
    max_len: usize,
    #[arg(long, default_value_t = 100)]
    decode_sentences: usize,
    #[arg(long, default_value_t = 20)]
    vocab: usize,
    /// Only time the unhoisted schedule.
    #[arg(long)]
    no_hoist: bool,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Train,
    ScheduledSampling,
    Decode,
}

#[derive(Args)]
struct ScheduleArgs {
    /// Defaults to the built-in attention model.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = ModeArg::Train)]
    mode: ModeArg,
    #[arg(long)]
    no_hoist: bool,
    #[arg(long, default_value_t = 20)]
    src_vocab: usize,
    #[arg(long, default_value_t = 20)]
    trg_vocab: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Copy,
    Reverse,
    Sort,
}

#[derive(Args)]
struct ToyArgs {
    #[arg(long, value_enum)]
    kind: KindArg,
    #[arg(long, default_value_t = 10_000)]
    n: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 20)]
    vocab: usize,
    #[arg(long, default_value_t = 1)]
    min_len: usize,
    #[arg(long, default_value_t = 12)]
    max_len: usize,
    /// Writes `<prefix>.src` and `<prefix>.trg`.
    #[arg(long, default_value = "toy")]
    out_prefix: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::Decode(a) => decode(a),
        Command::EvalBleu(a) => eval_bleu(a),
        Command::Bench(a) => bench(a),
        Command::DumpSchedule(a) => dump_schedule(a),
        Command::GenToy(a) => gen_toy(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Error::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn read_config(path: &Path) -> Result<NetworkConfig> {
    parse_network_config(&fs::read_to_string(path)?)
}

fn with_suffix(prefix: &Path, ext: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

fn train(a: TrainArgs) -> Result<()> {
    if let Some(p) = a.scheduled_sampling {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Usage(format!("--scheduled-sampling {p} outside [0, 1]")));
        }
    }
    if a.word_budget == 0 || a.risk_beam == 0 {
        return Err(Error::Usage("--word-budget and --risk-beam must be positive".into()));
    }
    let cfg = read_config(&a.config)?;
    let (src_vocab, trg_vocab) = match &a.resume {
        Some(dir) => (Vocab::load(&dir.join("src.vocab"))?, Vocab::load(&dir.join("trg.vocab"))?),
        None => (
            build_vocab_from_files(&[&a.train_src], a.vocab_size)?,
            build_vocab_from_files(&[&a.train_trg], a.vocab_size)?,
        ),
    };
    let mut corpus = ParallelCorpus::from_files(&a.train_src, &a.train_trg, &src_vocab, &trg_vocab, Some(a.max_len))?;
    let dev = match (&a.dev_src, &a.dev_trg) {
        (Some(s), Some(t)) => ParallelCorpus::from_files(s, t, &src_vocab, &trg_vocab, None)?,
        _ => {
            let keep = corpus.len() - (corpus.len() / 20).max(1).min(corpus.len().saturating_sub(1));
            ParallelCorpus { pairs: corpus.pairs.split_off(keep) }
        }
    };
    if corpus.is_empty() || dev.is_empty() {
        return Err(Error::Data("need at least two usable sentence pairs".into()));
    }
    let opts = TrainOptions {
        seed: a.seed,
        word_budget: a.word_budget,
        lr: a.lr.unwrap_or(1e-3),
        lr_decay: a.lr_decay,
        lr_threshold: a.lr_threshold,
        lr_patience: a.lr_patience,
        min_lr: a.min_lr,
        schedule_lr: !a.fixed_lr,
        dropout: !a.no_dropout,
        label_smoothing: a.label_smoothing,
        pretrain: matches!(a.pretrain, OnOff::On).then_some((a.pretrain_start_depth, a.pretrain_epochs_per_stage)),
        scheduled_sampling: a.scheduled_sampling,
        objective: match a.objective {
            ObjectiveArg::Ce => Objective::CrossEntropy,
            ObjectiveArg::Risk => Objective::Risk { beam: a.risk_beam },
        },
        hoist: !a.no_hoist,
        ..Default::default()
    };
    let dims = ModelDims { src_vocab: src_vocab.len(), trg_vocab: trg_vocab.len() };
    let mut trainer = Trainer::new(cfg, dims, opts)?;
    let mut state = match &a.resume {
        Some(dir) => {
            let ck = load_checkpoint(dir)?;
            if ck.dims() != dims {
                return Err(Error::Checkpoint("checkpoint vocabulary sizes differ from the data".into()));
            }
            let mut state = ck.state;
            if let Some(lr) = a.lr {
                state.lr.lr = lr;
                state.lr.reset_best();
            }
            state
        }
        None => trainer.init_state()?,
    };
    let target = state.epoch + a.epochs;
    while state.epoch < target {
        let r = trainer.run_epoch(&mut state, &corpus, &dev)?;
        println!(
            "epoch {} stage {} train {:.5} cv {:.5} lr {:.3e} batches {} {:.1}s",
            r.epoch, r.stage, r.train_loss, r.cv_loss, r.lr, r.updates, r.seconds
        );
        let stage_cfg = trainer.stage_config(state.stage)?;
        let manifest = trainer.graph(state.stage)?.param_manifest.clone();
        save_checkpoint(&a.out, &state, &stage_cfg, &manifest, dims)?;
        src_vocab.save(&a.out.join("src.vocab"))?;
        trg_vocab.save(&a.out.join("trg.vocab"))?;
    }
    Ok(())
}

fn decode(a: DecodeArgs) -> Result<()> {
    if a.beam == 0 || a.batch_seqs == 0 {
        return Err(Error::Usage("--beam and --batch-seqs must be positive".into()));
    }
    let ck = load_checkpoint(&a.checkpoint)?;
    let src_vocab = Vocab::load(&a.checkpoint.join("src.vocab"))?;
    let trg_vocab = Vocab::load(&a.checkpoint.join("trg.vocab"))?;
    let g = compile_with(&ck.config, ExecMode::Decode, ck.dims(), CompileOptions { hoist: !a.no_hoist })?;
    let text = fs::read_to_string(&a.input)?;
    let cfg = BeamConfig { beam: a.beam, alpha: a.len_norm_alpha, ..Default::default() };
    let mut out = String::new();
    let lines: Vec<Vec<u32>> = text.lines().map(|l| src_vocab.encode(l)).collect();
    for chunk in lines.chunks(a.batch_seqs) {
        // Empty inputs get empty outputs; the rest are decoded together.
        let idx: Vec<usize> = (0..chunk.len()).filter(|&i| !chunk[i].is_empty()).collect();
        let mut results = vec![String::new(); chunk.len()];
        if !idx.is_empty() {
            let src: Vec<Vec<u32>> = idx.iter().map(|&i| chunk[i].clone()).collect();
            let nbest = beam_search(&g, &ck.state.params, &src, EOS, PAD, &cfg)?;
            for (i, best) in idx.iter().zip(decide(&nbest, EOS, None)?.0) {
                results[*i] = trg_vocab.decode(&best);
            }
        }
        for r in results {
            out.push_str(&r);
            out.push('\n');
        }
    }
    match &a.output {
        Some(p) => fs::write(p, out)?,
        None => std::io::stdout().write_all(out.as_bytes())?,
    }
    Ok(())
}

fn eval_bleu(a: EvalArgs) -> Result<()> {
    let tok = |p: &Path| -> Result<Vec<Vec<String>>> {
        Ok(fs::read_to_string(p)?.lines().map(|l| l.split_whitespace().map(str::to_string).collect()).collect())
    };
    let bleu = corpus_bleu(&tok(&a.hyp)?, &tok(&a.reference)?)?;
    println!("BLEU = {bleu:.2}");
    Ok(())
}

fn bench(a: BenchArgs) -> Result<()> {
    let cfg = match &a.config {
        Some(p) => read_config(p)?,
        None => bench_config(a.hidden)?,
    };
    let opts = BenchOptions {
        hidden: a.hidden,
        vocab: a.vocab,
        sentences: a.sentences,
        min_len: a.min_len,
        max_len: a.max_len,
        word_budget: a.word_budget,
        decode_sentences: a.decode_sentences,
        seed: a.seed,
        ..Default::default()
    };
    let settings: &[bool] = if a.no_hoist { &[false] } else { &[true, false] };
    print!("{}", format_bench(&run_bench(&cfg, &opts, settings)?));
    Ok(())
}

fn dump_schedule(a: ScheduleArgs) -> Result<()> {
    let cfg = match &a.config {
        Some(p) => read_config(p)?,
        None => AttentionModel::small(64, 2).config()?,
    };
    let mode = match a.mode {
        ModeArg::Train => ExecMode::Train,
        ModeArg::ScheduledSampling => ExecMode::ScheduledSampling(0.5),
        ModeArg::Decode => ExecMode::Decode,
    };
    let dims = ModelDims { src_vocab: a.src_vocab, trg_vocab: a.trg_vocab };
    let g = compile_with(&cfg, mode, dims, CompileOptions { hoist: !a.no_hoist })?;
    print!("{}", g.dump_schedule());
    Ok(())
}

fn gen_toy(a: ToyArgs) -> Result<()> {
    let kind = match a.kind {
        KindArg::Copy => ToyKind::Copy,
        KindArg::Reverse => ToyKind::Reverse,
        KindArg::Sort => ToyKind::Sort,
    };
    let corpus = generate_toy_task(kind, a.vocab, a.min_len, a.max_len, a.n, a.seed).map_err(|e| Error::Usage(e.to_string()))?;
    let vocab = toy_vocab(a.vocab);
    let mut src = String::new();
    let mut trg = String::new();
    for (s, t) in &corpus.pairs {
        src.push_str(&vocab.decode(s));
        src.push('\n');
        trg.push_str(&vocab.decode(t));
        trg.push('\n');
    }
    fs::write(with_suffix(&a.out_prefix, "src"), src)?;
    fs::write(with_suffix(&a.out_prefix, "trg"), trg)?;
    Ok(())
}
