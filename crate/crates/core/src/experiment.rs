//! Toy-task training runs: train for a number of epochs, decode a held-out
//! set with beam search after each one and track corpus BLEU.

use crate::beam::{beam_search, decide, BeamConfig};
use crate::bleu::corpus_bleu;
use crate::config::NetworkConfig;
use crate::data::{generate_toy_task, ParallelCorpus, ToyKind, EOS, PAD};
use crate::error::Result;
use crate::graph::{CompiledGraph, ModelDims};
use crate::train::{EpochReport, TrainOptions, TrainState, Trainer};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ToySetup {
    pub kind: ToyKind,
    pub vocab: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub train: usize,
    pub cv: usize,
    pub test: usize,
}

pub struct ToyData {
    pub train: ParallelCorpus,
    pub cv: ParallelCorpus,
    pub test: ParallelCorpus,
}

impl ToySetup {
    /// Reversal over 16 symbols, lengths 1 to 12, 10k training pairs.
    pub fn reverse() -> Self {
        ToySetup { kind: ToyKind::Reverse, vocab: 20, min_len: 1, max_len: 12, train: 10_000, cv: 200, test: 1_000 }
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims { src_vocab: self.vocab, trg_vocab: self.vocab }
    }

    /// The three splits come from data seeds 1, 2 and 3, independent of any
    /// training seed.
    pub fn generate(&self) -> Result<ToyData> {
        let gen = |n, seed| generate_toy_task(self.kind, self.vocab, self.min_len, self.max_len, n, seed);
        Ok(ToyData { train: gen(self.train, 1)?, test: gen(self.test, 2)?, cv: gen(self.cv, 3)? })
    }
}

/// Corpus BLEU of beam-search output against the corpus targets.
pub fn decode_bleu(graph: &CompiledGraph, state: &TrainState, corpus: &ParallelCorpus, beam: usize) -> Result<f64> {
    let cfg = BeamConfig::with_beam(beam);
    let mut hyps = Vec::with_capacity(corpus.len());
    for chunk in corpus.pairs.chunks(100) {
        let src: Vec<Vec<u32>> = chunk.iter().map(|p| p.0.clone()).collect();
        let nbest = beam_search(graph, &state.params, &src, EOS, PAD, &cfg)?;
        hyps.extend(decide(&nbest, EOS, None)?.0);
    }
    corpus_bleu(&hyps, &corpus.targets())
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochResult {
    pub report: EpochReport,
    pub bleu: f64,
    /// Trained at the configured depth (always true without pretraining).
    pub full_depth: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunOutcome {
    pub epochs: Vec<EpochResult>,
    /// Parameters and optimizer state after the last epoch.
    pub state: TrainState,
}

impl RunOutcome {
    /// First epoch (1-based) at full depth whose held-out BLEU reached `target`.
    pub fn first_reaching(&self, target: f64) -> Option<usize> {
        self.epochs.iter().find(|e| e.full_depth && e.bleu >= target).map(|e| e.report.epoch)
    }

    pub fn final_bleu(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.bleu)
    }

    pub fn train_seconds(&self) -> f64 {
        self.epochs.iter().map(|e| e.report.seconds).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RunLimits {
    pub max_epochs: usize,
    pub beam: usize,
    /// Stop once held-out BLEU reaches this.
    pub stop_at: Option<f64>,
}

/// Trains for up to `limits.max_epochs`, decoding `data.test` after every
/// epoch. Early stopping only happens at full depth.
pub fn run_toy(
    cfg: NetworkConfig,
    setup: &ToySetup,
    data: &ToyData,
    opts: TrainOptions,
    limits: RunLimits,
    mut on_epoch: impl FnMut(&EpochResult),
) -> Result<RunOutcome> {
    let RunLimits { max_epochs, beam, stop_at } = limits;
    let mut trainer = Trainer::new(cfg, setup.dims(), opts)?;
    let mut state = trainer.init_state()?;
    let mut epochs = Vec::new();
    for _ in 0..max_epochs {
        let report = trainer.run_epoch(&mut state, &data.train, &data.cv)?;
        let graph = trainer.decode_graph(&state)?;
        let bleu = decode_bleu(&graph, &state, &data.test, beam)?;
        let full_depth = report.stage + 1 == trainer.stages();
        let r = EpochResult { report, bleu, full_depth };
        on_epoch(&r);
        epochs.push(r);
        if full_depth && stop_at.is_some_and(|t| bleu >= t) {
            break;
        }
    }
    Ok(RunOutcome { epochs, state })
}

/// Median of the epochs needed to reach `target`; runs that never did count
/// as one past `budget`.
pub fn median_epochs(outcomes: &[RunOutcome], target: f64, budget: usize) -> f64 {
    let mut e: Vec<usize> = outcomes.iter().map(|o| o.first_reaching(target).unwrap_or(budget + 1)).collect();
    e.sort_unstable();
    match e.len() {
        0 => f64::NAN,
        n if n % 2 == 1 => e[n / 2] as f64,
        n => (e[n / 2 - 1] + e[n / 2]) as f64 / 2.0,
    }
}
