//! Wall-clock comparison of the same model with and without loop-invariant
//! hoisting: one training epoch and one beam decoding pass each.

use std::fmt::Write as _;
use std::time::Instant;

use crate::beam::{beam_search, BeamConfig};
use crate::config::NetworkConfig;
use crate::data::{generate_toy_task, ToyKind, EOS, PAD};
use crate::error::Result;
use crate::graph::{compile_with, CompileOptions, ExecMode, ModelDims};
use crate::presets::AttentionModel;
use crate::train::{train_epoch, TrainOptions, Trainer};

#[derive(Clone, Debug, PartialEq)]
pub struct BenchOptions {
    pub hidden: usize,
    pub vocab: usize,
    pub sentences: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub word_budget: usize,
    pub decode_sentences: usize,
    pub beam: usize,
    pub seed: u64,
}

impl Default for BenchOptions {
    fn default() -> Self {
        BenchOptions { hidden: 128, vocab: 20, sentences: 1000, min_len: 10, max_len: 40, word_budget: 2000, decode_sentences: 100, beam: 12, seed: 1 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub hoist: bool,
    pub train_epoch_secs: f64,
    pub decode_secs: f64,
    pub train_loss: f64,
}

/// The attention model with the key projection inside the decoder, which
/// is the layer hoisting moves out of the step loop.
pub fn bench_config(hidden: usize) -> Result<NetworkConfig> {
    AttentionModel { keys_in_decoder: true, ..AttentionModel::small(hidden, 2) }.config()
}

/// Times one epoch and one decode pass for each requested hoisting setting.
/// Both runs start from identical parameters and see identical batches.
pub fn run_bench(cfg: &NetworkConfig, opts: &BenchOptions, settings: &[bool]) -> Result<Vec<BenchRow>> {
    let corpus = generate_toy_task(ToyKind::Reverse, opts.vocab, opts.min_len, opts.max_len, opts.sentences, opts.seed)?;
    let cv = generate_toy_task(ToyKind::Reverse, opts.vocab, opts.min_len, opts.max_len, 50, opts.seed + 1)?;
    let sources: Vec<Vec<u32>> = corpus.pairs.iter().take(opts.decode_sentences).map(|p| p.0.clone()).collect();
    let dims = ModelDims { src_vocab: opts.vocab, trg_vocab: opts.vocab };
    let mut rows = Vec::new();
    for &hoist in settings {
        let topts = TrainOptions { seed: opts.seed, word_budget: opts.word_budget, dropout: false, hoist, ..Default::default() };
        let mut trainer = Trainer::new(cfg.clone(), dims, topts.clone())?;
        let mut state = trainer.init_state()?;
        let g = trainer.graph(0)?;
        let report = train_epoch(&mut state, g, &corpus, &cv, &topts)?;
        let decode = compile_with(cfg, ExecMode::Decode, dims, CompileOptions { hoist })?;
        let t = Instant::now();
        beam_search(&decode, &state.params, &sources, EOS, PAD, &BeamConfig::with_beam(opts.beam))?;
        rows.push(BenchRow { hoist, train_epoch_secs: report.seconds, decode_secs: t.elapsed().as_secs_f64(), train_loss: report.train_loss });
    }
    Ok(rows)
}

pub fn format_bench(rows: &[BenchRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<10} {:>14} {:>12} {:>12}", "hoisting", "train epoch s", "decode s", "train loss");
    for r in rows {
        let _ = writeln!(
            s,
            "{:<10} {:>14.3} {:>12.3} {:>12.6}",
            if r.hoist { "on" } else { "off" },
            r.train_epoch_secs,
            r.decode_secs,
            r.train_loss
        );
    }
    s
}
