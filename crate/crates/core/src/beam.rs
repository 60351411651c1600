//! Batched beam search. Each source sentence owns `beam` consecutive rows of
//! the decoder state; surviving hypotheses pull their parent's row forward.

use std::cmp::Ordering;
use std::sync::Arc;

use crate::autodiff::ParamStore;
use crate::bleu::corpus_bleu;
use crate::error::{Error, Result};
use crate::graph::{CompiledGraph, Decoder, LoopState, SeqBatch};
use crate::tensor::{Axis, Scalar, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BeamConfig {
    pub beam: usize,
    /// Length normalization exponent: final score is `logP / len^alpha`.
    pub alpha: f64,
    /// Output length limit `ceil(factor * source length) + extra` ...
    pub max_len_factor: f64,
    pub max_len_extra: usize,
    /// ... unless fixed here.
    pub max_len: Option<usize>,
}

impl Default for BeamConfig {
    fn default() -> Self {
        BeamConfig { beam: 12, alpha: 0.6, max_len_factor: 1.5, max_len_extra: 10, max_len: None }
    }
}

impl BeamConfig {
    pub fn with_beam(beam: usize) -> Self {
        BeamConfig { beam, ..Default::default() }
    }

    pub fn max_len_for(&self, src_len: usize) -> usize {
        self.max_len
            .unwrap_or_else(|| (self.max_len_factor * src_len as f64).ceil() as usize + self.max_len_extra)
            .max(1)
    }

    pub fn normalize(&self, log_prob: f64, len: usize) -> f64 {
        if self.alpha == 0.0 {
            log_prob
        } else {
            log_prob / (len.max(1) as f64).powf(self.alpha)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<u32>,
    pub log_prob: f64,
    pub ended: bool,
    /// Decoder state row holding this hypothesis.
    pub slot: usize,
}

/// A finished hypothesis with its length-normalized score.
#[derive(Clone, Debug, PartialEq)]
pub struct Scored {
    /// Ends in EOS unless the length limit cut it off.
    pub tokens: Vec<u32>,
    pub log_prob: f64,
    pub score: f64,
}

/// Per sentence, finished hypotheses by normalized score, best first.
#[derive(Clone, Debug, PartialEq)]
pub struct NBest {
    pub sentences: Vec<Vec<Scored>>,
}

/// Anything that scores the next token for a batch of rows.
pub trait StepModel {
    type State;
    fn vocab(&self) -> usize;
    fn eos(&self) -> u32;
    /// Row-major `[rows, V]` log-probabilities after feeding `feedback`.
    fn step(&mut self, state: &Self::State, feedback: &[u32]) -> Result<(Vec<f64>, Self::State)>;
    fn reorder(&self, state: &Self::State, rows: &[usize]) -> Result<Self::State>;
}

/// Live hypotheses and ended pool of one sentence.
#[derive(Clone, Debug)]
pub struct SentenceBeam {
    pub live: Vec<Hypothesis>,
    pub ended: Vec<Scored>,
    pub max_len: usize,
    pub done: bool,
}

#[derive(Clone, Debug)]
pub struct BeamState<S> {
    pub t: usize,
    pub sentences: Vec<SentenceBeam>,
    pub model_state: S,
}

/// Candidate order: higher score first, then lower parent index, then lower token id.
fn rank(a: &(f64, usize, u32), b: &(f64, usize, u32)) -> Ordering {
    b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2))
}

fn push_ended(pool: &mut Vec<Scored>, h: Scored, cap: usize) {
    pool.push(h);
    // Stable: equal scores keep insertion order.
    pool.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap_or(Ordering::Equal));
    pool.truncate(cap);
}

/// One search step: extends every live hypothesis by every token, keeps the
/// best `beam` non-EOS continuations per sentence, moves EOS candidates that
/// rank above the last kept continuation into the ended pool, and returns
/// the state rows the survivors continue from.
pub fn expand_and_prune<S>(state: &mut BeamState<S>, log_probs: &[f64], vocab: usize, eos: u32, cfg: &BeamConfig) -> Vec<usize> {
    let k = cfg.beam;
    let t = state.t;
    let mut rows: Vec<usize> = (0..state.sentences.len() * k).collect();
    for (si, sb) in state.sentences.iter_mut().enumerate() {
        if sb.done {
            continue;
        }
        let mut cands: Vec<(f64, usize, u32)> = Vec::with_capacity(sb.live.len() * vocab);
        for (pi, h) in sb.live.iter().enumerate() {
            let row = &log_probs[h.slot * vocab..(h.slot + 1) * vocab];
            for (v, &lp) in row.iter().enumerate() {
                cands.push((h.log_prob + lp, pi, v as u32));
            }
        }
        cands.sort_by(rank);
        let last_step = t + 1 >= sb.max_len;
        let mut live = Vec::with_capacity(k);
        for &(score, pi, v) in &cands {
            if live.len() == k {
                break;
            }
            let parent = &sb.live[pi];
            let mut tokens = parent.tokens.clone();
            tokens.push(v);
            if v == eos {
                let len = tokens.len();
                push_ended(&mut sb.ended, Scored { tokens, log_prob: score, score: cfg.normalize(score, len) }, k);
            } else {
                let slot = si * k + live.len();
                rows[slot] = parent.slot;
                live.push(Hypothesis { tokens, log_prob: score, ended: false, slot });
            }
        }
        if last_step {
            for h in live.drain(..) {
                let len = h.tokens.len();
                push_ended(&mut sb.ended, Scored { tokens: h.tokens, log_prob: h.log_prob, score: cfg.normalize(h.log_prob, len) }, k);
            }
        }
        let best_live = live.iter().map(|h| cfg.normalize(h.log_prob, h.tokens.len())).fold(f64::NEG_INFINITY, f64::max);
        let pool_full_and_better = sb.ended.len() == k && sb.ended.last().is_some_and(|w| best_live <= w.score);
        sb.live = live;
        if sb.live.is_empty() || pool_full_and_better {
            sb.done = true;
            sb.live.clear();
        }
    }
    state.t += 1;
    rows
}

/// Runs beam search with `model` for sentences of the given source lengths.
/// The model must hold `src_lens.len() * cfg.beam` rows in `initial`.
pub fn beam_search_with<M: StepModel>(
    model: &mut M,
    initial: M::State,
    initial_token: u32,
    src_lens: &[usize],
    cfg: &BeamConfig,
) -> Result<NBest> {
    if cfg.beam == 0 {
        return Err(Error::Config("beam size must be at least 1".into()));
    }
    if src_lens.is_empty() {
        return Err(Error::Data("beam search over an empty batch".into()));
    }
    let k = cfg.beam;
    let v = model.vocab();
    let eos = model.eos();
    let sentences = src_lens
        .iter()
        .enumerate()
        .map(|(i, &l)| SentenceBeam {
            live: vec![Hypothesis { tokens: Vec::new(), log_prob: 0.0, ended: false, slot: i * k }],
            ended: Vec::new(),
            max_len: cfg.max_len_for(l),
            done: false,
        })
        .collect();
    let mut state = BeamState { t: 0, sentences, model_state: initial };
    let mut feedback = vec![initial_token; src_lens.len() * k];
    while state.sentences.iter().any(|s| !s.done) {
        let (lp, next) = model.step(&state.model_state, &feedback)?;
        if lp.len() != feedback.len() * v {
            return Err(Error::Shape(format!("model returned {} scores for {} rows", lp.len(), feedback.len())));
        }
        let rows = expand_and_prune(&mut state, &lp, v, eos, cfg);
        state.model_state = model.reorder(&next, &rows)?;
        feedback = vec![initial_token; src_lens.len() * k];
        for sb in &state.sentences {
            for h in &sb.live {
                feedback[h.slot] = *h.tokens.last().expect("live hypotheses are non-empty");
            }
        }
    }
    Ok(NBest { sentences: state.sentences.into_iter().map(|s| s.ended).collect() })
}

/// [`StepModel`] over a compiled decode graph.
pub struct GraphStepper<'a, 'g, T: Scalar> {
    pub decoder: &'a Decoder<'g, T>,
    pub eos: u32,
}

impl<T: Scalar> StepModel for GraphStepper<'_, '_, T> {
    type State = LoopState<T>;

    fn vocab(&self) -> usize {
        self.decoder.graph().dims().trg_vocab
    }

    fn eos(&self) -> u32 {
        self.eos
    }

    fn step(&mut self, state: &LoopState<T>, feedback: &[u32]) -> Result<(Vec<f64>, LoopState<T>)> {
        let ids = Tensor::from_vec(Shape::new(&[(Axis::Batch, feedback.len())])?, feedback.to_vec())?;
        let (lp, next) = self.decoder.step(state, &ids)?;
        Ok((lp.data().iter().map(|&x| Scalar::to_f64(x)).collect(), next))
    }

    fn reorder(&self, state: &LoopState<T>, rows: &[usize]) -> Result<LoopState<T>> {
        state.reorder(rows)
    }
}

/// Beam search over a batch of source sentences.
pub fn beam_search<T: Scalar>(
    graph: &CompiledGraph,
    params: &ParamStore<T>,
    sources: &[Vec<u32>],
    eos: u32,
    pad: u32,
    cfg: &BeamConfig,
) -> Result<NBest> {
    if cfg.beam == 0 {
        return Err(Error::Config("beam size must be at least 1".into()));
    }
    if sources.is_empty() || sources.iter().any(Vec::is_empty) {
        return Err(Error::Data("beam search needs non-empty sources".into()));
    }
    let src = SeqBatch::sources_only(sources, pad)?;
    let decoder = Decoder::new(graph, params, Arc::clone(&src), cfg.beam)?;
    let init = decoder.initial_state();
    let start = graph.initial_token();
    let lens: Vec<usize> = sources.iter().map(Vec::len).collect();
    let mut stepper = GraphStepper { decoder: &decoder, eos };
    beam_search_with(&mut stepper, init, start, &lens, cfg)
}

/// Rank-1 hypothesis of every sentence with its trailing EOS removed, plus
/// corpus BLEU against `references` when given.
pub fn decide(nbest: &NBest, eos: u32, references: Option<&[Vec<u32>]>) -> Result<(Vec<Vec<u32>>, Option<f64>)> {
    let best = nbest
        .sentences
        .iter()
        .map(|s| {
            let h = s.first().ok_or_else(|| Error::Data("empty n-best list".into()))?;
            Ok(strip_eos(&h.tokens, eos).to_vec())
        })
        .collect::<Result<Vec<_>>>()?;
    let bleu = references.map(|r| corpus_bleu(&best, r)).transpose()?;
    Ok((best, bleu))
}

pub fn strip_eos(tokens: &[u32], eos: u32) -> &[u32] {
    match tokens.split_last() {
        Some((&last, rest)) if last == eos => rest,
        _ => tokens,
    }
}
