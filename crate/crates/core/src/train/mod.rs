//! Epoch loop: Adam with global-norm clipping, learning-rate decay on the
//! held-out loss, layer-wise pretraining and expected-BLEU fine-tuning.

mod adam;
mod checkpoint;
mod pretrain;
mod schedule;

pub use adam::{clip_global_norm, AdamConfig, AdamState};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta, FORMAT_VERSION};
pub use pretrain::{encoder_pairs, grow_params, pretrain_stage_config, PretrainSchedule};
pub use schedule::LrSchedule;

use std::collections::BTreeMap;
use std::time::Instant;

use crate::autodiff::ParamStore;
use crate::beam::{beam_search, strip_eos, BeamConfig};
use crate::bleu::{expected_risk_loss, RiskSentence};
use crate::config::NetworkConfig;
use crate::data::{batch_by_words, budget_len, ParallelCorpus, EOS, PAD};
use crate::error::{Error, Result};
use crate::graph::{compile_with, execute_training_graph, CompileOptions, CompiledGraph, ExecMode, ExecOptions, LossKind, ModelDims, SeqBatch};
use crate::rng::RngKey;
use crate::tensor::{Axis, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Objective {
    CrossEntropy,
    /// Expected BLEU over beam n-best lists of this size.
    Risk { beam: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOptions {
    pub seed: u64,
    pub word_budget: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub lr_threshold: f64,
    pub lr_patience: usize,
    pub min_lr: f64,
    /// Decay the rate on stalled held-out loss; off keeps it fixed.
    pub schedule_lr: bool,
    pub clip_norm: Option<f64>,
    pub dropout: bool,
    pub label_smoothing: Option<f64>,
    /// `(start_depth, epochs_per_stage)`; `None` trains the full model from the start.
    pub pretrain: Option<(usize, usize)>,
    pub scheduled_sampling: Option<f64>,
    pub objective: Objective,
    pub hoist: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            seed: 1,
            word_budget: 2000,
            lr: 1e-3,
            lr_decay: 0.7,
            lr_threshold: 0.001,
            lr_patience: 1,
            min_lr: 1e-5,
            schedule_lr: true,
            clip_norm: Some(5.0),
            dropout: true,
            label_smoothing: None,
            pretrain: None,
            scheduled_sampling: None,
            objective: Objective::CrossEntropy,
            hoist: true,
        }
    }
}

impl TrainOptions {
    pub fn lr_schedule(&self) -> LrSchedule {
        LrSchedule {
            lr: self.lr,
            decay: self.lr_decay,
            threshold: self.lr_threshold,
            patience: self.lr_patience.max(1),
            min_lr: self.min_lr,
            enabled: self.schedule_lr,
            best: None,
            patience_left: self.lr_patience.max(1),
        }
    }

    fn mode(&self) -> ExecMode {
        match self.scheduled_sampling {
            Some(p) if p > 0.0 && self.objective == Objective::CrossEntropy => ExecMode::ScheduledSampling(p),
            _ => ExecMode::Train,
        }
    }
}

/// Everything needed to continue training exactly where it stopped.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: ParamStore<f32>,
    pub adam: AdamState<f32>,
    pub lr: LrSchedule,
    /// Completed epochs.
    pub epoch: usize,
    pub stage: usize,
    pub seed: u64,
    /// Optimizer updates so far; keys the per-batch random streams.
    pub updates: u64,
    pub best_cv: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochReport {
    pub epoch: usize,
    pub stage: usize,
    pub encoder_depth: Option<usize>,
    /// Token-weighted training loss (risk loss for the risk objective).
    pub train_loss: f64,
    /// Per-token cross-entropy on the held-out set, dropout off.
    pub cv_loss: f64,
    pub lr: f64,
    pub next_lr: f64,
    pub updates: usize,
    pub seconds: f64,
}

/// Compiles the network (per pretraining stage) and runs epochs on a [`TrainState`].
pub struct Trainer {
    full: NetworkConfig,
    dims: ModelDims,
    opts: TrainOptions,
    schedule: Option<PretrainSchedule>,
    graphs: BTreeMap<usize, CompiledGraph>,
}

impl Trainer {
    pub fn new(full: NetworkConfig, dims: ModelDims, opts: TrainOptions) -> Result<Self> {
        let schedule = match opts.pretrain {
            Some((start, per_stage)) => {
                let depth = encoder_pairs(&full)?.len();
                Some(PretrainSchedule::new(start, per_stage, depth))
            }
            None => None,
        };
        let mut t = Trainer { full, dims, opts, schedule, graphs: BTreeMap::new() };
        t.graph(t.stages() - 1)?;
        Ok(t)
    }

    pub fn options(&self) -> &TrainOptions {
        &self.opts
    }

    pub fn dims(&self) -> ModelDims {
        self.dims
    }

    pub fn full_config(&self) -> &NetworkConfig {
        &self.full
    }

    pub fn stages(&self) -> usize {
        self.schedule.map_or(1, |s| s.stages())
    }

    pub fn stage_for_epoch(&self, epoch: usize) -> usize {
        self.schedule.map_or(0, |s| s.stage_for_epoch(epoch))
    }

    pub fn stage_depth(&self, stage: usize) -> Option<usize> {
        self.schedule.map(|s| s.depths()[stage])
    }

    pub fn stage_config(&self, stage: usize) -> Result<NetworkConfig> {
        match self.stage_depth(stage) {
            Some(d) => pretrain_stage_config(&self.full, d),
            None => Ok(self.full.clone()),
        }
    }

    /// Training graph of a stage.
    pub fn graph(&mut self, stage: usize) -> Result<&CompiledGraph> {
        if !self.graphs.contains_key(&stage) {
            let cfg = self.stage_config(stage)?;
            let g = compile_with(&cfg, self.opts.mode(), self.dims, CompileOptions { hoist: self.opts.hoist })?;
            self.graphs.insert(stage, g);
        }
        Ok(&self.graphs[&stage])
    }

    pub fn init_state(&mut self) -> Result<TrainState> {
        let seed = self.opts.seed;
        let params = ParamStore::initialize(&self.graph(0)?.param_manifest, init_key(seed));
        Ok(TrainState {
            params,
            adam: AdamState::new(AdamConfig::default()),
            lr: self.opts.lr_schedule(),
            epoch: 0,
            stage: 0,
            seed,
            updates: 0,
            best_cv: None,
        })
    }

    /// Runs the next epoch, growing the encoder first if the pretraining
    /// schedule has moved to a deeper stage.
    pub fn run_epoch(&mut self, state: &mut TrainState, train: &ParallelCorpus, cv: &ParallelCorpus) -> Result<EpochReport> {
        let stage = self.stage_for_epoch(state.epoch).max(state.stage);
        if stage != state.stage {
            let manifest = self.graph(stage)?.param_manifest.clone();
            state.params = grow_params(&state.params, &manifest, init_key(state.seed))?;
            state.stage = stage;
            state.lr.reset_best();
        }
        let opts = self.opts.clone();
        let depth = self.stage_depth(stage);
        let g = self.graph(stage)?;
        let mut report = train_epoch(state, g, train, cv, &opts)?;
        report.encoder_depth = depth;
        Ok(report)
    }

    /// Graph for decoding with the parameters of `state`.
    pub fn decode_graph(&self, state: &TrainState) -> Result<CompiledGraph> {
        let cfg = self.stage_config(state.stage)?;
        compile_with(&cfg, ExecMode::Decode, self.dims, CompileOptions { hoist: self.opts.hoist })
    }
}

pub(crate) fn init_key(seed: u64) -> RngKey {
    RngKey::new(seed, "init")
}

fn apply_gradients(state: &mut TrainState, mut grads: BTreeMap<String, Tensor<f32>>, opts: &TrainOptions) -> Result<()> {
    if let Some(max) = opts.clip_norm {
        clip_global_norm(&mut grads, max);
    }
    state.adam.step(&mut state.params, &grads, state.lr.lr)?;
    state.updates += 1;
    Ok(())
}

/// One cross-entropy update on a batch. Returns the loss and its token count.
pub fn ce_step(state: &mut TrainState, g: &CompiledGraph, batch: &SeqBatch, opts: &TrainOptions) -> Result<(f64, usize)> {
    let eopts = ExecOptions {
        dropout: opts.dropout,
        key: RngKey::new(state.seed, "batch").at(state.updates),
        loss: LossKind::SmoothedCe,
        label_smoothing: opts.label_smoothing,
    };
    let out = execute_training_graph(g, batch, &state.params, &eopts)?;
    let grads = out.tape.backward(out.loss)?.params();
    apply_gradients(state, grads, opts)?;
    Ok((out.loss_value(), out.valid_tokens))
}

/// One expected-BLEU update: beam search (no length normalization) gives an
/// n-best list per sentence, the training graph rescores it and the risk
/// gradient flows back through the sequence log-likelihoods.
pub fn risk_step(
    state: &mut TrainState,
    g: &CompiledGraph,
    decode: &CompiledGraph,
    corpus: &ParallelCorpus,
    indices: &[usize],
    beam: usize,
    opts: &TrainOptions,
) -> Result<f64> {
    let sources: Vec<Vec<u32>> = indices.iter().map(|&i| corpus.pairs[i].0.clone()).collect();
    let cfg = BeamConfig { beam, alpha: 0.0, ..Default::default() };
    let nbest = beam_search(decode, &state.params, &sources, EOS, PAD, &cfg)?;
    let (mut src, mut trg, mut owner) = (Vec::new(), Vec::new(), Vec::new());
    for (k, hyps) in nbest.sentences.iter().enumerate() {
        for h in hyps {
            src.push(sources[k].clone());
            trg.push(h.tokens.clone());
            owner.push(k);
        }
    }
    let batch = SeqBatch::new(&src, &trg, PAD)?;
    let eopts = ExecOptions {
        dropout: opts.dropout,
        key: RngKey::new(state.seed, "batch").at(state.updates),
        loss: LossKind::SeqLogLik,
        label_smoothing: None,
    };
    let out = execute_training_graph(g, &batch, &state.params, &eopts)?;
    let scores: Vec<f64> = out.tape.value(out.loss).data().iter().map(|&x| x as f64).collect();
    let mut sentences: Vec<RiskSentence> = indices
        .iter()
        .map(|&i| RiskSentence { hyps: Vec::new(), scores: Vec::new(), reference: corpus.pairs[i].1.clone() })
        .collect();
    for ((k, t), s) in owner.iter().zip(&trg).zip(&scores) {
        sentences[*k].hyps.push(strip_eos(t, EOS).to_vec());
        sentences[*k].scores.push(*s);
    }
    let (loss, grads) = expected_risk_loss(&sentences)?;
    let mut seed = vec![0f32; trg.len()];
    let mut next = vec![0usize; sentences.len()];
    for (row, k) in owner.iter().enumerate() {
        seed[row] = grads[*k][next[*k]] as f32;
        next[*k] += 1;
    }
    let seed = Tensor::new(&[(Axis::Batch, seed.len())], seed)?;
    let grads = out.tape.backward_with(out.loss, seed)?.params();
    apply_gradients(state, grads, opts)?;
    Ok(loss)
}

/// Sentences in corpus order, packed into word-budget batches without shuffling.
pub fn sequential_batches(corpus: &ParallelCorpus, word_budget: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = Vec::new();
    let mut cur = Vec::new();
    let mut longest = 0;
    for (i, p) in corpus.pairs.iter().enumerate() {
        let l = budget_len(p);
        if !cur.is_empty() && longest.max(l) * (cur.len() + 1) > word_budget {
            out.push(std::mem::take(&mut cur));
            longest = 0;
        }
        longest = longest.max(l);
        cur.push(i);
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Per-token cross-entropy of `corpus` with dropout and smoothing off.
pub fn cv_loss(g: &CompiledGraph, params: &ParamStore<f32>, corpus: &ParallelCorpus, word_budget: usize) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::Data("empty held-out set".into()));
    }
    let mut sum = 0.0;
    let mut tokens = 0;
    for idx in sequential_batches(corpus, word_budget) {
        let batch = corpus.batch(&idx)?;
        let out = execute_training_graph(g, &batch, params, &ExecOptions::eval(LossKind::SmoothedCe))?;
            sum += out.loss_value() * out.valid_tokens as f64;
        tokens += out.valid_tokens;
    }
    Ok(sum / tokens as f64)
}

/// One pass over `train` in a seeded batch order with an update per batch,
/// then the held-out loss and one learning-rate schedule step.
pub fn train_epoch(
    state: &mut TrainState,
    g: &CompiledGraph,
    train: &ParallelCorpus,
    cv: &ParallelCorpus,
    opts: &TrainOptions,
) -> Result<EpochReport> {
    if train.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    let start = Instant::now();
    let plans = batch_by_words(train, opts.word_budget, RngKey::new(state.seed, "shuffle").at(state.epoch as u64))?;
    let lr = state.lr.lr;
    let mut sum = 0.0;
    let mut weight = 0.0;
    let decode = match opts.objective {
        Objective::Risk { .. } => {
            let cfg = g.config().clone();
            Some(compile_with(&cfg, ExecMode::Decode, g.dims(), CompileOptions { hoist: g.hoisted })?)
        }
        Objective::CrossEntropy => None,
    };
    for plan in &plans {
        match opts.objective {
            Objective::CrossEntropy => {
                let batch = train.batch(&plan.indices)?;
                let (loss, n) = ce_step(state, g, &batch, opts)?;
                sum += loss * n as f64;
                weight += n as f64;
            }
            Objective::Risk { beam } => {
                let d = decode.as_ref().expect("compiled above");
                let loss = risk_step(state, g, d, train, &plan.indices, beam, opts)?;
                sum += loss * plan.indices.len() as f64;
                weight += plan.indices.len() as f64;
            }
        }
    }
    let cv_loss = cv_loss(g, &state.params, cv, opts.word_budget)?;
    let next_lr = state.lr.update(cv_loss);
    state.best_cv = Some(state.best_cv.map_or(cv_loss, |b: f64| b.min(cv_loss)));
    state.epoch += 1;
    Ok(EpochReport {
        epoch: state.epoch,
        stage: state.stage,
        encoder_depth: None,
        train_loss: sum / weight,
        cv_loss,
        lr,
        next_lr,
        updates: plans.len(),
        seconds: start.elapsed().as_secs_f64(),
    })
}
