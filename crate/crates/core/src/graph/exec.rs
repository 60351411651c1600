use std::collections::BTreeMap;
use std::sync::Arc;

use super::{CompiledGraph, ExecMode, InitRule, LayerInfo};
use crate::autodiff::{dropout_mask, NodeId, ParamStore, Tape};
use crate::config::{Activation, CombineKind, LayerClass, LayerRef, LayerSpec, RefKind, DATA};
use crate::error::{Error, Result};
use crate::layers::{self, ChoicePolicy, LstmParams};
use crate::rng::RngKey;
use crate::tensor::{Axis, Ids, Scalar, Shape, Tensor};

/// Padded source and target id matrices of one batch.
#[derive(Clone, Debug)]
pub struct SeqBatch {
    /// `[Batch, Time]` with sequence lengths.
    pub src: Arc<Ids>,
    /// `[Batch, Step]`, each row ending in its end-of-sentence token.
    pub trg: Arc<Ids>,
    pub trg_lens: Arc<Vec<usize>>,
}

impl SeqBatch {
    /// Pads with `pad`. Every sequence must be non-empty.
    pub fn new(src: &[Vec<u32>], trg: &[Vec<u32>], pad: u32) -> Result<Self> {
        if src.is_empty() || src.len() != trg.len() {
            return Err(Error::Data(format!("{} sources for {} targets", src.len(), trg.len())));
        }
        let src_ids = pad_matrix(src, pad, Axis::Time)?;
        let src_ids = src_ids.with_seq_lens(src.iter().map(Vec::len).collect())?;
        let trg_ids = pad_matrix(trg, pad, Axis::Step)?;
        Ok(SeqBatch {
            src: Arc::new(src_ids),
            trg: Arc::new(trg_ids),
            trg_lens: Arc::new(trg.iter().map(Vec::len).collect()),
        })
    }

    pub fn sources_only(src: &[Vec<u32>], pad: u32) -> Result<Arc<Ids>> {
        if src.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        Ok(Arc::new(pad_matrix(src, pad, Axis::Time)?.with_seq_lens(src.iter().map(Vec::len).collect())?))
    }

    pub fn len(&self) -> usize {
        self.trg_lens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trg_lens.is_empty()
    }

    pub fn target_tokens(&self) -> usize {
        self.trg_lens.iter().sum()
    }
}

fn pad_matrix(rows: &[Vec<u32>], pad: u32, axis: Axis) -> Result<Ids> {
    let t = rows.iter().map(Vec::len).max().unwrap_or(0);
    if rows.iter().any(Vec::is_empty) {
        return Err(Error::Data("empty sequence in batch".into()));
    }
    let mut data = Vec::with_capacity(rows.len() * t);
    for r in rows {
        data.extend_from_slice(r);
        data.extend(std::iter::repeat_n(pad, t - r.len()));
    }
    Tensor::new(&[(Axis::Batch, rows.len()), (axis, t)], data)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LossKind {
    /// Mean label-smoothed cross entropy over valid target tokens.
    SmoothedCe,
    /// Per-sequence log-likelihood `[Batch]` of the targets.
    SeqLogLik,
}

#[derive(Clone, Copy, Debug)]
pub struct ExecOptions {
    /// Activates dropout.
    pub dropout: bool,
    /// Stream for dropout masks and sampled feedback of this batch.
    pub key: RngKey,
    pub loss: LossKind,
    /// Overrides the smoothing configured on the loss layer.
    pub label_smoothing: Option<f64>,
}

impl ExecOptions {
    pub fn eval(loss: LossKind) -> Self {
        ExecOptions { dropout: false, key: RngKey::new(0, "eval"), loss, label_smoothing: Some(0.0) }
    }
}

pub struct ExecOutput<T> {
    pub tape: Tape<T>,
    pub loss: NodeId,
    /// `[Batch, Step, V]` log-probabilities of the output softmax.
    pub log_probs: NodeId,
    pub valid_tokens: usize,
    /// Every evaluated layer in execution order with its decoder step, if any.
    pub layers: Vec<(String, Option<usize>, NodeId)>,
}

impl<T: Scalar> ExecOutput<T> {
    pub fn loss_value(&self) -> f64 {
        self.tape.value(self.loss).item().to_f64()
    }

    /// First evaluated layer holding a non-finite value.
    pub fn first_non_finite(&self) -> Option<(String, Option<usize>)> {
        self.layers
            .iter()
            .find(|(_, _, id)| !self.tape.value(*id).all_finite())
            .map(|(n, s, _)| (n.clone(), *s))
    }
}

/// Runs the compiled schedule over one batch with ground-truth targets and
/// attaches the loss.
pub fn execute_training_graph<T: Scalar>(
    g: &CompiledGraph,
    batch: &SeqBatch,
    params: &ParamStore<T>,
    opts: &ExecOptions,
) -> Result<ExecOutput<T>> {
    if !g.mode.is_training() {
        return Err(Error::Config("execute_training_graph needs a graph compiled for training".into()));
    }
    let mut ex = Executor::new(g, params, Tape::new(), opts.dropout, opts.key, batch.src.clone());
    ex.run_top()?;
    let rec = g.rec_name().ok_or_else(|| Error::Config("network has no recurrent subnetwork".into()))?;
    let loss_layer = g.loss_layer.clone().expect("checked at compile time");
    let steps = batch.trg.shape().extent(Axis::Step).expect("[B, S] targets");
    ex.targets = Some(batch.trg.clone());
    ex.run_hoisted(steps)?;
    let mut per_step = Vec::new();
    for t in 0..steps {
        ex.run_loop_layers(t, None)?;
        if g.sub_loop.contains(&loss_layer) {
            per_step.push(ex.cur[&loss_layer].node().expect("softmax output is dense"));
        }
        ex.finish_step();
    }
    let log_probs = if per_step.is_empty() {
        let lp = ex.pre_var.get(&loss_layer).and_then(Val::node).ok_or_else(|| {
            Error::Config(format!("loss layer `{loss_layer}` does not vary over decoder steps"))
        })?;
        let lp_shape = ex.tape.value(lp).shape().clone();
        if lp_shape.rank() != 3 {
            return Err(Error::Shape(format!("loss layer `{rec}/{loss_layer}` has shape {lp_shape}")));
        }
        lp
    } else {
        ex.tape.stack(&per_step, Axis::Step)?
    };
    let (loss, valid_tokens) = match opts.loss {
        LossKind::SmoothedCe => {
            let eps = opts.label_smoothing.unwrap_or_else(|| g.label_smoothing());
            let l = layers::ce_label_smoothing(&mut ex.tape, log_probs, batch.trg.clone(), batch.trg_lens.clone(), eps)?;
            (l, batch.target_tokens())
        }
        LossKind::SeqLogLik => {
            (ex.tape.seq_log_lik(log_probs, batch.trg.clone(), batch.trg_lens.clone())?, batch.target_tokens())
        }
    };
    let out = ExecOutput { tape: ex.tape, loss, log_probs, valid_tokens, layers: ex.trace };
    if !out.tape.value(out.loss).all_finite() {
        let (layer, step) = out.first_non_finite().unwrap_or_else(|| (super::loss_node_name(&g.qualify_sub(&loss_layer)), None));
        return Err(Error::NonFinite { step: step.unwrap_or(0), layer });
    }
    Ok(out)
}

/// A layer value on the current tape.
#[derive(Clone, Debug)]
pub(crate) enum Val {
    Dense(NodeId),
    /// Log-probabilities; consumers other than choice and loss see `exp`.
    LogProbs(NodeId),
    Ids(Arc<Ids>),
}

impl Val {
    pub(crate) fn node(&self) -> Option<NodeId> {
        match self {
            Val::Dense(n) | Val::LogProbs(n) => Some(*n),
            Val::Ids(_) => None,
        }
    }
}

/// A layer value detached from any tape.
#[derive(Clone, Debug)]
pub(crate) enum Stored<T> {
    Dense(Arc<Tensor<T>>),
    LogProbs(Arc<Tensor<T>>),
    Ids(Arc<Ids>),
}

impl<T: Scalar> Stored<T> {
    pub(crate) fn gather_batch(&self, rows: &[usize]) -> Result<Self> {
        Ok(match self {
            Stored::Dense(t) => Stored::Dense(Arc::new(t.gather_batch(rows)?)),
            Stored::LogProbs(t) => Stored::LogProbs(Arc::new(t.gather_batch(rows)?)),
            Stored::Ids(t) => Stored::Ids(Arc::new(t.gather_batch(rows)?)),
        })
    }
}

/// Which dropout streams a layer evaluation uses.
#[derive(Clone, Copy, Debug)]
enum StepKey {
    /// Once per batch.
    Invariant,
    /// Decoder step `t`.
    Step(usize),
    /// All `n` decoder steps at once, along the `Step` axis.
    Stacked(usize),
}

const INVARIANT_COUNTER: u64 = u64::MAX;

pub(crate) struct Executor<'g, T: Scalar> {
    pub(crate) g: &'g CompiledGraph,
    params: &'g ParamStore<T>,
    pub(crate) tape: Tape<T>,
    dropout: bool,
    key: RngKey,
    rows: usize,
    src_time: usize,
    src_lens: Arc<Vec<usize>>,
    pub(crate) targets: Option<Arc<Ids>>,
    pub(crate) top: BTreeMap<String, Val>,
    pub(crate) pre_inv: BTreeMap<String, Val>,
    pub(crate) pre_var: BTreeMap<String, Val>,
    var_cache: BTreeMap<(String, usize), Val>,
    /// Loop-body values of the step being evaluated.
    pub(crate) cur: BTreeMap<String, Val>,
    /// Loop-body values of the previous step.
    pub(crate) last: BTreeMap<String, Val>,
    /// Cell state of each `rnn_cell` after its latest evaluation.
    pub(crate) cells: BTreeMap<String, NodeId>,
    trace: Vec<(String, Option<usize>, NodeId)>,
}

impl<'g, T: Scalar> Executor<'g, T> {
    pub(crate) fn new(
        g: &'g CompiledGraph,
        params: &'g ParamStore<T>,
        tape: Tape<T>,
        dropout: bool,
        key: RngKey,
        src: Arc<Ids>,
    ) -> Self {
        let rows = src.shape().extent(Axis::Batch).unwrap_or(1);
        let src_time = src.shape().extent(Axis::Time).unwrap_or(1);
        let src_lens = src.seq_lens_arc().unwrap_or_else(|| Arc::new(vec![src_time; rows]));
        let mut top = BTreeMap::new();
        top.insert(DATA.to_string(), Val::Ids(src));
        Executor {
            g,
            params,
            tape,
            dropout,
            key,
            rows,
            src_time,
            src_lens,
            targets: None,
            top,
            pre_inv: BTreeMap::new(),
            pre_var: BTreeMap::new(),
            var_cache: BTreeMap::new(),
            cur: BTreeMap::new(),
            last: BTreeMap::new(),
            cells: BTreeMap::new(),
            trace: Vec::new(),
        }
    }

    pub(crate) fn rows(&self) -> usize {
        self.rows
    }

    pub(crate) fn import(&mut self, s: &Stored<T>) -> Val {
        match s {
            Stored::Dense(t) => Val::Dense(self.tape.constant(t.clone())),
            Stored::LogProbs(t) => Val::LogProbs(self.tape.constant(t.clone())),
            Stored::Ids(t) => Val::Ids(t.clone()),
        }
    }

    pub(crate) fn export(&self, v: &Val) -> Stored<T> {
        match v {
            Val::Dense(n) => Stored::Dense(self.tape.shared_value(*n)),
            Val::LogProbs(n) => Stored::LogProbs(self.tape.shared_value(*n)),
            Val::Ids(t) => Stored::Ids(t.clone()),
        }
    }

    /// Top-level layers that do not read the recurrent layer.
    pub(crate) fn run_top(&mut self) -> Result<()> {
        for n in &self.g.top_pre {
            let l = &self.g.cfg.layers[n];
            let ins: Vec<Val> = l.from.iter().map(|r| self.top[&r.name].clone()).collect();
            let v = self.eval_layer(n, l, &ins, None, StepKey::Invariant)?;
            if let Some(id) = v.node() {
                self.trace.push((n.clone(), None, id));
            }
            self.top.insert(n.clone(), v);
        }
        Ok(())
    }

    /// Hoisted subnetwork layers; step-varying ones cover `steps` decoder steps.
    pub(crate) fn run_hoisted(&mut self, steps: usize) -> Result<()> {
        let g = self.g;
        for n in &g.sub_pre {
            let l = &g.cfg.subnetwork().expect("has subnetwork")[n];
            let varying = g.step_varying.contains(n);
            let v = if l.class == LayerClass::Choice {
                let t = self.targets.clone().ok_or_else(|| Error::Config("hoisted choice needs targets".into()))?;
                Val::Ids(t)
            } else {
                let ins: Vec<Val> = l.from.iter().map(|r| self.resolve_hoisted(r)).collect::<Result<_>>()?;
                let extra = self.attention_inputs(l, |ex, r| ex.resolve_hoisted(r))?;
                let key = if varying { StepKey::Stacked(steps) } else { StepKey::Invariant };
                self.eval_layer(&g.qualify_sub(n), l, &ins, extra, key)?
            };
            if let Some(id) = v.node() {
                self.trace.push((g.qualify_sub(n), None, id));
            }
            if varying {
                self.pre_var.insert(n.clone(), v);
            } else {
                self.pre_inv.insert(n.clone(), v);
            }
        }
        Ok(())
    }

    fn resolve_hoisted(&self, r: &LayerRef) -> Result<Val> {
        let v = match r.kind {
            RefKind::Base => self.top.get(&r.name),
            RefKind::Plain => self.pre_inv.get(&r.name).or_else(|| self.pre_var.get(&r.name)),
            RefKind::Prev => None,
        };
        v.cloned().ok_or_else(|| Error::Config(format!("hoisted layer reads unavailable `{r}`")))
    }

    fn attention_inputs(
        &mut self,
        l: &LayerSpec,
        mut resolve: impl FnMut(&mut Self, &LayerRef) -> Result<Val>,
    ) -> Result<Option<(Val, Val)>> {
        match (&l.weights, &l.base) {
            (Some(w), Some(b)) => Ok(Some((resolve(self, w)?, resolve(self, b)?))),
            _ => Ok(None),
        }
    }

    /// Evaluates the loop-body layers of step `t`, optionally restricted to a
    /// subset. The choice value must already be in `cur` when it is not
    /// produced here.
    pub(crate) fn run_loop_layers(&mut self, t: usize, only: Option<&dyn Fn(&str) -> bool>) -> Result<()> {
        let g = self.g;
        let sub = g.cfg.subnetwork().expect("has subnetwork");
        for n in &g.sub_loop {
            if only.is_some_and(|f| !f(n)) || self.cur.contains_key(n) {
                continue;
            }
            let l = &sub[n];
            let v = match l.class {
                LayerClass::Choice => self.choose(t, l)?,
                LayerClass::RnnCell => self.rnn_cell(t, l)?,
                _ => {
                    let ins: Vec<Val> = l.from.iter().map(|r| self.resolve_step(r, t)).collect::<Result<_>>()?;
                    let extra = self.attention_inputs(l, |ex, r| ex.resolve_step(r, t))?;
                    self.eval_layer(&g.qualify_sub(n), l, &ins, extra, StepKey::Step(t))?
                }
            };
            if let Some(id) = v.node() {
                self.trace.push((g.qualify_sub(n), Some(t), id));
            }
            self.cur.insert(n.clone(), v);
        }
        Ok(())
    }

    pub(crate) fn finish_step(&mut self) {
        self.last = std::mem::take(&mut self.cur);
    }

    fn choose(&mut self, t: usize, l: &LayerSpec) -> Result<Val> {
        let truth = self
            .targets
            .as_ref()
            .map(|tr| tr.select(Axis::Step, t))
            .transpose()?
            .ok_or_else(|| Error::Config(format!("choice `{}` has no feedback at step {t}", l.name)))?;
        let policy = match self.g.mode {
            ExecMode::ScheduledSampling(p) => ChoicePolicy::Sample(p),
            _ => ChoicePolicy::Teacher,
        };
        if policy == ChoicePolicy::Teacher {
            return Ok(Val::Ids(Arc::new(truth)));
        }
        let src = self.resolve_step(&l.from[0], t)?;
        let lp = src.node().ok_or_else(|| Error::Config("choice input is not a softmax".into()))?;
        let key = self.key.child("choice").at(t as u64);
        let ids = layers::choice_select(policy, self.tape.value(lp), Some(&truth), key)?;
        Ok(Val::Ids(Arc::new(ids)))
    }

    fn rnn_cell(&mut self, t: usize, l: &LayerSpec) -> Result<Val> {
        let q = self.g.qualify_sub(&l.name);
        let ins: Vec<Val> = l.from.iter().map(|r| self.resolve_step(r, t)).collect::<Result<_>>()?;
        let ins = self.dense_inputs(&q, l, &ins, StepKey::Step(t))?;
        let x = self.tape.concat(&ins)?;
        let h_prev = self.resolve_step(&LayerRef { kind: RefKind::Prev, name: l.name.clone() }, t)?;
        let h_prev = h_prev.node().expect("rnn_cell output is dense");
        let c_prev = match self.cells.get(&l.name) {
            Some(&c) => c,
            None => {
                let z = Tensor::zeros(self.tape.value(h_prev).shape().clone());
                self.tape.constant(z)
            }
        };
        let p = self.lstm_params(&q)?;
        let (h, c) = layers::lstm_step(&mut self.tape, p, x, h_prev, c_prev)?;
        self.cells.insert(l.name.clone(), c);
        Ok(Val::Dense(h))
    }

    /// Value of a reference as seen from loop step `t`.
    pub(crate) fn resolve_step(&mut self, r: &LayerRef, t: usize) -> Result<Val> {
        match r.kind {
            RefKind::Base => self.top.get(&r.name).cloned().ok_or_else(|| missing(r)),
            RefKind::Plain => {
                if let Some(v) = self.cur.get(&r.name) {
                    return Ok(v.clone());
                }
                self.hoisted_at(&r.name, t).ok_or_else(|| missing(r))?
            }
            RefKind::Prev => {
                if t == 0 {
                    return self.initial_value(&r.name);
                }
                if let Some(v) = self.last.get(&r.name) {
                    return Ok(v.clone());
                }
                self.hoisted_at(&r.name, t - 1).ok_or_else(|| missing(r))?
            }
        }
    }

    fn hoisted_at(&mut self, name: &str, t: usize) -> Option<Result<Val>> {
        if let Some(v) = self.pre_inv.get(name) {
            return Some(Ok(v.clone()));
        }
        let key = (name.to_string(), t);
        if let Some(v) = self.var_cache.get(&key) {
            return Some(Ok(v.clone()));
        }
        let v = self.pre_var.get(name)?.clone();
        let r = match v {
            Val::Ids(ids) => ids.select(Axis::Step, t).map(|s| Val::Ids(Arc::new(s))),
            Val::Dense(n) => self.tape.select(n, Axis::Step, t).map(Val::Dense),
            Val::LogProbs(n) => self.tape.select(n, Axis::Step, t).map(Val::LogProbs),
        };
        if let Ok(v) = &r {
            self.var_cache.insert(key, v.clone());
        }
        Some(r)
    }

    pub(crate) fn initial_value(&mut self, name: &str) -> Result<Val> {
        let g = self.g;
        let rule = g
            .loop_carried
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, r)| *r)
            .unwrap_or(InitRule::Zeros);
        let info = g.sub_info(name).ok_or_else(|| Error::Config(format!("unknown layer `{name}`")))?;
        Ok(match rule {
            InitRule::Token(id) => Val::Ids(Arc::new(Tensor::filled(Shape::new(&[(Axis::Batch, self.rows)])?, id))),
            InitRule::Zeros => Val::Dense(self.initial_dense(info, 0.0)?),
            InitRule::Constant(c) => Val::Dense(self.initial_dense(info, c)?),
        })
    }

    fn initial_dense(&mut self, info: LayerInfo, value: f64) -> Result<NodeId> {
        let mut dims = vec![(Axis::Batch, self.rows)];
        if info.time {
            dims.push((Axis::Time, self.src_time));
        }
        dims.push((Axis::Feature, info.dim));
        let mut t = Tensor::filled(Shape::new(&dims)?, T::from_f64(value));
        if info.time {
            t = t.with_seq_lens(self.src_lens.to_vec())?;
        }
        Ok(self.tape.constant(t))
    }

    fn param(&mut self, name: &str) -> Result<NodeId> {
        self.params.register(&mut self.tape, name)
    }

    fn lstm_params(&mut self, prefix: &str) -> Result<LstmParams> {
        Ok(LstmParams {
            w: self.param(&format!("{prefix}/W"))?,
            r: self.param(&format!("{prefix}/R"))?,
            b: self.param(&format!("{prefix}/b"))?,
        })
    }

    fn dense(&mut self, v: &Val) -> Result<NodeId> {
        match v {
            Val::Dense(n) => Ok(*n),
            Val::LogProbs(n) => self.tape.exp(*n),
            Val::Ids(_) => Err(Error::Config("token ids used where features are expected".into())),
        }
    }

    /// Dense inputs with the layer's dropout applied.
    fn dense_inputs(&mut self, q: &str, l: &LayerSpec, ins: &[Val], key: StepKey) -> Result<Vec<NodeId>> {
        let mut out = Vec::with_capacity(ins.len());
        for (i, v) in ins.iter().enumerate() {
            let x = self.dense(v)?;
            out.push(self.apply_dropout(q, i, x, l.dropout, key)?);
        }
        Ok(out)
    }

    fn apply_dropout(&mut self, q: &str, input: usize, x: NodeId, rate: f64, key: StepKey) -> Result<NodeId> {
        if !self.dropout || rate == 0.0 {
            return Ok(x);
        }
        let base = self.key.child(q).child(&format!("in{input}"));
        let shape = self.tape.value(x).shape().clone();
        let mask: Tensor<T> = match key {
            StepKey::Invariant => dropout_mask(shape, rate, base.at(INVARIANT_COUNTER)),
            StepKey::Step(t) => dropout_mask(shape, rate, base.at(t as u64)),
            StepKey::Stacked(n) if shape.has(Axis::Step) => {
                let slice = shape.without(Axis::Step);
                let parts: Vec<Tensor<T>> = (0..n).map(|t| dropout_mask(slice.clone(), rate, base.at(t as u64))).collect();
                Tensor::stack(Axis::Step, &parts.iter().collect::<Vec<_>>())?
            }
            StepKey::Stacked(_) => dropout_mask(shape, rate, base.at(INVARIANT_COUNTER)),
        };
        let m = self.tape.constant(mask);
        self.tape.mul(x, m)
    }

    fn activate(&mut self, x: NodeId, act: Option<Activation>) -> Result<NodeId> {
        let t = &mut self.tape;
        match act.unwrap_or(Activation::Identity) {
            Activation::Identity => Ok(x),
            Activation::Tanh => t.tanh(x),
            Activation::Sigmoid => t.sigmoid(x),
            Activation::Relu => t.relu(x),
            Activation::Exp => t.exp(x),
            Activation::Log => t.log(x),
            Activation::InvFertility => layers::fertility_gate(t, x),
        }
    }

    fn eval_layer(&mut self, q: &str, l: &LayerSpec, ins: &[Val], extra: Option<(Val, Val)>, key: StepKey) -> Result<Val> {
        let r = self.eval_layer_inner(q, l, ins, extra, key);
        r.map_err(|e| match e {
            Error::Shape(m) => Error::Shape(format!("layer `{q}`: {m}")),
            Error::Index(m) => Error::Index(format!("layer `{q}`: {m}")),
            other => other,
        })
    }

    fn eval_layer_inner(
        &mut self,
        q: &str,
        l: &LayerSpec,
        ins: &[Val],
        extra: Option<(Val, Val)>,
        key: StepKey,
    ) -> Result<Val> {
        Ok(match l.class {
            LayerClass::Linear => {
                let w = self.param(&format!("{q}/W"))?;
                let b = self.param(&format!("{q}/b"))?;
                let y = match ins {
                    [Val::Ids(ids)] => layers::embed(&mut self.tape, ids.clone(), w, b)?,
                    _ => {
                        let xs = self.dense_inputs(q, l, ins, key)?;
                        layers::linear(&mut self.tape, &xs, w, b)?
                    }
                };
                Val::Dense(self.activate(y, l.activation)?)
            }
            LayerClass::Copy | LayerClass::Decide => match ins {
                [Val::Ids(ids)] => Val::Ids(ids.clone()),
                [single] if l.dropout == 0.0 || !self.dropout => single.clone(),
                _ => {
                    let xs = self.dense_inputs(q, l, ins, key)?;
                    Val::Dense(self.tape.concat(&xs)?)
                }
            },
            LayerClass::Combine => {
                let xs = self.dense_inputs(q, l, ins, key)?;
                let mut acc = xs[0];
                for &x in &xs[1..] {
                    acc = match l.kind.expect("required") {
                        CombineKind::Add => self.tape.add(acc, x)?,
                        CombineKind::Sub => self.tape.sub(acc, x)?,
                        CombineKind::Mul => self.tape.mul(acc, x)?,
                    };
                }
                Val::Dense(self.activate(acc, l.activation)?)
            }
            LayerClass::Activation => {
                let xs = self.dense_inputs(q, l, ins, key)?;
                let x = self.tape.concat(&xs)?;
                Val::Dense(self.activate(x, l.activation)?)
            }
            LayerClass::SoftmaxOverSpatial => {
                let x = self.dense(&ins[0])?;
                Val::Dense(layers::softmax_over_spatial(&mut self.tape, x)?)
            }
            LayerClass::GenericAttention => {
                let (w, b) = extra.ok_or_else(|| Error::Config(format!("layer `{q}`: missing weights/base")))?;
                let a = self.dense(&w)?;
                let base = self.dense(&b)?;
                Val::Dense(layers::generic_attention(&mut self.tape, a, base)?)
            }
            LayerClass::Softmax => {
                let xs = self.dense_inputs(q, l, ins, key)?;
                let w = self.param(&format!("{q}/W"))?;
                let b = self.param(&format!("{q}/b"))?;
                let y = layers::linear(&mut self.tape, &xs, w, b)?;
                Val::LogProbs(self.tape.log_softmax(y)?)
            }
            LayerClass::Rec => {
                let xs = self.dense_inputs(q, l, ins, key)?;
                let x = self.tape.concat(&xs)?;
                let p = self.lstm_params(q)?;
                Val::Dense(layers::lstm_sequence(&mut self.tape, p, x, l.direction)?)
            }
            LayerClass::RnnCell | LayerClass::Choice | LayerClass::Subnetwork => {
                return Err(Error::Config(format!("layer `{q}`: class `{}` cannot run here", l.class)))
            }
        })
    }
}

fn missing(r: &LayerRef) -> Error {
    Error::Config(format!("reference `{r}` is not available at this point of the schedule"))
}
