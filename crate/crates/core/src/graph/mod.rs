//! Compilation of a network description into a mode-specialized schedule.
//!
//! Top-level layers run once per batch. Layers of the recurrent subnetwork
//! are partitioned into three lists:
//!
//! * `pre_loop`: subnetwork layers that do not depend on any loop-carried
//!   value. They run once, over all decoder steps at the same time when they
//!   vary per step (ground-truth feedback in training), or once for the whole
//!   sequence when they only read top-level layers.
//! * `loop_body`: everything that reaches a `prev:` reference, an `rnn_cell`
//!   state or a step-local choice.
//! * `post_loop`: losses over the stacked decoder outputs and top-level
//!   layers reading the recurrent layer.

mod decode;
mod exec;

pub use decode::{step_decoder, Decoder, LoopState};
pub use exec::{execute_training_graph, ExecOptions, ExecOutput, LossKind, SeqBatch};

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use crate::autodiff::ParamSpec;
use crate::config::{
    resolve_references, validate_config, DepGraph, LayerClass, LayerSpec, NetworkConfig, RefKind, Unit, DATA,
};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ExecMode {
    /// Ground-truth feedback.
    Train,
    /// Model predictions replace ground truth with the given probability.
    ScheduledSampling(f64),
    /// Feedback comes from the beam search.
    Decode,
}

impl ExecMode {
    pub fn is_training(self) -> bool {
        !matches!(self, ExecMode::Decode)
    }

    /// Whether the choice layer's value is only known step by step.
    pub fn step_local_choice(self) -> bool {
        !matches!(self, ExecMode::Train)
    }
}

/// Vocabulary sizes of the source data and the target (choice) space.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelDims {
    pub src_vocab: usize,
    pub trg_vocab: usize,
}

/// Per-step output description of a layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerInfo {
    /// Feature extent, or vocabulary size for token ids.
    pub dim: usize,
    /// Token ids rather than dense features.
    pub sparse: bool,
    /// Carries the source `Time` axis.
    pub time: bool,
}

/// Value of a loop-carried layer before the first step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum InitRule {
    Zeros,
    Constant(f64),
    Token(u32),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Placement {
    PreLoop,
    LoopBody,
    PostLoop,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CompileOptions {
    /// Move loop-invariant layers out of the loop. Disabling gives the naive
    /// schedule where every subnetwork layer runs once per step.
    pub hoist: bool,
}

impl Default for CompileOptions {
    fn default() -> Self {
        CompileOptions { hoist: true }
    }
}

#[derive(Clone, Debug)]
pub struct CompiledGraph {
    pub mode: ExecMode,
    pub hoisted: bool,
    /// Qualified names (`rec/name` for subnetwork layers).
    pub pre_loop: Vec<String>,
    pub loop_body: Vec<String>,
    pub post_loop: Vec<String>,
    /// Subnetwork layers whose previous-step value is read, with their start values.
    pub loop_carried: Vec<(String, InitRule)>,
    pub param_manifest: Vec<ParamSpec>,
    pub(crate) cfg: NetworkConfig,
    pub(crate) deps: DepGraph,
    pub(crate) dims: ModelDims,
    pub(crate) top_info: BTreeMap<String, LayerInfo>,
    pub(crate) sub_info: BTreeMap<String, LayerInfo>,
    pub(crate) top_pre: Vec<String>,
    pub(crate) sub_pre: Vec<String>,
    pub(crate) sub_loop: Vec<String>,
    pub(crate) step_varying: BTreeSet<String>,
    pub(crate) choice: Option<String>,
    pub(crate) loss_layer: Option<String>,
    /// Loop-body layers that need the current step's choice (decode only).
    pub(crate) after_choice: BTreeSet<String>,
}

pub(crate) fn loss_node_name(q: &str) -> String {
    format!("{q}:loss")
}

impl CompiledGraph {
    pub fn config(&self) -> &NetworkConfig {
        &self.cfg
    }

    pub fn dims(&self) -> ModelDims {
        self.dims
    }

    pub fn rec_name(&self) -> Option<&str> {
        self.deps.rec.as_deref()
    }

    pub fn qualify_sub(&self, name: &str) -> String {
        self.deps.qualify(true, name)
    }

    /// Placement of a subnetwork layer by its unqualified name.
    pub fn sub_placement(&self, name: &str) -> Option<Placement> {
        self.placement(&self.qualify_sub(name))
    }

    /// Placement of a node by qualified name.
    pub fn placement(&self, qualified: &str) -> Option<Placement> {
        if self.pre_loop.iter().any(|n| n == qualified) {
            Some(Placement::PreLoop)
        } else if self.loop_body.iter().any(|n| n == qualified) {
            Some(Placement::LoopBody)
        } else if self.post_loop.iter().any(|n| n == qualified) {
            Some(Placement::PostLoop)
        } else {
            None
        }
    }

    pub fn sub_layer(&self, name: &str) -> Option<&LayerSpec> {
        self.cfg.subnetwork().and_then(|s| s.get(name))
    }

    pub fn choice_layer(&self) -> Option<&str> {
        self.choice.as_deref()
    }

    /// The softmax layer the choice reads (and the loss is attached to).
    pub fn output_softmax(&self) -> Option<&str> {
        let c = self.sub_layer(self.choice.as_deref()?)?;
        c.from.first().map(|r| r.name.as_str())
    }

    pub fn label_smoothing(&self) -> f64 {
        self.loss_layer
            .as_deref()
            .and_then(|n| self.sub_layer(n))
            .and_then(|l| l.label_smoothing)
            .unwrap_or(0.0)
    }

    pub fn initial_token(&self) -> u32 {
        self.choice
            .as_deref()
            .and_then(|c| self.sub_layer(c))
            .and_then(|l| l.initial_output)
            .map_or(0, |v| v as u32)
    }

    pub fn sub_info(&self, name: &str) -> Option<LayerInfo> {
        self.sub_info.get(name).copied()
    }

    pub fn top_info(&self, name: &str) -> Option<LayerInfo> {
        self.top_info.get(name).copied()
    }

    /// Text dump of the three node lists.
    pub fn dump_schedule(&self) -> String {
        let mut s = String::new();
        let mode = match self.mode {
            ExecMode::Train => "train".to_string(),
            ExecMode::ScheduledSampling(p) => format!("scheduled-sampling({p})"),
            ExecMode::Decode => "decode".to_string(),
        };
        let _ = writeln!(s, "mode: {mode}  hoisting: {}", if self.hoisted { "on" } else { "off" });
        for (title, list) in [("pre_loop", &self.pre_loop), ("loop_body", &self.loop_body), ("post_loop", &self.post_loop)] {
            let _ = writeln!(s, "{title} ({}):", list.len());
            for n in list {
                let _ = writeln!(s, "  {n}");
            }
        }
        s
    }
}

pub fn compile(cfg: &NetworkConfig, mode: ExecMode, dims: ModelDims) -> Result<CompiledGraph> {
    compile_with(cfg, mode, dims, CompileOptions::default())
}

pub fn compile_with(cfg: &NetworkConfig, mode: ExecMode, dims: ModelDims, opts: CompileOptions) -> Result<CompiledGraph> {
    let diags = validate_config(cfg);
    if !diags.is_empty() {
        return Err(Error::Invalid(diags.into_iter().map(|d| d.to_string()).collect()));
    }
    if let ExecMode::ScheduledSampling(p) = mode {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Config(format!("sampling probability {p} outside [0, 1]")));
        }
    }
    let deps = resolve_references(cfg)?;
    let (top_info, sub_info) = infer_shapes(cfg, &deps, dims)?;
    let param_manifest = build_manifest(cfg, &deps, dims, &top_info, &sub_info);

    let rec = deps.rec.clone();
    let sub = cfg.subnetwork();
    let depends_on_rec: BTreeSet<String> = match &rec {
        Some(r) => {
            let mut s = BTreeSet::new();
            for n in &deps.top_order {
                let l = &cfg.layers[n];
                if l.inputs().any(|x| &x.name == r || s.contains(&x.name)) {
                    s.insert(n.clone());
                }
            }
            s
        }
        None => BTreeSet::new(),
    };
    let top_pre: Vec<String> = deps
        .top_order
        .iter()
        .filter(|n| Some(*n) != rec.as_ref() && !depends_on_rec.contains(*n))
        .cloned()
        .collect();
    let top_post: Vec<String> = deps.top_order.iter().filter(|n| depends_on_rec.contains(*n)).cloned().collect();

    let mut sub_pre = Vec::new();
    let mut sub_loop = Vec::new();
    let mut step_varying = BTreeSet::new();
    let mut choice = None;
    let mut loss_layer = None;
    let mut after_choice = BTreeSet::new();
    let mut loop_carried = Vec::new();
    if let Some(sub) = sub {
        choice = sub.values().find(|l| l.class == LayerClass::Choice).map(|l| l.name.clone());
        loss_layer = sub.values().find(|l| l.class == LayerClass::Softmax && l.loss.is_some()).map(|l| l.name.clone());
        if mode.is_training() && loss_layer.is_none() {
            return Err(Error::Config("the recurrent subnetwork has no loss; it cannot be trained".into()));
        }
        let (in_loop, varying) = hoist_loop_invariants(sub, &deps.sub_order, mode, opts.hoist);
        step_varying = varying;
        for n in &deps.sub_order {
            if in_loop.contains(n) {
                sub_loop.push(n.clone());
            } else {
                sub_pre.push(n.clone());
            }
        }
        if let Some(c) = &choice {
            if in_loop.contains(c) {
                for n in &sub_loop {
                    let l = &sub[n];
                    if n == c || l.inputs().any(|r| r.kind == RefKind::Plain && after_choice.contains(&r.name)) {
                        after_choice.insert(n.clone());
                    }
                }
            }
        }
        let mut carried: BTreeSet<String> = BTreeSet::new();
        for l in sub.values() {
            for r in l.inputs().filter(|r| r.kind == RefKind::Prev) {
                carried.insert(r.name.clone());
            }
            if l.class == LayerClass::RnnCell {
                carried.insert(l.name.clone());
            }
        }
        for n in carried {
            let l = &sub[&n];
            let rule = match (l.class, l.initial_output) {
                (LayerClass::Choice, v) => InitRule::Token(v.map_or(0, |v| v as u32)),
                (_, Some(v)) if v != 0.0 => InitRule::Constant(v),
                _ => InitRule::Zeros,
            };
            loop_carried.push((n, rule));
        }
    }

    let q = |n: &String| deps.qualify(true, n);
    let mut pre_loop: Vec<String> = top_pre.clone();
    pre_loop.extend(sub_pre.iter().map(q));
    let loop_body: Vec<String> = sub_loop.iter().map(q).collect();
    let mut post_loop = Vec::new();
    if let (Some(l), true) = (&loss_layer, mode.is_training()) {
        post_loop.push(loss_node_name(&q(l)));
    }
    if let Some(r) = &rec {
        post_loop.push(r.clone());
    }
    post_loop.extend(top_post.iter().cloned());

    Ok(CompiledGraph {
        mode,
        hoisted: opts.hoist,
        pre_loop,
        loop_body,
        post_loop,
        loop_carried,
        param_manifest,
        cfg: cfg.clone(),
        deps,
        dims,
        top_info,
        sub_info,
        top_pre,
        sub_pre,
        sub_loop,
        step_varying,
        choice,
        loss_layer,
        after_choice,
    })
}

/// Splits subnetwork layers into loop-body and hoistable ones. A layer stays
/// in the loop iff it reads a `prev:` reference, is an `rnn_cell`, is a
/// step-local choice, or reads a layer that stays in the loop. Returns the
/// loop set and, among hoisted layers, those that vary per decoder step.
pub fn hoist_loop_invariants(
    sub: &BTreeMap<String, LayerSpec>,
    order: &[String],
    mode: ExecMode,
    hoist: bool,
) -> (BTreeSet<String>, BTreeSet<String>) {
    let mut in_loop = BTreeSet::new();
    let mut varying = BTreeSet::new();
    for n in order {
        let l = &sub[n];
        if !hoist {
            in_loop.insert(n.clone());
            continue;
        }
        if l.class == LayerClass::Choice {
            if mode.step_local_choice() {
                in_loop.insert(n.clone());
            } else {
                varying.insert(n.clone());
            }
            continue;
        }
        let loop_dep = l.class == LayerClass::RnnCell
            || l.inputs().any(|r| match r.kind {
                RefKind::Prev => true,
                RefKind::Plain => in_loop.contains(&r.name),
                RefKind::Base => false,
            });
        if loop_dep {
            in_loop.insert(n.clone());
        } else if l.inputs().any(|r| r.kind == RefKind::Plain && varying.contains(&r.name)) {
            varying.insert(n.clone());
        }
    }
    (in_loop, varying)
}

type InfoMaps = (BTreeMap<String, LayerInfo>, BTreeMap<String, LayerInfo>);

fn infer_shapes(cfg: &NetworkConfig, deps: &DepGraph, dims: ModelDims) -> Result<InfoMaps> {
    let mut top: BTreeMap<String, LayerInfo> = BTreeMap::new();
    let data = LayerInfo { dim: dims.src_vocab, sparse: true, time: true };
    let rec = deps.rec.clone();
    let mut sub_info: BTreeMap<String, LayerInfo> = BTreeMap::new();
    for n in &deps.top_order {
        let l = &cfg.layers[n];
        if Some(n) == rec.as_ref() {
            let sub = l.subnetwork().expect("rec layer");
            sub_info = infer_sub(sub, &deps.sub_order, &top, dims)?;
            let out = sub_info
                .get("output")
                .copied()
                .ok_or_else(|| Error::Config(format!("layer `{n}`: subnetwork has no `output` layer")))?;
            top.insert(n.clone(), out);
            continue;
        }
        let ins: Vec<LayerInfo> = l
            .from
            .iter()
            .map(|r| if r.name == DATA { Ok(data) } else { lookup(&top, &r.name, n) })
            .collect::<Result<_>>()?;
        let info = layer_info(l, &ins, &[], dims)?;
        top.insert(n.clone(), info);
    }
    Ok((top, sub_info))
}

fn lookup(map: &BTreeMap<String, LayerInfo>, name: &str, reader: &str) -> Result<LayerInfo> {
    map.get(name)
        .copied()
        .ok_or_else(|| Error::Config(format!("layer `{reader}`: cannot infer the shape of input `{name}`")))
}

fn infer_sub(
    sub: &BTreeMap<String, LayerSpec>,
    order: &[String],
    top: &BTreeMap<String, LayerInfo>,
    dims: ModelDims,
) -> Result<BTreeMap<String, LayerInfo>> {
    let mut info: BTreeMap<String, LayerInfo> = BTreeMap::new();
    // prev: references may point forward in the plain order and close cycles.
    // Iterate to a fixed point; the Time flag only ever turns on.
    for _ in 0..=2 * order.len() + 1 {
        let mut progress = false;
        for n in order {
            let l = &sub[n];
            // These shapes do not depend on the inputs, which breaks recurrent cycles.
            let fixed = match l.class {
                LayerClass::RnnCell => l.n_out.map(|d| LayerInfo { dim: d, sparse: false, time: false }),
                LayerClass::Softmax => Some(LayerInfo { dim: dims.trg_vocab, sparse: false, time: false }),
                LayerClass::Choice => Some(LayerInfo { dim: dims.trg_vocab, sparse: true, time: false }),
                _ => None,
            };
            if let Some(i) = fixed {
                if info.contains_key(n) {
                    continue;
                }
                info.insert(n.clone(), i);
                progress = true;
                continue;
            }
            let resolve = |r: &crate::config::LayerRef| -> Option<LayerInfo> {
                match r.kind {
                    RefKind::Base => top.get(&r.name).copied(),
                    _ => info.get(&r.name).copied(),
                }
            };
            // Unknown prev: inputs are skipped for now and checked below.
            let known = |rs: &mut dyn Iterator<Item = &crate::config::LayerRef>| -> Option<Vec<LayerInfo>> {
                let mut out = Vec::new();
                for r in rs {
                    match (resolve(r), r.kind) {
                        (Some(i), _) => out.push(i),
                        (None, RefKind::Prev) => {}
                        (None, _) => return None,
                    }
                }
                Some(out)
            };
            let (Some(ins), Some(extra)) = (known(&mut l.from.iter()), known(&mut l.weights.iter().chain(l.base.iter())))
            else {
                continue;
            };
            if extra.len() < l.weights.iter().chain(l.base.iter()).count() {
                continue;
            }
            let i = match (ins.is_empty() && !l.from.is_empty(), l.class) {
                (true, LayerClass::Linear) => LayerInfo { dim: l.n_out.expect("required"), sparse: false, time: false },
                (true, _) => continue,
                (false, _) => layer_info(l, &ins, &extra, dims)?,
            };
            if info.get(n) == Some(&i) {
                continue;
            }
            info.insert(n.clone(), i);
            progress = true;
        }
        if !progress {
            break;
        }
    }
    if let Some(n) = order.iter().find(|n| !info.contains_key(*n)) {
        return Err(Error::Config(format!("layer `{n}`: cannot infer its shape (recurrent dependency without a fixed size)")));
    }
    // Recheck every layer against the complete input shapes.
    let full = |r: &crate::config::LayerRef| match r.kind {
        RefKind::Base => top[&r.name],
        _ => info[&r.name],
    };
    for n in order {
        let l = &sub[n];
        if l.class == LayerClass::Choice {
            continue;
        }
        let ins: Vec<LayerInfo> = l.from.iter().map(full).collect();
        let extra: Vec<LayerInfo> = l.weights.iter().chain(l.base.iter()).map(full).collect();
        if layer_info(l, &ins, &extra, dims)? != info[n] {
            return Err(Error::Config(format!("layer `{n}`: its shape differs between decoder steps")));
        }
    }
    Ok(info)
}

fn layer_info(l: &LayerSpec, ins: &[LayerInfo], extra: &[LayerInfo], dims: ModelDims) -> Result<LayerInfo> {
    let err = |m: String| Error::Config(format!("layer `{}`: {m}", l.name));
    let any_time = ins.iter().any(|i| i.time);
    let dense_dim = || -> Result<usize> {
        if ins.is_empty() {
            return Err(err("needs at least one input".into()));
        }
        if ins.len() > 1 && ins.iter().any(|i| i.sparse) {
            return Err(err("token-id inputs cannot be concatenated".into()));
        }
        Ok(ins.iter().map(|i| i.dim).sum())
    };
    Ok(match l.class {
        LayerClass::Linear => {
            dense_dim()?;
            LayerInfo { dim: l.n_out.expect("required"), sparse: false, time: any_time }
        }
        LayerClass::Rec => {
            if ins.iter().any(|i| i.sparse) {
                return Err(err("rec needs dense input; add an embedding layer".into()));
            }
            dense_dim()?;
            if !any_time {
                return Err(err("rec needs an input with a Time axis".into()));
            }
            LayerInfo { dim: l.n_out.expect("required"), sparse: false, time: true }
        }
        LayerClass::RnnCell => {
            if ins.iter().any(|i| i.sparse || i.time) {
                return Err(err("rnn_cell needs dense per-step input without a Time axis".into()));
            }
            dense_dim()?;
            LayerInfo { dim: l.n_out.expect("required"), sparse: false, time: false }
        }
        LayerClass::Copy | LayerClass::Decide => {
            let d = dense_dim()?;
            LayerInfo { dim: d, sparse: ins.len() == 1 && ins[0].sparse, time: any_time }
        }
        LayerClass::Combine | LayerClass::Activation => {
            if ins.is_empty() || ins.iter().any(|i| i.sparse) {
                return Err(err("needs dense inputs".into()));
            }
            let d = ins.iter().map(|i| i.dim).max().unwrap_or(1);
            if ins.iter().any(|i| i.dim != d && i.dim != 1) {
                return Err(err(format!(
                    "input sizes {:?} do not broadcast",
                    ins.iter().map(|i| i.dim).collect::<Vec<_>>()
                )));
            }
            LayerInfo { dim: d, sparse: false, time: any_time }
        }
        LayerClass::SoftmaxOverSpatial => {
            if ins.len() != 1 || !ins[0].time || ins[0].sparse {
                return Err(err("softmax_over_spatial needs one dense input with a Time axis".into()));
            }
            ins[0]
        }
        LayerClass::GenericAttention => {
            let (w, b) = (extra[0], extra[1]);
            if !w.time || !b.time || w.sparse || b.sparse || w.dim != 1 {
                return Err(err("generic_attention needs weights [T, 1] and a base with a Time axis".into()));
            }
            LayerInfo { dim: b.dim, sparse: false, time: false }
        }
        LayerClass::Softmax => {
            dense_dim()?;
            if ins.iter().any(|i| i.sparse) {
                return Err(err("softmax needs dense input".into()));
            }
            if let Some(n) = l.n_out {
                if n != dims.trg_vocab {
                    return Err(err(format!("n_out {n} differs from the target vocabulary size {}", dims.trg_vocab)));
                }
            }
            if any_time {
                return Err(err("softmax over the vocabulary cannot carry the source Time axis".into()));
            }
            LayerInfo { dim: dims.trg_vocab, sparse: false, time: false }
        }
        LayerClass::Choice | LayerClass::Subnetwork => unreachable!("handled by the caller"),
    })
}

fn build_manifest(
    cfg: &NetworkConfig,
    deps: &DepGraph,
    dims: ModelDims,
    top: &BTreeMap<String, LayerInfo>,
    sub: &BTreeMap<String, LayerInfo>,
) -> Vec<ParamSpec> {
    let data = LayerInfo { dim: dims.src_vocab, sparse: true, time: true };
    let mut out = Vec::new();
    let mut add = |prefix: &str, l: &LayerSpec, ins: Vec<LayerInfo>| {
        let in_dim: usize = ins.iter().map(|i| i.dim).sum();
        let n = match l.class {
            LayerClass::Softmax => None,
            _ => l.n_out,
        };
        match l.class {
            LayerClass::Linear | LayerClass::Softmax => {
                let n_out = n.unwrap_or_else(|| sub.get(&l.name).map_or(0, |i| i.dim));
                out.push(ParamSpec { name: format!("{prefix}/W"), dims: vec![in_dim, n_out], fan: Some((in_dim, n_out)), bias_offset: None });
                out.push(ParamSpec { name: format!("{prefix}/b"), dims: vec![n_out], fan: None, bias_offset: None });
            }
            LayerClass::Rec | LayerClass::RnnCell if l.unit == Some(Unit::Lstm) => {
                let h = l.n_out.expect("required");
                out.push(ParamSpec { name: format!("{prefix}/W"), dims: vec![in_dim, 4 * h], fan: Some((in_dim, 4 * h)), bias_offset: None });
                out.push(ParamSpec { name: format!("{prefix}/R"), dims: vec![h, 4 * h], fan: Some((h, 4 * h)), bias_offset: None });
                out.push(ParamSpec { name: format!("{prefix}/b"), dims: vec![4 * h], fan: None, bias_offset: Some((h, h, 1.0)) });
            }
            _ => {}
        }
    };
    for n in &deps.top_order {
        let l = &cfg.layers[n];
        if l.is_subnetwork() {
            continue;
        }
        let ins = l
            .from
            .iter()
            .map(|r| if r.name == DATA { data } else { top[&r.name] })
            .collect();
        add(n, l, ins);
    }
    if let Some(subnet) = cfg.subnetwork() {
        for n in &deps.sub_order {
            let l = &subnet[n];
            let ins = l
                .from
                .iter()
                .map(|r| match r.kind {
                    RefKind::Base => top[&r.name],
                    _ => sub[&r.name],
                })
                .collect();
            add(&deps.qualify(true, n), l, ins);
        }
    }
    out.sort_by(|a, b| a.name.cmp(&b.name));
    out
}
