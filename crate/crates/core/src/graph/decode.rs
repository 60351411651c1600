use std::collections::BTreeMap;
use std::sync::Arc;

use super::exec::{Executor, Stored, Val};
use super::{CompiledGraph, ExecMode};
use crate::autodiff::{ParamStore, Tape};
use crate::error::{Error, Result};
use crate::rng::RngKey;
use crate::tensor::{Axis, Ids, Scalar, Tensor};

/// Per-hypothesis decoder state between two steps. Rows are hypotheses;
/// beam search reorders them with [`LoopState::reorder`].
#[derive(Clone, Debug)]
pub struct LoopState<T> {
    /// Index of the next step to compute.
    pub t: usize,
    rows: usize,
    /// Loop-body values of step `t - 2` (read through `prev:` while finishing step `t - 1`).
    prev: BTreeMap<String, Stored<T>>,
    /// Values of step `t - 1` computed before its token was chosen.
    pending: BTreeMap<String, Stored<T>>,
    cells: BTreeMap<String, Arc<Tensor<T>>>,
}

impl<T: Scalar> LoopState<T> {
    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Follows surviving hypotheses: row `i` of the result is row `rows[i]`.
    pub fn reorder(&self, rows: &[usize]) -> Result<Self> {
        let g = |m: &BTreeMap<String, Stored<T>>| -> Result<BTreeMap<String, Stored<T>>> {
            m.iter().map(|(k, v)| Ok((k.clone(), v.gather_batch(rows)?))).collect()
        };
        Ok(LoopState {
            t: self.t,
            rows: rows.len(),
            prev: g(&self.prev)?,
            pending: g(&self.pending)?,
            cells: self
                .cells
                .iter()
                .map(|(k, v)| Ok((k.clone(), Arc::new(v.gather_batch(rows)?))))
                .collect::<Result<_>>()?,
        })
    }
}

/// Step-wise evaluation of a graph compiled in decode mode. The encoder and
/// every hoisted layer run once in [`Decoder::new`]; each source sentence
/// then owns `beam` consecutive rows.
pub struct Decoder<'g, T: Scalar> {
    g: &'g CompiledGraph,
    params: &'g ParamStore<T>,
    beam: usize,
    src: Arc<Ids>,
    top: BTreeMap<String, Stored<T>>,
    pre_inv: BTreeMap<String, Stored<T>>,
}

impl<'g, T: Scalar> Decoder<'g, T> {
    pub fn new(g: &'g CompiledGraph, params: &'g ParamStore<T>, src: Arc<Ids>, beam: usize) -> Result<Self> {
        if g.mode != ExecMode::Decode {
            return Err(Error::Config("decoder needs a graph compiled in decode mode".into()));
        }
        if g.choice.is_none() || g.output_softmax().is_none() {
            return Err(Error::Config("network has no choice layer to decode".into()));
        }
        if beam == 0 {
            return Err(Error::Config("beam size must be positive".into()));
        }
        params.check_manifest(&g.param_manifest)?;
        let mut ex = Executor::new(g, params, Tape::new(), false, RngKey::new(0, "decode"), src.clone());
        ex.run_top()?;
        ex.run_hoisted(0)?;
        let b = ex.rows();
        let rows: Vec<usize> = (0..b).flat_map(|i| std::iter::repeat_n(i, beam)).collect();
        let expand = |m: &BTreeMap<String, Val>| -> Result<BTreeMap<String, Stored<T>>> {
            m.iter().map(|(k, v)| Ok((k.clone(), ex.export(v).gather_batch(&rows)?))).collect()
        };
        let top = expand(&ex.top)?;
        let pre_inv = expand(&ex.pre_inv)?;
        let src = Arc::new(src.gather_batch(&rows)?);
        Ok(Decoder { g, params, beam, src, top, pre_inv })
    }

    pub fn graph(&self) -> &CompiledGraph {
        self.g
    }

    pub fn beam(&self) -> usize {
        self.beam
    }

    pub fn rows(&self) -> usize {
        self.src.shape().extent(Axis::Batch).unwrap_or(0)
    }

    pub fn source_lens(&self) -> &[usize] {
        self.src.seq_lens().unwrap_or(&[])
    }

    pub fn initial_state(&self) -> LoopState<T> {
        LoopState { t: 0, rows: self.rows(), prev: BTreeMap::new(), pending: BTreeMap::new(), cells: BTreeMap::new() }
    }

    /// The token every hypothesis starts from.
    pub fn initial_feedback(&self) -> Ids {
        Tensor::filled(
            crate::tensor::Shape::new(&[(Axis::Batch, self.rows())]).expect("valid shape"),
            self.g.initial_token(),
        )
    }

    /// Feeds the tokens chosen at the previous step (ignored at step 0) and
    /// returns the next log-probabilities `[rows, V]` with the advanced state.
    pub fn step(&self, state: &LoopState<T>, feedback: &Ids) -> Result<(Arc<Tensor<T>>, LoopState<T>)> {
        let g = self.g;
        if state.rows != self.rows() || feedback.len() != self.rows() {
            return Err(Error::Shape(format!(
                "decoder has {} rows, state {} and feedback {}",
                self.rows(),
                state.rows,
                feedback.len()
            )));
        }
        let choice = g.choice.clone().expect("checked in new");
        let mut ex = Executor::new(g, self.params, Tape::new(), false, RngKey::new(0, "decode"), self.src.clone());
        for (k, v) in &self.top {
            let v = ex.import(v);
            ex.top.insert(k.clone(), v);
        }
        for (k, v) in &self.pre_inv {
            let v = ex.import(v);
            ex.pre_inv.insert(k.clone(), v);
        }
        for (k, v) in &state.prev {
            let v = ex.import(v);
            ex.last.insert(k.clone(), v);
        }
        for (k, v) in &state.cells {
            let id = ex.tape.constant(v.clone());
            ex.cells.insert(k.clone(), id);
        }
        let after = &g.after_choice;
        if state.t > 0 {
            for (k, v) in &state.pending {
                let v = ex.import(v);
                ex.cur.insert(k.clone(), v);
            }
            let ids = feedback.reshaped(crate::tensor::Shape::new(&[(Axis::Batch, self.rows())])?)?;
            ex.cur.insert(choice.clone(), Val::Ids(Arc::new(ids)));
            ex.run_loop_layers(state.t - 1, Some(&|n: &str| after.contains(n)))?;
            ex.finish_step();
        }
        ex.run_loop_layers(state.t, Some(&|n: &str| !after.contains(n)))?;
        let sm = g.output_softmax().expect("checked in new");
        let lp = match ex.cur.get(sm) {
            Some(Val::LogProbs(n)) => ex.tape.shared_value(*n),
            _ => return Err(Error::Config(format!("softmax `{sm}` was not evaluated before the choice"))),
        };
        if !lp.all_finite() {
            return Err(Error::NonFinite { step: state.t, layer: g.qualify_sub(sm) });
        }
        let next = LoopState {
            t: state.t + 1,
            rows: state.rows,
            prev: ex.last.iter().map(|(k, v)| (k.clone(), ex.export(v))).collect(),
            pending: ex.cur.iter().map(|(k, v)| (k.clone(), ex.export(v))).collect(),
            cells: ex.cells.iter().map(|(k, &id)| (k.clone(), ex.tape.shared_value(id))).collect(),
        };
        Ok((lp, next))
    }
}

/// One decoder step; see [`Decoder::step`].
pub fn step_decoder<T: Scalar>(
    dec: &Decoder<'_, T>,
    state: &LoopState<T>,
    feedback: &Ids,
) -> Result<(Arc<Tensor<T>>, LoopState<T>)> {
    dec.step(state, feedback)
}
