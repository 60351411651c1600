//! Differentiable building blocks used by the executor. Each function records
//! onto a [`Tape`] and returns the new node.

use std::sync::Arc;

use rand::Rng;

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::rng::RngKey;
use crate::tensor::{Axis, Ids, Scalar, Tensor};

/// Parameter nodes of one LSTM: `w: [In, 4H]`, `r: [H, 4H]`, `b: [4H]`.
#[derive(Clone, Copy, Debug)]
pub struct LstmParams {
    pub w: NodeId,
    pub r: NodeId,
    pub b: NodeId,
}

/// `x·w + b` over the concatenation of `inputs`.
pub fn linear<T: Scalar>(tape: &mut Tape<T>, inputs: &[NodeId], w: NodeId, b: NodeId) -> Result<NodeId> {
    let x = tape.concat(inputs)?;
    let y = tape.matmul(x, w)?;
    tape.add(y, b)
}

/// Embedding lookup `w[id] + b`.
pub fn embed<T: Scalar>(tape: &mut Tape<T>, ids: Arc<Ids>, w: NodeId, b: NodeId) -> Result<NodeId> {
    let y = tape.gather_rows(w, ids)?;
    tape.add(y, b)
}

/// One LSTM step. Returns `(h, c)`.
pub fn lstm_step<T: Scalar>(
    tape: &mut Tape<T>,
    p: LstmParams,
    x: NodeId,
    h_prev: NodeId,
    c_prev: NodeId,
) -> Result<(NodeId, NodeId)> {
    let xw = tape.matmul(x, p.w)?;
    let z = tape.add(xw, p.b)?;
    lstm_from_gates(tape, p, z, h_prev, c_prev)
}

fn lstm_from_gates<T: Scalar>(
    tape: &mut Tape<T>,
    p: LstmParams,
    zx: NodeId,
    h_prev: NodeId,
    c_prev: NodeId,
) -> Result<(NodeId, NodeId)> {
    let hr = tape.matmul(h_prev, p.r)?;
    let z = tape.add(zx, hr)?;
    let hc = tape.lstm_cell(z, c_prev)?;
    let h = tape.value(c_prev).shape().extent(Axis::Feature).expect("checked by lstm_cell");
    Ok((tape.slice_feature(hc, 0, h)?, tape.slice_feature(hc, h, h)?))
}

/// Runs an LSTM over the `Time` axis of `xs: [B, T, In]` honouring each
/// entry's length. Direction `-1` reads every sequence from its own last
/// valid position backwards. Padded output positions are zero.
pub fn lstm_sequence<T: Scalar>(tape: &mut Tape<T>, p: LstmParams, xs: NodeId, direction: i8) -> Result<NodeId> {
    let x = tape.value(xs);
    let (b, t) = match x.shape().dims() {
        [(Axis::Batch, b), (Axis::Time, t), (Axis::Feature, _)] => (*b, *t),
        _ => return Err(Error::Shape(format!("lstm input must be [B, T, F], got {}", x.shape()))),
    };
    let lens: Arc<Vec<usize>> = x.seq_lens_arc().unwrap_or_else(|| Arc::new(vec![t; b]));
    let hdim = tape.value(p.r).shape().dims()[0].1;
    let xw = tape.matmul(xs, p.w)?;
    let zx = tape.add(xw, p.b)?;
    let zero = Tensor::zeros(crate::tensor::Shape::new(&[(Axis::Batch, b), (Axis::Feature, hdim)])?);
    let mut h = tape.constant(zero.clone());
    let mut c = tape.constant(zero);
    let mut outs = Vec::with_capacity(t);
    let mut positions = Vec::with_capacity(t);
    for k in 0..t {
        let pos: Vec<Option<usize>> = lens
            .iter()
            .map(|&l| (k < l).then(|| if direction < 0 { l - 1 - k } else { k }))
            .collect();
        let step_in = tape.gather_time(zx, Arc::new(pos.clone()))?;
        // Finished sequences run on zero input; those outputs are never scattered.
        (h, c) = lstm_from_gates(tape, p, step_in, h, c)?;
        outs.push(h);
        positions.push(pos);
    }
    tape.scatter_time(&outs, Arc::new(positions), t, Some(lens))
}

/// Softmax over the source `Time` axis restricted to each entry's valid
/// positions. Padded positions get weight 0.
pub fn softmax_over_spatial<T: Scalar>(tape: &mut Tape<T>, e: NodeId) -> Result<NodeId> {
    tape.softmax_time(e)
}

/// Weighted sum `Σ_t a[.., t, 0] · base[.., t, :]` over valid positions.
pub fn generic_attention<T: Scalar>(tape: &mut Tape<T>, a: NodeId, base: NodeId) -> Result<NodeId> {
    if tape.value(a).shape().extent(Axis::Feature) != Some(1) {
        return Err(Error::Shape(format!("attention weights must have Feature extent 1, got {}", tape.value(a).shape())));
    }
    let weighted = tape.mul(a, base)?;
    tape.reduce_sum(weighted, Axis::Time)
}

/// MLP attention energies `tanh(keys + Σ extras) · v` with `v: [In: K, F: 1]`.
pub fn attention_energy<T: Scalar>(tape: &mut Tape<T>, keys: NodeId, extras: &[NodeId], v: NodeId) -> Result<NodeId> {
    let mut acc = keys;
    for &e in extras {
        acc = tape.add(acc, e)?;
    }
    let t = tape.tanh(acc)?;
    tape.matmul(t, v)
}

/// Running attention sum `accum_prev + a`; `None` starts from zero.
pub fn accumulate_attention<T: Scalar>(tape: &mut Tape<T>, accum_prev: Option<NodeId>, a: NodeId) -> Result<NodeId> {
    match accum_prev {
        Some(p) => tape.add(p, a),
        None => Ok(a),
    }
}

/// Inverse-fertility gate `2·sigmoid(x)`, in (0, 2).
pub fn fertility_gate<T: Scalar>(tape: &mut Tape<T>, x: NodeId) -> Result<NodeId> {
    let s = tape.sigmoid(x)?;
    tape.scale(s, 2.0)
}

/// Scales accumulated attention by the per-position gate.
pub fn fertility_scale<T: Scalar>(tape: &mut Tape<T>, accum: NodeId, gate: NodeId) -> Result<NodeId> {
    tape.mul(accum, gate)
}

/// How the choice layer picks the token fed back at the next step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ChoicePolicy {
    /// Ground truth.
    Teacher,
    /// Argmax of the model with probability `p`, ground truth otherwise.
    Sample(f64),
    /// Argmax of the model.
    Greedy,
}

/// Picks one token per row of `log_probs: [B, V]`.
pub fn choice_select<T: Scalar>(
    policy: ChoicePolicy,
    log_probs: &Tensor<T>,
    true_labels: Option<&Ids>,
    key: RngKey,
) -> Result<Ids> {
    let v = log_probs
        .shape()
        .extent(Axis::Feature)
        .ok_or_else(|| Error::Shape(format!("choice over {}", log_probs.shape())))?;
    let rows = log_probs.len() / v;
    let truth = || -> Result<&Ids> {
        let t = true_labels.ok_or_else(|| Error::Shape("this choice policy needs true labels".into()))?;
        if t.len() != rows {
            return Err(Error::Shape(format!("{} true labels for {rows} rows", t.len())));
        }
        Ok(t)
    };
    let argmax = |r: usize| -> u32 {
        let row = &log_probs.data()[r * v..(r + 1) * v];
        let mut best = 0;
        for (i, &x) in row.iter().enumerate() {
            if x > row[best] {
                best = i;
            }
        }
        best as u32
    };
    let shape = log_probs.shape().without(Axis::Feature);
    let ids: Vec<u32> = match policy {
        ChoicePolicy::Teacher => truth()?.data().to_vec(),
        ChoicePolicy::Greedy => (0..rows).map(argmax).collect(),
        ChoicePolicy::Sample(p) => {
            let t = truth()?;
            let mut rng = key.rng();
            (0..rows).map(|r| if rng.gen::<f64>() < p { argmax(r) } else { t.data()[r] }).collect()
        }
    };
    Tensor::from_vec(shape, ids)
}

/// Label-smoothed cross entropy of `log_probs: [B, Step, V]`, averaged over
/// the valid positions given by `lens`.
pub fn ce_label_smoothing<T: Scalar>(
    tape: &mut Tape<T>,
    log_probs: NodeId,
    targets: Arc<Ids>,
    lens: Arc<Vec<usize>>,
    eps: f64,
) -> Result<NodeId> {
    tape.smoothed_ce(log_probs, targets, lens, eps)
}
