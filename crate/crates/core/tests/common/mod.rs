//! Helpers shared by the graph tests and the acceptance report.
#![allow(dead_code)]

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use recgraph::autodiff::{relative_error, ParamStore};
use recgraph::config::{parse_network_config, NetworkConfig};
use recgraph::graph::{
    compile, compile_with, execute_training_graph, step_decoder, CompileOptions, CompiledGraph, Decoder, ExecMode, ExecOptions,
    ExecOutput, LossKind, ModelDims, SeqBatch,
};
use recgraph::rng::RngKey;
use recgraph::tensor::{Axis, Ids};
use serde_json::{json, Map, Value};

pub const DIMS: ModelDims = ModelDims { src_vocab: 9, trg_vocab: 7 };

pub fn listing() -> NetworkConfig {
    parse_network_config(&std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/configs/attention_wmt.json")).unwrap()).unwrap()
}

pub fn listing_graph(mode: ExecMode) -> CompiledGraph {
    // Small vocabularies keep the manifest cheap; widths come from the config.
    compile(&listing(), mode, DIMS).unwrap()
}

pub fn batch() -> SeqBatch {
    SeqBatch::new(&[vec![4, 5, 6, 7], vec![8, 4]], &[vec![6, 5, 4, 0], vec![5, 0]], 3).unwrap()
}

/// A random encoder-decoder: one or two encoder directions, optional
/// attention with accumulated feedback (keys projected at top level or
/// inside the loop, energies from the current or previous decoder state),
/// and a random stack of extra dense layers reading current, previous-step
/// and earlier values.
pub fn random_config(seed: u64) -> NetworkConfig {
    let mut rng = RngKey::new(seed, "random-config").rng();
    let w = 2 * rng.gen_range(1..4usize);
    let e = rng.gen_range(2..5usize);
    let mut top = Map::new();
    top.insert("src".into(), json!({"class": "linear", "n_out": e}));
    let bi = rng.gen_bool(0.5);
    if bi {
        top.insert("enc_fw".into(), json!({"class": "rec", "unit": "lstm", "n_out": w / 2, "from": ["src"]}));
        top.insert("enc_bw".into(), json!({"class": "rec", "unit": "lstm", "n_out": w / 2, "direction": -1, "from": ["src"]}));
        top.insert("encoder".into(), json!({"class": "copy", "from": ["enc_fw", "enc_bw"]}));
    } else {
        let dir = if rng.gen_bool(0.5) { 1 } else { -1 };
        top.insert("encoder".into(), json!({"class": "rec", "unit": "lstm", "n_out": w, "direction": dir, "from": ["src"]}));
    }

    let mut sub = Map::new();
    sub.insert("output".into(), json!({"class": "choice", "from": ["output_prob"], "initial_output": 0}));
    sub.insert("trg".into(), json!({"class": "linear", "from": ["output"], "n_out": e, "initial_output": 0}));
    let attention = rng.gen_bool(0.75);
    let mut s_from = vec![json!("prev:trg")];
    let mut pool: Vec<String> = vec!["s".into()];
    if attention {
        let a_dim = rng.gen_range(1..4usize);
        let keys = if rng.gen_bool(0.5) {
            top.insert("keys".into(), json!({"class": "linear", "from": ["encoder"], "n_out": a_dim}));
            "base:keys"
        } else {
            sub.insert("keys".into(), json!({"class": "linear", "from": ["base:encoder"], "n_out": a_dim}));
            "keys"
        };
        let query = if rng.gen_bool(0.5) { "s" } else { "prev:s" };
        sub.insert("s_tr".into(), json!({"class": "linear", "from": [query], "n_out": a_dim}));
        let mut e_in = vec![json!(keys), json!("s_tr")];
        if rng.gen_bool(0.6) {
            sub.insert("weight_feedback".into(), json!({"class": "linear", "from": ["prev:accum_a"], "n_out": a_dim}));
            sub.insert("accum_a".into(), json!({"class": "combine", "kind": "add", "from": ["prev:accum_a", "a"]}));
            e_in.push(json!("weight_feedback"));
        }
        sub.insert("e_in".into(), json!({"class": "combine", "kind": "add", "from": e_in}));
        sub.insert("e_tanh".into(), json!({"class": "activation", "activation": "tanh", "from": ["e_in"]}));
        sub.insert("e".into(), json!({"class": "linear", "from": ["e_tanh"], "n_out": 1}));
        sub.insert("a".into(), json!({"class": "softmax_over_spatial", "from": ["e"]}));
        sub.insert("att".into(), json!({"class": "generic_attention", "weights": "a", "base": "base:encoder"}));
        s_from.push(json!("prev:att"));
        if query == "prev:s" && rng.gen_bool(0.5) {
            // The context of the current step can feed the cell directly.
            s_from.push(json!("att"));
        }
        pool.push("att".into());
    }
    sub.insert("s".into(), json!({"class": "rnn_cell", "unit": "LSTMBlock", "from": s_from, "n_out": w}));

    let extra = rng.gen_range(0..4usize);
    for i in 0..extra {
        let mut cands: Vec<String> = pool.clone();
        cands.push("prev:s".into());
        cands.extend((0..extra).map(|j| format!("prev:x{j}")));
        // The first input fixes the width; previous-step reads alone would not.
        let mut from = vec![pool.choose(&mut rng).unwrap().clone()];
        if rng.gen_bool(0.6) {
            from.push(cands.choose(&mut rng).unwrap().clone());
            from.dedup();
        }
        let layer = match rng.gen_range(0..3) {
            0 => json!({"class": "combine", "kind": "add", "from": from}),
            1 => json!({"class": "activation", "activation": "tanh", "from": [from[0].clone()]}),
            _ => {
                let act = ["tanh", "relu", "sigmoid"].choose(&mut rng).unwrap();
                json!({"class": "linear", "activation": act, "n_out": w, "from": from})
            }
        };
        sub.insert(format!("x{i}"), layer);
        pool.push(format!("x{i}"));
    }
    let n = rng.gen_range(1..3usize);
    let mut read: Vec<String> = pool.choose_multiple(&mut rng, n).cloned().collect();
    if rng.gen_bool(0.5) {
        read.push("prev:trg".into());
    }
    let mut readout = json!({"class": "linear", "activation": "tanh", "n_out": w, "from": read});
    if rng.gen_bool(0.3) {
        readout["dropout"] = json!(0.2);
    }
    sub.insert("readout".into(), readout);
    let mut prob = json!({"class": "softmax", "from": ["readout"], "loss": "ce"});
    if rng.gen_bool(0.5) {
        prob["loss_opts"] = json!({"label_smoothing": 0.1});
    }
    sub.insert("output_prob".into(), prob);
    top.insert("output".into(), json!({"class": "rec", "from": [], "unit": Value::Object(sub)}));
    parse_network_config(&json!({"network": Value::Object(top)}).to_string()).unwrap_or_else(|e| panic!("seed {seed}: {e}"))
}

pub fn graphs(cfg: &NetworkConfig, mode: ExecMode) -> (CompiledGraph, CompiledGraph) {
    (
        compile_with(cfg, mode, DIMS, CompileOptions { hoist: true }).unwrap(),
        compile_with(cfg, mode, DIMS, CompileOptions { hoist: false }).unwrap(),
    )
}

pub fn run(g: &CompiledGraph, p: &ParamStore<f64>, b: &SeqBatch, opts: &ExecOptions) -> ExecOutput<f64> {
    execute_training_graph(g, b, p, opts).unwrap()
}

/// Largest relative error; panics above 1e-6.
pub fn assert_close(what: &str, a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "{what}");
    let mut worst = 0.0f64;
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        let e = relative_error(*x, *y);
        assert!(e <= 1e-6, "{what}[{i}]: {x} vs {y} (rel {e:e})");
        worst = worst.max(e);
    }
    worst
}

pub fn assert_training_equivalent(cfg: &NetworkConfig, mode: ExecMode, seed: u64) -> f64 {
    let mut worst = 0.0f64;
    let (hoisted, naive) = graphs(cfg, mode);
    assert_eq!(hoisted.param_manifest, naive.param_manifest);
    let p = ParamStore::<f64>::initialize(&hoisted.param_manifest, RngKey::new(seed, "init"));
    let b = batch();
    for dropout in [false, true] {
        let opts = ExecOptions { dropout, key: RngKey::new(seed, "batch"), loss: LossKind::SmoothedCe, label_smoothing: None };
        // Dropout masks are keyed by layer and step, so both schedules see the
        // same masks wherever a layer varies over steps.
        let x = run(&hoisted, &p, &b, &opts);
        let y = run(&naive, &p, &b, &opts);
        worst = worst.max(assert_close(&format!("loss {mode:?}"), &[x.loss_value()], &[y.loss_value()]));
        let gx = x.tape.backward(x.loss).unwrap().params();
        let gy = y.tape.backward(y.loss).unwrap().params();
        for (name, g) in &gx {
            worst = worst.max(assert_close(&format!("grad {name} {mode:?}"), g.data(), gy[name].data()));
        }
    }
    worst
}

pub fn assert_decode_equivalent(cfg: &NetworkConfig, seed: u64) -> f64 {
    let mut worst = 0.0f64;
    let (hoisted, naive) = graphs(cfg, ExecMode::Decode);
    let p = ParamStore::<f64>::initialize(&hoisted.param_manifest, RngKey::new(seed, "init"));
    let src = SeqBatch::sources_only(&[vec![4, 5, 6], vec![7, 8]], 3).unwrap();
    let beam = 2;
    let dh = Decoder::new(&hoisted, &p, Arc::clone(&src), beam).unwrap();
    let dn = Decoder::new(&naive, &p, Arc::clone(&src), beam).unwrap();
    let (mut sh, mut sn) = (dh.initial_state(), dn.initial_state());
    let mut rng = RngKey::new(seed, "feedback").rng();
    let mut fb = dh.initial_feedback();
    for _ in 0..4 {
        let (lh, nh) = step_decoder(&dh, &sh, &fb).unwrap();
        let (ln, nn) = step_decoder(&dn, &sn, &fb).unwrap();
        worst = worst.max(assert_close("decode log-probs", lh.data(), ln.data()));
        // Reorder rows like a beam step would, then feed random tokens.
        let rows: Vec<usize> = (0..dh.rows()).map(|r| (r / beam) * beam + rng.gen_range(0..beam)).collect();
        sh = nh.reorder(&rows).unwrap();
        sn = nn.reorder(&rows).unwrap();
        let toks: Vec<u32> = (0..dh.rows()).map(|_| rng.gen_range(0..DIMS.trg_vocab as u32)).collect();
        fb = Ids::new(&[(Axis::Batch, dh.rows())], toks).unwrap();
    }
    worst
}
