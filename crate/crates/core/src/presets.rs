//! Ready-made network descriptions: a bidirectional LSTM encoder with an
//! attention decoder, at any size.

use serde_json::{json, Map, Value};

use crate::config::{parse_network_config, NetworkConfig};
use crate::error::Result;

/// The attention encoder-decoder. `enc_layers` bidirectional LSTM pairs feed
/// an MLP-attention LSTM decoder with accumulated-attention feedback.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionModel {
    pub src_emb: usize,
    pub trg_emb: usize,
    pub enc_layers: usize,
    pub enc_hidden: usize,
    pub dec_hidden: usize,
    pub att_dim: usize,
    pub readout: usize,
    /// Dropout on the output softmax input.
    pub dropout: f64,
    pub label_smoothing: f64,
    /// Scale the accumulated attention by a learned per-position gate in (0, 2).
    pub fertility: bool,
    /// Project the encoder keys inside the decoder (from `base:encoder`)
    /// instead of in a top-level layer. Same model; without hoisting the
    /// projection is recomputed at every step.
    pub keys_in_decoder: bool,
}

impl AttentionModel {
    /// The large configuration (620-dim embeddings, 1000-dim LSTMs, 6 encoder layers).
    pub fn wmt() -> Self {
        AttentionModel {
            src_emb: 620,
            trg_emb: 620,
            enc_layers: 6,
            enc_hidden: 1000,
            dec_hidden: 1000,
            att_dim: 1000,
            readout: 1000,
            dropout: 0.3,
            label_smoothing: 0.1,
            fertility: false,
            keys_in_decoder: false,
        }
    }

    /// Every width set to `h`, embeddings to `h / 2` (at least 2).
    pub fn small(h: usize, enc_layers: usize) -> Self {
        let e = (h / 2).max(2);
        AttentionModel {
            src_emb: e,
            trg_emb: e,
            enc_layers,
            enc_hidden: h,
            dec_hidden: h,
            att_dim: h,
            readout: h,
            dropout: 0.0,
            label_smoothing: 0.0,
            fertility: false,
            keys_in_decoder: false,
        }
    }

    pub fn to_json(&self) -> Value {
        let mut net = Map::new();
        net.insert("src".into(), json!({"class": "linear", "n_out": self.src_emb}));
        for i in 0..self.enc_layers {
            let from = if i == 0 { json!(["src"]) } else { json!([format!("enc{}_fw", i - 1), format!("enc{}_bw", i - 1)]) };
            for (suffix, dir) in [("fw", 1), ("bw", -1)] {
                net.insert(
                    format!("enc{i}_{suffix}"),
                    json!({"class": "rec", "unit": "nativelstm2", "n_out": self.enc_hidden, "direction": dir, "from": from.clone()}),
                );
            }
        }
        let last = self.enc_layers.max(1) - 1;
        let enc_from = if self.enc_layers == 0 { json!(["src"]) } else { json!([format!("enc{last}_fw"), format!("enc{last}_bw")]) };
        net.insert("encoder".into(), json!({"class": "copy", "from": enc_from}));

        let mut sub = Map::new();
        let (ctx_ref, fert_ref) = if self.keys_in_decoder {
            sub.insert("enc_ctx".into(), json!({"class": "linear", "from": ["base:encoder"], "n_out": self.att_dim}));
            ("enc_ctx", "inv_fertility")
        } else {
            net.insert("enc_ctx".into(), json!({"class": "linear", "from": ["encoder"], "n_out": self.att_dim}));
            ("base:enc_ctx", "base:inv_fertility")
        };
        let feedback_src = if self.fertility {
            let gate = json!({"class": "linear", "activation": "inv_fertility", "from": ["encoder"], "n_out": 1});
            if self.keys_in_decoder {
                let mut g = gate;
                g["from"] = json!(["base:encoder"]);
                sub.insert("inv_fertility".into(), g);
            } else {
                net.insert("inv_fertility".into(), gate);
            }
            sub.insert("accum_scaled".into(), json!({"class": "combine", "kind": "mul", "from": ["prev:accum_a", fert_ref]}));
            "accum_scaled"
        } else {
            "prev:accum_a"
        };
        sub.insert("output".into(), json!({"class": "choice", "from": ["output_prob"]}));
        sub.insert("trg".into(), json!({"class": "linear", "from": ["output"], "n_out": self.trg_emb, "initial_output": 0}));
        sub.insert("weight_feedback".into(), json!({"class": "linear", "from": [feedback_src], "n_out": self.att_dim}));
        sub.insert("s_tr".into(), json!({"class": "linear", "from": ["s"], "n_out": self.att_dim}));
        sub.insert("e_in".into(), json!({"class": "combine", "kind": "add", "from": [ctx_ref, "weight_feedback", "s_tr"]}));
        sub.insert("e_tanh".into(), json!({"class": "activation", "activation": "tanh", "from": ["e_in"]}));
        sub.insert("e".into(), json!({"class": "linear", "from": ["e_tanh"], "n_out": 1}));
        sub.insert("a".into(), json!({"class": "softmax_over_spatial", "from": ["e"]}));
        sub.insert("accum_a".into(), json!({"class": "combine", "kind": "add", "from": ["prev:accum_a", "a"]}));
        sub.insert("att".into(), json!({"class": "generic_attention", "weights": "a", "base": "base:encoder"}));
        sub.insert("s".into(), json!({"class": "rnn_cell", "unit": "LSTMBlock", "from": ["prev:trg", "prev:att"], "n_out": self.dec_hidden}));
        sub.insert(
            "readout".into(),
            json!({"class": "linear", "activation": "relu", "from": ["s", "prev:trg", "att"], "n_out": self.readout}),
        );
        let mut prob = json!({"class": "softmax", "from": ["readout"], "loss": "ce"});
        if self.dropout > 0.0 {
            prob["dropout"] = json!(self.dropout);
        }
        if self.label_smoothing > 0.0 {
            prob["loss_opts"] = json!({"label_smoothing": self.label_smoothing});
        }
        sub.insert("output_prob".into(), prob);
        net.insert("output".into(), json!({"class": "rec", "from": [], "unit": Value::Object(sub)}));
        net.insert("decision".into(), json!({"class": "decide", "from": ["output"], "loss": "bleu"}));
        json!({ "network": Value::Object(net) })
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(&self.to_json()).expect("serializes")
    }

    pub fn config(&self) -> Result<NetworkConfig> {
        parse_network_config(&self.to_json_string())
    }
}
