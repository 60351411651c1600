//! Declarative network description: a JSON layer dictionary.
//!
//! ```json
//! {"network": {
//!   "src": {"class": "linear", "n_out": 32},
//!   "enc": {"class": "rec", "unit": "lstm", "n_out": 32, "from": ["src"]},
//!   "output": {"class": "rec", "from": [], "unit": {
//!     "output": {"class": "choice", "from": ["prob"]},
//!     ...
//!   }}
//! }}
//! ```
//!
//! References are plain (`name`, same scope), recurrent (`prev:name`, the
//! previous decoder step inside the recurrent subnetwork) or cross-scope
//! (`base:name`, a top-level layer seen from inside the subnetwork).

mod deps;
mod parse;
mod validate;

pub use deps::{resolve_references, DepEdge, DepGraph, EdgeKind};
pub use parse::{parse_network_config, parse_unvalidated};
pub use validate::{validate_config, Diagnostic};

use std::collections::BTreeMap;
use std::fmt;

use serde_json::{json, Map, Value};

/// Name of the external input (source token ids).
pub const DATA: &str = "data";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LayerClass {
    Linear,
    Rec,
    Copy,
    Combine,
    Activation,
    SoftmaxOverSpatial,
    GenericAttention,
    RnnCell,
    Choice,
    Softmax,
    Decide,
    Subnetwork,
}

impl LayerClass {
    pub const ALL: [LayerClass; 12] = [
        LayerClass::Linear,
        LayerClass::Rec,
        LayerClass::Copy,
        LayerClass::Combine,
        LayerClass::Activation,
        LayerClass::SoftmaxOverSpatial,
        LayerClass::GenericAttention,
        LayerClass::RnnCell,
        LayerClass::Choice,
        LayerClass::Softmax,
        LayerClass::Decide,
        LayerClass::Subnetwork,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LayerClass::Linear => "linear",
            LayerClass::Rec => "rec",
            LayerClass::Copy => "copy",
            LayerClass::Combine => "combine",
            LayerClass::Activation => "activation",
            LayerClass::SoftmaxOverSpatial => "softmax_over_spatial",
            LayerClass::GenericAttention => "generic_attention",
            LayerClass::RnnCell => "rnn_cell",
            LayerClass::Choice => "choice",
            LayerClass::Softmax => "softmax",
            LayerClass::Decide => "decide",
            LayerClass::Subnetwork => "subnetwork",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.as_str() == s)
    }
}

impl fmt::Display for LayerClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum RefKind {
    Plain,
    Prev,
    Base,
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LayerRef {
    pub kind: RefKind,
    pub name: String,
}

impl LayerRef {
    pub fn parse(s: &str) -> Self {
        if let Some(n) = s.strip_prefix("prev:") {
            LayerRef { kind: RefKind::Prev, name: n.to_string() }
        } else if let Some(n) = s.strip_prefix("base:") {
            LayerRef { kind: RefKind::Base, name: n.to_string() }
        } else {
            LayerRef { kind: RefKind::Plain, name: s.to_string() }
        }
    }

    pub fn plain(name: &str) -> Self {
        LayerRef { kind: RefKind::Plain, name: name.to_string() }
    }
}

impl fmt::Display for LayerRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            RefKind::Plain => f.write_str(&self.name),
            RefKind::Prev => write!(f, "prev:{}", self.name),
            RefKind::Base => write!(f, "base:{}", self.name),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Activation {
    Identity,
    Tanh,
    Sigmoid,
    Relu,
    Exp,
    Log,
    /// `2·sigmoid(x)`: an inverse-fertility gate with range (0, 2).
    InvFertility,
}

impl Activation {
    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "identity" | "linear" => Activation::Identity,
            "tanh" => Activation::Tanh,
            "sigmoid" => Activation::Sigmoid,
            "relu" => Activation::Relu,
            "exp" => Activation::Exp,
            "log" => Activation::Log,
            "inv_fertility" => Activation::InvFertility,
            _ => return None,
        })
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Activation::Identity => "identity",
            Activation::Tanh => "tanh",
            Activation::Sigmoid => "sigmoid",
            Activation::Relu => "relu",
            Activation::Exp => "exp",
            Activation::Log => "log",
            Activation::InvFertility => "inv_fertility",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CombineKind {
    Add,
    Sub,
    Mul,
}

impl CombineKind {
    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "add" => CombineKind::Add,
            "sub" => CombineKind::Sub,
            "mul" => CombineKind::Mul,
            _ => return None,
        })
    }

    pub fn as_str(self) -> &'static str {
        match self {
            CombineKind::Add => "add",
            CombineKind::Sub => "sub",
            CombineKind::Mul => "mul",
        }
    }
}

/// `unit` of a `rec`/`rnn_cell` layer.
#[derive(Clone, Debug, PartialEq)]
pub enum Unit {
    /// LSTM step math. `nativelstm2` and `LSTMBlock` are aliases.
    Lstm,
    Subnetwork(BTreeMap<String, LayerSpec>),
}

pub(crate) const LSTM_ALIASES: [&str; 4] = ["lstm", "nativelstm2", "LSTMBlock", "lstmblock"];

#[derive(Clone, Debug, PartialEq)]
pub struct LayerSpec {
    pub name: String,
    pub class: LayerClass,
    pub from: Vec<LayerRef>,
    pub n_out: Option<usize>,
    pub unit: Option<Unit>,
    pub direction: i8,
    pub kind: Option<CombineKind>,
    pub activation: Option<Activation>,
    pub dropout: f64,
    pub loss: Option<String>,
    pub label_smoothing: Option<f64>,
    pub initial_output: Option<f64>,
    pub weights: Option<LayerRef>,
    pub base: Option<LayerRef>,
}

impl LayerSpec {
    pub fn new(name: &str, class: LayerClass) -> Self {
        LayerSpec {
            name: name.to_string(),
            class,
            from: Vec::new(),
            n_out: None,
            unit: None,
            direction: 1,
            kind: None,
            activation: None,
            dropout: 0.0,
            loss: None,
            label_smoothing: None,
            initial_output: None,
            weights: None,
            base: None,
        }
    }

    pub fn subnetwork(&self) -> Option<&BTreeMap<String, LayerSpec>> {
        match &self.unit {
            Some(Unit::Subnetwork(m)) => Some(m),
            _ => None,
        }
    }

    pub fn is_subnetwork(&self) -> bool {
        self.subnetwork().is_some()
    }

    /// Every reference this layer reads: `from`, then `weights` and `base`.
    pub fn inputs(&self) -> impl Iterator<Item = &LayerRef> {
        self.from.iter().chain(self.weights.iter()).chain(self.base.iter())
    }

    pub fn to_json(&self) -> Value {
        let mut m = Map::new();
        m.insert("class".into(), json!(self.class.as_str()));
        m.insert("from".into(), Value::Array(self.from.iter().map(|r| json!(r.to_string())).collect()));
        if let Some(n) = self.n_out {
            m.insert("n_out".into(), json!(n));
        }
        match &self.unit {
            Some(Unit::Lstm) => {
                m.insert("unit".into(), json!("lstm"));
            }
            Some(Unit::Subnetwork(sub)) => {
                m.insert("unit".into(), layers_to_json(sub));
            }
            None => {}
        }
        if matches!(self.class, LayerClass::Rec) && !self.is_subnetwork() {
            m.insert("direction".into(), json!(self.direction));
        }
        if let Some(k) = self.kind {
            m.insert("kind".into(), json!(k.as_str()));
        }
        if let Some(a) = self.activation {
            m.insert("activation".into(), json!(a.as_str()));
        }
        if self.dropout != 0.0 {
            m.insert("dropout".into(), json!(self.dropout));
        }
        if let Some(l) = &self.loss {
            m.insert("loss".into(), json!(l));
        }
        if let Some(e) = self.label_smoothing {
            m.insert("loss_opts".into(), json!({ "label_smoothing": e }));
        }
        if let Some(v) = self.initial_output {
            m.insert("initial_output".into(), json!(v));
        }
        if let Some(w) = &self.weights {
            m.insert("weights".into(), json!(w.to_string()));
        }
        if let Some(b) = &self.base {
            m.insert("base".into(), json!(b.to_string()));
        }
        Value::Object(m)
    }
}

fn layers_to_json(layers: &BTreeMap<String, LayerSpec>) -> Value {
    Value::Object(layers.iter().map(|(k, v)| (k.clone(), v.to_json())).collect())
}

/// Parsed network: top-level layers, at most one of which is a recurrent
/// subnetwork.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    pub layers: BTreeMap<String, LayerSpec>,
}

impl NetworkConfig {
    /// Name of the recurrent subnetwork layer, if any.
    pub fn rec_layer(&self) -> Option<&LayerSpec> {
        self.layers.values().find(|l| l.is_subnetwork())
    }

    pub fn subnetwork(&self) -> Option<&BTreeMap<String, LayerSpec>> {
        self.rec_layer().and_then(|l| l.subnetwork())
    }

    pub fn to_json(&self) -> Value {
        json!({ "network": layers_to_json(&self.layers) })
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(&self.to_json()).expect("config serializes")
    }

    /// Stable content hash of the canonical serialization.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let bytes = serde_json::to_vec(&self.to_json()).expect("config serializes");
        let d = Sha256::digest(&bytes);
        d.iter().take(16).map(|b| format!("{b:02x}")).collect()
    }
}
