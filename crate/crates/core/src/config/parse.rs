use std::collections::BTreeMap;

use serde_json::{Map, Value};

use super::{
    validate_config, Activation, CombineKind, LayerClass, LayerRef, LayerSpec, NetworkConfig, Unit, DATA, LSTM_ALIASES,
};
use crate::error::{Error, Result};

/// Parses and validates a network document `{"network": {...}}`.
pub fn parse_network_config(text: &str) -> Result<NetworkConfig> {
    let cfg = parse_unvalidated(text)?;
    let diags = validate_config(&cfg);
    if !diags.is_empty() {
        return Err(Error::Invalid(diags.into_iter().map(|d| d.to_string()).collect()));
    }
    Ok(cfg)
}

/// Syntax, class and attribute checks only; reference and structure rules
/// are left to [`validate_config`].
pub fn parse_unvalidated(text: &str) -> Result<NetworkConfig> {
    let doc: Value = serde_json::from_str(text).map_err(|e| {
        Error::Config(format!("syntax error at line {}, column {}: {e}", e.line(), e.column()))
    })?;
    let network = doc
        .as_object()
        .and_then(|o| o.get("network"))
        .and_then(|n| n.as_object())
        .ok_or_else(|| Error::Config("expected a top-level object with a \"network\" object".into()))?;
    if let Some(extra) = doc.as_object().and_then(|o| o.keys().find(|k| *k != "network")) {
        return Err(Error::Config(format!("unknown top-level key `{extra}`")));
    }
    let layers = parse_layers(network, true)?;
    if layers.is_empty() {
        return Err(Error::Config("no layers".into()));
    }
    Ok(NetworkConfig { layers })
}

fn parse_layers(map: &Map<String, Value>, top: bool) -> Result<BTreeMap<String, LayerSpec>> {
    let mut out = BTreeMap::new();
    for (name, v) in map {
        if name == DATA || name.contains(':') || name.contains('/') || name.is_empty() {
            return Err(Error::Config(format!("invalid layer name `{name}`")));
        }
        let obj = v
            .as_object()
            .ok_or_else(|| Error::Config(format!("layer `{name}`: expected an object")))?;
        out.insert(name.clone(), parse_layer(name, obj, top)?);
    }
    Ok(out)
}

/// Attributes accepted per class, besides `class` and `from`.
fn allowed(class: LayerClass, subnetwork_unit: bool) -> &'static [&'static str] {
    use LayerClass::*;
    match class {
        Linear => &["n_out", "activation", "dropout", "initial_output"],
        Rec if subnetwork_unit => &["unit"],
        Rec => &["unit", "n_out", "direction", "dropout"],
        Copy => &["dropout", "initial_output"],
        Combine => &["kind", "activation", "dropout", "initial_output"],
        Activation => &["activation", "dropout", "initial_output"],
        SoftmaxOverSpatial => &["initial_output"],
        GenericAttention => &["weights", "base", "initial_output"],
        RnnCell => &["unit", "n_out", "dropout", "initial_output"],
        Choice => &["initial_output"],
        Softmax => &["n_out", "loss", "loss_opts", "dropout", "initial_output"],
        Decide => &["loss"],
        Subnetwork => &["unit"],
    }
}

fn required(class: LayerClass, subnetwork_unit: bool) -> &'static [&'static str] {
    use LayerClass::*;
    match class {
        Linear => &["n_out"],
        Rec if subnetwork_unit => &["unit"],
        Rec => &["unit", "n_out"],
        Combine => &["kind"],
        Activation => &["activation"],
        GenericAttention => &["weights", "base"],
        RnnCell => &["unit", "n_out"],
        Subnetwork => &["unit"],
        _ => &[],
    }
}

fn parse_layer(name: &str, obj: &Map<String, Value>, top: bool) -> Result<LayerSpec> {
    let err = |msg: String| Error::Config(format!("layer `{name}`: {msg}"));
    let class_str = obj
        .get("class")
        .ok_or_else(|| err("missing required attribute `class`".into()))?
        .as_str()
        .ok_or_else(|| err("`class` must be a string".into()))?;
    let class = LayerClass::parse(class_str).ok_or_else(|| err(format!("unknown class `{class_str}`")))?;
    let sub_unit = obj.get("unit").is_some_and(|u| u.is_object());
    let ok = allowed(class, sub_unit);
    for key in obj.keys() {
        if key != "class" && key != "from" && !ok.contains(&key.as_str()) {
            return Err(err(format!("unknown attribute `{key}` for class `{class}`")));
        }
    }
    for key in required(class, sub_unit) {
        if !obj.contains_key(*key) {
            return Err(err(format!("missing required attribute `{key}` for class `{class}`")));
        }
    }

    let mut spec = LayerSpec::new(name, class);
    spec.from = match obj.get("from") {
        None if top && !matches!(class, LayerClass::GenericAttention) && !sub_unit => vec![LayerRef::plain(DATA)],
        None => Vec::new(),
        Some(Value::String(s)) => vec![LayerRef::parse(s)],
        Some(Value::Array(items)) => items
            .iter()
            .map(|i| i.as_str().map(LayerRef::parse).ok_or_else(|| err("`from` entries must be strings".into())))
            .collect::<Result<_>>()?,
        Some(_) => return Err(err("`from` must be a string or a list of strings".into())),
    };
    if let Some(v) = obj.get("n_out") {
        let n = v.as_u64().filter(|&n| n > 0).ok_or_else(|| err("`n_out` must be a positive integer".into()))?;
        spec.n_out = Some(n as usize);
    }
    if let Some(v) = obj.get("unit") {
        spec.unit = Some(match v {
            Value::String(s) if LSTM_ALIASES.contains(&s.as_str()) => Unit::Lstm,
            Value::String(s) => return Err(err(format!("unknown unit `{s}`"))),
            Value::Object(m) if matches!(class, LayerClass::Rec | LayerClass::Subnetwork) => {
                if !top {
                    return Err(err("nested recurrent subnetworks are not supported".into()));
                }
                Unit::Subnetwork(parse_layers(m, false)?)
            }
            _ => return Err(err("`unit` must be a unit name or a layer map".into())),
        });
        if matches!(class, LayerClass::Subnetwork) && !sub_unit {
            return Err(err("`subnetwork` needs a layer map as `unit`".into()));
        }
    }
    if let Some(v) = obj.get("direction") {
        spec.direction = match v.as_i64() {
            Some(1) => 1,
            Some(-1) => -1,
            _ => return Err(err("`direction` must be 1 or -1".into())),
        };
    }
    if let Some(v) = obj.get("kind") {
        let s = v.as_str().ok_or_else(|| err("`kind` must be a string".into()))?;
        spec.kind = Some(CombineKind::parse(s).ok_or_else(|| err(format!("unknown combine kind `{s}`")))?);
    }
    if let Some(v) = obj.get("activation") {
        let s = v.as_str().ok_or_else(|| err("`activation` must be a string".into()))?;
        spec.activation = Some(Activation::parse(s).ok_or_else(|| err(format!("unknown activation `{s}`")))?);
    }
    if let Some(v) = obj.get("dropout") {
        let p = v.as_f64().filter(|p| (0.0..1.0).contains(p)).ok_or_else(|| err("`dropout` must be in [0, 1)".into()))?;
        spec.dropout = p;
    }
    if let Some(v) = obj.get("loss") {
        let s = v.as_str().ok_or_else(|| err("`loss` must be a string".into()))?;
        let ok = match class {
            LayerClass::Softmax => s == "ce",
            LayerClass::Decide => s == "bleu",
            _ => false,
        };
        if !ok {
            return Err(err(format!("unsupported loss `{s}` for class `{class}`")));
        }
        spec.loss = Some(s.to_string());
    }
    if let Some(v) = obj.get("loss_opts") {
        let m = v.as_object().ok_or_else(|| err("`loss_opts` must be an object".into()))?;
        for (k, val) in m {
            match k.as_str() {
                "label_smoothing" => {
                    let e = val
                        .as_f64()
                        .filter(|e| (0.0..1.0).contains(e))
                        .ok_or_else(|| err("`label_smoothing` must be in [0, 1)".into()))?;
                    spec.label_smoothing = Some(e);
                }
                other => return Err(err(format!("unknown loss option `{other}`"))),
            }
        }
    }
    if let Some(v) = obj.get("initial_output") {
        spec.initial_output = Some(v.as_f64().ok_or_else(|| err("`initial_output` must be a number".into()))?);
    }
    for key in ["weights", "base"] {
        if let Some(v) = obj.get(key) {
            let s = v.as_str().ok_or_else(|| err(format!("`{key}` must be a reference string")))?;
            let r = Some(LayerRef::parse(s));
            if key == "weights" {
                spec.weights = r;
            } else {
                spec.base = r;
            }
        }
    }
    Ok(spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RefKind;

    #[test]
    fn bidirectional_encoder_entry() {
        let cfg = parse_unvalidated(
            r#"{"network": {
                "src": {"class": "linear", "n_out": 620},
                "enc0_bw": {"class": "rec", "unit": "nativelstm2", "n_out": 1000, "direction": -1, "from": ["src"]}
            }}"#,
        )
        .unwrap();
        let l = &cfg.layers["enc0_bw"];
        assert_eq!(l.class, LayerClass::Rec);
        assert_eq!(l.unit, Some(Unit::Lstm));
        assert_eq!(l.n_out, Some(1000));
        assert_eq!(l.direction, -1);
        assert_eq!(l.from, vec![LayerRef::plain("src")]);
        assert_eq!(cfg.layers["src"].from, vec![LayerRef::plain(DATA)]);
    }

    #[test]
    fn empty_layer_map() {
        let e = parse_network_config(r#"{"network": {}}"#).unwrap_err();
        assert!(e.to_string().contains("no layers"), "{e}");
    }

    #[test]
    fn self_loop_without_prev_is_a_cycle() {
        let e = parse_network_config(r#"{"network": {"a": {"class": "linear", "from": ["a"], "n_out": 4}}}"#).unwrap_err();
        let msg = e.to_string();
        assert!(msg.contains("cycle") && msg.contains("`a`"), "{msg}");
    }

    #[test]
    fn syntax_error_reports_position() {
        let e = parse_network_config("{\"network\": {\n 'a': 1}}").unwrap_err();
        let msg = e.to_string();
        assert!(msg.contains("line 2"), "{msg}");
    }

    #[test]
    fn unknown_class_and_attribute() {
        let e = parse_network_config(r#"{"network": {"a": {"class": "conv"}}}"#).unwrap_err();
        assert!(e.to_string().contains("unknown class"));
        let e = parse_network_config(r#"{"network": {"a": {"class": "linear", "n_out": 3, "n_outt": 4}}}"#).unwrap_err();
        assert!(e.to_string().contains("unknown attribute `n_outt`"));
        let e = parse_network_config(r#"{"network": {"a": {"class": "linear"}}}"#).unwrap_err();
        assert!(e.to_string().contains("missing required attribute `n_out`"));
    }

    #[test]
    fn reference_prefixes() {
        assert_eq!(LayerRef::parse("prev:x").kind, RefKind::Prev);
        assert_eq!(LayerRef::parse("base:x").kind, RefKind::Base);
        assert_eq!(LayerRef::parse("x").kind, RefKind::Plain);
    }

    #[test]
    fn lstm_unit_aliases() {
        for u in ["lstm", "nativelstm2"] {
            let text = format!(r#"{{"network": {{"a": {{"class": "rec", "unit": "{u}", "n_out": 2}}}}}}"#);
            assert_eq!(parse_network_config(&text).unwrap().layers["a"].unit, Some(Unit::Lstm));
        }
        let e = parse_network_config(r#"{"network": {"a": {"class": "rec", "unit": "gru", "n_out": 2}}}"#).unwrap_err();
        assert!(e.to_string().contains("unknown unit"));
    }
}
