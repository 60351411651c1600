use proptest::prelude::*;
use recgraph::config::{
    parse_network_config, parse_unvalidated, resolve_references, validate_config, DepEdge, EdgeKind, LayerClass, NetworkConfig, Unit,
};
use recgraph::presets::AttentionModel;
use serde_json::json;

fn listing_text() -> String {
    std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/configs/attention_wmt.json")).unwrap()
}

fn listing() -> NetworkConfig {
    parse_network_config(&listing_text()).unwrap()
}

fn net(v: serde_json::Value) -> String {
    json!({ "network": v }).to_string()
}

fn edge(from: &str, to: &str, kind: EdgeKind) -> DepEdge {
    DepEdge { from: from.into(), to: to.into(), kind }
}

#[test]
fn backward_encoder_layer_of_the_listing() {
    let cfg = listing();
    let l = &cfg.layers["enc0_bw"];
    assert_eq!(l.class, LayerClass::Rec);
    assert_eq!(l.unit, Some(Unit::Lstm));
    assert_eq!(l.n_out, Some(1000));
    assert_eq!(l.direction, -1);
    assert_eq!(l.from.len(), 1);
    assert_eq!(l.from[0].name, "src");
}

#[test]
fn defaults_are_filled() {
    let cfg = parse_network_config(&net(json!({"a": {"class": "linear", "n_out": 3}}))).unwrap();
    let a = &cfg.layers["a"];
    assert_eq!(a.direction, 1);
    assert_eq!(a.dropout, 0.0);
    assert_eq!(a.initial_output, None);
}

#[test]
fn listing_file_matches_the_preset() {
    assert_eq!(listing(), AttentionModel::wmt().config().unwrap());
}

#[test]
fn empty_layer_map_is_rejected() {
    let e = parse_network_config(&net(json!({}))).unwrap_err();
    assert!(e.to_string().contains("no layers"), "{e}");
}

#[test]
fn self_loop_is_a_cycle_naming_the_layer() {
    let e = parse_network_config(&net(json!({"a": {"class": "linear", "from": ["a"], "n_out": 4}}))).unwrap_err();
    let m = e.to_string();
    assert!(m.contains("cycle") && m.contains("`a`"), "{m}");
}

#[test]
fn single_quoted_documents_are_rejected_with_position() {
    let e = parse_network_config("{'network': {}}").unwrap_err();
    let m = e.to_string();
    assert!(m.contains("line 1") && m.contains("column"), "{m}");
}

#[test]
fn unknown_class_attribute_and_missing_n_out() {
    for (layer, needle) in [
        (json!({"class": "conv"}), "unknown class"),
        (json!({"class": "linear", "n_out": 2, "size": 3}), "unknown attribute `size`"),
        (json!({"class": "softmax", "n_out": 2, "direction": -1}), "unknown attribute `direction`"),
        (json!({"class": "linear"}), "missing required attribute `n_out`"),
        (json!({"class": "rec", "unit": "lstm"}), "missing required attribute `n_out`"),
        (json!({"class": "linear", "n_out": 0}), "n_out"),
    ] {
        let e = parse_network_config(&net(json!({ "a": layer }))).unwrap_err();
        assert!(e.to_string().contains(needle), "{e} lacks {needle}");
    }
}

#[test]
fn rnn_cell_unit_aliases_share_the_lstm_step() {
    let cfg = listing();
    let sub = cfg.subnetwork().unwrap();
    assert_eq!(sub["s"].class, LayerClass::RnnCell);
    assert_eq!(sub["s"].unit, Some(Unit::Lstm));
}

#[test]
fn nested_subnetworks_are_rejected() {
    let inner = json!({"output": {"class": "softmax", "from": ["base:x"], "n_out": 2}});
    let outer = json!({
        "x": {"class": "linear", "n_out": 2},
        "output": {"class": "rec", "from": [], "unit": {
            "inner": {"class": "rec", "from": [], "unit": inner},
            "output": {"class": "softmax", "from": ["inner"], "n_out": 2},
        }},
    });
    assert!(parse_network_config(&net(outer)).is_err());
}

#[test]
fn listing_validates_cleanly() {
    assert!(validate_config(&listing()).is_empty());
}

fn tiny_decoder(choice: bool) -> serde_json::Value {
    let mut sub = json!({
        "s": {"class": "rnn_cell", "unit": "LSTMBlock", "from": ["prev:output", "base:enc"], "n_out": 4},
        "output_prob": {"class": "softmax", "from": ["s"], "n_out": 5, "loss": "ce"},
    });
    if choice {
        sub["output"] = json!({"class": "choice", "from": ["output_prob"], "initial_output": 0});
    } else {
        sub["output"] = json!({"class": "copy", "from": ["output_prob"]});
    }
    json!({
        "src": {"class": "linear", "n_out": 3},
        "enc": {"class": "rec", "unit": "lstm", "n_out": 4, "from": ["src"]},
        "output": {"class": "rec", "from": [], "unit": sub},
    })
}

#[test]
fn missing_choice_layer_is_diagnosed() {
    let cfg = parse_unvalidated(&net(tiny_decoder(false))).unwrap();
    let d = validate_config(&cfg);
    assert!(d.iter().any(|d| d.message.contains("no choice layer")), "{d:?}");
    assert!(parse_network_config(&net(tiny_decoder(true))).is_ok());
}

#[test]
fn base_reference_at_top_level_is_diagnosed() {
    let cfg = parse_unvalidated(&net(json!({
        "a": {"class": "linear", "n_out": 2},
        "b": {"class": "linear", "n_out": 2, "from": ["base:a"]},
    })))
    .unwrap();
    let d = validate_config(&cfg);
    assert!(d.iter().any(|d| d.layer == "b" && d.message.contains("base reference outside subnetwork")), "{d:?}");
}

#[test]
fn accumulated_attention_edges() {
    let g = resolve_references(&listing()).unwrap();
    let into: Vec<&DepEdge> = g.edges_into("output/accum_a").collect();
    assert!(into.contains(&&edge("output/accum_a", "output/accum_a", EdgeKind::Prev)), "{into:?}");
    assert!(into.contains(&&edge("output/a", "output/accum_a", EdgeKind::Plain)), "{into:?}");
    assert_eq!(into.len(), 2);
    let wf: Vec<&DepEdge> = g.edges_into("output/weight_feedback").collect();
    assert_eq!(wf, vec![&edge("output/accum_a", "output/weight_feedback", EdgeKind::Prev)]);
}

#[test]
fn independent_layers_are_ordered_by_name() {
    let cfg = parse_network_config(&net(json!({
        "zeta": {"class": "linear", "n_out": 2},
        "alpha": {"class": "linear", "n_out": 2},
    })))
    .unwrap();
    let g = resolve_references(&cfg).unwrap();
    assert!(g.edges.is_empty());
    assert_eq!(g.top_order, vec!["alpha", "zeta"]);
}

#[test]
fn chain_is_ordered_topologically() {
    let cfg = parse_network_config(&net(json!({
        "c": {"class": "linear", "n_out": 2, "from": ["b"]},
        "b": {"class": "linear", "n_out": 2, "from": ["a"]},
        "a": {"class": "linear", "n_out": 2},
    })))
    .unwrap();
    assert_eq!(resolve_references(&cfg).unwrap().top_order, vec!["a", "b", "c"]);
}

#[test]
fn listing_round_trips() {
    let cfg = listing();
    assert_eq!(parse_network_config(&cfg.to_json_string()).unwrap(), cfg);
}

/// Random feed-forward stack: layer `i` reads a subset of earlier layers.
/// Names are shuffled so that name order and dependency order disagree.
fn random_dag() -> impl Strategy<Value = serde_json::Value> {
    (2usize..9)
        .prop_flat_map(|n| {
            let reads = proptest::collection::vec(proptest::collection::vec(any::<bool>(), n), n);
            (Just(n), reads, Just((0..n).collect::<Vec<_>>()).prop_shuffle(), proptest::collection::vec(1usize..5, n))
        })
        .prop_map(|(n, reads, perm, widths)| {
            let name = |i: usize| format!("l{}", perm[i]);
            let mut layers = serde_json::Map::new();
            for i in 0..n {
                let from: Vec<String> = (0..i).filter(|&j| reads[i][j]).map(name).collect();
                let class = if i % 3 == 2 { json!({"class": "activation", "activation": "tanh"}) } else { json!({"class": "linear", "n_out": widths[i]}) };
                let mut l = class;
                if !from.is_empty() {
                    l["from"] = json!(from);
                }
                layers.insert(name(i), l);
            }
            serde_json::Value::Object(layers)
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn topological_order_is_a_linear_extension(layers in random_dag()) {
        let cfg = parse_network_config(&net(layers)).unwrap();
        let g = resolve_references(&cfg).unwrap();
        let pos = |n: &str| g.top_order.iter().position(|x| x == n).unwrap();
        prop_assert_eq!(g.top_order.len(), cfg.layers.len());
        for e in g.edges.iter().filter(|e| e.kind == EdgeKind::Plain) {
            prop_assert!(pos(&e.from) < pos(&e.to), "{} before {}", e.from, e.to);
        }
    }

    #[test]
    fn parse_serialize_parse_is_idempotent(layers in random_dag()) {
        let cfg = parse_network_config(&net(layers)).unwrap();
        let again = parse_network_config(&cfg.to_json_string()).unwrap();
        prop_assert_eq!(&again, &cfg);
        prop_assert_eq!(again.hash(), cfg.hash());
    }

    #[test]
    fn preset_variants_round_trip(h in 1usize..8, layers in 1usize..4, fertility in any::<bool>(), keys in any::<bool>()) {
        let m = AttentionModel { fertility, keys_in_decoder: keys, ..AttentionModel::small(h, layers) };
        let cfg = m.config().unwrap();
        prop_assert_eq!(parse_network_config(&cfg.to_json_string()).unwrap(), cfg);
    }

    #[test]
    fn every_diagnostic_names_a_present_layer(
        layers in random_dag(),
        bad in proptest::collection::vec((0usize..9, 0u8..3), 1..4),
    ) {
        // Corrupt some references: unknown names, top-level prev: and base:.
        let mut v = layers;
        let names: Vec<String> = v.as_object().unwrap().keys().cloned().collect();
        for (i, kind) in bad {
            let target = &names[i % names.len()];
            let r = match kind { 0 => "missing".to_string(), 1 => format!("prev:{}", names[0]), _ => format!("base:{}", names[0]) };
            let layer = v.get_mut(target).unwrap();
            let mut from = layer.get("from").cloned().unwrap_or(json!([]));
            from.as_array_mut().unwrap().push(json!(r));
            layer["from"] = from;
        }
        let cfg = parse_unvalidated(&net(v)).unwrap();
        let diags = validate_config(&cfg);
        prop_assert!(!diags.is_empty());
        for d in diags {
            let top = d.layer.split('/').next().unwrap();
            prop_assert!(cfg.layers.contains_key(top), "{}", d);
        }
    }
}
