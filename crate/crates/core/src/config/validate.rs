use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use super::{LayerClass, LayerSpec, NetworkConfig, RefKind, Unit, DATA};

/// A structural problem, attributed to one layer (`rec/name` for layers of
/// the recurrent subnetwork).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Diagnostic {
    pub layer: String,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "`{}`: {}", self.layer, self.message)
    }
}

/// Checks reference scoping, subnetwork structure and acyclicity. Returns an
/// empty list for a well-formed network.
pub fn validate_config(cfg: &NetworkConfig) -> Vec<Diagnostic> {
    let mut diags = Vec::new();
    let mut push = |layer: String, message: String| diags.push(Diagnostic { layer, message });

    let recs: Vec<&LayerSpec> = cfg.layers.values().filter(|l| l.is_subnetwork()).collect();
    for extra in recs.iter().skip(1) {
        push(extra.name.clone(), "more than one recurrent subnetwork".into());
    }
    let rec_name = recs.first().map(|l| l.name.clone());

    for l in cfg.layers.values() {
        for r in l.inputs() {
            match r.kind {
                RefKind::Base => push(l.name.clone(), format!("base reference outside subnetwork: `{r}`")),
                RefKind::Prev => push(l.name.clone(), format!("prev reference outside subnetwork: `{r}`")),
                RefKind::Plain if r.name != DATA && !cfg.layers.contains_key(&r.name) => {
                    push(l.name.clone(), format!("unknown layer `{}`", r.name))
                }
                RefKind::Plain => {}
            }
        }
        match l.class {
            LayerClass::Choice | LayerClass::RnnCell | LayerClass::SoftmaxOverSpatial | LayerClass::GenericAttention => {
                push(l.name.clone(), format!("class `{}` is only valid inside the recurrent subnetwork", l.class))
            }
            LayerClass::Softmax if l.loss.is_some() => {
                push(l.name.clone(), "losses are only supported inside the recurrent subnetwork".into())
            }
            _ => {}
        }
        if l.is_subnetwork() && l.from.iter().any(|r| r.name != DATA) {
            push(l.name.clone(), "the recurrent subnetwork takes no `from` inputs".into());
        }
    }
    for name in cycle_members(&cfg.layers, |r| r.kind == RefKind::Plain) {
        push(name.clone(), format!("cycle through plain references involving `{name}`"));
    }

    let Some(rec_name) = rec_name else { return diags };
    let sub = cfg.layers[&rec_name].subnetwork().expect("is a subnetwork");
    let path = |n: &str| format!("{rec_name}/{n}");
    let depends_on_rec = dependents(&cfg.layers, &rec_name);

    let choices: Vec<&LayerSpec> = sub.values().filter(|l| l.class == LayerClass::Choice).collect();
    if choices.is_empty() {
        push(rec_name.clone(), "no choice layer".into());
    }
    for c in choices.iter().skip(1) {
        push(path(&c.name), "more than one choice layer".into());
    }
    if !sub.contains_key("output") {
        push(rec_name.clone(), "subnetwork has no layer named `output`".into());
    }
    for l in sub.values() {
        for r in l.inputs() {
            let ok = match r.kind {
                RefKind::Plain | RefKind::Prev => sub.contains_key(&r.name),
                RefKind::Base => cfg.layers.contains_key(&r.name) || r.name == DATA,
            };
            if !ok {
                push(path(&l.name), format!("unknown layer `{r}`"));
            } else if r.kind == RefKind::Base && (r.name == rec_name || depends_on_rec.contains(&r.name)) {
                push(path(&l.name), format!("`{r}` depends on the recurrent subnetwork itself"));
            }
        }
        match (&l.class, &l.unit) {
            (LayerClass::Rec, Some(Unit::Lstm)) => {
                push(path(&l.name), "use `rnn_cell` for recurrent units inside the subnetwork".into())
            }
            (LayerClass::Decide, _) => push(path(&l.name), "`decide` is only valid at top level".into()),
            (LayerClass::Choice, _) => {
                let from_softmax = l.from.len() == 1
                    && l.from[0].kind == RefKind::Plain
                    && sub.get(&l.from[0].name).is_some_and(|s| s.class == LayerClass::Softmax);
                if !from_softmax {
                    push(path(&l.name), "a choice layer reads exactly one softmax layer".into());
                }
            }
            (LayerClass::GenericAttention, _) if !l.from.is_empty() => {
                push(path(&l.name), "generic_attention takes `weights` and `base`, not `from`".into())
            }
            _ => {}
        }
    }
    for name in cycle_members(sub, |r| r.kind == RefKind::Plain) {
        push(path(&name), format!("cycle through plain references involving `{name}`"));
    }
    diags
}

/// Layers on a cycle of edges accepted by `follow`, in name order.
fn cycle_members(layers: &BTreeMap<String, LayerSpec>, follow: impl Fn(&super::LayerRef) -> bool) -> Vec<String> {
    let mut indeg: BTreeMap<&str, usize> = layers.keys().map(|k| (k.as_str(), 0)).collect();
    let mut succ: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for l in layers.values() {
        for r in l.inputs().filter(|r| follow(r)) {
            if let Some((src, _)) = layers.get_key_value(&r.name) {
                *indeg.get_mut(l.name.as_str()).expect("known") += 1;
                succ.entry(src.as_str()).or_default().push(l.name.as_str());
            }
        }
    }
    let mut ready: Vec<&str> = indeg.iter().filter(|e| *e.1 == 0).map(|e| *e.0).collect();
    while let Some(n) = ready.pop() {
        for &s in succ.get(n).into_iter().flatten() {
            let d = indeg.get_mut(s).expect("known");
            *d -= 1;
            if *d == 0 {
                ready.push(s);
            }
        }
    }
    indeg.into_iter().filter(|e| e.1 > 0).map(|e| e.0.to_string()).collect()
}

/// Top-level layers that (transitively) read `root`.
fn dependents(layers: &BTreeMap<String, LayerSpec>, root: &str) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    let mut changed = true;
    while changed {
        changed = false;
        for l in layers.values() {
            if out.contains(&l.name) {
                continue;
            }
            if l.inputs().any(|r| r.name == root || out.contains(&r.name)) {
                out.insert(l.name.clone());
                changed = true;
            }
        }
    }
    out
}
