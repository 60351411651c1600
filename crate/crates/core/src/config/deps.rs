use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use super::{NetworkConfig, RefKind, DATA};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EdgeKind {
    Plain,
    Prev,
    Base,
}

/// `from` is read by `to`. Names are qualified: top-level layers by name,
/// subnetwork layers as `rec/name`.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct DepEdge {
    pub from: String,
    pub to: String,
    pub kind: EdgeKind,
}

impl fmt::Display for DepEdge {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let k = match self.kind {
            EdgeKind::Plain => "",
            EdgeKind::Prev => "prev:",
            EdgeKind::Base => "base:",
        };
        write!(f, "{k}{} -> {}", self.from, self.to)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DepGraph {
    pub rec: Option<String>,
    pub edges: Vec<DepEdge>,
    /// Top-level layers in dependency order (the recurrent layer after
    /// everything its subnetwork reads through `base:`).
    pub top_order: Vec<String>,
    /// Subnetwork layers ordered by plain edges.
    pub sub_order: Vec<String>,
}

impl DepGraph {
    pub fn qualify(&self, sub: bool, name: &str) -> String {
        match (&self.rec, sub) {
            (Some(r), true) => format!("{r}/{name}"),
            _ => name.to_string(),
        }
    }

    pub fn edges_into<'a>(&'a self, node: &'a str) -> impl Iterator<Item = &'a DepEdge> + 'a {
        self.edges.iter().filter(move |e| e.to == node)
    }
}

/// Builds the labeled dependency graph and deterministic topological orders
/// (ties broken by layer name).
pub fn resolve_references(cfg: &NetworkConfig) -> Result<DepGraph> {
    let rec = cfg.rec_layer().map(|l| l.name.clone());
    let q = |sub: bool, n: &str| match (&rec, sub) {
        (Some(r), true) => format!("{r}/{n}"),
        _ => n.to_string(),
    };
    let mut edges = Vec::new();
    let mut top_extra: Vec<(String, String)> = Vec::new();
    for l in cfg.layers.values() {
        for r in l.inputs() {
            if r.kind != RefKind::Plain {
                return Err(Error::Config(format!("layer `{}`: `{r}` outside the subnetwork", l.name)));
            }
            if r.name == DATA {
                continue;
            }
            if !cfg.layers.contains_key(&r.name) {
                return Err(Error::Config(format!("layer `{}`: unresolved reference `{r}`", l.name)));
            }
            edges.push(DepEdge { from: r.name.clone(), to: l.name.clone(), kind: EdgeKind::Plain });
        }
    }
    let sub = cfg.subnetwork();
    if let (Some(sub), Some(rec_name)) = (sub, &rec) {
        for l in sub.values() {
            for r in l.inputs() {
                let (kind, from) = match r.kind {
                    RefKind::Plain | RefKind::Prev if sub.contains_key(&r.name) => {
                        let k = if r.kind == RefKind::Plain { EdgeKind::Plain } else { EdgeKind::Prev };
                        (k, q(true, &r.name))
                    }
                    RefKind::Base if cfg.layers.contains_key(&r.name) => {
                        top_extra.push((r.name.clone(), rec_name.clone()));
                        (EdgeKind::Base, r.name.clone())
                    }
                    RefKind::Base if r.name == DATA => continue,
                    _ => {
                        return Err(Error::Config(format!(
                            "layer `{}`: unresolved reference `{r}`",
                            q(true, &l.name)
                        )))
                    }
                };
                edges.push(DepEdge { from, to: q(true, &l.name), kind });
            }
        }
    }
    edges.sort();
    edges.dedup();

    let mut top_edges: Vec<(String, String)> = edges
        .iter()
        .filter(|e| e.kind == EdgeKind::Plain && cfg.layers.contains_key(&e.to))
        .map(|e| (e.from.clone(), e.to.clone()))
        .collect();
    top_edges.extend(top_extra);
    let top_order = topo_order(cfg.layers.keys().cloned(), &top_edges)?;
    let sub_order = match sub {
        Some(sub) => {
            let prefix = format!("{}/", rec.as_deref().unwrap_or_default());
            let sub_edges: Vec<(String, String)> = edges
                .iter()
                .filter(|e| e.kind == EdgeKind::Plain && e.to.starts_with(&prefix))
                .map(|e| (e.from[prefix.len()..].to_string(), e.to[prefix.len()..].to_string()))
                .collect();
            topo_order(sub.keys().cloned(), &sub_edges)?
        }
        None => Vec::new(),
    };
    Ok(DepGraph { rec, edges, top_order, sub_order })
}

fn topo_order(nodes: impl Iterator<Item = String>, edges: &[(String, String)]) -> Result<Vec<String>> {
    let mut indeg: BTreeMap<String, usize> = nodes.map(|n| (n, 0)).collect();
    let mut succ: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for (a, b) in edges {
        *indeg.get_mut(b).ok_or_else(|| Error::Config(format!("unknown layer `{b}`")))? += 1;
        succ.entry(a.as_str()).or_default().push(b.as_str());
    }
    let mut ready: BTreeSet<String> = indeg.iter().filter(|e| *e.1 == 0).map(|e| e.0.clone()).collect();
    let mut order = Vec::with_capacity(indeg.len());
    while let Some(n) = ready.pop_first() {
        for &s in succ.get(n.as_str()).into_iter().flatten() {
            let d = indeg.get_mut(s).expect("known");
            *d -= 1;
            if *d == 0 {
                ready.insert(s.to_string());
            }
        }
        order.push(n);
    }
    if order.len() != indeg.len() {
        let stuck: Vec<String> = indeg.into_iter().filter(|e| e.1 > 0).map(|e| e.0).collect();
        return Err(Error::Config(format!("cycle through plain references involving `{}`", stuck.join("`, `"))));
    }
    Ok(order)
}
