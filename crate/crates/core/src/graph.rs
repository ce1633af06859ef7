//! Parse-graph transformation passes: transitive reduction, level
//! computation, longest-path extraction and pipeline balancing.
//!
//! All passes are pure functions over immutable graphs; levels are longest
//! distances from the root so that every node's level is final before the
//! balancing step rewires spare edges.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::model::{find_cycle, ParseGraph, END_NODE};

#[derive(Debug, Error)]
pub enum TransformError {
    #[error("graph is not acyclic: {}", cycle.join(" -> "))]
    Cyclic { cycle: Vec<String> },
    #[error("node `{0}` has no level (unreachable from root?)")]
    MissingLevel(String),
}

/// Balanced pipeline graph: rewritten edges plus the level map and the
/// longest root-to-END path the layout is organized around.
#[derive(Debug, Clone)]
pub struct LeveledGraph {
    pub base: ParseGraph,
    pub level: BTreeMap<String, u32>,
    pub longest_path: Vec<String>,
}

/// Unique minimal edge subset with the same reachability as `g`. Nodes are
/// unchanged.
pub fn transitive_reduction(g: &ParseGraph) -> Result<ParseGraph, TransformError> {
    if let Some(cycle) = find_cycle(g) {
        return Err(TransformError::Cyclic { cycle });
    }
    let reach = reachability(g);
    let mut edges = BTreeSet::new();
    for (u, v) in &g.edges {
        // (u, v) is redundant when v is reachable through another successor
        let redundant = g
            .successors(u)
            .filter(|&w| w != v)
            .any(|w| reach[w].contains(v.as_str()));
        if !redundant {
            edges.insert((u.clone(), v.clone()));
        }
    }
    Ok(g.with_edges(edges))
}

/// Reflexive-transitive closure per node.
fn reachability(g: &ParseGraph) -> BTreeMap<&str, BTreeSet<&str>> {
    let order = g.topo_order();
    let mut reach: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    for n in order.iter().rev() {
        let n = find_name(g, n);
        let mut set: BTreeSet<&str> = BTreeSet::new();
        set.insert(n);
        for s in g.successors(n) {
            set.insert(s);
            if let Some(r) = reach.get(s) {
                set.extend(r.iter().copied());
            }
        }
        reach.insert(n, set);
    }
    reach
}

fn find_name<'a>(g: &'a ParseGraph, n: &str) -> &'a str {
    g.states
        .keys()
        .find(|k| k.as_str() == n)
        .map(|k| k.as_str())
        .unwrap_or(END_NODE)
}

/// Level of every node: the length of the longest path from the root.
pub fn compute_levels(g: &ParseGraph) -> BTreeMap<String, u32> {
    let mut level: BTreeMap<String, u32> = BTreeMap::new();
    level.insert(g.root.clone(), 0);
    for n in g.topo_order() {
        let Some(&ln) = level.get(&n) else {
            continue; // not reachable from root
        };
        for s in g.successors(&n) {
            let e = level.entry(s.to_string()).or_insert(0);
            *e = (*e).max(ln + 1);
        }
    }
    level
}

/// One root-to-END path of maximal length. Ties break toward the
/// lexicographically smallest successor so layouts are reproducible.
pub fn longest_path(
    g: &ParseGraph,
    levels: &BTreeMap<String, u32>,
) -> Result<Vec<String>, TransformError> {
    // distance to END, over reverse topological order
    let mut to_end: BTreeMap<String, u32> = BTreeMap::new();
    to_end.insert(END_NODE.to_string(), 0);
    for n in g.topo_order().into_iter().rev() {
        if n == END_NODE {
            continue;
        }
        let best = g
            .successors(&n)
            .filter_map(|s| to_end.get(s))
            .max()
            .copied();
        if let Some(b) = best {
            to_end.insert(n, b + 1);
        }
    }
    let mut path = vec![g.root.clone()];
    let mut cur = g.root.clone();
    while cur != END_NODE {
        let cur_len = *to_end
            .get(&cur)
            .ok_or_else(|| TransformError::MissingLevel(cur.clone()))?;
        let next = g
            .successors(&cur)
            .filter(|s| to_end.get(*s).is_some_and(|&l| l + 1 == cur_len))
            .min()
            .ok_or_else(|| TransformError::MissingLevel(cur.clone()))?
            .to_string();
        path.push(next.clone());
        cur = next;
    }
    debug_assert_eq!(
        path.len() as u32 - 1,
        levels.get(END_NODE).copied().unwrap_or(0),
        "longest path length disagrees with END level"
    );
    Ok(path)
}

/// Graph balancing: nodes off the longest path lose their outgoing edges and
/// gain one spare edge to the path node at the next level. Spare edges only
/// document bypass carriage; packet routing stays in the match tables.
pub fn balance_graph(
    g: &ParseGraph,
    levels: &BTreeMap<String, u32>,
    path: &[String],
) -> Result<LeveledGraph, TransformError> {
    let on_path: BTreeSet<&str> = path.iter().map(|s| s.as_str()).collect();
    let mut edges: BTreeSet<(String, String)> = BTreeSet::new();
    for (u, v) in &g.edges {
        if on_path.contains(u.as_str()) {
            edges.insert((u.clone(), v.clone()));
        }
    }
    for n in g.node_names() {
        if n == END_NODE || on_path.contains(n.as_str()) {
            continue;
        }
        let ln = *levels
            .get(&n)
            .ok_or_else(|| TransformError::MissingLevel(n.clone()))?;
        let idx = ln as usize + 1;
        assert!(
            idx < path.len(),
            "level {ln} of `{n}` has no successor on the longest path"
        );
        edges.insert((n, path[idx].clone()));
    }
    // A reduced edge from a path node can still span more than one level on
    // irregular graphs. Retarget it to the next path node; the original
    // target remains reachable through the bypass chain.
    let retarget: Vec<(String, String)> = edges
        .iter()
        .filter(|(u, v)| levels.get(v).copied() != levels.get(u).map(|l| l + 1))
        .cloned()
        .collect();
    for (u, v) in retarget {
        edges.remove(&(u.clone(), v));
        let idx = levels[&u] as usize + 1;
        edges.insert((u, path[idx].clone()));
    }
    Ok(LeveledGraph {
        base: g.with_edges(edges),
        level: levels.clone(),
        longest_path: path.to_vec(),
    })
}

/// Convenience: reduction, leveling, longest path and balancing in one call.
pub fn balance_pipeline_graph(g: &ParseGraph) -> Result<LeveledGraph, TransformError> {
    let reduced = transitive_reduction(g)?;
    let levels = compute_levels(&reduced);
    let path = longest_path(&reduced, &levels)?;
    balance_graph(&reduced, &levels, &path)
}

/// Pipeline stages exposed by the `dot` command.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GraphStage {
    Original,
    Reduced,
    Balanced,
}

impl std::str::FromStr for GraphStage {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "original" => Ok(GraphStage::Original),
            "reduced" => Ok(GraphStage::Reduced),
            "balanced" => Ok(GraphStage::Balanced),
            other => Err(format!(
                "unknown stage `{other}` (expected original, reduced or balanced)"
            )),
        }
    }
}

/// Renders the requested transformation stage of `g` as Graphviz DOT with
/// one rank per level. Output is byte-stable for a given graph.
pub fn stage_dot(g: &ParseGraph, stage: GraphStage) -> Result<String, TransformError> {
    let graph = match stage {
        GraphStage::Original => g.clone(),
        GraphStage::Reduced => transitive_reduction(g)?,
        GraphStage::Balanced => balance_pipeline_graph(g)?.base,
    };
    let levels = compute_levels(&graph);
    Ok(to_dot(&graph, &levels))
}

pub fn to_dot(g: &ParseGraph, levels: &BTreeMap<String, u32>) -> String {
    let mut by_level: BTreeMap<u32, Vec<&str>> = BTreeMap::new();
    for n in g.node_names() {
        let l = levels.get(&n).copied().unwrap_or(0);
        by_level.entry(l).or_default().push(find_name(g, &n));
    }
    let mut out = String::from("digraph parse_graph {\n  rankdir=TB;\n");
    for nodes in by_level.values_mut() {
        nodes.sort_unstable();
        out.push_str("  { rank=same;");
        for n in nodes.iter() {
            out.push_str(&format!(" \"{n}\";"));
        }
        out.push_str(" }\n");
    }
    for (u, v) in &g.edges {
        out.push_str(&format!("  \"{u}\" -> \"{v}\";\n"));
    }
    out.push_str("}\n");
    out
}
