//! Slow reference implementations used to cross-check the production code.
//!
//! Nothing here touches the CSR adjacency, the ranking helpers or the
//! aggregation code in other modules: neighbors come from a linear scan of
//! the raw edge table, similarities from a plain f64 loop, and table figures
//! from direct arithmetic.

use std::collections::{BTreeMap, HashSet};

use crate::embed::NodeEmbeddingCache;
use crate::kgstore::{KnowledgeGraph, NodeId};
use crate::semwalk::ReasoningPath;

/// Exhaustive enumeration refuses graphs above this size.
pub const MAX_ENUMERATION_NODES: usize = 50;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OracleError(pub String);

impl std::fmt::Display for OracleError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for OracleError {}

/// A walk written out as node ids and relation labels.
#[derive(Debug, Clone, PartialEq)]
pub struct OraclePath {
    pub nodes: Vec<NodeId>,
    pub relations: Vec<String>,
    pub score: f64,
}

pub type PathKey = (Vec<u32>, Vec<String>);

impl OraclePath {
    pub fn key(&self) -> PathKey {
        (
            self.nodes.iter().map(|n| n.0).collect(),
            self.relations.clone(),
        )
    }
}

/// Key of a production path in the same shape as [`OraclePath::key`].
pub fn key_of(path: &ReasoningPath, graph: &KnowledgeGraph) -> PathKey {
    (
        path.node_sequence().iter().map(|n| n.0).collect(),
        path.steps
            .iter()
            .map(|s| graph.relation_name(s.relation).to_string())
            .collect(),
    )
}

/// Neighbors of `u` by scanning every edge; one entry per neighbor node,
/// labelled with its smallest relation string.
pub fn scan_neighbors(graph: &KnowledgeGraph, u: NodeId) -> BTreeMap<NodeId, String> {
    let rels = graph.relations();
    let undirected = graph.options().undirected;
    let mut out: BTreeMap<NodeId, String> = BTreeMap::new();
    let mut offer = |v: NodeId, r: &str| match out.get_mut(&v) {
        Some(cur) if cur.as_str() <= r => {}
        Some(cur) => *cur = r.to_string(),
        None => {
            out.insert(v, r.to_string());
        }
    };
    for e in graph.edges() {
        let r = &rels[e.relation.0 as usize];
        if e.source == u {
            offer(e.target, r);
        }
        if undirected && e.target == u {
            offer(e.source, r);
        }
    }
    out
}

pub fn naive_cosine(a: &[f32], b: &[f32]) -> f64 {
    assert_eq!(a.len(), b.len(), "dimension mismatch");
    let mut dot = 0.0f64;
    let mut aa = 0.0f64;
    let mut bb = 0.0f64;
    for i in 0..a.len() {
        let x = a[i] as f64;
        let y = b[i] as f64;
        dot += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        return 0.0;
    }
    (dot / (aa.sqrt() * bb.sqrt())).clamp(-1.0, 1.0)
}

/// Full sort, then truncate.
pub fn naive_top_k(query: &[f32], candidates: &[(NodeId, Vec<f32>)], k: usize) -> Vec<(NodeId, f64)> {
    let mut all: Vec<(NodeId, f64)> = candidates
        .iter()
        .map(|(id, v)| (*id, naive_cosine(query, v)))
        .collect();
    all.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    all.truncate(k);
    all
}

/// Every simple path of 1..=n steps from `start` that never enters `avoid`.
pub fn enumerate_paths(
    graph: &KnowledgeGraph,
    start: NodeId,
    avoid: &[NodeId],
    n: usize,
) -> Result<Vec<Vec<NodeId>>, OracleError> {
    if graph.node_count() > MAX_ENUMERATION_NODES {
        return Err(OracleError(format!(
            "enumeration limited to {MAX_ENUMERATION_NODES} nodes, graph has {}",
            graph.node_count()
        )));
    }
    let avoid: HashSet<NodeId> = avoid.iter().copied().collect();
    let mut out = Vec::new();
    let mut stack = vec![vec![start]];
    while let Some(path) = stack.pop() {
        if path.len() > 1 {
            out.push(path.clone());
        }
        if path.len() > n {
            continue;
        }
        let last = *path.last().unwrap();
        for v in scan_neighbors(graph, last).into_keys() {
            if avoid.contains(&v) || path.contains(&v) {
                continue;
            }
            let mut next = path.clone();
            next.push(v);
            stack.push(next);
        }
    }
    out.sort();
    Ok(out)
}

/// Straight transcription of the beam rule for one start node, no revisits.
pub fn replay_beam(
    graph: &KnowledgeGraph,
    cache: &NodeEmbeddingCache,
    start: NodeId,
    avoid: &[NodeId],
    z: &[f32],
    n: usize,
    k: usize,
) -> Result<Vec<OraclePath>, OracleError> {
    if graph.node_count() > MAX_ENUMERATION_NODES {
        return Err(OracleError("graph too large for replay".into()));
    }
    let mut beam = vec![OraclePath {
        nodes: vec![start],
        relations: vec![],
        score: 0.0,
    }];
    let mut done = Vec::new();
    for _step in 1..=n {
        let mut grown = Vec::new();
        for p in &beam {
            let last = *p.nodes.last().unwrap();
            let mut cands: Vec<(NodeId, String, f64)> = Vec::new();
            for (v, rel) in scan_neighbors(graph, last) {
                if avoid.contains(&v) || p.nodes.contains(&v) {
                    continue;
                }
                let Some(e) = cache.get(v) else { continue };
                cands.push((v, rel, naive_cosine(e, z)));
            }
            if cands.is_empty() {
                if p.nodes.len() > 1 {
                    done.push(p.clone());
                }
                continue;
            }
            cands.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)));
            for (v, rel, s) in cands.into_iter().take(k) {
                let mut q = p.clone();
                q.nodes.push(v);
                q.relations.push(rel);
                q.score = s;
                grown.push(q);
            }
        }
        beam = grown;
    }
    done.extend(beam);
    Ok(done)
}

/// Unweighted mean of row cells.
pub fn row_average(cells: &[f64]) -> f64 {
    cells.iter().sum::<f64>() / cells.len() as f64
}

pub fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

/// |Δ| between two row averages as displayed at two decimals.
pub fn displayed_delta(a: &[f64], b: &[f64]) -> f64 {
    round2((round2(row_average(a)) - round2(row_average(b))).abs())
}

/// Mean and sample standard deviation.
pub fn mean_and_std(xs: &[f64]) -> (f64, f64) {
    let m = row_average(xs);
    if xs.len() < 2 {
        return (m, 0.0);
    }
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64;
    (m, var.sqrt())
}

/// Tally of one oracle comparison sweep.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OracleReport {
    pub cases: usize,
    pub mismatches: usize,
    pub max_score_diff: f64,
    pub first_failure: Option<String>,
}

impl OracleReport {
    pub fn record(&mut self, ok: bool, describe: impl FnOnce() -> String) {
        self.cases += 1;
        if !ok {
            self.mismatches += 1;
            if self.first_failure.is_none() {
                self.first_failure = Some(describe());
            }
        }
    }

    pub fn passed(&self) -> bool {
        self.cases > 0 && self.mismatches == 0
    }
}

/// Compares production and oracle walk output as multisets.
pub fn compare_walks(
    report: &mut OracleReport,
    graph: &KnowledgeGraph,
    produced: &[ReasoningPath],
    expected: &[OraclePath],
    label: &str,
) {
    let mut a: Vec<(PathKey, f64)> = produced.iter().map(|p| (key_of(p, graph), p.score)).collect();
    let mut b: Vec<(PathKey, f64)> = expected.iter().map(|p| (p.key(), p.score)).collect();
    a.sort_by(|x, y| x.0.cmp(&y.0));
    b.sort_by(|x, y| x.0.cmp(&y.0));
    let mut ok = a.len() == b.len();
    if ok {
        for (x, y) in a.iter().zip(&b) {
            let d = (x.1 - y.1).abs();
            report.max_score_diff = report.max_score_diff.max(d);
            if x.0 != y.0 || d > 1e-12 {
                ok = false;
            }
        }
    }
    report.record(ok, || {
        format!("{label}: produced {} paths, oracle {}", a.len(), b.len())
    });
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kgstore::{EntityType, GraphBuilder};

    fn complete(n: usize) -> (KnowledgeGraph, Vec<NodeId>) {
        let mut b = GraphBuilder::new();
        let ids: Vec<NodeId> = (0..n)
            .map(|i| b.add_node(EntityType::Disease, format!("n{i}")))
            .collect();
        for i in 0..n {
            for j in i + 1..n {
                b.add_edge(ids[i], "r", ids[j]);
            }
        }
        (b.build().unwrap(), ids)
    }

    #[test]
    fn k4_two_step_enumeration() {
        let (g, ids) = complete(4);
        assert_eq!(enumerate_paths(&g, ids[0], &[], 2).unwrap().len(), 9);
        assert_eq!(enumerate_paths(&g, ids[0], &[ids[1]], 2).unwrap().len(), 4);
    }

    #[test]
    fn enumeration_is_guarded() {
        let (g, ids) = complete(51);
        assert!(enumerate_paths(&g, ids[0], &[], 1).is_err());
    }

    #[test]
    fn scan_keeps_smallest_relation() {
        let mut b = GraphBuilder::new();
        let a = b.add_node(EntityType::Drug, "a");
        let c = b.add_node(EntityType::Disease, "c");
        b.add_edge(a, "zeta", c).add_edge(c, "alpha", a);
        let g = b.build().unwrap();
        assert_eq!(scan_neighbors(&g, a)[&c], "alpha");
    }

    #[test]
    fn cosine_basics() {
        assert_eq!(naive_cosine(&[1.0, 0.0], &[1.0, 0.0]), 1.0);
        assert_eq!(naive_cosine(&[1.0, 0.0], &[0.0, 1.0]), 0.0);
        assert_eq!(naive_cosine(&[0.0, 0.0], &[0.0, 1.0]), 0.0);
    }

    #[test]
    fn delta_uses_displayed_averages() {
        let a = [46.24, 60.12, 56.74, 56.54, 11.38, 55.50];
        let b = [46.58, 59.39, 56.33, 56.12, 10.70, 53.52];
        assert_eq!(displayed_delta(&a, &b), 0.64);
    }

    #[test]
    fn sample_std() {
        let (m, s) = mean_and_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-12);
    }
}
