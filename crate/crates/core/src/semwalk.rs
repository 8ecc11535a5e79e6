//! Similarity-guided beam walk from question nodes that avoids answer nodes.
//!
//! For every start node the walk keeps, per partial path and per step, the
//! `k` neighbors whose embeddings are closest (cosine) to the guidance
//! vector of the question/answer pair. Neighbors in the avoidance set, and
//! nodes already on the path unless `allow_revisit` is set, are never
//! expanded. A neighbor reached through several relations is one candidate,
//! carried with its lexicographically smallest relation label.
//!
//! A partial path that cannot be extended is emitted at its current length
//! if it has at least one step. Every emitted path is scored by the
//! similarity of its terminal node.

use std::collections::{HashMap, HashSet};
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embed::{cosine, embed_text, rank_order, EmbedError, EmbeddingProvider, NodeEmbeddingCache};
use crate::kgstore::{KnowledgeGraph, NodeId, RelationId};
use crate::llm::RetryPolicy;
use crate::{Embedding, Score};

#[derive(Debug, Error)]
pub enum WalkError {
    #[error("question and answer must be non-empty")]
    EmptyInput,
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct WalkConfig {
    /// Walk length (steps).
    pub n: usize,
    /// Beam size.
    pub k: usize,
    /// Global cap on paths handed to generation.
    pub max_paths: usize,
    pub allow_revisit: bool,
}

impl Default for WalkConfig {
    fn default() -> Self {
        Self {
            n: 2,
            k: 3,
            max_paths: 10,
            allow_revisit: false,
        }
    }
}

impl WalkConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.n == 0 || self.k == 0 || self.max_paths == 0 {
            return Err("walk n, k and max_paths must all be >= 1".into());
        }
        Ok(())
    }
}

/// Embedding of the concatenated question and correct answer.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceVector(pub Embedding);

impl GuidanceVector {
    pub fn as_slice(&self) -> &[f32] {
        self.0.as_slice()
    }
}

pub fn guidance_vector(
    question: &str,
    answer: &str,
    provider: &dyn EmbeddingProvider,
    policy: RetryPolicy,
) -> Result<GuidanceVector, WalkError> {
    if question.trim().is_empty() || answer.trim().is_empty() {
        return Err(WalkError::EmptyInput);
    }
    Ok(GuidanceVector(embed_text(
        provider,
        &format!("{question} {answer}"),
        policy,
    )?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PathStep {
    pub relation: RelationId,
    pub node: NodeId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReasoningPath {
    pub start: NodeId,
    pub steps: Vec<PathStep>,
    pub score: Score,
}

impl ReasoningPath {
    /// Start followed by every step node.
    pub fn node_sequence(&self) -> Vec<NodeId> {
        std::iter::once(self.start)
            .chain(self.steps.iter().map(|s| s.node))
            .collect()
    }

    pub fn terminal(&self) -> NodeId {
        self.steps.last().map_or(self.start, |s| s.node)
    }
}

struct Scorer<'a> {
    cache: &'a NodeEmbeddingCache,
    z: &'a [f32],
    memo: HashMap<NodeId, Option<Score>>,
}

impl Scorer<'_> {
    fn score(&mut self, node: NodeId) -> Option<Score> {
        let (cache, z) = (self.cache, self.z);
        *self.memo.entry(node).or_insert_with(|| match cache.get(node) {
            Some(v) => cosine::<f32, Score>(v, z).ok(),
            None => {
                log::warn!("node {node} has no embedding; skipped during walk");
                None
            }
        })
    }
}

fn walk_from(
    graph: &KnowledgeGraph,
    scorer: &mut Scorer<'_>,
    start: NodeId,
    avoid: &HashSet<NodeId>,
    cfg: &WalkConfig,
) -> Vec<ReasoningPath> {
    let mut emitted = Vec::new();
    let mut beam = vec![ReasoningPath {
        start,
        steps: Vec::new(),
        score: 0.0,
    }];
    for _ in 0..cfg.n {
        let mut next = Vec::with_capacity(beam.len() * cfg.k);
        for path in beam {
            let last = path.terminal();
            let on_path: HashSet<NodeId> = if cfg.allow_revisit {
                HashSet::new()
            } else {
                path.node_sequence().into_iter().collect()
            };
            let mut candidates: Vec<((NodeId, Score), RelationId)> = Vec::new();
            let mut prev = None;
            for nb in graph.neighbors(last).unwrap_or(&[]) {
                // sorted by (node, relation text): first entry per node wins
                if prev == Some(nb.node) {
                    continue;
                }
                prev = Some(nb.node);
                if avoid.contains(&nb.node) || on_path.contains(&nb.node) {
                    continue;
                }
                if let Some(s) = scorer.score(nb.node) {
                    candidates.push(((nb.node, s), nb.relation));
                }
            }
            if candidates.is_empty() {
                if !path.steps.is_empty() {
                    emitted.push(path);
                }
                continue;
            }
            candidates.sort_by(|a, b| rank_order(&a.0, &b.0));
            for ((node, score), relation) in candidates.into_iter().take(cfg.k) {
                let mut steps = path.steps.clone();
                steps.push(PathStep { relation, node });
                next.push(ReasoningPath {
                    start,
                    steps,
                    score,
                });
            }
        }
        beam = next;
        if beam.is_empty() {
            break;
        }
    }
    emitted.extend(beam);
    emitted
}

/// Runs the beam walk from every start node; output is grouped by ascending
/// start id.
pub fn semantic_walk(
    graph: &KnowledgeGraph,
    cache: &NodeEmbeddingCache,
    start_nodes: &[NodeId],
    avoid: &[NodeId],
    z: &GuidanceVector,
    cfg: &WalkConfig,
) -> Result<Vec<ReasoningPath>, WalkError> {
    if z.0.dim() != cache.dim() {
        return Err(EmbedError::DimensionMismatch {
            expected: cache.dim(),
            found: z.0.dim(),
        }
        .into());
    }
    let avoid: HashSet<NodeId> = avoid.iter().copied().collect();
    let mut starts: Vec<NodeId> = start_nodes
        .iter()
        .copied()
        .filter(|s| graph.contains(*s))
        .collect();
    starts.sort();
    starts.dedup();
    let per_start: Vec<Vec<ReasoningPath>> = starts
        .par_iter()
        .map(|&s| {
            let mut scorer = Scorer {
                cache,
                z: z.as_slice(),
                memo: HashMap::new(),
            };
            walk_from(graph, &mut scorer, s, &avoid, cfg)
        })
        .collect();
    Ok(per_start.into_iter().flatten().collect())
}

/// Global top-`max_paths` by score, ties by start id then step node ids;
/// paths visiting the same node sequence are kept once.
pub fn select_paths(mut paths: Vec<ReasoningPath>, max_paths: usize) -> Vec<ReasoningPath> {
    paths.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.start.cmp(&b.start))
            .then_with(|| {
                let sa = a.steps.iter().map(|s| s.node);
                let sb = b.steps.iter().map(|s| s.node);
                sa.cmp(sb)
            })
    });
    let mut seen = HashSet::new();
    paths.retain(|p| seen.insert(p.node_sequence()));
    paths.truncate(max_paths);
    paths
}

fn escape_arrow(s: &str) -> String {
    s.replace("-->", "->")
}

/// `start --relation--> node1 --relation--> node2`, on one line.
pub fn serialize_path(path: &ReasoningPath, graph: &KnowledgeGraph) -> String {
    let name = |id: NodeId| escape_arrow(graph.name(id).unwrap_or("?")).replace('\n', " ");
    let mut out = name(path.start);
    for step in &path.steps {
        out.push_str(" --");
        out.push_str(&escape_arrow(graph.relation_name(step.relation)).replace('\n', " "));
        out.push_str("--> ");
        out.push_str(&name(step.node));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub relation: String,
    pub node: NodeId,
    pub name: String,
}

/// Audit line for the walk JSONL export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathRecord {
    pub qa_id: String,
    pub start: NodeId,
    pub steps: Vec<StepRecord>,
    pub score: Score,
}

impl PathRecord {
    pub fn new(qa_id: &str, path: &ReasoningPath, graph: &KnowledgeGraph) -> Self {
        Self {
            qa_id: qa_id.to_string(),
            start: path.start,
            steps: path
                .steps
                .iter()
                .map(|s| StepRecord {
                    relation: graph.relation_name(s.relation).to_string(),
                    node: s.node,
                    name: graph.name(s.node).unwrap_or("?").to_string(),
                })
                .collect(),
            score: path.score,
        }
    }
}

pub fn write_paths_jsonl(path: &Path, records: &[PathRecord]) -> Result<(), WalkError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(std::io::Error::other)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}
