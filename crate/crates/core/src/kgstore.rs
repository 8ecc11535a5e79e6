//! Read-only biomedical knowledge graph loaded from node/edge CSV tables.
//!
//! Nodes file header: `node_id,node_type,node_name`. Node ids must be unique
//! and cover `0..N` exactly (PrimeKG's `node_index` already does; sparse ids
//! need remapping before ingestion).
//!
//! Edges file header: `source_id,relation,target_id`.
//!
//! The optional binary cache (`KGG1`) stores the three raw tables; the name
//! index and adjacency are rebuilt on load, so two loads of the same input
//! are byte-identical when re-serialized.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::util::normalize_text;

const CACHE_MAGIC: &[u8; 4] = b"KGG1";
const NODE_HEADER: [&str; 3] = ["node_id", "node_type", "node_name"];
const EDGE_HEADER: [&str; 3] = ["source_id", "relation", "target_id"];

#[derive(Debug, Error)]
pub enum KgError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Malformed {
        path: PathBuf,
        line: u64,
        message: String,
    },
    #[error("{path}: expected header `{expected}`, found `{found}`")]
    Header {
        path: PathBuf,
        expected: String,
        found: String,
    },
    #[error("{path}:{line}: unknown entity type `{value}`")]
    UnknownEntityType {
        path: PathBuf,
        line: u64,
        value: String,
    },
    #[error("{path}:{line}: duplicate node id {id}")]
    DuplicateNodeId { path: PathBuf, line: u64, id: u64 },
    #[error("{path}: node ids must cover 0..{count} exactly; id {missing} is missing")]
    SparseNodeIds {
        path: PathBuf,
        count: usize,
        missing: usize,
    },
    #[error("{path}:{line}: edge endpoint {id} does not exist (graph has {node_count} nodes)")]
    DanglingEdge {
        path: PathBuf,
        line: u64,
        id: u64,
        node_count: usize,
    },
    #[error("invalid node id {0}")]
    InvalidNode(NodeId),
    #[error("graph cache: {0}")]
    Cache(String),
}

pub type Result<T, E = KgError> = std::result::Result<T, E>;

/// Dense index into the node table.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct NodeId(pub u32);

impl NodeId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

/// Interned relation label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RelationId(pub u32);

/// The ten node categories of the graph, also the extraction vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum EntityType {
    #[serde(rename = "gene/protein")]
    GeneProtein,
    #[serde(rename = "drug")]
    Drug,
    #[serde(rename = "effect/phenotype")]
    EffectPhenotype,
    #[serde(rename = "disease")]
    Disease,
    #[serde(rename = "biological_process")]
    BiologicalProcess,
    #[serde(rename = "molecular_function")]
    MolecularFunction,
    #[serde(rename = "cellular_component")]
    CellularComponent,
    #[serde(rename = "exposure")]
    Exposure,
    #[serde(rename = "pathway")]
    Pathway,
    #[serde(rename = "anatomy")]
    Anatomy,
}

impl EntityType {
    pub const ALL: [EntityType; 10] = [
        EntityType::GeneProtein,
        EntityType::Drug,
        EntityType::EffectPhenotype,
        EntityType::Disease,
        EntityType::BiologicalProcess,
        EntityType::MolecularFunction,
        EntityType::CellularComponent,
        EntityType::Exposure,
        EntityType::Pathway,
        EntityType::Anatomy,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EntityType::GeneProtein => "gene/protein",
            EntityType::Drug => "drug",
            EntityType::EffectPhenotype => "effect/phenotype",
            EntityType::Disease => "disease",
            EntityType::BiologicalProcess => "biological_process",
            EntityType::MolecularFunction => "molecular_function",
            EntityType::CellularComponent => "cellular_component",
            EntityType::Exposure => "exposure",
            EntityType::Pathway => "pathway",
            EntityType::Anatomy => "anatomy",
        }
    }

    fn code(self) -> u8 {
        Self::ALL.iter().position(|t| *t == self).unwrap() as u8
    }

    fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }
}

impl fmt::Display for EntityType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnknownEntityType(pub String);

impl FromStr for EntityType {
    type Err = UnknownEntityType;

    /// Case-insensitive on the ten canonical labels.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key = s.trim().to_ascii_lowercase();
        EntityType::ALL
            .into_iter()
            .find(|t| t.as_str() == key)
            .ok_or_else(|| UnknownEntityType(s.to_string()))
    }
}

/// Normalized form used by exact-name lookup.
pub fn normalize(name: &str) -> String {
    normalize_text(name)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KgNode {
    pub id: NodeId,
    pub entity_type: EntityType,
    pub name: String,
    pub normalized_name: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KgEdge {
    pub source: NodeId,
    pub relation: RelationId,
    pub target: NodeId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Neighbor {
    pub node: NodeId,
    pub relation: RelationId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GraphOptions {
    /// Treat every edge as traversable in both directions.
    pub undirected: bool,
}

impl Default for GraphOptions {
    fn default() -> Self {
        Self { undirected: true }
    }
}

/// Immutable node/edge store with a name index and neighbor adjacency.
#[derive(Debug, Clone)]
pub struct KnowledgeGraph {
    nodes: Vec<KgNode>,
    relations: Vec<String>,
    edges: Vec<KgEdge>,
    name_index: HashMap<String, Vec<NodeId>>,
    // CSR adjacency: neighbors of node i are adj[offsets[i]..offsets[i + 1]]
    offsets: Vec<usize>,
    adj: Vec<Neighbor>,
    options: GraphOptions,
}

impl KnowledgeGraph {
    /// Builds and indexes a graph from raw tables. Edge endpoints and relation
    /// ids must be in range.
    pub fn from_tables(
        nodes: Vec<(EntityType, String)>,
        relations: Vec<String>,
        edges: Vec<KgEdge>,
        options: GraphOptions,
    ) -> Result<Self> {
        let nodes: Vec<KgNode> = nodes
            .into_iter()
            .enumerate()
            .map(|(i, (entity_type, name))| KgNode {
                id: NodeId(i as u32),
                entity_type,
                normalized_name: normalize(&name),
                name,
            })
            .collect();
        for e in &edges {
            for end in [e.source, e.target] {
                if end.index() >= nodes.len() {
                    return Err(KgError::InvalidNode(end));
                }
            }
            if e.relation.0 as usize >= relations.len() {
                return Err(KgError::Cache(format!(
                    "relation id {} out of range",
                    e.relation.0
                )));
            }
        }

        let mut name_index: HashMap<String, Vec<NodeId>> = HashMap::new();
        for n in &nodes {
            name_index
                .entry(n.normalized_name.clone())
                .or_default()
                .push(n.id);
        }

        let mut lists: Vec<Vec<Neighbor>> = vec![Vec::new(); nodes.len()];
        for e in &edges {
            lists[e.source.index()].push(Neighbor {
                node: e.target,
                relation: e.relation,
            });
            if options.undirected {
                lists[e.target.index()].push(Neighbor {
                    node: e.source,
                    relation: e.relation,
                });
            }
        }
        let mut offsets = Vec::with_capacity(nodes.len() + 1);
        let mut adj = Vec::new();
        offsets.push(0);
        for mut list in lists {
            list.sort_by(|a, b| {
                a.node.cmp(&b.node).then_with(|| {
                    relations[a.relation.0 as usize].cmp(&relations[b.relation.0 as usize])
                })
            });
            list.dedup();
            adj.extend(list);
            offsets.push(adj.len());
        }

        Ok(Self {
            nodes,
            relations,
            edges,
            name_index,
            offsets,
            adj,
            options,
        })
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn options(&self) -> GraphOptions {
        self.options
    }

    pub fn nodes(&self) -> &[KgNode] {
        &self.nodes
    }

    pub fn edges(&self) -> &[KgEdge] {
        &self.edges
    }

    pub fn relations(&self) -> &[String] {
        &self.relations
    }

    pub fn node(&self, id: NodeId) -> Result<&KgNode> {
        self.nodes.get(id.index()).ok_or(KgError::InvalidNode(id))
    }

    pub fn name(&self, id: NodeId) -> Result<&str> {
        self.node(id).map(|n| n.name.as_str())
    }

    pub fn relation_name(&self, rel: RelationId) -> &str {
        &self.relations[rel.0 as usize]
    }

    pub fn contains(&self, id: NodeId) -> bool {
        id.index() < self.nodes.len()
    }

    /// Deduplicated 1-hop neighbors, ascending by node id then relation text.
    pub fn neighbors(&self, node: NodeId) -> Result<&[Neighbor]> {
        if !self.contains(node) {
            return Err(KgError::InvalidNode(node));
        }
        let i = node.index();
        Ok(&self.adj[self.offsets[i]..self.offsets[i + 1]])
    }

    /// All nodes whose normalized name equals `normalize(name)`, ascending.
    pub fn find_exact(&self, name: &str) -> &[NodeId] {
        self.name_index
            .get(&normalize(name))
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    /// Binary cache encoding: magic, then little-endian length-prefixed
    /// node, relation and edge tables.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.edges.len() * 12);
        out.extend_from_slice(CACHE_MAGIC);
        out.extend_from_slice(&(self.nodes.len() as u64).to_le_bytes());
        for n in &self.nodes {
            out.push(n.entity_type.code());
            out.extend_from_slice(&(n.name.len() as u32).to_le_bytes());
            out.extend_from_slice(n.name.as_bytes());
        }
        out.extend_from_slice(&(self.relations.len() as u64).to_le_bytes());
        for r in &self.relations {
            out.extend_from_slice(&(r.len() as u32).to_le_bytes());
            out.extend_from_slice(r.as_bytes());
        }
        out.extend_from_slice(&(self.edges.len() as u64).to_le_bytes());
        for e in &self.edges {
            out.extend_from_slice(&e.source.0.to_le_bytes());
            out.extend_from_slice(&e.relation.0.to_le_bytes());
            out.extend_from_slice(&e.target.0.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], options: GraphOptions) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(4)? != CACHE_MAGIC {
            return Err(KgError::Cache("bad magic".into()));
        }
        let n_nodes = r.u64()? as usize;
        let mut nodes = Vec::with_capacity(n_nodes.min(bytes.len()));
        for _ in 0..n_nodes {
            let code = r.take(1)?[0];
            let ty = EntityType::from_code(code)
                .ok_or_else(|| KgError::Cache(format!("bad entity type code {code}")))?;
            nodes.push((ty, r.string()?));
        }
        let n_rel = r.u64()? as usize;
        let mut relations = Vec::with_capacity(n_rel.min(bytes.len()));
        for _ in 0..n_rel {
            relations.push(r.string()?);
        }
        let n_edges = r.u64()? as usize;
        let mut edges = Vec::with_capacity(n_edges.min(bytes.len() / 12));
        for _ in 0..n_edges {
            edges.push(KgEdge {
                source: NodeId(r.u32()?),
                relation: RelationId(r.u32()?),
                target: NodeId(r.u32()?),
            });
        }
        if r.pos != bytes.len() {
            return Err(KgError::Cache("trailing bytes".into()));
        }
        Self::from_tables(nodes, relations, edges, options)
            .map_err(|e| KgError::Cache(e.to_string()))
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| KgError::Cache("truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| KgError::Cache("invalid utf-8".into()))
    }
}

fn open_csv(path: &Path, expected: [&str; 3]) -> Result<csv::Reader<fs::File>> {
    let file = fs::File::open(path).map_err(|source| KgError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let header = reader.headers().map_err(|e| KgError::Malformed {
        path: path.to_path_buf(),
        line: 1,
        message: e.to_string(),
    })?;
    let found: Vec<&str> = header.iter().map(str::trim).collect();
    if found != expected {
        return Err(KgError::Header {
            path: path.to_path_buf(),
            expected: expected.join(","),
            found: found.join(","),
        });
    }
    Ok(reader)
}

fn read_rows(
    path: &Path,
    expected: [&str; 3],
    mut each: impl FnMut(u64, &csv::StringRecord) -> Result<()>,
) -> Result<()> {
    let mut reader = open_csv(path, expected)?;
    let mut record = csv::StringRecord::new();
    loop {
        match reader.read_record(&mut record) {
            Ok(false) => return Ok(()),
            Ok(true) => {
                let line = record.position().map_or(0, |p| p.line());
                if record.len() != 3 {
                    return Err(KgError::Malformed {
                        path: path.to_path_buf(),
                        line,
                        message: format!("expected 3 fields, found {}", record.len()),
                    });
                }
                each(line, &record)?;
            }
            Err(e) => {
                let line = e.position().map_or(0, |p| p.line());
                return Err(KgError::Malformed {
                    path: path.to_path_buf(),
                    line,
                    message: e.to_string(),
                });
            }
        }
    }
}

fn parse_id(path: &Path, line: u64, field: &str) -> Result<u64> {
    field.trim().parse::<u64>().map_err(|_| KgError::Malformed {
        path: path.to_path_buf(),
        line,
        message: format!("`{field}` is not a non-negative integer id"),
    })
}

/// Loads and indexes a graph from the node and edge CSV files.
pub fn load_graph(nodes_path: &Path, edges_path: &Path) -> Result<KnowledgeGraph> {
    load_graph_with(nodes_path, edges_path, GraphOptions::default())
}

pub fn load_graph_with(
    nodes_path: &Path,
    edges_path: &Path,
    options: GraphOptions,
) -> Result<KnowledgeGraph> {
    let mut slots: Vec<Option<(EntityType, String)>> = Vec::new();
    read_rows(nodes_path, NODE_HEADER, |line, rec| {
        let id = parse_id(nodes_path, line, &rec[0])?;
        let ty: EntityType = rec[1].parse().map_err(|_| KgError::UnknownEntityType {
            path: nodes_path.to_path_buf(),
            line,
            value: rec[1].to_string(),
        })?;
        let name = rec[2].trim();
        if name.is_empty() {
            return Err(KgError::Malformed {
                path: nodes_path.to_path_buf(),
                line,
                message: "empty node name".into(),
            });
        }
        let idx = usize::try_from(id).ok().filter(|&i| i < u32::MAX as usize).ok_or(
            KgError::Malformed {
                path: nodes_path.to_path_buf(),
                line,
                message: format!("node id {id} too large"),
            },
        )?;
        if slots.len() <= idx {
            slots.resize(idx + 1, None);
        }
        if slots[idx].is_some() {
            return Err(KgError::DuplicateNodeId {
                path: nodes_path.to_path_buf(),
                line,
                id,
            });
        }
        slots[idx] = Some((ty, name.to_string()));
        Ok(())
    })?;
    let count = slots.len();
    let mut nodes = Vec::with_capacity(count);
    for (i, slot) in slots.into_iter().enumerate() {
        match slot {
            Some(n) => nodes.push(n),
            None => {
                return Err(KgError::SparseNodeIds {
                    path: nodes_path.to_path_buf(),
                    count,
                    missing: i,
                })
            }
        }
    }

    let mut relations: Vec<String> = Vec::new();
    let mut rel_ids: HashMap<String, RelationId> = HashMap::new();
    let mut edges = Vec::new();
    read_rows(edges_path, EDGE_HEADER, |line, rec| {
        let endpoint = |field: &str| -> Result<NodeId> {
            let id = parse_id(edges_path, line, field)?;
            if id as usize >= count || id >= u32::MAX as u64 {
                return Err(KgError::DanglingEdge {
                    path: edges_path.to_path_buf(),
                    line,
                    id,
                    node_count: count,
                });
            }
            Ok(NodeId(id as u32))
        };
        let source = endpoint(&rec[0])?;
        let target = endpoint(&rec[2])?;
        let label = rec[1].trim();
        if label.is_empty() {
            return Err(KgError::Malformed {
                path: edges_path.to_path_buf(),
                line,
                message: "empty relation".into(),
            });
        }
        let relation = match rel_ids.get(label) {
            Some(r) => *r,
            None => {
                let r = RelationId(relations.len() as u32);
                relations.push(label.to_string());
                rel_ids.insert(label.to_string(), r);
                r
            }
        };
        edges.push(KgEdge {
            source,
            relation,
            target,
        });
        Ok(())
    })?;

    KnowledgeGraph::from_tables(nodes, relations, edges, options)
}

/// How [`load_graph_cached`] obtained its graph.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CacheStatus {
    Reused,
    Built,
    Rebuilt(String),
}

fn mtime(path: &Path) -> Result<std::time::SystemTime> {
    fs::metadata(path)
        .and_then(|m| m.modified())
        .map_err(|source| KgError::Io {
            path: path.to_path_buf(),
            source,
        })
}

/// Loads from the binary cache when it is present, readable and not older
/// than either CSV; otherwise parses the CSVs and rewrites the cache.
pub fn load_graph_cached(
    nodes_path: &Path,
    edges_path: &Path,
    cache_path: &Path,
    options: GraphOptions,
) -> Result<(KnowledgeGraph, CacheStatus)> {
    let status = if cache_path.exists() {
        let cache_time = mtime(cache_path)?;
        let newest_csv = mtime(nodes_path)?.max(mtime(edges_path)?);
        if newest_csv > cache_time {
            CacheStatus::Rebuilt("stale".into())
        } else {
            match fs::read(cache_path)
                .map_err(|source| KgError::Io {
                    path: cache_path.to_path_buf(),
                    source,
                })
                .and_then(|b| KnowledgeGraph::from_bytes(&b, options))
            {
                Ok(g) => return Ok((g, CacheStatus::Reused)),
                Err(e) => {
                    log::warn!("discarding graph cache {}: {e}", cache_path.display());
                    CacheStatus::Rebuilt(e.to_string())
                }
            }
        }
    } else {
        CacheStatus::Built
    };
    let graph = load_graph_with(nodes_path, edges_path, options)?;
    if let Some(dir) = cache_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|source| KgError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    fs::write(cache_path, graph.to_bytes()).map_err(|source| KgError::Io {
        path: cache_path.to_path_buf(),
        source,
    })?;
    Ok((graph, status))
}

/// Incremental construction for in-memory graphs.
#[derive(Debug, Default)]
pub struct GraphBuilder {
    nodes: Vec<(EntityType, String)>,
    relations: Vec<String>,
    rel_ids: HashMap<String, RelationId>,
    edges: Vec<KgEdge>,
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_node(&mut self, entity_type: EntityType, name: impl Into<String>) -> NodeId {
        self.nodes.push((entity_type, name.into()));
        NodeId(self.nodes.len() as u32 - 1)
    }

    pub fn add_edge(&mut self, source: NodeId, relation: &str, target: NodeId) -> &mut Self {
        let relation = match self.rel_ids.get(relation) {
            Some(r) => *r,
            None => {
                let r = RelationId(self.relations.len() as u32);
                self.relations.push(relation.to_string());
                self.rel_ids.insert(relation.to_string(), r);
                r
            }
        };
        self.edges.push(KgEdge {
            source,
            relation,
            target,
        });
        self
    }

    pub fn build(self) -> Result<KnowledgeGraph> {
        self.build_with(GraphOptions::default())
    }

    pub fn build_with(self, options: GraphOptions) -> Result<KnowledgeGraph> {
        KnowledgeGraph::from_tables(self.nodes, self.relations, self.edges, options)
    }
}
