//! Text embeddings, the persistent node-embedding cache, and the cosine /
//! top-k kernels.
//!
//! Cache layout: `<stem>.vec` holds raw little-endian f32 rows, one per id,
//! in the order listed by `<stem>.meta.json` (`dim`, `provider_tag`, `ids`).

use std::collections::HashMap;
use std::ffi::OsString;
use std::fs::{self, OpenOptions};
use std::io::{Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kgstore::{KnowledgeGraph, NodeId};
use crate::llm::{classify_status, LlmError, RetryPolicy};
use crate::util::stable_hash64;

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("cannot embed empty text")]
    EmptyText,
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("embedding contains non-finite values")]
    NonFinite,
    #[error("empty embedding")]
    Empty,
    #[error("provider: {0}")]
    Provider(#[from] LlmError),
    #[error("provider returned {found} vectors for {expected} inputs")]
    BatchSize { expected: usize, found: usize },
    #[error("cache was built with provider `{cache}`, pipeline uses `{provider}`")]
    ProviderMismatch { cache: String, provider: String },
    #[error("{path}: {message}")]
    Cache { path: PathBuf, message: String },
}

pub type Result<T, E = EmbedError> = std::result::Result<T, E>;

/// Finite, non-empty embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector<T> {
    values: Vec<T>,
}

impl<T: Float> EmbeddingVector<T> {
    pub fn new(values: Vec<T>) -> Result<Self> {
        if values.is_empty() {
            return Err(EmbedError::Empty);
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(EmbedError::NonFinite);
        }
        Ok(Self { values })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.values
    }

    pub fn into_inner(self) -> Vec<T> {
        self.values
    }
}

/// Cosine similarity of `a` and `b`, accumulated in `A`.
///
/// A zero-norm side yields 0 (logged) instead of an error. The result is
/// clamped to `[-1, 1]`.
pub fn cosine<T: Float, A: Float>(a: &[T], b: &[T]) -> Result<A> {
    if a.len() != b.len() {
        return Err(EmbedError::DimensionMismatch {
            expected: a.len(),
            found: b.len(),
        });
    }
    let widen = |x: T| -> A { A::from(x).unwrap_or_else(A::nan) };
    let (mut dot, mut na, mut nb) = (A::zero(), A::zero(), A::zero());
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (widen(x), widen(y));
        dot = dot + x * y;
        na = na + x * x;
        nb = nb + y * y;
    }
    if na == A::zero() || nb == A::zero() {
        log::warn!("cosine with a zero-norm vector scored as 0");
        return Ok(A::zero());
    }
    let c = dot / (na.sqrt() * nb.sqrt());
    Ok(c.max(-A::one()).min(A::one()))
}

/// Ranking order: score descending, then node id ascending.
pub fn rank_order<A: Float>(a: &(NodeId, A), b: &(NodeId, A)) -> std::cmp::Ordering {
    b.1.partial_cmp(&a.1)
        .unwrap_or(std::cmp::Ordering::Equal)
        .then(a.0.cmp(&b.0))
}

/// The `k` candidates most similar to `query` (ties by ascending id).
pub fn top_k_similar<'a, T, A, I>(query: &[T], candidates: I, k: usize) -> Result<Vec<(NodeId, A)>>
where
    T: Float + 'a,
    A: Float,
    I: IntoIterator<Item = (NodeId, &'a [T])>,
{
    let mut scored = Vec::new();
    for (id, v) in candidates {
        scored.push((id, cosine::<T, A>(query, v)?));
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    if k < scored.len() {
        scored.select_nth_unstable_by(k - 1, rank_order);
        scored.truncate(k);
    }
    scored.sort_by(rank_order);
    Ok(scored)
}

/// Source of text embeddings.
pub trait EmbeddingProvider: Send + Sync {
    /// Identifies the embedding model; caches are keyed by it.
    fn tag(&self) -> String;
    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f32>>>;
}

fn is_transient(e: &EmbedError) -> bool {
    matches!(e, EmbedError::Provider(inner) if inner.is_transient())
}

fn exhausted(attempts: u32, e: EmbedError) -> EmbedError {
    match e {
        EmbedError::Provider(last) => EmbedError::Provider(LlmError::Exhausted {
            attempts,
            last: Box::new(last),
        }),
        other => other,
    }
}

/// Embeds a batch with retries, validating count and finiteness.
pub fn embed_texts(
    provider: &dyn EmbeddingProvider,
    texts: &[String],
    policy: RetryPolicy,
) -> Result<Vec<Vec<f32>>> {
    if texts.iter().any(|t| t.trim().is_empty()) {
        return Err(EmbedError::EmptyText);
    }
    let out = policy.run(is_transient, exhausted, |_| provider.embed_batch(texts))?;
    if out.len() != texts.len() {
        return Err(EmbedError::BatchSize {
            expected: texts.len(),
            found: out.len(),
        });
    }
    if let Some(first) = out.first() {
        for v in &out {
            if v.len() != first.len() {
                return Err(EmbedError::DimensionMismatch {
                    expected: first.len(),
                    found: v.len(),
                });
            }
        }
    }
    for v in &out {
        if v.is_empty() {
            return Err(EmbedError::Empty);
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(EmbedError::NonFinite);
        }
    }
    Ok(out)
}

pub fn embed_text(
    provider: &dyn EmbeddingProvider,
    text: &str,
    policy: RetryPolicy,
) -> Result<EmbeddingVector<f32>> {
    if text.trim().is_empty() {
        return Err(EmbedError::EmptyText);
    }
    let mut out = embed_texts(provider, &[text.to_string()], policy)?;
    EmbeddingVector::new(out.pop().unwrap_or_default())
}

/// Embeddings endpoint taking `{"model", "input": [..]}`.
pub struct HttpEmbedder {
    url: String,
    key: Option<String>,
    model: String,
    http: reqwest::blocking::Client,
}

impl HttpEmbedder {
    pub fn new(url: impl Into<String>, key: Option<String>, model: impl Into<String>) -> Result<Self> {
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(120))
            .build()
            .map_err(|e| EmbedError::Provider(LlmError::Config(e.to_string())))?;
        Ok(Self {
            url: url.into(),
            key,
            model: model.into(),
            http,
        })
    }
}

/// Accepts `{"data": [{"embedding": [..], "index": i}, ..]}` or a bare
/// list of float arrays.
pub fn parse_embedding_response(value: &serde_json::Value) -> Result<Vec<Vec<f32>>> {
    #[derive(Deserialize)]
    struct Item {
        embedding: Vec<f32>,
        #[serde(default)]
        index: Option<usize>,
    }
    #[derive(Deserialize)]
    struct Wrapped {
        data: Vec<Item>,
    }
    let bad = |e: serde_json::Error| EmbedError::Provider(LlmError::Transport(e.to_string()));
    if value.is_array() {
        return serde_json::from_value(value.clone()).map_err(bad);
    }
    let mut wrapped: Wrapped = serde_json::from_value(value.clone()).map_err(bad)?;
    if wrapped.data.iter().all(|i| i.index.is_some()) {
        wrapped.data.sort_by_key(|i| i.index);
    }
    Ok(wrapped.data.into_iter().map(|i| i.embedding).collect())
}

impl EmbeddingProvider for HttpEmbedder {
    fn tag(&self) -> String {
        self.model.clone()
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f32>>> {
        let body = serde_json::json!({"model": self.model, "input": texts});
        let mut req = self.http.post(&self.url).json(&body);
        if let Some(key) = &self.key {
            req = req.bearer_auth(key);
        }
        let transport = |e: reqwest::Error| EmbedError::Provider(LlmError::Transport(e.to_string()));
        let resp = req.send().map_err(transport)?;
        let status = resp.status().as_u16();
        let text = resp.text().map_err(transport)?;
        if !(200..300).contains(&status) {
            return Err(EmbedError::Provider(classify_status(status, text)));
        }
        let value: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| EmbedError::Provider(LlmError::Transport(e.to_string())))?;
        parse_embedding_response(&value)
    }
}

/// Deterministic stand-in: seeded uniform values keyed by a SHA-256 of the
/// text, L2-normalized. Specific texts can be pinned to fixed vectors.
#[derive(Debug)]
pub struct MockEmbedder {
    dim: usize,
    tag: String,
    overrides: HashMap<String, Vec<f32>>,
    calls: AtomicUsize,
    fail_after: Option<usize>,
}

impl MockEmbedder {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            tag: format!("mock-hash-{dim}"),
            overrides: HashMap::new(),
            calls: AtomicUsize::new(0),
            fail_after: None,
        }
    }

    pub fn with_override(mut self, text: impl Into<String>, vector: Vec<f32>) -> Self {
        self.overrides.insert(text.into(), vector);
        self
    }

    /// Every call after the first `n` successful ones fails.
    pub fn failing_after(mut self, n: usize) -> Self {
        self.fail_after = Some(n);
        self
    }

    pub fn with_tag(mut self, tag: impl Into<String>) -> Self {
        self.tag = tag.into();
        self
    }

    /// Successful calls served so far.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn vector_for(&self, text: &str) -> Vec<f32> {
        if let Some(v) = self.overrides.get(text) {
            return v.clone();
        }
        hash_vector(text, self.dim)
    }
}

/// The mock's hash-to-vector function.
pub fn hash_vector(text: &str, dim: usize) -> Vec<f32> {
    let seed = stable_hash64(&[b"mock-embedding", text.as_bytes()]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<f32> = (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    v
}

impl EmbeddingProvider for MockEmbedder {
    fn tag(&self) -> String {
        self.tag.clone()
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f32>>> {
        if let Some(limit) = self.fail_after {
            if self.calls.load(Ordering::SeqCst) >= limit {
                return Err(EmbedError::Provider(LlmError::Transport(
                    "mock provider unavailable".into(),
                )));
            }
        }
        self.calls.fetch_add(1, Ordering::SeqCst);
        Ok(texts.iter().map(|t| self.vector_for(t)).collect())
    }
}

pub fn provider_from_url(
    url: &str,
    key: Option<String>,
    model: &str,
    mock_dim: usize,
) -> Result<std::sync::Arc<dyn EmbeddingProvider>> {
    if url == "mock" || url.starts_with("mock:") {
        Ok(std::sync::Arc::new(MockEmbedder::new(mock_dim)))
    } else {
        Ok(std::sync::Arc::new(HttpEmbedder::new(url, key, model)?))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct CacheMeta {
    dim: usize,
    provider_tag: String,
    ids: Vec<NodeId>,
}

/// Node id → embedding rows, all of one dimension and one provider.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeEmbeddingCache {
    dim: usize,
    provider_tag: String,
    ids: Vec<NodeId>,
    data: Vec<f32>,
    slots: HashMap<NodeId, usize>,
}

fn sibling(stem: &Path, suffix: &str) -> PathBuf {
    let mut s: OsString = stem.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn vec_path(stem: &Path) -> PathBuf {
    sibling(stem, ".vec")
}

pub fn meta_path(stem: &Path) -> PathBuf {
    sibling(stem, ".meta.json")
}

impl NodeEmbeddingCache {
    pub fn new(dim: usize, provider_tag: impl Into<String>) -> Self {
        Self {
            dim,
            provider_tag: provider_tag.into(),
            ids: Vec::new(),
            data: Vec::new(),
            slots: HashMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn provider_tag(&self) -> &str {
        &self.provider_tag
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[NodeId] {
        &self.ids
    }

    pub fn contains(&self, id: NodeId) -> bool {
        self.slots.contains_key(&id)
    }

    pub fn get(&self, id: NodeId) -> Option<&[f32]> {
        self.slots
            .get(&id)
            .map(|&s| &self.data[s * self.dim..(s + 1) * self.dim])
    }

    /// Inserts or replaces a row.
    pub fn insert(&mut self, id: NodeId, vector: &[f32]) -> Result<()> {
        if vector.len() != self.dim {
            return Err(EmbedError::DimensionMismatch {
                expected: self.dim,
                found: vector.len(),
            });
        }
        if vector.iter().any(|x| !x.is_finite()) {
            return Err(EmbedError::NonFinite);
        }
        match self.slots.get(&id) {
            Some(&s) => self.data[s * self.dim..(s + 1) * self.dim].copy_from_slice(vector),
            None => {
                self.slots.insert(id, self.ids.len());
                self.ids.push(id);
                self.data.extend_from_slice(vector);
            }
        }
        Ok(())
    }

    /// Rows in storage order.
    pub fn iter(&self) -> impl Iterator<Item = (NodeId, &[f32])> + '_ {
        self.ids
            .iter()
            .zip(self.data.chunks_exact(self.dim.max(1)))
            .map(|(&id, row)| (id, row))
    }

    /// Node ids of `graph` that have no row.
    pub fn missing(&self, graph: &KnowledgeGraph) -> Vec<NodeId> {
        graph
            .nodes()
            .iter()
            .map(|n| n.id)
            .filter(|id| !self.contains(*id))
            .collect()
    }

    pub fn check_provider(&self, provider_tag: &str) -> Result<()> {
        if self.provider_tag != provider_tag {
            return Err(EmbedError::ProviderMismatch {
                cache: self.provider_tag.clone(),
                provider: provider_tag.to_string(),
            });
        }
        Ok(())
    }

    fn sort_by_id(&mut self) {
        if self.ids.windows(2).all(|w| w[0] < w[1]) {
            return;
        }
        let mut order: Vec<usize> = (0..self.ids.len()).collect();
        order.sort_by_key(|&i| self.ids[i]);
        let mut data = Vec::with_capacity(self.data.len());
        let mut ids = Vec::with_capacity(self.ids.len());
        for i in order {
            ids.push(self.ids[i]);
            data.extend_from_slice(&self.data[i * self.dim..(i + 1) * self.dim]);
        }
        self.slots = ids.iter().enumerate().map(|(s, &id)| (id, s)).collect();
        self.ids = ids;
        self.data = data;
    }

    fn meta(&self) -> CacheMeta {
        CacheMeta {
            dim: self.dim,
            provider_tag: self.provider_tag.clone(),
            ids: self.ids.clone(),
        }
    }

    fn write_meta(&self, stem: &Path) -> Result<()> {
        let path = meta_path(stem);
        let json = serde_json::to_vec(&self.meta()).expect("meta serializes");
        write_atomic(&path, &json)
    }

    /// Writes both files, rows sorted by node id.
    pub fn save(&mut self, stem: &Path) -> Result<()> {
        self.sort_by_id();
        let mut bytes = Vec::with_capacity(self.data.len() * 4);
        for x in &self.data {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
        write_atomic(&vec_path(stem), &bytes)?;
        self.write_meta(stem)
    }

    fn append(&self, stem: &Path, from_row: usize) -> Result<()> {
        let path = vec_path(stem);
        let mut bytes = Vec::new();
        for x in &self.data[from_row * self.dim..] {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
        let io = |e: std::io::Error| EmbedError::Cache {
            path: path.clone(),
            message: e.to_string(),
        };
        let mut f = OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(&path)
            .map_err(io)?;
        // drop any torn tail past the rows the meta file vouches for
        let keep = (from_row * self.dim * 4) as u64;
        f.set_len(keep).map_err(io)?;
        f.seek(SeekFrom::Start(keep)).map_err(io)?;
        f.write_all(&bytes).map_err(io)?;
        f.sync_data().map_err(io)?;
        self.write_meta(stem)
    }

    pub fn exists(stem: &Path) -> bool {
        meta_path(stem).exists()
    }

    /// Reads a cache; rows beyond the meta's id list (an interrupted
    /// append) are ignored.
    pub fn load(stem: &Path) -> Result<Self> {
        let mpath = meta_path(stem);
        let bad = |path: &Path, message: String| EmbedError::Cache {
            path: path.to_path_buf(),
            message,
        };
        let meta_bytes = fs::read(&mpath).map_err(|e| bad(&mpath, e.to_string()))?;
        let meta: CacheMeta =
            serde_json::from_slice(&meta_bytes).map_err(|e| bad(&mpath, e.to_string()))?;
        if meta.dim == 0 || meta.provider_tag.is_empty() {
            return Err(bad(&mpath, "dim and provider_tag must be set".into()));
        }
        let vpath = vec_path(stem);
        let raw = fs::read(&vpath).map_err(|e| bad(&vpath, e.to_string()))?;
        let need = meta.ids.len() * meta.dim * 4;
        if raw.len() < need {
            return Err(bad(
                &vpath,
                format!("holds {} bytes, meta requires {need}", raw.len()),
            ));
        }
        let mut cache = NodeEmbeddingCache::new(meta.dim, meta.provider_tag);
        for (i, id) in meta.ids.iter().enumerate() {
            let row: Vec<f32> = raw[i * meta.dim * 4..(i + 1) * meta.dim * 4]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if cache.contains(*id) {
                return Err(bad(&mpath, format!("duplicate id {id}")));
            }
            cache.insert(*id, &row).map_err(|e| bad(&vpath, e.to_string()))?;
        }
        Ok(cache)
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let io = |e: std::io::Error| EmbedError::Cache {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io)?;
    }
    let tmp = sibling(path, ".tmp");
    fs::write(&tmp, bytes).map_err(io)?;
    fs::rename(&tmp, path).map_err(io)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PrecomputeOptions {
    pub batch_size: usize,
    pub max_in_flight: usize,
    pub retry: RetryPolicy,
}

impl Default for PrecomputeOptions {
    fn default() -> Self {
        Self {
            batch_size: 32,
            max_in_flight: 8,
            retry: RetryPolicy::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PrecomputeStats {
    pub already_cached: usize,
    pub embedded: usize,
    pub batches: usize,
}

/// Embeds node names missing from the cache at `stem`, persisting after
/// every round of batches so an interrupted run resumes where it stopped.
pub fn precompute_node_embeddings(
    graph: &KnowledgeGraph,
    provider: &dyn EmbeddingProvider,
    node_subset: Option<&[NodeId]>,
    stem: &Path,
    opts: PrecomputeOptions,
) -> Result<(NodeEmbeddingCache, PrecomputeStats)> {
    let tag = provider.tag();
    let mut cache = if NodeEmbeddingCache::exists(stem) {
        let c = NodeEmbeddingCache::load(stem)?;
        c.check_provider(&tag)?;
        Some(c)
    } else {
        None
    };
    let mut wanted: Vec<NodeId> = match node_subset {
        Some(ids) => {
            for &id in ids {
                graph.node(id).map_err(|e| EmbedError::Cache {
                    path: stem.to_path_buf(),
                    message: e.to_string(),
                })?;
            }
            ids.to_vec()
        }
        None => graph.nodes().iter().map(|n| n.id).collect(),
    };
    wanted.sort();
    wanted.dedup();
    let mut stats = PrecomputeStats::default();
    let todo: Vec<NodeId> = wanted
        .into_iter()
        .filter(|id| {
            let have = cache.as_ref().is_some_and(|c| c.contains(*id));
            stats.already_cached += have as usize;
            !have
        })
        .collect();

    let batch = opts.batch_size.max(1);
    let round = batch * opts.max_in_flight.max(1);
    for chunk in todo.chunks(round) {
        let batches: Vec<&[NodeId]> = chunk.chunks(batch).collect();
        let results: Vec<Result<Vec<Vec<f32>>>> = batches
            .par_iter()
            .map(|ids| {
                let texts: Vec<String> = ids
                    .iter()
                    .map(|id| graph.name(*id).unwrap_or_default().to_string())
                    .collect();
                embed_texts(provider, &texts, opts.retry)
            })
            .collect();
        let start_row = cache.as_ref().map_or(0, |c| c.len());
        let mut failure = None;
        for (ids, res) in batches.iter().zip(results) {
            match res {
                Ok(vectors) => {
                    stats.batches += 1;
                    for (id, v) in ids.iter().zip(vectors) {
                        let c = cache.get_or_insert_with(|| NodeEmbeddingCache::new(v.len(), tag.clone()));
                        if let Err(e) = c.insert(*id, &v) {
                            failure.get_or_insert(e);
                            break;
                        }
                        stats.embedded += 1;
                    }
                }
                Err(e) => {
                    failure.get_or_insert(e);
                }
            }
        }
        if let Some(c) = &cache {
            if c.len() > start_row {
                c.append(stem, start_row)?;
            }
        }
        if let Some(e) = failure {
            return Err(e);
        }
    }

    let mut cache = cache.unwrap_or_else(|| NodeEmbeddingCache::new(1, tag.clone()));
    if !cache.is_empty() {
        cache.save(stem)?;
    }
    Ok((cache, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kgstore::{EntityType, GraphBuilder};
    use proptest::prelude::*;

    fn fast() -> RetryPolicy {
        RetryPolicy {
            max_attempts: 2,
            backoff_base_ms: 1,
        }
    }

    #[test]
    fn cosine_reference_cases() {
        let v = [0.3f32, -1.2, 4.0];
        assert!((cosine::<f32, f64>(&v, &v).unwrap() - 1.0).abs() < 1e-6);
        assert_eq!(cosine::<f64, f64>(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let c: f64 = cosine(&[1.0f64, 0.0], &[1.0, 1.0]).unwrap();
        assert!((c - 0.7071).abs() < 1e-4);
        assert_eq!(cosine::<f32, f64>(&[0.0, 0.0], &[1.0, 1.0]).unwrap(), 0.0);
        assert!(matches!(
            cosine::<f32, f64>(&[1.0], &[1.0, 2.0]),
            Err(EmbedError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn top_k_ordering_and_ties() {
        // query along x; candidate scores are their x components
        let q = [1.0f32, 0.0];
        let a = [0.9f32, (1.0f32 - 0.81).sqrt()];
        let b = [0.5f32, (0.75f32).sqrt()];
        let c = [0.1f32, (0.99f32).sqrt()];
        let cands = vec![(NodeId(2), &c[..]), (NodeId(0), &a[..]), (NodeId(1), &b[..])];
        let top: Vec<(NodeId, f64)> = top_k_similar(&q, cands.clone(), 2).unwrap();
        assert_eq!(top.iter().map(|t| t.0).collect::<Vec<_>>(), [NodeId(0), NodeId(1)]);
        let all: Vec<(NodeId, f64)> = top_k_similar(&q, cands, 10).unwrap();
        assert_eq!(all.len(), 3);

        let same = [0.5f32, 0.5];
        let tied = vec![(NodeId(7), &same[..]), (NodeId(3), &same[..])];
        let top: Vec<(NodeId, f64)> = top_k_similar(&q, tied, 1).unwrap();
        assert_eq!(top[0].0, NodeId(3));
    }

    #[test]
    fn embedding_vector_rejects_bad_values() {
        assert!(EmbeddingVector::<f32>::new(vec![]).is_err());
        assert!(EmbeddingVector::new(vec![1.0f32, f32::NAN]).is_err());
        assert_eq!(EmbeddingVector::new(vec![1.0f32, 2.0]).unwrap().dim(), 2);
    }

    #[test]
    fn embed_text_contract() {
        let p = MockEmbedder::new(16);
        let v = embed_text(&p, "femoral artery", fast()).unwrap();
        assert_eq!(v.dim(), 16);
        assert!(v.as_slice().iter().all(|x| x.is_finite()));
        assert_eq!(v, embed_text(&p, "femoral artery", fast()).unwrap());
        assert!(matches!(embed_text(&p, "  ", fast()), Err(EmbedError::EmptyText)));
        let norm: f32 = v.as_slice().iter().map(|x| x * x).sum::<f32>().sqrt();
        assert!((norm - 1.0).abs() < 1e-5);
    }

    #[test]
    fn embed_retries_then_gives_up() {
        let p = MockEmbedder::new(4).failing_after(0);
        match embed_text(&p, "x", fast()) {
            Err(EmbedError::Provider(LlmError::Exhausted { attempts: 2, .. })) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn parses_embedding_response_shapes() {
        let v = serde_json::json!({"data": [
            {"embedding": [0.0, 1.0], "index": 1},
            {"embedding": [1.0, 0.0], "index": 0}
        ]});
        assert_eq!(parse_embedding_response(&v).unwrap(), vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let v = serde_json::json!([[1.0, 2.0]]);
        assert_eq!(parse_embedding_response(&v).unwrap(), vec![vec![1.0, 2.0]]);
        assert!(parse_embedding_response(&serde_json::json!({"x": 1})).is_err());
    }

    fn three_nodes() -> KnowledgeGraph {
        let mut b = GraphBuilder::new();
        b.add_node(EntityType::Disease, "hypertension");
        b.add_node(EntityType::Drug, "lisinopril");
        b.add_node(EntityType::Anatomy, "femoral artery");
        b.build().unwrap()
    }

    fn one_at_a_time() -> PrecomputeOptions {
        PrecomputeOptions {
            batch_size: 1,
            max_in_flight: 1,
            retry: fast(),
        }
    }

    #[test]
    fn precompute_covers_and_is_idempotent() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("nodes");
        let g = three_nodes();
        let p = MockEmbedder::new(8);
        let (cache, stats) = precompute_node_embeddings(&g, &p, None, &stem, one_at_a_time()).unwrap();
        assert_eq!(cache.len(), 3);
        assert_eq!(stats.embedded, 3);
        assert_eq!(p.calls(), 3);
        assert_eq!(cache.get(NodeId(1)).unwrap(), &hash_vector("lisinopril", 8)[..]);

        let p2 = MockEmbedder::new(8);
        let (again, stats) = precompute_node_embeddings(&g, &p2, None, &stem, one_at_a_time()).unwrap();
        assert_eq!(p2.calls(), 0);
        assert_eq!(stats.already_cached, 3);
        assert_eq!(again, cache);
    }

    #[test]
    fn interrupted_precompute_resumes() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("nodes");
        let g = three_nodes();
        let flaky = MockEmbedder::new(8).failing_after(2);
        assert!(precompute_node_embeddings(&g, &flaky, None, &stem, one_at_a_time()).is_err());
        let partial = NodeEmbeddingCache::load(&stem).unwrap();
        assert_eq!(partial.len(), 2);

        let healthy = MockEmbedder::new(8);
        let (cache, _) = precompute_node_embeddings(&g, &healthy, None, &stem, one_at_a_time()).unwrap();
        assert_eq!(healthy.calls(), 1);
        assert_eq!(cache.len(), 3);
    }

    #[test]
    fn precompute_rejects_other_provider_or_dim() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("nodes");
        let g = three_nodes();
        let subset = [NodeId(0)];
        precompute_node_embeddings(&g, &MockEmbedder::new(8), Some(&subset), &stem, one_at_a_time())
            .unwrap();
        let other = MockEmbedder::new(8).with_tag("other-model");
        assert!(matches!(
            precompute_node_embeddings(&g, &other, None, &stem, one_at_a_time()),
            Err(EmbedError::ProviderMismatch { .. })
        ));
        let wider = MockEmbedder::new(16).with_tag("mock-hash-8");
        assert!(matches!(
            precompute_node_embeddings(&g, &wider, None, &stem, one_at_a_time()),
            Err(EmbedError::DimensionMismatch { expected: 8, found: 16 })
        ));
    }

    #[test]
    fn parallel_precompute_matches_sequential() {
        let dir = tempfile::tempdir().unwrap();
        let mut b = GraphBuilder::new();
        for i in 0..57 {
            b.add_node(EntityType::Drug, format!("drug {i}"));
        }
        let g = b.build().unwrap();
        let par = PrecomputeOptions {
            batch_size: 4,
            max_in_flight: 3,
            retry: fast(),
        };
        let (a, _) =
            precompute_node_embeddings(&g, &MockEmbedder::new(8), None, &dir.path().join("a"), par).unwrap();
        let (b, _) = precompute_node_embeddings(
            &g,
            &MockEmbedder::new(8),
            None,
            &dir.path().join("b"),
            one_at_a_time(),
        )
        .unwrap();
        assert_eq!(a, b);
        assert_eq!(
            fs::read(vec_path(&dir.path().join("a"))).unwrap(),
            fs::read(vec_path(&dir.path().join("b"))).unwrap()
        );
    }

    #[test]
    fn load_ignores_torn_tail_and_rejects_short_file() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("c");
        let mut c = NodeEmbeddingCache::new(2, "t");
        c.insert(NodeId(0), &[1.0, 2.0]).unwrap();
        c.save(&stem).unwrap();
        let mut f = OpenOptions::new().append(true).open(vec_path(&stem)).unwrap();
        f.write_all(&[0u8; 5]).unwrap();
        assert_eq!(NodeEmbeddingCache::load(&stem).unwrap(), c);
        fs::write(vec_path(&stem), [0u8; 3]).unwrap();
        assert!(NodeEmbeddingCache::load(&stem).is_err());
    }

    proptest! {
        #[test]
        fn cache_roundtrip_is_bit_identical(rows in prop::collection::vec(prop::collection::vec(-1e6f32..1e6, 5), 1..20)) {
            let dir = tempfile::tempdir().unwrap();
            let stem = dir.path().join("c");
            let mut c = NodeEmbeddingCache::new(5, "t");
            for (i, r) in rows.iter().enumerate().rev() {
                c.insert(NodeId(i as u32), r).unwrap();
            }
            c.save(&stem).unwrap();
            let back = NodeEmbeddingCache::load(&stem).unwrap();
            for (i, r) in rows.iter().enumerate() {
                let got = back.get(NodeId(i as u32)).unwrap();
                prop_assert!(got.iter().zip(r).all(|(a, b)| a.to_bits() == b.to_bits()));
            }
        }

        #[test]
        fn cosine_is_symmetric(a in prop::collection::vec(-10f32..10.0, 8), b in prop::collection::vec(-10f32..10.0, 8)) {
            let ab: f64 = cosine(&a, &b).unwrap();
            let ba: f64 = cosine(&b, &a).unwrap();
            prop_assert!((ab - ba).abs() < 1e-6);
            prop_assert!((-1.0..=1.0).contains(&ab));
        }
    }
}
