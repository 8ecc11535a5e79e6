//! Batch stages driven by one JSON config: ingest, embed-nodes, augment,
//! evaluate, report.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::bench::{self, AugmentedItem, DatasetRecord, McqItem, Provenance, ShuffleMode};
use crate::distract::{self, DistractorSet, GenerationConfig};
use crate::embed::{self, EmbeddingProvider, NodeEmbeddingCache, PrecomputeOptions, PrecomputeStats};
use crate::entitymap::{Mapper, MappingConfig};
use crate::evalrun::{self, EvalConfig, ReportFormat, ReportTable};
use crate::kgstore::{self, CacheStatus, GraphOptions, KnowledgeGraph};
use crate::llm::{self, ChatClient, ModelRole, PromptTemplate, RetryPolicy};
use crate::semwalk::{self, PathRecord, WalkConfig};
use crate::util::sha256_hex;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Graph(#[from] kgstore::KgError),
    #[error(transparent)]
    Embed(#[from] embed::EmbedError),
    #[error(transparent)]
    Llm(#[from] llm::LlmError),
    #[error(transparent)]
    Bench(#[from] bench::BenchError),
    #[error(transparent)]
    Eval(#[from] evalrun::EvalError),
    #[error(transparent)]
    Walk(#[from] semwalk::WalkError),
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathsConfig {
    pub kg_nodes: PathBuf,
    pub kg_edges: PathBuf,
    pub graph_cache: PathBuf,
    /// Stem of the `.vec` / `.meta.json` pair.
    pub embedding_cache: PathBuf,
    pub datasets: Vec<PathBuf>,
    pub output_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            kg_nodes: "kg/nodes.csv".into(),
            kg_edges: "kg/edges.csv".into(),
            graph_cache: "cache/graph.bin".into(),
            embedding_cache: "cache/nodes".into(),
            datasets: Vec::new(),
            output_dir: "out".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProviderConfig {
    /// Chat endpoint; `mock:<script.jsonl>` selects the scripted mock.
    pub llm_url: Option<String>,
    /// Embedding endpoint; `mock` selects the hash embedder.
    pub embed_url: Option<String>,
    pub embed_model: String,
    /// Dimension of the mock embedder.
    pub mock_embedding_dim: usize,
    /// Model used for entity extraction and fallback selection.
    pub mapping_model: String,
    pub generation_model: String,
    pub max_concurrency: usize,
    pub retry: RetryPolicy,
    pub embed_batch_size: usize,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        Self {
            llm_url: None,
            embed_url: None,
            embed_model: "text-embedding-3-small".into(),
            mock_embedding_dim: 64,
            mapping_model: "deepseek-chat".into(),
            generation_model: "deepseek-chat".into(),
            max_concurrency: 8,
            retry: RetryPolicy::default(),
            embed_batch_size: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub paths: PathsConfig,
    pub mapping: MappingConfig,
    pub walk: WalkConfig,
    /// Traverse edges in both directions.
    pub undirected: bool,
    pub generation: GenerationConfig,
    pub eval: EvalConfig,
    pub global_seed: u64,
    pub shuffle_mode: ShuffleMode,
    pub providers: ProviderConfig,
    /// `evaluate` fails when any dataset exceeds this abstention rate.
    pub max_abstention_rate: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            paths: PathsConfig::default(),
            mapping: MappingConfig::default(),
            walk: WalkConfig::default(),
            undirected: true,
            generation: GenerationConfig::default(),
            eval: EvalConfig::default(),
            global_seed: 0,
            shuffle_mode: ShuffleMode::default(),
            providers: ProviderConfig::default(),
            max_abstention_rate: 0.10,
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))
    }

    /// Applies `dotted.key=value`; the value is parsed as JSON, falling back
    /// to a plain string.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| PipelineError::Config(format!("override {assignment:?} is not key=value")))?;
        let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let mut tree = serde_json::to_value(&*self).expect("config serializes");
        let mut slot = &mut tree;
        for part in key.trim().split('.') {
            slot = slot
                .as_object_mut()
                .and_then(|m| m.get_mut(part))
                .ok_or_else(|| PipelineError::Config(format!("unknown config key {key:?}")))?;
        }
        *slot = value;
        *self = serde_json::from_value(tree).map_err(|e| PipelineError::Config(format!("{key}: {e}")))?;
        Ok(())
    }

    /// Fills endpoint settings from `KGGDG_*` environment variables.
    pub fn apply_env(&mut self) {
        if let Ok(v) = std::env::var("KGGDG_LLM_URL") {
            self.providers.llm_url = Some(v);
        }
        if let Ok(v) = std::env::var("KGGDG_EMBED_URL") {
            self.providers.embed_url = Some(v);
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |e: String| PipelineError::Config(e);
        self.mapping.validate().map_err(|e| cfg(e.to_string()))?;
        self.walk.validate().map_err(cfg)?;
        self.generation.validate().map_err(cfg)?;
        self.eval.validate().map_err(|e| cfg(e.to_string()))?;
        self.providers.retry.validate().map_err(|e| cfg(e.to_string()))?;
        if self.providers.max_concurrency == 0 || self.providers.embed_batch_size == 0 {
            return Err(cfg("max_concurrency and embed_batch_size must be >= 1".into()));
        }
        if self.providers.mock_embedding_dim == 0 {
            return Err(cfg("mock_embedding_dim must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.max_abstention_rate) {
            return Err(cfg("max_abstention_rate must be in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn graph_options(&self) -> GraphOptions {
        GraphOptions {
            undirected: self.undirected,
        }
    }

    pub fn sha256(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("config serializes"))
    }

    fn mapping_role(&self) -> ModelRole {
        ModelRole::new(self.providers.mapping_model.clone(), 0.0, 1024)
    }

    fn generation_role(&self) -> ModelRole {
        ModelRole::new(
            self.providers.generation_model.clone(),
            self.generation.temperature,
            self.generation.max_tokens,
        )
    }
}

/// Live clients for the chat and embedding endpoints.
#[derive(Clone)]
pub struct Providers {
    pub chat: ChatClient,
    pub embedder: Arc<dyn EmbeddingProvider>,
}

impl Providers {
    pub fn new(chat: Arc<dyn llm::ChatBackend>, embedder: Arc<dyn EmbeddingProvider>, cfg: &PipelineConfig) -> Self {
        Self {
            chat: ChatClient::new(chat, cfg.providers.max_concurrency, cfg.providers.retry),
            embedder,
        }
    }

    /// Chat only; any embedding request fails. Enough for direct generation.
    pub fn chat_only(chat: Arc<dyn llm::ChatBackend>, cfg: &PipelineConfig) -> Self {
        Self::new(chat, Arc::new(NoEmbedder), cfg)
    }

    /// Builds clients from config URLs and `KGGDG_*_KEY` variables.
    pub fn from_config(cfg: &PipelineConfig) -> Result<Self> {
        let chat = Self::chat_backend(cfg)?;
        let embedder = Self::embedder(cfg)?;
        Ok(Self::new(chat, embedder, cfg))
    }

    pub fn chat_backend(cfg: &PipelineConfig) -> Result<Arc<dyn llm::ChatBackend>> {
        let url = cfg.providers.llm_url.as_deref().ok_or_else(|| {
            PipelineError::Config("no chat endpoint: set providers.llm_url or KGGDG_LLM_URL".into())
        })?;
        Ok(llm::backend_from_url(url, std::env::var("KGGDG_LLM_KEY").ok())?)
    }

    pub fn embedder(cfg: &PipelineConfig) -> Result<Arc<dyn EmbeddingProvider>> {
        let url = cfg.providers.embed_url.as_deref().ok_or_else(|| {
            PipelineError::Config("no embedding endpoint: set providers.embed_url or KGGDG_EMBED_URL".into())
        })?;
        Ok(embed::provider_from_url(
            url,
            std::env::var("KGGDG_EMBED_KEY").ok(),
            &cfg.providers.embed_model,
            cfg.providers.mock_embedding_dim,
        )?)
    }
}

struct NoEmbedder;

impl EmbeddingProvider for NoEmbedder {
    fn tag(&self) -> String {
        "none".into()
    }

    fn embed_batch(&self, _: &[String]) -> embed::Result<Vec<Vec<f32>>> {
        Err(llm::LlmError::Config("no embedding endpoint configured".into()).into())
    }
}

pub fn ingest(cfg: &PipelineConfig) -> Result<(KnowledgeGraph, CacheStatus)> {
    let p = &cfg.paths;
    let (g, status) = kgstore::load_graph_cached(&p.kg_nodes, &p.kg_edges, &p.graph_cache, cfg.graph_options())?;
    log::info!(
        "graph: {} nodes, {} edges ({status:?})",
        g.node_count(),
        g.edge_count()
    );
    Ok((g, status))
}

pub fn embed_nodes(cfg: &PipelineConfig, embedder: &dyn EmbeddingProvider) -> Result<PrecomputeStats> {
    let (graph, _) = ingest(cfg)?;
    let opts = PrecomputeOptions {
        batch_size: cfg.providers.embed_batch_size,
        max_in_flight: cfg.providers.max_concurrency,
        retry: cfg.providers.retry,
    };
    let (_, stats) = embed::precompute_node_embeddings(&graph, embedder, None, &cfg.paths.embedding_cache, opts)?;
    log::info!(
        "embeddings: {} cached, {} new in {} batches",
        stats.already_cached,
        stats.embedded,
        stats.batches
    );
    Ok(stats)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AugmentMethod {
    Kggdg,
    Direct,
    Original,
}

impl AugmentMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            AugmentMethod::Kggdg => "kggdg",
            AugmentMethod::Direct => "direct",
            AugmentMethod::Original => "original",
        }
    }
}

impl std::str::FromStr for AugmentMethod {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "kggdg" => Ok(Self::Kggdg),
            "direct" => Ok(Self::Direct),
            "original" => Ok(Self::Original),
            other => Err(format!("unknown method {other:?}")),
        }
    }
}

/// Files written by one `augment` call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentOutput {
    pub dataset: PathBuf,
    pub paths: Option<PathBuf>,
    pub manifest: PathBuf,
    pub provenance_counts: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    method: AugmentMethod,
    shuffle_mode: ShuffleMode,
    global_seed: u64,
    config_sha256: String,
    templates: BTreeMap<String, String>,
    input: String,
    input_sha256: String,
    output_sha256: String,
    items: usize,
    provenance_counts: BTreeMap<String, usize>,
}

struct KgContext {
    graph: KnowledgeGraph,
    cache: NodeEmbeddingCache,
}

fn load_kg_context(cfg: &PipelineConfig, embedder: &dyn EmbeddingProvider) -> Result<KgContext> {
    let (graph, _) = ingest(cfg)?;
    let stem = &cfg.paths.embedding_cache;
    let cache = if NodeEmbeddingCache::exists(stem) {
        NodeEmbeddingCache::load(stem)?
    } else {
        log::warn!("no node embeddings at {}; run embed-nodes first", stem.display());
        NodeEmbeddingCache::new(1, embedder.tag())
    };
    if !cache.is_empty() {
        cache.check_provider(&embedder.tag())?;
        let missing = cache.missing(&graph).len();
        if missing > 0 {
            log::warn!("{missing} graph nodes have no embedding");
        }
    }
    Ok(KgContext { graph, cache })
}

/// One item's outcome before placement.
struct Generated {
    set: Option<DistractorSet>,
    paths: Vec<PathRecord>,
}

fn kggdg_distractors(
    cfg: &PipelineConfig,
    providers: &Providers,
    kg: &KgContext,
    item: &McqItem,
    k: usize,
) -> Generated {
    let role = cfg.mapping_role();
    let mapper = Mapper {
        graph: &kg.graph,
        cache: &kg.cache,
        chat: &providers.chat,
        embedder: providers.embedder.as_ref(),
        role: &role,
        cfg: cfg.mapping,
        embed_retry: cfg.providers.retry,
    };
    let question = item.question.as_str();
    let answer = item.answer();
    let mapped = match mapper.map_all(question, answer) {
        Ok(m) => m,
        Err(e) => {
            log::warn!("item {}: entity mapping failed ({e}); using direct generation", item.id);
            return Generated {
                set: None,
                paths: Vec::new(),
            };
        }
    };
    if mapped.question_nodes.is_empty() {
        log::info!("item {}: no question entity mapped; using direct generation", item.id);
        return Generated {
            set: None,
            paths: Vec::new(),
        };
    }
    let walked = semwalk::guidance_vector(question, answer, providers.embedder.as_ref(), cfg.providers.retry)
        .and_then(|z| {
            semwalk::semantic_walk(
                &kg.graph,
                &kg.cache,
                &mapped.question_nodes,
                &mapped.answer_nodes,
                &z,
                &cfg.walk,
            )
        });
    let paths = match walked {
        Ok(p) => semwalk::select_paths(p, cfg.walk.max_paths),
        Err(e) => {
            log::warn!("item {}: walk failed ({e}); using direct generation", item.id);
            Vec::new()
        }
    };
    if paths.is_empty() {
        return Generated {
            set: None,
            paths: Vec::new(),
        };
    }
    let texts: Vec<String> = paths.iter().map(|p| semwalk::serialize_path(p, &kg.graph)).collect();
    let records = paths.iter().map(|p| PathRecord::new(&item.id, p, &kg.graph)).collect();
    let set = distract::generate_distractors(
        &providers.chat,
        &cfg.generation_role(),
        question,
        answer,
        &texts,
        k,
        cfg.generation.max_reasks,
    );
    match set {
        Ok(s) => Generated {
            set: Some(s),
            paths: records,
        },
        Err(e) => {
            log::warn!("item {}: path-guided generation failed ({e}); using direct generation", item.id);
            Generated {
                set: None,
                paths: records,
            }
        }
    }
}

fn augment_one(
    cfg: &PipelineConfig,
    providers: Option<&Providers>,
    kg: Option<&KgContext>,
    item: &McqItem,
    method: AugmentMethod,
    mode: ShuffleMode,
) -> Result<(AugmentedItem, Vec<PathRecord>)> {
    let seed = cfg.global_seed;
    let k = item.options.len() - 1;
    if let Some(want) = cfg.generation.k.filter(|&want| want != k) {
        return Err(PipelineError::Config(format!(
            "generation.k = {want} but item {} needs {k} distractors",
            item.id
        )));
    }
    let (Some(providers), AugmentMethod::Kggdg | AugmentMethod::Direct) = (providers, method) else {
        return Ok((bench::keep_original(item, mode, seed)?, Vec::new()));
    };
    let mut generated = match (method, kg) {
        (AugmentMethod::Kggdg, Some(kg)) => kggdg_distractors(cfg, providers, kg, item, k),
        _ => Generated {
            set: None,
            paths: Vec::new(),
        },
    };
    if generated.set.is_none() {
        match distract::generate_direct(
            &providers.chat,
            &cfg.generation_role(),
            &item.question,
            item.answer(),
            k,
            cfg.generation.max_reasks,
        ) {
            Ok(s) => generated.set = Some(s),
            Err(e) => log::error!("item {}: direct generation failed ({e}); keeping original options", item.id),
        }
    }
    let out = match generated.set {
        Some(set) => bench::augment_item(item, set, mode, seed)?,
        None => bench::keep_original(item, mode, seed)?,
    };
    Ok((out, generated.paths))
}

fn output_stem(cfg: &PipelineConfig, input: &Path, method: AugmentMethod, mode: ShuffleMode) -> PathBuf {
    let stem = input.file_stem().and_then(|s| s.to_str()).unwrap_or("dataset");
    cfg.paths
        .output_dir
        .join(format!("{stem}.{}.{}", method.as_str(), mode.as_str()))
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut buf = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut buf, r).expect("record serializes");
        buf.push(b'\n');
    }
    fs::write(path, buf).map_err(io_err(path))
}

/// Rebuilds every item of `input` with new distractors and writes the
/// dataset, path audit and manifest under the output directory.
pub fn augment(
    cfg: &PipelineConfig,
    providers: Option<&Providers>,
    input: &Path,
    method: AugmentMethod,
    mode: ShuffleMode,
) -> Result<AugmentOutput> {
    cfg.validate()?;
    if method != AugmentMethod::Original && providers.is_none() {
        return Err(PipelineError::Config(format!("method {} needs providers", method.as_str())));
    }
    let items = bench::load_dataset(input)?;
    let kg = match (method, providers) {
        (AugmentMethod::Kggdg, Some(p)) => Some(load_kg_context(cfg, p.embedder.as_ref())?),
        _ => None,
    };
    let results: Vec<(AugmentedItem, Vec<PathRecord>)> = items
        .par_iter()
        .map(|it| augment_one(cfg, providers, kg.as_ref(), it, method, mode))
        .collect::<Result<_>>()?;

    fs::create_dir_all(&cfg.paths.output_dir).map_err(io_err(&cfg.paths.output_dir))?;
    let base = output_stem(cfg, input, method, mode);
    let with = |suffix: &str| {
        let mut s = base.clone().into_os_string();
        s.push(suffix);
        PathBuf::from(s)
    };
    let dataset_path = with(".jsonl");
    let augmented: Vec<AugmentedItem> = results.iter().map(|r| r.0.clone()).collect();
    bench::write_dataset(&augmented, &dataset_path)?;

    let paths_path = (method == AugmentMethod::Kggdg).then(|| with(".paths.jsonl"));
    if let Some(p) = &paths_path {
        let all: Vec<&PathRecord> = results.iter().flat_map(|r| &r.1).collect();
        write_jsonl(p, &all)?;
    }

    let mut provenance_counts = BTreeMap::new();
    for a in &augmented {
        *provenance_counts.entry(a.provenance.as_str().to_string()).or_insert(0) += 1;
    }
    let templates = [
        PromptTemplate::qa_extract(),
        PromptTemplate::fallback_select(),
        PromptTemplate::misleading_distractor(),
    ]
    .into_iter()
    .map(|t| (t.name.clone(), t.sha256()))
    .collect();
    let input_bytes = fs::read(input).map_err(io_err(input))?;
    let output_bytes = fs::read(&dataset_path).map_err(io_err(&dataset_path))?;
    let manifest = Manifest {
        method,
        shuffle_mode: mode,
        global_seed: cfg.global_seed,
        config_sha256: cfg.sha256(),
        templates,
        input: input.display().to_string(),
        input_sha256: sha256_hex(&input_bytes),
        output_sha256: sha256_hex(&output_bytes),
        items: augmented.len(),
        provenance_counts: provenance_counts.clone(),
    };
    let manifest_path = with(".manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&manifest_path, text + "\n").map_err(io_err(&manifest_path))?;
    log::info!("wrote {} ({} items, {provenance_counts:?})", dataset_path.display(), augmented.len());
    Ok(AugmentOutput {
        dataset: dataset_path,
        paths: paths_path,
        manifest: manifest_path,
        provenance_counts,
    })
}

/// Everything `evaluate` produced; also persisted as `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub model: String,
    pub tables: BTreeMap<ShuffleMode, ReportTable>,
    pub deltas: Option<Vec<evalrun::DeltaRow>>,
    /// Highest per-run abstention rate per (file, dataset tag).
    pub abstention: BTreeMap<String, f64>,
}

impl EvalSummary {
    pub fn worst_abstention(&self) -> f64 {
        self.abstention.values().copied().fold(0.0, f64::max)
    }
}

type CellKey = (ShuffleMode, Provenance, String);

/// Scores the configured answer model on each file and writes per-run
/// results, `report.md`, `report.csv` and `summary.json`.
pub fn evaluate(cfg: &PipelineConfig, chat: &ChatClient, files: &[PathBuf]) -> Result<EvalSummary> {
    cfg.validate()?;
    if files.is_empty() {
        return Err(PipelineError::Config("no datasets to evaluate".into()));
    }
    let out_dir = &cfg.paths.output_dir;
    let results_dir = out_dir.join("results");
    fs::create_dir_all(&results_dir).map_err(io_err(&results_dir))?;

    let mut cells: BTreeMap<CellKey, evalrun::AccuracySummary<f64>> = BTreeMap::new();
    let mut abstention = BTreeMap::new();
    for file in files {
        let records = bench::load_records(file)?;
        let items: Vec<McqItem> = records.iter().map(DatasetRecord::item).collect();
        let runs = evalrun::evaluate(chat, &items, &cfg.eval)?;
        let stem = file.file_stem().and_then(|s| s.to_str()).unwrap_or("dataset");
        for r in &runs {
            let p = results_dir.join(format!("{stem}.run{}.jsonl", r.run_index));
            write_jsonl(&p, &r.records(&items))?;
        }
        // items that fell back (kggdg -> direct -> original) still count
        // toward the method the file was generated with
        let method = records.iter().filter_map(|r| r.provenance).max().unwrap_or(Provenance::Original);
        let mut groups: BTreeMap<CellKey, Vec<usize>> = BTreeMap::new();
        for (i, rec) in records.iter().enumerate() {
            let key = (
                rec.shuffle_mode.unwrap_or(ShuffleMode::Unshuffled),
                method,
                rec.dataset.clone(),
            );
            groups.entry(key).or_default().push(i);
        }
        for (key, idx) in groups {
            let mut per_run = Vec::with_capacity(runs.len());
            let mut worst: f64 = 0.0;
            for r in &runs {
                let mut correct = 0usize;
                let mut abstained = 0usize;
                for &i in &idx {
                    match r.choices.get(&items[i].id).and_then(|c| c.index()) {
                        Some(c) if c == items[i].answer_index => correct += 1,
                        Some(_) => {}
                        None => abstained += 1,
                    }
                }
                per_run.push(100.0 * correct as f64 / idx.len() as f64);
                worst = worst.max(abstained as f64 / idx.len() as f64);
            }
            abstention.insert(format!("{}:{}", file.display(), key.2), worst);
            if cells.insert(key.clone(), evalrun::aggregate(&per_run)?).is_some() {
                log::warn!("duplicate cell {key:?}; keeping the last file's value");
            }
        }
    }

    let mut tables = BTreeMap::new();
    for mode in [ShuffleMode::Shuffled, ShuffleMode::Unshuffled] {
        let mine: Vec<(&CellKey, &evalrun::AccuracySummary<f64>)> =
            cells.iter().filter(|(k, _)| k.0 == mode).collect();
        if mine.is_empty() {
            continue;
        }
        let mut columns: Vec<String> = mine.iter().map(|(k, _)| k.2.clone()).collect();
        columns.sort();
        columns.dedup();
        let mut table = ReportTable::new(columns.clone());
        for method in [Provenance::Original, Provenance::Direct, Provenance::Kggdg] {
            let row: Option<Vec<_>> = columns
                .iter()
                .map(|c| cells.get(&(mode, method, c.clone())).cloned())
                .collect();
            match row {
                Some(row) => table.add_row(cfg.eval.model.clone(), method, row)?,
                None if mine.iter().any(|(k, _)| k.1 == method) => {
                    log::warn!("{} {} lacks some datasets; row omitted", mode.as_str(), method.as_str())
                }
                None => {}
            }
        }
        tables.insert(mode, table);
    }
    let deltas = match (tables.get(&ShuffleMode::Unshuffled), tables.get(&ShuffleMode::Shuffled)) {
        (Some(u), Some(s)) => match evalrun::delta_table(u, s) {
            Ok(d) => Some(d),
            Err(e) => {
                log::warn!("no delta table: {e}");
                None
            }
        },
        _ => None,
    };
    let summary = EvalSummary {
        model: cfg.eval.model.clone(),
        tables,
        deltas,
        abstention,
    };
    write_reports(out_dir, &summary)?;
    Ok(summary)
}

pub fn render_summary(summary: &EvalSummary, format: ReportFormat) -> String {
    let mut out = String::new();
    match format {
        ReportFormat::Markdown => {
            for (mode, t) in &summary.tables {
                out.push_str(&format!("## {}\n\n", mode.as_str()));
                out.push_str(&evalrun::render_report(t, format));
                out.push('\n');
            }
            if let Some(d) = &summary.deltas {
                out.push_str("## |Δ| (Avg.)\n\n");
                out.push_str(&evalrun::render_deltas(d));
            }
        }
        ReportFormat::Csv => {
            let mut header_done = false;
            for (mode, t) in &summary.tables {
                let text = evalrun::render_report(t, format);
                let mut lines = text.lines();
                let header = lines.next().unwrap_or_default();
                if !header_done {
                    out.push_str(&format!("Mode,{header}\n"));
                    header_done = true;
                }
                for l in lines {
                    out.push_str(&format!("{},{l}\n", mode.as_str()));
                }
            }
        }
    }
    out
}

fn write_reports(dir: &Path, summary: &EvalSummary) -> Result<()> {
    for (name, body) in [
        ("report.md", render_summary(summary, ReportFormat::Markdown)),
        ("report.csv", render_summary(summary, ReportFormat::Csv)),
        (
            "summary.json",
            serde_json::to_string_pretty(summary).expect("summary serializes") + "\n",
        ),
    ] {
        let p = dir.join(name);
        fs::write(&p, body).map_err(io_err(&p))?;
    }
    Ok(())
}

/// Re-renders a saved `summary.json`.
pub fn report(dir: &Path, format: ReportFormat) -> Result<String> {
    let p = dir.join("summary.json");
    let text = fs::read_to_string(&p).map_err(io_err(&p))?;
    let summary: EvalSummary =
        serde_json::from_str(&text).map_err(|e| PipelineError::Config(format!("{}: {e}", p.display())))?;
    Ok(render_summary(&summary, format))
}

/// SHA-256 of a file's bytes, hex encoded.
pub fn file_sha256(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path).map_err(io_err(path))?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_walk_dotted_keys() {
        let mut c = PipelineConfig::default();
        c.apply_override("walk.k=5").unwrap();
        c.apply_override("eval.model=gpt-4o").unwrap();
        c.apply_override("shuffle_mode=\"unshuffled\"").unwrap();
        assert_eq!(c.walk.k, 5);
        assert_eq!(c.eval.model, "gpt-4o");
        assert_eq!(c.shuffle_mode, ShuffleMode::Unshuffled);
        assert!(c.apply_override("walk.nope=1").is_err());
        assert!(c.apply_override("walk.k=\"x\"").is_err());
        assert!(c.apply_override("novalue").is_err());
    }

    #[test]
    fn validation_catches_bad_values() {
        let mut c = PipelineConfig::default();
        assert!(c.validate().is_ok());
        c.mapping.tau = 1.5;
        assert!(c.validate().is_err());
        let mut c = PipelineConfig::default();
        c.walk.k = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn config_round_trips_and_hash_is_stable() {
        let c = PipelineConfig::default();
        let text = serde_json::to_string(&c).unwrap();
        let back: PipelineConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.sha256(), c.sha256());
        let partial: PipelineConfig = serde_json::from_str(r#"{"global_seed": 9}"#).unwrap();
        assert_eq!(partial.global_seed, 9);
        assert_eq!(partial.walk, WalkConfig::default());
    }

    #[test]
    fn missing_endpoint_is_a_config_error() {
        let c = PipelineConfig::default();
        assert!(matches!(Providers::chat_backend(&c), Err(PipelineError::Config(_))));
    }
}
