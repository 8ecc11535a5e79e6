//! Entity extraction from a question/answer pair and entity-to-node binding.
//!
//! Binding tries, in order: a normalized exact name match, the nearest node
//! embedding when its cosine is strictly above `tau`, and finally a chat
//! model choosing among the `fallback_pool` nearest node names (or NONE).

use std::collections::HashSet;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::embed::{embed_text, top_k_similar, EmbedError, EmbeddingProvider, NodeEmbeddingCache};
use crate::kgstore::{EntityType, KnowledgeGraph, NodeId};
use crate::llm::{bindings, extract_json, render, ChatClient, LlmError, ModelRole, PromptTemplate, RetryPolicy};
use crate::Score;

#[derive(Debug, Error)]
pub enum MapError {
    #[error("question and answer must be non-empty")]
    EmptyInput,
    #[error("extraction output unusable after re-ask: {0}")]
    Unparseable(String),
    #[error("extraction returned no question and no answer entities")]
    BothEmpty,
    #[error("invalid mapping config: {0}")]
    Config(String),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
}

pub type Result<T, E = MapError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MappingConfig {
    pub tau: f64,
    pub fallback_pool: usize,
}

impl Default for MappingConfig {
    fn default() -> Self {
        Self {
            tau: 0.85,
            fallback_pool: 10,
        }
    }
}

impl MappingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(MapError::Config(format!("tau must be in (0,1), got {}", self.tau)));
        }
        if self.fallback_pool == 0 {
            return Err(MapError::Config("fallback_pool must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Question,
    Answer,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractedEntity {
    pub ordinal: u32,
    pub entity_type: EntityType,
    pub name: String,
    pub source: Source,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Exact,
    Similarity,
    LlmSelected,
    Unmapped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MappedEntity {
    pub entity: ExtractedEntity,
    pub node: Option<NodeId>,
    pub stage: Stage,
    pub score: Option<Score>,
    pub reason: Option<String>,
}

impl MappedEntity {
    fn unmapped(entity: ExtractedEntity, reason: Option<String>) -> Self {
        Self {
            entity,
            node: None,
            stage: Stage::Unmapped,
            score: None,
            reason,
        }
    }
}

const EXTRACT_REASK: &str = "\n\nYour previous reply could not be parsed. Reply with only the JSON object described above, with the keys \"Question Entity\" and \"Answer Entity\".";
const SELECT_REASK: &str = "\n\nYour previous selection was not in the similar entities list. SELECTED ENTITY MUST BE IN THE SIMILAR ENTITIES LIST. Choose one of them by name and index, or return NONE.";

fn parse_entity_list(
    obj: &Map<String, Value>,
    key: &str,
    source: Source,
) -> std::result::Result<Vec<ExtractedEntity>, String> {
    let Some(v) = obj.get(key) else {
        return Err(format!("missing \"{key}\""));
    };
    let Some(items) = v.as_array() else {
        return Err(format!("\"{key}\" is not an array"));
    };
    let mut out = Vec::new();
    for (i, item) in items.iter().enumerate() {
        let name = item.get("name").and_then(Value::as_str).map(str::trim).unwrap_or("");
        let ty = item.get("type").and_then(Value::as_str).unwrap_or("");
        let ordinal = match item.get("id") {
            Some(Value::Number(n)) => n.as_u64().map(|n| n as u32),
            Some(Value::String(s)) => s.trim().parse().ok(),
            _ => None,
        }
        .unwrap_or(i as u32 + 1);
        if name.is_empty() {
            log::warn!("dropping {key} entry {ordinal}: empty name");
            continue;
        }
        match EntityType::from_str(ty) {
            Ok(entity_type) => out.push(ExtractedEntity {
                ordinal,
                entity_type,
                name: name.to_string(),
                source,
            }),
            Err(_) => log::warn!("dropping entity {name:?}: type {ty:?} is not in the vocabulary"),
        }
    }
    Ok(out)
}

fn parse_extraction(raw: &str) -> std::result::Result<(Vec<ExtractedEntity>, Vec<ExtractedEntity>), String> {
    let obj = extract_json(raw).map_err(|e| e.to_string())?;
    let q = parse_entity_list(&obj, "Question Entity", Source::Question)?;
    let a = parse_entity_list(&obj, "Answer Entity", Source::Answer)?;
    Ok((q, a))
}

/// Asks the model for question and answer entities; one corrective re-ask on
/// unparseable output.
pub fn extract_entities(
    question: &str,
    answer: &str,
    client: &ChatClient,
    role: &ModelRole,
) -> Result<(Vec<ExtractedEntity>, Vec<ExtractedEntity>)> {
    if question.trim().is_empty() || answer.trim().is_empty() {
        return Err(MapError::EmptyInput);
    }
    let prompt = render(
        &PromptTemplate::qa_extract(),
        &bindings([("question", question), ("answer", answer)]),
    )?;
    let mut last_err = String::new();
    for attempt in 0..2 {
        let p = if attempt == 0 {
            prompt.clone()
        } else {
            format!("{prompt}{EXTRACT_REASK}")
        };
        let raw = client.complete(&role.request(p))?;
        match parse_extraction(&raw) {
            Ok((q, a)) if q.is_empty() && a.is_empty() => return Err(MapError::BothEmpty),
            Ok(pair) => return Ok(pair),
            Err(e) => {
                log::warn!("entity extraction reply unusable ({e})");
                last_err = e;
            }
        }
    }
    Err(MapError::Unparseable(last_err))
}

enum Selection {
    None(Option<String>),
    Pick(usize, Option<String>),
    Invalid,
}

fn interpret_selection(raw: &str, pool: &[(NodeId, Score)], graph: &KnowledgeGraph) -> Selection {
    let Ok(obj) = extract_json(raw) else {
        return Selection::Invalid;
    };
    let Some(sel) = obj.get("selected_entity").and_then(Value::as_object) else {
        return Selection::Invalid;
    };
    let reason = sel.get("reason").and_then(Value::as_str).map(str::to_string);
    let name = sel.get("name").and_then(Value::as_str).map(str::trim).unwrap_or("");
    let is_none_id = matches!(sel.get("id"), Some(Value::String(s)) if s.trim().eq_ignore_ascii_case("none"));
    if name.eq_ignore_ascii_case("none") || (name.is_empty() && is_none_id) {
        return Selection::None(reason);
    }
    let wanted = crate::kgstore::normalize(name);
    let name_of = |i: usize| graph.node(pool[i].0).map(|n| n.normalized_name.as_str()).unwrap_or("");
    let index = match sel.get("id") {
        Some(Value::Number(n)) => n.as_u64().map(|n| n as usize),
        Some(Value::String(s)) => s.trim().parse().ok(),
        _ => None,
    };
    if let Some(i) = index.filter(|&i| i < pool.len()) {
        if name.is_empty() || name_of(i) == wanted {
            return Selection::Pick(i, reason);
        }
    }
    match (0..pool.len()).find(|&i| name_of(i) == wanted) {
        Some(i) => Selection::Pick(i, reason),
        None => Selection::Invalid,
    }
}

/// Everything needed to bind entities of one dataset to graph nodes.
pub struct Mapper<'a> {
    pub graph: &'a KnowledgeGraph,
    pub cache: &'a NodeEmbeddingCache,
    pub chat: &'a ChatClient,
    pub embedder: &'a dyn EmbeddingProvider,
    pub role: &'a ModelRole,
    pub cfg: MappingConfig,
    pub embed_retry: RetryPolicy,
}

impl Mapper<'_> {
    pub fn map_entity(&self, entity: ExtractedEntity, question: &str, answer: &str) -> Result<MappedEntity> {
        if let Some(&node) = self.graph.find_exact(&entity.name).iter().min() {
            return Ok(MappedEntity {
                entity,
                node: Some(node),
                stage: Stage::Exact,
                score: None,
                reason: None,
            });
        }
        if self.cache.is_empty() {
            log::warn!("no node embeddings available; {:?} left unmapped", entity.name);
            return Ok(MappedEntity::unmapped(entity, None));
        }
        self.cache.check_provider(&self.embedder.tag())?;
        let query = embed_text(self.embedder, &entity.name, self.embed_retry)?;
        let pool: Vec<(NodeId, Score)> =
            top_k_similar::<f32, Score, _>(query.as_slice(), self.cache.iter(), self.cfg.fallback_pool)?;
        let Some(&(best, best_score)) = pool.first() else {
            return Ok(MappedEntity::unmapped(entity, None));
        };
        if best_score > self.cfg.tau {
            return Ok(MappedEntity {
                entity,
                node: Some(best),
                stage: Stage::Similarity,
                score: Some(best_score),
                reason: None,
            });
        }

        let names: Vec<&str> = pool
            .iter()
            .map(|(id, _)| self.graph.name(*id).unwrap_or(""))
            .collect();
        let similar = serde_json::to_string(&names).expect("string list serializes");
        let prompt = render(
            &PromptTemplate::fallback_select(),
            &bindings([
                ("question", question),
                ("answer", answer),
                ("query_entity", entity.name.as_str()),
                ("similar_entities", similar.as_str()),
            ]),
        )?;
        for attempt in 0..2 {
            let p = if attempt == 0 {
                prompt.clone()
            } else {
                format!("{prompt}{SELECT_REASK}")
            };
            let raw = self.chat.complete(&self.role.request(p))?;
            match interpret_selection(&raw, &pool, self.graph) {
                Selection::None(reason) => return Ok(MappedEntity::unmapped(entity, reason)),
                Selection::Pick(i, reason) => {
                    return Ok(MappedEntity {
                        entity,
                        node: Some(pool[i].0),
                        stage: Stage::LlmSelected,
                        score: None,
                        reason,
                    })
                }
                Selection::Invalid => {
                    log::warn!("fallback selection for {:?} not in candidate list", entity.name)
                }
            }
        }
        Ok(MappedEntity::unmapped(entity, Some("selection outside candidate list".into())))
    }

    /// Maps every entity (concurrently) and returns deduplicated question and
    /// answer node lists in extraction order, plus the full audit.
    pub fn map_entities(
        &self,
        question_entities: Vec<ExtractedEntity>,
        answer_entities: Vec<ExtractedEntity>,
        question: &str,
        answer: &str,
    ) -> Result<MappingOutcome> {
        let all: Vec<ExtractedEntity> = question_entities.into_iter().chain(answer_entities).collect();
        let audit: Vec<MappedEntity> = all
            .into_par_iter()
            .map(|e| self.map_entity(e, question, answer))
            .collect::<Result<_>>()?;
        let collect = |src: Source| {
            let mut seen = HashSet::new();
            audit
                .iter()
                .filter(|m| m.entity.source == src)
                .filter_map(|m| m.node)
                .filter(|n| seen.insert(*n))
                .collect::<Vec<_>>()
        };
        Ok(MappingOutcome {
            question_nodes: collect(Source::Question),
            answer_nodes: collect(Source::Answer),
            audit,
        })
    }

    /// Extraction followed by mapping for one question/answer pair.
    pub fn map_all(&self, question: &str, answer: &str) -> Result<MappingOutcome> {
        let (q, a) = extract_entities(question, answer, self.chat, self.role)?;
        self.map_entities(q, a, question, answer)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MappingOutcome {
    pub question_nodes: Vec<NodeId>,
    pub answer_nodes: Vec<NodeId>,
    pub audit: Vec<MappedEntity>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::MockEmbedder;
    use crate::kgstore::GraphBuilder;
    use crate::llm::{MockChatBackend, MockRule};
    use std::sync::Arc;

    fn client(rules: Vec<MockRule>) -> (ChatClient, Arc<MockChatBackend>) {
        let backend = Arc::new(MockChatBackend::new(rules));
        let policy = RetryPolicy {
            max_attempts: 1,
            backoff_base_ms: 0,
        };
        (ChatClient::new(backend.clone(), 4, policy), backend)
    }

    fn role() -> ModelRole {
        ModelRole::new("m", 0.0, 512)
    }

    const FARMER_REPLY: &str = r#"{
      "Question Entity": [
        {"id": "1", "type": "disease", "name": "hypertension"},
        {"id": "2", "type": "disease", "name": "obesity"},
        {"id": "3", "type": "drug", "name": "lisinopril"}
      ],
      "Answer Entity": [
        {"id": "1", "type": "anatomy", "name": "Femoral artery"},
        {"id": "2", "type": "effect/phenotype", "name": "murmur"}
      ]
    }"#;

    #[test]
    fn extraction_parses_both_lists() {
        let (c, b) = client(vec![MockRule::new("Femoral artery murmur", FARMER_REPLY)]);
        let (q, a) = extract_entities("A 72-year-old farmer...", "Femoral artery murmur", &c, &role()).unwrap();
        assert_eq!(q[0].name, "hypertension");
        assert_eq!(q[0].entity_type, EntityType::Disease);
        assert_eq!(q[2].entity_type, EntityType::Drug);
        assert_eq!(a[0].entity_type, EntityType::Anatomy);
        assert_eq!(a[0].name, "Femoral artery");
        assert_eq!(a[0].source, Source::Answer);
        assert_eq!(b.calls(), 1);
    }

    #[test]
    fn both_empty_is_an_error() {
        let (c, _) = client(vec![MockRule::new("", r#"{"Question Entity":[],"Answer Entity":[]}"#)]);
        assert!(matches!(
            extract_entities("q", "a", &c, &role()),
            Err(MapError::BothEmpty)
        ));
    }

    #[test]
    fn unknown_type_dropped() {
        let reply = r#"{"Question Entity":[{"id":1,"type":"vehicle","name":"car"},{"id":2,"type":"drug","name":"aspirin"}],"Answer Entity":[]}"#;
        let (c, _) = client(vec![MockRule::new("", reply)]);
        let (q, a) = extract_entities("q", "a", &c, &role()).unwrap();
        assert_eq!(q.len(), 1);
        assert_eq!(q[0].name, "aspirin");
        assert_eq!(q[0].ordinal, 2);
        assert!(a.is_empty());
    }

    #[test]
    fn one_reask_then_error() {
        let (c, b) = client(vec![
            MockRule::new("", "no json here"),
            MockRule::new("could not be parsed", FARMER_REPLY),
        ]);
        assert!(extract_entities("q", "a", &c, &role()).is_ok());
        assert_eq!(b.calls(), 2);

        let (c, b) = client(vec![MockRule::new("", "still nothing").sticky()]);
        assert!(matches!(
            extract_entities("q", "a", &c, &role()),
            Err(MapError::Unparseable(_))
        ));
        assert_eq!(b.calls(), 2);
    }

    fn setup() -> (KnowledgeGraph, NodeEmbeddingCache) {
        let mut b = GraphBuilder::new();
        let h = b.add_node(EntityType::Disease, "hypertension");
        let h2 = b.add_node(EntityType::Disease, "Hypertension");
        let x = b.add_node(EntityType::Disease, "x");
        let y = b.add_node(EntityType::Disease, "y");
        b.add_edge(h, "r", x).add_edge(h2, "r", y);
        let g = b.build().unwrap();
        let mut cache = NodeEmbeddingCache::new(2, MockEmbedder::new(2).tag());
        cache.insert(h, &[1.0, 0.0]).unwrap();
        cache.insert(h2, &[1.0, 0.0]).unwrap();
        cache.insert(x, &[0.0, 1.0]).unwrap();
        cache.insert(y, &[-1.0, 0.0]).unwrap();
        (g, cache)
    }

    fn entity(name: &str) -> ExtractedEntity {
        ExtractedEntity {
            ordinal: 1,
            entity_type: EntityType::Disease,
            name: name.into(),
            source: Source::Question,
        }
    }

    /// Unit vector whose cosine with [0, 1] is `c`.
    fn at(c: f32) -> Vec<f32> {
        vec![(1.0 - c * c).sqrt(), c]
    }

    #[test]
    fn stage_precedence() {
        let (g, cache) = setup();
        let emb = MockEmbedder::new(2)
            .with_override("close", at(0.86))
            .with_override("far", at(0.80));
        let (c, b) = client(vec![
            MockRule::new("query entity: far", r#"{"selected_entity":{"name":"NONE","id":"NONE","reason":"none fit"}}"#),
        ]);
        let r = role();
        let m = Mapper {
            graph: &g,
            cache: &cache,
            chat: &c,
            embedder: &emb,
            role: &r,
            cfg: MappingConfig::default(),
            embed_retry: RetryPolicy::default(),
        };
        let exact = m.map_entity(entity("HYPERTENSION "), "q", "a").unwrap();
        assert_eq!((exact.stage, exact.node), (Stage::Exact, Some(NodeId(0))));
        assert_eq!((emb.calls(), b.calls()), (0, 0));

        let sim = m.map_entity(entity("close"), "q", "a").unwrap();
        assert_eq!(sim.stage, Stage::Similarity);
        assert_eq!(sim.node, Some(NodeId(2)));
        assert!(sim.score.unwrap() > 0.85);
        assert_eq!(b.calls(), 0);

        let none = m.map_entity(entity("far"), "q", "a").unwrap();
        assert_eq!(none.stage, Stage::Unmapped);
        assert_eq!(none.node, None);
        assert_eq!(none.reason.as_deref(), Some("none fit"));
        assert_eq!(b.calls(), 1);
        assert!(b.prompts()[0].contains(r#"similar entities: ["x","hypertension","Hypertension","y"]"#));
    }

    #[test]
    fn fallback_pick_and_reask() {
        let (g, cache) = setup();
        let emb = MockEmbedder::new(2).with_override("far", at(0.6));
        let r = role();
        let (c, b) = client(vec![
            MockRule::new("query entity: far", r#"{"selected_entity":{"name":"y","id":3,"reason":"ok"}}"#),
        ]);
        let m = Mapper {
            graph: &g,
            cache: &cache,
            chat: &c,
            embedder: &emb,
            role: &r,
            cfg: MappingConfig::default(),
            embed_retry: RetryPolicy::default(),
        };
        let out = m.map_entity(entity("far"), "q", "a").unwrap();
        assert_eq!((out.stage, out.node), (Stage::LlmSelected, Some(NodeId(3))));
        assert_eq!(b.calls(), 1);

        let (c, b) = client(vec![
            MockRule::new("query entity: far", r#"{"selected_entity":{"name":"invented","id":0}}"#).sticky(),
        ]);
        let m = Mapper { chat: &c, ..m };
        let out = m.map_entity(entity("far"), "q", "a").unwrap();
        assert_eq!(out.stage, Stage::Unmapped);
        assert_eq!(b.calls(), 2);
    }

    #[test]
    fn dedup_preserves_first_seen_order() {
        let (g, cache) = setup();
        let emb = MockEmbedder::new(2);
        let r = role();
        let (c, _) = client(vec![]);
        let m = Mapper {
            graph: &g,
            cache: &cache,
            chat: &c,
            embedder: &emb,
            role: &r,
            cfg: MappingConfig::default(),
            embed_retry: RetryPolicy::default(),
        };
        let q = vec![entity("y"), entity("hypertension"), entity("y")];
        let mut a = entity("x");
        a.source = Source::Answer;
        let out = m.map_entities(q, vec![a], "q", "a").unwrap();
        assert_eq!(out.question_nodes, vec![NodeId(3), NodeId(0)]);
        assert_eq!(out.answer_nodes, vec![NodeId(2)]);
        assert_eq!(out.audit.len(), 4);
    }

    #[test]
    fn config_validation() {
        assert!(MappingConfig::default().validate().is_ok());
        assert!(MappingConfig { tau: 1.0, ..Default::default() }.validate().is_err());
        assert!(MappingConfig { fallback_pool: 0, ..Default::default() }.validate().is_err());
    }
}
