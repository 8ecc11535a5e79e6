//! Toy world shared by the integration tests: a 40-node graph, a 20-item
//! dataset and a mock chat script that covers extraction, fallback
//! selection, generation and answering.
#![allow(dead_code)]

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use kggdg::embed::MockEmbedder;
use kggdg::llm::{MockChatBackend, MockRule};
use kggdg::pipeline::{PipelineConfig, Providers};
use serde_json::json;

pub const DISEASES: [&str; 10] = [
    "hypertension",
    "type 2 diabetes",
    "asthma",
    "migraine",
    "gout",
    "hypothyroidism",
    "psoriasis",
    "epilepsy",
    "heart failure",
    "tuberculosis",
];
pub const DRUGS: [&str; 10] = [
    "lisinopril",
    "metformin",
    "albuterol",
    "sumatriptan",
    "allopurinol",
    "levothyroxine",
    "methotrexate",
    "levetiracetam",
    "furosemide",
    "isoniazid",
];
pub const PHENOTYPES: [&str; 10] = [
    "headache",
    "polyuria",
    "wheezing",
    "photophobia",
    "joint swelling",
    "fatigue",
    "scaly plaques",
    "seizure",
    "edema",
    "night sweats",
];
pub const ANATOMY: [&str; 5] = ["kidney", "lung", "brain", "thyroid gland", "skin"];
pub const GENES: [&str; 5] = ["ACE", "INS", "IL13", "SLC2A9", "TPO"];

pub const ITEMS: usize = 20;
pub const EMBED_DIM: usize = 16;

fn disease(i: usize) -> usize {
    i
}
fn drug(i: usize) -> usize {
    10 + i
}
fn phenotype(i: usize) -> usize {
    20 + i
}
fn anatomy(i: usize) -> usize {
    30 + i
}
fn gene(i: usize) -> usize {
    35 + i
}

pub fn nodes_csv() -> String {
    let mut s = String::from("node_id,node_type,node_name\n");
    let groups: [(&str, &[&str]); 5] = [
        ("disease", &DISEASES),
        ("drug", &DRUGS),
        ("effect/phenotype", &PHENOTYPES),
        ("anatomy", &ANATOMY),
        ("gene/protein", &GENES),
    ];
    let mut id = 0;
    for (ty, names) in groups {
        for n in names {
            writeln!(s, "{id},{ty},{n}").unwrap();
            id += 1;
        }
    }
    s
}

pub fn edges_csv() -> String {
    let mut s = String::from("source_id,relation,target_id\n");
    for i in 0..10 {
        writeln!(s, "{},indication,{}", drug(i), disease(i)).unwrap();
        writeln!(s, "{},contraindication,{}", drug((i + 1) % 10), disease(i)).unwrap();
        writeln!(s, "{},disease_phenotype_positive,{}", disease(i), phenotype(i)).unwrap();
        writeln!(s, "{},disease_phenotype_positive,{}", disease(i), phenotype((i + 3) % 10)).unwrap();
        writeln!(s, "{},anatomy_disease,{}", anatomy(i % 5), disease(i)).unwrap();
        writeln!(s, "{},drug_protein,{}", drug(i), gene(i % 5)).unwrap();
        writeln!(s, "{},disease_protein,{}", gene((i + 2) % 5), disease(i)).unwrap();
    }
    s
}

pub fn question(j: usize) -> String {
    let i = j % 10;
    format!(
        "Case {j}: A patient with {} reports {}. Which drug is most appropriate?",
        DISEASES[i], PHENOTYPES[i]
    )
}

pub fn answer(j: usize) -> &'static str {
    DRUGS[j % 10]
}

pub fn dataset_jsonl() -> String {
    let mut s = String::new();
    for j in 0..ITEMS {
        let idx = j % 4;
        let mut options: Vec<String> = (0..3).map(|d| format!("placebo {j}{}", ['a', 'b', 'c'][d])).collect();
        options.insert(idx, answer(j).to_string());
        let rec = json!({
            "id": format!("toy-{j:02}"),
            "dataset": if j < 10 { "toyqa" } else { "toybench" },
            "question": question(j),
            "options": options,
            "answer_index": idx,
            "answer_text": answer(j),
        });
        writeln!(s, "{rec}").unwrap();
    }
    s
}

fn entity(id: usize, ty: &str, name: &str) -> serde_json::Value {
    json!({"id": id.to_string(), "type": ty, "name": name})
}

/// Items whose question entities cannot be mapped; they fall back to
/// direct generation.
pub const UNMAPPABLE: [usize; 1] = [19];

pub fn mock_rules() -> Vec<MockRule> {
    let none = json!({"selected_entity": {"name": "NONE", "id": "NONE", "reason": "no candidate fits"}}).to_string();
    let mut rules = vec![
        MockRule::new("query entity: chest discomfort", none.clone()).sticky(),
        MockRule::new("query entity: moonlight syndrome", none).sticky(),
    ];
    for j in 0..ITEMS {
        let i = j % 10;
        let q = question(j);
        let mut q_entities = if UNMAPPABLE.contains(&j) {
            vec![entity(1, "disease", "moonlight syndrome")]
        } else {
            vec![
                entity(1, "disease", DISEASES[i]),
                entity(2, "effect/phenotype", PHENOTYPES[i]),
            ]
        };
        if j % 5 == 0 {
            q_entities.push(entity(3, "effect/phenotype", "chest discomfort"));
        }
        let extraction = json!({
            "Question Entity": q_entities,
            "Answer Entity": [entity(1, "drug", answer(j))],
        });
        rules.push(MockRule::new(format!("question:\n{q}\n"), extraction.to_string()).sticky());

        let ds: Vec<&str> = (1..=3).map(|d| DRUGS[(i + d) % 10]).collect();
        let justifications: serde_json::Map<String, serde_json::Value> = ds
            .iter()
            .map(|d| (d.to_string(), json!(format!("{d} is used near {}", DISEASES[i]))))
            .collect();
        let generation = json!({"Distractors": ds, "Justifications": justifications});
        rules.push(
            MockRule::new(format!("Question: {q}\nCorrect Answer"), format!("```json\n{generation}\n```")).sticky(),
        );
        rules.push(MockRule::new(format!("Question: {q}\n\nOptions:"), format!("I would choose {}.", answer(j))).sticky());
    }
    rules
}

pub fn mock_script() -> String {
    mock_rules()
        .iter()
        .map(|r| serde_json::to_string(r).unwrap() + "\n")
        .collect()
}

/// Config with every path under `root`.
pub fn toy_config(root: &Path) -> PipelineConfig {
    let mut c = PipelineConfig::default();
    c.paths.kg_nodes = root.join("kg/nodes.csv");
    c.paths.kg_edges = root.join("kg/edges.csv");
    c.paths.graph_cache = root.join("cache/graph.bin");
    c.paths.embedding_cache = root.join("cache/nodes");
    c.paths.datasets = vec![root.join("data/toy.jsonl")];
    c.paths.output_dir = root.join("out");
    c.providers.llm_url = Some(format!("mock:{}", root.join("mock_script.jsonl").display()));
    c.providers.embed_url = Some("mock".into());
    c.providers.mock_embedding_dim = EMBED_DIM;
    c.providers.retry.backoff_base_ms = 1;
    c.global_seed = 20240611;
    c.eval.model = "toy-answerer".into();
    c
}

/// Writes the graph, dataset and mock script under `dir`.
pub fn write_toy_files(dir: &Path) {
    fs::create_dir_all(dir.join("kg")).unwrap();
    fs::create_dir_all(dir.join("data")).unwrap();
    fs::write(dir.join("kg/nodes.csv"), nodes_csv()).unwrap();
    fs::write(dir.join("kg/edges.csv"), edges_csv()).unwrap();
    fs::write(dir.join("data/toy.jsonl"), dataset_jsonl()).unwrap();
    fs::write(dir.join("mock_script.jsonl"), mock_script()).unwrap();
}

pub struct Toy {
    pub dir: tempfile::TempDir,
    pub cfg: PipelineConfig,
}

impl Toy {
    pub fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        write_toy_files(dir.path());
        let cfg = toy_config(dir.path());
        Self { dir, cfg }
    }

    pub fn root(&self) -> &Path {
        self.dir.path()
    }

    pub fn dataset(&self) -> PathBuf {
        self.cfg.paths.datasets[0].clone()
    }

    /// Fresh mock providers plus a handle on the chat mock's counters.
    pub fn providers(&self) -> (Providers, Arc<MockChatBackend>) {
        let chat = Arc::new(MockChatBackend::new(mock_rules()));
        let p = Providers::new(chat.clone(), Arc::new(MockEmbedder::new(EMBED_DIM)), &self.cfg);
        (p, chat)
    }
}
