//! Distractor generation from reasoning paths, and the paths-free baseline.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::kgstore::normalize;
use crate::llm::{extract_json, render, ChatClient, LlmError, ModelRole, PromptTemplate};

#[derive(Debug, Error)]
pub enum DistractError {
    #[error("distractor count must be >= 1")]
    ZeroCount,
    #[error("no valid distractor set after {attempts} attempts: {last}")]
    Invalid { attempts: u32, last: String },
    #[error(transparent)]
    Llm(#[from] LlmError),
}

pub type Result<T, E = DistractError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Kggdg,
    Direct,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistractorSet {
    pub options: Vec<String>,
    pub justifications: BTreeMap<String, String>,
    pub method: Method,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationConfig {
    /// Distractors per item; `None` means one fewer than the item's options.
    pub k: Option<usize>,
    pub max_reasks: u32,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            k: None,
            max_reasks: 2,
            temperature: 0.7,
            max_tokens: 1024,
        }
    }
}

impl GenerationConfig {
    pub fn resolve_k(&self, option_count: usize) -> usize {
        self.k.unwrap_or(option_count.saturating_sub(1))
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.k == Some(0) {
            return Err("generation k must be >= 1".into());
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(format!("generation temperature {} outside [0, 2]", self.temperature));
        }
        Ok(())
    }
}

pub const NO_PATHS: &str = "None provided.";

const JUSTIFICATION_HINT: &str =
    "Explain why this is a misleading but incorrect answer (e.g., symptom overlap, treatment confusion, common misdiagnosis).";

/// Renders the generation prompt for `k` distractors.
pub fn render_distractor_prompt(question: &str, answer: &str, paths: &[String], k: usize) -> Result<String> {
    if k == 0 {
        return Err(DistractError::ZeroCount);
    }
    let reasoning = if paths.is_empty() {
        NO_PATHS.to_string()
    } else {
        paths.join("\n")
    };
    let slots = (1..=k)
        .map(|i| format!("\"Distractor{i}\""))
        .collect::<Vec<_>>()
        .join(", ");
    let justifications = (1..=k)
        .map(|i| format!("    \"Distractor{i}\": \"{JUSTIFICATION_HINT}\""))
        .collect::<Vec<_>>()
        .join(",\n");
    let mut b = BTreeMap::new();
    b.insert("num_distractors".to_string(), k.to_string());
    b.insert("input_question".to_string(), question.to_string());
    b.insert("correct_answer".to_string(), answer.to_string());
    b.insert("reasoning_paths".to_string(), reasoning);
    b.insert("distractor_slots".to_string(), slots);
    b.insert("justification_slots".to_string(), justifications);
    Ok(render(&PromptTemplate::misleading_distractor(), &b)?)
}

fn justification_for(j: &Map<String, Value>, option: &str, slot: usize) -> Option<String> {
    let pick = |v: &Value| v.as_str().map(str::trim).filter(|s| !s.is_empty()).map(str::to_string);
    if let Some(s) = j.get(option).and_then(pick) {
        return Some(s);
    }
    let norm = normalize(option);
    if let Some(s) = j.iter().find(|(key, _)| normalize(key) == norm).and_then(|(_, v)| pick(v)) {
        return Some(s);
    }
    j.get(&format!("Distractor{slot}")).and_then(pick)
}

/// Checks a reply against the structural contract; the error text is the
/// corrective instruction sent back to the model.
pub fn validate_reply(raw: &str, answer: &str, k: usize) -> Result<(Vec<String>, BTreeMap<String, String>), String> {
    let obj = extract_json(raw).map_err(|_| {
        "Your reply did not contain a JSON object. Return the distractors in strict JSON format.".to_string()
    })?;
    let list = obj
        .get("Distractors")
        .and_then(Value::as_array)
        .ok_or("The JSON must contain a \"Distractors\" array.")?;
    let options: Vec<String> = list
        .iter()
        .map(|v| v.as_str().map(|s| s.trim().to_string()).unwrap_or_default())
        .collect();
    if options.len() != k {
        return Err(format!(
            "Return exactly {k} distractors (you returned {}).",
            options.len()
        ));
    }
    if options.iter().any(String::is_empty) {
        return Err("Every distractor must be a non-empty string.".into());
    }
    let answer_norm = normalize(answer);
    let mut seen = HashSet::new();
    for o in &options {
        let n = normalize(o);
        if n == answer_norm {
            return Err(format!(
                "Do not include any option that could be interpreted as correct: \"{o}\" is the correct answer."
            ));
        }
        if !seen.insert(n) {
            return Err(format!("The distractors must be distinct: \"{o}\" appears more than once."));
        }
    }
    let empty = Map::new();
    let j = obj.get("Justifications").and_then(Value::as_object).unwrap_or(&empty);
    let mut justifications = BTreeMap::new();
    for (i, o) in options.iter().enumerate() {
        match justification_for(j, o, i + 1) {
            Some(s) => {
                justifications.insert(o.clone(), s);
            }
            None => {
                return Err(format!(
                    "Provide a justification for why each one is misleading: \"{o}\" has none."
                ))
            }
        }
    }
    Ok((options, justifications))
}

#[allow(clippy::too_many_arguments)]
fn generate(
    client: &ChatClient,
    role: &ModelRole,
    question: &str,
    answer: &str,
    paths: &[String],
    k: usize,
    max_reasks: u32,
    method: Method,
) -> Result<DistractorSet> {
    let prompt = render_distractor_prompt(question, answer, paths, k)?;
    let mut correction: Option<String> = None;
    let attempts = 1 + max_reasks;
    for _ in 0..attempts {
        let p = match &correction {
            None => prompt.clone(),
            Some(c) => format!("{prompt}\n\nYour previous reply was rejected. {c}"),
        };
        let raw = client.complete(&role.request(p))?;
        match validate_reply(&raw, answer, k) {
            Ok((options, justifications)) => {
                return Ok(DistractorSet {
                    options,
                    justifications,
                    method,
                })
            }
            Err(c) => {
                log::warn!("distractor reply rejected: {c}");
                correction = Some(c);
            }
        }
    }
    Err(DistractError::Invalid {
        attempts,
        last: correction.unwrap_or_default(),
    })
}

/// Distractors conditioned on serialized reasoning paths.
pub fn generate_distractors(
    client: &ChatClient,
    role: &ModelRole,
    question: &str,
    answer: &str,
    paths: &[String],
    k: usize,
    max_reasks: u32,
) -> Result<DistractorSet> {
    generate(client, role, question, answer, paths, k, max_reasks, Method::Kggdg)
}

/// Same prompt with no paths.
pub fn generate_direct(
    client: &ChatClient,
    role: &ModelRole,
    question: &str,
    answer: &str,
    k: usize,
    max_reasks: u32,
) -> Result<DistractorSet> {
    generate(client, role, question, answer, &[], k, max_reasks, Method::Direct)
}
