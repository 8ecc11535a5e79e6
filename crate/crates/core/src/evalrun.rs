//! Answer-model evaluation, accuracy aggregation and report tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use num_traits::Float;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bench::{McqItem, Provenance};
use crate::llm::{render, ChatClient, LlmError, ModelRole, PromptTemplate};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("cannot aggregate an empty run list")]
    EmptyRuns,
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("invalid eval config: {0}")]
    Config(String),
    #[error("report structure mismatch: {0}")]
    Structure(String),
    #[error(transparent)]
    Llm(#[from] LlmError),
}

pub type Result<T, E = EvalError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub model: String,
    pub runs: usize,
    pub answer_prompt: PromptTemplate,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            model: "answer-model".into(),
            runs: 3,
            answer_prompt: PromptTemplate::answer_mcq(),
            temperature: 0.0,
            max_tokens: 16,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.runs == 0 {
            return Err(EvalError::Config("runs must be >= 1".into()));
        }
        let slots = self.answer_prompt.placeholders();
        for need in ["question", "options"] {
            if !slots.contains(need) {
                return Err(EvalError::Config(format!("answer prompt lacks {{{need}}}")));
            }
        }
        Ok(())
    }

    fn role(&self) -> ModelRole {
        ModelRole::new(self.model.clone(), self.temperature, self.max_tokens)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Choice {
    Picked(usize),
    Abstain { transport_failure: bool },
}

impl Choice {
    pub fn index(self) -> Option<usize> {
        match self {
            Choice::Picked(i) => Some(i),
            Choice::Abstain { .. } => None,
        }
    }
}

const LETTERS: [char; 5] = ['A', 'B', 'C', 'D', 'E'];

pub fn letter(i: usize) -> char {
    (b'A' + i as u8) as char
}

pub fn render_options(options: &[String]) -> String {
    options
        .iter()
        .enumerate()
        .map(|(i, o)| format!("{}. {o}", letter(i)))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Maps a completion to an option index: the first standalone capital
/// A-E naming an existing slot, else a unique full option-text match.
pub fn parse_choice(reply: &str, options: &[String]) -> Option<usize> {
    let chars: Vec<char> = reply.chars().collect();
    for (i, &c) in chars.iter().enumerate() {
        let Some(slot) = LETTERS.iter().position(|&l| l == c) else {
            continue;
        };
        let before_ok = i == 0 || !chars[i - 1].is_alphanumeric();
        let after_ok = i + 1 == chars.len() || !chars[i + 1].is_alphanumeric();
        if before_ok && after_ok && slot < options.len() {
            return Some(slot);
        }
    }
    let lower = reply.to_lowercase();
    let hits: Vec<usize> = options
        .iter()
        .enumerate()
        .filter(|(_, o)| !o.trim().is_empty() && lower.contains(&o.trim().to_lowercase()))
        .map(|(i, _)| i)
        .collect();
    match hits.as_slice() {
        [one] => Some(*one),
        _ => None,
    }
}

pub fn ask_model(client: &ChatClient, item: &McqItem, cfg: &EvalConfig) -> Choice {
    let mut b = BTreeMap::new();
    b.insert("question".to_string(), item.question.clone());
    b.insert("options".to_string(), render_options(&item.options));
    let prompt = match render(&cfg.answer_prompt, &b) {
        Ok(p) => p,
        Err(e) => {
            log::error!("answer prompt render failed: {e}");
            return Choice::Abstain { transport_failure: false };
        }
    };
    match client.complete(&cfg.role().request(prompt)) {
        Ok(reply) => match parse_choice(&reply, &item.options) {
            Some(i) => Choice::Picked(i),
            None => Choice::Abstain { transport_failure: false },
        },
        Err(e) => {
            log::warn!("item {}: no answer ({e})", item.id);
            Choice::Abstain { transport_failure: true }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub run_index: usize,
    pub choices: BTreeMap<String, Choice>,
    pub accuracy: f64,
}

impl RunResult {
    pub fn abstentions(&self) -> usize {
        self.choices.values().filter(|c| c.index().is_none()).count()
    }

    pub fn abstention_rate(&self) -> f64 {
        if self.choices.is_empty() {
            0.0
        } else {
            self.abstentions() as f64 / self.choices.len() as f64
        }
    }

    /// Per-item result lines for the JSONL export.
    pub fn records(&self, items: &[McqItem]) -> Vec<ItemResult> {
        items
            .iter()
            .filter_map(|it| {
                let c = self.choices.get(&it.id)?;
                Some(ItemResult {
                    item_id: it.id.clone(),
                    chosen_index: c.index(),
                    correct: c.index() == Some(it.answer_index),
                    abstained: c.index().is_none(),
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemResult {
    pub item_id: String,
    pub chosen_index: Option<usize>,
    pub correct: bool,
    pub abstained: bool,
}

/// Runs `cfg.runs` sequential passes; items within a pass go in parallel.
pub fn evaluate(client: &ChatClient, items: &[McqItem], cfg: &EvalConfig) -> Result<Vec<RunResult>> {
    cfg.validate()?;
    if items.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    let mut out = Vec::with_capacity(cfg.runs);
    for run_index in 0..cfg.runs {
        let picks: Vec<(String, Choice, bool)> = items
            .par_iter()
            .map(|it| {
                let c = ask_model(client, it, cfg);
                (it.id.clone(), c, c.index() == Some(it.answer_index))
            })
            .collect();
        let correct = picks.iter().filter(|p| p.2).count();
        out.push(RunResult {
            run_index,
            accuracy: correct as f64 / items.len() as f64,
            choices: picks.into_iter().map(|(id, c, _)| (id, c)).collect(),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracySummary<T> {
    pub mean: T,
    pub sample_std: T,
    pub per_run: Vec<T>,
    /// Set when only one run exists and the std is a placeholder 0.
    pub std_undefined: bool,
}

pub fn aggregate<T: Float>(per_run: &[T]) -> Result<AccuracySummary<T>> {
    if per_run.is_empty() {
        return Err(EvalError::EmptyRuns);
    }
    let n = T::from(per_run.len()).expect("run count fits");
    let mean = per_run.iter().fold(T::zero(), |a, &x| a + x) / n;
    if per_run.len() == 1 {
        return Ok(AccuracySummary {
            mean,
            sample_std: T::zero(),
            per_run: per_run.to_vec(),
            std_undefined: true,
        });
    }
    let ss = per_run.iter().fold(T::zero(), |a, &x| a + (x - mean) * (x - mean));
    Ok(AccuracySummary {
        mean,
        sample_std: (ss / (n - T::one())).sqrt(),
        per_run: per_run.to_vec(),
        std_undefined: false,
    })
}

impl<T: Float> AccuracySummary<T> {
    pub fn scaled(&self, factor: T) -> Self {
        Self {
            mean: self.mean * factor,
            sample_std: self.sample_std * factor,
            per_run: self.per_run.iter().map(|&x| x * factor).collect(),
            std_undefined: self.std_undefined,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub model: String,
    pub method: Provenance,
    pub cells: Vec<AccuracySummary<f64>>,
    pub avg: AccuracySummary<f64>,
}

/// Rows are (model, method) pairs, columns dataset names, values in percent.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportTable {
    pub columns: Vec<String>,
    pub rows: Vec<ReportRow>,
}

impl ReportTable {
    pub fn new(columns: Vec<String>) -> Self {
        Self {
            columns,
            rows: Vec::new(),
        }
    }

    /// Adds a row; the Avg. mean is the mean of the cell means and its std
    /// comes from per-run averages when every cell has the same run count.
    pub fn add_row(&mut self, model: impl Into<String>, method: Provenance, cells: Vec<AccuracySummary<f64>>) -> Result<()> {
        if cells.len() != self.columns.len() {
            return Err(EvalError::Structure(format!(
                "row has {} cells for {} columns",
                cells.len(),
                self.columns.len()
            )));
        }
        if cells.is_empty() {
            return Err(EvalError::Structure("row without cells".into()));
        }
        let means: Vec<f64> = cells.iter().map(|c| c.mean).collect();
        let mean = means.iter().sum::<f64>() / means.len() as f64;
        let runs = cells[0].per_run.len();
        let avg = if runs > 0 && cells.iter().all(|c| c.per_run.len() == runs) {
            let per_run: Vec<f64> = (0..runs)
                .map(|r| cells.iter().map(|c| c.per_run[r]).sum::<f64>() / cells.len() as f64)
                .collect();
            AccuracySummary {
                mean,
                ..aggregate(&per_run)?
            }
        } else {
            AccuracySummary {
                mean,
                sample_std: 0.0,
                per_run: Vec::new(),
                std_undefined: true,
            }
        };
        self.rows.push(ReportRow {
            model: model.into(),
            method,
            cells,
            avg,
        });
        Ok(())
    }

    pub fn row(&self, model: &str, method: Provenance) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.model == model && r.method == method)
    }
}

pub fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaRow {
    pub model: String,
    pub method: Provenance,
    pub unshuffled: f64,
    pub shuffled: f64,
    pub abs_delta: f64,
}

/// |Δ| of the Avg. column per row, taken between the two-decimal figures
/// as they are displayed.
pub fn delta_table(unshuffled: &ReportTable, shuffled: &ReportTable) -> Result<Vec<DeltaRow>> {
    if unshuffled.columns != shuffled.columns {
        return Err(EvalError::Structure("column sets differ".into()));
    }
    if unshuffled.rows.len() != shuffled.rows.len() {
        return Err(EvalError::Structure("row counts differ".into()));
    }
    unshuffled
        .rows
        .iter()
        .map(|u| {
            let s = shuffled.row(&u.model, u.method).ok_or_else(|| {
                EvalError::Structure(format!("no shuffled row for {} / {}", u.model, u.method.as_str()))
            })?;
            let (a, b) = (round2(u.avg.mean), round2(s.avg.mean));
            Ok(DeltaRow {
                model: u.model.clone(),
                method: u.method,
                unshuffled: a,
                shuffled: b,
                abs_delta: round2((a - b).abs()),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Markdown,
    Csv,
}

pub fn format_cell(s: &AccuracySummary<f64>) -> String {
    format!("{:.2}({:.2})", s.mean, s.sample_std)
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn render_report(table: &ReportTable, format: ReportFormat) -> String {
    let mut header = vec!["Model".to_string(), "Method".to_string()];
    header.extend(table.columns.iter().cloned());
    header.push("Avg.".into());
    let body: Vec<Vec<String>> = table
        .rows
        .iter()
        .map(|r| {
            let mut line = vec![r.model.clone(), r.method.as_str().to_string()];
            line.extend(r.cells.iter().map(format_cell));
            line.push(format_cell(&r.avg));
            line
        })
        .collect();
    let mut out = String::new();
    match format {
        ReportFormat::Markdown => {
            let _ = writeln!(out, "| {} |", header.join(" | "));
            let _ = writeln!(out, "|{}", "---|".repeat(header.len()));
            for l in body {
                let _ = writeln!(out, "| {} |", l.join(" | "));
            }
        }
        ReportFormat::Csv => {
            let join = |l: &[String]| l.iter().map(|f| csv_field(f)).collect::<Vec<_>>().join(",");
            let _ = writeln!(out, "{}", join(&header));
            for l in body {
                let _ = writeln!(out, "{}", join(&l));
            }
        }
    }
    out
}

pub fn render_deltas(rows: &[DeltaRow]) -> String {
    let mut out = String::from("| Model | Method | Unshuffled | Shuffled | |Δ| |\n|---|---|---|---|---|\n");
    for r in rows {
        let _ = writeln!(
            out,
            "| {} | {} | {:.2} | {:.2} | {:.2} |",
            r.model,
            r.method.as_str(),
            r.unshuffled,
            r.shuffled,
            r.abs_delta
        );
    }
    out
}
