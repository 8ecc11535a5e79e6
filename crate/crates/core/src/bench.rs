//! Benchmark items, JSONL I/O and option placement.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::distract::{DistractorSet, Method};
use crate::kgstore::normalize;
use crate::util::stable_hash64;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Schema {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("invalid item {id:?}: {message}")]
    Invalid { id: String, message: String },
    #[error("item {id:?}: expected {expected} distractors, got {found}")]
    SizeMismatch {
        id: String,
        expected: usize,
        found: usize,
    },
}

pub type Result<T, E = BenchError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct McqItem {
    pub id: String,
    pub question: String,
    pub options: Vec<String>,
    pub answer_index: usize,
    pub dataset: String,
}

impl McqItem {
    pub fn answer(&self) -> &str {
        &self.options[self.answer_index]
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.id.trim().is_empty() {
            return Err("empty id".into());
        }
        if self.question.trim().is_empty() {
            return Err("empty question".into());
        }
        if self.options.len() < 2 {
            return Err(format!("needs at least 2 options, has {}", self.options.len()));
        }
        if self.answer_index >= self.options.len() {
            return Err(format!(
                "answer_index {} out of range for {} options",
                self.answer_index,
                self.options.len()
            ));
        }
        let mut seen = HashSet::new();
        for o in &self.options {
            if !seen.insert(normalize(o)) {
                return Err(format!("duplicate option {o:?}"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Original,
    Direct,
    Kggdg,
}

impl From<Method> for Provenance {
    fn from(m: Method) -> Self {
        match m {
            Method::Kggdg => Provenance::Kggdg,
            Method::Direct => Provenance::Direct,
        }
    }
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::Original => "original",
            Provenance::Direct => "direct",
            Provenance::Kggdg => "kggdg",
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShuffleMode {
    #[default]
    Shuffled,
    Unshuffled,
}

impl ShuffleMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ShuffleMode::Shuffled => "shuffled",
            ShuffleMode::Unshuffled => "unshuffled",
        }
    }
}

impl std::str::FromStr for ShuffleMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "shuffled" => Ok(Self::Shuffled),
            "unshuffled" => Ok(Self::Unshuffled),
            other => Err(format!("unknown shuffle mode {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedItem {
    pub source: McqItem,
    pub distractors: DistractorSet,
    pub options: Vec<String>,
    pub answer_index: usize,
    pub shuffle_mode: ShuffleMode,
    pub seed: u64,
    pub provenance: Provenance,
}

impl AugmentedItem {
    pub fn answer(&self) -> &str {
        &self.options[self.answer_index]
    }

    /// The augmented question as a plain item.
    pub fn to_item(&self) -> McqItem {
        McqItem {
            id: self.source.id.clone(),
            question: self.source.question.clone(),
            options: self.options.clone(),
            answer_index: self.answer_index,
            dataset: self.source.dataset.clone(),
        }
    }
}

/// Per-item permutation seed, independent of processing order.
pub fn item_seed(global_seed: u64, item_id: &str) -> u64 {
    stable_hash64(&[b"shuffle", &global_seed.to_le_bytes(), item_id.as_bytes()])
}

/// Seeded uniform permutation of `0..n`.
pub fn permutation(n: usize, global_seed: u64, item_id: &str) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(item_seed(global_seed, item_id));
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(&mut rng);
    p
}

fn place(
    item: &McqItem,
    distractors: &[String],
    mode: ShuffleMode,
    seed: u64,
) -> Result<(Vec<String>, usize)> {
    let expected = item.options.len() - 1;
    if distractors.len() != expected {
        return Err(BenchError::SizeMismatch {
            id: item.id.clone(),
            expected,
            found: distractors.len(),
        });
    }
    let answer = item.answer().to_string();
    match mode {
        ShuffleMode::Unshuffled => {
            let mut rest = distractors.iter().cloned();
            let options = (0..item.options.len())
                .map(|i| {
                    if i == item.answer_index {
                        answer.clone()
                    } else {
                        rest.next().expect("length checked")
                    }
                })
                .collect();
            Ok((options, item.answer_index))
        }
        ShuffleMode::Shuffled => {
            let pool: Vec<String> = std::iter::once(answer).chain(distractors.iter().cloned()).collect();
            let perm = permutation(pool.len(), seed, &item.id);
            let options = perm.iter().map(|&j| pool[j].clone()).collect();
            let answer_index = perm.iter().position(|&j| j == 0).expect("permutation");
            Ok((options, answer_index))
        }
    }
}

/// Replaces the item's distractors with a generated set.
pub fn augment_item(item: &McqItem, ds: DistractorSet, mode: ShuffleMode, seed: u64) -> Result<AugmentedItem> {
    let (options, answer_index) = place(item, &ds.options, mode, seed)?;
    let out = AugmentedItem {
        source: item.clone(),
        provenance: ds.method.into(),
        distractors: ds,
        options,
        answer_index,
        shuffle_mode: mode,
        seed,
    };
    out.to_item().validate().map_err(|message| BenchError::Invalid {
        id: item.id.clone(),
        message,
    })?;
    Ok(out)
}

/// Keeps the item's own distractors, placed by the same rule.
pub fn keep_original(item: &McqItem, mode: ShuffleMode, seed: u64) -> Result<AugmentedItem> {
    let distractors: Vec<String> = item
        .options
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != item.answer_index)
        .map(|(_, o)| o.clone())
        .collect();
    let (options, answer_index) = place(item, &distractors, mode, seed)?;
    Ok(AugmentedItem {
        source: item.clone(),
        distractors: DistractorSet {
            options: distractors,
            justifications: BTreeMap::new(),
            method: Method::Direct,
        },
        options,
        answer_index,
        shuffle_mode: mode,
        seed,
        provenance: Provenance::Original,
    })
}

/// One JSONL line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub id: String,
    pub dataset: String,
    pub question: String,
    pub options: Vec<String>,
    pub answer_index: usize,
    pub answer_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shuffle_mode: Option<ShuffleMode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_answer_index: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub justifications: Option<BTreeMap<String, String>>,
}

impl DatasetRecord {
    pub fn item(&self) -> McqItem {
        McqItem {
            id: self.id.clone(),
            question: self.question.clone(),
            options: self.options.clone(),
            answer_index: self.answer_index,
            dataset: self.dataset.clone(),
        }
    }
}

impl From<&AugmentedItem> for DatasetRecord {
    fn from(a: &AugmentedItem) -> Self {
        Self {
            id: a.source.id.clone(),
            dataset: a.source.dataset.clone(),
            question: a.source.question.clone(),
            options: a.options.clone(),
            answer_index: a.answer_index,
            answer_text: a.answer().to_string(),
            provenance: Some(a.provenance),
            shuffle_mode: Some(a.shuffle_mode),
            seed: Some(a.seed),
            source_answer_index: Some(a.source.answer_index),
            justifications: (!a.distractors.justifications.is_empty())
                .then(|| a.distractors.justifications.clone()),
        }
    }
}

/// Reads and validates every record; ids must be unique.
pub fn load_records(path: &Path) -> Result<Vec<DatasetRecord>> {
    let io = |source| BenchError::Io {
        path: path.to_path_buf(),
        source,
    };
    let schema = |line: usize, message: String| BenchError::Schema {
        path: path.to_path_buf(),
        line,
        message,
    };
    let reader = BufReader::new(File::open(path).map_err(io)?);
    let mut out = Vec::new();
    let mut ids = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io)?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DatasetRecord = serde_json::from_str(&line).map_err(|e| schema(lineno, e.to_string()))?;
        let item = rec.item();
        item.validate().map_err(|m| schema(lineno, m))?;
        if item.answer() != rec.answer_text {
            return Err(schema(
                lineno,
                format!(
                    "answer_text {:?} does not match options[{}] = {:?}",
                    rec.answer_text,
                    rec.answer_index,
                    item.answer()
                ),
            ));
        }
        if !ids.insert(rec.id.clone()) {
            return Err(schema(lineno, format!("duplicate id {:?}", rec.id)));
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn load_dataset(path: &Path) -> Result<Vec<McqItem>> {
    Ok(load_records(path)?.iter().map(DatasetRecord::item).collect())
}

pub fn write_records(records: &[DatasetRecord], path: &Path) -> Result<()> {
    let io = |source| BenchError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|e| io(e.into()))?;
        w.write_all(b"\n").map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn write_dataset(items: &[AugmentedItem], path: &Path) -> Result<()> {
    let records: Vec<DatasetRecord> = items.iter().map(DatasetRecord::from).collect();
    write_records(&records, path)
}
