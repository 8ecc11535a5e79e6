//! Knowledge-graph guided distractor generation for clinical multiple-choice
//! benchmarks.
//!
//! The pipeline runs in four stages:
//!
//! 1. [`kgstore`] loads a labeled biomedical graph from node/edge CSV tables.
//! 2. [`entitymap`] extracts entities from a question/answer pair and binds
//!    them to graph nodes (exact name, embedding similarity, LLM fallback).
//! 3. [`semwalk`] runs a similarity-guided beam walk from question nodes that
//!    avoids answer nodes, producing misleading reasoning paths.
//! 4. [`distract`] prompts an LLM with those paths for replacement
//!    distractors, [`bench`] rebuilds the items and [`evalrun`] scores models
//!    on original and hardened datasets.
//!
//! Numeric kernels ([`embed::cosine`], [`embed::top_k_similar`],
//! [`evalrun::aggregate`]) are generic over [`num_traits::Float`]; the aliases
//! below fix the concrete types the pipeline uses.

pub mod bench;
pub mod distract;
pub mod embed;
pub mod entitymap;
pub mod evalrun;
pub mod kgstore;
pub mod llm;
pub mod oracle;
pub mod pipeline;
pub mod semwalk;

mod util;

pub use kgstore::{EntityType, KnowledgeGraph, NodeId, RelationId};

/// Stored embedding component type (the on-disk `.vec` format is f32).
pub type Component = f32;

/// Similarity scores are accumulated and compared in f64.
pub type Score = f64;

/// Embedding vector as produced by providers and held in caches.
pub type Embedding = embed::EmbeddingVector<Component>;

/// Accuracy summary over repeated evaluation runs.
pub type Summary = evalrun::AccuracySummary<f64>;

/// Ranked similarity hits as returned by [`embed::top_k_similar`].
pub type Ranked = Vec<(NodeId, Score)>;
