//! Retrieval pipeline toolkit for regulatory document corpora.
//!
//! The crate covers the whole offline path of a retrieval-augmented
//! assistant: incremental ingestion of a document source, hierarchical
//! semantic chunking, embedding with rate-limit aware backoff, an in-process
//! flat/IVF vector index, listwise cross-encoder reranking math, nine RAG
//! evaluation metrics, training/evaluation dataset construction, and an
//! ablation harness that drives all of it.
//!
//! Data-parallel loops (batch embedding, index scans, k-means assignment,
//! batch evaluation, per-document chunking) run on rayon when the `parallel`
//! feature is enabled (the default) and sequentially otherwise. See [`par`].

pub mod chunking;
pub mod dataset;
pub mod embedding;
pub mod error;
pub mod harness;
pub mod index;
pub mod ingest;
pub mod metrics;
pub mod par;
pub mod rerank;
pub mod synthetic;
pub mod text;
pub mod wire;

pub use error::{Error, Result};
