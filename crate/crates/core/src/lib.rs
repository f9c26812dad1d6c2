//! Retrieval of in-context demonstrations for unified information extraction.
//!
//! The crate covers the whole training and inference path: a mixed-task
//! candidate pool ([`corpus`]), text rendering and parsing ([`codec`]),
//! BM25 candidate initialization ([`sparse_index`]), language-model access
//! ([`llm`]), preference ranking of candidates ([`scoring`]), the
//! keyword-enhanced pair scorer ([`reward`]), the distilled bi-encoder
//! ([`retriever`]), span-level evaluation ([`eval`]) and the staged
//! pipeline driving all of it ([`pipeline`]).

pub mod codec;
pub mod config;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod llm;
pub mod nn;
pub mod pipeline;
pub mod retriever;
pub mod reward;
pub mod scoring;
pub mod sparse_index;
pub mod synth;
pub mod text;

pub use error::{Error, Result};

/// An id paired with a ranking score.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ScoredId {
    pub id: String,
    pub score: f64,
}

impl ScoredId {
    pub fn new(id: impl Into<String>, score: f64) -> Self {
        Self { id: id.into(), score }
    }
}

/// Sort descending by score, ties broken by ascending id.
pub(crate) fn sort_ranked(items: &mut [ScoredId]) {
    items.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.id.cmp(&b.id)));
}

/// Deterministic child seed for a labelled stream (a query id, a stage name).
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}
