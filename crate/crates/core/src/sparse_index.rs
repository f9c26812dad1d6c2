//! BM25 inverted index over the candidate pool.
//!
//! Score of document `D` for query `Q` (distinct query terms `q`):
//!
//! ```text
//! Σ idf(q) · tf(q,D)·(k1+1) / (tf(q,D) + k1·(1 − b + b·|D|/avgdl))
//! idf(q) = ln(1 + (N − df(q) + 0.5) / (df(q) + 0.5))
//! ```

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec::linearize_output;
use crate::corpus::{CandidatePool, IESample};
use crate::error::{Error, Result};
use crate::text::words;
use crate::{sort_ranked, ScoredId};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: 1.2, b: 0.75 }
    }
}

/// Which rendering of a sample gets indexed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IndexedText {
    #[default]
    Input,
    InputAndOutput,
}

impl IndexedText {
    pub fn render(self, sample: &IESample) -> String {
        match self {
            IndexedText::Input => sample.input.clone(),
            IndexedText::InputAndOutput => {
                format!("{} {}", sample.input, linearize_output(&sample.output))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Posting {
    pub doc: u32,
    pub tf: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bm25Index {
    pub params: Bm25Params,
    pub indexed_text: IndexedText,
    doc_ids: Vec<String>,
    doc_lengths: Vec<u32>,
    avg_doc_length: f64,
    postings: BTreeMap<String, Vec<Posting>>,
}

/// Distinct terms in first-occurrence order.
pub fn query_terms(query: &str) -> Vec<String> {
    let mut seen = HashSet::new();
    words(query).into_iter().filter(|w| seen.insert(w.clone())).collect()
}

pub fn idf(n_docs: usize, df: usize) -> f64 {
    let (n, df) = (n_docs as f64, df as f64);
    (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
}

/// Contribution of one term to one document.
pub fn term_score(params: Bm25Params, idf: f64, tf: f64, doc_len: f64, avg_doc_len: f64) -> f64 {
    let norm = params.k1 * (1.0 - params.b + params.b * doc_len / avg_doc_len);
    idf * tf * (params.k1 + 1.0) / (tf + norm)
}

impl Bm25Index {
    pub fn build(pool: &CandidatePool, indexed_text: IndexedText, params: Bm25Params) -> Result<Self> {
        if pool.is_empty() {
            return Err(Error::Invalid("cannot build a BM25 index over an empty pool".into()));
        }
        let mut postings: BTreeMap<String, Vec<Posting>> = BTreeMap::new();
        let mut doc_ids = Vec::with_capacity(pool.len());
        let mut doc_lengths = Vec::with_capacity(pool.len());

        for (doc, sample) in pool.samples().iter().enumerate() {
            let tokens = words(&indexed_text.render(sample));
            let mut tf: BTreeMap<String, u32> = BTreeMap::new();
            for t in &tokens {
                *tf.entry(t.clone()).or_default() += 1;
            }
            for (term, count) in tf {
                postings.entry(term).or_default().push(Posting {
                    doc: doc as u32,
                    tf: count,
                });
            }
            doc_ids.push(sample.id.clone());
            doc_lengths.push(tokens.len() as u32);
        }
        let avg_doc_length =
            doc_lengths.iter().map(|&l| l as f64).sum::<f64>() / doc_lengths.len() as f64;

        Ok(Self {
            params,
            indexed_text,
            doc_ids,
            doc_lengths,
            avg_doc_length,
            postings,
        })
    }

    pub fn len(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doc_ids.is_empty()
    }

    pub fn avg_doc_length(&self) -> f64 {
        self.avg_doc_length
    }

    pub fn doc_ids(&self) -> &[String] {
        &self.doc_ids
    }

    pub fn doc_length(&self, id: &str) -> Option<usize> {
        self.doc_ids
            .iter()
            .position(|d| d == id)
            .map(|i| self.doc_lengths[i] as usize)
    }

    pub fn postings(&self, term: &str) -> &[Posting] {
        self.postings.get(term).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn terms(&self) -> impl Iterator<Item = &str> {
        self.postings.keys().map(String::as_str)
    }

    /// Top `k` documents with positive score, descending, ties by ascending id.
    pub fn top_k(&self, query: &str, k: usize) -> Vec<ScoredId> {
        if k == 0 {
            return Vec::new();
        }
        let n = self.doc_ids.len();
        let mut scores = vec![0.0f64; n];
        let mut touched = vec![false; n];
        for term in query_terms(query) {
            let Some(list) = self.postings.get(&term) else {
                continue;
            };
            let idf = idf(n, list.len());
            for p in list {
                let d = p.doc as usize;
                scores[d] += term_score(
                    self.params,
                    idf,
                    p.tf as f64,
                    self.doc_lengths[d] as f64,
                    self.avg_doc_length,
                );
                touched[d] = true;
            }
        }
        let mut hits: Vec<ScoredId> = (0..n)
            .filter(|&d| touched[d] && scores[d] > 0.0)
            .map(|d| ScoredId::new(self.doc_ids[d].clone(), scores[d]))
            .collect();
        sort_ranked(&mut hits);
        hits.truncate(k);
        hits
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = serde_json::to_vec(self)?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Extraction, Task};

    fn doc(id: &str, input: &str) -> IESample {
        IESample {
            id: id.into(),
            task: Task::Ner,
            dataset: "toy".into(),
            schema: vec!["x".into()],
            input: input.into(),
            output: vec![],
            event: None,
        }
    }

    fn pool(docs: &[(&str, &str)]) -> CandidatePool {
        CandidatePool::from_samples(docs.iter().map(|(i, t)| doc(i, t)).collect()).unwrap()
    }

    #[test]
    fn single_doc_lengths() {
        let idx = Bm25Index::build(&pool(&[("d", "a b")]), IndexedText::Input, Bm25Params::default()).unwrap();
        assert_eq!(idx.doc_length("d"), Some(2));
        assert_eq!(idx.avg_doc_length(), 2.0);
    }

    #[test]
    fn disjoint_docs_have_disjoint_postings() {
        let idx = Bm25Index::build(&pool(&[("a", "x y"), ("b", "z w")]), IndexedText::Input, Bm25Params::default())
            .unwrap();
        for term in idx.terms() {
            assert_eq!(idx.postings(term).len(), 1);
        }
        assert_eq!(idx.terms().count(), 4);
    }

    #[test]
    fn empty_pool_is_an_error() {
        let err = Bm25Index::build(&CandidatePool::default(), IndexedText::Input, Bm25Params::default());
        assert!(err.is_err());
    }

    #[test]
    fn unknown_query_terms_give_nothing() {
        let idx = Bm25Index::build(&pool(&[("a", "x y")]), IndexedText::Input, Bm25Params::default()).unwrap();
        assert!(idx.top_k("nothing matches", 5).is_empty());
    }

    #[test]
    fn single_doc_query_hits() {
        let idx = Bm25Index::build(&pool(&[("a", "x y")]), IndexedText::Input, Bm25Params::default()).unwrap();
        let hits = idx.top_k("y", 5);
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].id, "a");
    }

    #[test]
    fn hand_evaluated_three_doc_corpus() {
        // N = 3, lengths 3/2/4, avgdl = 3.
        let idx = Bm25Index::build(
            &pool(&[("a", "cat sat cat"), ("b", "dog sat"), ("c", "cat dog dog bird")]),
            IndexedText::Input,
            Bm25Params::default(),
        )
        .unwrap();
        let hits = idx.top_k("cat dog", 10);
        // df(cat) = df(dog) = 2 → idf = ln(1 + 1.5/2.5) = ln 1.6.
        let idf = 1.6f64.ln();
        let tfn = |tf: f64, dl: f64| tf * 2.2 / (tf + 1.2 * (0.25 + 0.75 * dl / 3.0));
        let a = idf * tfn(2.0, 3.0);
        let b = idf * tfn(1.0, 2.0);
        let c = idf * tfn(1.0, 4.0) + idf * tfn(2.0, 4.0);
        let expected = [("c", c), ("a", a), ("b", b)];
        assert_eq!(hits.len(), 3);
        for (hit, (id, score)) in hits.iter().zip(expected) {
            assert_eq!(hit.id, id);
            assert!((hit.score - score).abs() < 1e-9, "{} vs {}", hit.score, score);
        }
    }

    #[test]
    fn ties_break_by_ascending_id() {
        let idx = Bm25Index::build(&pool(&[("b", "same text"), ("a", "same text")]), IndexedText::Input, Bm25Params::default())
            .unwrap();
        let hits = idx.top_k("same", 2);
        assert_eq!(hits[0].id, "a");
        assert_eq!(hits[0].score, hits[1].score);
    }

    #[test]
    fn input_and_output_selector_indexes_labels() {
        let mut s = doc("a", "John");
        s.schema = vec!["person".into()];
        s.output = vec![Extraction::Entity {
            label: "person".into(),
            span: "John".into(),
        }];
        let p = CandidatePool::from_samples(vec![s]).unwrap();
        let idx = Bm25Index::build(&p, IndexedText::InputAndOutput, Bm25Params::default()).unwrap();
        assert_eq!(idx.postings("person").len(), 1);
        let idx = Bm25Index::build(&p, IndexedText::Input, Bm25Params::default()).unwrap();
        assert!(idx.postings("person").is_empty());
    }

    #[test]
    fn save_and_load() {
        let idx = Bm25Index::build(&pool(&[("a", "x y"), ("b", "y z")]), IndexedText::Input, Bm25Params::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bm25.json");
        idx.save(&path).unwrap();
        assert_eq!(Bm25Index::load(&path).unwrap(), idx);
    }
}
