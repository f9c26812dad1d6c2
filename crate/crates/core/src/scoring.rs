//! Ranking candidate demonstrations by language-model preference.
//!
//! For every training query: BM25 proposes `k_init` candidates, each
//! candidate is scored by the mean log-likelihood the scoring model assigns
//! to the query's gold output when that candidate is the sole demonstration,
//! and the descending ranking is split into top-k positives and last-n
//! negatives.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::{build_prompt, linearize, linearize_output, ScoredDemo};
use crate::corpus::{CandidatePool, IESample};
use crate::error::{Error, Result};
use crate::llm::{BackendError, Gateway};
use crate::sparse_index::Bm25Index;
use crate::{derive_seed, sort_ranked, ScoredId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredCandidateSet {
    pub query_id: String,
    /// Descending by score, ties by ascending id.
    pub candidates: Vec<ScoredId>,
    #[serde(default)]
    pub positives: Vec<String>,
    #[serde(default)]
    pub negatives: Vec<String>,
}

/// BM25 candidates for `query`, padded with seeded random pool samples when
/// fewer than `min(k_init, |pool| - 1)` have a positive score.
pub fn init_candidates(
    query: &IESample,
    index: &Bm25Index,
    pool: &CandidatePool,
    k_init: usize,
    seed: u64,
) -> Result<Vec<String>> {
    if pool.len() < 2 {
        return Err(Error::Invalid(format!(
            "candidate initialization needs at least 2 pool samples, found {}",
            pool.len()
        )));
    }
    let others = pool.len() - usize::from(pool.get(&query.id).is_some());
    let target = k_init.min(others);

    let mut chosen: Vec<String> = index
        .top_k(&query.input, k_init + 1)
        .into_iter()
        .map(|h| h.id)
        .filter(|id| *id != query.id)
        .take(target)
        .collect();

    if chosen.len() < target {
        let taken: std::collections::HashSet<&str> = chosen.iter().map(String::as_str).collect();
        let remaining: Vec<&str> = pool
            .ids()
            .filter(|id| *id != query.id && !taken.contains(id))
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("pad/{}", query.id)));
        let pads: Vec<String> = remaining
            .choose_multiple(&mut rng, target - chosen.len())
            .map(|s| s.to_string())
            .collect();
        chosen.extend(pads);
    }
    Ok(chosen)
}

/// The scoring prompt: instruction, one demonstration, the query, `Output:`.
pub fn scoring_prefix(instruction: &str, demo: &IESample, query: &IESample) -> String {
    let demo = ScoredDemo {
        sample: linearize(demo, true),
        score: 0.0,
    };
    build_prompt(
        instruction,
        &[demo],
        &linearize(query, false),
        &crate::llm::WhitespaceCounter,
        usize::MAX,
    )
    .expect("unbounded budget")
    .text
}

/// The scored continuation: the query's rendered gold output.
pub fn scoring_continuation(query: &IESample) -> String {
    format!(" {}", linearize_output(&query.output))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateFailure {
    pub candidate_id: String,
    pub error: BackendError,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("query {query_id}: {} candidate(s) failed to score", failures.len())]
pub struct ScoringFailure {
    pub query_id: String,
    pub failures: Vec<CandidateFailure>,
}

/// Score every candidate against `query` and rank descending. Any failed
/// candidate fails the whole set.
pub fn score_candidates(
    gateway: &Gateway,
    instruction: &str,
    query: &IESample,
    candidate_ids: &[String],
    pool: &CandidatePool,
) -> std::result::Result<ScoredCandidateSet, ScoringFailure> {
    let continuation = scoring_continuation(query);
    let mut scored = Vec::with_capacity(candidate_ids.len());
    let mut failures = Vec::new();
    for id in candidate_ids {
        let result = match pool.get(id) {
            Some(demo) => gateway.avg_loglik(&scoring_prefix(instruction, demo, query), &continuation),
            None => Err(BackendError::Protocol(format!("candidate {id} not in pool"))),
        };
        match result {
            Ok(score) => scored.push(ScoredId::new(id.clone(), score)),
            Err(error) => failures.push(CandidateFailure {
                candidate_id: id.clone(),
                error,
            }),
        }
    }
    if !failures.is_empty() {
        return Err(ScoringFailure {
            query_id: query.id.clone(),
            failures,
        });
    }
    sort_ranked(&mut scored);
    Ok(ScoredCandidateSet {
        query_id: query.id.clone(),
        candidates: scored,
        positives: Vec::new(),
        negatives: Vec::new(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DropReason {
    pub query_id: String,
    pub reason: String,
}

/// Positives are the first `top_k` ids, negatives the last `last_n`.
pub fn split_positives_negatives(
    mut scored: ScoredCandidateSet,
    top_k: usize,
    last_n: usize,
) -> std::result::Result<ScoredCandidateSet, DropReason> {
    let have = scored.candidates.len();
    if have < top_k + last_n {
        return Err(DropReason {
            query_id: scored.query_id,
            reason: format!("{have} candidates, need top_k + last_n = {}", top_k + last_n),
        });
    }
    scored.positives = scored.candidates[..top_k].iter().map(|c| c.id.clone()).collect();
    scored.negatives = scored.candidates[have - last_n..].iter().map(|c| c.id.clone()).collect();
    Ok(scored)
}

#[derive(Debug, Clone)]
pub struct ScoringParams {
    pub top_k: usize,
    pub last_n: usize,
    pub parallelism: usize,
}

#[derive(Debug, Default)]
pub struct ScoringOutcome {
    /// In query order.
    pub sets: Vec<ScoredCandidateSet>,
    pub dropped: Vec<DropReason>,
}

/// Score and split every query. Work fans out across queries; the result is
/// assembled in query order regardless of completion order.
pub fn score_all(
    gateway: &Gateway,
    instruction_for: &(dyn Fn(&IESample) -> String + Sync),
    queries: &[(IESample, Vec<String>)],
    pool: &CandidatePool,
    params: &ScoringParams,
) -> Result<ScoringOutcome> {
    let threads = rayon::ThreadPoolBuilder::new()
        .num_threads(params.parallelism.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let results: Vec<_> = threads.install(|| {
        queries
            .par_iter()
            .map(|(q, cands)| score_candidates(gateway, &instruction_for(q), q, cands, pool))
            .collect()
    });

    let mut outcome = ScoringOutcome::default();
    for r in results {
        match r {
            Ok(set) => match split_positives_negatives(set, params.top_k, params.last_n) {
                Ok(set) => outcome.sets.push(set),
                Err(drop) => {
                    log::info!("dropping query {}: {}", drop.query_id, drop.reason);
                    outcome.dropped.push(drop);
                }
            },
            Err(fail) => {
                let first = &fail.failures[0];
                let reason = format!(
                    "{} candidate(s) failed to score, first {}: {}",
                    fail.failures.len(),
                    first.candidate_id,
                    first.error
                );
                log::warn!("dropping query {}: {reason}", fail.query_id);
                if fail.failures.iter().all(|f| !matches!(f.error, BackendError::Unrecognized(_))) {
                    outcome.dropped.push(DropReason {
                        query_id: fail.query_id,
                        reason,
                    });
                } else {
                    return Err(Error::Backend(first.error.clone()));
                }
            }
        }
    }
    Ok(outcome)
}

pub fn write_scored(path: &Path, sets: &[ScoredCandidateSet]) -> Result<()> {
    let mut buf = Vec::new();
    for s in sets {
        serde_json::to_writer(&mut buf, s)?;
        buf.push(b'\n');
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&buf))
        .map_err(|e| Error::io(path, e))
}

pub fn read_scored(path: &Path) -> Result<Vec<ScoredCandidateSet>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::MalformedLine {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Extraction, Task};
    use crate::llm::mock::{mock_preference_backend, UniformBackend};
    use crate::sparse_index::{Bm25Params, IndexedText};
    use std::sync::Arc;

    fn ner(id: &str, input: &str, label: &str) -> IESample {
        IESample {
            id: id.into(),
            task: Task::Ner,
            dataset: "toy".into(),
            schema: vec!["person".into(), "place".into()],
            input: input.into(),
            output: vec![Extraction::Entity {
                label: label.into(),
                span: input.split(' ').next().unwrap().into(),
            }],
            event: None,
        }
    }

    fn ed(id: &str, input: &str) -> IESample {
        IESample {
            id: id.into(),
            task: Task::Ed,
            dataset: "toy".into(),
            schema: vec!["attack".into()],
            input: input.into(),
            output: vec![Extraction::Trigger {
                label: "attack".into(),
                trigger: input.split(' ').next().unwrap().into(),
            }],
            event: None,
        }
    }

    fn set(scores: &[(&str, f64)]) -> ScoredCandidateSet {
        let mut c: Vec<ScoredId> = scores.iter().map(|(i, s)| ScoredId::new(*i, *s)).collect();
        sort_ranked(&mut c);
        ScoredCandidateSet {
            query_id: "q".into(),
            candidates: c,
            positives: vec![],
            negatives: vec![],
        }
    }

    #[test]
    fn small_pool_bounds_candidates() {
        let pool = CandidatePool::from_samples(vec![
            ner("a", "alpha one", "person"),
            ner("b", "beta two", "person"),
            ner("c", "gamma three", "person"),
        ])
        .unwrap();
        let idx = Bm25Index::build(&pool, IndexedText::Input, Bm25Params::default()).unwrap();
        let got = init_candidates(pool.get("a").unwrap(), &idx, &pool, 100, 7).unwrap();
        assert_eq!(got.len(), 2);
        assert!(!got.contains(&"a".to_string()));
    }

    #[test]
    fn identical_document_ranks_first() {
        let pool = CandidatePool::from_samples(vec![
            ner("a", "alpha beta gamma", "person"),
            ner("b", "alpha beta gamma", "person"),
            ner("c", "alpha delta", "person"),
        ])
        .unwrap();
        let idx = Bm25Index::build(&pool, IndexedText::Input, Bm25Params::default()).unwrap();
        let got = init_candidates(pool.get("a").unwrap(), &idx, &pool, 2, 7).unwrap();
        assert_eq!(got[0], "b");
    }

    #[test]
    fn pool_of_one_is_an_error() {
        let pool = CandidatePool::from_samples(vec![ner("a", "alpha", "person")]).unwrap();
        let idx = Bm25Index::build(&pool, IndexedText::Input, Bm25Params::default()).unwrap();
        assert!(init_candidates(pool.get("a").unwrap(), &idx, &pool, 10, 0).is_err());
    }

    #[test]
    fn equal_scores_sort_by_id() {
        let s = set(&[("b", -1.0), ("a", -1.0), ("c", -0.5)]);
        let ids: Vec<&str> = s.candidates.iter().map(|c| c.id.as_str()).collect();
        assert_eq!(ids, ["c", "a", "b"]);
    }

    #[test]
    fn split_small() {
        let s = set(&[("a", 5.0), ("b", 4.0), ("c", 3.0), ("d", 2.0), ("e", 1.0)]);
        let s = split_positives_negatives(s, 1, 2).unwrap();
        assert_eq!(s.positives, ["a"]);
        assert_eq!(s.negatives, ["d", "e"]);
    }

    #[test]
    fn split_defaults_on_hundred() {
        let scores: Vec<(String, f64)> = (0..100).map(|i| (format!("c{i:03}"), -(i as f64))).collect();
        let refs: Vec<(&str, f64)> = scores.iter().map(|(i, s)| (i.as_str(), *s)).collect();
        let s = split_positives_negatives(set(&refs), 3, 16).unwrap();
        assert_eq!(s.positives.len(), 3);
        assert_eq!(s.negatives.len(), 16);
        assert!(s.positives.iter().all(|p| !s.negatives.contains(p)));
    }

    #[test]
    fn too_few_candidates_drop_the_query() {
        let scores: Vec<(String, f64)> = (0..10).map(|i| (format!("c{i}"), i as f64)).collect();
        let refs: Vec<(&str, f64)> = scores.iter().map(|(i, s)| (i.as_str(), *s)).collect();
        let err = split_positives_negatives(set(&refs), 3, 16).unwrap_err();
        assert_eq!(err.query_id, "q");
    }

    #[test]
    fn same_task_candidate_outranks_off_task() {
        let q = ner("q", "Kalo ran home", "person");
        let same = ner("s", "Miro sat down", "person");
        let off = ed("o", "stormed the hill");
        let pool = CandidatePool::from_samples(vec![q.clone(), same, off]).unwrap();
        let g = Gateway::new(Arc::new(mock_preference_backend(&pool)));
        let s = score_candidates(&g, "I", &q, &["o".into(), "s".into()], &pool).unwrap();
        assert_eq!(s.candidates[0].id, "s");
        assert!((s.candidates[0].score - (-1.0)).abs() < 1e-12);
        assert!((s.candidates[1].score - (-2.0)).abs() < 1e-12);
    }

    #[test]
    fn single_candidate_ranking() {
        let q = ner("q", "Kalo ran", "person");
        let pool = CandidatePool::from_samples(vec![q.clone(), ner("a", "x y", "place")]).unwrap();
        let g = Gateway::new(Arc::new(UniformBackend::new(4)));
        let s = score_candidates(&g, "I", &q, &["a".into()], &pool).unwrap();
        assert_eq!(s.candidates.len(), 1);
    }

    #[test]
    fn failures_mark_the_set() {
        let q = ner("q", "Kalo ran", "person");
        let pool = CandidatePool::from_samples(vec![q.clone()]).unwrap();
        let g = Gateway::new(Arc::new(UniformBackend::new(4)));
        let err = score_candidates(&g, "I", &q, &["missing".into()], &pool).unwrap_err();
        assert_eq!(err.failures[0].candidate_id, "missing");
    }

    #[test]
    fn scored_file_round_trip() {
        let s = split_positives_negatives(set(&[("a", -0.93), ("b", -1.5)]), 1, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("scored.jsonl");
        write_scored(&p, &[s.clone()]).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(
            text,
            "{\"query_id\":\"q\",\"candidates\":[{\"id\":\"a\",\"score\":-0.93},{\"id\":\"b\",\"score\":-1.5}],\"positives\":[\"a\"],\"negatives\":[\"b\"]}\n"
        );
        assert_eq!(read_scored(&p).unwrap(), vec![s]);
    }
}
