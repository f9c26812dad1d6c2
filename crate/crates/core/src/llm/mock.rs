//! In-process backends for tests and desk-scale runs.

use std::collections::{HashMap, HashSet};

use super::{BackendError, Capabilities, GenerationParams, LlmBackend, TokenCounter, WhitespaceCounter};
use crate::codec::{linearize_output, output_labels, parse_output, parse_prompt_blocks, RenderedBlock};
use crate::corpus::{CandidatePool, Extraction, IESample, Task};
use crate::text::{jaccard, word_set};

const DEFAULT_BUDGET: usize = 1 << 20;

fn scoring_only() -> Capabilities {
    Capabilities {
        scoring: true,
        generation: false,
    }
}

fn generation_only() -> Capabilities {
    Capabilities {
        scoring: false,
        generation: true,
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

fn truncate_words(text: &str, max: usize) -> String {
    if text.split_whitespace().count() <= max {
        return text.to_string();
    }
    text.split_whitespace().take(max).collect::<Vec<_>>().join(" ")
}

/// Every whitespace token has probability `1 / vocab_size`.
pub struct UniformBackend {
    vocab_size: usize,
    max_input_tokens: usize,
}

impl UniformBackend {
    pub fn new(vocab_size: usize) -> Self {
        assert!(vocab_size > 0, "vocabulary must be non-empty");
        Self {
            vocab_size,
            max_input_tokens: DEFAULT_BUDGET,
        }
    }

    pub fn with_max_input_tokens(mut self, max: usize) -> Self {
        self.max_input_tokens = max;
        self
    }
}

impl TokenCounter for UniformBackend {
    fn count_tokens(&self, text: &str) -> usize {
        WhitespaceCounter.count_tokens(text)
    }
}

impl LlmBackend for UniformBackend {
    fn name(&self) -> String {
        format!("mock-uniform-{}", self.vocab_size)
    }
    fn capabilities(&self) -> Capabilities {
        scoring_only()
    }
    fn max_input_tokens(&self) -> usize {
        self.max_input_tokens
    }
    fn tokenization(&self) -> String {
        "whitespace".into()
    }
    fn continuation_logprobs(&self, _prefix: &str, continuation: &str) -> Result<Vec<f64>, BackendError> {
        let lp = -(self.vocab_size as f64).ln();
        Ok(vec![lp; self.count_tokens(continuation)])
    }
    fn complete(&self, _: &str, _: &GenerationParams) -> Result<String, BackendError> {
        unreachable!("capability checked by caller")
    }
}

/// Hashed bigram model over `buckets` word classes: a proper conditional
/// distribution whose value depends on token order.
pub struct BigramBackend {
    buckets: u64,
}

impl BigramBackend {
    pub fn new(buckets: u64) -> Self {
        assert!(buckets > 1);
        Self { buckets }
    }

    fn bucket(&self, token: &str) -> u64 {
        fnv1a(token.as_bytes()) % self.buckets
    }

    fn weight(&self, prev: u64, next: u64) -> f64 {
        let mut key = [0u8; 16];
        key[..8].copy_from_slice(&prev.to_le_bytes());
        key[8..].copy_from_slice(&next.to_le_bytes());
        1.0 + (fnv1a(&key) % 8) as f64
    }

    fn logprob(&self, prev: u64, next: u64) -> f64 {
        let z: f64 = (0..self.buckets).map(|b| self.weight(prev, b)).sum();
        (self.weight(prev, next) / z).ln()
    }
}

impl TokenCounter for BigramBackend {
    fn count_tokens(&self, text: &str) -> usize {
        WhitespaceCounter.count_tokens(text)
    }
}

impl LlmBackend for BigramBackend {
    fn name(&self) -> String {
        format!("mock-bigram-{}", self.buckets)
    }
    fn capabilities(&self) -> Capabilities {
        scoring_only()
    }
    fn max_input_tokens(&self) -> usize {
        DEFAULT_BUDGET
    }
    fn tokenization(&self) -> String {
        "whitespace".into()
    }
    fn continuation_logprobs(&self, prefix: &str, continuation: &str) -> Result<Vec<f64>, BackendError> {
        let mut prev = prefix
            .split_whitespace()
            .last()
            .map(|t| self.bucket(t))
            .unwrap_or(self.buckets);
        Ok(continuation
            .split_whitespace()
            .map(|t| {
                let b = self.bucket(t);
                let lp = self.logprob(prev, b);
                prev = b;
                lp
            })
            .collect())
    }
    fn complete(&self, _: &str, _: &GenerationParams) -> Result<String, BackendError> {
        unreachable!("capability checked by caller")
    }
}

/// Returns a configured completion per exact prompt, or a default.
pub struct EchoBackend {
    canned: HashMap<String, String>,
    default: String,
}

impl EchoBackend {
    pub fn new(default: impl Into<String>) -> Self {
        Self {
            canned: HashMap::new(),
            default: default.into(),
        }
    }

    pub fn with_completion(mut self, prompt: impl Into<String>, completion: impl Into<String>) -> Self {
        self.canned.insert(prompt.into(), completion.into());
        self
    }
}

impl TokenCounter for EchoBackend {
    fn count_tokens(&self, text: &str) -> usize {
        WhitespaceCounter.count_tokens(text)
    }
}

impl LlmBackend for EchoBackend {
    fn name(&self) -> String {
        "mock-echo".into()
    }
    fn capabilities(&self) -> Capabilities {
        generation_only()
    }
    fn max_input_tokens(&self) -> usize {
        DEFAULT_BUDGET
    }
    fn tokenization(&self) -> String {
        "whitespace".into()
    }
    fn continuation_logprobs(&self, _: &str, _: &str) -> Result<Vec<f64>, BackendError> {
        unreachable!("capability checked by caller")
    }
    fn complete(&self, prompt: &str, params: &GenerationParams) -> Result<String, BackendError> {
        let text = self.canned.get(prompt).unwrap_or(&self.default);
        Ok(truncate_words(text, params.max_new_tokens))
    }
}

pub const PREFERENCE_BASE: f64 = -2.0;
pub const PREFERENCE_LABEL_WEIGHT: f64 = 1.0;
pub const PREFERENCE_TOKEN_WEIGHT: f64 = 0.5;

/// Stand-in for the scoring model: `-2 + 1.0·J(labels) + 0.5·J(input words)`,
/// where `J` is set Jaccard similarity (zero over two empty sets).
pub fn preference_score(
    demo_labels: &HashSet<String>,
    query_labels: &HashSet<String>,
    demo_input: &str,
    query_input: &str,
) -> f64 {
    PREFERENCE_BASE
        + PREFERENCE_LABEL_WEIGHT * jaccard(demo_labels, query_labels)
        + PREFERENCE_TOKEN_WEIGHT * jaccard(&word_set(demo_input), &word_set(query_input))
}

/// [`preference_score`] of `demo` as the sole demonstration for `query`.
pub fn oracle_score(demo: &IESample, query: &IESample) -> f64 {
    let labels = |s: &IESample| s.output.iter().map(|e| e.label().to_string()).collect::<HashSet<_>>();
    preference_score(&labels(demo), &labels(query), &demo.input, &query.input)
}

/// Scoring backend that reads the one-demonstration scoring prompt and
/// returns [`preference_score`] for every continuation token.
pub struct PreferenceBackend {
    labels: HashMap<(Task, String, String), HashSet<String>>,
}

impl PreferenceBackend {
    pub fn new(pool: &CandidatePool) -> Self {
        let labels = pool
            .samples()
            .iter()
            .map(|s| {
                let set = s.output.iter().map(|e| e.label().to_string()).collect();
                ((s.task, s.input.clone(), linearize_output(&s.output)), set)
            })
            .collect();
        Self { labels }
    }

    fn demo_labels(&self, block: &RenderedBlock) -> HashSet<String> {
        let output = block.output.clone().unwrap_or_default();
        block
            .task
            .and_then(|t| self.labels.get(&(t, block.input.clone(), output.clone())))
            .cloned()
            .unwrap_or_else(|| output_labels(&output))
    }
}

/// Scoring backend over `pool`; see [`PreferenceBackend`].
pub fn mock_preference_backend(pool: &CandidatePool) -> PreferenceBackend {
    PreferenceBackend::new(pool)
}

impl TokenCounter for PreferenceBackend {
    fn count_tokens(&self, text: &str) -> usize {
        WhitespaceCounter.count_tokens(text)
    }
}

impl LlmBackend for PreferenceBackend {
    fn name(&self) -> String {
        "mock-preference".into()
    }
    fn capabilities(&self) -> Capabilities {
        scoring_only()
    }
    fn max_input_tokens(&self) -> usize {
        DEFAULT_BUDGET
    }
    fn tokenization(&self) -> String {
        "whitespace".into()
    }
    fn continuation_logprobs(&self, prefix: &str, continuation: &str) -> Result<Vec<f64>, BackendError> {
        let blocks = parse_prompt_blocks(prefix);
        let [demo, query] = blocks.as_slice() else {
            return Err(BackendError::Unrecognized(format!(
                "expected one demonstration and one query block, found {} blocks",
                blocks.len()
            )));
        };
        if query.output.as_deref() != Some("") || demo.output.as_deref().is_none_or(str::is_empty) {
            return Err(BackendError::Unrecognized("prompt is not a scoring prompt".into()));
        }
        let score = preference_score(
            &self.demo_labels(demo),
            &output_labels(continuation),
            &demo.input,
            &query.input,
        );
        Ok(vec![score; self.count_tokens(continuation).max(1)])
    }
    fn complete(&self, _: &str, _: &GenerationParams) -> Result<String, BackendError> {
        unreachable!("capability checked by caller")
    }
}

fn contains_word(haystack: &str, needle: &str) -> Option<usize> {
    haystack.match_indices(needle).map(|(i, _)| i).find(|&i| {
        let before = haystack[..i].chars().next_back();
        let after = haystack[i + needle.len()..].chars().next();
        !before.is_some_and(char::is_alphanumeric) && !after.is_some_and(char::is_alphanumeric)
    })
}

/// Generation backend that imitates in-context learning: it copies every
/// demonstration record whose label is in the query schema and whose surface
/// strings occur in the query input. Extraction quality therefore tracks the
/// quality of the retrieved demonstrations.
pub struct MimicBackend;

impl TokenCounter for MimicBackend {
    fn count_tokens(&self, text: &str) -> usize {
        WhitespaceCounter.count_tokens(text)
    }
}

impl LlmBackend for MimicBackend {
    fn name(&self) -> String {
        "mock-mimic".into()
    }
    fn capabilities(&self) -> Capabilities {
        generation_only()
    }
    fn max_input_tokens(&self) -> usize {
        DEFAULT_BUDGET
    }
    fn tokenization(&self) -> String {
        "whitespace".into()
    }
    fn continuation_logprobs(&self, _: &str, _: &str) -> Result<Vec<f64>, BackendError> {
        unreachable!("capability checked by caller")
    }
    fn complete(&self, prompt: &str, params: &GenerationParams) -> Result<String, BackendError> {
        let blocks = parse_prompt_blocks(prompt);
        let Some((query, demos)) = blocks.split_last() else {
            return Err(BackendError::Unrecognized("no query block".into()));
        };
        let Some(task) = query.task else {
            return Err(BackendError::Unrecognized("query block has no known task".into()));
        };

        let mut found: Vec<(usize, String)> = Vec::new();
        for demo in demos.iter().filter(|d| d.task == Some(task)) {
            let parsed = parse_output(demo.output.as_deref().unwrap_or_default(), task, &demo.schema);
            for ext in parsed.extractions {
                if !query.schema.iter().any(|l| l == ext.label()) {
                    continue;
                }
                let positions: Option<Vec<usize>> =
                    ext.surfaces().iter().map(|s| contains_word(&query.input, s)).collect();
                let Some(positions) = positions else { continue };
                let rendered = match &ext {
                    Extraction::Relation {
                        relation,
                        subject,
                        object,
                    } => format!("{relation}: {subject}, {object}"),
                    other => format!("{}: {}", other.label(), other.surfaces()[0]),
                };
                let pos = positions.into_iter().min().unwrap_or(0);
                if !found.iter().any(|(_, r)| *r == rendered) {
                    found.push((pos, rendered));
                }
            }
        }
        found.sort();
        let text = if found.is_empty() {
            "None".to_string()
        } else {
            found.into_iter().map(|(_, r)| r).collect::<Vec<_>>().join("; ")
        };
        Ok(format!(" {}", truncate_words(&text, params.max_new_tokens)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{build_prompt, linearize, ScoredDemo};
    use crate::corpus::IESample;
    use crate::llm::avg_loglik;

    fn sample(id: &str, task: Task, labels: &[&str], input: &str) -> IESample {
        let words: Vec<&str> = input.split(' ').collect();
        IESample {
            id: id.into(),
            task,
            dataset: "toy".into(),
            schema: labels.iter().map(|s| s.to_string()).collect(),
            input: input.into(),
            output: labels
                .iter()
                .zip(words)
                .map(|(l, w)| Extraction::Entity {
                    label: (*l).into(),
                    span: w.into(),
                })
                .collect(),
            event: None,
        }
    }

    fn scoring_call(backend: &PreferenceBackend, demo: &IESample, query: &IESample) -> f64 {
        let d = ScoredDemo {
            sample: linearize(demo, true),
            score: 0.0,
        };
        let prompt = build_prompt("I", &[d], &linearize(query, false), &WhitespaceCounter, usize::MAX).unwrap();
        let cont = format!(" {}", crate::codec::linearize_output(&query.output));
        avg_loglik(backend, &prompt.text, &cont).unwrap()
    }

    #[test]
    fn identical_demo_scores_minus_half() {
        let q = sample("q", Task::Ner, &["person", "place"], "alpha beta");
        let d = sample("d", Task::Ner, &["person", "place"], "alpha beta");
        let pool = CandidatePool::from_samples(vec![d.clone()]).unwrap();
        let b = mock_preference_backend(&pool);
        assert!((scoring_call(&b, &d, &q) - (-0.5)).abs() < 1e-12);
    }

    #[test]
    fn unrelated_demo_scores_minus_two() {
        let q = sample("q", Task::Ner, &["person"], "alpha");
        let d = sample("d", Task::Ner, &["org"], "gamma");
        let pool = CandidatePool::from_samples(vec![d.clone()]).unwrap();
        let b = mock_preference_backend(&pool);
        assert!((scoring_call(&b, &d, &q) - (-2.0)).abs() < 1e-12);
    }

    #[test]
    fn half_label_overlap_scores_minus_one_and_half() {
        // {person} vs {person, org}: J = 1/2; the inputs share no words.
        let q = sample("q", Task::Ner, &["person"], "alpha");
        let d = sample("d", Task::Ner, &["person", "org"], "gamma delta");
        let pool = CandidatePool::from_samples(vec![d.clone()]).unwrap();
        let b = mock_preference_backend(&pool);
        assert!((scoring_call(&b, &d, &q) - (-1.5)).abs() < 1e-12);
    }

    #[test]
    fn preference_backend_rejects_other_prompts() {
        let b = mock_preference_backend(&CandidatePool::default());
        assert!(matches!(
            avg_loglik(&b, "just text", "x"),
            Err(BackendError::Unrecognized(_))
        ));
    }

    #[test]
    fn preference_falls_back_to_parsed_labels() {
        let q = sample("q", Task::Ner, &["person"], "alpha");
        let d = sample("d", Task::Ner, &["person"], "alpha");
        let b = mock_preference_backend(&CandidatePool::default());
        assert!((scoring_call(&b, &d, &q) - (-0.5)).abs() < 1e-12);
    }

    #[test]
    fn mimic_copies_matching_records() {
        let demo = sample("d", Task::Ner, &["person"], "Kalo walked");
        let query = IESample {
            input: "Yesterday Kalo and Kalorin met".into(),
            ..sample("q", Task::Ner, &["person"], "x")
        };
        let d = ScoredDemo {
            sample: linearize(&demo, true),
            score: 1.0,
        };
        let prompt = build_prompt("I", &[d], &linearize(&query, false), &WhitespaceCounter, usize::MAX).unwrap();
        let out = MimicBackend.complete(&prompt.text, &GenerationParams::default()).unwrap();
        assert_eq!(out, " person: Kalo");

        let zero = build_prompt("I", &[], &linearize(&query, false), &WhitespaceCounter, usize::MAX).unwrap();
        assert_eq!(MimicBackend.complete(&zero.text, &GenerationParams::default()).unwrap(), " None");
    }
}
