#![allow(dead_code)]

use std::collections::{BTreeSet, HashMap, HashSet};

use rand::seq::SliceRandom;
use rand::Rng;

use demosel::corpus::{EventContext, Extraction, IESample, Task};

pub const WORDS: &[&str] = &[
    "alpha", "bravo", "charlie", "delta", "echo", "foxtrot", "golf", "hotel", "india", "juliet", "kilo", "lima",
    "mike", "november", "oscar", "papa", "quebec", "romeo", "sierra", "tango", "uniform", "victor", "whiskey",
    "xray", "yankee", "zulu", "river", "stone", "maple", "cedar",
];

pub fn sentence(rng: &mut impl Rng, min: usize, max: usize) -> String {
    let n = rng.gen_range(min..=max);
    (0..n).map(|_| *WORDS.choose(rng).unwrap()).collect::<Vec<_>>().join(" ")
}

pub fn plain_sample(id: String, input: String) -> IESample {
    IESample {
        id,
        task: Task::Ner,
        dataset: "toy".into(),
        schema: vec!["thing".into()],
        input,
        output: Vec::new(),
        event: None,
    }
}

/// Term frequencies straight from the definition, one document at a time.
pub fn brute_bm25(docs: &[(String, String)], query: &str, k1: f64, b: f64) -> Vec<(String, f64)> {
    let toks: Vec<Vec<String>> = docs.iter().map(|(_, t)| demosel::text::words(t)).collect();
    let n = docs.len() as f64;
    let avg = toks.iter().map(Vec::len).sum::<usize>() as f64 / n;
    let mut terms: Vec<String> = Vec::new();
    for w in demosel::text::words(query) {
        if !terms.contains(&w) {
            terms.push(w);
        }
    }
    let mut out = Vec::new();
    for ((id, _), doc) in docs.iter().zip(&toks) {
        let mut score = 0.0;
        for t in &terms {
            let df = toks.iter().filter(|d| d.contains(t)).count() as f64;
            let tf = doc.iter().filter(|w| *w == t).count() as f64;
            if tf == 0.0 {
                continue;
            }
            let idf = (1.0 + (n - df + 0.5) / (df + 0.5)).ln();
            score += idf * tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * doc.len() as f64 / avg));
        }
        if score > 0.0 {
            out.push((id.clone(), score));
        }
    }
    out.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
    out
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na * nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

fn key(e: &Extraction, event: Option<&str>) -> Vec<String> {
    match e {
        Extraction::Entity { label, span } => vec!["ner".into(), label.clone(), span.clone()],
        Extraction::Relation { relation, subject, object } => {
            vec!["re".into(), relation.clone(), subject.clone(), object.clone()]
        }
        Extraction::Trigger { label, trigger } => vec!["ed".into(), label.clone(), trigger.clone()],
        Extraction::Argument { role, argument } => {
            vec!["eae".into(), event.unwrap_or_default().to_string(), role.clone(), argument.clone()]
        }
    }
}

/// (tp, fp, fn) per (dataset, task) by pairwise comparison of distinct records.
pub fn brute_counts(preds: &HashMap<String, Vec<Extraction>>, golds: &[IESample]) -> HashMap<(String, Task), (usize, usize, usize)> {
    let mut out: HashMap<(String, Task), (usize, usize, usize)> = HashMap::new();
    for g in golds {
        let ev = g.event.as_ref().map(|e| e.event_type.as_str());
        let gk: BTreeSet<Vec<String>> = g.output.iter().map(|e| key(e, ev)).collect();
        let pk: BTreeSet<Vec<String>> = preds[&g.id].iter().map(|e| key(e, ev)).collect();
        let entry = out.entry((g.dataset.clone(), g.task)).or_default();
        for p in &pk {
            if gk.iter().any(|x| x == p) {
                entry.0 += 1;
            } else {
                entry.1 += 1;
            }
        }
        for x in &gk {
            if !pk.iter().any(|p| p == x) {
                entry.2 += 1;
            }
        }
    }
    out
}

pub fn prf(tp: usize, fp: usize, fn_: usize) -> (f64, f64, f64) {
    let p = if tp + fp == 0 { 1.0 } else { tp as f64 / (tp + fp) as f64 };
    let r = if tp + fn_ == 0 { 1.0 } else { tp as f64 / (tp + fn_) as f64 };
    let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (100.0 * p, 100.0 * r, 100.0 * f)
}

/// A label or surface made of pool words; never contains separators.
pub fn phrase(rng: &mut impl Rng, max_words: usize) -> String {
    sentence(rng, 1, max_words)
}

/// Distinct random records of `task` over labels drawn from `schema`.
pub fn random_output(rng: &mut impl Rng, task: Task, schema: &[String], max: usize) -> Vec<Extraction> {
    let n = rng.gen_range(0..=max);
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for _ in 0..n {
        let label = schema.choose(rng).unwrap().clone();
        let e = match task {
            Task::Ner => Extraction::Entity { label, span: phrase(rng, 3) },
            Task::Re => Extraction::Relation { relation: label, subject: phrase(rng, 3), object: phrase(rng, 3) },
            Task::Ed => Extraction::Trigger { label, trigger: phrase(rng, 2) },
            Task::Eae => Extraction::Argument { role: label, argument: phrase(rng, 3) },
        };
        if seen.insert(e.clone()) {
            out.push(e);
        }
    }
    out
}

pub fn random_schema(rng: &mut impl Rng, n: usize) -> Vec<String> {
    let mut s: Vec<String> = Vec::new();
    while s.len() < n {
        let l = format!("{} {}", WORDS.choose(rng).unwrap(), rng.gen_range(0..5));
        if !s.contains(&l) {
            s.push(l);
        }
    }
    s
}

pub fn event_for(task: Task, rng: &mut impl Rng) -> Option<EventContext> {
    (task == Task::Eae).then(|| EventContext {
        event_type: ["attack", "merger", "arrest"].choose(rng).unwrap().to_string(),
        trigger: "struck".into(),
    })
}
