//! Mixed-task information extraction samples and the candidate pool.
//!
//! Pool files are UTF-8 JSONL with one record per line:
//!
//! ```text
//! {"id": "...", "task": "NER|RE|ED|EAE", "dataset": "...", "schema": [...],
//!  "input": "...", "output": [REC, ...], "event": {"type": "...", "trigger": "..."}}
//! ```
//!
//! `REC` is `{"type","span"}` for NER, `{"relation","subject","object"}` for RE,
//! `{"type","trigger"}` for ED and `{"role","argument"}` for EAE. `event` is
//! present only on EAE records.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Task {
    #[serde(rename = "NER")]
    Ner,
    #[serde(rename = "RE")]
    Re,
    #[serde(rename = "ED")]
    Ed,
    #[serde(rename = "EAE")]
    Eae,
}

impl Task {
    pub const ALL: [Task; 4] = [Task::Ner, Task::Re, Task::Ed, Task::Eae];

    /// Short tag used in files and on the command line.
    pub fn code(self) -> &'static str {
        match self {
            Task::Ner => "NER",
            Task::Re => "RE",
            Task::Ed => "ED",
            Task::Eae => "EAE",
        }
    }

    /// Human-readable task name rendered into prompts.
    pub fn display_name(self) -> &'static str {
        match self {
            Task::Ner => "Named Entity Recognition",
            Task::Re => "Relation Extraction",
            Task::Ed => "Event Detection",
            Task::Eae => "Event Argument Extraction",
        }
    }

    pub fn from_code(code: &str) -> Option<Task> {
        Task::ALL.into_iter().find(|t| t.code().eq_ignore_ascii_case(code))
    }

    pub fn from_display_name(name: &str) -> Option<Task> {
        Task::ALL.into_iter().find(|t| t.display_name() == name)
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

/// One structured output record. Which variant is legal depends on the task.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "RawExtraction", into = "RawExtraction")]
pub enum Extraction {
    Entity { label: String, span: String },
    Relation { relation: String, subject: String, object: String },
    Trigger { label: String, trigger: String },
    Argument { role: String, argument: String },
}

impl Extraction {
    pub fn task(&self) -> Task {
        match self {
            Extraction::Entity { .. } => Task::Ner,
            Extraction::Relation { .. } => Task::Re,
            Extraction::Trigger { .. } => Task::Ed,
            Extraction::Argument { .. } => Task::Eae,
        }
    }

    /// The schema label carried by this record.
    pub fn label(&self) -> &str {
        match self {
            Extraction::Entity { label, .. } | Extraction::Trigger { label, .. } => label,
            Extraction::Relation { relation, .. } => relation,
            Extraction::Argument { role, .. } => role,
        }
    }

    /// Surface strings that must occur in the input text.
    pub fn surfaces(&self) -> Vec<&str> {
        match self {
            Extraction::Entity { span, .. } => vec![span],
            Extraction::Relation { subject, object, .. } => vec![subject, object],
            Extraction::Trigger { trigger, .. } => vec![trigger],
            Extraction::Argument { argument, .. } => vec![argument],
        }
    }

    fn fields(&self) -> Vec<(&'static str, &str)> {
        match self {
            Extraction::Entity { label, span } => vec![("type", label), ("span", span)],
            Extraction::Relation {
                relation,
                subject,
                object,
            } => vec![("relation", relation), ("subject", subject), ("object", object)],
            Extraction::Trigger { label, trigger } => vec![("type", label), ("trigger", trigger)],
            Extraction::Argument { role, argument } => vec![("role", role), ("argument", argument)],
        }
    }
}

/// Event type and trigger given to an argument extraction query.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EventContext {
    #[serde(rename = "type")]
    pub event_type: String,
    pub trigger: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IESample {
    pub id: String,
    pub task: Task,
    pub dataset: String,
    /// Label inventory, rendered into prompts in this order.
    pub schema: Vec<String>,
    pub input: String,
    pub output: Vec<Extraction>,
    pub event: Option<EventContext>,
}

impl IESample {
    /// Collapse duplicate records, keeping first occurrences in order.
    pub fn dedup_output(&mut self) {
        let mut seen = HashSet::new();
        self.output.retain(|e| seen.insert(e.clone()));
    }

    /// Distinct labels used in the output.
    pub fn label_set(&self) -> HashSet<&str> {
        self.output.iter().map(Extraction::label).collect()
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(&RawSample::from(self)).expect("sample serializes")
    }

    pub fn from_json_line(line: &str) -> std::result::Result<IESample, String> {
        let raw: RawSample = serde_json::from_str(line).map_err(|e| e.to_string())?;
        raw.into_sample()
    }
}

// On-disk record shapes.

#[derive(Serialize, Deserialize)]
struct RawSample {
    id: String,
    task: Task,
    dataset: String,
    schema: Vec<String>,
    input: String,
    output: Vec<RawExtraction>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    event: Option<EventContext>,
}

#[derive(Clone, Serialize, Deserialize)]
#[serde(untagged, deny_unknown_fields)]
enum RawExtraction {
    Relation {
        relation: String,
        subject: String,
        object: String,
    },
    Entity {
        #[serde(rename = "type")]
        label: String,
        span: String,
    },
    Trigger {
        #[serde(rename = "type")]
        label: String,
        trigger: String,
    },
    Argument {
        role: String,
        argument: String,
    },
}

impl From<Extraction> for RawExtraction {
    fn from(e: Extraction) -> Self {
        match e {
            Extraction::Entity { label, span } => RawExtraction::Entity { label, span },
            Extraction::Relation {
                relation,
                subject,
                object,
            } => RawExtraction::Relation {
                relation,
                subject,
                object,
            },
            Extraction::Trigger { label, trigger } => RawExtraction::Trigger { label, trigger },
            Extraction::Argument { role, argument } => RawExtraction::Argument { role, argument },
        }
    }
}

impl From<RawExtraction> for Extraction {
    fn from(raw: RawExtraction) -> Self {
        match raw {
            RawExtraction::Entity { label, span } => Extraction::Entity { label, span },
            RawExtraction::Relation {
                relation,
                subject,
                object,
            } => Extraction::Relation {
                relation,
                subject,
                object,
            },
            RawExtraction::Trigger { label, trigger } => Extraction::Trigger { label, trigger },
            RawExtraction::Argument { role, argument } => Extraction::Argument { role, argument },
        }
    }
}

impl From<&IESample> for RawSample {
    fn from(s: &IESample) -> Self {
        RawSample {
            id: s.id.clone(),
            task: s.task,
            dataset: s.dataset.clone(),
            schema: s.schema.clone(),
            input: s.input.clone(),
            output: s.output.iter().cloned().map(RawExtraction::from).collect(),
            event: s.event.clone(),
        }
    }
}

impl RawSample {
    fn into_sample(self) -> std::result::Result<IESample, String> {
        let task = self.task;
        let output = self
            .output
            .into_iter()
            .enumerate()
            .map(|(i, raw)| {
                let ext = Extraction::from(raw);
                if ext.task() == task {
                    Ok(ext)
                } else {
                    Err(format!("output[{i}] has the {} record shape in a {task} sample", ext.task()))
                }
            })
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(IESample {
            id: self.id,
            task,
            dataset: self.dataset,
            schema: self.schema,
            input: self.input,
            output,
            event: self.event,
        })
    }
}

/// Invariant a sample can break.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Rule {
    EmptyField,
    LabelNotInSchema,
    SpanNotInInput,
    MissingEventContext,
    UnexpectedEventContext,
}

impl Rule {
    pub fn as_str(self) -> &'static str {
        match self {
            Rule::EmptyField => "empty-field",
            Rule::LabelNotInSchema => "label-not-in-schema",
            Rule::SpanNotInInput => "span-not-in-input",
            Rule::MissingEventContext => "missing event_context",
            Rule::UnexpectedEventContext => "unexpected event_context",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub field: String,
    pub rule: Rule,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.rule.as_str())
    }
}

/// Check every sample invariant. An empty result means the sample is valid.
pub fn validate(sample: &IESample) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |field: String, rule: Rule| out.push(Violation { field, rule });

    if sample.id.is_empty() {
        push("id".into(), Rule::EmptyField);
    }
    if sample.input.is_empty() {
        push("input".into(), Rule::EmptyField);
    }
    match (&sample.event, sample.task) {
        (None, Task::Eae) => push("event".into(), Rule::MissingEventContext),
        (Some(_), t) if t != Task::Eae => push("event".into(), Rule::UnexpectedEventContext),
        (Some(ev), _) => {
            if ev.event_type.is_empty() {
                push("event.type".into(), Rule::EmptyField);
            }
            if ev.trigger.is_empty() {
                push("event.trigger".into(), Rule::EmptyField);
            } else if !sample.input.contains(ev.trigger.as_str()) {
                push("event.trigger".into(), Rule::SpanNotInInput);
            }
        }
        _ => {}
    }

    for (i, ext) in sample.output.iter().enumerate() {
        for (name, value) in ext.fields() {
            if value.is_empty() {
                push(format!("output[{i}].{name}"), Rule::EmptyField);
            }
        }
        let label = ext.label();
        if !label.is_empty() && !sample.schema.iter().any(|l| l == label) {
            let name = ext.fields()[0].0;
            push(format!("output[{i}].{name}"), Rule::LabelNotInSchema);
        }
        for (name, value) in ext.fields().into_iter().skip(1) {
            if !value.is_empty() && !sample.input.contains(value) {
                push(format!("output[{i}].{name}"), Rule::SpanNotInInput);
            }
        }
    }
    out
}

/// Immutable, id-keyed collection of samples with a per-task index.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CandidatePool {
    samples: Vec<IESample>,
    by_id: HashMap<String, usize>,
    by_task: BTreeMap<Task, Vec<String>>,
}

impl CandidatePool {
    /// Build a pool, rejecting duplicate ids. Sample order is preserved.
    pub fn from_samples(samples: Vec<IESample>) -> Result<Self> {
        let mut by_id = HashMap::with_capacity(samples.len());
        let mut by_task: BTreeMap<Task, Vec<String>> = BTreeMap::new();
        for (i, s) in samples.iter().enumerate() {
            if let Some(prev) = by_id.insert(s.id.clone(), i) {
                return Err(Error::DuplicateId {
                    id: s.id.clone(),
                    first: prev + 1,
                    second: i + 1,
                });
            }
            by_task.entry(s.task).or_default().push(s.id.clone());
        }
        Ok(Self {
            samples,
            by_id,
            by_task,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&IESample> {
        self.by_id.get(id).map(|&i| &self.samples[i])
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.by_id.get(id).copied()
    }

    pub fn samples(&self) -> &[IESample] {
        &self.samples
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.samples.iter().map(|s| s.id.as_str())
    }

    pub fn task_ids(&self, task: Task) -> &[String] {
        self.by_task.get(&task).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn task_index(&self) -> &BTreeMap<Task, Vec<String>> {
        &self.by_task
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        for s in &self.samples {
            buf.extend_from_slice(s.to_json_line().as_bytes());
            buf.push(b'\n');
        }
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(&buf))
            .map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LoadOptions {
    /// Reject samples whose spans are not found in the input instead of warning.
    pub strict: bool,
}

/// A sample that was parsed but failed validation.
#[derive(Debug, Clone)]
pub struct Rejection {
    pub line: usize,
    pub id: String,
    pub violations: Vec<Violation>,
}

#[derive(Debug, Clone)]
pub struct LoadedPool {
    pub pool: CandidatePool,
    pub rejected: Vec<Rejection>,
    /// Non-fatal violations kept in the pool (non-strict mode).
    pub warnings: Vec<Rejection>,
}

/// Read a pool file. Malformed lines and duplicate ids are fatal; samples
/// breaking invariants are rejected and reported.
pub fn load_pool(path: &Path, opts: LoadOptions) -> Result<LoadedPool> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);

    let mut first_line: HashMap<String, usize> = HashMap::new();
    let mut samples = Vec::new();
    let mut rejected = Vec::new();
    let mut warnings = Vec::new();

    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut sample = IESample::from_json_line(&line).map_err(|message| Error::MalformedLine {
            path: path.to_path_buf(),
            line: lineno,
            message,
        })?;
        if let Some(&first) = first_line.get(&sample.id) {
            return Err(Error::DuplicateId {
                id: sample.id,
                first,
                second: lineno,
            });
        }
        first_line.insert(sample.id.clone(), lineno);
        sample.dedup_output();

        let violations = validate(&sample);
        let (fatal, soft): (Vec<_>, Vec<_>) = violations
            .into_iter()
            .partition(|v| opts.strict || v.rule != Rule::SpanNotInInput);
        if !fatal.is_empty() {
            rejected.push(Rejection {
                line: lineno,
                id: sample.id,
                violations: fatal,
            });
            continue;
        }
        if !soft.is_empty() {
            for v in &soft {
                log::warn!("{}:{lineno}: sample {:?}: {v}", path.display(), sample.id);
            }
            warnings.push(Rejection {
                line: lineno,
                id: sample.id.clone(),
                violations: soft,
            });
        }
        samples.push(sample);
    }

    Ok(LoadedPool {
        pool: CandidatePool::from_samples(samples)?,
        rejected,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ner(id: &str, input: &str, out: &[(&str, &str)]) -> IESample {
        IESample {
            id: id.into(),
            task: Task::Ner,
            dataset: "toy".into(),
            schema: vec!["person".into(), "location".into()],
            input: input.into(),
            output: out
                .iter()
                .map(|(l, s)| Extraction::Entity {
                    label: (*l).into(),
                    span: (*s).into(),
                })
                .collect(),
            event: None,
        }
    }

    fn write_lines(lines: &[String]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    #[test]
    fn well_formed_sample_has_no_violations() {
        let s = ner("a", "John lives in Paris", &[("person", "John"), ("location", "Paris")]);
        assert!(validate(&s).is_empty());
    }

    #[test]
    fn eae_without_event_context() {
        let s = IESample {
            id: "e".into(),
            task: Task::Eae,
            dataset: "toy".into(),
            schema: vec!["attacker".into()],
            input: "Rebels attacked the town".into(),
            output: vec![Extraction::Argument {
                role: "attacker".into(),
                argument: "Rebels".into(),
            }],
            event: None,
        };
        let v = validate(&s);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].rule.as_str(), "missing event_context");
    }

    #[test]
    fn relation_outside_schema_is_flagged() {
        let s = IESample {
            id: "r".into(),
            task: Task::Re,
            dataset: "toy".into(),
            schema: vec!["works_for".into()],
            input: "John was born in Paris".into(),
            output: vec![Extraction::Relation {
                relation: "born_in".into(),
                subject: "John".into(),
                object: "Paris".into(),
            }],
            event: None,
        };
        let v = validate(&s);
        assert_eq!(
            v,
            vec![Violation {
                field: "output[0].relation".into(),
                rule: Rule::LabelNotInSchema
            }]
        );
    }

    #[test]
    fn load_single_record() {
        let f = write_lines(&[ner("a", "John lives here", &[("person", "John")]).to_json_line()]);
        let loaded = load_pool(f.path(), LoadOptions::default()).unwrap();
        assert_eq!(loaded.pool.len(), 1);
        assert_eq!(loaded.pool.task_ids(Task::Ner), ["a".to_string()]);
    }

    #[test]
    fn duplicate_id_names_both_lines() {
        let mut lines: Vec<String> = (0..8)
            .map(|i| ner(&format!("s{i}"), "John", &[("person", "John")]).to_json_line())
            .collect();
        lines[6] = ner("s2", "John", &[]).to_json_line();
        let f = write_lines(&lines);
        match load_pool(f.path(), LoadOptions::default()) {
            Err(Error::DuplicateId { id, first, second }) => {
                assert_eq!((id.as_str(), first, second), ("s2", 3, 7));
            }
            other => panic!("expected duplicate id error, got {other:?}"),
        }
    }

    #[test]
    fn strict_mode_rejects_missing_span() {
        let bad = ner("x", "Mary lives here", &[("person", "John")]);
        let f = write_lines(&[bad.to_json_line()]);

        let strict = load_pool(f.path(), LoadOptions { strict: true }).unwrap();
        assert!(strict.pool.is_empty());
        assert_eq!(strict.rejected.len(), 1);
        assert_eq!(strict.rejected[0].violations[0].rule.as_str(), "span-not-in-input");
        assert_eq!(strict.rejected[0].violations[0].field, "output[0].span");

        let lenient = load_pool(f.path(), LoadOptions { strict: false }).unwrap();
        assert_eq!(lenient.pool.len(), 1);
        assert_eq!(lenient.warnings.len(), 1);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let f = write_lines(&[
            ner("a", "John", &[]).to_json_line(),
            "{not json".to_string(),
        ]);
        match load_pool(f.path(), LoadOptions::default()) {
            Err(Error::MalformedLine { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected malformed line, got {other:?}"),
        }
    }

    #[test]
    fn wrong_record_shape_is_malformed() {
        let line = r#"{"id":"a","task":"NER","dataset":"d","schema":["x"],"input":"a b","output":[{"role":"x","argument":"a"}]}"#;
        let f = write_lines(&[line.to_string()]);
        assert!(matches!(
            load_pool(f.path(), LoadOptions::default()),
            Err(Error::MalformedLine { line: 1, .. })
        ));
    }

    #[test]
    fn duplicate_extractions_collapse_on_load() {
        let s = ner("a", "John", &[("person", "John"), ("person", "John")]);
        let f = write_lines(&[s.to_json_line()]);
        let pool = load_pool(f.path(), LoadOptions::default()).unwrap().pool;
        assert_eq!(pool.get("a").unwrap().output.len(), 1);
    }
}
