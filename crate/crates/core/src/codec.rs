//! Text rendering of samples and parsing of generations.
//!
//! A rendered sample has up to five lines:
//!
//! ```text
//! Task: Named Entity Recognition
//! Schema: ['person', 'location']
//! Event: attack, Trigger: stormed        (argument extraction only)
//! Input: John lives in Paris
//! Output: person: John; location: Paris
//! ```

use std::collections::HashSet;

use crate::corpus::{Extraction, IESample, Task};
use crate::error::{Error, Result};
use crate::llm::TokenCounter;

pub const KEYWORD_OPEN: &str = "<Keyword>";
pub const KEYWORD_CLOSE: &str = "</Keyword>";

const NONE_OUTPUT: &str = "None";

const NER_INSTRUCTION: &str = include_str!("../templates/ner.txt");
const RE_INSTRUCTION: &str = include_str!("../templates/re.txt");
const ED_INSTRUCTION: &str = include_str!("../templates/ed.txt");
const EAE_INSTRUCTION: &str = include_str!("../templates/eae.txt");

/// Shipped extraction instruction for a task.
pub fn default_instruction(task: Task) -> &'static str {
    let text = match task {
        Task::Ner => NER_INSTRUCTION,
        Task::Re => RE_INSTRUCTION,
        Task::Ed => ED_INSTRUCTION,
        Task::Eae => EAE_INSTRUCTION,
    };
    text.trim_end()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LinearizedSample {
    pub text: String,
    pub includes_output: bool,
}

/// Render labels as a python-style list literal.
pub fn render_schema(schema: &[String]) -> String {
    let quoted: Vec<String> = schema
        .iter()
        .map(|l| format!("'{}'", l.replace('\\', "\\\\").replace('\'', "\\'")))
        .collect();
    format!("[{}]", quoted.join(", "))
}

/// Render an output record list; an empty list renders as `None`.
pub fn linearize_output(output: &[Extraction]) -> String {
    if output.is_empty() {
        return NONE_OUTPUT.to_string();
    }
    output
        .iter()
        .map(|e| match e {
            Extraction::Entity { label, span } => format!("{label}: {span}"),
            Extraction::Relation {
                relation,
                subject,
                object,
            } => format!("{relation}: {subject}, {object}"),
            Extraction::Trigger { label, trigger } => format!("{label}: {trigger}"),
            Extraction::Argument { role, argument } => format!("{role}: {argument}"),
        })
        .collect::<Vec<_>>()
        .join("; ")
}

pub fn linearize(sample: &IESample, include_output: bool) -> LinearizedSample {
    let mut text = format!(
        "Task: {}\nSchema: {}\n",
        sample.task.display_name(),
        render_schema(&sample.schema)
    );
    if let Some(ev) = &sample.event {
        text.push_str(&format!("Event: {}, Trigger: {}\n", ev.event_type, ev.trigger));
    }
    text.push_str("Input: ");
    text.push_str(&sample.input);
    if include_output {
        text.push_str("\nOutput: ");
        text.push_str(&linearize_output(&sample.output));
    }
    LinearizedSample {
        text,
        includes_output: include_output,
    }
}

/// Byte ranges `[open_start, close_end)` of existing keyword tags.
fn tagged_regions(text: &str) -> Vec<(usize, usize)> {
    let mut regions = Vec::new();
    let mut from = 0;
    while let Some(rel) = text[from..].find(KEYWORD_OPEN) {
        let start = from + rel;
        let body = start + KEYWORD_OPEN.len();
        match text[body..].find(KEYWORD_CLOSE) {
            Some(rel_close) => {
                let end = body + rel_close + KEYWORD_CLOSE.len();
                regions.push((start, end));
                from = end;
            }
            None => break,
        }
    }
    regions
}

fn overlaps(a: (usize, usize), b: (usize, usize)) -> bool {
    a.0 < b.1 && b.0 < a.1
}

/// Wrap occurrences of `surfaces` in `text` with keyword tags.
///
/// Every occurrence of every distinct surface is a candidate. Overlaps resolve
/// longest first, then leftmost; text already inside a tag is left alone.
/// Returns the tagged text and the surfaces that never occur in `text`.
pub fn tag_surfaces<'a>(
    text: &str,
    surfaces: impl IntoIterator<Item = &'a str>,
) -> (String, Vec<String>) {
    let existing = tagged_regions(text);
    let mut seen = HashSet::new();
    let mut candidates = Vec::new();
    let mut missing = Vec::new();

    for surface in surfaces {
        if surface.is_empty() || !seen.insert(surface) {
            continue;
        }
        let mut found = false;
        for (start, m) in text.match_indices(surface) {
            found = true;
            let span = (start, start + m.len());
            if existing.iter().all(|&r| !overlaps(r, span)) {
                candidates.push(span);
            }
        }
        if !found {
            missing.push(surface.to_string());
        }
    }

    candidates.sort_by(|a, b| (b.1 - b.0).cmp(&(a.1 - a.0)).then(a.0.cmp(&b.0)));
    let mut accepted: Vec<(usize, usize)> = Vec::new();
    for c in candidates {
        if accepted.iter().all(|&a| !overlaps(a, c)) {
            accepted.push(c);
        }
    }
    accepted.sort_unstable();

    let mut out = String::with_capacity(text.len() + accepted.len() * 20);
    let mut cursor = 0;
    for (start, end) in accepted {
        out.push_str(&text[cursor..start]);
        out.push_str(KEYWORD_OPEN);
        out.push_str(&text[start..end]);
        out.push_str(KEYWORD_CLOSE);
        cursor = end;
    }
    out.push_str(&text[cursor..]);
    (out, missing)
}

/// Copy of `sample` whose input has every gold surface string tagged.
pub fn keyword_enhance(sample: &IESample) -> IESample {
    let surfaces: Vec<&str> = sample.output.iter().flat_map(Extraction::surfaces).collect();
    let (input, missing) = tag_surfaces(&sample.input, surfaces);
    for m in missing {
        log::warn!("sample {:?}: gold string {m:?} not found in input, left untagged", sample.id);
    }
    IESample {
        input,
        ..sample.clone()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredDemo {
    pub sample: LinearizedSample,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptSpec {
    pub instruction: String,
    /// In prompt order: weakest first, strongest adjacent to the query.
    pub demonstrations: Vec<LinearizedSample>,
    pub query: LinearizedSample,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prompt {
    pub spec: PromptSpec,
    pub text: String,
    /// Demonstrations removed to satisfy the token budget.
    pub dropped: usize,
}

fn render_prompt(instruction: &str, demos: &[&LinearizedSample], query: &LinearizedSample) -> String {
    let mut parts: Vec<&str> = Vec::with_capacity(demos.len() + 2);
    parts.push(instruction);
    parts.extend(demos.iter().map(|d| d.text.as_str()));
    let query_block = format!("{}\nOutput:", query.text);
    parts.push(&query_block);
    parts.join("\n\n")
}

/// Assemble the inference prompt.
///
/// Demonstrations are placed in ascending score order so the best one sits
/// next to the query. When the prompt exceeds `budget` tokens the lowest
/// scored demonstrations are dropped until it fits.
pub fn build_prompt(
    instruction: &str,
    demos: &[ScoredDemo],
    query: &LinearizedSample,
    counter: &dyn TokenCounter,
    budget: usize,
) -> Result<Prompt> {
    if query.includes_output {
        return Err(Error::Invalid("query rendering must not include output".into()));
    }
    if demos.iter().any(|d| !d.sample.includes_output) {
        return Err(Error::Invalid("demonstrations must include output".into()));
    }

    let mut ranked: Vec<&ScoredDemo> = demos.iter().collect();
    ranked.sort_by(|a, b| b.score.total_cmp(&a.score));

    let mut keep = ranked.len();
    loop {
        let ordered: Vec<&LinearizedSample> = ranked[..keep].iter().rev().map(|d| &d.sample).collect();
        let text = render_prompt(instruction, &ordered, query);
        let needed = counter.count_tokens(&text);
        if needed <= budget {
            return Ok(Prompt {
                spec: PromptSpec {
                    instruction: instruction.to_string(),
                    demonstrations: ordered.into_iter().cloned().collect(),
                    query: query.clone(),
                },
                text,
                dropped: ranked.len() - keep,
            });
        }
        if keep == 0 {
            return Err(Error::BudgetExceeded { needed, budget });
        }
        keep -= 1;
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ParseDiagnostics {
    /// Non-empty segments examined.
    pub segments: usize,
    /// Segments that failed the grammar or used a label outside the schema.
    pub skipped: usize,
    /// Relation segments whose object still contains a comma after splitting.
    pub ambiguous_commas: usize,
    pub skipped_segments: Vec<String>,
}

impl ParseDiagnostics {
    pub fn absorb(&mut self, other: &ParseDiagnostics) {
        self.segments += other.segments;
        self.skipped += other.skipped;
        self.ambiguous_commas += other.ambiguous_commas;
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParsedOutput {
    pub extractions: Vec<Extraction>,
    pub diagnostics: ParseDiagnostics,
}

fn trim_ascii(s: &str) -> &str {
    s.trim_matches(|c: char| c.is_ascii_whitespace())
}

/// Keep only the answer portion of a raw generation: text up to a blank line
/// or the start of another rendered block. Single newlines act as separators.
fn answer_region(text: &str) -> String {
    let mut lines = Vec::new();
    for line in trim_ascii(text).split('\n') {
        let t = trim_ascii(line);
        if t.is_empty() || t.starts_with("Task:") {
            break;
        }
        lines.push(t);
    }
    lines.join("; ")
}

fn parse_segment(seg: &str, task: Task, schema: &[String], diag: &mut ParseDiagnostics) -> Option<Extraction> {
    let (label, rest) = seg.split_once(':')?;
    let label = trim_ascii(label);
    let rest = trim_ascii(rest);
    if label.is_empty() || rest.is_empty() || !schema.iter().any(|l| l == label) {
        return None;
    }
    let label = label.to_string();
    match task {
        Task::Ner => Some(Extraction::Entity {
            label,
            span: rest.to_string(),
        }),
        Task::Ed => Some(Extraction::Trigger {
            label,
            trigger: rest.to_string(),
        }),
        Task::Eae => Some(Extraction::Argument {
            role: label,
            argument: rest.to_string(),
        }),
        Task::Re => {
            let (subject, object) = rest.split_once(',')?;
            let (subject, object) = (trim_ascii(subject), trim_ascii(object));
            if subject.is_empty() || object.is_empty() {
                return None;
            }
            if object.contains(',') {
                diag.ambiguous_commas += 1;
            }
            Some(Extraction::Relation {
                relation: label,
                subject: subject.to_string(),
                object: object.to_string(),
            })
        }
    }
}

/// Parse a generation into extraction records. Never fails: segments that
/// do not parse are counted in the diagnostics and skipped.
pub fn parse_output(text: &str, task: Task, schema: &[String]) -> ParsedOutput {
    let region = answer_region(text);
    let mut parsed = ParsedOutput::default();
    if region.eq_ignore_ascii_case(NONE_OUTPUT) {
        return parsed;
    }
    let mut seen = HashSet::new();
    for seg in region.split(';') {
        let seg = trim_ascii(seg);
        if seg.is_empty() {
            continue;
        }
        parsed.diagnostics.segments += 1;
        match parse_segment(seg, task, schema, &mut parsed.diagnostics) {
            Some(ext) => {
                if seen.insert(ext.clone()) {
                    parsed.extractions.push(ext);
                }
            }
            None => {
                parsed.diagnostics.skipped += 1;
                parsed.diagnostics.skipped_segments.push(seg.to_string());
            }
        }
    }
    parsed
}

/// A rendered sample block read back from prompt text.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RenderedBlock {
    pub task: Option<Task>,
    pub schema: Vec<String>,
    pub event: Option<(String, String)>,
    pub input: String,
    /// Text after `Output:`; `Some("")` for a query block awaiting generation.
    pub output: Option<String>,
}

/// Inverse of [`render_schema`]. Unparseable text yields an empty list.
pub fn parse_schema(text: &str) -> Vec<String> {
    let text = trim_ascii(text);
    let Some(inner) = text.strip_prefix('[').and_then(|t| t.strip_suffix(']')) else {
        return Vec::new();
    };
    let mut labels = Vec::new();
    let mut chars = inner.chars();
    while let Some(c) = chars.next() {
        if c != '\'' {
            continue;
        }
        let mut label = String::new();
        while let Some(c) = chars.next() {
            match c {
                '\\' => {
                    if let Some(n) = chars.next() {
                        label.push(n);
                    }
                }
                '\'' => break,
                _ => label.push(c),
            }
        }
        labels.push(label);
    }
    labels
}

/// Read one rendered block (see the module docs). Returns `None` when the
/// block does not start with a `Task:` line.
pub fn parse_block(block: &str) -> Option<RenderedBlock> {
    let mut out = RenderedBlock::default();
    let mut lines = block.split('\n');
    let task = lines.next()?.strip_prefix("Task: ")?;
    out.task = Task::from_display_name(trim_ascii(task));
    for line in lines {
        if let Some(rest) = line.strip_prefix("Schema: ") {
            out.schema = parse_schema(rest);
        } else if let Some(rest) = line.strip_prefix("Event: ") {
            if let Some((ty, trig)) = rest.split_once(", Trigger: ") {
                out.event = Some((ty.to_string(), trig.to_string()));
            }
        } else if let Some(rest) = line.strip_prefix("Input: ") {
            out.input = rest.to_string();
        } else if let Some(rest) = line.strip_prefix("Output:") {
            out.output = Some(trim_ascii(rest).to_string());
        }
    }
    Some(out)
}

/// Split a prompt into its rendered blocks, skipping the instruction.
pub fn parse_prompt_blocks(prompt: &str) -> Vec<RenderedBlock> {
    prompt.split("\n\n").filter_map(parse_block).collect()
}

/// Labels named by the segments of a rendered output (`None` → empty).
pub fn output_labels(output: &str) -> HashSet<String> {
    let region = answer_region(output);
    if region.eq_ignore_ascii_case(NONE_OUTPUT) {
        return HashSet::new();
    }
    region
        .split(';')
        .filter_map(|seg| seg.split_once(':'))
        .map(|(label, _)| trim_ascii(label).to_string())
        .filter(|l| !l.is_empty())
        .collect()
}
