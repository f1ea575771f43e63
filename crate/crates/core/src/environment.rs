//! Traces, span chunking, query scoring, and the deterministic synthetic
//! environment.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::designer::CaseObservation;
use crate::embedding::{Embedder, EmbeddingVector};
use crate::error::{Error, Result};
use crate::executor::{ChatMessage, CompletionParams, LlmBackend, ScriptConfig, ScriptRule};
use crate::memory_bank::MemoryBank;
use crate::skill_bank::{Origin, Skill, SkillBank, UpdateType};

pub const ANSWER_LOCOMO: &str = include_str!("../assets/prompts/answer_locomo.txt");
pub const ANSWER_LONGMEMEVAL: &str = include_str!("../assets/prompts/answer_longmemeval.txt");
pub const ANSWER_HOTPOTQA: &str = include_str!("../assets/prompts/answer_hotpotqa.txt");
pub const JUDGE_TEMPLATE: &str = include_str!("../assets/prompts/judge.txt");

pub const MIN_SPAN_TOKENS: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub index: usize,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub id: String,
    #[serde(alias = "question")]
    pub text: String,
    #[serde(alias = "answer")]
    pub ground_truth: String,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceKind {
    #[default]
    Conversational,
    Trajectory,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trace {
    pub trace_id: String,
    #[serde(default)]
    pub kind: TraceKind,
    pub spans: Vec<Span>,
    pub queries: Vec<Query>,
}

impl Trace {
    pub fn validate(&self) -> Result<()> {
        if self.spans.is_empty() {
            return Err(Error::Validation {
                target: format!("trace {}", self.trace_id),
                reason: "no spans".into(),
            });
        }
        let mut seen = HashSet::new();
        for q in &self.queries {
            if !seen.insert(q.id.as_str()) {
                return Err(Error::Validation {
                    target: format!("trace {}", self.trace_id),
                    reason: format!("duplicate query id {:?}", q.id),
                });
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Chunking

fn check_span_tokens(span_tokens: usize) -> Result<()> {
    if span_tokens < MIN_SPAN_TOKENS {
        return Err(Error::InvalidArgument(format!(
            "span_tokens must be at least {MIN_SPAN_TOKENS}, got {span_tokens}"
        )));
    }
    Ok(())
}

/// Greedy whitespace-token chunking into spans of at most `span_tokens`
/// tokens. Tokens are re-joined with single spaces.
pub fn chunk_text(text: &str, span_tokens: usize) -> Result<Vec<Span>> {
    check_span_tokens(span_tokens)?;
    let tokens: Vec<&str> = text.split_whitespace().collect();
    Ok(tokens
        .chunks(span_tokens)
        .enumerate()
        .map(|(index, c)| Span { index, text: c.join(" ") })
        .collect())
}

/// One span per session, whatever its length.
pub fn chunk_sessions(sessions: &[String], span_tokens: usize) -> Result<Vec<Span>> {
    check_span_tokens(span_tokens)?;
    Ok(sessions
        .iter()
        .filter(|s| !s.trim().is_empty())
        .enumerate()
        .map(|(index, s)| Span { index, text: s.clone() })
        .collect())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChunkMode {
    /// Sessions as spans for dialogues, token windows for trajectories.
    #[default]
    Auto,
    Session,
    Tokens,
}

// ---------------------------------------------------------------------------
// Trace files

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceFormat {
    #[default]
    Auto,
    Conversational,
    Trajectory,
}

fn schema(path: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Schema {
        path: path.into(),
        message: message.into(),
    }
}

fn req_array<'a>(v: &'a Value, key: &str, path: &str) -> Result<&'a Vec<Value>> {
    match v.get(key) {
        Some(Value::Array(a)) => Ok(a),
        Some(_) => Err(schema(format!("{path}.{key}"), "expected an array")),
        None => Err(schema(format!("{path}.{key}"), "missing required field")),
    }
}

fn req_str<'a>(v: &'a Value, keys: &[&str], path: &str) -> Result<&'a str> {
    for k in keys {
        match v.get(*k) {
            Some(Value::String(s)) => return Ok(s),
            Some(Value::Number(_)) | Some(Value::Bool(_)) => {}
            Some(_) => return Err(schema(format!("{path}.{k}"), "expected a string")),
            None => continue,
        }
    }
    Err(schema(format!("{path}.{}", keys[0]), "missing required field"))
}

fn scalar_string(v: &Value) -> Option<String> {
    match v {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        Value::Bool(b) => Some(b.to_string()),
        _ => None,
    }
}

fn parse_queries(root: &Value) -> Result<Vec<Query>> {
    let Some(raw) = root.get("queries") else {
        return Ok(Vec::new());
    };
    let Value::Array(raw) = raw else {
        return Err(schema("$.queries", "expected an array"));
    };
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, q) in raw.iter().enumerate() {
        let path = format!("$.queries[{i}]");
        if !q.is_object() {
            return Err(schema(path, "expected an object"));
        }
        let text = req_str(q, &["question", "text", "query"], &path)?;
        let gold = match q.get("answer").or_else(|| q.get("ground_truth")) {
            Some(v) => scalar_string(v).ok_or_else(|| schema(format!("{path}.answer"), "expected a string"))?,
            None => return Err(schema(format!("{path}.answer"), "missing required field")),
        };
        let id = q.get("id").and_then(scalar_string).unwrap_or_else(|| format!("q{i}"));
        if !seen.insert(id.clone()) {
            return Err(schema(format!("{path}.id"), format!("duplicate query id {id:?}")));
        }
        let mut metadata = BTreeMap::new();
        if let Some(Value::Object(m)) = q.get("metadata") {
            for (k, v) in m {
                if let Some(s) = scalar_string(v) {
                    metadata.insert(k.clone(), s);
                }
            }
        }
        for k in ["date", "question_date", "category"] {
            if let Some(s) = q.get(k).and_then(scalar_string) {
                metadata.entry(k.to_string()).or_insert(s);
            }
        }
        out.push(Query {
            id,
            text: text.to_string(),
            ground_truth: gold,
            metadata,
        });
    }
    Ok(out)
}

fn render_sessions(root: &Value) -> Result<Vec<String>> {
    let sessions = req_array(root, "sessions", "$")?;
    let mut out = Vec::new();
    for (i, s) in sessions.iter().enumerate() {
        let path = format!("$.sessions[{i}]");
        let turns = req_array(s, "turns", &path)?;
        let mut lines = Vec::new();
        if let Some(d) = s.get("date").and_then(scalar_string) {
            lines.push(format!("Session date: {d}"));
        }
        for (j, t) in turns.iter().enumerate() {
            let tpath = format!("{path}.turns[{j}]");
            let speaker = req_str(t, &["speaker"], &tpath)?;
            let text = req_str(t, &["text"], &tpath)?;
            lines.push(format!("{speaker}: {text}"));
        }
        out.push(lines.join("\n"));
    }
    Ok(out)
}

fn render_steps(root: &Value) -> Result<String> {
    let steps = req_array(root, "steps", "$")?;
    let mut parts = Vec::new();
    for (i, s) in steps.iter().enumerate() {
        let path = format!("$.steps[{i}]");
        let obs = req_str(s, &["observation"], &path)?;
        let act = req_str(s, &["action"], &path)?;
        parts.push(format!("Observation: {obs} Action: {act}"));
    }
    Ok(parts.join("\n"))
}

/// Parses a trace document in either the dialogue schema
/// (`sessions[].turns[].{speaker,text}`) or the trajectory schema
/// (`steps[].{observation,action}`), both with optional `queries`.
pub fn parse_trace_value(
    root: &Value,
    default_id: &str,
    format: TraceFormat,
    span_tokens: usize,
    mode: ChunkMode,
) -> Result<Trace> {
    if !root.is_object() {
        return Err(schema("$", "expected an object"));
    }
    let kind = match format {
        TraceFormat::Conversational => TraceKind::Conversational,
        TraceFormat::Trajectory => TraceKind::Trajectory,
        TraceFormat::Auto if root.get("steps").is_some() => TraceKind::Trajectory,
        TraceFormat::Auto if root.get("sessions").is_some() => TraceKind::Conversational,
        TraceFormat::Auto => return Err(schema("$", "neither `sessions` nor `steps` present")),
    };
    let spans = match kind {
        TraceKind::Conversational => {
            let sessions = render_sessions(root)?;
            match mode {
                ChunkMode::Tokens => chunk_text(&sessions.join("\n"), span_tokens)?,
                ChunkMode::Auto | ChunkMode::Session => chunk_sessions(&sessions, span_tokens)?,
            }
        }
        TraceKind::Trajectory => {
            let text = render_steps(root)?;
            match mode {
                ChunkMode::Session => chunk_sessions(&[text], span_tokens)?,
                ChunkMode::Auto | ChunkMode::Tokens => chunk_text(&text, span_tokens)?,
            }
        }
    };
    let trace_id = root
        .get("trace_id")
        .or_else(|| root.get("id"))
        .and_then(scalar_string)
        .unwrap_or_else(|| default_id.to_string());
    Ok(Trace {
        trace_id,
        kind,
        spans,
        queries: parse_queries(root)?,
    })
}

pub fn load_trace_json(path: &Path, format: TraceFormat, span_tokens: usize, mode: ChunkMode) -> Result<Trace> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let root: Value = serde_json::from_str(&text).map_err(|e| schema("$", e.to_string()))?;
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("trace");
    parse_trace_value(&root, stem, format, span_tokens, mode)
}

/// Loads a single trace file, or every `*.json` file of a directory in name
/// order. A file holding a JSON array is read as a list of already-chunked
/// [`Trace`] values.
pub fn load_traces(path: &Path, format: TraceFormat, span_tokens: usize, mode: ChunkMode) -> Result<Vec<Trace>> {
    let files: Vec<std::path::PathBuf> = if path.is_dir() {
        let mut v: Vec<_> = std::fs::read_dir(path)
            .map_err(|e| Error::io(path, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        v.sort();
        v
    } else {
        vec![path.to_path_buf()]
    };
    let mut out = Vec::new();
    for f in files {
        let text = std::fs::read_to_string(&f).map_err(|e| Error::io(&f, e))?;
        let root: Value = serde_json::from_str(&text).map_err(|e| schema("$", format!("{}: {e}", f.display())))?;
        if root.is_array() {
            let traces: Vec<Trace> = serde_json::from_value(root)?;
            for t in &traces {
                t.validate()?;
            }
            out.extend(traces);
        } else {
            let stem = f.file_stem().and_then(|s| s.to_str()).unwrap_or("trace");
            out.push(parse_trace_value(&root, stem, format, span_tokens, mode)?);
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Scoring

/// Lowercase, strip punctuation, drop the articles a/an/the, collapse
/// whitespace.
pub fn normalize_answer(s: &str) -> Vec<String> {
    let lowered: String = s
        .to_lowercase()
        .chars()
        .map(|c| if c.is_ascii_punctuation() { ' ' } else { c })
        .collect();
    lowered
        .split_whitespace()
        .filter(|t| !matches!(*t, "a" | "an" | "the"))
        .map(String::from)
        .collect()
}

pub fn token_f1(prediction: &str, gold: &str) -> f64 {
    let p = normalize_answer(prediction);
    let g = normalize_answer(gold);
    if p.is_empty() && g.is_empty() {
        return 1.0;
    }
    if p.is_empty() || g.is_empty() {
        return 0.0;
    }
    let mut counts: BTreeMap<&str, i64> = BTreeMap::new();
    for t in &g {
        *counts.entry(t).or_default() += 1;
    }
    let mut overlap = 0usize;
    for t in &p {
        if let Some(c) = counts.get_mut(t.as_str()) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    if overlap == 0 {
        return 0.0;
    }
    let precision = overlap as f64 / p.len() as f64;
    let recall = overlap as f64 / g.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

pub fn exact_match(prediction: &str, gold: &str) -> f64 {
    if normalize_answer(prediction) == normalize_answer(gold) {
        1.0
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardMetric {
    #[default]
    F1,
    ExactMatch,
    /// Scored by an LLM with the judge prompt.
    Judge,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerFormat {
    #[default]
    Locomo,
    Longmemeval,
    Hotpotqa,
}

pub fn build_answer_prompt(format: AnswerFormat, context: &str, query: &Query) -> String {
    match format {
        AnswerFormat::Locomo => ANSWER_LOCOMO
            .trim_end()
            .replacen("{context}", context, 1)
            .replacen("{question}", &query.text, 1),
        AnswerFormat::Longmemeval => {
            let date = query
                .metadata
                .get("question_date")
                .or_else(|| query.metadata.get("date"))
                .map_or("unknown", String::as_str);
            ANSWER_LONGMEMEVAL
                .trim_end()
                .replacen("{context}", context, 1)
                .replacen("{date}", date, 1)
                .replacen("{question}", &query.text, 1)
        }
        AnswerFormat::Hotpotqa => ANSWER_HOTPOTQA
            .trim_end()
            .replacen("{context}", context, 1)
            .replacen("{question}", &query.text, 1),
    }
}

pub fn build_judge_prompt(query: &Query, prediction: &str) -> String {
    JUDGE_TEMPLATE
        .trim_end()
        .replacen("{question}", &query.text, 1)
        .replacen("{ground_truth}", &query.ground_truth, 1)
        .replacen("{model_answer}", prediction, 1)
}

/// Reads `score` from the judge's JSON reply, clamped to [0, 1].
pub fn parse_judge_score(reply: &str) -> Option<f64> {
    let v = crate::designer::extract_json(reply)?;
    let s = v.get("score")?;
    let x = s.as_f64().or_else(|| s.as_str().and_then(|t| t.trim().parse().ok()))?;
    x.is_finite().then(|| x.clamp(0.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub retrieve_r: usize,
    pub format: AnswerFormat,
    pub metric: RewardMetric,
    pub params: CompletionParams,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            retrieve_r: 20,
            format: AnswerFormat::Locomo,
            metric: RewardMetric::F1,
            params: CompletionParams {
                temperature: 0.0,
                max_tokens: 128,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub query_id: String,
    pub query: String,
    pub ground_truth: String,
    pub prediction: String,
    pub reward: f64,
    pub retrieved_ids: Vec<u64>,
    pub retrieved_memories: Vec<String>,
    #[serde(skip)]
    pub query_embedding: Option<EmbeddingVector>,
    pub error: Option<String>,
}

impl QueryRecord {
    pub fn to_observation(&self) -> CaseObservation {
        CaseObservation {
            query_id: self.query_id.clone(),
            query: self.query.clone(),
            query_embedding: self
                .query_embedding
                .clone()
                .unwrap_or_else(|| EmbeddingVector::zeros(1)),
            ground_truth: self.ground_truth.clone(),
            prediction: self.prediction.clone(),
            retrieved_ids: self.retrieved_ids.clone(),
            retrieved_memories: self.retrieved_memories.clone(),
            reward: self.reward,
        }
    }
}

/// Answers every query from the top-R retrieved memories and scores it. The
/// mean is the episode reward. A backend failure on one query scores 0 and
/// is recorded in that query's `error`.
pub fn evaluate_memory(
    bank: &MemoryBank,
    queries: &[Query],
    embedder: &dyn Embedder,
    backend: &dyn LlmBackend,
    judge: Option<&dyn LlmBackend>,
    config: &EvalConfig,
) -> Result<(f64, Vec<QueryRecord>)> {
    if queries.is_empty() {
        return Err(Error::InvalidArgument("no queries to evaluate".into()));
    }
    if config.metric == RewardMetric::Judge && judge.is_none() {
        return Err(Error::Config("judge metric needs a judge backend".into()));
    }
    let texts: Vec<&str> = queries.iter().map(|q| q.text.as_str()).collect();
    let embeddings = embedder.embed_batch(&texts)?;
    let mut records = Vec::with_capacity(queries.len());
    for (q, emb) in queries.iter().zip(embeddings) {
        let retrieved = bank.retrieve(&emb, config.retrieve_r)?;
        let memories: Vec<String> = retrieved.items.iter().map(|r| r.text.clone()).collect();
        let context = memories
            .iter()
            .map(|m| format!("- {m}"))
            .collect::<Vec<_>>()
            .join("\n");
        let prompt = build_answer_prompt(config.format, &context, q);
        let (prediction, mut reward, mut error) = match backend.complete(&[ChatMessage::user(prompt)], &config.params) {
            Ok(p) => {
                let p = p.trim().to_string();
                let r = match config.metric {
                    RewardMetric::F1 => token_f1(&p, &q.ground_truth),
                    RewardMetric::ExactMatch => exact_match(&p, &q.ground_truth),
                    RewardMetric::Judge => 0.0,
                };
                (p, r, None)
            }
            Err(e) => (String::new(), 0.0, Some(e.to_string())),
        };
        if config.metric == RewardMetric::Judge && error.is_none() {
            let judge = judge.expect("checked above");
            match judge.complete(&[ChatMessage::user(build_judge_prompt(q, &prediction))], &config.params) {
                Ok(reply) => match parse_judge_score(&reply) {
                    Some(s) => reward = s,
                    None => error = Some("judge reply had no score".into()),
                },
                Err(e) => error = Some(e.to_string()),
            }
        }
        records.push(QueryRecord {
            query_id: q.id.clone(),
            query: q.text.clone(),
            ground_truth: q.ground_truth.clone(),
            prediction,
            reward,
            retrieved_ids: retrieved.ids(),
            retrieved_memories: memories,
            query_embedding: Some(emb),
            error,
        });
    }
    let mean = records.iter().map(|r| r.reward).sum::<f64>() / records.len() as f64;
    Ok((mean, records))
}

// ---------------------------------------------------------------------------
// Synthetic environment

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub categories: Vec<String>,
    pub traces: usize,
    pub spans_per_trace: usize,
    pub facts_per_span: usize,
    /// Category to the name of the skill the scripted executor honours.
    /// Missing entries get `capture_<category>`.
    pub skill_keying: BTreeMap<String, String>,
    pub distractor_skills: usize,
    /// Add the four primitive skills to the initial bank.
    pub include_primitives: bool,
    /// Categories whose keyed skill is left out of the initial bank.
    pub uncovered: Vec<String>,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            categories: ["location", "temporal", "preference", "relation"]
                .map(String::from)
                .to_vec(),
            traces: 8,
            spans_per_trace: 8,
            facts_per_span: 1,
            skill_keying: BTreeMap::new(),
            distractor_skills: 2,
            include_primitives: false,
            uncovered: Vec::new(),
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |reason: &str| {
            Err(Error::Validation {
                target: "synthetic spec".into(),
                reason: reason.into(),
            })
        };
        if self.categories.len() < 2 {
            return bad("needs at least two categories");
        }
        let unique: HashSet<_> = self.categories.iter().collect();
        if unique.len() != self.categories.len() {
            return bad("duplicate category");
        }
        if self
            .categories
            .iter()
            .any(|c| c.is_empty() || !c.chars().all(|ch| ch.is_ascii_lowercase() || ch == '_'))
        {
            return bad("categories must be lowercase ascii words");
        }
        if self.spans_per_trace == 0 || self.facts_per_span == 0 || self.traces == 0 {
            return bad("traces, spans_per_trace and facts_per_span must be positive");
        }
        if let Some(u) = self.uncovered.iter().find(|u| !self.categories.contains(u)) {
            return Err(Error::Validation {
                target: "synthetic spec".into(),
                reason: format!("uncovered category {u:?} is not a category"),
            });
        }
        Ok(())
    }

    pub fn skill_name(&self, category: &str) -> String {
        self.skill_keying
            .get(category)
            .cloned()
            .unwrap_or_else(|| format!("capture_{category}"))
    }
}

fn title(name: &str) -> String {
    name.split('_')
        .map(|w| {
            let mut c = w.chars();
            c.next()
                .map(|f| f.to_ascii_uppercase().to_string() + c.as_str())
                .unwrap_or_default()
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// The keyed skill for `category`. Its instruction template is what the
/// scripted executor looks for.
pub fn keyed_skill(name: &str, category: &str) -> Skill {
    let description = format!("Capture {category} facts mentioned in the chunk as new memories.");
    Skill {
        name: name.to_string(),
        description: description.clone(),
        instruction_template: format!(
            "Skill: {}\nPurpose: {description}\nWhen to use:\n- A line is tagged [CAT:{category}].\nHow to apply:\n- Insert the fact stated after the tag verbatim.\nAction type: INSERT only.",
            title(name)
        ),
        update_type: UpdateType::Insert,
        origin: Origin::Initial,
        created_step: 0,
    }
}

const DISTRACTOR_TOPICS: [&str; 6] = ["weather", "greetings", "small_talk", "emoji", "filler", "typos"];

pub fn distractor_skill(i: usize) -> Skill {
    let topic = DISTRACTOR_TOPICS[i % DISTRACTOR_TOPICS.len()];
    let name = if i < DISTRACTOR_TOPICS.len() {
        format!("ignore_{topic}")
    } else {
        format!("ignore_{topic}_{i}")
    };
    let description = format!("Skip {} chatter that carries no durable information.", topic.replace('_', " "));
    Skill {
        instruction_template: format!(
            "Skill: {}\nPurpose: {description}\nHow to apply:\n- Emit no action for such lines.\nAction type: NOOP only.",
            title(&name)
        ),
        name,
        description,
        update_type: UpdateType::Noop,
        origin: Origin::Initial,
        created_step: 0,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticWorld {
    pub traces: Vec<Trace>,
    pub executor_script: ScriptConfig,
    pub answer_script: ScriptConfig,
    /// Designer stand-in that proposes the keyed skill of each uncovered
    /// category until it is in the bank.
    pub designer_script: ScriptConfig,
    pub initial_bank: SkillBank,
    /// Keyed skills for every category, including uncovered ones.
    pub keyed_skills: Vec<Skill>,
    /// Category of each span, per trace.
    pub span_categories: SpanCategories,
}

pub const SYNTH_QUESTION_PATTERN: &str = r"Question: What does (?P<key>\w+) have\?";
pub const SYNTH_MEMORY_PATTERN: &str = r"\b{key} has (?P<value>\w+)";
pub const SYNTH_FALLBACK: &str = "unknown";

pub const ANALYSIS_MARKER: &str = "You are an expert analyst";
pub const REFINEMENT_MARKER: &str = "Based on the failure analysis";

/// A stage-1 reply naming `skill` as the missing capability.
pub fn analysis_reply_for(skill: &Skill) -> String {
    serde_json::json!({
        "failure_patterns": [{
            "pattern_name": format!("missing {}", skill.name),
            "affected_cases": [1],
            "root_cause": "storage_failure",
            "explanation": "facts of this kind are never stored",
            "potential_fix": skill.description,
        }],
        "recommendations": [{
            "action": "add_new_operation",
            "target_operation": null,
            "rationale": skill.description,
            "priority": "high",
        }],
        "summary": format!("add {}", skill.name),
    })
    .to_string()
}

/// A stage-2 reply adding `skill` verbatim.
pub fn add_reply_for(skill: &Skill) -> String {
    serde_json::json!({
        "action": "apply_changes",
        "summary": format!("add {}", skill.name),
        "changes": [{
            "action": "add_new",
            "new_operation": {
                "name": skill.name,
                "description": skill.description,
                "instruction_template": skill.instruction_template,
                "update_type": skill.update_type.as_str(),
                "reasoning": "uncovered fact category",
            }
        }]
    })
    .to_string()
}

/// The marker a full bank listing contains once `name` is present.
pub fn bank_listing_marker(name: &str) -> String {
    format!("### {name}\n")
}

/// Scripted designer: proposes each of `skills` in order while it is absent
/// from the bank, then answers `no_change`.
pub fn designer_script_adding(skills: &[&Skill]) -> ScriptConfig {
    let mut rules = Vec::new();
    if let Some(first) = skills.first() {
        rules.push(ScriptRule::Canned {
            when_all: vec![ANALYSIS_MARKER.into()],
            when_none: vec![],
            respond: analysis_reply_for(first),
        });
    }
    for s in skills {
        rules.push(ScriptRule::Canned {
            when_all: vec![REFINEMENT_MARKER.into()],
            when_none: vec![bank_listing_marker(&s.name)],
            respond: add_reply_for(s),
        });
    }
    rules.push(ScriptRule::Canned {
        when_all: vec![ANALYSIS_MARKER.into()],
        when_none: vec![],
        respond: r#"{"failure_patterns":[],"recommendations":[],"summary":"no systematic gap"}"#.into(),
    });
    ScriptConfig {
        rules,
        default: r#"{"action":"no_change","reasoning":"bank already covers the failures"}"#.into(),
    }
}

/// Categories of every span, per trace.
pub type SpanCategories = Vec<Vec<Vec<String>>>;

/// Generates a fresh trace set from `seed`, independent of `spec.seed`.
pub fn make_synthetic_traces(spec: &SyntheticSpec, seed: u64) -> Result<(Vec<Trace>, SpanCategories)> {
    spec.validate()?;
    let mut traces = Vec::with_capacity(spec.traces);
    let mut cats_all = Vec::with_capacity(spec.traces);
    for t in 0..spec.traces {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(t as u64 + 1);
        let mut spans = Vec::new();
        let mut queries = Vec::new();
        let mut cats = Vec::new();
        let mut fact = 0usize;
        for s in 0..spec.spans_per_trace {
            let category = &spec.categories[rng.random_range(0..spec.categories.len())];
            let mut lines = vec![format!("Notes on {category} follow.")];
            for _ in 0..spec.facts_per_span {
                let entity = format!("t{t}e{fact}");
                let value = format!("v{:06x}", rng.random_range(0..0x100_0000u32));
                lines.push(format!("[CAT:{category}] {entity} has {value}"));
                queries.push(Query {
                    id: format!("t{t}q{fact}"),
                    text: format!("What does {entity} have?"),
                    ground_truth: value,
                    metadata: BTreeMap::from([("category".to_string(), category.clone())]),
                });
                fact += 1;
            }
            lines.push(format!("That was about {category}."));
            spans.push(Span {
                index: s,
                text: lines.join("\n"),
            });
            cats.push(vec![category.clone()]);
        }
        traces.push(Trace {
            trace_id: format!("synth-{seed}-{t}"),
            kind: TraceKind::Conversational,
            spans,
            queries,
        });
        cats_all.push(cats);
    }
    Ok((traces, cats_all))
}

/// Builds traces, scripted executor and answerer rules, and the initial
/// bank. Reward is then a deterministic function of which skills the
/// controller selects for each span.
pub fn make_synthetic(spec: &SyntheticSpec) -> Result<SyntheticWorld> {
    spec.validate()?;
    let (traces, span_categories) = make_synthetic_traces(spec, spec.seed)?;
    let keyed_skills: Vec<Skill> = spec
        .categories
        .iter()
        .map(|c| keyed_skill(&spec.skill_name(c), c))
        .collect();
    let keying = spec
        .categories
        .iter()
        .zip(&keyed_skills)
        .map(|(c, s)| (c.clone(), s.instruction_template.clone()))
        .collect();

    let mut skills = Vec::new();
    if spec.include_primitives {
        skills.extend(SkillBank::init_primitives().skills);
    }
    for (c, s) in spec.categories.iter().zip(&keyed_skills) {
        if !spec.uncovered.contains(c) {
            skills.push(s.clone());
        }
    }
    skills.extend((0..spec.distractor_skills).map(distractor_skill));
    let initial_bank = SkillBank::new(0, skills)?;
    let missing: Vec<&Skill> = spec
        .categories
        .iter()
        .zip(&keyed_skills)
        .filter(|(c, _)| spec.uncovered.contains(c))
        .map(|(_, s)| s)
        .collect();

    Ok(SyntheticWorld {
        traces,
        executor_script: ScriptConfig {
            rules: vec![ScriptRule::SkillKeyedExtract { keying }],
            default: "ACTION: NOOP".into(),
        },
        answer_script: ScriptConfig {
            rules: vec![ScriptRule::Lookup {
                question_pattern: SYNTH_QUESTION_PATTERN.into(),
                memory_pattern: SYNTH_MEMORY_PATTERN.into(),
                fallback: SYNTH_FALLBACK.into(),
            }],
            default: SYNTH_FALLBACK.into(),
        },
        designer_script: designer_script_adding(&missing),
        initial_bank,
        keyed_skills,
        span_categories,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::HashEmbedder;
    use crate::executor::ScriptedBackend;
    use proptest::prelude::*;

    #[test]
    fn chunk_examples() {
        let text = (0..1000).map(|i| format!("w{i}")).collect::<Vec<_>>().join(" ");
        let spans = chunk_text(&text, 512).unwrap();
        let sizes: Vec<usize> = spans.iter().map(|s| s.text.split_whitespace().count()).collect();
        assert_eq!(sizes, [512, 488]);
        assert!(chunk_text("", 512).unwrap().is_empty());
        assert!(chunk_text("x", 15).is_err());
        let s = chunk_sessions(&["a".into(), "b c".into(), "d".into()], 16).unwrap();
        assert_eq!(s.len(), 3);
    }

    proptest! {
        #[test]
        fn chunk_concatenation_reproduces_tokens(words in proptest::collection::vec("[a-z]{1,6}", 0..200), n in 16usize..64) {
            let text = words.join("  \n");
            let spans = chunk_text(&text, n).unwrap();
            let rejoined: Vec<String> = spans.iter().flat_map(|s| s.text.split_whitespace().map(String::from).collect::<Vec<_>>()).collect();
            prop_assert_eq!(rejoined, words);
            prop_assert!(spans.iter().all(|s| s.text.split_whitespace().count() <= n));
        }

        #[test]
        fn f1_symmetric(a in "[a-z ]{0,30}", b in "[a-z ]{0,30}") {
            prop_assert!((token_f1(&a, &b) - token_f1(&b, &a)).abs() < 1e-15);
            if !normalize_answer(&a).is_empty() {
                prop_assert_eq!(token_f1(&a, &a), 1.0);
            }
        }
    }

    #[test]
    fn f1_examples() {
        assert_eq!(token_f1("Paris", "paris."), 1.0);
        assert_eq!(token_f1("a b", "a c"), 0.0);
        assert_eq!(token_f1("x b", "x c"), 0.5);
        assert_eq!(token_f1("", "x"), 0.0);
        assert_eq!(token_f1("", ""), 1.0);
        assert_eq!(token_f1("The cat", "cat"), 1.0);
        assert_eq!(exact_match("The  Cat!", "cat"), 1.0);
    }

    #[test]
    fn judge_score_parsing() {
        assert_eq!(parse_judge_score(r#"{"explanation":"ok","score":0.5}"#), Some(0.5));
        assert_eq!(parse_judge_score("no json"), None);
    }

    fn world() -> (SyntheticWorld, ScriptedBackend) {
        let spec = SyntheticSpec {
            traces: 1,
            spans_per_trace: 4,
            ..Default::default()
        };
        let w = make_synthetic(&spec).unwrap();
        let answer = ScriptedBackend::new(w.answer_script.clone()).unwrap();
        (w, answer)
    }

    #[test]
    fn evaluate_counts_answerable_queries() {
        let (w, answer) = world();
        let emb = HashEmbedder::new(64).unwrap();
        let trace = &w.traces[0];
        let mut bank = MemoryBank::new();
        let empty = evaluate_memory(&bank, &trace.queries, &emb, &answer, None, &EvalConfig::default())
            .unwrap()
            .0;
        assert_eq!(empty, 0.0);
        // store the facts of the first two spans
        for span in &trace.spans[..2] {
            let fact = span.text.lines().find(|l| l.starts_with("[CAT:")).unwrap();
            let text = fact.split_once("] ").unwrap().1;
            bank.insert(text.to_string(), emb.embed(text).unwrap(), 0);
        }
        let (mean, recs) = evaluate_memory(&bank, &trace.queries, &emb, &answer, None, &EvalConfig::default()).unwrap();
        let oracle = recs.iter().filter(|r| bank.items().iter().any(|m| m.text.contains(&r.ground_truth))).count();
        assert_eq!(oracle, 2);
        assert_eq!(mean, oracle as f64 / 4.0);
    }

    #[test]
    fn synthetic_is_deterministic() {
        let a = make_synthetic(&SyntheticSpec::default()).unwrap();
        let b = make_synthetic(&SyntheticSpec::default()).unwrap();
        assert_eq!(a, b);
        let other = make_synthetic_traces(&SyntheticSpec::default(), 99).unwrap().0;
        assert_ne!(a.traces, other);
        assert_eq!(a.initial_bank.len(), 6);
    }

    #[test]
    fn uncovered_category_is_missing_from_bank() {
        let spec = SyntheticSpec {
            uncovered: vec!["temporal".into()],
            ..Default::default()
        };
        let w = make_synthetic(&spec).unwrap();
        assert!(w.initial_bank.get("capture_temporal").is_none());
        assert_eq!(w.keyed_skills.len(), 4);
    }

    #[test]
    fn trace_schemas_and_errors() {
        let conv = serde_json::json!({
            "sessions": [
                {"date": "2023-05-01", "turns": [{"speaker": "A", "text": "hi"}, {"speaker": "B", "text": "hello"}]},
                {"turns": [{"speaker": "A", "text": "bye"}]}
            ],
            "queries": [{"question": "who?", "answer": "A"}]
        });
        let t = parse_trace_value(&conv, "x", TraceFormat::Auto, 512, ChunkMode::Auto).unwrap();
        assert_eq!(t.spans.len(), 2);
        assert_eq!(t.spans[0].text, "Session date: 2023-05-01\nA: hi\nB: hello");
        assert_eq!(t.queries[0].id, "q0");

        let bad = serde_json::json!({"sessions": [{"turns": [{"speaker": "A"}]}]});
        match parse_trace_value(&bad, "x", TraceFormat::Auto, 512, ChunkMode::Auto) {
            Err(Error::Schema { path, .. }) => assert_eq!(path, "$.sessions[0].turns[0].text"),
            other => panic!("{other:?}"),
        }

        let steps: Vec<Value> = (0..10)
            .map(|i| serde_json::json!({"observation": format!("room {i}"), "action": format!("go {i}")}))
            .collect();
        let traj = serde_json::json!({"steps": steps, "queries": []});
        let t = parse_trace_value(&traj, "x", TraceFormat::Auto, 512, ChunkMode::Auto).unwrap();
        assert_eq!(t.kind, TraceKind::Trajectory);
        assert_eq!(t.spans.len(), 1);
        let order: Vec<usize> = (0..10).map(|i| t.spans[0].text.find(&format!("room {i} ")).unwrap()).collect();
        assert!(order.windows(2).all(|w| w[0] < w[1]));
    }
}
