//! Skill-conditioned extraction: prompt construction, LLM backends and the
//! action-block grammar.

use std::collections::BTreeMap;
use std::time::Duration;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::embedding::Embedder;
use crate::error::{Error, Result};
use crate::memory_bank::{ApplyReport, MemoryAction, MemoryBank, RetrievedSet};
use crate::skill_bank::Skill;

pub const EXECUTOR_TEMPLATE: &str = include_str!("../assets/prompts/executor.txt");

/// Marker used in the retrieved-memories slot when nothing was retrieved.
pub const NO_MEMORIES: &str = "(none)";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: "user".into(),
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompletionParams {
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Default for CompletionParams {
    fn default() -> Self {
        Self {
            temperature: 0.0,
            max_tokens: 1024,
        }
    }
}

pub trait LlmBackend: Send + Sync {
    fn complete(&self, messages: &[ChatMessage], params: &CompletionParams) -> Result<String>;
}

impl<T: LlmBackend + ?Sized> LlmBackend for &T {
    fn complete(&self, messages: &[ChatMessage], params: &CompletionParams) -> Result<String> {
        (**self).complete(messages, params)
    }
}

impl<T: LlmBackend + ?Sized> LlmBackend for std::sync::Arc<T> {
    fn complete(&self, messages: &[ChatMessage], params: &CompletionParams) -> Result<String> {
        (**self).complete(messages, params)
    }
}

// ---------------------------------------------------------------------------
// Scripted backend

/// One rule of a scripted backend. Rules are tried in order; the first one
/// that produces a response wins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScriptRule {
    /// Fixed response when every `when_all` substring is present and no
    /// `when_none` substring is.
    Canned {
        #[serde(default)]
        when_all: Vec<String>,
        #[serde(default)]
        when_none: Vec<String>,
        respond: String,
    },
    /// Executor stand-in: for every line of the input chunk tagged
    /// `[CAT:<category>]`, emits an INSERT of the text after the tag iff the
    /// prompt contains the instruction template keyed to that category.
    SkillKeyedExtract { keying: BTreeMap<String, String> },
    /// Answerer stand-in: extracts `key` from the question with
    /// `question_pattern`, then searches the prompt context with
    /// `memory_pattern` (where `{key}` is replaced by the escaped key) and
    /// answers with its `value` group, or `fallback`.
    Lookup {
        question_pattern: String,
        memory_pattern: String,
        fallback: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptConfig {
    pub rules: Vec<ScriptRule>,
    #[serde(default = "default_response")]
    pub default: String,
}

fn default_response() -> String {
    "ACTION: NOOP".into()
}

#[derive(Debug)]
enum CompiledRule {
    Canned {
        when_all: Vec<String>,
        when_none: Vec<String>,
        respond: String,
    },
    Extract {
        keying: BTreeMap<String, String>,
        tag: Regex,
    },
    Lookup {
        question: Regex,
        memory_pattern: String,
        fallback: String,
    },
}

/// Deterministic backend driven by a rule file. Pure: identical prompts give
/// identical responses.
#[derive(Debug)]
pub struct ScriptedBackend {
    rules: Vec<CompiledRule>,
    default: String,
}

impl ScriptedBackend {
    pub fn new(config: ScriptConfig) -> Result<Self> {
        let rules = config
            .rules
            .into_iter()
            .map(|r| {
                Ok(match r {
                    ScriptRule::Canned {
                        when_all,
                        when_none,
                        respond,
                    } => CompiledRule::Canned {
                        when_all,
                        when_none,
                        respond,
                    },
                    ScriptRule::SkillKeyedExtract { keying } => CompiledRule::Extract {
                        keying,
                        tag: Regex::new(r"\[CAT:([^\]]+)\]").expect("static regex"),
                    },
                    ScriptRule::Lookup {
                        question_pattern,
                        memory_pattern,
                        fallback,
                    } => CompiledRule::Lookup {
                        question: Regex::new(&question_pattern)
                            .map_err(|e| Error::Config(format!("question_pattern: {e}")))?,
                        memory_pattern,
                        fallback,
                    },
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            rules,
            default: config.default,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::new(serde_json::from_str(text)?)
    }

    pub fn from_file(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    fn respond(&self, prompt: &str) -> String {
        for rule in &self.rules {
            match rule {
                CompiledRule::Canned {
                    when_all,
                    when_none,
                    respond,
                } => {
                    if when_all.iter().all(|s| prompt.contains(s.as_str()))
                        && !when_none.iter().any(|s| prompt.contains(s.as_str()))
                    {
                        return respond.clone();
                    }
                }
                CompiledRule::Extract { keying, tag } => {
                    let Some(chunk) = input_chunk(prompt) else {
                        continue;
                    };
                    let skills = selected_skills_section(prompt);
                    let mut actions = Vec::new();
                    for line in chunk.lines() {
                        let Some(caps) = tag.captures(line) else {
                            continue;
                        };
                        let keyed = keying.get(&caps[1]);
                        if keyed.is_some_and(|t| skills.contains(t.as_str())) {
                            let fact = line[caps.get(0).expect("match").end()..].trim();
                            if !fact.is_empty() {
                                actions.push(MemoryAction::Insert { text: fact.to_string() });
                            }
                        }
                    }
                    if actions.is_empty() {
                        actions.push(MemoryAction::Noop);
                    }
                    return format_action_blocks(&actions);
                }
                CompiledRule::Lookup {
                    question,
                    memory_pattern,
                    fallback,
                } => {
                    let Some(caps) = question.captures(prompt) else {
                        continue;
                    };
                    let Some(key) = caps.name("key") else {
                        continue;
                    };
                    let pattern = memory_pattern.replace("{key}", &regex::escape(key.as_str()));
                    let Ok(re) = Regex::new(&pattern) else {
                        return fallback.clone();
                    };
                    let question_span = caps.get(0).expect("match").range();
                    let found = re.captures_iter(prompt).find_map(|m| {
                        let whole = m.get(0)?.range();
                        let inside_question =
                            whole.start < question_span.end && question_span.start < whole.end;
                        if inside_question {
                            None
                        } else {
                            m.name("value").map(|v| v.as_str().to_string())
                        }
                    });
                    return found.unwrap_or_else(|| fallback.clone());
                }
            }
        }
        self.default.clone()
    }
}

impl LlmBackend for ScriptedBackend {
    fn complete(&self, messages: &[ChatMessage], _params: &CompletionParams) -> Result<String> {
        let prompt = messages
            .iter()
            .map(|m| m.content.as_str())
            .collect::<Vec<_>>()
            .join("\n");
        Ok(self.respond(&prompt))
    }
}

fn input_chunk(prompt: &str) -> Option<&str> {
    let start = prompt.find("Input Text Chunk: ")? + "Input Text Chunk: ".len();
    let end = prompt[start..]
        .find("\nRetrieved Memories (0-based index):")
        .map_or(prompt.len(), |e| start + e);
    Some(&prompt[start..end])
}

fn selected_skills_section(prompt: &str) -> &str {
    let Some(start) = prompt.find("\nSelected Skills: ") else {
        return prompt;
    };
    let end = prompt[start..]
        .find("\n\nGuidelines:\n")
        .map_or(prompt.len(), |e| start + e);
    &prompt[start..end]
}

// ---------------------------------------------------------------------------
// HTTP backend

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HttpChatConfig {
    pub url: String,
    pub model: String,
    pub api_key_env: Option<String>,
    pub max_attempts: u32,
    pub timeout_secs: u64,
    pub backoff_ms: u64,
}

impl Default for HttpChatConfig {
    fn default() -> Self {
        Self {
            url: "http://127.0.0.1:8000/v1/chat/completions".into(),
            model: "default".into(),
            api_key_env: Some("SKILLMEM_LLM_API_KEY".into()),
            max_attempts: 3,
            timeout_secs: 120,
            backoff_ms: 500,
        }
    }
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: &'a [ChatMessage],
    temperature: f64,
    max_tokens: u32,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatChoiceMessage,
}

#[derive(Deserialize)]
struct ChatChoiceMessage {
    #[serde(default)]
    content: Option<String>,
}

/// Chat-completions client for any OpenAI-compatible endpoint.
pub struct HttpChatBackend {
    config: HttpChatConfig,
    client: reqwest::blocking::Client,
    api_key: Option<String>,
}

impl HttpChatBackend {
    pub fn new(config: HttpChatConfig) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| Error::Transport {
                attempts: 0,
                message: e.to_string(),
            })?;
        let api_key = config
            .api_key_env
            .as_deref()
            .and_then(|v| std::env::var(v).ok());
        Ok(Self {
            config,
            client,
            api_key,
        })
    }

    fn post_once(&self, messages: &[ChatMessage], params: &CompletionParams) -> std::result::Result<ChatResponse, String> {
        let mut req = self.client.post(&self.config.url).json(&ChatRequest {
            model: &self.config.model,
            messages,
            temperature: params.temperature,
            max_tokens: params.max_tokens,
        });
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| e.to_string())?;
        let resp = resp.error_for_status().map_err(|e| e.to_string())?;
        resp.json::<ChatResponse>().map_err(|e| e.to_string())
    }
}

impl LlmBackend for HttpChatBackend {
    fn complete(&self, messages: &[ChatMessage], params: &CompletionParams) -> Result<String> {
        let mut attempts = 0;
        loop {
            attempts += 1;
            match self.post_once(messages, params) {
                Ok(resp) => {
                    return resp
                        .choices
                        .into_iter()
                        .next()
                        .and_then(|c| c.message.content)
                        .ok_or_else(|| Error::Protocol("completion without content".into()));
                }
                Err(message) if attempts >= self.config.max_attempts.max(1) => {
                    return Err(Error::Transport { attempts, message });
                }
                Err(_) => std::thread::sleep(Duration::from_millis(
                    self.config.backoff_ms * u64::from(attempts),
                )),
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Prompt and action blocks

pub fn render_memories(retrieved: &RetrievedSet) -> String {
    if retrieved.is_empty() {
        return NO_MEMORIES.to_string();
    }
    let mut out = String::new();
    for r in &retrieved.items {
        out.push('\n');
        out.push_str(&format!("[{}] {}", r.local_index, r.text));
    }
    out
}

pub fn build_executor_prompt(span_text: &str, retrieved: &RetrievedSet, skills: &[&Skill]) -> Result<String> {
    if skills.is_empty() {
        return Err(Error::InvalidArgument("executor needs at least one skill".into()));
    }
    let skills_text = format!(
        "\n{}",
        skills
            .iter()
            .map(|s| s.instruction_template.as_str())
            .collect::<Vec<_>>()
            .join("\n\n")
    );
    Ok(EXECUTOR_TEMPLATE
        .trim_end()
        .replacen("{session_text}", span_text, 1)
        .replacen("{mem_text}", &render_memories(retrieved), 1)
        .replacen("{skills_text}", &skills_text, 1))
}

pub fn format_action_blocks(actions: &[MemoryAction]) -> String {
    actions
        .iter()
        .map(|a| match a {
            MemoryAction::Insert { text } => format!("ACTION: INSERT\nMEMORY_ITEM: {text}"),
            MemoryAction::Update { local_index, text } => {
                format!("ACTION: UPDATE\nMEMORY_INDEX: {local_index}\nUPDATED_MEMORY: {text}")
            }
            MemoryAction::Delete { local_index } => format!("ACTION: DELETE\nMEMORY_INDEX: {local_index}"),
            MemoryAction::Noop => "ACTION: NOOP".to_string(),
        })
        .collect::<Vec<_>>()
        .join("\n\n")
}

fn split_key(line: &str) -> Option<(String, &str)> {
    let (k, v) = line.split_once(':')?;
    let key = k.trim().to_ascii_uppercase();
    if key.is_empty() || !key.bytes().all(|b| b.is_ascii_uppercase() || b == b'_') {
        return None;
    }
    Some((key, v.trim()))
}

fn parse_block(block: &[&str], warnings: &mut Vec<String>) -> Option<MemoryAction> {
    let mut header = None;
    let mut fields: Vec<(String, String)> = Vec::new();
    for line in block {
        match split_key(line) {
            Some((k, v)) if k == "ACTION" => header = Some(v.to_ascii_uppercase()),
            Some((k, v)) => fields.push((k, v.to_string())),
            None => {
                if let Some((_, v)) = fields.last_mut() {
                    v.push('\n');
                    v.push_str(line.trim());
                }
            }
        }
    }
    let preview = block.first().copied().unwrap_or_default();
    let Some(header) = header else {
        warnings.push(format!("block without ACTION header: {preview:?}"));
        return None;
    };
    let field = |name: &str| fields.iter().find(|(k, _)| k == name).map(|(_, v)| v.trim());
    let index = |warnings: &mut Vec<String>| -> Option<usize> {
        match field("MEMORY_INDEX") {
            None => {
                warnings.push(format!("{header} block missing MEMORY_INDEX"));
                None
            }
            Some(raw) => match raw.trim_matches(|c| c == '[' || c == ']').trim().parse() {
                Ok(i) => Some(i),
                Err(_) => {
                    warnings.push(format!("{header} block has non-integer MEMORY_INDEX {raw:?}"));
                    None
                }
            },
        }
    };
    let text = |name: &str, warnings: &mut Vec<String>| -> Option<String> {
        match field(name) {
            Some(t) if !t.is_empty() => Some(t.to_string()),
            _ => {
                warnings.push(format!("{header} block missing {name}"));
                None
            }
        }
    };
    match header.as_str() {
        "INSERT" => text("MEMORY_ITEM", warnings).map(|text| MemoryAction::Insert { text }),
        "UPDATE" => {
            let i = index(warnings)?;
            text("UPDATED_MEMORY", warnings).map(|text| MemoryAction::Update { local_index: i, text })
        }
        "DELETE" => index(warnings).map(|local_index| MemoryAction::Delete { local_index }),
        "NOOP" | "NO_OP" | "SKIP" => Some(MemoryAction::Noop),
        other => {
            warnings.push(format!("unknown action {other:?}"));
            None
        }
    }
}

/// Parses executor output. Never fails: malformed blocks are skipped and
/// reported as warnings.
pub fn parse_action_blocks(text: &str) -> (Vec<MemoryAction>, Vec<String>) {
    let mut blocks: Vec<Vec<&str>> = Vec::new();
    let mut current: Vec<&str> = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            if !current.is_empty() {
                blocks.push(std::mem::take(&mut current));
            }
            continue;
        }
        let starts_action = split_key(line).is_some_and(|(k, _)| k == "ACTION");
        if starts_action && !current.is_empty() {
            blocks.push(std::mem::take(&mut current));
        }
        current.push(line);
    }
    if !current.is_empty() {
        blocks.push(current);
    }

    let mut warnings = Vec::new();
    let actions = blocks
        .iter()
        .filter_map(|b| parse_block(b, &mut warnings))
        .collect::<Vec<_>>();
    if blocks.is_empty() {
        warnings.push("no action blocks in executor output".into());
    }
    (actions, warnings)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SpanOutcome {
    pub actions: Vec<MemoryAction>,
    pub report: ApplyReport,
    pub parse_warnings: Vec<String>,
}

/// Runs one executor call for a span and applies the parsed actions. On
/// backend failure the bank is left unchanged and the error is returned.
#[allow(clippy::too_many_arguments)]
pub fn execute_span(
    span_text: &str,
    bank: &mut MemoryBank,
    retrieved: &RetrievedSet,
    skills: &[&Skill],
    backend: &dyn LlmBackend,
    params: &CompletionParams,
    embedder: &dyn Embedder,
    step: u64,
    max_actions: usize,
) -> Result<SpanOutcome> {
    let prompt = build_executor_prompt(span_text, retrieved, skills)?;
    let output = backend.complete(&[ChatMessage::user(prompt)], params)?;
    let (mut actions, mut parse_warnings) = parse_action_blocks(&output);
    if actions.len() > max_actions {
        parse_warnings.push(format!(
            "{} actions exceed the per-span cap of {max_actions}; extra actions dropped",
            actions.len()
        ));
        actions.truncate(max_actions);
    }
    let report = bank.apply_actions(retrieved, &actions, step, embedder)?;
    Ok(SpanOutcome {
        actions,
        report,
        parse_warnings,
    })
}
