//! Skill-bank evolution: hard-case bookkeeping, representative mining, the
//! two-stage LLM designer, and reward-gated rollback.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::embedding::EmbeddingVector;
use crate::error::{Error, Result};
use crate::executor::{ChatMessage, CompletionParams, LlmBackend};
use crate::skill_bank::{valid_skill_name, SkillBank, SnapshotId, SnapshotStore, UpdateType};

pub const ANALYSIS_TEMPLATE: &str = include_str!("../assets/prompts/designer_analysis.txt");
pub const REFINEMENT_TEMPLATE: &str = include_str!("../assets/prompts/designer_refinement.txt");

// ---------------------------------------------------------------------------
// Hard cases

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseObservation {
    pub query_id: String,
    pub query: String,
    pub query_embedding: EmbeddingVector,
    pub ground_truth: String,
    pub prediction: String,
    pub retrieved_ids: Vec<u64>,
    pub retrieved_memories: Vec<String>,
    pub reward: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HardCase {
    pub query_id: String,
    pub query: String,
    pub query_embedding: EmbeddingVector,
    pub ground_truth: String,
    pub prediction: String,
    pub retrieved_ids: Vec<u64>,
    pub retrieved_memories: Vec<String>,
    pub reward: f64,
    pub failure_count: u32,
    pub last_seen_step: u64,
}

impl HardCase {
    /// `(1 − r) · c`.
    pub fn difficulty(&self) -> f64 {
        difficulty(self.reward, self.failure_count)
    }
}

pub fn difficulty(reward: f64, failure_count: u32) -> f64 {
    (1.0 - reward) * f64::from(failure_count)
}

/// Query-keyed sliding window of recent failures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HardCaseBuffer {
    cases: BTreeMap<String, HardCase>,
    pub capacity: usize,
    pub max_age: u64,
    pub fail_threshold: f64,
}

impl HardCaseBuffer {
    pub fn new(capacity: usize, max_age: u64, fail_threshold: f64) -> Self {
        Self {
            cases: BTreeMap::new(),
            capacity: capacity.max(1),
            max_age,
            fail_threshold,
        }
    }

    pub fn len(&self) -> usize {
        self.cases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cases.is_empty()
    }

    pub fn get(&self, query_id: &str) -> Option<&HardCase> {
        self.cases.get(query_id)
    }

    pub fn cases(&self) -> impl Iterator<Item = &HardCase> {
        self.cases.values()
    }

    /// Upserts a sub-threshold observation (bumping its failure count) or
    /// clears the entry on success. Capacity is enforced after every insert.
    pub fn record_case(&mut self, obs: CaseObservation, step: u64) -> Vec<HardCase> {
        let reward = obs.reward.clamp(0.0, 1.0);
        if reward >= self.fail_threshold {
            self.cases.remove(&obs.query_id);
            return Vec::new();
        }
        match self.cases.get_mut(&obs.query_id) {
            Some(c) => {
                c.failure_count += 1;
                c.last_seen_step = step;
                c.prediction = obs.prediction;
                c.reward = reward;
                c.retrieved_ids = obs.retrieved_ids;
                c.retrieved_memories = obs.retrieved_memories;
                c.query_embedding = obs.query_embedding;
            }
            None => {
                self.cases.insert(
                    obs.query_id.clone(),
                    HardCase {
                        query_id: obs.query_id,
                        query: obs.query,
                        query_embedding: obs.query_embedding,
                        ground_truth: obs.ground_truth,
                        prediction: obs.prediction,
                        retrieved_ids: obs.retrieved_ids,
                        retrieved_memories: obs.retrieved_memories,
                        reward,
                        failure_count: 1,
                        last_seen_step: step,
                    },
                );
            }
        }
        self.enforce_capacity()
    }

    /// Drops cases older than `max_age`, then evicts the least difficult
    /// (oldest first among equals) until within capacity.
    pub fn expire(&mut self, current_step: u64) -> Vec<HardCase> {
        let cutoff = current_step.saturating_sub(self.max_age);
        let stale: Vec<String> = self
            .cases
            .values()
            .filter(|c| c.last_seen_step < cutoff)
            .map(|c| c.query_id.clone())
            .collect();
        let mut evicted: Vec<HardCase> = stale.iter().filter_map(|k| self.cases.remove(k)).collect();
        evicted.extend(self.enforce_capacity());
        evicted
    }

    fn enforce_capacity(&mut self) -> Vec<HardCase> {
        let mut evicted = Vec::new();
        while self.cases.len() > self.capacity {
            let victim = self
                .cases
                .values()
                .min_by(|a, b| {
                    a.difficulty()
                        .total_cmp(&b.difficulty())
                        .then(a.last_seen_step.cmp(&b.last_seen_step))
                        .then(a.query_id.cmp(&b.query_id))
                })
                .map(|c| c.query_id.clone())
                .expect("non-empty");
            evicted.extend(self.cases.remove(&victim));
        }
        evicted
    }
}

// ---------------------------------------------------------------------------
// Clustering

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// k-means with k-means++ seeding and Lloyd iterations (at most 50, stopping
/// once no centroid moves more than 1e-6). Returns one cluster label per
/// point; labels are dense and no cluster is empty.
pub fn kmeans(points: &[&[f64]], k: usize, seed: u64) -> Vec<usize> {
    let n = points.len();
    if n == 0 {
        return Vec::new();
    }
    let k = k.clamp(1, n);
    if k == n {
        return (0..n).collect();
    }
    let dim = points[0].len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut centroids: Vec<Vec<f64>> = vec![points[rng.random_range(0..n)].to_vec()];
    while centroids.len() < k {
        let d2: Vec<f64> = points
            .iter()
            .map(|p| centroids.iter().map(|c| sq_dist(p, c)).fold(f64::INFINITY, f64::min))
            .collect();
        let total: f64 = d2.iter().sum();
        let next = if total <= 0.0 {
            rng.random_range(0..n)
        } else {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, d) in d2.iter().enumerate() {
                if target < *d {
                    pick = i;
                    break;
                }
                target -= d;
            }
            pick
        };
        centroids.push(points[next].to_vec());
    }

    let mut labels = vec![0usize; n];
    for _ in 0..50 {
        for (i, p) in points.iter().enumerate() {
            labels[i] = (0..k)
                .min_by(|a, b| sq_dist(p, &centroids[*a]).total_cmp(&sq_dist(p, &centroids[*b])))
                .expect("k >= 1");
        }
        // re-seed empty clusters from the point farthest from its centroid
        for c in 0..k {
            if labels.contains(&c) {
                continue;
            }
            let far = (0..n)
                .filter(|i| labels.iter().filter(|l| **l == labels[*i]).count() > 1)
                .max_by(|a, b| {
                    sq_dist(points[*a], &centroids[labels[*a]])
                        .total_cmp(&sq_dist(points[*b], &centroids[labels[*b]]))
                });
            if let Some(i) = far {
                labels[i] = c;
                centroids[c] = points[i].to_vec();
            }
        }
        let mut shift: f64 = 0.0;
        for (c, centroid) in centroids.iter_mut().enumerate() {
            let members: Vec<&[f64]> = points
                .iter()
                .zip(&labels)
                .filter(|(_, l)| **l == c)
                .map(|(p, _)| *p)
                .collect();
            let mut mean = vec![0.0; dim];
            for m in &members {
                for (acc, v) in mean.iter_mut().zip(m.iter()) {
                    *acc += v;
                }
            }
            mean.iter_mut().for_each(|v| *v /= members.len() as f64);
            shift = shift.max(sq_dist(&mean, centroid).sqrt());
            *centroid = mean;
        }
        if shift <= 1e-6 {
            break;
        }
    }
    labels
}

/// Groups cases by query-embedding similarity into `min(k, |cases|)`
/// clusters.
pub fn cluster_cases(cases: &[HardCase], k: usize, seed: u64) -> Vec<Vec<HardCase>> {
    let points: Vec<&[f64]> = cases.iter().map(|c| c.query_embedding.as_slice()).collect();
    let labels = kmeans(&points, k, seed);
    let n_clusters = labels.iter().max().map_or(0, |m| m + 1);
    let mut clusters = vec![Vec::new(); n_clusters];
    for (case, l) in cases.iter().zip(labels) {
        clusters[l].push(case.clone());
    }
    clusters
}

fn case_order(a: &HardCase, b: &HardCase) -> std::cmp::Ordering {
    b.difficulty()
        .total_cmp(&a.difficulty())
        .then(b.failure_count.cmp(&a.failure_count))
        .then(b.last_seen_step.cmp(&a.last_seen_step))
        .then(a.query_id.cmp(&b.query_id))
}

/// Top `per_cluster` cases of each cluster by difficulty (then failure count,
/// then recency), interleaved round-robin across clusters and capped at
/// `max_total`. Clusters whose hardest case is harder go first.
pub fn select_representatives(clusters: &[Vec<HardCase>], per_cluster: usize, max_total: usize) -> Vec<HardCase> {
    let mut ranked: Vec<Vec<HardCase>> = clusters
        .iter()
        .filter(|c| !c.is_empty())
        .map(|c| {
            let mut c = c.clone();
            c.sort_by(case_order);
            c.truncate(per_cluster.max(1));
            c
        })
        .collect();
    ranked.sort_by(|a, b| case_order(&a[0], &b[0]));
    let mut out = Vec::new();
    for round in 0..per_cluster.max(1) {
        for cluster in &ranked {
            if out.len() >= max_total {
                return out;
            }
            if let Some(c) = cluster.get(round) {
                out.push(c.clone());
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Proposals

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProposalAction {
    ApplyChanges,
    NoChange,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SkillChange {
    Add {
        name: String,
        description: String,
        instruction_template: String,
        update_type: UpdateType,
        reasoning: String,
    },
    Refine {
        name: String,
        new_description: Option<String>,
        new_instruction_template: Option<String>,
        reasoning: String,
    },
}

impl SkillChange {
    pub fn target(&self) -> &str {
        match self {
            SkillChange::Add { name, .. } | SkillChange::Refine { name, .. } => name,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvolutionProposal {
    pub action: ProposalAction,
    pub changes: Vec<SkillChange>,
    pub summary: String,
}

impl EvolutionProposal {
    pub fn no_change(summary: impl Into<String>) -> Self {
        Self {
            action: ProposalAction::NoChange,
            changes: Vec::new(),
            summary: summary.into(),
        }
    }

    pub fn is_no_change(&self) -> bool {
        self.action == ProposalAction::NoChange || self.changes.is_empty()
    }
}

/// Stage-1 output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Analysis {
    pub failure_patterns: Vec<Value>,
    pub recommendations: Vec<Value>,
    pub summary: String,
}

/// Pulls a JSON object out of model output, tolerating code fences or text
/// around a single top-level object.
pub fn extract_json(text: &str) -> Option<Value> {
    let trimmed = text.trim();
    let unfenced = trimmed
        .strip_prefix("```json")
        .or_else(|| trimmed.strip_prefix("```"))
        .map(|s| s.trim_end().trim_end_matches("```"))
        .unwrap_or(trimmed);
    if let Ok(v) = serde_json::from_str::<Value>(unfenced.trim()) {
        return v.is_object().then_some(v);
    }
    let start = unfenced.find('{')?;
    let end = unfenced.rfind('}')?;
    if end <= start {
        return None;
    }
    serde_json::from_str::<Value>(&unfenced[start..=end])
        .ok()
        .filter(Value::is_object)
}

pub fn parse_analysis(text: &str) -> Option<Analysis> {
    let v = extract_json(text)?;
    let obj = v.as_object()?;
    if !(obj.contains_key("failure_patterns") && obj.contains_key("recommendations") && obj.contains_key("summary")) {
        return None;
    }
    serde_json::from_value(v).ok()
}

fn str_field<'a>(v: &'a Value, key: &str) -> Option<&'a str> {
    v.get(key).and_then(Value::as_str).map(str::trim).filter(|s| !s.is_empty())
}

/// Parses and validates a stage-2 proposal against `bank`. Invalid entries
/// are dropped individually with a warning. Returns `None` when the text is
/// not a proposal object at all.
pub fn parse_proposal(
    text: &str,
    bank: &SkillBank,
    max_changes: usize,
    strict_max_changes: bool,
    warnings: &mut Vec<String>,
) -> Option<EvolutionProposal> {
    let v = extract_json(text)?;
    match v.get("action").and_then(Value::as_str) {
        Some("no_change") => {
            return Some(EvolutionProposal::no_change(
                str_field(&v, "reasoning").unwrap_or_default(),
            ))
        }
        Some("apply_changes") => {}
        _ => return None,
    }
    let summary = str_field(&v, "summary").unwrap_or_default().to_string();
    let raw = v.get("changes").and_then(Value::as_array).cloned().unwrap_or_default();
    let mut changes: Vec<SkillChange> = Vec::new();
    let mut added: Vec<String> = Vec::new();
    for (i, c) in raw.iter().enumerate() {
        let mut drop = |why: String| warnings.push(format!("change {i} dropped: {why}"));
        match c.get("action").and_then(Value::as_str) {
            Some("add_new") => {
                let Some(op) = c.get("new_operation") else {
                    drop("add_new without new_operation".into());
                    continue;
                };
                let (Some(name), Some(desc), Some(tmpl), Some(ut)) = (
                    str_field(op, "name"),
                    str_field(op, "description"),
                    str_field(op, "instruction_template"),
                    str_field(op, "update_type"),
                ) else {
                    drop("new_operation missing a required field".into());
                    continue;
                };
                let update_type = match ut.to_ascii_lowercase().as_str() {
                    "insert" => UpdateType::Insert,
                    "update" => UpdateType::Update,
                    other => {
                        drop(format!("update_type {other:?} is not insert or update"));
                        continue;
                    }
                };
                if !valid_skill_name(name) {
                    drop(format!("name {name:?} is not snake_case"));
                    continue;
                }
                if bank.position(name).is_some() || changes.iter().any(|x| x.target() == name) {
                    drop(format!("name {name:?} already exists or is already targeted"));
                    continue;
                }
                added.push(name.to_string());
                changes.push(SkillChange::Add {
                    name: name.to_string(),
                    description: desc.to_string(),
                    instruction_template: tmpl.to_string(),
                    update_type,
                    reasoning: str_field(op, "reasoning").unwrap_or_default().to_string(),
                });
            }
            Some("refine_existing") => {
                let Some(op) = c.get("refined_operation") else {
                    drop("refine_existing without refined_operation".into());
                    continue;
                };
                let Some(name) = str_field(op, "name") else {
                    drop("refined_operation without name".into());
                    continue;
                };
                if bank.position(name).is_none() {
                    drop(format!("refine target {name:?} does not exist"));
                    continue;
                }
                if added.iter().any(|a| a == name) || changes.iter().any(|x| x.target() == name) {
                    drop(format!("{name:?} is already targeted in this proposal"));
                    continue;
                }
                let fields = op.get("changes");
                let new_description = fields.and_then(|f| str_field(f, "description")).map(String::from);
                let new_instruction_template = fields
                    .and_then(|f| str_field(f, "instruction_template"))
                    .map(String::from);
                if new_description.is_none() && new_instruction_template.is_none() {
                    drop(format!("refinement of {name:?} changes nothing"));
                    continue;
                }
                changes.push(SkillChange::Refine {
                    name: name.to_string(),
                    new_description,
                    new_instruction_template,
                    reasoning: str_field(op, "reasoning").unwrap_or_default().to_string(),
                });
            }
            other => drop(format!("unknown change action {other:?}")),
        }
    }
    if changes.len() > max_changes {
        if strict_max_changes {
            warnings.push(format!(
                "proposal has {} changes, more than the limit of {max_changes}; treated as no_change",
                changes.len()
            ));
            return Some(EvolutionProposal::no_change(summary));
        }
        warnings.push(format!(
            "proposal has {} changes; keeping the first {max_changes}",
            changes.len()
        ));
        changes.truncate(max_changes);
    }
    if changes.is_empty() {
        return Some(EvolutionProposal::no_change(summary));
    }
    Some(EvolutionProposal {
        action: ProposalAction::ApplyChanges,
        changes,
        summary,
    })
}

// ---------------------------------------------------------------------------
// Prompts

/// One line of evolution history shown to the designer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackEntry {
    pub round: u32,
    pub summary: String,
    pub changes: Vec<String>,
    /// Tail reward of the cycle that trained on the result, once known.
    pub outcome: Option<f64>,
    pub kept: Option<bool>,
}

pub fn render_feedback(history: &[FeedbackEntry], window: usize) -> String {
    if history.is_empty() {
        return "No previous evolution rounds.".to_string();
    }
    let start = history.len().saturating_sub(window);
    history[start..]
        .iter()
        .map(|f| {
            let changes = if f.changes.is_empty() {
                "no changes".to_string()
            } else {
                f.changes.join(", ")
            };
            let outcome = match (f.outcome, f.kept) {
                (Some(r), Some(true)) => format!("tail reward {r:.4}, kept"),
                (Some(r), Some(false)) => format!("tail reward {r:.4}, rolled back"),
                (Some(r), None) => format!("tail reward {r:.4}"),
                _ => "outcome pending".to_string(),
            };
            format!("- Round {}: {} [{}] ({})", f.round, f.summary, changes, outcome)
        })
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn render_cases(cases: &[HardCase]) -> String {
    cases
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let memories = if c.retrieved_memories.is_empty() {
                "  (none)".to_string()
            } else {
                c.retrieved_memories
                    .iter()
                    .map(|m| format!("  - {m}"))
                    .collect::<Vec<_>>()
                    .join("\n")
            };
            format!(
                "### Case {}\nQuery: {}\nGround truth: {}\nPrediction: {}\nReward: {:.4} | Failure count: {} | Difficulty: {:.4}\nRetrieved memories:\n{}",
                i + 1,
                c.query,
                c.ground_truth,
                c.prediction,
                c.reward,
                c.failure_count,
                c.difficulty(),
                memories
            )
        })
        .collect::<Vec<_>>()
        .join("\n\n")
}

pub fn build_analysis_prompt(bank: &SkillBank, feedback: &str, cases: &[HardCase], max_changes: usize) -> String {
    ANALYSIS_TEMPLATE
        .trim_end()
        .replacen("{operation_bank_description}", &bank.describe(), 1)
        .replacen("{evolution_feedback}", feedback, 1)
        .replacen("{num_failure_cases}", &cases.len().to_string(), 1)
        .replacen("{failure_cases_details}", &render_cases(cases), 1)
        .replace("{max_changes}", &max_changes.to_string())
}

pub fn build_refinement_prompt(analysis_json: &str, bank: &SkillBank, feedback: &str, max_changes: usize) -> String {
    REFINEMENT_TEMPLATE
        .trim_end()
        .replacen("{analysis_feedback}", analysis_json, 1)
        .replacen("{operation_bank_full}", &bank.describe_full(), 1)
        .replacen("{evolution_feedback}", feedback, 1)
        .replace("{max_changes}", &max_changes.to_string())
}

// ---------------------------------------------------------------------------
// Two-stage evolution

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DesignerConfig {
    pub max_changes: usize,
    pub cluster_k: usize,
    pub per_cluster: usize,
    pub max_cases: usize,
    pub strict_max_changes: bool,
    pub feedback_window: usize,
    pub seed: u64,
    pub params: CompletionParams,
}

impl Default for DesignerConfig {
    fn default() -> Self {
        Self {
            max_changes: 3,
            cluster_k: 4,
            per_cluster: 2,
            max_cases: 8,
            strict_max_changes: true,
            feedback_window: 5,
            seed: 0,
            params: CompletionParams {
                temperature: 0.0,
                max_tokens: 2048,
            },
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AnalysisRecord {
    pub representatives: Vec<String>,
    pub analysis_prompt: Option<String>,
    pub analysis_responses: Vec<String>,
    pub analysis: Option<Analysis>,
    pub refinement_prompt: Option<String>,
    pub refinement_responses: Vec<String>,
    pub warnings: Vec<String>,
}

const RETRY_NOTE: &str = "Your previous reply was not valid JSON in the requested format. Output ONLY the JSON, no other text.";

/// Sends `prompt`; on a parse failure re-prompts once with the bad reply in
/// context.
fn ask_json<T>(
    backend: &dyn LlmBackend,
    prompt: &str,
    params: &CompletionParams,
    responses: &mut Vec<String>,
    warnings: &mut Vec<String>,
    stage: &str,
    mut parse: impl FnMut(&str, &mut Vec<String>) -> Option<T>,
) -> Result<Option<T>> {
    let mut messages = vec![ChatMessage::user(prompt)];
    for attempt in 0..2 {
        let reply = backend.complete(&messages, params)?;
        responses.push(reply.clone());
        if let Some(v) = parse(&reply, warnings) {
            return Ok(Some(v));
        }
        warnings.push(format!("{stage}: reply {} was not valid JSON", attempt + 1));
        messages.push(ChatMessage {
            role: "assistant".into(),
            content: reply,
        });
        messages.push(ChatMessage::user(RETRY_NOTE));
    }
    Ok(None)
}

/// Mines representative hard cases and runs the analysis then refinement
/// stages. Never touches `bank`; apply the returned proposal with
/// [`SkillBank::apply_proposal`]. Backend transport errors propagate.
pub fn run_evolution(
    bank: &SkillBank,
    buffer: &HardCaseBuffer,
    backend: &dyn LlmBackend,
    config: &DesignerConfig,
    history: &[FeedbackEntry],
) -> Result<(EvolutionProposal, AnalysisRecord)> {
    let mut record = AnalysisRecord::default();
    if buffer.is_empty() {
        return Ok((EvolutionProposal::no_change("no hard cases"), record));
    }
    let cases: Vec<HardCase> = buffer.cases().cloned().collect();
    let clusters = cluster_cases(&cases, config.cluster_k.min(cases.len()), config.seed);
    let reps = select_representatives(&clusters, config.per_cluster, config.max_cases);
    record.representatives = reps.iter().map(|c| c.query_id.clone()).collect();

    let feedback = render_feedback(history, config.feedback_window);
    let prompt = build_analysis_prompt(bank, &feedback, &reps, config.max_changes);
    record.analysis_prompt = Some(prompt.clone());
    let analysis = ask_json(
        backend,
        &prompt,
        &config.params,
        &mut record.analysis_responses,
        &mut record.warnings,
        "analysis",
        |t, _| parse_analysis(t),
    )?;
    let Some(analysis) = analysis else {
        return Ok((EvolutionProposal::no_change("analysis stage produced no valid JSON"), record));
    };
    record.analysis = Some(analysis.clone());

    let analysis_json = serde_json::to_string_pretty(&analysis)?;
    let prompt = build_refinement_prompt(&analysis_json, bank, &feedback, config.max_changes);
    record.refinement_prompt = Some(prompt.clone());
    let proposal = ask_json(
        backend,
        &prompt,
        &config.params,
        &mut record.refinement_responses,
        &mut record.warnings,
        "refinement",
        |t, w| parse_proposal(t, bank, config.max_changes, config.strict_max_changes, w),
    )?;
    Ok((
        proposal.unwrap_or_else(|| EvolutionProposal::no_change("refinement stage produced no valid JSON")),
        record,
    ))
}

// ---------------------------------------------------------------------------
// Gating

/// Mean of the last `ceil(L/4)` step rewards of a cycle of length `L`.
pub fn tail_mean_reward(step_rewards: &[f64], cycle_len: usize) -> Result<f64> {
    if cycle_len == 0 || step_rewards.len() < cycle_len {
        return Err(Error::InvalidArgument(format!(
            "need at least {cycle_len} step rewards, got {}",
            step_rewards.len()
        )));
    }
    let window = cycle_len.div_ceil(4);
    let tail = &step_rewards[step_rewards.len() - window..];
    Ok(tail.iter().sum::<f64>() / window as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateDecision {
    pub improved: bool,
    /// Snapshot to restore before the next evolution, when the cycle did not
    /// improve.
    pub rollback_to: Option<SnapshotId>,
    pub early_stop: bool,
    pub best_snapshot: SnapshotId,
    pub best_cycle: usize,
    pub best_tail: f64,
}

/// Tracks the best cycle so far and the run of non-improving cycles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gate {
    pub patience: u32,
    pub best: Option<(usize, f64, SnapshotId)>,
    pub non_improving: u32,
}

impl Gate {
    pub fn new(patience: u32) -> Self {
        Self {
            patience: patience.max(1),
            best: None,
            non_improving: 0,
        }
    }

    /// Scores a finished cycle trained on `bank`. Strictly better tails become
    /// the new best snapshot; otherwise the best snapshot is named for
    /// rollback, and `patience` consecutive misses signal early stop.
    pub fn gate_and_maybe_rollback(
        &mut self,
        cycle_index: usize,
        tail: f64,
        bank: &SkillBank,
        snapshots: &mut SnapshotStore,
    ) -> GateDecision {
        let improved = self.best.is_none_or(|(_, best, _)| tail > best);
        if improved {
            let id = snapshots.snapshot(bank);
            self.best = Some((cycle_index, tail, id));
            self.non_improving = 0;
        } else {
            self.non_improving += 1;
        }
        let (best_cycle, best_tail, best_snapshot) = self.best.expect("set above");
        GateDecision {
            improved,
            rollback_to: (!improved).then_some(best_snapshot),
            early_stop: self.non_improving >= self.patience,
            best_snapshot,
            best_cycle,
            best_tail,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleReport {
    pub cycle_index: usize,
    pub steps: usize,
    pub mean_reward: f64,
    pub tail_mean_reward: f64,
    /// Version of the bank the cycle trained on.
    pub bank_version: u64,
    /// Best snapshot after gating this cycle.
    pub snapshot_id: SnapshotId,
    pub rolled_back: bool,
    pub early_stop: bool,
    /// Version of the bank the next cycle will use.
    pub next_bank_version: u64,
    pub proposal_summary: Option<String>,
    pub proposal_changes: Vec<String>,
    pub designer_warnings: Vec<String>,
    pub failed_spans: usize,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::executor::{ScriptConfig, ScriptRule, ScriptedBackend};

    fn obs(id: &str, reward: f64) -> CaseObservation {
        CaseObservation {
            query_id: id.into(),
            query: format!("question {id}"),
            query_embedding: EmbeddingVector::new(vec![1.0, 0.0]).unwrap(),
            ground_truth: "gold".into(),
            prediction: "wrong".into(),
            retrieved_ids: vec![],
            retrieved_memories: vec![],
            reward,
        }
    }

    fn case(id: &str, reward: f64, count: u32, step: u64, emb: [f64; 2]) -> HardCase {
        HardCase {
            query_id: id.into(),
            query: id.into(),
            query_embedding: EmbeddingVector::new(emb.to_vec()).unwrap(),
            ground_truth: String::new(),
            prediction: String::new(),
            retrieved_ids: vec![],
            retrieved_memories: vec![],
            reward,
            failure_count: count,
            last_seen_step: step,
        }
    }

    #[test]
    fn counter_success_and_threshold() {
        let mut b = HardCaseBuffer::new(10, 100, 0.5);
        for s in 0..3 {
            b.record_case(obs("q", 0.0), s);
        }
        assert_eq!(b.len(), 1);
        assert_eq!(b.get("q").unwrap().failure_count, 3);
        b.record_case(obs("q", 0.9), 4);
        assert!(b.is_empty());
        b.record_case(obs("edge", 0.5), 5);
        assert!(b.is_empty());
    }

    #[test]
    fn expire_by_age_and_capacity() {
        let mut b = HardCaseBuffer::new(10, 100, 0.5);
        b.record_case(obs("old", 0.0), 0);
        let ev = b.expire(150);
        assert_eq!(ev.len(), 1);
        assert!(b.is_empty());
        assert!(b.expire(150).is_empty());

        let mut b = HardCaseBuffer::new(3, 1000, 0.5);
        // difficulties 0.5, 1.0, 2.0
        b.record_case(obs("a", 0.0), 1);
        b.record_case(obs("b", 0.0), 1);
        b.record_case(obs("b", 0.0), 1);
        b.record_case(obs("c", 0.0), 1);
        b.cases.get_mut("a").unwrap().reward = 0.5;
        b.cases.get_mut("b").unwrap().reward = 0.5;
        b.cases.get_mut("b").unwrap().failure_count = 2;
        b.cases.get_mut("c").unwrap().failure_count = 2;
        b.capacity = 2;
        let ev = b.expire(2);
        assert_eq!(ev.iter().map(|c| c.query_id.as_str()).collect::<Vec<_>>(), ["a"]);
    }

    #[test]
    fn difficulty_formula() {
        assert_eq!(difficulty(0.5, 2), 1.0);
        assert_eq!(difficulty(1.0, 7), 0.0);
        assert_eq!(difficulty(0.0, 3), 3.0);
    }

    #[test]
    fn clustering_edges() {
        let cases = vec![case("a", 0.0, 1, 0, [1.0, 0.0]), case("b", 0.0, 1, 0, [0.0, 1.0])];
        let c = cluster_cases(&cases, 4, 1);
        assert_eq!(c.len(), 2);
        assert!(c.iter().all(|x| x.len() == 1));
        let c = cluster_cases(&cases, 1, 1);
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].len(), 2);
    }

    #[test]
    fn kmeans_matches_exhaustive_two_partition() {
        let pts: Vec<[f64; 2]> = vec![
            [0.0, 0.1], [0.2, -0.1], [-0.1, 0.0], [0.1, 0.2], [0.05, -0.2],
            [5.0, 5.1], [5.2, 4.9], [4.9, 5.0], [5.1, 5.2],
        ];
        let refs: Vec<&[f64]> = pts.iter().map(|p| p.as_slice()).collect();
        let labels = kmeans(&refs, 2, 7);

        let sse = |mask: u32| {
            let mut total = 0.0;
            for side in [0, 1] {
                let members: Vec<&[f64; 2]> = pts
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| (mask >> i) & 1 == side)
                    .map(|(_, p)| p)
                    .collect();
                if members.is_empty() {
                    return f64::INFINITY;
                }
                let n = members.len() as f64;
                let c = [
                    members.iter().map(|p| p[0]).sum::<f64>() / n,
                    members.iter().map(|p| p[1]).sum::<f64>() / n,
                ];
                total += members.iter().map(|p| sq_dist(*p, &c)).sum::<f64>();
            }
            total
        };
        let best = (1..(1u32 << pts.len()) - 1)
            .min_by(|a, b| sse(*a).total_cmp(&sse(*b)))
            .unwrap();
        for i in 0..pts.len() {
            for j in 0..pts.len() {
                let same_oracle = ((best >> i) & 1) == ((best >> j) & 1);
                assert_eq!(labels[i] == labels[j], same_oracle);
            }
        }
    }

    #[test]
    fn representatives_ranking_and_round_robin() {
        let cl = vec![vec![
            case("x1", 0.0, 1, 0, [1.0, 0.0]),
            case("x3", 0.0, 3, 0, [1.0, 0.0]),
            case("x2", 0.0, 2, 0, [1.0, 0.0]),
        ]];
        let reps = select_representatives(&cl, 2, 8);
        assert_eq!(reps.iter().map(|c| c.query_id.as_str()).collect::<Vec<_>>(), ["x3", "x2"]);

        let two = vec![
            vec![case("a1", 0.0, 3, 0, [1.0, 0.0]), case("a2", 0.0, 2, 0, [1.0, 0.0])],
            vec![case("b1", 0.0, 1, 0, [0.0, 1.0])],
        ];
        let reps = select_representatives(&two, 2, 2);
        assert_eq!(reps.iter().map(|c| c.query_id.as_str()).collect::<Vec<_>>(), ["a1", "b1"]);
    }

    #[test]
    fn tail_mean_examples() {
        assert_eq!(tail_mean_reward(&[0.0, 0.0, 0.0, 1.0], 4).unwrap(), 1.0);
        assert_eq!(tail_mean_reward(&[0.3; 10], 10).unwrap(), 0.3);
        assert!(tail_mean_reward(&[0.3; 3], 4).is_err());
        // ceil(10/4) = 3
        let r: Vec<f64> = (0..10).map(f64::from).collect();
        assert_eq!(tail_mean_reward(&r, 10).unwrap(), 8.0);
    }

    #[test]
    fn gate_rolls_back_and_stops() {
        let bank = SkillBank::init_primitives();
        let mut store = SnapshotStore::new();
        let mut g = Gate::new(3);
        let d1 = g.gate_and_maybe_rollback(1, 0.5, &bank, &mut store);
        assert!(d1.improved && d1.rollback_to.is_none());
        let d2 = g.gate_and_maybe_rollback(2, 0.7, &bank, &mut store);
        assert!(d2.improved);
        let d3 = g.gate_and_maybe_rollback(3, 0.6, &bank, &mut store);
        assert_eq!(d3.rollback_to, Some(d2.best_snapshot));
        assert_eq!(d3.best_cycle, 2);

        let mut g = Gate::new(3);
        let mut store = SnapshotStore::new();
        let tails = [0.5, 0.4, 0.4, 0.4];
        let mut stops = Vec::new();
        for (i, t) in tails.iter().enumerate() {
            let d = g.gate_and_maybe_rollback(i + 1, *t, &bank, &mut store);
            stops.push(d.early_stop);
            if d.early_stop {
                assert_eq!(d.best_cycle, 1);
            }
        }
        assert_eq!(stops, [false, false, false, true]);
    }

    fn scripted(rules: Vec<ScriptRule>) -> ScriptedBackend {
        ScriptedBackend::new(ScriptConfig {
            rules,
            default: "I cannot help with that.".into(),
        })
        .unwrap()
    }

    const ANALYSIS_JSON: &str = r#"{"failure_patterns":[{"pattern_name":"dates","affected_cases":[1],"root_cause":"storage_failure","explanation":"x","potential_fix":"y"}],"recommendations":[{"action":"add_new_operation","target_operation":null,"rationale":"z","priority":"high"}],"summary":"dates are never stored"}"#;

    fn add_json(names: &[&str]) -> String {
        let changes: Vec<String> = names
            .iter()
            .map(|n| format!(r#"{{"action":"add_new","new_operation":{{"name":"{n}","description":"capture {n}","instruction_template":"Skill: {n}\nAction type: INSERT only.","update_type":"insert","reasoning":"r"}}}}"#))
            .collect();
        format!(r#"{{"action":"apply_changes","summary":"s","changes":[{}]}}"#, changes.join(","))
    }

    fn buffer_with_case() -> HardCaseBuffer {
        let mut b = HardCaseBuffer::new(10, 100, 0.5);
        b.record_case(obs("q1", 0.0), 1);
        b
    }

    #[test]
    fn evolution_parses_canned_add() {
        let backend = scripted(vec![
            ScriptRule::Canned {
                when_all: vec!["You are an expert analyst".into()],
                when_none: vec![],
                respond: ANALYSIS_JSON.into(),
            },
            ScriptRule::Canned {
                when_all: vec!["Based on the failure analysis".into()],
                when_none: vec![],
                respond: format!("```json\n{}\n```", add_json(&["capture_dates"])),
            },
        ]);
        let bank = SkillBank::init_primitives();
        let (p, rec) = run_evolution(&bank, &buffer_with_case(), &backend, &DesignerConfig::default(), &[]).unwrap();
        assert_eq!(p.action, ProposalAction::ApplyChanges);
        assert_eq!(p.changes.len(), 1);
        assert_eq!(p.changes[0].target(), "capture_dates");
        assert!(rec.warnings.is_empty());
        assert_eq!(rec.analysis.unwrap().summary, "dates are never stored");
    }

    #[test]
    fn evolution_prose_twice_is_no_change() {
        let backend = scripted(vec![]);
        let bank = SkillBank::init_primitives();
        let (p, rec) = run_evolution(&bank, &buffer_with_case(), &backend, &DesignerConfig::default(), &[]).unwrap();
        assert!(p.is_no_change());
        assert_eq!(rec.warnings.len(), 2);
        assert_eq!(rec.analysis_responses.len(), 2);
    }

    #[test]
    fn evolution_on_empty_buffer_makes_no_calls() {
        let backend = scripted(vec![]);
        let bank = SkillBank::init_primitives();
        let empty = HardCaseBuffer::new(4, 10, 0.5);
        let (p, rec) = run_evolution(&bank, &empty, &backend, &DesignerConfig::default(), &[]).unwrap();
        assert!(p.is_no_change());
        assert!(rec.analysis_prompt.is_none());
    }

    #[test]
    fn too_many_changes_strict_and_lenient() {
        let bank = SkillBank::init_primitives();
        let text = add_json(&["a_one", "a_two", "a_three", "a_four"]);
        let mut w = Vec::new();
        let p = parse_proposal(&text, &bank, 3, true, &mut w).unwrap();
        assert!(p.is_no_change());
        assert_eq!(w.len(), 1);
        let mut w = Vec::new();
        let p = parse_proposal(&text, &bank, 3, false, &mut w).unwrap();
        assert_eq!(p.changes.len(), 3);
    }

    #[test]
    fn invalid_entries_dropped_individually() {
        let bank = SkillBank::init_primitives();
        let text = r#"{"action":"apply_changes","summary":"s","changes":[
            {"action":"add_new","new_operation":{"name":"purge","description":"d","instruction_template":"t","update_type":"delete"}},
            {"action":"refine_existing","refined_operation":{"name":"insert","changes":{"description":"better"}}},
            {"action":"refine_existing","refined_operation":{"name":"insert","changes":{"description":"again"}}},
            {"action":"refine_existing","refined_operation":{"name":"ghost","changes":{"description":"x"}}}
        ]}"#;
        let mut w = Vec::new();
        let p = parse_proposal(text, &bank, 3, true, &mut w).unwrap();
        assert_eq!(p.changes.len(), 1);
        assert_eq!(w.len(), 3);
        bank.check_proposal(&p).unwrap();
    }

    #[test]
    fn prompts_fill_every_slot() {
        let bank = SkillBank::init_primitives();
        let cases = vec![case("q", 0.0, 2, 3, [1.0, 0.0])];
        let a = build_analysis_prompt(&bank, "none", &cases, 3);
        assert!(a.contains("## Failure Cases (1 cases)\n### Case 1\n"));
        assert!(a.contains("Provide up to 3 recommendations"));
        let r = build_refinement_prompt("{}", &bank, "none", 3);
        assert!(r.contains("MUST be less than 3\n"));
        for p in [&a, &r] {
            for slot in ["{operation_bank", "{evolution_feedback}", "{max_changes}", "{analysis_feedback}", "{failure_cases"] {
                assert!(!p.contains(slot), "unfilled {slot}");
            }
        }
    }
}
