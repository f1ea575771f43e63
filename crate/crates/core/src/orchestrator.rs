//! The closed training loop: episodes, PPO batches, evolution cycles,
//! gating, plus read-only evaluation and replay.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{BackendConfig, ControllerMode, EmbedderConfig, RunConfig};
use crate::controller::{
    exploration_threshold, select, state_features, ControllerParams, SelectionMode, SkillEmbeddings,
};
use crate::designer::{
    run_evolution, tail_mean_reward, AnalysisRecord, CycleReport, DesignerConfig, FeedbackEntry, Gate,
    HardCaseBuffer,
};
use crate::embedding::{Embedder, HashEmbedder, RemoteEmbedder};
use crate::environment::{
    evaluate_memory, load_traces, make_synthetic, make_synthetic_traces, EvalConfig, QueryRecord, SyntheticWorld,
    Trace,
};
use crate::error::{Error, Result};
use crate::executor::{execute_span, format_action_blocks, CompletionParams, HttpChatBackend, LlmBackend, ScriptedBackend};
use crate::memory_bank::MemoryBank;
use crate::skill_bank::{SkillBank, SnapshotStore};
use crate::trainer::{ControllerCheckpoint, Trainer, Transition, UpdateStats};

/// Everything a run talks to.
#[derive(Clone)]
pub struct Backends {
    pub executor: Arc<dyn LlmBackend>,
    pub answer: Arc<dyn LlmBackend>,
    pub designer: Arc<dyn LlmBackend>,
    pub judge: Option<Arc<dyn LlmBackend>>,
    pub embedder: Arc<dyn Embedder>,
}

/// Traces and starting bank resolved from a config.
pub struct Resolved {
    pub backends: Backends,
    pub train: Vec<Trace>,
    pub eval: Vec<Trace>,
    pub initial_bank: SkillBank,
    pub world: Option<SyntheticWorld>,
}

fn build_backend(cfg: &BackendConfig, synthetic: Option<&crate::executor::ScriptConfig>, role: &str) -> Result<Arc<dyn LlmBackend>> {
    Ok(match cfg {
        BackendConfig::Synthetic => {
            let script = synthetic.ok_or_else(|| Error::Config(format!("{role}: synthetic backend needs [synthetic]")))?;
            Arc::new(ScriptedBackend::new(script.clone())?)
        }
        BackendConfig::Scripted { path, rules } => match (path, rules) {
            (Some(p), None) => Arc::new(ScriptedBackend::from_file(p).map_err(|e| Error::Config(format!("{role}: {e}")))?),
            (None, Some(r)) => Arc::new(ScriptedBackend::new(r.clone())?),
            _ => return Err(Error::Config(format!("{role}: scripted backend needs exactly one of path or rules"))),
        },
        BackendConfig::Http(h) => Arc::new(HttpChatBackend::new(h.clone())?),
    })
}

pub fn build_embedder(cfg: &EmbedderConfig) -> Result<Arc<dyn Embedder>> {
    Ok(match cfg {
        EmbedderConfig::Hash { dim } => Arc::new(HashEmbedder::new(*dim)?),
        EmbedderConfig::Remote(r) => Arc::new(RemoteEmbedder::new(r.clone())?),
    })
}

/// Loads traces, builds backends, and picks the starting bank: an explicit
/// bank file, else the synthetic world's bank, else the primitives.
pub fn resolve(config: &RunConfig) -> Result<Resolved> {
    config.validate()?;
    let world = config.synthetic.as_ref().map(make_synthetic).transpose()?;
    let w = world.as_ref();
    let backends = Backends {
        executor: build_backend(&config.backends.executor, w.map(|w| &w.executor_script), "executor")?,
        answer: build_backend(&config.backends.answer, w.map(|w| &w.answer_script), "answer")?,
        designer: build_backend(&config.backends.designer, w.map(|w| &w.designer_script), "designer")?,
        judge: config
            .backends
            .judge
            .as_ref()
            .map(|j| build_backend(j, None, "judge"))
            .transpose()?,
        embedder: build_embedder(&config.embedder)?,
    };
    let load = |p: &Path| {
        load_traces(p, config.data.format, config.span_tokens, config.data.chunk_mode)
            .map_err(|e| Error::Config(format!("{}: {e}", p.display())))
    };
    let train = match (&config.data.train, w) {
        (Some(p), _) => load(p)?,
        (None, Some(w)) => w.traces.clone(),
        (None, None) => return Err(Error::Config("no training traces".into())),
    };
    let eval = match (&config.data.eval, &config.synthetic) {
        (Some(p), _) => load(p)?,
        (None, Some(spec)) => {
            let mut spec = spec.clone();
            if let Some(n) = config.synthetic_eval_traces {
                spec.traces = n;
            }
            let seed = config.synthetic_eval_seed.unwrap_or(spec.seed.wrapping_add(1_000_003));
            make_synthetic_traces(&spec, seed)?.0
        }
        (None, None) => Vec::new(),
    };
    for t in &train {
        if t.queries.is_empty() {
            return Err(Error::Config(format!("training trace {} has no queries", t.trace_id)));
        }
    }
    let initial_bank = match (&config.initial_bank, w) {
        (Some(p), _) => read_bank(p)?,
        (None, Some(w)) => w.initial_bank.clone(),
        (None, None) => SkillBank::init_primitives(),
    };
    Ok(Resolved {
        backends,
        train,
        eval,
        initial_bank,
        world,
    })
}

pub fn read_bank(path: &Path) -> Result<SkillBank> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    SkillBank::from_json(&text)
}

// ---------------------------------------------------------------------------
// Episodes

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpanLog {
    pub span_index: usize,
    pub selected: Vec<String>,
    pub joint_log_prob: f64,
    pub actions: String,
    pub inserted: usize,
    pub updated: usize,
    pub deleted: usize,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct EpisodeResult {
    pub trace_id: String,
    pub reward: f64,
    pub transitions: Vec<Transition>,
    pub records: Vec<QueryRecord>,
    pub spans: Vec<SpanLog>,
    pub memory: MemoryBank,
}

/// Per-call knobs of one episode.
pub struct EpisodeSpec<'a> {
    pub k: usize,
    pub mode: SelectionMode,
    pub exploration: Option<(&'a [usize], f64)>,
    pub retrieve_r: usize,
    pub max_actions: usize,
    pub step: u64,
    pub eval: &'a EvalConfig,
}

/// Builds a memory bank for `trace` span by span, then scores it on the
/// trace's queries. The reward lands on the final transition.
pub fn run_episode(
    trace: &Trace,
    bank: &SkillBank,
    skill_emb: &SkillEmbeddings,
    params: &ControllerParams,
    backends: &Backends,
    spec: &EpisodeSpec<'_>,
    rng: &mut ChaCha8Rng,
) -> Result<EpisodeResult> {
    let embedder = backends.embedder.as_ref();
    let mut memory = MemoryBank::new();
    let mut transitions = Vec::with_capacity(trace.spans.len());
    let mut spans = Vec::with_capacity(trace.spans.len());
    let exec_params = CompletionParams::default();
    for span in &trace.spans {
        let span_emb = embedder.embed(&span.text)?.normalize();
        let retrieved = memory.retrieve(&span_emb, spec.retrieve_r)?;
        let mem_embs: Vec<&crate::embedding::EmbeddingVector> = retrieved
            .items
            .iter()
            .filter_map(|r| memory.get(r.item_id).map(|m| &m.embedding))
            .collect();
        let state = state_features(&span_emb, &mem_embs)?;
        let step = select(params, state, skill_emb, spec.k, spec.mode, spec.exploration, rng)?;
        let skills: Vec<&crate::skill_bank::Skill> = step.action.iter().map(|&i| &bank.skills[i]).collect();
        let outcome = execute_span(
            &span.text,
            &mut memory,
            &retrieved,
            &skills,
            backends.executor.as_ref(),
            &exec_params,
            embedder,
            spec.step,
            spec.max_actions,
        )?;
        let mut warnings = outcome.parse_warnings;
        warnings.extend(outcome.report.warnings.iter().cloned());
        spans.push(SpanLog {
            span_index: span.index,
            selected: skills.iter().map(|s| s.name.clone()).collect(),
            joint_log_prob: step.joint_log_prob,
            actions: format_action_blocks(&outcome.actions),
            inserted: outcome.report.inserted.len(),
            updated: outcome.report.updated.len(),
            deleted: outcome.report.deleted.len(),
            warnings,
        });
        let behavior = step.joint_log_prob;
        transitions.push(Transition {
            step,
            reward: 0.0,
            done: false,
            behavior_log_prob: behavior,
        });
    }
    let (reward, records) = if trace.queries.is_empty() {
        (0.0, Vec::new())
    } else {
        evaluate_memory(
            &memory,
            &trace.queries,
            embedder,
            backends.answer.as_ref(),
            backends.judge.as_deref(),
            spec.eval,
        )?
    };
    if let Some(last) = transitions.last_mut() {
        last.reward = reward;
        last.done = true;
    }
    Ok(EpisodeResult {
        trace_id: trace.trace_id.clone(),
        reward,
        transitions,
        records,
        spans,
        memory,
    })
}

/// Independent stream per episode so batches can run on any number of
/// workers without changing results.
pub fn episode_rng(seed: u64, salt: u64, episode: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ salt);
    rng.set_stream(episode);
    rng
}

const TRAIN_SALT: u64 = 0x5452_4149_4e00_0000;
const EVAL_SALT: u64 = 0x4556_414c_0000_0000;

fn par_map<T: Send, F>(workers: usize, n: usize, f: F) -> Result<Vec<T>>
where
    F: Fn(usize) -> Result<T> + Sync + Send,
{
    if workers <= 1 || n <= 1 {
        return (0..n).map(f).collect();
    }
    use rayon::prelude::*;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    pool.install(|| (0..n).into_par_iter().map(f).collect())
}

// ---------------------------------------------------------------------------
// Logs

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub mean_reward: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub ratio_clip_frac: f64,
    pub bank_version: u64,
}

/// Designer audit entry, one per evolution attempt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvolutionLog {
    pub cycle_index: usize,
    pub round: u32,
    pub base_version: u64,
    pub new_version: Option<u64>,
    pub proposal: crate::designer::EvolutionProposal,
    pub record: AnalysisRecord,
    pub apply_error: Option<String>,
}

pub struct RunLogs {
    dir: PathBuf,
    steps: File,
    cycles: File,
    evolution: File,
}

fn append(path: &Path) -> Result<File> {
    OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))
}

fn write_line<T: Serialize>(file: &mut File, path: &Path, value: &T) -> Result<()> {
    let line = serde_json::to_string(value)?;
    writeln!(file, "{line}").map_err(|e| Error::io(path, e))
}

impl RunLogs {
    pub fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir.join("banks")).map_err(|e| Error::io(dir, e))?;
        for f in ["steps.jsonl", "cycles.jsonl", "evolution.jsonl"] {
            let p = dir.join(f);
            if p.exists() {
                fs::remove_file(&p).map_err(|e| Error::io(&p, e))?;
            }
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            steps: append(&dir.join("steps.jsonl"))?,
            cycles: append(&dir.join("cycles.jsonl"))?,
            evolution: append(&dir.join("evolution.jsonl"))?,
        })
    }

    pub fn step(&mut self, s: &StepLog) -> Result<()> {
        write_line(&mut self.steps, &self.dir.join("steps.jsonl"), s)
    }

    pub fn cycle(&mut self, c: &CycleReport) -> Result<()> {
        write_line(&mut self.cycles, &self.dir.join("cycles.jsonl"), c)
    }

    pub fn evolution(&mut self, e: &EvolutionLog) -> Result<()> {
        write_line(&mut self.evolution, &self.dir.join("evolution.jsonl"), e)
    }

    pub fn bank(&self, bank: &SkillBank) -> Result<()> {
        write_file(&self.dir.join("banks").join(format!("v{}.json", bank.version)), &bank.to_json())
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }
}

pub fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// Training

/// Mutable state of a training run between cycles.
pub struct Run {
    pub config: RunConfig,
    pub backends: Backends,
    pub traces: Vec<Trace>,
    pub bank: SkillBank,
    pub params: ControllerParams,
    pub trainer: Trainer,
    pub buffer: HardCaseBuffer,
    pub gate: Gate,
    pub snapshots: SnapshotStore,
    pub skill_emb: SkillEmbeddings,
    pub global_step: u64,
    pub round: u32,
    pub last_evolve_step: u64,
    pub next_version: u64,
    pub feedback: Vec<FeedbackEntry>,
    pub cycle_index: usize,
    pub reports: Vec<CycleReport>,
    pub step_logs: Vec<StepLog>,
    pub stopped: bool,
    eval_config: EvalConfig,
    logs: Option<RunLogs>,
}

impl Run {
    pub fn new(config: RunConfig, backends: Backends, traces: Vec<Trace>, bank: SkillBank) -> Result<Self> {
        config.validate()?;
        if traces.is_empty() {
            return Err(Error::Config("no training traces".into()));
        }
        bank.validate()?;
        let dim = backends.embedder.dim();
        let params = ControllerParams::init(dim, config.hidden, config.seed)?;
        let mut tc = config.trainer.clone();
        tc.seed = tc.seed.wrapping_add(config.seed);
        let trainer = Trainer::new(tc, params.len())?;
        let skill_emb = SkillEmbeddings::compute(&bank, backends.embedder.as_ref())?;
        let eval_config = EvalConfig {
            retrieve_r: config.retrieve_r,
            format: config.answer_format,
            metric: config.metric,
            ..EvalConfig::default()
        };
        Ok(Self {
            buffer: HardCaseBuffer::new(config.buffer_capacity, config.buffer_max_age, config.fail_threshold),
            gate: Gate::new(config.patience),
            snapshots: SnapshotStore::new(),
            next_version: bank.version + 1,
            config,
            backends,
            traces,
            bank,
            params,
            trainer,
            skill_emb,
            global_step: 0,
            round: 0,
            last_evolve_step: 0,
            feedback: Vec::new(),
            cycle_index: 0,
            reports: Vec::new(),
            step_logs: Vec::new(),
            stopped: false,
            eval_config,
            logs: None,
        })
    }

    /// Mirrors logs, banks and checkpoints into `dir`.
    pub fn with_logs(mut self, dir: &Path) -> Result<Self> {
        let logs = RunLogs::create(dir)?;
        logs.bank(&self.bank)?;
        write_file(&dir.join("run_config.toml"), &self.config.to_toml())?;
        self.logs = Some(logs);
        Ok(self)
    }

    fn selection_mode(&self) -> SelectionMode {
        match self.config.controller {
            ControllerMode::Learned => SelectionMode::Sample,
            ControllerMode::Uniform => SelectionMode::Uniform,
        }
    }

    /// Runs one batch of episodes with fixed parameters and applies one PPO
    /// update. Returns the episode results in episode order.
    pub fn run_batch(&mut self, n_episodes: usize) -> Result<(Vec<EpisodeResult>, UpdateStats)> {
        let new_positions = if self.round > 0 {
            self.bank.added_in_round(self.round)
        } else {
            Vec::new()
        };
        let first = self.global_step;
        let mode = self.selection_mode();
        let results = {
            let this = &*self;
            par_map(this.config.workers, n_episodes, |i| {
                let episode = first + i as u64;
                let mut rng = episode_rng(this.config.seed, TRAIN_SALT, episode);
                let trace = &this.traces[rng.random_range(0..this.traces.len())];
                let tau = exploration_threshold(
                    episode.saturating_sub(this.last_evolve_step),
                    this.config.tau0,
                    this.config.t_explore,
                );
                let exploration = (!new_positions.is_empty() && tau > 0.0).then_some((new_positions.as_slice(), tau));
                let spec = EpisodeSpec {
                    k: this.config.k_train,
                    mode,
                    exploration,
                    retrieve_r: this.config.retrieve_r,
                    max_actions: this.config.max_actions_per_span,
                    step: episode,
                    eval: &this.eval_config,
                };
                run_episode(trace, &this.bank, &this.skill_emb, &this.params, &this.backends, &spec, &mut rng)
            })?
        };
        let stats = if self.config.controller == ControllerMode::Learned {
            let episodes: Vec<Vec<Transition>> = results.iter().map(|r| r.transitions.clone()).collect();
            self.trainer.update(&mut self.params, &episodes)?
        } else {
            UpdateStats::default()
        };
        for (i, r) in results.iter().enumerate() {
            let step = first + i as u64;
            for rec in &r.records {
                let mut obs = rec.to_observation();
                obs.query_id = format!("{}/{}", r.trace_id, rec.query_id);
                self.buffer.record_case(obs, step);
            }
            let log = StepLog {
                step,
                mean_reward: r.reward,
                policy_loss: stats.policy_loss,
                value_loss: stats.value_loss,
                entropy: stats.entropy,
                ratio_clip_frac: stats.clip_fraction,
                bank_version: self.bank.version,
            };
            if let Some(l) = self.logs.as_mut() {
                l.step(&log)?;
            }
            self.step_logs.push(log);
        }
        self.global_step += n_episodes as u64;
        self.buffer.expire(self.global_step);
        Ok((results, stats))
    }

    /// One training cycle on the current bank, then gating and (unless
    /// stopping) one designer round.
    pub fn run_cycle(&mut self) -> Result<CycleReport> {
        if self.stopped {
            return Err(Error::InvalidArgument("run already stopped".into()));
        }
        self.cycle_index += 1;
        let cycle_len = self.config.evolve_every;
        let trained_version = self.bank.version;
        let mut rewards = Vec::with_capacity(cycle_len);
        let mut warned_spans = 0usize;
        while rewards.len() < cycle_len {
            let n = self.config.trainer.batch_episodes.min(cycle_len - rewards.len());
            let (results, _) = self.run_batch(n)?;
            for r in &results {
                rewards.push(r.reward);
                warned_spans += r.spans.iter().filter(|s| !s.warnings.is_empty()).count();
            }
        }
        let tail = tail_mean_reward(&rewards, cycle_len)?;
        let mean = rewards.iter().sum::<f64>() / rewards.len() as f64;

        let decision = self
            .gate
            .gate_and_maybe_rollback(self.cycle_index, tail, &self.bank, &mut self.snapshots);
        if let Some(last) = self.feedback.last_mut() {
            if last.outcome.is_none() {
                last.outcome = Some(tail);
                last.kept = Some(decision.improved);
            }
        }
        let rolled_back = decision.rollback_to.is_some() && self.bank != self.snapshots.restore(decision.best_snapshot)?;
        if decision.rollback_to.is_some() || decision.early_stop {
            self.bank = self.snapshots.restore(decision.best_snapshot)?;
        }

        let mut report = CycleReport {
            cycle_index: self.cycle_index,
            steps: cycle_len,
            mean_reward: mean,
            tail_mean_reward: tail,
            bank_version: trained_version,
            snapshot_id: decision.best_snapshot,
            rolled_back,
            early_stop: decision.early_stop,
            next_bank_version: self.bank.version,
            proposal_summary: None,
            proposal_changes: Vec::new(),
            designer_warnings: Vec::new(),
            failed_spans: warned_spans,
        };

        if decision.early_stop {
            self.stopped = true;
        } else if self.config.designer_enabled {
            self.evolve(&mut report)?;
        }
        self.skill_emb.refresh(&self.bank, self.backends.embedder.as_ref())?;
        report.next_bank_version = self.bank.version;
        if let Some(l) = self.logs.as_mut() {
            l.cycle(&report)?;
        }
        self.save_checkpoint()?;
        self.reports.push(report.clone());
        Ok(report)
    }

    fn designer_config(&self) -> DesignerConfig {
        DesignerConfig {
            max_changes: self.config.max_changes,
            cluster_k: self.config.cluster_k,
            per_cluster: self.config.per_cluster,
            max_cases: self.config.max_cases,
            strict_max_changes: self.config.strict_max_changes,
            seed: self.config.seed.wrapping_add(self.cycle_index as u64),
            ..DesignerConfig::default()
        }
    }

    fn evolve(&mut self, report: &mut CycleReport) -> Result<()> {
        let dc = self.designer_config();
        let (proposal, record) = run_evolution(
            &self.bank,
            &self.buffer,
            self.backends.designer.as_ref(),
            &dc,
            &self.feedback,
        )?;
        report.designer_warnings = record.warnings.clone();
        report.proposal_summary = Some(proposal.summary.clone());
        let base_version = self.bank.version;
        let mut log = EvolutionLog {
            cycle_index: self.cycle_index,
            round: self.round + 1,
            base_version,
            new_version: None,
            proposal: proposal.clone(),
            record,
            apply_error: None,
        };
        if !proposal.is_no_change() {
            let round = self.round + 1;
            match self
                .bank
                .apply_proposal_as(&proposal, round, self.global_step, self.next_version)
            {
                Ok(next) => {
                    self.round = round;
                    self.next_version += 1;
                    self.last_evolve_step = self.global_step;
                    report.proposal_changes = proposal.changes.iter().map(|c| c.target().to_string()).collect();
                    self.feedback.push(FeedbackEntry {
                        round,
                        summary: proposal.summary.clone(),
                        changes: report.proposal_changes.clone(),
                        outcome: None,
                        kept: None,
                    });
                    log.new_version = Some(next.version);
                    self.bank = next;
                    if let Some(l) = self.logs.as_ref() {
                        l.bank(&self.bank)?;
                    }
                }
                Err(e) => {
                    report.designer_warnings.push(format!("proposal rejected: {e}"));
                    log.apply_error = Some(e.to_string());
                }
            }
        }
        if let Some(l) = self.logs.as_mut() {
            l.evolution(&log)?;
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> ControllerCheckpoint {
        ControllerCheckpoint::capture(&self.params, &self.trainer)
    }

    /// Writes the controller checkpoint and current bank when logging.
    pub fn save_checkpoint(&self) -> Result<()> {
        if let Some(l) = self.logs.as_ref() {
            write_file(
                &l.dir().join("controller.json"),
                &serde_json::to_string_pretty(&self.checkpoint())?,
            )?;
            write_file(&l.dir().join("current_bank.json"), &self.bank.to_json())?;
        }
        Ok(())
    }

    /// Cycles until early stop or `max_cycles`; leaves the best snapshot as
    /// the active bank.
    pub fn train(&mut self) -> Result<TrainSummary> {
        while !self.stopped && self.cycle_index < self.config.max_cycles {
            self.run_cycle()?;
        }
        if let Some((cycle, tail, id)) = self.gate.best {
            self.bank = self.snapshots.restore(id)?;
            self.skill_emb.refresh(&self.bank, self.backends.embedder.as_ref())?;
            if let Some(l) = self.logs.as_ref() {
                write_file(&l.dir().join("best_bank.json"), &self.bank.to_json())?;
            }
            self.save_checkpoint()?;
            return Ok(TrainSummary {
                cycles: self.reports.clone(),
                best_cycle: cycle,
                best_tail: tail,
                final_bank: self.bank.clone(),
                early_stopped: self.stopped,
            });
        }
        Err(Error::InvalidArgument("max_cycles is 0".into()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub cycles: Vec<CycleReport>,
    pub best_cycle: usize,
    pub best_tail: f64,
    pub final_bank: SkillBank,
    pub early_stopped: bool,
}

/// Resolves `config`, trains, and writes artifacts under `output_dir`.
/// On a runtime failure the controller checkpoint is still written.
pub fn train(config: &RunConfig) -> Result<TrainSummary> {
    let resolved = resolve(config)?;
    let mut run = Run::new(config.clone(), resolved.backends, resolved.train, resolved.initial_bank)?
        .with_logs(&config.output_dir)?;
    match run.train() {
        Ok(s) => Ok(s),
        Err(e) => {
            run.save_checkpoint().ok();
            Err(e)
        }
    }
}

// ---------------------------------------------------------------------------
// Evaluation and replay

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEval {
    pub trace_id: String,
    pub reward: f64,
    pub queries: usize,
    pub spans: Vec<SpanLog>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub bank_version: u64,
    pub selection: String,
    pub k: usize,
    pub traces: usize,
    pub mean_reward: f64,
    pub per_trace: Vec<TraceEval>,
}

/// Read-only evaluation: builds memory for each trace with greedy Top-K
/// under `params` (or uniform selection without a controller) and scores
/// the queries. `k` overrides the config's per-kind eval K.
pub fn evaluate(
    config: &RunConfig,
    backends: &Backends,
    bank: &SkillBank,
    params: Option<&ControllerParams>,
    traces: &[Trace],
    k: Option<usize>,
) -> Result<EvalReport> {
    if traces.is_empty() {
        return Err(Error::Config("no eval traces".into()));
    }
    let dim = backends.embedder.dim();
    let fallback;
    let (params, mode, selection) = match params {
        Some(p) => {
            if p.embed_dim != dim {
                return Err(Error::Config(format!(
                    "controller expects embedding dim {}, embedder has {dim}",
                    p.embed_dim
                )));
            }
            (p, SelectionMode::Greedy, "greedy")
        }
        None => {
            fallback = ControllerParams::init(dim, config.hidden, config.seed)?;
            (&fallback, SelectionMode::Uniform, "uniform")
        }
    };
    let skill_emb = SkillEmbeddings::compute(bank, backends.embedder.as_ref())?;
    let eval_config = EvalConfig {
        retrieve_r: config.retrieve_r,
        format: config.answer_format,
        metric: config.metric,
        ..EvalConfig::default()
    };
    let results = par_map(config.workers, traces.len(), |i| {
        let trace = &traces[i];
        let mut rng = episode_rng(config.seed, EVAL_SALT, i as u64);
        let spec = EpisodeSpec {
            k: k.unwrap_or_else(|| config.k_eval_for(trace.kind)),
            mode,
            exploration: None,
            retrieve_r: config.retrieve_r,
            max_actions: config.max_actions_per_span,
            step: 0,
            eval: &eval_config,
        };
        run_episode(trace, bank, &skill_emb, params, backends, &spec, &mut rng)
    })?;
    let per_trace: Vec<TraceEval> = results
        .into_iter()
        .zip(traces)
        .map(|(r, t)| TraceEval {
            trace_id: r.trace_id,
            reward: r.reward,
            queries: t.queries.len(),
            spans: r.spans,
        })
        .collect();
    let mean_reward = per_trace.iter().map(|t| t.reward).sum::<f64>() / per_trace.len() as f64;
    Ok(EvalReport {
        bank_version: bank.version,
        selection: selection.into(),
        k: k.unwrap_or(config.k_eval),
        traces: per_trace.len(),
        mean_reward,
        per_trace,
    })
}

/// Span-by-span action log of one trace under `bank`.
pub fn replay(
    config: &RunConfig,
    backends: &Backends,
    bank: &SkillBank,
    params: Option<&ControllerParams>,
    trace: &Trace,
    k: Option<usize>,
) -> Result<TraceEval> {
    let report = evaluate(config, backends, bank, params, std::slice::from_ref(trace), k)?;
    Ok(report.per_trace.into_iter().next().expect("one trace"))
}

pub fn load_checkpoint(path: &Path) -> Result<ControllerParams> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let ckpt: ControllerCheckpoint = serde_json::from_str(&text)?;
    ckpt.params()
}
