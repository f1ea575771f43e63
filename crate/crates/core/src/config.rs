//! Run configuration, read from TOML and overridden by command-line flags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::embedding::RemoteEmbedderConfig;
use crate::environment::{AnswerFormat, ChunkMode, RewardMetric, SyntheticSpec, TraceFormat};
use crate::error::{Error, Result};
use crate::executor::{HttpChatConfig, ScriptConfig};
use crate::trainer::TrainingConfig;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControllerMode {
    #[default]
    Learned,
    /// Uniformly random Top-K (ablation baseline).
    Uniform,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BackendConfig {
    /// The rules generated for the `[synthetic]` world.
    #[default]
    Synthetic,
    Scripted {
        #[serde(default)]
        path: Option<PathBuf>,
        #[serde(default)]
        rules: Option<ScriptConfig>,
    },
    Http(HttpChatConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EmbedderConfig {
    Hash { dim: usize },
    Remote(RemoteEmbedderConfig),
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        EmbedderConfig::Hash { dim: 64 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Trace file or directory of trace files.
    pub train: Option<PathBuf>,
    pub eval: Option<PathBuf>,
    pub format: TraceFormat,
    pub chunk_mode: ChunkMode,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendsConfig {
    pub executor: BackendConfig,
    pub answer: BackendConfig,
    pub designer: BackendConfig,
    pub judge: Option<BackendConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub k_train: usize,
    pub k_eval: usize,
    pub k_eval_trajectory: usize,
    pub span_tokens: usize,
    pub retrieve_r: usize,
    pub evolve_every: usize,
    pub max_changes: usize,
    pub tau0: f64,
    pub t_explore: u64,
    pub fail_threshold: f64,
    pub buffer_capacity: usize,
    pub buffer_max_age: u64,
    pub patience: u32,
    pub max_cycles: usize,
    pub max_actions_per_span: usize,
    pub hidden: usize,
    /// Episode worker threads; 1 runs inline.
    pub workers: usize,
    pub designer_enabled: bool,
    pub controller: ControllerMode,
    pub strict_max_changes: bool,
    pub cluster_k: usize,
    pub per_cluster: usize,
    pub max_cases: usize,
    pub metric: RewardMetric,
    pub answer_format: AnswerFormat,
    pub initial_bank: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub trainer: TrainingConfig,
    pub embedder: EmbedderConfig,
    pub backends: BackendsConfig,
    pub data: DataConfig,
    pub synthetic: Option<SyntheticSpec>,
    /// Seed of the held-out synthetic eval traces.
    pub synthetic_eval_seed: Option<u64>,
    pub synthetic_eval_traces: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            k_train: 3,
            k_eval: 7,
            k_eval_trajectory: 5,
            span_tokens: 512,
            retrieve_r: 20,
            evolve_every: 100,
            max_changes: 3,
            tau0: 0.3,
            t_explore: 50,
            fail_threshold: 0.5,
            buffer_capacity: 256,
            buffer_max_age: 300,
            patience: 3,
            max_cycles: 10,
            max_actions_per_span: 32,
            hidden: 64,
            workers: 1,
            designer_enabled: true,
            controller: ControllerMode::Learned,
            strict_max_changes: true,
            cluster_k: 4,
            per_cluster: 2,
            max_cases: 8,
            metric: RewardMetric::F1,
            answer_format: AnswerFormat::Locomo,
            initial_bank: None,
            output_dir: PathBuf::from("runs/latest"),
            trainer: TrainingConfig::default(),
            embedder: EmbedderConfig::default(),
            backends: BackendsConfig::default(),
            data: DataConfig::default(),
            synthetic: None,
            synthetic_eval_seed: None,
            synthetic_eval_traces: None,
        }
    }
}

/// Published defaults the run configuration must start from.
pub const DOCUMENTED_DEFAULTS: [(&str, f64); 8] = [
    ("k_train", 3.0),
    ("k_eval", 7.0),
    ("k_eval_trajectory", 5.0),
    ("span_tokens", 512.0),
    ("retrieve_r", 20.0),
    ("evolve_every", 100.0),
    ("max_changes", 3.0),
    ("tau0", 0.3),
];

pub const DOCUMENTED_T_EXPLORE: u64 = 50;

/// Startup check that the built-in defaults were not edited away from the
/// published values.
pub fn check_documented_defaults() -> Result<()> {
    let d = RunConfig::default();
    let actual = [
        d.k_train as f64,
        d.k_eval as f64,
        d.k_eval_trajectory as f64,
        d.span_tokens as f64,
        d.retrieve_r as f64,
        d.evolve_every as f64,
        d.max_changes as f64,
        d.tau0,
    ];
    for ((name, want), got) in DOCUMENTED_DEFAULTS.iter().zip(actual) {
        if got != *want {
            return Err(Error::Config(format!("default {name} is {got}, expected {want}")));
        }
    }
    if d.t_explore != DOCUMENTED_T_EXPLORE {
        return Err(Error::Config(format!(
            "default t_explore is {}, expected {DOCUMENTED_T_EXPLORE}",
            d.t_explore
        )));
    }
    Ok(())
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    /// Reads a config file; relative input paths inside it resolve against
    /// the file's directory. `output_dir` stays relative to the working
    /// directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        if let Some(base) = path.parent() {
            cfg.rebase(base);
        }
        Ok(cfg)
    }

    fn rebase(&mut self, base: &Path) {
        let fix_opt = |p: &mut Option<PathBuf>| {
            if let Some(p) = p {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        };
        fix_opt(&mut self.initial_bank);
        fix_opt(&mut self.data.train);
        fix_opt(&mut self.data.eval);
        for b in [
            &mut self.backends.executor,
            &mut self.backends.answer,
            &mut self.backends.designer,
        ]
        .into_iter()
        .chain(self.backends.judge.as_mut())
        {
            if let BackendConfig::Scripted { path, .. } = b {
                fix_opt(path);
            }
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).unwrap_or_default()
    }

    /// Eval Top-K for a trace kind.
    pub fn k_eval_for(&self, kind: crate::environment::TraceKind) -> usize {
        match kind {
            crate::environment::TraceKind::Conversational => self.k_eval,
            crate::environment::TraceKind::Trajectory => self.k_eval_trajectory,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.k_train == 0 || self.k_eval == 0 || self.k_eval_trajectory == 0 {
            return bad("Top-K values must be positive".into());
        }
        if self.span_tokens < crate::environment::MIN_SPAN_TOKENS {
            return bad(format!("span_tokens must be at least {}", crate::environment::MIN_SPAN_TOKENS));
        }
        if self.evolve_every == 0 {
            return bad("evolve_every must be positive".into());
        }
        if !(0.0..1.0).contains(&self.tau0) {
            return bad(format!("tau0 {} must be in [0, 1)", self.tau0));
        }
        if !(0.0..=1.0).contains(&self.fail_threshold) {
            return bad(format!("fail_threshold {} must be in [0, 1]", self.fail_threshold));
        }
        if self.hidden == 0 || self.retrieve_r == 0 || self.buffer_capacity == 0 || self.max_actions_per_span == 0 {
            return bad("hidden, retrieve_r, buffer_capacity and max_actions_per_span must be positive".into());
        }
        if let EmbedderConfig::Hash { dim } = self.embedder {
            if dim < 2 {
                return bad("hash embedder dim must be at least 2".into());
            }
        }
        self.trainer.validate().map_err(|e| Error::Config(e.to_string()))?;
        let uses_synthetic = [&self.backends.executor, &self.backends.answer, &self.backends.designer]
            .into_iter()
            .chain(self.backends.judge.as_ref())
            .any(|b| *b == BackendConfig::Synthetic);
        if self.synthetic.is_none() {
            if uses_synthetic {
                return bad("a `synthetic` backend needs a [synthetic] section".into());
            }
            if self.data.train.is_none() {
                return bad("set data.train or a [synthetic] section".into());
            }
        }
        if let Some(spec) = &self.synthetic {
            spec.validate().map_err(|e| Error::Config(e.to_string()))?;
        }
        if self.metric == RewardMetric::Judge && self.backends.judge.is_none() {
            return bad("metric = \"judge\" needs backends.judge".into());
        }
        Ok(())
    }
}
