use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use skillmem::config::{check_documented_defaults, ControllerMode, RunConfig};
use skillmem::designer::CycleReport;
use skillmem::environment::{load_traces, make_synthetic, make_synthetic_traces, SyntheticSpec, Trace};
use skillmem::orchestrator::{self, evaluate, load_checkpoint, read_bank, replay, resolve, StepLog};
use skillmem::skill_bank::{diff, SkillBank};
use skillmem::Error;

#[derive(Parser)]
#[command(name = "skillmem", version, about = "Train and evaluate skill-conditioned agent memory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the controller and evolve the skill bank.
    Train(TrainArgs),
    /// Score a skill bank on held-out traces (read-only).
    Eval(EvalArgs),
    /// Inspect skill banks.
    #[command(subcommand)]
    Skills(SkillsCommand),
    /// Print the span-by-span action log for one trace.
    Replay(ReplayArgs),
    /// Write a synthetic world, train on it, and evaluate.
    SynthDemo(SynthArgs),
    /// Summarize the logs of a training run.
    Report(ReportArgs),
}

#[derive(Args)]
struct Overrides {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    max_cycles: Option<usize>,
    #[arg(long)]
    evolve_every: Option<usize>,
    #[arg(long)]
    k_train: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    workers: Option<usize>,
    /// Keep the initial skill bank fixed.
    #[arg(long)]
    no_designer: bool,
    /// Replace the learned controller by uniform random selection.
    #[arg(long)]
    uniform_controller: bool,
}

impl Overrides {
    fn apply(&self, c: &mut RunConfig) {
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = &self.output {
            c.output_dir = v.clone();
        }
        if let Some(v) = self.max_cycles {
            c.max_cycles = v;
        }
        if let Some(v) = self.evolve_every {
            c.evolve_every = v;
        }
        if let Some(v) = self.k_train {
            c.k_train = v;
        }
        if let Some(v) = self.learning_rate {
            c.trainer.learning_rate = v;
        }
        if let Some(v) = self.workers {
            c.workers = v;
        }
        if self.no_designer {
            c.designer_enabled = false;
        }
        if self.uniform_controller {
            c.controller = ControllerMode::Uniform;
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    bank: PathBuf,
    /// Controller checkpoint; without one, skills are picked uniformly.
    #[arg(long)]
    controller: Option<PathBuf>,
    /// Eval traces; defaults to the config's eval set.
    #[arg(long)]
    traces: Option<PathBuf>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Also write the metrics JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum SkillsCommand {
    List {
        #[arg(long)]
        bank: PathBuf,
    },
    Show {
        #[arg(long)]
        bank: PathBuf,
        name: String,
    },
    /// Added, refined and removed skills between two banks. Each side is a
    /// path or `vN` inside `--run`'s bank directory.
    Diff {
        old: String,
        new: String,
        #[arg(long)]
        run: Option<PathBuf>,
    },
}

#[derive(Args)]
struct ReplayArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    bank: PathBuf,
    #[arg(long)]
    trace: PathBuf,
    #[arg(long)]
    trace_id: Option<String>,
    #[arg(long)]
    controller: Option<PathBuf>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value = "synth-demo")]
    out: PathBuf,
    /// TOML file with a synthetic world spec.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, default_value_t = 6)]
    max_cycles: usize,
    #[arg(long, default_value_t = 100)]
    evolve_every: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long, default_value = "runs/latest")]
    run: PathBuf,
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl Failure {
    fn config(e: impl std::fmt::Display) -> Self {
        Failure::Config(e.to_string())
    }
    fn runtime(e: impl std::fmt::Display) -> Self {
        Failure::Runtime(e.to_string())
    }
}

/// Config-class errors from library calls made while still setting up.
fn setup(e: Error) -> Failure {
    Failure::Config(e.to_string())
}

type Outcome = std::result::Result<(), Failure>;

fn load_config(path: &Path) -> std::result::Result<RunConfig, Failure> {
    RunConfig::load(path).map_err(setup)
}

fn print_json<T: serde::Serialize>(v: &T) -> Outcome {
    println!("{}", serde_json::to_string_pretty(v).map_err(Failure::runtime)?);
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Outcome {
    let mut c = load_config(&a.config)?;
    a.overrides.apply(&mut c);
    c.validate().map_err(setup)?;
    let summary = match orchestrator::train(&c) {
        Ok(s) => s,
        Err(e @ Error::Config(_)) => return Err(setup(e)),
        Err(e) => return Err(Failure::runtime(e)),
    };
    for r in &summary.cycles {
        eprintln!(
            "cycle {:>3}  tail {:.4}  bank v{} -> v{}{}{}",
            r.cycle_index,
            r.tail_mean_reward,
            r.bank_version,
            r.next_bank_version,
            if r.rolled_back { "  rolled back" } else { "" },
            if r.early_stop { "  early stop" } else { "" },
        );
    }
    eprintln!(
        "best cycle {} (tail {:.4}); bank v{} written to {}",
        summary.best_cycle,
        summary.best_tail,
        summary.final_bank.version,
        c.output_dir.join("best_bank.json").display()
    );
    Ok(())
}

fn traces_from(c: &RunConfig, path: Option<&Path>, default: Vec<Trace>) -> std::result::Result<Vec<Trace>, Failure> {
    match path {
        Some(p) => load_traces(p, c.data.format, c.span_tokens, c.data.chunk_mode).map_err(setup),
        None => Ok(default),
    }
}

fn cmd_eval(a: EvalArgs) -> Outcome {
    let mut c = load_config(&a.config)?;
    if let Some(s) = a.seed {
        c.seed = s;
    }
    let r = resolve(&c).map_err(setup)?;
    let bank = read_bank(&a.bank).map_err(setup)?;
    let params = a.controller.as_deref().map(load_checkpoint).transpose().map_err(setup)?;
    let traces = traces_from(&c, a.traces.as_deref(), r.eval)?;
    if traces.is_empty() {
        return Err(Failure::config("no eval traces: pass --traces or set data.eval"));
    }
    let report = evaluate(&c, &r.backends, &bank, params.as_ref(), &traces, a.k).map_err(Failure::runtime)?;
    if let Some(out) = &a.out {
        orchestrator::write_file(out, &serde_json::to_string_pretty(&report).map_err(Failure::runtime)?)
            .map_err(Failure::runtime)?;
    }
    print_json(&serde_json::json!({
        "bank_version": report.bank_version,
        "selection": report.selection,
        "traces": report.traces,
        "mean_reward": report.mean_reward,
        "per_trace": report.per_trace.iter().map(|t| serde_json::json!({"trace_id": t.trace_id, "reward": t.reward})).collect::<Vec<_>>(),
    }))
}

fn resolve_bank_ref(spec: &str, run: Option<&Path>) -> std::result::Result<SkillBank, Failure> {
    let as_version = spec
        .strip_prefix('v')
        .filter(|n| !n.is_empty() && n.bytes().all(|b| b.is_ascii_digit()));
    let path = match (as_version, run) {
        (Some(_), Some(dir)) => dir.join("banks").join(format!("{spec}.json")),
        (Some(_), None) if !Path::new(spec).exists() => {
            Path::new("runs/latest").join("banks").join(format!("{spec}.json"))
        }
        _ => PathBuf::from(spec),
    };
    read_bank(&path).map_err(setup)
}

fn cmd_skills(c: SkillsCommand) -> Outcome {
    match c {
        SkillsCommand::List { bank } => {
            let b = read_bank(&bank).map_err(setup)?;
            println!("bank v{} ({} skills)", b.version, b.len());
            for s in &b.skills {
                println!("{:<28} {:<7} {}", s.name, s.update_type.as_str(), s.description);
            }
            Ok(())
        }
        SkillsCommand::Show { bank, name } => {
            let b = read_bank(&bank).map_err(setup)?;
            let s = b
                .get(&name)
                .ok_or_else(|| Failure::config(format!("no skill named {name:?} in bank v{}", b.version)))?;
            print_json(s)
        }
        SkillsCommand::Diff { old, new, run } => {
            let a = resolve_bank_ref(&old, run.as_deref())?;
            let b = resolve_bank_ref(&new, run.as_deref())?;
            print_json(&diff(&a, &b))
        }
    }
}

fn cmd_replay(a: ReplayArgs) -> Outcome {
    let mut c = load_config(&a.config)?;
    if let Some(s) = a.seed {
        c.seed = s;
    }
    let r = resolve(&c).map_err(setup)?;
    let bank = read_bank(&a.bank).map_err(setup)?;
    let params = a.controller.as_deref().map(load_checkpoint).transpose().map_err(setup)?;
    let traces = load_traces(&a.trace, c.data.format, c.span_tokens, c.data.chunk_mode).map_err(setup)?;
    let trace = match &a.trace_id {
        Some(id) => traces
            .iter()
            .find(|t| &t.trace_id == id)
            .ok_or_else(|| Failure::config(format!("no trace {id:?}")))?,
        None => traces.first().ok_or_else(|| Failure::config("trace file is empty"))?,
    };
    let log = replay(&c, &r.backends, &bank, params.as_ref(), trace, a.k).map_err(Failure::runtime)?;
    let mut out = std::io::stdout().lock();
    for s in &log.spans {
        let line = serde_json::to_string(s).map_err(Failure::runtime)?;
        if writeln!(out, "{line}").is_err() {
            break;
        }
    }
    eprintln!("trace {} reward {:.4}", log.trace_id, log.reward);
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> Outcome {
    let spec = match &a.spec {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Failure::config(format!("{}: {e}", p.display())))?;
            toml::from_str::<SyntheticSpec>(&text).map_err(Failure::config)?
        }
        None => SyntheticSpec {
            uncovered: vec!["temporal".into()],
            seed: a.seed,
            ..SyntheticSpec::default()
        },
    };
    let world = make_synthetic(&spec).map_err(setup)?;
    let out = &a.out;
    let mut c = RunConfig {
        seed: a.seed,
        k_train: 2,
        k_eval: 2,
        hidden: 32,
        evolve_every: a.evolve_every,
        max_cycles: a.max_cycles,
        synthetic: Some(spec.clone()),
        output_dir: out.join("run"),
        ..RunConfig::default()
    };
    c.trainer.learning_rate = 3e-3;
    let write = |name: &str, text: String| orchestrator::write_file(&out.join(name), &text).map_err(Failure::runtime);
    let eval_traces = make_synthetic_traces(&spec, spec.seed.wrapping_add(1_000_003)).map_err(setup)?.0;
    write("train_traces.json", serde_json::to_string_pretty(&world.traces).map_err(Failure::runtime)?)?;
    write("eval_traces.json", serde_json::to_string_pretty(&eval_traces).map_err(Failure::runtime)?)?;
    write("initial_bank.json", world.initial_bank.to_json())?;
    write("executor_rules.json", serde_json::to_string_pretty(&world.executor_script).map_err(Failure::runtime)?)?;
    write("answer_rules.json", serde_json::to_string_pretty(&world.answer_script).map_err(Failure::runtime)?)?;
    write("designer_rules.json", serde_json::to_string_pretty(&world.designer_script).map_err(Failure::runtime)?)?;
    let mut saved = c.clone();
    saved.output_dir = PathBuf::from("run");
    write("synth.toml", saved.to_toml())?;

    let summary = orchestrator::train(&c).map_err(Failure::runtime)?;
    let r = resolve(&c).map_err(setup)?;
    let params = load_checkpoint(&c.output_dir.join("controller.json")).map_err(Failure::runtime)?;
    let trained = evaluate(&c, &r.backends, &summary.final_bank, Some(&params), &r.eval, None).map_err(Failure::runtime)?;
    let baseline = evaluate(&c, &r.backends, &r.initial_bank, None, &r.eval, None).map_err(Failure::runtime)?;
    print_json(&serde_json::json!({
        "output": out,
        "cycles": summary.cycles.len(),
        "best_cycle": summary.best_cycle,
        "final_bank_version": summary.final_bank.version,
        "final_skills": summary.final_bank.skills.iter().map(|s| &s.name).collect::<Vec<_>>(),
        "eval_mean_reward": trained.mean_reward,
        "uniform_initial_bank_reward": baseline.mean_reward,
    }))
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> std::result::Result<Vec<T>, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Failure::config(format!("{}:{}: {e}", path.display(), i + 1))))
        .collect()
}

fn cmd_report(a: ReportArgs) -> Outcome {
    let cycles: Vec<CycleReport> = read_jsonl(&a.run.join("cycles.jsonl"))?;
    let steps: Vec<StepLog> = read_jsonl(&a.run.join("steps.jsonl"))?;
    println!(
        "{:>5} {:>6} {:>8} {:>8} {:>6} {:>6} {:>5} {:>5}  changes",
        "cycle", "steps", "mean", "tail", "bank", "next", "rollb", "stop"
    );
    for c in &cycles {
        println!(
            "{:>5} {:>6} {:>8.4} {:>8.4} {:>6} {:>6} {:>5} {:>5}  {}",
            c.cycle_index,
            c.steps,
            c.mean_reward,
            c.tail_mean_reward,
            format!("v{}", c.bank_version),
            format!("v{}", c.next_bank_version),
            if c.rolled_back { "yes" } else { "-" },
            if c.early_stop { "yes" } else { "-" },
            c.proposal_changes.join(", ")
        );
    }
    if let Some(last) = steps.last() {
        let n = steps.len().min(100);
        let recent = steps[steps.len() - n..].iter().map(|s| s.mean_reward).sum::<f64>() / n as f64;
        println!(
            "\n{} steps; mean reward over the last {n}: {recent:.4}; last entropy {:.4}, clip fraction {:.4}",
            steps.len(),
            last.entropy,
            last.ratio_clip_frac
        );
    }
    Ok(())
}

fn main() -> ExitCode {
    if let Err(e) = check_documented_defaults() {
        eprintln!("error: {e}");
        return ExitCode::from(1);
    }
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let outcome = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Skills(c) => cmd_skills(c),
        Command::Replay(a) => cmd_replay(a),
        Command::SynthDemo(a) => cmd_synth(a),
        Command::Report(a) => cmd_report(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}
