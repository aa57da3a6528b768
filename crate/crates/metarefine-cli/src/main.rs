//! Command-line front end: run pipelines, compile demonstrations, and
//! summarize trace files.
//!
//! Exit codes: 0 when a run fully satisfies its constraints (and for
//! `compile`, `stats`, `--help`, `--version`), 2 when a run is accepted with
//! soft violations, 3 when a run hard-fails or aborts, 1 for usage, I/O, and
//! configuration errors.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use metarefine_core::{
    bootstrap_demos, demo_messages, execute_pipeline, load_compiled, load_inputs, load_pipeline,
    load_trainset, metrics_for_stream, persist_compiled, validate_pipeline, verify_compiled,
    BackendConfig, BudgetConfig, CompiledPipeline, ConsoleSink, HttpBackend, JsonlSink, LmBackend,
    Message, Outcome, PipelineDef, PipelineRun, RunMetrics, ScriptedBackend, TraceEvent,
    TraceHeader, Tracer,
};

#[derive(Parser)]
#[command(
    name = "metarefine",
    version,
    about = "Run LM pipelines under output constraints, with oscillation repair"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute a pipeline against one input record.
    Run(RunArgs),
    /// Bootstrap few-shot demonstrations from a training set.
    Compile(CompileArgs),
    /// Summarize JSONL trace files.
    Stats(StatsArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Pipeline definition file.
    #[arg(long)]
    pipeline: PathBuf,
    /// Input record file.
    #[arg(long)]
    inputs: PathBuf,
    /// Compiled demonstrations to inject into prompts.
    #[arg(long)]
    demos: Option<PathBuf>,
    /// Write a JSONL trace to this file.
    #[arg(long)]
    trace_out: Option<PathBuf>,
    /// Stamp trace events with wall-clock milliseconds.
    #[arg(long)]
    timestamps: bool,
    /// Suppress the human-readable progress log on stderr.
    #[arg(long)]
    quiet: bool,
    #[command(flatten)]
    backend: BackendArgs,
    #[command(flatten)]
    budgets: BudgetArgs,
}

#[derive(Args)]
struct CompileArgs {
    /// Pipeline definition file.
    #[arg(long)]
    pipeline: PathBuf,
    /// Training set file with one input record per example.
    #[arg(long)]
    trainset: PathBuf,
    /// Where to write the compiled demonstrations.
    #[arg(long)]
    out: PathBuf,
    /// Write a JSONL trace of the bootstrap runs to this file.
    #[arg(long)]
    trace_out: Option<PathBuf>,
    /// Stamp trace events with wall-clock milliseconds.
    #[arg(long)]
    timestamps: bool,
    /// Suppress the human-readable progress log on stderr.
    #[arg(long)]
    quiet: bool,
    #[command(flatten)]
    backend: BackendArgs,
    #[command(flatten)]
    budgets: BudgetArgs,
}

#[derive(Args)]
struct StatsArgs {
    /// Trace files or directories containing *.jsonl traces.
    #[arg(required = true)]
    paths: Vec<PathBuf>,
    /// Output format.
    #[arg(long, value_enum, default_value_t = StatsFormat::Table)]
    format: StatsFormat,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum StatsFormat {
    Table,
    Json,
    Both,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum BackendKind {
    /// Replay completions from a script file; no network.
    Scripted,
    /// An OpenAI-compatible chat-completions endpoint.
    Http,
}

#[derive(Args)]
struct BackendArgs {
    /// Which model backend to use.
    #[arg(long, value_enum, default_value_t = BackendKind::Scripted)]
    backend: BackendKind,
    /// Script file for the scripted backend.
    #[arg(long)]
    script: Option<PathBuf>,
    /// Chat-completions URL for the HTTP backend.
    #[arg(long)]
    endpoint: Option<String>,
    /// Model for base calls (and the default for the other roles).
    #[arg(long)]
    model: Option<String>,
    /// Model for balancing-instruction synthesis.
    #[arg(long)]
    meta_model: Option<String>,
    /// Model for demonstration bootstrapping.
    #[arg(long)]
    teacher_model: Option<String>,
    /// Environment variable holding the API key. The key itself is never a
    /// command-line argument.
    #[arg(long)]
    api_key_env: Option<String>,
    /// HTTP request timeout in seconds.
    #[arg(long, default_value_t = 60)]
    timeout_secs: u64,
}

impl BackendArgs {
    fn build(&self) -> anyhow::Result<Box<dyn LmBackend>> {
        match self.backend {
            BackendKind::Scripted => {
                let path = self
                    .script
                    .as_ref()
                    .context("--script is required with the scripted backend")?;
                let backend = ScriptedBackend::from_file(path)
                    .with_context(|| format!("loading script {}", path.display()))?;
                Ok(Box::new(backend))
            }
            BackendKind::Http => {
                let endpoint = self
                    .endpoint
                    .clone()
                    .context("--endpoint is required with the http backend")?;
                let model = self
                    .model
                    .clone()
                    .context("--model is required with the http backend")?;
                let config = BackendConfig {
                    endpoint,
                    model,
                    meta_model: self.meta_model.clone(),
                    teacher_model: self.teacher_model.clone(),
                    api_key_env: self.api_key_env.clone(),
                    timeout_secs: self.timeout_secs,
                    ..BackendConfig::default()
                };
                let backend =
                    HttpBackend::new(config).context("configuring the HTTP backend")?;
                Ok(Box::new(backend))
            }
        }
    }
}

#[derive(Args)]
struct BudgetArgs {
    /// Retries after the first attempt.
    #[arg(long, default_value_t = 5)]
    max_backtracks: usize,
    /// Balancing-instruction syntheses allowed per module execution.
    #[arg(long, default_value_t = 1)]
    max_meta_repairs: usize,
    /// Disable oscillation detection and repair.
    #[arg(long)]
    no_meta: bool,
}

impl BudgetArgs {
    fn to_budgets(&self) -> BudgetConfig {
        BudgetConfig {
            max_backtracks: self.max_backtracks,
            max_meta_repairs: self.max_meta_repairs,
            meta_enabled: !self.no_meta,
        }
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            // --help and --version print to stdout and are not failures
            let code = if err.use_stderr() { 1 } else { 0 };
            let _ = err.print();
            std::process::exit(code);
        }
    };
    let result = match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Compile(args) => cmd_compile(args),
        Command::Stats(args) => cmd_stats(args),
    };
    match result {
        Ok(code) => std::process::exit(code),
        Err(err) => {
            eprintln!("error: {err:#}");
            std::process::exit(1);
        }
    }
}

fn load_validated_pipeline(path: &Path) -> anyhow::Result<PipelineDef> {
    let def = load_pipeline(path).with_context(|| format!("loading {}", path.display()))?;
    let problems = validate_pipeline(&def);
    if !problems.is_empty() {
        let lines: Vec<String> = problems.iter().map(|p| format!("  - {p}")).collect();
        bail!("pipeline {} is invalid:\n{}", path.display(), lines.join("\n"));
    }
    Ok(def)
}

fn demo_map(
    def: &PipelineDef,
    compiled: &CompiledPipeline,
) -> anyhow::Result<BTreeMap<String, Vec<Message>>> {
    let problems = verify_compiled(compiled, def);
    if !problems.is_empty() {
        let lines: Vec<String> = problems.iter().map(|p| format!("  - {p}")).collect();
        bail!("compiled demonstrations failed verification:\n{}", lines.join("\n"));
    }
    let mut map = BTreeMap::new();
    for module in &def.modules {
        let name = &module.signature.name;
        let messages = demo_messages(compiled, name, &module.signature)?;
        if !messages.is_empty() {
            map.insert(name.clone(), messages);
        }
    }
    Ok(map)
}

fn build_tracer(
    quiet: bool,
    timestamps: bool,
    trace_out: Option<&Path>,
    def: &PipelineDef,
) -> anyhow::Result<Tracer> {
    let mut tracer = Tracer::new(timestamps);
    if !quiet {
        tracer.add_sink(Box::new(ConsoleSink::stderr()));
    }
    if let Some(path) = trace_out {
        let header = TraceHeader::for_pipeline(def);
        let sink = JsonlSink::to_file(path, &header)
            .with_context(|| format!("creating trace file {}", path.display()))?;
        tracer.add_sink(Box::new(sink));
    }
    Ok(tracer)
}

fn outcome_name(outcome: &Outcome) -> &'static str {
    match outcome {
        Outcome::Success { .. } => "SUCCESS",
        Outcome::SoftAccept { .. } => "SOFT_ACCEPT",
        Outcome::HardFail { .. } => "HARD_FAIL",
    }
}

fn run_report(def: &PipelineDef, run: &PipelineRun) -> (serde_json::Value, i32) {
    let mut worst = 0;
    let executions: Vec<serde_json::Value> = run
        .executions
        .iter()
        .map(|execution| {
            let (attempt, violations) = match &execution.outcome {
                Outcome::Success { attempt, .. } => (*attempt, Vec::new()),
                Outcome::SoftAccept { attempt, violations, .. }
                | Outcome::HardFail { attempt, violations, .. } => {
                    (*attempt, violations.clone())
                }
            };
            worst = worst.max(match &execution.outcome {
                Outcome::Success { .. } => 0,
                Outcome::SoftAccept { .. } => 2,
                Outcome::HardFail { .. } => 3,
            });
            serde_json::json!({
                "execution_id": execution.execution_id,
                "module": execution.module,
                "outcome": outcome_name(&execution.outcome),
                "attempt": attempt,
                "base_calls": execution.attempts.len(),
                "meta_calls": execution.meta_instruction.iter().count(),
                "violations": violations,
            })
        })
        .collect();
    let overall = match worst {
        0 => "SUCCESS",
        2 => "SOFT_ACCEPT",
        _ => "HARD_FAIL",
    };
    let report = serde_json::json!({
        "pipeline_id": def.pipeline_id,
        "outcome": overall,
        "executions": executions,
        "outputs": run.outputs,
    });
    (report, worst)
}

fn print_json(value: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(value).expect("report serialization"));
}

fn cmd_run(args: RunArgs) -> anyhow::Result<i32> {
    let def = load_validated_pipeline(&args.pipeline)?;
    let inputs = load_inputs(&args.inputs)
        .with_context(|| format!("loading {}", args.inputs.display()))?;
    let demos = match &args.demos {
        Some(path) => {
            let compiled = load_compiled(path)
                .with_context(|| format!("loading {}", path.display()))?;
            demo_map(&def, &compiled)?
        }
        None => BTreeMap::new(),
    };
    let backend = args.backend.build()?;
    let mut tracer =
        build_tracer(args.quiet, args.timestamps, args.trace_out.as_deref(), &def)?;

    let result = execute_pipeline(
        &def,
        &inputs,
        &demos,
        backend.as_ref(),
        &mut tracer,
        &args.budgets.to_budgets(),
    );
    tracer.finish().context("flushing trace sinks")?;

    match result {
        Ok(run) => {
            let (report, code) = run_report(&def, &run);
            print_json(&report);
            Ok(code)
        }
        Err(err) => {
            let report = serde_json::json!({
                "pipeline_id": def.pipeline_id,
                "outcome": "ABORTED",
                "error": err.to_string(),
            });
            print_json(&report);
            Ok(3)
        }
    }
}

fn cmd_compile(args: CompileArgs) -> anyhow::Result<i32> {
    let def = load_validated_pipeline(&args.pipeline)?;
    let trainset = load_trainset(&args.trainset)
        .with_context(|| format!("loading {}", args.trainset.display()))?;
    if trainset.is_empty() {
        bail!("training set {} has no examples", args.trainset.display());
    }
    let backend = args.backend.build()?;
    let mut tracer =
        build_tracer(args.quiet, args.timestamps, args.trace_out.as_deref(), &def)?;

    let report =
        bootstrap_demos(&def, &trainset, backend.as_ref(), &mut tracer, &args.budgets.to_budgets());
    tracer.finish().context("flushing trace sinks")?;

    let problems = verify_compiled(&report.compiled, &def);
    if !problems.is_empty() {
        let lines: Vec<String> = problems.iter().map(|p| format!("  - {p}")).collect();
        bail!("compiled demonstrations failed verification:\n{}", lines.join("\n"));
    }
    persist_compiled(&args.out, &report.compiled)
        .with_context(|| format!("writing {}", args.out.display()))?;

    let modules: BTreeMap<&String, serde_json::Value> = report
        .compiled
        .modules
        .iter()
        .map(|(name, demos)| {
            let counter_examples = demos.iter().filter(|d| d.is_counter_example()).count();
            (
                name,
                serde_json::json!({
                    "demos": demos.len(),
                    "counter_examples": counter_examples,
                }),
            )
        })
        .collect();
    print_json(&serde_json::json!({
        "pipeline_id": report.compiled.pipeline_id,
        "out": args.out.display().to_string(),
        "teacher_model": report.compiled.provenance.teacher_model,
        "modules": modules,
        "skipped": report.skipped,
    }));
    Ok(0)
}

fn trace_files(paths: &[PathBuf]) -> anyhow::Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for path in paths {
        if path.is_dir() {
            let mut found = Vec::new();
            for entry in std::fs::read_dir(path)
                .with_context(|| format!("reading directory {}", path.display()))?
            {
                let entry = entry?;
                let candidate = entry.path();
                if candidate.extension().is_some_and(|e| e == "jsonl") {
                    found.push(candidate);
                }
            }
            found.sort();
            if found.is_empty() {
                bail!("directory {} contains no .jsonl trace files", path.display());
            }
            files.extend(found);
        } else {
            files.push(path.clone());
        }
    }
    Ok(files)
}

fn read_trace(path: &Path) -> anyhow::Result<(TraceHeader, Vec<TraceEvent>)> {
    let content = std::fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))?;
    let mut lines = content.lines();
    let first = lines.next().with_context(|| format!("{} is empty", path.display()))?;
    let header: TraceHeader = serde_json::from_str(first)
        .with_context(|| format!("{} does not start with a trace header", path.display()))?;
    if header.format != "trace" {
        bail!("{} is a '{}' file, not a trace", path.display(), header.format);
    }
    let mut events = Vec::new();
    for (i, line) in lines.enumerate() {
        let event: TraceEvent = serde_json::from_str(line)
            .with_context(|| format!("{} line {}: bad event", path.display(), i + 2))?;
        events.push(event);
    }
    Ok((header, events))
}

fn render_table(metrics: &[RunMetrics]) -> String {
    let id_width = metrics
        .iter()
        .map(|m| m.execution_id.len())
        .chain(["EXECUTION".len()])
        .max()
        .unwrap();
    let mut out = format!(
        "{:<id_width$}  {:<12}  {:>5}  {:>4}  {:>5}  {:>5}  VIOLATIONS\n",
        "EXECUTION", "OUTCOME", "CALLS", "META", "LOOPS", "FINAL"
    );
    for m in metrics {
        let final_attempt =
            m.terminal_attempt.map(|a| a.to_string()).unwrap_or_else(|| "-".into());
        let violations = if m.violations_at_termination.is_empty() {
            "-".to_string()
        } else {
            m.violations_at_termination.join(",")
        };
        out.push_str(&format!(
            "{:<id_width$}  {:<12}  {:>5}  {:>4}  {:>5}  {:>5}  {}\n",
            m.execution_id, m.outcome, m.base_calls, m.meta_calls, m.loops_detected,
            final_attempt, violations
        ));
    }
    out
}

fn cmd_stats(args: StatsArgs) -> anyhow::Result<i32> {
    let mut all_metrics = Vec::new();
    for path in trace_files(&args.paths)? {
        let (_, events) = read_trace(&path)?;
        all_metrics.extend(metrics_for_stream(&events));
    }
    if matches!(args.format, StatsFormat::Table | StatsFormat::Both) {
        print!("{}", render_table(&all_metrics));
    }
    if matches!(args.format, StatsFormat::Json | StatsFormat::Both) {
        print_json(&serde_json::to_value(&all_metrics).expect("metrics serialization"));
    }
    Ok(0)
}
