use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use sysphase::bpf::{disassemble, to_blob, DenyAction};
use sysphase::cfg::{top_level_loops, FunctionLoops};
use sysphase::dll::{resolve_dl, DynamicObservations};
use sysphase::fcg::build_fcg;
use sysphase::pipeline::{
    analyze, harden, is_soundness_failure, loops_of, read_json, report_text,
    security_report, to_json, transition_points, write_files, Config, Inputs, PartitionResult,
    StageError, StaticOptions, Status, TransitionEntry, UnresolvedPolicy,
};
use sysphase::pmir::{serialize_image, FuncRef, Linked};
use sysphase::sysgen::ExecveMode;
use sysphase::tracer::TraceLog;
use sysphase::vfa::{refine, VfaCtx};
use sysphase::AnalysisError;

#[derive(Parser)]
#[command(name = "sysphase", version, about = "Temporal system-call filters for PMIR programs")]
struct Cli {
    /// Analysis configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    format: Format,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Text,
}

#[derive(Args, Clone, Default)]
struct InputArgs {
    /// Program image, then extra library documents.
    #[arg(long)]
    image: Vec<PathBuf>,
    /// Shared library corpus directory.
    #[arg(long)]
    corpus: Option<PathBuf>,
}

#[derive(Args, Clone, Default)]
struct ScenarioArgs {
    #[arg(long)]
    scenario: Vec<PathBuf>,
    /// Instruction budget for every scenario.
    #[arg(long)]
    budget: Option<u64>,
}

#[derive(Args, Clone, Default)]
struct SyscallArgs {
    #[arg(long, value_enum)]
    execve_mode: Option<ModeArg>,
    /// JSON list of execve targets.
    #[arg(long)]
    execve_targets: Option<PathBuf>,
    /// `error` or `allow-all`.
    #[arg(long)]
    unresolved: Option<UnresolvedPolicy>,
    /// Transition points from `partition`; computed from the scenarios
    /// when absent.
    #[arg(long)]
    transitions: Option<PathBuf>,
    #[arg(long)]
    observations: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Union,
    Reduce,
}

#[derive(Subcommand)]
enum Command {
    /// Runs every stage and writes the full bundle.
    Analyze {
        #[command(flatten)]
        input: InputArgs,
        #[command(flatten)]
        scenarios: ScenarioArgs,
        #[command(flatten)]
        sys: SyscallArgs,
        #[arg(long)]
        deny: Option<DenyAction>,
    },
    /// Natural loops of every function.
    Loops {
        #[command(flatten)]
        input: InputArgs,
    },
    /// Runs the scenarios in the interpreter.
    Trace {
        #[command(flatten)]
        input: InputArgs,
        #[command(flatten)]
        scenarios: ScenarioArgs,
    },
    /// Selects transition points from traces and loops.
    Partition {
        #[command(flatten)]
        input: InputArgs,
        #[command(flatten)]
        scenarios: ScenarioArgs,
        /// Trace log (one or a list) from `trace`.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Loops from `loops`.
        #[arg(long)]
        loops: Option<PathBuf>,
    },
    /// Function call graph.
    Fcg {
        #[command(flatten)]
        input: InputArgs,
        /// Apply value-flow refinement.
        #[arg(long)]
        refined: bool,
        /// Also write the graph in DOT format.
        #[arg(long)]
        dot: Option<PathBuf>,
    },
    /// Resolves dlopen/dlsym arguments.
    Dll {
        #[command(flatten)]
        input: InputArgs,
        #[arg(long)]
        observations: Option<PathBuf>,
    },
    /// Syscall sets per partition.
    Syscalls {
        #[command(flatten)]
        input: InputArgs,
        #[command(flatten)]
        scenarios: ScenarioArgs,
        #[command(flatten)]
        sys: SyscallArgs,
    },
    /// Compiles filters and writes the hardened image.
    Filter {
        #[command(flatten)]
        input: InputArgs,
        #[command(flatten)]
        scenarios: ScenarioArgs,
        #[command(flatten)]
        sys: SyscallArgs,
        /// `kill-thread` or `errno:<n>`.
        #[arg(long)]
        deny: Option<DenyAction>,
        /// Partitions from `syscalls`; computed when absent.
        #[arg(long)]
        syscalls: Option<PathBuf>,
    },
    /// Sensitive-syscall tiers and payload outcomes.
    Report {
        #[command(flatten)]
        input: InputArgs,
        #[command(flatten)]
        scenarios: ScenarioArgs,
        #[command(flatten)]
        sys: SyscallArgs,
        #[arg(long)]
        payloads: Option<PathBuf>,
    },
}

/// Failure that maps to exit code 2.
#[derive(Debug)]
struct Unsound(String);

impl std::fmt::Display for Unsound {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Unsound {}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if unsound(&e) {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn unsound(e: &anyhow::Error) -> bool {
    e.chain().any(|c| {
        c.is::<Unsound>()
            || c.downcast_ref::<AnalysisError>().is_some_and(is_soundness_failure)
            || c.downcast_ref::<StageError>().is_some_and(|s| is_soundness_failure(&s.error))
    })
}

struct Ctx {
    config: Config,
    out: Option<PathBuf>,
    format: Format,
}

impl Ctx {
    fn emit<T: Serialize>(&self, value: &T, text: impl FnOnce() -> String) {
        match self.format {
            Format::Json => print!("{}", String::from_utf8(to_json(value)).expect("utf-8")),
            Format::Text => print!("{}", text()),
        }
    }

    fn out_dir(&self) -> Result<&Path> {
        self.out
            .as_deref()
            .context("no output directory: pass --out or set `out` in the configuration")
    }
}

fn apply_input(c: &mut Config, a: &InputArgs) {
    if !a.image.is_empty() {
        c.image = a.image.clone();
    }
    if a.corpus.is_some() {
        c.corpus = a.corpus.clone();
    }
}

fn apply_scenarios(c: &mut Config, a: &ScenarioArgs) {
    if !a.scenario.is_empty() {
        c.scenarios = a.scenario.clone();
    }
    if a.budget.is_some() {
        c.budget = a.budget;
    }
}

fn apply_sys(c: &mut Config, a: &SyscallArgs) {
    if let Some(m) = a.execve_mode {
        c.execve_mode = match m {
            ModeArg::Union => ExecveMode::UnionPropagate,
            ModeArg::Reduce => ExecveMode::ReduceOnExec,
        };
    }
    if a.execve_targets.is_some() {
        c.execve_targets = a.execve_targets.clone();
    }
    if let Some(u) = a.unresolved {
        c.unresolved = u;
    }
    if a.observations.is_some() {
        c.observations = a.observations.clone();
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut config = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    match &cli.command {
        Command::Analyze { input, scenarios, sys, deny } => {
            apply_input(&mut config, input);
            apply_scenarios(&mut config, scenarios);
            apply_sys(&mut config, sys);
            if let Some(d) = deny {
                config.deny = *d;
            }
        }
        Command::Loops { input } | Command::Fcg { input, .. } => apply_input(&mut config, input),
        Command::Dll { input, observations } => {
            apply_input(&mut config, input);
            if observations.is_some() {
                config.observations = observations.clone();
            }
        }
        Command::Trace { input, scenarios } | Command::Partition { input, scenarios, .. } => {
            apply_input(&mut config, input);
            apply_scenarios(&mut config, scenarios);
        }
        Command::Syscalls { input, scenarios, sys }
        | Command::Filter { input, scenarios, sys, .. }
        | Command::Report { input, scenarios, sys, .. } => {
            apply_input(&mut config, input);
            apply_scenarios(&mut config, scenarios);
            apply_sys(&mut config, sys);
        }
    }
    if let Command::Filter { deny: Some(d), .. } = &cli.command {
        config.deny = *d;
    }
    if let Command::Report { payloads: Some(p), .. } = &cli.command {
        config.payloads = Some(p.clone());
    }
    let ctx = Ctx {
        out: cli.out.clone().or_else(|| config.out.clone()),
        config,
        format: cli.format,
    };
    match &cli.command {
        Command::Analyze { .. } => cmd_analyze(&ctx),
        Command::Loops { .. } => cmd_loops(&ctx),
        Command::Trace { .. } => cmd_trace(&ctx),
        Command::Partition { trace, loops, .. } => cmd_partition(&ctx, trace.as_deref(), loops.as_deref()),
        Command::Fcg { refined, dot, .. } => cmd_fcg(&ctx, *refined, dot.as_deref()),
        Command::Dll { .. } => cmd_dll(&ctx),
        Command::Syscalls { sys, .. } => cmd_syscalls(&ctx, sys.transitions.as_deref()),
        Command::Filter { sys, syscalls, .. } => {
            cmd_filter(&ctx, sys.transitions.as_deref(), syscalls.as_deref())
        }
        Command::Report { sys, .. } => cmd_report(&ctx, sys.transitions.as_deref()),
    }
}

fn cmd_analyze(ctx: &Ctx) -> Result<()> {
    let out = ctx.out_dir()?;
    let bundle = match analyze(&ctx.config) {
        Ok(b) => b,
        Err(e) => {
            write_files(out, &e.partial)?;
            return Err(e.into());
        }
    };
    bundle.write(out)?;
    let s = &bundle.summary;
    ctx.emit(s, || {
        let mut t = format!(
            "status: {:?}\npartitions: {} ({} filtered)\nsizes: {:?}\nwhole image: {}\nmain(): {}\nedges: {} -> {}\n",
            s.status, s.partitions, s.filters, s.partition_sizes, s.whole_image, s.main, s.edges_before, s.edges_after
        );
        for w in &s.warnings {
            t.push_str(&format!("warning: {w}\n"));
        }
        t
    });
    if s.status == Status::Unresolved {
        let failures: Vec<String> = bundle
            .result
            .partitions
            .iter()
            .filter_map(|p| p.failure.as_ref().map(|f| format!("partition {}: {f}", p.id)))
            .collect();
        bail!(Unsound(failures.join("; ")));
    }
    Ok(())
}

fn cmd_loops(ctx: &Ctx) -> Result<()> {
    let inputs = load_static(&ctx.config)?;
    let loops = loops_of(&inputs.image, &inputs.corpus);
    ctx.emit(&loops, || loops_text(&loops));
    Ok(())
}

fn loops_text(loops: &std::collections::BTreeMap<FuncRef, FunctionLoops>) -> String {
    let mut t = String::new();
    for (f, fl) in loops {
        for l in &fl.loops {
            t.push_str(&format!(
                "{f} header {} entry {:#x} body {:?}{}\n",
                l.header,
                l.entry_address,
                l.body,
                if l.top_level { "" } else { " (nested)" }
            ));
        }
        for (a, b) in &fl.irreducible_edges {
            t.push_str(&format!("{f} irreducible edge {a} -> {b}\n"));
        }
    }
    t
}

/// Inputs for commands that need no scenarios.
fn load_static(config: &Config) -> Result<Inputs> {
    let mut c = config.clone();
    c.scenarios.clear();
    c.payloads = None;
    Ok(Inputs::load(&c)?)
}

fn cmd_trace(ctx: &Ctx) -> Result<()> {
    let inputs = Inputs::load(&ctx.config)?;
    let traces = inputs.traces()?;
    ctx.emit(&traces, || {
        let mut t = String::new();
        for (i, log) in traces.iter().enumerate() {
            t.push_str(&format!("scenario {i}{}\n", if log.truncated { " (truncated)" } else { "" }));
            for th in &log.threads {
                let calls = log.syscalls().filter(|(e, _)| e.thread == th.id).count();
                t.push_str(&format!(
                    "  thread {} {} {} steps, {} syscalls, {:?}\n",
                    th.id,
                    th.start,
                    th.addrs.len(),
                    calls,
                    th.end
                ));
            }
        }
        t
    });
    Ok(())
}

fn read_traces(p: &Path) -> Result<Vec<TraceLog>> {
    let text = std::fs::read_to_string(p).with_context(|| p.display().to_string())?;
    let v = if text.trim_start().starts_with('[') {
        serde_json::from_str(&text)
    } else {
        serde_json::from_str(&text).map(|t| vec![t])
    };
    v.with_context(|| p.display().to_string())
}

/// Transition points from traces (given or computed) and loops.
fn compute_transitions(
    config: &Config,
    trace: Option<&Path>,
    loops: Option<&Path>,
) -> Result<(Vec<TransitionEntry>, Vec<String>)> {
    let need_inputs = trace.is_none() || loops.is_none();
    let inputs = if need_inputs { Some(Inputs::load(config)?) } else { None };
    let traces = match trace {
        Some(p) => read_traces(p)?,
        None => inputs.as_ref().unwrap().traces()?,
    };
    let loops = match loops {
        Some(p) => read_json(p)?,
        None => {
            let i = inputs.as_ref().unwrap();
            loops_of(&i.image, &i.corpus)
        }
    };
    let (_, points, warnings) = transition_points(&traces, &top_level_loops(&loops));
    Ok((points, warnings))
}

fn cmd_partition(ctx: &Ctx, trace: Option<&Path>, loops: Option<&Path>) -> Result<()> {
    let (points, warnings) = compute_transitions(&ctx.config, trace, loops)?;
    for w in &warnings {
        log::warn!("{w}");
    }
    ctx.emit(&points, || {
        points
            .iter()
            .map(|e| format!("{} {:#x} threads {:?}\n", e.point.function, e.point.addr, e.threads))
            .collect()
    });
    Ok(())
}

fn cmd_fcg(ctx: &Ctx, refined: bool, dot: Option<&Path>) -> Result<()> {
    let inputs = load_static(&ctx.config)?;
    let linked = Linked::new(&inputs.image);
    let (mut fcg, errors) = build_fcg(&linked);
    for e in errors {
        log::warn!("{e}");
    }
    if refined {
        let vctx = VfaCtx::new(&linked);
        refine(&vctx, &mut fcg);
    }
    if let Some(p) = dot {
        std::fs::write(p, fcg.to_dot(&linked)).with_context(|| p.display().to_string())?;
    }
    let doc = fcg.to_doc(&linked);
    ctx.emit(&doc, || fcg.to_dot(&linked));
    Ok(())
}

fn observations(config: &Config) -> Result<DynamicObservations> {
    Ok(match &config.observations {
        Some(p) => DynamicObservations::load(p)?,
        None => DynamicObservations::default(),
    })
}

fn cmd_dll(ctx: &Ctx) -> Result<()> {
    let inputs = load_static(&ctx.config)?;
    let obs = observations(&ctx.config)?;
    let linked = Linked::new(&inputs.image);
    let (mut fcg, _) = build_fcg(&linked);
    let vctx = VfaCtx::new(&linked);
    refine(&vctx, &mut fcg);
    let report = resolve_dl(&vctx, &fcg, &inputs.corpus, &obs);
    ctx.emit(&report, || report.to_text());
    Ok(())
}

/// Partition sets for the configured program.
fn compute_partitions(config: &Config, transitions: Option<&Path>) -> Result<sysphase::pipeline::StaticResult> {
    let inputs = Inputs::load(config)?;
    let mut obs = observations(config)?;
    let points = match transitions {
        Some(p) => read_json(p)?,
        None => {
            let traces = inputs.traces()?;
            obs.merge(&DynamicObservations::from_traces(&traces));
            let loops = loops_of(&inputs.image, &inputs.corpus);
            transition_points(&traces, &top_level_loops(&loops)).1
        }
    };
    let opts = StaticOptions::from_config(config)?;
    Ok(sysphase::pipeline::analyze_static(&inputs.image, &inputs.corpus, &obs, &points, &opts)?)
}

fn fail_on_unresolved(parts: &[PartitionResult]) -> Result<()> {
    let failures: Vec<String> = parts
        .iter()
        .filter_map(|p| p.failure.as_ref().map(|f| format!("partition {}: {f}", p.id)))
        .collect();
    if failures.is_empty() {
        Ok(())
    } else {
        bail!(Unsound(failures.join("; ")))
    }
}

#[derive(Serialize)]
struct SyscallsDoc<'a> {
    id: u32,
    tp: &'a sysphase::tracer::TransitionPoint,
    numbers: &'a std::collections::BTreeSet<u32>,
    provenance: &'a std::collections::BTreeMap<u32, std::collections::BTreeSet<u64>>,
    unresolved: &'a std::collections::BTreeSet<u64>,
    #[serde(skip_serializing_if = "std::collections::BTreeMap::is_empty")]
    exec_filters: &'a std::collections::BTreeMap<String, std::collections::BTreeSet<u32>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    failure: &'a Option<String>,
}

fn cmd_syscalls(ctx: &Ctx, transitions: Option<&Path>) -> Result<()> {
    let st = compute_partitions(&ctx.config, transitions)?;
    if let Some(out) = &ctx.out {
        write_files(out, &[("syscalls.json".to_string(), to_json(&st.partitions))])?;
    }
    let docs: Vec<SyscallsDoc> = st
        .partitions
        .iter()
        .map(|p| SyscallsDoc {
            id: p.id,
            tp: &p.transition,
            numbers: &p.syscalls.numbers,
            provenance: &p.syscalls.provenance,
            unresolved: &p.syscalls.unresolved_sites,
            exec_filters: &p.exec_filters,
            failure: &p.failure,
        })
        .collect();
    ctx.emit(&docs, || {
        docs.iter()
            .map(|d| {
                let names: Vec<String> = d
                    .numbers
                    .iter()
                    .map(|&n| sysphase::systable::name(n).map_or(n.to_string(), str::to_string))
                    .collect();
                format!(
                    "partition {} {} {:#x}: {} syscalls: {}\n",
                    d.id,
                    d.tp.function,
                    d.tp.addr,
                    d.numbers.len(),
                    names.join(" ")
                )
            })
            .collect()
    });
    fail_on_unresolved(&st.partitions)
}

fn cmd_filter(ctx: &Ctx, transitions: Option<&Path>, syscalls: Option<&Path>) -> Result<()> {
    let out = ctx.out_dir()?;
    let inputs = load_static(&ctx.config)?;
    let mut parts: Vec<PartitionResult> = match syscalls {
        Some(p) => read_json(p)?,
        None => compute_partitions(&ctx.config, transitions)?.partitions,
    };
    let hardened = harden(&inputs.image, &mut parts, ctx.config.deny)?;
    let mut files = Vec::new();
    for p in parts.iter().filter(|p| p.has_filter()) {
        let prog = &hardened.filters[&p.id];
        files.push((format!("filters/partition-{}.bpf", p.id), to_blob(prog)));
        files.push((format!("filters/partition-{}.txt", p.id), disassemble(prog).into_bytes()));
    }
    files.push(("hardened.pmir.json".to_string(), serialize_image(&hardened)));
    write_files(out, &files)?;
    let installs: Vec<_> = parts.iter().filter_map(|p| p.install.as_ref()).collect();
    ctx.emit(&installs, || {
        installs
            .iter()
            .map(|s| {
                format!(
                    "partition {} installed in {} block {} at {:#x}{}\n",
                    s.partition,
                    s.function,
                    s.block,
                    s.address,
                    if s.synthesized { " (preheader)" } else { "" }
                )
            })
            .collect()
    });
    fail_on_unresolved(&parts)
}

fn cmd_report(ctx: &Ctx, transitions: Option<&Path>) -> Result<()> {
    let st = compute_partitions(&ctx.config, transitions)?;
    let payloads = match &ctx.config.payloads {
        Some(p) => read_json(p)?,
        None => Vec::new(),
    };
    let report = security_report(&st, &payloads)?;
    ctx.emit(&report, || report_text(&report));
    Ok(())
}
