//! End-to-end orchestration: loops, tracing, transition points, call
//! graph and refinement, dynamic loading, syscall sets, filters and
//! reports, collected into one deterministic bundle.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bpf::{compile_filter, disassemble, insert_filter, to_blob, DenyAction, InstallSite};
use crate::cfg::{find_loops, top_level_loops, FunctionLoops, Loop};
use crate::dll::{incorporate, resolve_dl, DlResolutionReport, DynamicObservations, Incorporation};
use crate::error::AnalysisError;
use crate::fcg::{build_fcg, FcgDoc};
use crate::pmir::{load_corpus, serialize_image, FuncRef, Linked, ModuleUnit, ProgramImage};
use crate::report::{payload_report, sensitive_report, Payload, PayloadOutcome, Tier};
use crate::sysgen::{
    compose_execve, exec_site_targets, load_target_sets, ExecTargetFile, ExecveMode, ExecvePolicy,
    SyscallAnalysis, SyscallSet,
};
use crate::systable::all_numbers;
use crate::tracer::{
    execute, profile_loops, select_main_loops, LoopProfile, Scenario, TraceLog, TransitionPoint,
};
use crate::vfa::{refine, RefineReport, VfaCtx};

/// What to do with a partition whose syscall set has unresolved sites.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UnresolvedPolicy {
    /// Emit no filter for the partition and fail the run.
    #[default]
    Error,
    /// Allow every syscall in the partition and warn.
    AllowAll,
}

impl std::str::FromStr for UnresolvedPolicy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "error" => Ok(UnresolvedPolicy::Error),
            "allow-all" => Ok(UnresolvedPolicy::AllowAll),
            _ => Err(format!("expected `error` or `allow-all`, got `{s}`")),
        }
    }
}

/// Run configuration. Relative paths are taken relative to the file the
/// configuration was loaded from.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    /// Executable document first, then extra library documents.
    pub image: Vec<PathBuf>,
    /// Scenario files; each holds one scenario or a list of them.
    #[serde(default, alias = "scenario")]
    pub scenarios: Vec<PathBuf>,
    #[serde(default)]
    pub corpus: Option<PathBuf>,
    #[serde(default)]
    pub observations: Option<PathBuf>,
    #[serde(default)]
    pub execve_mode: ExecveMode,
    #[serde(default)]
    pub execve_targets: Option<PathBuf>,
    /// Directory holding program images of execve targets; defaults to
    /// the corpus.
    #[serde(default)]
    pub exec_images: Option<PathBuf>,
    #[serde(default)]
    pub unresolved: UnresolvedPolicy,
    #[serde(default)]
    pub deny: DenyAction,
    /// Overrides every scenario's budget.
    #[serde(default)]
    pub budget: Option<u64>,
    #[serde(default)]
    pub payloads: Option<PathBuf>,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

fn io_err(path: &Path, source: std::io::Error) -> AnalysisError {
    AnalysisError::Io {
        context: path.display().to_string(),
        source,
    }
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, AnalysisError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|source| AnalysisError::Json {
        context: path.display().to_string(),
        source,
    })
}

impl Config {
    pub fn load(path: &Path) -> Result<Config, AnalysisError> {
        let mut c: Config = read_json(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        c.rebase(base);
        Ok(c)
    }

    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        self.image.iter_mut().for_each(fix);
        self.scenarios.iter_mut().for_each(fix);
        for p in [
            &mut self.corpus,
            &mut self.observations,
            &mut self.execve_targets,
            &mut self.exec_images,
            &mut self.payloads,
            &mut self.out,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
    }

    /// Checks that every referenced input exists.
    pub fn check(&self) -> Result<(), AnalysisError> {
        if self.image.is_empty() {
            return Err(AnalysisError::InvalidScenario("configuration names no image".into()));
        }
        let files = self
            .image
            .iter()
            .chain(&self.scenarios)
            .chain(&self.observations)
            .chain(&self.execve_targets)
            .chain(&self.payloads);
        for p in files {
            if !p.is_file() {
                return Err(missing(p));
            }
        }
        for d in self.corpus.iter().chain(&self.exec_images) {
            if !d.is_dir() {
                return Err(missing(d));
            }
        }
        Ok(())
    }
}

fn missing(p: &Path) -> AnalysisError {
    io_err(p, std::io::Error::new(std::io::ErrorKind::NotFound, "no such file or directory"))
}

pub fn load_scenarios(paths: &[PathBuf], budget: Option<u64>) -> Result<Vec<Scenario>, AnalysisError> {
    let mut out = Vec::new();
    for p in paths {
        let text = std::fs::read_to_string(p).map_err(|e| io_err(p, e))?;
        let parsed = if text.trim_start().starts_with('[') {
            serde_json::from_str::<Vec<Scenario>>(&text)
        } else {
            serde_json::from_str::<Scenario>(&text).map(|s| vec![s])
        };
        out.extend(parsed.map_err(|source| AnalysisError::Json {
            context: p.display().to_string(),
            source,
        })?);
    }
    if let Some(b) = budget {
        for s in &mut out {
            s.budget = b;
        }
    }
    Ok(out)
}

/// Loops of every function of the image and of the corpus libraries.
pub fn loops_of(image: &ProgramImage, corpus: &[ModuleUnit]) -> BTreeMap<FuncRef, FunctionLoops> {
    let mut out = BTreeMap::new();
    for m in image.modules().chain(corpus) {
        for f in &m.functions {
            out.entry(FuncRef::new(&m.name, &f.name))
                .or_insert_with(|| find_loops(f));
        }
    }
    out
}

/// A transition point with every thread that selected its loop.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransitionEntry {
    #[serde(flatten)]
    pub point: TransitionPoint,
    pub threads: Vec<u32>,
}

/// Transition points found over all traces, one per distinct loop.
pub fn transition_points(
    traces: &[TraceLog],
    loops: &[(FuncRef, Loop)],
) -> (Vec<LoopProfile>, Vec<TransitionEntry>, Vec<String>) {
    let mut profiles = Vec::new();
    let mut warnings = Vec::new();
    let mut points: BTreeMap<(FuncRef, u64), (TransitionPoint, BTreeSet<u32>)> = BTreeMap::new();
    for (i, t) in traces.iter().enumerate() {
        let p = profile_loops(t, loops);
        let sel = select_main_loops(&p);
        for w in sel.warnings {
            warnings.push(format!("scenario {i}: {w}"));
        }
        for tp in sel.points {
            points
                .entry((tp.function.clone(), tp.addr))
                .or_insert_with(|| (tp.clone(), BTreeSet::new()))
                .1
                .insert(tp.thread);
        }
        profiles.push(p);
    }
    let pts = points
        .into_values()
        .map(|(point, th)| TransitionEntry {
            point,
            threads: th.into_iter().collect(),
        })
        .collect();
    (profiles, pts, warnings)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionResult {
    pub id: u32,
    pub threads: Vec<u32>,
    pub transition: TransitionPoint,
    /// Syscalls reachable from the transition point.
    pub base: SyscallSet,
    /// Allow-list after execve composition and the unresolved policy.
    pub syscalls: SyscallSet,
    pub exec_targets: BTreeMap<u64, BTreeSet<String>>,
    pub exec_filters: BTreeMap<String, BTreeSet<u32>>,
    pub allow_all: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub install: Option<InstallSite>,
    /// Why no filter was emitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

impl PartitionResult {
    pub fn has_filter(&self) -> bool {
        self.install.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionReport {
    pub id: u32,
    pub size: usize,
    pub sensitive: BTreeMap<String, Tier>,
    pub payloads: Vec<PayloadOutcome>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SecurityReport {
    pub whole_image: BTreeSet<u32>,
    pub main: BTreeSet<u32>,
    pub partitions: Vec<PartitionReport>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Status {
    Ok,
    /// Some partition could not be filtered soundly.
    Unresolved,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Summary {
    pub status: Status,
    pub partitions: usize,
    pub filters: usize,
    pub edges_before: usize,
    pub edges_after: usize,
    pub whole_image: usize,
    pub main: usize,
    pub partition_sizes: Vec<usize>,
    pub warnings: Vec<String>,
}

/// Call graph, refinement, dynamic loading and syscall sets for one image.
#[derive(Debug, Clone)]
pub struct StaticResult {
    /// The image with every resolved library and `dlsym` binding.
    pub image: ProgramImage,
    pub dll: DlResolutionReport,
    pub incorporations: Vec<Incorporation>,
    pub fcg: FcgDoc,
    pub fcg_dot: String,
    pub refined: FcgDoc,
    pub refinement: RefineReport,
    pub whole_image: SyscallSet,
    pub main: SyscallSet,
    pub partitions: Vec<PartitionResult>,
    pub warnings: Vec<String>,
}

/// Settings of the static stages.
#[derive(Debug, Clone, Default)]
pub struct StaticOptions {
    pub execve_mode: ExecveMode,
    pub execve_targets: ExecTargetFile,
    pub exec_images: Option<PathBuf>,
    pub unresolved: UnresolvedPolicy,
}

/// Resolves dynamic loading to a fixpoint: each round analyzes the image,
/// resolves `dlopen`/`dlsym` arguments and folds the results back in.
pub fn resolve_libraries(
    image: &ProgramImage,
    corpus: &[ModuleUnit],
    obs: &DynamicObservations,
) -> Result<(ProgramImage, DlResolutionReport, Vec<Incorporation>), AnalysisError> {
    let mut img = image.clone();
    let mut incs = Vec::new();
    loop {
        let report = {
            let linked = Linked::new(&img);
            let (mut fcg, _) = build_fcg(&linked);
            let ctx = VfaCtx::new(&linked);
            refine(&ctx, &mut fcg);
            resolve_dl(&ctx, &fcg, corpus, obs)
        };
        let (next, inc) = incorporate(&img, corpus, &report)?;
        if inc.is_empty() {
            return Ok((img, report, incs));
        }
        incs.push(inc);
        img = next;
    }
}

/// Errors meaning no sound filter can be produced, as opposed to bad input.
pub fn is_soundness_failure(e: &AnalysisError) -> bool {
    matches!(
        e,
        AnalysisError::UnknownExecTarget { .. }
            | AnalysisError::UnresolvedExecTarget { .. }
            | AnalysisError::UnresolvedThreadStart { .. }
    )
}

/// Runs the static stages and computes one syscall set per transition
/// point. Partition ids follow the order of `points`.
pub fn analyze_static(
    image: &ProgramImage,
    corpus: &[ModuleUnit],
    obs: &DynamicObservations,
    points: &[TransitionEntry],
    opts: &StaticOptions,
) -> Result<StaticResult, AnalysisError> {
    let (full, dll, incorporations) = resolve_libraries(image, corpus, obs)?;
    let linked = Linked::new(&full);
    let (mut fcg, errors) = build_fcg(&linked);
    let mut warnings: Vec<String> = errors.iter().map(|e| e.to_string()).collect();
    let fcg_doc = fcg.to_doc(&linked);
    let fcg_dot = fcg.to_dot(&linked);
    let ctx = VfaCtx::new(&linked);
    let refinement = refine(&ctx, &mut fcg);
    let analysis = SyscallAnalysis::new(&ctx, &fcg)?;
    warnings.extend(analysis.warnings.iter().cloned());
    warnings.extend(dll.warnings.iter().cloned());
    let exec_dir = opts.exec_images.clone();
    let mut partitions = Vec::new();
    for (i, entry) in points.iter().enumerate() {
        let base = analysis.partition_syscalls(&linked, &fcg, &entry.point)?;
        let mut p = PartitionResult {
            id: i as u32,
            threads: entry.threads.clone(),
            transition: entry.point.clone(),
            syscalls: base.clone(),
            base,
            exec_targets: BTreeMap::new(),
            exec_filters: BTreeMap::new(),
            allow_all: false,
            install: None,
            failure: None,
        };
        if !p.base.exec_sites.is_empty() {
            let composed = exec_site_targets(&ctx, &fcg, &analysis, &p.base.exec_sites, obs, &opts.execve_targets)
                .and_then(|targets| {
                    let policy = ExecvePolicy {
                        mode: opts.execve_mode,
                        targets,
                    };
                    let dir = exec_dir.clone().unwrap_or_default();
                    let sets = load_target_sets(&dir, &policy)?;
                    Ok((compose_execve(&policy, &p.base, &sets)?, policy))
                });
            match composed {
                Ok((c, policy)) => {
                    p.syscalls = c.set;
                    p.exec_filters = c.exec_filters;
                    p.exec_targets = policy.targets;
                }
                Err(e) if is_soundness_failure(&e) => p.failure = Some(e.to_string()),
                Err(e) => return Err(e),
            }
        }
        if p.failure.is_none() && !p.syscalls.is_resolved() {
            let sites: Vec<String> = p.syscalls.unresolved_sites.iter().map(|s| format!("{s:#x}")).collect();
            match opts.unresolved {
                UnresolvedPolicy::Error => {
                    p.failure = Some(format!("unresolved syscall sites: {}", sites.join(", ")))
                }
                UnresolvedPolicy::AllowAll => {
                    warnings.push(format!(
                        "partition {}: unresolved syscall sites {}; allowing every syscall",
                        p.id,
                        sites.join(", ")
                    ));
                    p.allow_all = true;
                    for nr in all_numbers() {
                        if !p.syscalls.contains(nr) {
                            for &s in &p.base.unresolved_sites.clone() {
                                p.syscalls.insert(nr, s);
                            }
                        }
                    }
                }
            }
        }
        partitions.push(p);
    }
    Ok(StaticResult {
        dll,
        incorporations,
        fcg: fcg_doc,
        fcg_dot,
        refined: fcg.to_doc(&linked),
        refinement,
        whole_image: analysis.whole_image_set(),
        main: analysis.main_set(),
        partitions,
        warnings,
        image: full.clone(),
    })
}

/// Compiles and installs a filter for every partition without a failure.
/// Filters go into `image` (the program as given, without incorporated
/// libraries), so the hardened program differs only by the installs.
pub fn harden(
    image: &ProgramImage,
    partitions: &mut [PartitionResult],
    deny: DenyAction,
) -> Result<ProgramImage, AnalysisError> {
    let mut out = image.clone();
    for p in partitions.iter_mut() {
        if p.failure.is_some() {
            continue;
        }
        let prog = compile_filter(&p.syscalls.numbers, deny);
        match insert_filter(&out, p.id, &p.transition.function, p.transition.addr, prog) {
            Ok((next, site)) => {
                out = next;
                p.install = Some(site);
            }
            Err(e @ AnalysisError::Placement { .. }) => p.failure = Some(e.to_string()),
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

pub fn security_report(
    st: &StaticResult,
    payloads: &[Payload],
) -> Result<SecurityReport, AnalysisError> {
    let mut partitions = Vec::new();
    for p in &st.partitions {
        partitions.push(PartitionReport {
            id: p.id,
            size: p.syscalls.numbers.len(),
            sensitive: sensitive_report(&st.whole_image.numbers, &st.main.numbers, &p.syscalls.numbers),
            payloads: payload_report(&p.syscalls.numbers, payloads)?,
        });
    }
    Ok(SecurityReport {
        whole_image: st.whole_image.numbers.clone(),
        main: st.main.numbers.clone(),
        partitions,
    })
}

/// Everything one `analyze` run produces.
#[derive(Debug, Clone)]
pub struct Bundle {
    pub loops: BTreeMap<FuncRef, FunctionLoops>,
    pub traces: Vec<TraceLog>,
    pub profiles: Vec<LoopProfile>,
    pub transition_points: Vec<TransitionEntry>,
    pub observations: DynamicObservations,
    pub result: StaticResult,
    pub hardened: ProgramImage,
    pub report: SecurityReport,
    pub summary: Summary,
}

/// A stage failure, with the artifacts of the stages that completed.
#[derive(Debug)]
pub struct StageError {
    pub stage: &'static str,
    pub error: AnalysisError,
    pub partial: Vec<(String, Vec<u8>)>,
}

impl std::fmt::Display for StageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.stage, self.error)
    }
}

impl std::error::Error for StageError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

/// The program, library corpus and scenarios named by a configuration.
#[derive(Debug, Clone)]
pub struct Inputs {
    pub image: ProgramImage,
    pub corpus: Vec<ModuleUnit>,
    pub scenarios: Vec<Scenario>,
    pub warnings: Vec<String>,
}

impl Inputs {
    pub fn load(config: &Config) -> Result<Inputs, AnalysisError> {
        config.check()?;
        let image = crate::pmir::load_image(&config.image)?;
        let mut warnings = Vec::new();
        let corpus = match &config.corpus {
            Some(dir) => {
                let (mods, errs) = load_corpus(dir);
                warnings.extend(errs.iter().map(|e| format!("corpus: {e}")));
                mods
            }
            None => Vec::new(),
        };
        let scenarios = load_scenarios(&config.scenarios, config.budget)?;
        Ok(Inputs {
            image,
            corpus,
            scenarios,
            warnings,
        })
    }

    pub fn traces(&self) -> Result<Vec<TraceLog>, AnalysisError> {
        self.scenarios
            .iter()
            .map(|s| execute(&self.image, &self.corpus, s))
            .collect()
    }
}

impl StaticOptions {
    pub fn from_config(config: &Config) -> Result<StaticOptions, AnalysisError> {
        Ok(StaticOptions {
            execve_mode: config.execve_mode,
            execve_targets: match &config.execve_targets {
                Some(p) => ExecTargetFile::load(p)?,
                None => ExecTargetFile::default(),
            },
            exec_images: config.exec_images.clone().or_else(|| config.corpus.clone()),
            unresolved: config.unresolved,
        })
    }
}

/// Runs the whole pipeline.
pub fn analyze(config: &Config) -> Result<Bundle, StageError> {
    let mut partial = Vec::new();
    macro_rules! stage {
        ($name:literal, $e:expr) => {
            match $e {
                Ok(v) => v,
                Err(error) => {
                    return Err(StageError {
                        stage: $name,
                        error: error.into(),
                        partial,
                    })
                }
            }
        };
    }
    let inputs = stage!("load", Inputs::load(config));
    let loops = loops_of(&inputs.image, &inputs.corpus);
    partial.push(("loops.json".to_string(), to_json(&loops)));
    let top = top_level_loops(&loops);
    let traces = stage!("trace", inputs.traces());
    partial.push(("traces.json".to_string(), to_json(&traces)));
    let (profiles, points, mut warnings) = transition_points(&traces, &top);
    partial.push(("profiles.json".to_string(), to_json(&profiles)));
    partial.push(("transition_points.json".to_string(), to_json(&points)));
    let mut obs = DynamicObservations::from_traces(&traces);
    if let Some(p) = &config.observations {
        obs.merge(&stage!("dll", DynamicObservations::load(p)));
    }
    let opts = stage!("syscalls", StaticOptions::from_config(config));
    let mut result = stage!(
        "syscalls",
        analyze_static(&inputs.image, &inputs.corpus, &obs, &points, &opts)
    );
    let hardened = stage!("filter", harden(&inputs.image, &mut result.partitions, config.deny));
    let payloads: Vec<Payload> = match &config.payloads {
        Some(p) => stage!("report", read_json(p)),
        None => Vec::new(),
    };
    let report = stage!("report", security_report(&result, &payloads));
    warnings.splice(0..0, inputs.warnings.iter().cloned());
    warnings.extend(result.warnings.iter().cloned());
    let failed = result.partitions.iter().any(|p| p.failure.is_some());
    let summary = Summary {
        status: if failed { Status::Unresolved } else { Status::Ok },
        partitions: result.partitions.len(),
        filters: result.partitions.iter().filter(|p| p.has_filter()).count(),
        edges_before: result.refinement.edges_before,
        edges_after: result.refinement.edges_after,
        whole_image: result.whole_image.numbers.len(),
        main: result.main.numbers.len(),
        partition_sizes: result.partitions.iter().map(|p| p.syscalls.numbers.len()).collect(),
        warnings,
    };
    Ok(Bundle {
        loops,
        traces,
        profiles,
        transition_points: points,
        observations: obs,
        result,
        hardened,
        report,
        summary,
    })
}

/// Writes `files` under `dir`.
pub fn write_files(dir: &Path, files: &[(String, Vec<u8>)]) -> Result<(), AnalysisError> {
    for (rel, bytes) in files {
        let path = dir.join(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
        }
        std::fs::write(&path, bytes).map_err(|e| io_err(&path, e))?;
    }
    Ok(())
}

pub fn to_json<T: Serialize>(v: &T) -> Vec<u8> {
    let mut s = serde_json::to_vec_pretty(v).expect("serializable");
    s.push(b'\n');
    s
}

impl Bundle {
    /// Output files by relative path, in a fixed order.
    pub fn files(&self) -> Vec<(String, Vec<u8>)> {
        let r = &self.result;
        let mut files = vec![
            ("summary.json".to_string(), to_json(&self.summary)),
            ("loops.json".into(), to_json(&self.loops)),
            ("traces.json".into(), to_json(&self.traces)),
            ("profiles.json".into(), to_json(&self.profiles)),
            ("transition_points.json".into(), to_json(&self.transition_points)),
            ("observations.json".into(), to_json(&self.observations)),
            ("fcg.json".into(), to_json(&r.fcg)),
            ("fcg.dot".into(), r.fcg_dot.clone().into_bytes()),
            ("fcg_refined.json".into(), to_json(&r.refined)),
            ("refinement.json".into(), to_json(&r.refinement)),
            ("dll.json".into(), to_json(&r.dll)),
            ("dll.txt".into(), r.dll.to_text().into_bytes()),
            ("incorporations.json".into(), to_json(&r.incorporations)),
            ("syscalls.json".into(), to_json(&r.partitions)),
            ("report.json".into(), to_json(&self.report)),
            ("report.txt".into(), report_text(&self.report).into_bytes()),
            ("hardened.pmir.json".into(), serialize_image(&self.hardened)),
        ];
        for p in &r.partitions {
            if p.has_filter() {
                let prog = &self.hardened.filters[&p.id];
                files.push((format!("filters/partition-{}.bpf", p.id), to_blob(prog)));
                files.push((format!("filters/partition-{}.txt", p.id), disassemble(prog).into_bytes()));
            }
            for (target, set) in &p.exec_filters {
                let prog = compile_filter(set, DenyAction::default());
                let name = crate::dll::library_name(target);
                files.push((format!("filters/partition-{}-exec-{}.bpf", p.id, name), to_blob(&prog)));
            }
        }
        files
    }

    pub fn write(&self, dir: &Path) -> Result<(), AnalysisError> {
        write_files(dir, &self.files())
    }
}

pub fn report_text(r: &SecurityReport) -> String {
    let mut s = format!("whole image: {} syscalls\nmain(): {} syscalls\n", r.whole_image.len(), r.main.len());
    for p in &r.partitions {
        s.push_str(&format!("\npartition {}: {} syscalls\n", p.id, p.size));
        s.push_str(&crate::report::sensitive_text(&p.sensitive));
        if !p.payloads.is_empty() {
            s.push('\n');
            s.push_str(&crate::report::payload_text(&p.payloads));
        }
    }
    s
}
