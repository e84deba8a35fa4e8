//! Libraries and symbols loaded at run time through `dlopen`/`dlsym`.
//!
//! Arguments are first resolved statically by backward value flow. When
//! every `dlsym` symbol is known but some `dlopen` filename is not, the
//! library corpus is searched for modules exporting those symbols.
//! Arguments recorded at run time fill the remaining gaps. Results are
//! folded back into the image as extra libraries and `dlsym` bindings.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::AnalysisError;
use crate::fcg::Fcg;
use crate::intrinsics::Intrinsic;
use crate::pmir::{DlBinding, FuncRef, Linked, ModuleKind, ModuleUnit, ProgramImage};
use crate::tracer::{EventKind, TraceLog};
use crate::vfa::{resolve_argument, Blocker, BlockerReason, ResolvedValue, Status, ValueResolution, VfaCtx};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DlApi {
    Dlopen,
    Dlsym,
    Execve,
}

/// One argument seen at run time.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Observation {
    pub callsite: u64,
    pub api: DlApi,
    pub arg: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DynamicObservations {
    pub records: BTreeSet<Observation>,
}

impl DynamicObservations {
    pub fn from_traces<'t>(traces: impl IntoIterator<Item = &'t TraceLog>) -> Self {
        let mut records = BTreeSet::new();
        for t in traces {
            for e in &t.events {
                let (api, arg) = match &e.kind {
                    EventKind::Dlopen { arg } => (DlApi::Dlopen, arg),
                    EventKind::Dlsym { arg } => (DlApi::Dlsym, arg),
                    EventKind::Execve { arg } => (DlApi::Execve, arg),
                    _ => continue,
                };
                records.insert(Observation {
                    callsite: e.addr,
                    api,
                    arg: arg.clone(),
                });
            }
        }
        DynamicObservations { records }
    }

    pub fn load(path: &Path) -> Result<Self, AnalysisError> {
        let text = std::fs::read_to_string(path).map_err(|source| AnalysisError::Io {
            context: path.display().to_string(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|source| AnalysisError::Json {
            context: path.display().to_string(),
            source,
        })
    }

    pub fn merge(&mut self, other: &DynamicObservations) {
        self.records.extend(other.records.iter().cloned());
    }

    pub fn args(&self, api: DlApi, callsite: u64) -> BTreeSet<String> {
        self.records
            .iter()
            .filter(|r| r.api == api && r.callsite == callsite)
            .map(|r| r.arg.clone())
            .collect()
    }

    /// Checks that every record names an instruction of `linked`.
    pub fn unknown_sites(&self, linked: &Linked) -> Vec<u64> {
        self.records
            .iter()
            .map(|r| r.callsite)
            .filter(|&a| linked.loc(a).is_none())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Classification {
    Full,
    Partial,
    Unresolved,
}

impl From<Status> for Classification {
    fn from(s: Status) -> Self {
        match s {
            Status::FullyResolved => Classification::Full,
            Status::PartiallyResolved => Classification::Partial,
            Status::Unresolved => Classification::Unresolved,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DlSite {
    pub site: u64,
    pub caller: FuncRef,
    pub api: DlApi,
    pub resolution: ValueResolution,
    pub classification: Classification,
    pub observed: bool,
    pub observed_args: BTreeSet<String>,
}

impl DlSite {
    /// Statically resolved strings plus observed ones.
    pub fn args(&self) -> BTreeSet<String> {
        let mut s = self.resolution.strings();
        s.extend(self.observed_args.iter().cloned());
        s
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tally {
    pub full: usize,
    pub partial: usize,
    pub unresolved: usize,
    pub full_observed: usize,
    pub partial_observed: usize,
    pub unresolved_observed: usize,
}

impl Tally {
    fn of(sites: &[DlSite]) -> Tally {
        let mut t = Tally::default();
        for s in sites {
            let (n, o) = match s.classification {
                Classification::Full => (&mut t.full, &mut t.full_observed),
                Classification::Partial => (&mut t.partial, &mut t.partial_observed),
                Classification::Unresolved => (&mut t.unresolved, &mut t.unresolved_observed),
            };
            *n += 1;
            if s.observed {
                *o += 1;
            }
        }
        t
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DlResolutionReport {
    pub dlopen: Vec<DlSite>,
    pub dlsym: Vec<DlSite>,
    /// Basenames of libraries named by resolved `dlopen` arguments.
    pub static_libraries: BTreeSet<String>,
    pub heuristic_libraries: BTreeSet<String>,
    pub observed_libraries: BTreeSet<String>,
    /// Symbols per `dlsym` callsite, static and observed.
    pub symbols: BTreeMap<u64, BTreeSet<String>>,
    pub dlopen_tally: Tally,
    pub dlsym_tally: Tally,
    pub warnings: Vec<String>,
}

impl DlResolutionReport {
    pub fn libraries(&self) -> BTreeSet<String> {
        self.static_libraries
            .iter()
            .chain(&self.heuristic_libraries)
            .chain(&self.observed_libraries)
            .cloned()
            .collect()
    }

    /// Full/partial/unresolved counts with observed counts in parentheses.
    pub fn to_text(&self) -> String {
        let mut s = String::from("api     full    partial unres.\n");
        for (name, t) in [("dlopen", &self.dlopen_tally), ("dlsym", &self.dlsym_tally)] {
            let cell = |n: usize, o: usize| format!("{n} ({o})");
            let _ = writeln!(
                s,
                "{:<7} {:<7} {:<7} {}",
                name,
                cell(t.full, t.full_observed),
                cell(t.partial, t.partial_observed),
                cell(t.unresolved, t.unresolved_observed)
            );
        }
        s
    }
}

/// Library module name for a `dlopen` path argument.
pub fn library_name(path: &str) -> &str {
    path.rsplit('/').next().unwrap_or(path)
}

/// String-valued resolution of one argument; other values become
/// type-mismatch blockers.
fn string_argument(ctx: &VfaCtx, fcg: &Fcg, site: u64, idx: usize) -> ValueResolution {
    let r = resolve_argument(ctx, fcg, site, idx);
    let mut values = BTreeSet::new();
    let mut blockers = r.blockers;
    for v in r.values {
        if matches!(v, ResolvedValue::Str(_)) {
            values.insert(v);
        } else {
            blockers.insert(Blocker {
                site,
                reason: BlockerReason::TypeMismatch,
            });
        }
    }
    ValueResolution::new(values, blockers)
}

/// Resolves the filename of every reachable `dlopen` and the symbol of
/// every reachable `dlsym` by backward value flow.
pub fn static_resolve_dl(ctx: &VfaCtx, fcg: &Fcg) -> DlResolutionReport {
    let mut dlopen = Vec::new();
    let mut dlsym = Vec::new();
    for (&site, &(caller, which)) in &fcg.intrinsic_sites {
        let (api, idx, out) = match which {
            Intrinsic::Dlopen => (DlApi::Dlopen, 0, &mut dlopen),
            Intrinsic::Dlsym => (DlApi::Dlsym, 1, &mut dlsym),
            _ => continue,
        };
        let resolution = string_argument(ctx, fcg, site, idx);
        out.push(DlSite {
            site,
            caller: ctx.linked.func_ref(caller),
            api,
            classification: resolution.status.into(),
            resolution,
            observed: false,
            observed_args: BTreeSet::new(),
        });
    }
    let static_libraries = dlopen
        .iter()
        .flat_map(|s| s.resolution.strings())
        .map(|p| library_name(&p).to_string())
        .collect();
    let symbols = dlsym.iter().map(|s| (s.site, s.args())).collect();
    DlResolutionReport {
        dlopen_tally: Tally::of(&dlopen),
        dlsym_tally: Tally::of(&dlsym),
        dlopen,
        dlsym,
        static_libraries,
        heuristic_libraries: BTreeSet::new(),
        observed_libraries: BTreeSet::new(),
        symbols,
        warnings: Vec::new(),
    }
}

/// Names of corpus libraries exporting at least one of `symbols`.
pub fn heuristic_library_search(symbols: &BTreeSet<String>, corpus: &[ModuleUnit]) -> BTreeSet<String> {
    corpus
        .iter()
        .filter(|m| m.kind == ModuleKind::SharedLibrary)
        .filter(|m| symbols.iter().any(|s| m.exports.contains_key(s)))
        .map(|m| m.name.clone())
        .collect()
}

/// Static resolution, then the corpus heuristic when every `dlsym` site is
/// fully resolved but some `dlopen` site is not, then observations.
pub fn resolve_dl(
    ctx: &VfaCtx,
    fcg: &Fcg,
    corpus: &[ModuleUnit],
    observations: &DynamicObservations,
) -> DlResolutionReport {
    let mut r = static_resolve_dl(ctx, fcg);
    let all_sym_full = r.dlsym.iter().all(|s| s.classification == Classification::Full);
    let some_open_open = r.dlopen.iter().any(|s| s.classification != Classification::Full);
    if !r.dlsym.is_empty() && all_sym_full && some_open_open {
        let symbols: BTreeSet<String> = r.dlsym.iter().flat_map(|s| s.resolution.strings()).collect();
        r.heuristic_libraries = heuristic_library_search(&symbols, corpus);
        if r.heuristic_libraries.is_empty() {
            r.warnings
                .push("no corpus library exports any resolved dlsym symbol".to_string());
        }
    }
    apply_observations(&mut r, observations);
    for s in r.dlopen.iter().chain(&r.dlsym) {
        if s.classification != Classification::Full && !s.observed {
            r.warnings.push(format!(
                "{} argument at {:#x} in {} is not fully resolved and was not observed",
                match s.api {
                    DlApi::Dlopen => "dlopen",
                    _ => "dlsym",
                },
                s.site,
                s.caller
            ));
        }
    }
    r
}

/// Marks sites with matching records and adds their arguments.
pub fn apply_observations(r: &mut DlResolutionReport, obs: &DynamicObservations) {
    for s in r.dlopen.iter_mut().chain(r.dlsym.iter_mut()) {
        let seen = obs.args(s.api, s.site);
        if !seen.is_empty() {
            s.observed = true;
            s.observed_args = seen;
        }
    }
    for s in &r.dlopen {
        for a in &s.observed_args {
            r.observed_libraries.insert(library_name(a).to_string());
        }
    }
    // Observed loads at sites the graph does not reach still count.
    for o in obs.records.iter().filter(|o| o.api == DlApi::Dlopen) {
        r.observed_libraries.insert(library_name(&o.arg).to_string());
    }
    for s in &r.dlsym {
        r.symbols.insert(s.site, s.args());
    }
    for o in obs.records.iter().filter(|o| o.api == DlApi::Dlsym) {
        r.symbols.entry(o.callsite).or_default().insert(o.arg.clone());
    }
    r.dlopen_tally = Tally::of(&r.dlopen);
    r.dlsym_tally = Tally::of(&r.dlsym);
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Incorporation {
    pub added_libraries: Vec<String>,
    pub added_bindings: Vec<DlBinding>,
    pub missing_libraries: Vec<String>,
}

impl Incorporation {
    pub fn is_empty(&self) -> bool {
        self.added_libraries.is_empty() && self.added_bindings.is_empty()
    }
}

/// Adds the report's libraries to `image` and binds every known `dlsym`
/// symbol to each of its exporters, as taken at the `dlsym` callsite.
///
/// An observed library missing from the corpus is an error; a statically
/// named one is only reported, since loading it would fail at run time too.
pub fn incorporate(
    image: &ProgramImage,
    corpus: &[ModuleUnit],
    report: &DlResolutionReport,
) -> Result<(ProgramImage, Incorporation), AnalysisError> {
    let mut out = image.clone();
    let mut inc = Incorporation::default();
    for name in report.libraries() {
        if out.module(&name).is_some() {
            continue;
        }
        match corpus.iter().find(|m| m.name == name) {
            Some(m) => {
                out.libraries.push(m.clone());
                inc.added_libraries.push(name);
            }
            None if report.observed_libraries.contains(&name) => {
                let site = report
                    .dlopen
                    .iter()
                    .find(|s| s.observed_args.iter().any(|a| library_name(a) == name))
                    .map_or(0, |s| s.site);
                return Err(AnalysisError::MissingLibrary { name, site });
            }
            None => {
                log::warn!("library `{name}` named by dlopen is not in the corpus");
                inc.missing_libraries.push(name);
            }
        }
    }
    crate::pmir::check_addresses(&out, &[])?;
    let linked = Linked::new(&out);
    let mut bindings: BTreeSet<DlBinding> = out.dl_bindings.iter().cloned().collect();
    for (&site, syms) in &report.symbols {
        for sym in syms {
            for f in linked.exporters(sym) {
                let b = DlBinding {
                    callsite: site,
                    target: linked.func_ref(f),
                };
                if bindings.insert(b.clone()) {
                    inc.added_bindings.push(b);
                }
            }
        }
    }
    drop(linked);
    out.dl_bindings = bindings.into_iter().collect();
    Ok((out, inc))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fcg::build_fcg;
    use crate::pmir::{ImageBuilder, ModuleBuilder, Reg};

    fn plugin(name: &str, base: u64, symbol: &str, nr: i64) -> ModuleUnit {
        let mut m = ModuleBuilder::library(name, base);
        m.exported(symbol, |f| {
            f.block(0).sys(nr).ret();
        });
        m.finish()
    }

    fn report_for(img: &ProgramImage, corpus: &[ModuleUnit], obs: &DynamicObservations) -> DlResolutionReport {
        let l = Linked::new(img);
        let (g, _) = build_fcg(&l);
        let ctx = VfaCtx::new(&l);
        resolve_dl(&ctx, &g, corpus, obs)
    }

    fn loader(path: Option<&str>, sym: &str) -> ProgramImage {
        let mut m = ModuleBuilder::executable("app", 0x10000);
        m.function("main", |f| {
            let b = f.block(0);
            match path {
                Some(p) => b.string(Reg::Rdi, p),
                None => b.load(Reg::Rdi),
            };
            b.plt("dlopen")
                .mov(Reg::Rdi, Reg::Rax)
                .string(Reg::Rsi, sym)
                .plt("dlsym")
                .call_reg(Reg::Rax)
                .ret();
        });
        ImageBuilder::new(m.finish()).build()
    }

    #[test]
    fn hardcoded_filename_is_full() {
        let img = loader(Some("/usr/lib/libfoo.so"), "foo_init");
        let r = report_for(&img, &[], &DynamicObservations::default());
        assert_eq!(r.dlopen[0].classification, Classification::Full);
        assert_eq!(r.static_libraries, BTreeSet::from(["libfoo.so".to_string()]));
        assert_eq!(r.dlopen_tally.full, 1);
    }

    #[test]
    fn config_read_is_unresolved_then_heuristic() {
        let img = loader(None, "dlz_create");
        let corpus = [
            plugin("libdlz.so", 0x900000, "dlz_create", 2),
            plugin("libother.so", 0x910000, "other", 3),
        ];
        let r = report_for(&img, &corpus, &DynamicObservations::default());
        assert_eq!(r.dlopen[0].classification, Classification::Unresolved);
        assert_eq!(
            r.dlopen[0].resolution.blockers.iter().next().unwrap().reason,
            BlockerReason::MemoryLoad
        );
        assert_eq!(r.heuristic_libraries, BTreeSet::from(["libdlz.so".to_string()]));
    }

    #[test]
    fn heuristic_returns_every_exporter() {
        let corpus = [
            plugin("liba.so", 0x900000, "s", 2),
            plugin("libb.so", 0x910000, "s", 3),
        ];
        let found = heuristic_library_search(&BTreeSet::from(["s".to_string()]), &corpus);
        assert_eq!(found.len(), 2);
        assert!(heuristic_library_search(&BTreeSet::from(["t".to_string()]), &corpus).is_empty());
    }

    #[test]
    fn observation_marks_site_and_adds_library() {
        let img = loader(None, "h");
        let site = report_for(&img, &[], &DynamicObservations::default()).dlopen[0].site;
        let obs = DynamicObservations {
            records: BTreeSet::from([Observation {
                callsite: site,
                api: DlApi::Dlopen,
                arg: "mod_ssl.so".into(),
            }]),
        };
        let corpus = [plugin("mod_ssl.so", 0x900000, "h", 44)];
        let r = report_for(&img, &[], &obs);
        assert!(r.dlopen[0].observed);
        assert_eq!(r.dlopen_tally.unresolved_observed, 1);
        let (out, inc) = incorporate(&img, &corpus, &r).unwrap();
        assert_eq!(inc.added_libraries, ["mod_ssl.so"]);
        assert_eq!(out.dl_bindings.len(), 1);
        assert_eq!(out.dl_bindings[0].target, FuncRef::new("mod_ssl.so", "h"));
        // Missing observed library is an error.
        assert!(matches!(
            incorporate(&img, &[], &r),
            Err(AnalysisError::MissingLibrary { .. })
        ));
    }

    #[test]
    fn symbol_bound_to_all_exporters() {
        let img = loader(Some("liba.so"), "s");
        let corpus = [
            plugin("liba.so", 0x900000, "s", 2),
            plugin("libb.so", 0x910000, "s", 3),
        ];
        let mut r = report_for(&img, &corpus, &DynamicObservations::default());
        r.heuristic_libraries.insert("libb.so".into());
        let (out, _) = incorporate(&img, &corpus, &r).unwrap();
        assert_eq!(out.dl_bindings.len(), 2);
        let l = Linked::new(&out);
        let (g, _) = build_fcg(&l);
        assert_eq!(g.at_set.len(), 2);
    }

    #[test]
    fn two_constant_symbols_reach_one_dlsym() {
        let mut m = ModuleBuilder::executable("app", 0x10000);
        m.function("main", |f| {
            f.block(0).call("a").call("b").ret();
        });
        m.function("a", |f| {
            f.block(0).string(Reg::Rsi, "x").call("get").ret();
        });
        m.function("b", |f| {
            f.block(0).string(Reg::Rsi, "y").call("get").ret();
        });
        m.function("get", |f| {
            f.block(0).plt("dlsym").ret();
        });
        let img = ImageBuilder::new(m.finish()).build();
        let r = report_for(&img, &[], &DynamicObservations::default());
        assert_eq!(r.dlsym[0].classification, Classification::Full);
        assert_eq!(r.symbols.values().next().unwrap().len(), 2);
    }

    #[test]
    fn no_observations_no_new_libraries() {
        let img = loader(Some("liba.so"), "s");
        let corpus = [plugin("liba.so", 0x900000, "s", 2)];
        let r = report_for(&img, &corpus, &DynamicObservations::default());
        let (once, _) = incorporate(&img, &corpus, &r).unwrap();
        let (twice, inc) = incorporate(&once, &corpus, &r).unwrap();
        assert_eq!(once, twice);
        assert!(inc.is_empty());
    }
}
