//! Syscall sets: numbers at each invocation site, per-function reachable
//! sets, and the set reachable from a transition point.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet, VecDeque};

use petgraph::algo::tarjan_scc;
use petgraph::graph::{DiGraph, NodeIndex};
use serde::{Deserialize, Serialize};

use crate::error::AnalysisError;
use crate::fcg::{EdgeKind, Fcg};
use crate::intrinsics::Intrinsic;
use crate::pmir::{FuncId, Linked, Op, Reg};
use crate::systable::MAX_NR;
use crate::tracer::TransitionPoint;
use crate::vfa::{resolve_use, ResolvedValue, VfaCtx};

mod execve;

pub use execve::{
    compose_execve, exec_site_targets, load_target_sets, program_syscalls, target_image_path,
    Composed, ExecTargetFile,
    ExecveMode, ExecvePolicy,
};

pub const EXECVE: u32 = 59;
pub const EXECVEAT: u32 = 322;
const EXIT: u32 = 60;
const EXIT_GROUP: u32 = 231;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyscallSet {
    pub numbers: BTreeSet<u32>,
    /// Sites witnessing each number.
    pub provenance: BTreeMap<u32, BTreeSet<u64>>,
    /// Syscall sites whose number is not fully known.
    pub unresolved_sites: BTreeSet<u64>,
    /// Sites that may replace the program (`execve`, `execveat`).
    pub exec_sites: BTreeSet<u64>,
}

impl SyscallSet {
    pub fn insert(&mut self, nr: u32, site: u64) {
        assert!(nr <= MAX_NR, "syscall number {nr} out of range");
        self.numbers.insert(nr);
        self.provenance.entry(nr).or_default().insert(site);
    }

    pub fn union(&mut self, other: &SyscallSet) {
        self.numbers.extend(&other.numbers);
        for (nr, sites) in &other.provenance {
            self.provenance.entry(*nr).or_default().extend(sites);
        }
        self.unresolved_sites.extend(&other.unresolved_sites);
        self.exec_sites.extend(&other.exec_sites);
    }

    pub fn contains(&self, nr: u32) -> bool {
        self.numbers.contains(&nr)
    }

    pub fn is_resolved(&self) -> bool {
        self.unresolved_sites.is_empty()
    }
}

/// A thread's serving phase and the syscalls it may issue.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub id: u32,
    pub transition: TransitionPoint,
    pub syscalls: SyscallSet,
    /// Block receiving the filter installation, once placed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub install_block: Option<u32>,
}

/// Register holding the syscall number at a site, if `op` is one.
fn number_register(op: &Op) -> Option<Reg> {
    match op {
        Op::SyscallInstr => Some(Reg::Rax),
        Op::CallPlt { symbol } if Intrinsic::from_symbol(symbol) == Some(Intrinsic::Syscall) => {
            Some(Reg::Rdi)
        }
        _ => None,
    }
}

/// Syscalls issued at one instruction: the resolved number of a raw
/// syscall or `syscall()` call, or the footprint of a library entry point.
/// Returns `None` for instructions that issue none. Out-of-range constants
/// are reported through `warnings`.
pub fn site_syscalls(
    ctx: &VfaCtx,
    fcg: &Fcg,
    f: FuncId,
    block: usize,
    instr: usize,
    warnings: &mut Vec<String>,
) -> Option<SyscallSet> {
    let ins = &ctx.linked.func(f).blocks[block].instructions[instr];
    let site = ins.address;
    let mut set = SyscallSet::default();
    let intrinsic = match &ins.op {
        Op::CallPlt { symbol } => Intrinsic::from_symbol(symbol),
        _ => None,
    };
    let reg = number_register(&ins.op);
    if reg.is_none() && intrinsic.is_none() {
        return None;
    }
    if let Some(i) = intrinsic {
        for &nr in i.syscalls() {
            set.insert(nr, site);
        }
        if i == Intrinsic::Execve {
            set.exec_sites.insert(site);
        }
    }
    if let Some(reg) = reg {
        let r = resolve_use(ctx, fcg, site, reg);
        let mut complete = r.is_full();
        for v in &r.values {
            match v {
                ResolvedValue::Int(n) if (0..=MAX_NR as i64).contains(n) => set.insert(*n as u32, site),
                ResolvedValue::Int(n) => {
                    warnings.push(format!("syscall site {site:#x}: number {n} is outside the table"))
                }
                _ => complete = false,
            }
        }
        if !complete {
            set.unresolved_sites.insert(site);
        }
        if set.contains(EXECVE) || set.contains(EXECVEAT) {
            set.exec_sites.insert(site);
        }
    }
    Some(set)
}

/// Union of the syscalls issued directly by `f`.
pub fn find_direct_syscalls(ctx: &VfaCtx, fcg: &Fcg, f: FuncId) -> SyscallSet {
    let mut set = SyscallSet::default();
    let mut warnings = Vec::new();
    for (b, blk) in ctx.linked.func(f).blocks.iter().enumerate() {
        for i in 0..blk.instructions.len() {
            if let Some(s) = site_syscalls(ctx, fcg, f, b, i, &mut warnings) {
                set.union(&s);
            }
        }
    }
    set
}

/// Closes `direct` over `edges`: every node's set gains the sets of all
/// nodes it reaches. Strongly connected components share one set.
pub fn propagate_sets(
    nodes: &BTreeSet<FuncId>,
    edges: impl IntoIterator<Item = (FuncId, FuncId)>,
    direct: impl Fn(FuncId) -> SyscallSet,
) -> BTreeMap<FuncId, SyscallSet> {
    let mut g: DiGraph<FuncId, ()> = DiGraph::new();
    let idx: HashMap<FuncId, NodeIndex> = nodes.iter().map(|&f| (f, g.add_node(f))).collect();
    for (a, b) in edges {
        if let (Some(&x), Some(&y)) = (idx.get(&a), idx.get(&b)) {
            g.update_edge(x, y, ());
        }
    }
    let mut out: BTreeMap<FuncId, SyscallSet> = BTreeMap::new();
    // Components come out successors first.
    for scc in tarjan_scc(&g) {
        let mut set = SyscallSet::default();
        for &n in &scc {
            set.union(&direct(g[n]));
            for s in g.neighbors(n) {
                if let Some(r) = out.get(&g[s]) {
                    set.union(r);
                }
            }
        }
        for &n in &scc {
            out.insert(g[n], set.clone());
        }
    }
    out
}

/// Per-function reachable sets over every edge of `fcg`, spawn edges
/// included: a spawned thread inherits its spawner's filter.
pub fn reachable_syscalls_per_function(
    fcg: &Fcg,
    direct: &BTreeMap<FuncId, SyscallSet>,
) -> BTreeMap<FuncId, SyscallSet> {
    propagate_sets(
        &fcg.nodes,
        fcg.edges.iter().map(|e| (e.caller, e.callee)),
        |f| direct.get(&f).cloned().unwrap_or_default(),
    )
}

/// Functions that never return: greatest fixpoint where a function stays
/// noreturn while no CFG path from its entry reaches `ret`. A path ends at
/// an exiting library call, at a syscall site resolved only to exit
/// numbers, and at a call all of whose targets are noreturn.
pub fn noreturn_analysis(
    linked: &Linked,
    fcg: &Fcg,
    sites: &BTreeMap<u64, SyscallSet>,
) -> BTreeSet<FuncId> {
    let targets = site_targets(fcg);
    let exits = |site: u64| {
        sites.get(&site).is_some_and(|s| {
            s.is_resolved()
                && !s.numbers.is_empty()
                && s.numbers.iter().all(|&n| n == EXIT || n == EXIT_GROUP)
        })
    };
    let mut nr: BTreeSet<FuncId> = linked.func_ids().collect();
    loop {
        let returning: Vec<FuncId> = nr
            .iter()
            .copied()
            .filter(|&f| {
                let ends = |op: &Op, addr: u64| match op {
                    Op::CallPlt { symbol } if Intrinsic::from_symbol(symbol).is_some_and(|i| i.is_noreturn()) => true,
                    Op::SyscallInstr => exits(addr),
                    Op::CallPlt { .. } if number_register(op).is_some() => exits(addr),
                    op if op.is_call() => targets
                        .get(&addr)
                        .is_some_and(|ts| !ts.is_empty() && ts.iter().all(|t| nr.contains(t))),
                    _ => false,
                };
                reaches_ret(linked, f, ends)
            })
            .collect();
        if returning.is_empty() {
            return nr;
        }
        for f in returning {
            nr.remove(&f);
        }
    }
}

fn reaches_ret(linked: &Linked, f: FuncId, ends: impl Fn(&Op, u64) -> bool) -> bool {
    let func = linked.func(f);
    let cfg = linked.cfg(f);
    let mut seen = vec![false; func.blocks.len()];
    let mut work = vec![cfg.entry];
    while let Some(b) = work.pop() {
        if std::mem::replace(&mut seen[b], true) {
            continue;
        }
        let mut through = true;
        for ins in &func.blocks[b].instructions {
            if matches!(ins.op, Op::Ret) {
                return true;
            }
            if ends(&ins.op, ins.address) {
                through = false;
                break;
            }
        }
        if through {
            work.extend(&cfg.succs[b]);
        }
    }
    false
}

fn site_targets(fcg: &Fcg) -> BTreeMap<u64, BTreeSet<FuncId>> {
    let mut out: BTreeMap<u64, BTreeSet<FuncId>> = BTreeMap::new();
    for e in &fcg.edges {
        out.entry(e.site).or_default().insert(e.callee);
    }
    out
}

/// Start routines of every live `pthread_create` site. A site whose start
/// argument is not fully resolved is an error: a whole thread would go
/// unanalyzed.
pub fn thread_start_functions(ctx: &VfaCtx, fcg: &Fcg) -> Result<BTreeSet<FuncId>, AnalysisError> {
    let mut out = BTreeSet::new();
    for (&site, &(_, i)) in &fcg.intrinsic_sites {
        if i != Intrinsic::PthreadCreate {
            continue;
        }
        let r = resolve_use(ctx, fcg, site, Reg::Rdx);
        let funcs = r.funcs(ctx.linked);
        if !r.is_full() || funcs.len() != r.values.len() {
            return Err(AnalysisError::UnresolvedThreadStart { site });
        }
        out.extend(funcs);
    }
    Ok(out)
}

/// Everything the partition computation needs about one image.
#[derive(Debug, Clone)]
pub struct SyscallAnalysis {
    pub sites: BTreeMap<u64, SyscallSet>,
    pub direct: BTreeMap<FuncId, SyscallSet>,
    pub reach: BTreeMap<FuncId, SyscallSet>,
    pub noreturn: BTreeSet<FuncId>,
    pub thread_starts: BTreeSet<FuncId>,
    /// Loader roots in call order: preinit, init, main, fini.
    pub roots: Vec<FuncId>,
    pub fini: Vec<FuncId>,
    pub warnings: Vec<String>,
    targets: BTreeMap<u64, BTreeSet<FuncId>>,
}

impl SyscallAnalysis {
    pub fn new(ctx: &VfaCtx, fcg: &Fcg) -> Result<Self, AnalysisError> {
        let linked = ctx.linked;
        let mut warnings = Vec::new();
        let mut sites = BTreeMap::new();
        let mut direct = BTreeMap::new();
        for f in linked.func_ids() {
            let mut d = SyscallSet::default();
            for (b, blk) in linked.func(f).blocks.iter().enumerate() {
                for (i, ins) in blk.instructions.iter().enumerate() {
                    if let Some(s) = site_syscalls(ctx, fcg, f, b, i, &mut warnings) {
                        d.union(&s);
                        sites.insert(ins.address, s);
                    }
                }
            }
            direct.insert(f, d);
        }
        for c in &fcg.external_calls {
            warnings.push(format!(
                "call to `{}` at {:#x} in {} leaves the analyzed image",
                c.symbol, c.site, c.caller
            ));
        }
        let reach = reachable_syscalls_per_function(fcg, &direct);
        let noreturn = noreturn_analysis(linked, fcg, &sites);
        let thread_starts = thread_start_functions(ctx, fcg)?;
        let image = linked.image();
        let lookup = |refs: Vec<crate::pmir::FuncRef>| -> Vec<FuncId> {
            refs.iter().filter_map(|r| linked.lookup(r)).collect()
        };
        let mut roots: Vec<FuncId> = Vec::new();
        for f in lookup(image.preinit_refs())
            .into_iter()
            .chain(lookup(image.init_refs()))
            .chain(lookup(vec![image.main_ref()]))
            .chain(lookup(image.fini_refs()))
        {
            if !roots.contains(&f) {
                roots.push(f);
            }
        }
        Ok(SyscallAnalysis {
            sites,
            direct,
            reach,
            noreturn,
            thread_starts,
            roots,
            fini: lookup(image.fini_refs()),
            warnings,
            targets: site_targets(fcg),
        })
    }

    fn reach_of(&self, f: FuncId) -> SyscallSet {
        self.reach.get(&f).cloned().unwrap_or_default()
    }

    /// Every syscall issued anywhere in the image and its libraries.
    pub fn whole_image_set(&self) -> SyscallSet {
        let mut s = SyscallSet::default();
        for d in self.direct.values() {
            s.union(d);
        }
        s
    }

    /// Syscalls reachable from the loader roots.
    pub fn main_set(&self) -> SyscallSet {
        let mut s = SyscallSet::default();
        for &r in &self.roots {
            s.union(&self.reach_of(r));
        }
        s
    }

    /// Syscalls reachable from `tp`: the rest of its function, the
    /// continuations of its callers up to the thread's root, and the fini
    /// functions.
    ///
    /// The rest of a function is the remainder of the block at the start
    /// point plus every block reachable from it; calls contribute the
    /// reachable sets of all their targets. The ascent continues after each
    /// non-spawn callsite of the function and stops at functions that never
    /// return. Returning from a loader root runs the roots after it.
    pub fn partition_syscalls(
        &self,
        linked: &Linked,
        fcg: &Fcg,
        tp: &TransitionPoint,
    ) -> Result<SyscallSet, AnalysisError> {
        let not_found = || AnalysisError::TransitionNotFound {
            function: tp.function.to_string(),
            addr: tp.addr,
        };
        let loc = linked.loc(tp.addr).ok_or_else(not_found)?;
        if linked.func_ref(loc.func) != tp.function {
            return Err(not_found());
        }
        let mut sc = SyscallSet::default();
        for &f in &self.fini {
            sc.union(&self.reach_of(f));
        }
        let mut seen: HashSet<(FuncId, usize, usize)> = HashSet::new();
        let mut work = vec![(loc.func, loc.block, loc.instr)];
        while let Some((f, b, i)) = work.pop() {
            if !seen.insert((f, b, i)) {
                continue;
            }
            self.scan_from(linked, f, b, i, &mut sc);
            if self.noreturn.contains(&f) {
                continue;
            }
            if let Some(pos) = self.roots.iter().position(|&r| r == f) {
                for &r in &self.roots[pos + 1..] {
                    sc.union(&self.reach_of(r));
                }
            }
            for e in fcg.callers(f) {
                if e.kind == EdgeKind::Spawn {
                    continue;
                }
                let cl = linked.loc(e.site).expect("edge site exists");
                work.push((e.caller, cl.block, cl.instr + 1));
            }
        }
        Ok(sc)
    }

    fn scan_instr(&self, addr: u64, op: &Op, sc: &mut SyscallSet) {
        if let Some(s) = self.sites.get(&addr) {
            sc.union(s);
        }
        if op.is_call() {
            for &t in self.targets.get(&addr).into_iter().flatten() {
                sc.union(&self.reach_of(t));
            }
        }
    }

    fn scan_from(&self, linked: &Linked, f: FuncId, b: usize, i: usize, sc: &mut SyscallSet) {
        let func = linked.func(f);
        let cfg = linked.cfg(f);
        for ins in func.blocks[b].instructions.iter().skip(i) {
            self.scan_instr(ins.address, &ins.op, sc);
        }
        let mut seen = vec![false; func.blocks.len()];
        let mut work: VecDeque<usize> = cfg.succs[b].iter().copied().collect();
        while let Some(n) = work.pop_front() {
            if std::mem::replace(&mut seen[n], true) {
                continue;
            }
            for ins in &func.blocks[n].instructions {
                self.scan_instr(ins.address, &ins.op, sc);
            }
            work.extend(&cfg.succs[n]);
        }
    }
}
