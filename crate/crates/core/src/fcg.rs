//! Cross-module function call graph with linker emulation and
//! address-taken (AT) target sets.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::AnalysisError;
use crate::intrinsics::Intrinsic;
use crate::pmir::{FuncId, FuncRef, Linked, Op};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EdgeKind {
    Direct,
    Plt,
    IndirectResolved,
    IndirectAt,
    /// `pthread_create` site to a thread start routine.
    Spawn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Edge {
    pub site: u64,
    pub caller: FuncId,
    pub callee: FuncId,
    pub kind: EdgeKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SiteKind {
    Call,
    Spawn,
}

/// Target state of one indirect transfer (a `call_indirect`, or the start
/// routine argument of `pthread_create`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndirectSite {
    pub caller: FuncId,
    pub kind: SiteKind,
    /// Targets proven by backward value flow; `None` means the site may
    /// reach any AT function.
    pub resolved: Option<BTreeSet<FuncId>>,
    /// Functions removed from the AT set whose pointers were followed
    /// forward to this site.
    pub forward: BTreeSet<FuncId>,
    /// AT targets rejected by arity/return matching.
    pub pruned: BTreeSet<FuncId>,
}

/// A PLT call with no providing module.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ExternalCall {
    pub site: u64,
    pub caller: FuncRef,
    pub symbol: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fcg {
    pub roots: BTreeSet<FuncId>,
    pub nodes: BTreeSet<FuncId>,
    pub edges: BTreeSet<Edge>,
    pub at_set: BTreeSet<FuncId>,
    /// Addresses where each AT function's address is materialized
    /// (`take_addr`, `take_addr_data` or a `dlsym` callsite).
    pub at_sites: BTreeMap<FuncId, BTreeSet<u64>>,
    /// Referenced data objects, as `module::id`.
    pub live_objects: BTreeSet<String>,
    pub indirect: BTreeMap<u64, IndirectSite>,
    /// Calls to modeled library entry points, by callsite.
    pub intrinsic_sites: BTreeMap<u64, (FuncId, Intrinsic)>,
    pub external_calls: Vec<ExternalCall>,
    callers: BTreeMap<FuncId, Vec<Edge>>,
}

/// Looks `symbol` up in the executable's exports, then each library's in
/// dependency order.
pub fn resolve_plt(
    linked: &Linked,
    symbol: &str,
    requester: &FuncRef,
) -> Result<FuncId, AnalysisError> {
    (0..linked.image_module_count())
        .find_map(|mi| {
            let m = linked.modules()[mi];
            let local = m.exports.get(symbol)?;
            linked.resolve_in(mi, local)
        })
        .ok_or_else(|| AnalysisError::UnresolvedSymbol {
            symbol: symbol.to_string(),
            requester: requester.to_string(),
            searched: linked.modules()[..linked.image_module_count()]
                .iter()
                .map(|m| m.name.as_str())
                .collect::<Vec<_>>()
                .join(", "),
        })
}

/// Builds the call graph from the loader roots: preinit, init, `main` and
/// fini functions.
///
/// Direct and PLT calls add edges; address takes in reachable code feed the
/// AT set, including every member of a referenced constant array, and every
/// indirect call may reach any AT function. New reachable code may take new
/// addresses, so the construction repeats until nothing changes. Functions
/// bound by `dlsym` count as taken at the `dlsym` callsite.
pub fn build_fcg(linked: &Linked) -> (Fcg, Vec<AnalysisError>) {
    let image_roots = roots(linked);
    let mut g = Fcg {
        roots: image_roots.iter().copied().collect(),
        nodes: BTreeSet::new(),
        edges: BTreeSet::new(),
        at_set: BTreeSet::new(),
        at_sites: BTreeMap::new(),
        live_objects: BTreeSet::new(),
        indirect: BTreeMap::new(),
        intrinsic_sites: BTreeMap::new(),
        external_calls: Vec::new(),
        callers: BTreeMap::new(),
    };
    let mut errors = Vec::new();
    let mut direct: BTreeSet<Edge> = BTreeSet::new();
    let mut work: Vec<FuncId> = image_roots;
    loop {
        while let Some(f) = work.pop() {
            if !g.nodes.insert(f) {
                continue;
            }
            scan(linked, f, &mut g, &mut direct, &mut work, &mut errors);
        }
        // Indirect transfers may reach any AT function.
        let pending: Vec<FuncId> = if g.indirect.is_empty() {
            Vec::new()
        } else {
            g.at_set.difference(&g.nodes).copied().collect()
        };
        if pending.is_empty() {
            break;
        }
        work.extend(pending);
    }
    g.edges = direct;
    g.materialize();
    (g, errors)
}

fn roots(linked: &Linked) -> Vec<FuncId> {
    let image = image_of(linked);
    let mut out = Vec::new();
    for r in image
        .preinit_refs()
        .into_iter()
        .chain(image.init_refs())
        .chain(std::iter::once(image.main_ref()))
        .chain(image.fini_refs())
    {
        if let Some(f) = linked.lookup(&r) {
            if !out.contains(&f) {
                out.push(f);
            }
        }
    }
    out
}

fn image_of<'a>(linked: &Linked<'a>) -> &'a crate::pmir::ProgramImage {
    linked.image()
}

fn scan(
    linked: &Linked,
    f: FuncId,
    g: &mut Fcg,
    direct: &mut BTreeSet<Edge>,
    work: &mut Vec<FuncId>,
    errors: &mut Vec<AnalysisError>,
) {
    let mi = linked.module_index_of(f);
    let image = image_of(linked);
    for ins in linked.func(f).instructions() {
        let site = ins.address;
        match &ins.op {
            Op::CallDirect { func } => {
                let callee = linked.resolve_in(mi, func).expect("validated ref");
                direct.insert(Edge {
                    site,
                    caller: f,
                    callee,
                    kind: EdgeKind::Direct,
                });
                work.push(callee);
            }
            Op::CallPlt { symbol } => {
                if let Some(i) = Intrinsic::from_symbol(symbol) {
                    g.intrinsic_sites.insert(site, (f, i));
                    match i {
                        Intrinsic::PthreadCreate => {
                            g.indirect.entry(site).or_insert_with(|| IndirectSite {
                                caller: f,
                                kind: SiteKind::Spawn,
                                resolved: None,
                                forward: BTreeSet::new(),
                                pruned: BTreeSet::new(),
                            });
                        }
                        Intrinsic::Dlsym => {
                            for b in image.dl_bindings.iter().filter(|b| b.callsite == site) {
                                if let Some(t) = linked.lookup(&b.target) {
                                    g.at_set.insert(t);
                                    g.at_sites.entry(t).or_default().insert(site);
                                }
                            }
                        }
                        _ => {}
                    }
                    continue;
                }
                match resolve_plt(linked, symbol, &linked.func_ref(f)) {
                    Ok(callee) => {
                        direct.insert(Edge {
                            site,
                            caller: f,
                            callee,
                            kind: EdgeKind::Plt,
                        });
                        work.push(callee);
                    }
                    Err(e) => {
                        log::warn!("{e}; treated as an external call");
                        g.external_calls.push(ExternalCall {
                            site,
                            caller: linked.func_ref(f),
                            symbol: symbol.clone(),
                        });
                        errors.push(e);
                    }
                }
            }
            Op::CallIndirect { .. } => {
                g.indirect.entry(site).or_insert_with(|| IndirectSite {
                    caller: f,
                    kind: SiteKind::Call,
                    resolved: None,
                    forward: BTreeSet::new(),
                    pruned: BTreeSet::new(),
                });
            }
            Op::TakeAddr { func, .. } => {
                let t = linked.resolve_in(mi, func).expect("validated ref");
                g.at_set.insert(t);
                g.at_sites.entry(t).or_default().insert(site);
            }
            Op::TakeAddrData { object, .. } => {
                if let Some((omi, members)) = linked.data_members(mi, object) {
                    let oid = object.rsplit("::").next().unwrap_or(object);
                    g.live_objects
                        .insert(format!("{}::{}", linked.modules()[omi].name, oid));
                    for t in members {
                        g.at_set.insert(t);
                        g.at_sites.entry(t).or_default().insert(site);
                    }
                }
            }
            _ => {}
        }
    }
}

impl Fcg {
    /// Targets of an indirect site under the current refinement state, with
    /// the edge kind each target gets.
    pub fn site_targets(&self, site: &IndirectSite) -> Vec<(FuncId, EdgeKind)> {
        let (precise, at) = match site.kind {
            SiteKind::Call => (EdgeKind::IndirectResolved, EdgeKind::IndirectAt),
            SiteKind::Spawn => (EdgeKind::Spawn, EdgeKind::Spawn),
        };
        match &site.resolved {
            Some(ts) => ts.iter().map(|&t| (t, precise)).collect(),
            None => {
                let mut out: BTreeMap<FuncId, EdgeKind> = BTreeMap::new();
                for &t in &site.forward {
                    out.insert(t, precise);
                }
                for &t in &self.at_set {
                    if !site.pruned.contains(&t) {
                        out.entry(t).or_insert(at);
                    }
                }
                out.into_iter().collect()
            }
        }
    }

    /// Rebuilds indirect edges from site state, then keeps only what is
    /// reachable from the roots.
    pub fn materialize(&mut self) {
        let mut edges: BTreeSet<Edge> = self
            .edges
            .iter()
            .filter(|e| matches!(e.kind, EdgeKind::Direct | EdgeKind::Plt))
            .copied()
            .collect();
        for (&site, s) in &self.indirect {
            for (callee, kind) in self.site_targets(s) {
                edges.insert(Edge {
                    site,
                    caller: s.caller,
                    callee,
                    kind,
                });
            }
        }
        let mut out: BTreeMap<FuncId, Vec<Edge>> = BTreeMap::new();
        for e in &edges {
            out.entry(e.caller).or_default().push(*e);
        }
        let mut nodes = BTreeSet::new();
        let mut work: Vec<FuncId> = self.roots.iter().copied().collect();
        while let Some(f) = work.pop() {
            if nodes.insert(f) {
                for e in out.get(&f).into_iter().flatten() {
                    work.push(e.callee);
                }
            }
        }
        edges.retain(|e| nodes.contains(&e.caller));
        self.indirect.retain(|_, s| nodes.contains(&s.caller));
        self.intrinsic_sites.retain(|_, (c, _)| nodes.contains(c));
        self.nodes = nodes;
        self.edges = edges;
        self.callers.clear();
        for e in &self.edges {
            self.callers.entry(e.callee).or_default().push(*e);
        }
    }

    /// Edges into `f`.
    pub fn callers(&self, f: FuncId) -> &[Edge] {
        self.callers.get(&f).map_or(&[], |v| v.as_slice())
    }

    pub fn callees(&self, f: FuncId) -> impl Iterator<Item = &Edge> {
        self.edges.range(..).filter(move |e| e.caller == f)
    }

    /// Edges leaving callsite `site`.
    pub fn edges_at(&self, site: u64) -> impl Iterator<Item = &Edge> {
        self.edges.iter().filter(move |e| e.site == site)
    }

    pub fn count(&self, kind: EdgeKind) -> usize {
        self.edges.iter().filter(|e| e.kind == kind).count()
    }

    pub fn to_doc(&self, linked: &Linked) -> FcgDoc {
        let r = |f: FuncId| linked.func_ref(f);
        FcgDoc {
            nodes: self.nodes.iter().map(|&f| r(f)).collect(),
            edges: self
                .edges
                .iter()
                .map(|e| EdgeDoc {
                    site: e.site,
                    caller: r(e.caller),
                    callee: r(e.callee),
                    kind: e.kind,
                })
                .collect(),
            at_set: self.at_set.iter().map(|&f| r(f)).collect(),
            at_sites: self.at_sites.iter().map(|(&f, s)| (r(f), s.clone())).collect(),
            live_objects: self.live_objects.clone(),
            external_calls: self.external_calls.clone(),
        }
    }

    /// Graphviz rendering for inspection.
    pub fn to_dot(&self, linked: &Linked) -> String {
        let mut s = String::from("digraph fcg {\n  node [shape=box];\n");
        for &n in &self.nodes {
            let attr = if self.at_set.contains(&n) {
                " style=dashed"
            } else {
                ""
            };
            let _ = writeln!(s, "  \"{}\" [{}];", linked.func_ref(n), attr.trim());
        }
        for e in &self.edges {
            let style = match e.kind {
                EdgeKind::Direct => "solid",
                EdgeKind::Plt => "bold",
                EdgeKind::IndirectResolved => "dashed",
                EdgeKind::IndirectAt => "dotted",
                EdgeKind::Spawn => "tapered",
            };
            let _ = writeln!(
                s,
                "  \"{}\" -> \"{}\" [label=\"{:#x}\" style={}];",
                linked.func_ref(e.caller),
                linked.func_ref(e.callee),
                e.site,
                style
            );
        }
        s.push_str("}\n");
        s
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EdgeDoc {
    pub site: u64,
    pub caller: FuncRef,
    pub callee: FuncRef,
    pub kind: EdgeKind,
}

/// Serializable view of an [`Fcg`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FcgDoc {
    pub nodes: BTreeSet<FuncRef>,
    pub edges: BTreeSet<EdgeDoc>,
    pub at_set: BTreeSet<FuncRef>,
    pub at_sites: BTreeMap<FuncRef, BTreeSet<u64>>,
    pub live_objects: BTreeSet<String>,
    pub external_calls: Vec<ExternalCall>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pmir::{ImageBuilder, ModuleBuilder, ProgramImage, Reg};

    fn names(l: &Linked, s: &BTreeSet<FuncId>) -> Vec<String> {
        s.iter().map(|&f| l.func(f).name.clone()).collect()
    }

    fn simple() -> ProgramImage {
        let mut m = ModuleBuilder::executable("app", 0x1000);
        m.function("main", |f| {
            f.block(0).call("f").ret();
        });
        m.function("f", |f| {
            f.block(0).ret();
        });
        m.function("g", |f| {
            f.block(0).ret();
        });
        ImageBuilder::new(m.finish()).build()
    }

    #[test]
    fn unreferenced_function_is_absent() {
        let img = simple();
        let l = Linked::new(&img);
        let (g, errs) = build_fcg(&l);
        assert!(errs.is_empty());
        assert_eq!(names(&l, &g.nodes), ["main", "f"]);
    }

    #[test]
    fn plt_interposition() {
        let mut libc = ModuleBuilder::library("libc.so", 0x100000);
        libc.exported("write", |f| {
            f.block(0).sys(1).ret();
        });
        libc.exported("getpid", |f| {
            f.block(0).sys(39).ret();
        });
        let mut m = ModuleBuilder::executable("app", 0x1000);
        m.function("main", |f| {
            f.block(0).plt("write").plt("getpid").ret();
        });
        m.exported("getpid", |f| {
            f.block(0).ret();
        });
        let img = ImageBuilder::new(m.finish()).library(libc.finish()).build();
        let l = Linked::new(&img);
        let me = FuncRef::new("app", "main");
        assert_eq!(l.func_ref(resolve_plt(&l, "write", &me).unwrap()).module, "libc.so");
        assert_eq!(l.func_ref(resolve_plt(&l, "getpid", &me).unwrap()).module, "app");
        match resolve_plt(&l, "nothing", &me) {
            Err(AnalysisError::UnresolvedSymbol { searched, .. }) => {
                assert_eq!(searched, "app, libc.so")
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn dead_object_members_are_not_at() {
        let mut m = ModuleBuilder::executable("app", 0x1000);
        m.function("main", |f| {
            f.block(0).call_reg(Reg::Rax).ret();
        });
        m.function("dead", |f| {
            f.block(0).take_data(Reg::Rax, "table").ret();
        });
        m.function("h", |f| {
            f.block(0).ret();
        });
        m.data("table", &["h"]);
        let img = ImageBuilder::new(m.finish()).build();
        let l = Linked::new(&img);
        let (g, _) = build_fcg(&l);
        assert!(g.at_set.is_empty());
        assert!(g.live_objects.is_empty());
    }

    #[test]
    fn indirect_sites_reach_at_set() {
        let mut m = ModuleBuilder::executable("app", 0x1000);
        m.function("main", |f| {
            f.block(0).take(Reg::Rdi, "k").call("f").ret();
        });
        m.function("f", |f| {
            f.block(0).call_reg(Reg::Rdi).ret();
        });
        m.function("k", |f| {
            f.block(0).ret();
        });
        let img = ImageBuilder::new(m.finish()).build();
        let l = Linked::new(&img);
        let (g, _) = build_fcg(&l);
        assert_eq!(names(&l, &g.at_set), ["k"]);
        assert_eq!(g.count(EdgeKind::IndirectAt), 1);
        let e = g.edges.iter().find(|e| e.kind == EdgeKind::IndirectAt).unwrap();
        assert_eq!(l.func(e.caller).name, "f");
        assert_eq!(l.func(e.callee).name, "k");
        // Rebuilding gives the same graph.
        assert_eq!(build_fcg(&l).0, g);
    }

    #[test]
    fn loader_roots_are_nodes() {
        let mut m = ModuleBuilder::executable("app", 0x1000);
        m.function("main", |f| {
            f.block(0).ret();
        });
        m.function("ctor", |f| {
            f.block(0).take(Reg::Rax, "cb").ret();
        });
        m.function("dtor", |f| {
            f.block(0).ret();
        });
        m.function("cb", |f| {
            f.block(0).ret();
        });
        let img = ImageBuilder::new(m.finish()).init("ctor").fini("dtor").build();
        let l = Linked::new(&img);
        let (g, _) = build_fcg(&l);
        assert_eq!(names(&l, &g.nodes), ["main", "ctor", "dtor"]);
        assert_eq!(names(&l, &g.at_set), ["cb"]);
    }
}
