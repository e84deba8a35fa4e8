//! Value-flow analyses over register use-def chains: forward flow of taken
//! function addresses, backward resolution of call operands and arguments,
//! and arity/return matching of indirect call targets.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::fcg::{Fcg, SiteKind};
use crate::pmir::{FuncId, FuncRef, Linked, Reg};

mod backward;
mod forward;
mod typearmor;
pub mod usedef;

pub use backward::{backward_resolve_call, resolve_argument, resolve_use};
pub use forward::forward_resolve_at;
pub use typearmor::{
    callsite_arity, expects_return, function_arity, returns_value, typearmor_match,
};
pub use usedef::{build_usedef, DefId, DefSite, UseDef};

/// Caller-expansion limit of the backward walk.
pub const DEFAULT_DEPTH_CAP: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Status {
    FullyResolved,
    PartiallyResolved,
    Unresolved,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlockerReason {
    MemoryLoad,
    Arithmetic,
    UnknownExternal,
    DepthLimit,
    /// A value of the wrong kind, e.g. an integer used as a call target.
    TypeMismatch,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Blocker {
    pub site: u64,
    pub reason: BlockerReason,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResolvedValue {
    Func(FuncRef),
    Int(i64),
    Str(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValueResolution {
    pub status: Status,
    pub values: BTreeSet<ResolvedValue>,
    pub blockers: BTreeSet<Blocker>,
}

impl ValueResolution {
    pub fn new(values: BTreeSet<ResolvedValue>, blockers: BTreeSet<Blocker>) -> Self {
        let status = if values.is_empty() {
            Status::Unresolved
        } else if blockers.is_empty() {
            Status::FullyResolved
        } else {
            Status::PartiallyResolved
        };
        ValueResolution {
            status,
            values,
            blockers,
        }
    }

    pub fn is_full(&self) -> bool {
        self.status == Status::FullyResolved
    }

    pub fn strings(&self) -> BTreeSet<String> {
        self.values
            .iter()
            .filter_map(|v| match v {
                ResolvedValue::Str(s) => Some(s.clone()),
                _ => None,
            })
            .collect()
    }

    pub fn ints(&self) -> BTreeSet<i64> {
        self.values
            .iter()
            .filter_map(|v| match v {
                ResolvedValue::Int(i) => Some(*i),
                _ => None,
            })
            .collect()
    }

    pub fn funcs(&self, linked: &Linked) -> BTreeSet<FuncId> {
        self.values
            .iter()
            .filter_map(|v| match v {
                ResolvedValue::Func(r) => linked.lookup(r),
                _ => None,
            })
            .collect()
    }
}

/// Linked image plus use-def chains of every function.
pub struct VfaCtx<'l, 'a> {
    pub linked: &'l Linked<'a>,
    ud: Vec<UseDef>,
    pub depth_cap: usize,
}

impl<'l, 'a> VfaCtx<'l, 'a> {
    pub fn new(linked: &'l Linked<'a>) -> Self {
        let ud = linked
            .func_ids()
            .map(|f| build_usedef(linked.func(f), linked.cfg(f)))
            .collect();
        VfaCtx {
            linked,
            ud,
            depth_cap: DEFAULT_DEPTH_CAP,
        }
    }

    pub fn with_depth_cap(mut self, cap: usize) -> Self {
        self.depth_cap = cap;
        self
    }

    pub fn usedef(&self, f: FuncId) -> &UseDef {
        &self.ud[f.index()]
    }
}

/// Operand register of an indirect site: the call register, or the start
/// routine argument of `pthread_create`.
fn site_operand(ctx: &VfaCtx, site: u64, kind: SiteKind) -> Option<Reg> {
    match kind {
        SiteKind::Spawn => Some(Reg::Rdx),
        SiteKind::Call => match &ctx.linked.instr_at(site)?.1.op {
            crate::pmir::Op::CallIndirect { reg } => Some(*reg),
            _ => None,
        },
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefineReport {
    pub edges_before: usize,
    pub edges_after: usize,
    /// Callsite-to-target pairs removed, per pass.
    pub removed_by_pass: BTreeMap<String, usize>,
    pub rounds: usize,
    pub at_removed: BTreeSet<FuncRef>,
    pub resolved_sites: BTreeSet<u64>,
    pub unresolved_sites: BTreeMap<u64, ValueResolution>,
    pub depth_cap: usize,
}

fn triples(fcg: &Fcg) -> BTreeSet<(u64, FuncId, FuncId)> {
    fcg.edges
        .iter()
        .map(|e| (e.site, e.caller, e.callee))
        .collect()
}

/// Runs forward, backward and arity/return refinement in that order, each
/// followed by re-materializing the graph, until a full round changes
/// nothing.
pub fn refine(ctx: &VfaCtx, fcg: &mut Fcg) -> RefineReport {
    let at_before = fcg.at_set.clone();
    let mut report = RefineReport {
        edges_before: triples(fcg).len(),
        depth_cap: ctx.depth_cap,
        ..Default::default()
    };
    for pass in ["forward", "backward", "typearmor"] {
        report.removed_by_pass.insert(pass.to_string(), 0);
    }
    loop {
        report.rounds += 1;
        let mut changed = false;
        type Pass = fn(&VfaCtx, &mut Fcg) -> bool;
        let passes: [(&str, Pass); 3] = [
            ("forward", forward_resolve_at),
            ("backward", backward::backward_pass),
            ("typearmor", typearmor_match),
        ];
        for (name, pass) in passes {
            let before = triples(fcg);
            if pass(ctx, fcg) {
                changed = true;
                fcg.materialize();
            }
            let after = triples(fcg);
            *report.removed_by_pass.get_mut(name).unwrap() += before.difference(&after).count();
        }
        if !changed {
            break;
        }
    }
    report.edges_after = triples(fcg).len();
    report.at_removed = at_before
        .difference(&fcg.at_set)
        .map(|&f| ctx.linked.func_ref(f))
        .collect();
    for (&site, s) in &fcg.indirect {
        if s.resolved.is_some() {
            report.resolved_sites.insert(site);
        } else if let Some(r) = backward::resolve_site(ctx, fcg, site, s.kind) {
            report.unresolved_sites.insert(site, r);
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fcg::{build_fcg, EdgeKind};
    use crate::pmir::{ImageBuilder, ModuleBuilder, ProgramImage};

    fn fn_named(l: &Linked, name: &str) -> FuncId {
        l.func_ids().find(|&f| l.func(f).name == name).unwrap()
    }

    /// Two handlers; one taken and called, one taken and stored.
    fn mixed() -> ProgramImage {
        let mut m = ModuleBuilder::executable("app", 0x10000);
        m.function("main", |f| {
            f.block(0)
                .take(Reg::Rax, "used")
                .call_reg(Reg::Rax)
                .take(Reg::Rcx, "stored")
                .store(Reg::Rcx)
                .load(Reg::Rdx)
                .call_reg(Reg::Rdx)
                .ret();
        });
        m.function("used", |f| {
            f.block(0).ret();
        });
        m.function("stored", |f| {
            f.block(0).ret();
        });
        ImageBuilder::new(m.finish()).build()
    }

    #[test]
    fn refined_edges_are_a_subset() {
        let img = mixed();
        let l = Linked::new(&img);
        let (mut g, _) = build_fcg(&l);
        let before = triples(&g);
        let ctx = VfaCtx::new(&l);
        let rep = refine(&ctx, &mut g);
        let after = triples(&g);
        assert!(after.is_subset(&before));
        assert!(rep.edges_after < rep.edges_before);
        let used = fn_named(&l, "used");
        let stored = fn_named(&l, "stored");
        assert!(!g.at_set.contains(&used));
        assert!(g.at_set.contains(&stored));
        assert_eq!(rep.at_removed.len(), 1);
        // The first site is resolved precisely; the load site still sees the AT set.
        let sites: Vec<u64> = g.indirect.keys().copied().collect();
        let first: Vec<_> = g.edges_at(sites[0]).collect();
        assert_eq!(first.len(), 1);
        assert_eq!(first[0].callee, used);
        assert_eq!(first[0].kind, EdgeKind::IndirectResolved);
        let second: Vec<_> = g.edges_at(sites[1]).map(|e| e.callee).collect();
        assert_eq!(second, vec![stored]);
        assert_eq!(
            rep.unresolved_sites[&sites[1]].blockers.iter().next().unwrap().reason,
            BlockerReason::MemoryLoad
        );
    }

    #[test]
    fn refinement_is_idempotent() {
        let img = mixed();
        let l = Linked::new(&img);
        let (mut g, _) = build_fcg(&l);
        let ctx = VfaCtx::new(&l);
        refine(&ctx, &mut g);
        let snapshot = g.clone();
        let rep = refine(&ctx, &mut g);
        assert_eq!(g, snapshot);
        assert_eq!(rep.rounds, 1);
    }

    #[test]
    fn status_follows_values_and_blockers() {
        let v = BTreeSet::from([ResolvedValue::Int(1)]);
        let b = BTreeSet::from([Blocker {
            site: 1,
            reason: BlockerReason::MemoryLoad,
        }]);
        assert_eq!(ValueResolution::new(v.clone(), BTreeSet::new()).status, Status::FullyResolved);
        assert_eq!(ValueResolution::new(v, b.clone()).status, Status::PartiallyResolved);
        assert_eq!(ValueResolution::new(BTreeSet::new(), b).status, Status::Unresolved);
    }
}
