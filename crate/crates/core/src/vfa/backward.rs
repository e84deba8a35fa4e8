//! Backward value flow from a register read to the constants that can
//! reach it.

use std::collections::{BTreeSet, HashSet, VecDeque};

use super::usedef::DefSite;
use super::{site_operand, Blocker, BlockerReason, ResolvedValue, ValueResolution, VfaCtx};
use crate::fcg::{EdgeKind, Fcg, SiteKind};
use crate::pmir::{FuncId, Op, Reg};

/// Resolves the values of `reg` as read by the instruction at `site`.
///
/// Definitions are followed through moves; a read of an incoming register
/// continues at every caller in `fcg`, one frame deeper. Loads, arithmetic
/// and results of calls stop the walk with a blocker, as do entry registers
/// of loader roots and the frame limit.
pub fn resolve_use(ctx: &VfaCtx, fcg: &Fcg, site: u64, reg: Reg) -> ValueResolution {
    let mut values = BTreeSet::new();
    let mut blockers = BTreeSet::new();
    let Some(loc) = ctx.linked.loc(site) else {
        return ValueResolution::new(values, blockers);
    };
    let mut seen: HashSet<(FuncId, usize)> = HashSet::new();
    let mut work: VecDeque<(FuncId, usize, usize)> = VecDeque::new();
    let start = |work: &mut VecDeque<_>, f: FuncId, block, instr, reg, depth| {
        for &d in ctx.usedef(f).reaching(block, instr, reg) {
            work.push_back((f, d, depth));
        }
    };
    start(&mut work, loc.func, loc.block, loc.instr, reg, 0);
    let mut block = |site: u64, reason| {
        blockers.insert(Blocker { site, reason });
    };
    while let Some((f, d, depth)) = work.pop_front() {
        if !seen.insert((f, d)) {
            continue;
        }
        let ud = ctx.usedef(f);
        let def = ud.def(d);
        match def.site {
            DefSite::Entry => {
                let entry = ctx.linked.entry_address(f).unwrap_or(0);
                let callers = fcg.callers(f);
                if fcg.roots.contains(&f) || callers.is_empty() {
                    block(entry, BlockerReason::UnknownExternal);
                }
                for e in callers {
                    if depth + 1 > ctx.depth_cap {
                        block(e.site, BlockerReason::DepthLimit);
                        continue;
                    }
                    let src = match e.kind {
                        // A new thread receives the fourth argument of
                        // pthread_create as its first.
                        EdgeKind::Spawn if def.reg == Reg::Rdi => Reg::Rcx,
                        EdgeKind::Spawn => {
                            block(e.site, BlockerReason::UnknownExternal);
                            continue;
                        }
                        _ => def.reg,
                    };
                    let cl = ctx.linked.loc(e.site).expect("edge site exists");
                    start(&mut work, e.caller, cl.block, cl.instr, src, depth + 1);
                }
            }
            DefSite::Instr { block: b, instr: i } => {
                let ins = &ctx.linked.func(f).blocks[b].instructions[i];
                match &ins.op {
                    Op::Const { imm, .. } => {
                        values.insert(ResolvedValue::Int(*imm));
                    }
                    Op::StrConst { value, .. } => {
                        values.insert(ResolvedValue::Str(value.clone()));
                    }
                    Op::TakeAddr { func, .. } => {
                        let t = ctx.linked.resolve_from(f, func).expect("validated ref");
                        values.insert(ResolvedValue::Func(ctx.linked.func_ref(t)));
                    }
                    Op::TakeAddrData { .. } => block(ins.address, BlockerReason::TypeMismatch),
                    Op::Move { src, .. } => start(&mut work, f, b, i, *src, depth),
                    Op::Load { .. } => block(ins.address, BlockerReason::MemoryLoad),
                    Op::Arith { .. } => block(ins.address, BlockerReason::Arithmetic),
                    _ => block(ins.address, BlockerReason::UnknownExternal),
                }
            }
        }
    }
    ValueResolution::new(values, blockers)
}

/// Resolves argument `idx` (0 = rdi) of the call at `site`.
pub fn resolve_argument(ctx: &VfaCtx, fcg: &Fcg, site: u64, idx: usize) -> ValueResolution {
    resolve_use(ctx, fcg, site, Reg::ARGS[idx])
}

/// Resolves the operand of a `call_indirect`. Values that are not
/// functions become type-mismatch blockers at the callsite.
pub fn backward_resolve_call(ctx: &VfaCtx, fcg: &Fcg, site: u64) -> ValueResolution {
    match resolve_site(ctx, fcg, site, SiteKind::Call) {
        Some(r) => r,
        None => ValueResolution::new(BTreeSet::new(), BTreeSet::new()),
    }
}

pub(super) fn resolve_site(
    ctx: &VfaCtx,
    fcg: &Fcg,
    site: u64,
    kind: SiteKind,
) -> Option<ValueResolution> {
    let reg = site_operand(ctx, site, kind)?;
    let r = resolve_use(ctx, fcg, site, reg);
    let mut values = BTreeSet::new();
    let mut blockers = r.blockers;
    for v in r.values {
        match v {
            ResolvedValue::Func(_) => {
                values.insert(v);
            }
            _ => {
                blockers.insert(Blocker {
                    site,
                    reason: BlockerReason::TypeMismatch,
                });
            }
        }
    }
    Some(ValueResolution::new(values, blockers))
}

/// Replaces the targets of every fully resolved indirect site with the
/// resolved functions.
pub(super) fn backward_pass(ctx: &VfaCtx, fcg: &mut Fcg) -> bool {
    let pending: Vec<(u64, SiteKind)> = fcg
        .indirect
        .iter()
        .filter(|(_, s)| s.resolved.is_none())
        .map(|(&a, s)| (a, s.kind))
        .collect();
    let mut updates = Vec::new();
    for (site, kind) in pending {
        if let Some(r) = resolve_site(ctx, fcg, site, kind) {
            if r.is_full() {
                updates.push((site, r.funcs(ctx.linked)));
            }
        }
    }
    let changed = !updates.is_empty();
    for (site, ts) in updates {
        fcg.indirect.get_mut(&site).unwrap().resolved = Some(ts);
    }
    changed
}
