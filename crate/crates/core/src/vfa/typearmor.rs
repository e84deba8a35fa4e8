//! Arity and return-value matching between indirect callsites and their
//! AT candidates.

use super::usedef::DefSite;
use super::VfaCtx;
use crate::fcg::{Fcg, SiteKind};
use crate::pmir::{FuncId, Op, Reg};

/// Instructions whose register reads say nothing about argument or result
/// consumption: calls and the kernel entry read everything, `ret` forwards.
fn is_passthrough(op: &Op) -> bool {
    op.is_call() || matches!(op, Op::Ret | Op::SyscallInstr)
}

/// Number of argument registers prepared at the call at `(block, instr)`:
/// the longest prefix of rdi, rsi, rdx, rcx, r8, r9 each written inside the
/// caller, on some path, with no call in between.
pub fn callsite_arity(ctx: &VfaCtx, f: FuncId, block: usize, instr: usize) -> usize {
    let ud = ctx.usedef(f);
    let func = ctx.linked.func(f);
    Reg::ARGS
        .iter()
        .take_while(|&&r| {
            ud.reaching(block, instr, r).iter().any(|&d| match ud.def(d).site {
                DefSite::Entry => false,
                DefSite::Instr { block, instr } => {
                    !func.blocks[block].instructions[instr].op.is_call()
                }
            })
        })
        .count()
}

/// Whether the result of the call at `(block, instr)` is read on some path
/// before being overwritten. Reads by later calls, returns and syscalls do
/// not count.
pub fn expects_return(ctx: &VfaCtx, f: FuncId, block: usize, instr: usize) -> bool {
    let ud = ctx.usedef(f);
    let func = ctx.linked.func(f);
    let Some(d) = ud.def_at(block, instr, Reg::Rax) else {
        return false;
    };
    ud.uses_of(d)
        .iter()
        .any(|u| !is_passthrough(&func.blocks[u.block].instructions[u.instr].op))
}

/// One past the highest argument register whose incoming value is read by
/// an instruction other than a call, `ret` or `syscall`; 0 if none is.
pub fn function_arity(ctx: &VfaCtx, f: FuncId) -> usize {
    let ud = ctx.usedef(f);
    let func = ctx.linked.func(f);
    Reg::ARGS
        .iter()
        .rposition(|&r| {
            ud.uses_of(ud.entry_def(r))
                .iter()
                .any(|u| !is_passthrough(&func.blocks[u.block].instructions[u.instr].op))
        })
        .map_or(0, |i| i + 1)
}

/// Whether `f` may return a value: some reachable `ret` sees an `rax` other
/// than the incoming one. A function without reachable `ret` counts as
/// returning, since no caller can observe otherwise.
pub fn returns_value(ctx: &VfaCtx, f: FuncId) -> bool {
    let ud = ctx.usedef(f);
    let func = ctx.linked.func(f);
    let mut any_ret = false;
    for (b, blk) in func.blocks.iter().enumerate() {
        for (i, ins) in blk.instructions.iter().enumerate() {
            if !matches!(ins.op, Op::Ret) {
                continue;
            }
            let defs = ud.reaching(b, i, Reg::Rax);
            if defs.is_empty() {
                continue;
            }
            any_ret = true;
            if defs
                .iter()
                .any(|&d| ud.def(d).site != DefSite::Entry)
            {
                return true;
            }
        }
    }
    !any_ret
}

/// Prunes AT targets of unresolved `call_indirect` sites that need more
/// arguments than the site prepares, or that return nothing to a site using
/// the result. Precise targets are never pruned.
pub fn typearmor_match(ctx: &VfaCtx, fcg: &mut Fcg) -> bool {
    let sigs: Vec<(FuncId, usize, bool)> = fcg
        .at_set
        .iter()
        .map(|&t| (t, function_arity(ctx, t), returns_value(ctx, t)))
        .collect();
    let mut changed = false;
    for (&site, s) in fcg.indirect.iter_mut() {
        if s.kind != SiteKind::Call || s.resolved.is_some() {
            continue;
        }
        let loc = ctx.linked.loc(site).expect("site exists");
        let n = callsite_arity(ctx, loc.func, loc.block, loc.instr);
        let wants = expects_return(ctx, loc.func, loc.block, loc.instr);
        for &(t, m, returns) in &sigs {
            let keep = m <= n && (!wants || returns);
            if !keep && !s.forward.contains(&t) && s.pruned.insert(t) {
                changed = true;
            }
        }
    }
    changed
}
