//! Forward flow of taken function addresses to their uses.

use std::collections::{BTreeSet, HashSet};

use super::usedef::DefId;
use super::VfaCtx;
use crate::fcg::{resolve_plt, EdgeKind, Fcg};
use crate::intrinsics::Intrinsic;
use crate::pmir::{FuncId, Op, Reg};

/// Where the pointers taken for one function end up.
#[derive(Debug, Default, PartialEq, Eq)]
pub(crate) struct Flow {
    /// Indirect sites (calls and thread spawns) using the pointer as target.
    pub sites: BTreeSet<u64>,
    pub escapes: bool,
}

/// Follows every take of `t` forward. A use as an indirect-call operand
/// records that site and continues inside `t`, which receives its own
/// address in the operand register; moves and registers passed to direct,
/// PLT and other indirect calls are followed into the callees; comparisons
/// are harmless. A callee returning the `rax` it received passes the value
/// back to its callers. Stores, arithmetic, other returns, raw syscalls and
/// calls into unknown code count as escapes, as do takes through constant
/// arrays and `dlsym`.
pub(crate) fn trace_function(ctx: &VfaCtx, fcg: &Fcg, t: FuncId) -> Flow {
    let linked = ctx.linked;
    let mut flow = Flow::default();
    // (function, definition, whether the value arrived from a caller).
    let mut work: Vec<(FuncId, DefId, bool)> = Vec::new();
    for &site in fcg.at_sites.get(&t).into_iter().flatten() {
        match linked.instr_at(site) {
            Some((loc, ins)) => match &ins.op {
                Op::TakeAddr { reg, .. } => {
                    let d = ctx
                        .usedef(loc.func)
                        .def_at(loc.block, loc.instr, *reg)
                        .expect("take defines its register");
                    work.push((loc.func, d, false));
                }
                _ => flow.escapes = true,
            },
            None => flow.escapes = true,
        }
    }
    let mut seen: HashSet<(FuncId, DefId, bool)> = HashSet::new();
    while let Some((f, d, incoming)) = work.pop() {
        if flow.escapes {
            break;
        }
        if !seen.insert((f, d, incoming)) {
            continue;
        }
        let ud = ctx.usedef(f);
        for u in ud.uses_of(d) {
            let ins = &linked.func(f).blocks[u.block].instructions[u.instr];
            let into = |callee: FuncId, work: &mut Vec<_>| {
                work.push((callee, ctx.usedef(callee).entry_def(u.reg), true));
            };
            match &ins.op {
                Op::Move { dst, .. } => {
                    let nd = ud.def_at(u.block, u.instr, *dst).expect("move defines dst");
                    work.push((f, nd, incoming));
                }
                Op::Cmp { .. } => {}
                Op::CallIndirect { reg } if *reg == u.reg => {
                    flow.sites.insert(ins.address);
                    into(t, &mut work);
                }
                // Passed along to whatever the site may currently call.
                Op::CallIndirect { .. } => {
                    for e in fcg.edges_at(ins.address) {
                        into(e.callee, &mut work);
                    }
                }
                Op::CallDirect { func } => {
                    into(linked.resolve_from(f, func).expect("validated ref"), &mut work)
                }
                Op::CallPlt { symbol } => match Intrinsic::from_symbol(symbol) {
                    Some(Intrinsic::PthreadCreate) if u.reg == Reg::Rdx => {
                        flow.sites.insert(ins.address);
                    }
                    // Library entry points only read argument registers.
                    Some(_) => {
                        if u.reg.arg_index().is_some() {
                            flow.escapes = true;
                        }
                    }
                    None => match resolve_plt(linked, symbol, &linked.func_ref(f)) {
                        Ok(callee) => into(callee, &mut work),
                        Err(_) => flow.escapes = true,
                    },
                },
                // A callee handing back the rax it was called with: the value
                // flows to the result of every call of this function. Loader
                // roots hand it to the loader, which only reads an exit code.
                Op::Ret if incoming => {
                    for e in fcg.callers(f) {
                        if e.kind == EdgeKind::Spawn {
                            continue;
                        }
                        let cl = linked.loc(e.site).expect("edge site exists");
                        let rd = ctx
                            .usedef(e.caller)
                            .def_at(cl.block, cl.instr, Reg::Rax)
                            .expect("calls define rax");
                        work.push((e.caller, rd, true));
                    }
                }
                _ => flow.escapes = true,
            }
        }
    }
    flow
}

/// Removes from the AT set every function whose taken addresses only reach
/// indirect-call operands and comparisons, giving the sites that use them
/// precise edges instead.
pub fn forward_resolve_at(ctx: &VfaCtx, fcg: &mut Fcg) -> bool {
    let mut removed = Vec::new();
    for &t in &fcg.at_set {
        let flow = trace_function(ctx, fcg, t);
        if !flow.escapes {
            removed.push((t, flow.sites));
        }
    }
    let changed = !removed.is_empty();
    for (t, sites) in removed {
        fcg.at_set.remove(&t);
        for s in sites {
            if let Some(site) = fcg.indirect.get_mut(&s) {
                site.forward.insert(t);
            }
        }
    }
    changed
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fcg::{build_fcg, EdgeKind};
    use crate::pmir::{ImageBuilder, Linked, ModuleBuilder, ProgramImage};

    fn run(img: &ProgramImage) -> (Fcg, Vec<String>) {
        let l = Linked::new(img);
        let (mut g, _) = build_fcg(&l);
        let ctx = VfaCtx::new(&l);
        forward_resolve_at(&ctx, &mut g);
        g.materialize();
        let at = g.at_set.iter().map(|&f| l.func(f).name.clone()).collect();
        (g, at)
    }

    fn handler(m: &mut ModuleBuilder, name: &str) {
        m.function(name, |f| {
            f.block(0).ret();
        });
    }

    #[test]
    fn pointer_reaching_call_in_other_block() {
        let mut m = ModuleBuilder::executable("app", 0x10000);
        m.function("main", |f| {
            f.block(0).take(Reg::Rbx, "h").mov(Reg::Rdi, Reg::Rbx).jump(1);
            f.block(1).call("run").ret();
        });
        m.function("run", |f| {
            f.block(0).mov(Reg::Rax, Reg::Rdi).jump(1);
            f.block(1).call_reg(Reg::Rax).ret();
        });
        handler(&mut m, "h");
        handler(&mut m, "other");
        let (g, at) = run(&ImageBuilder::new(m.finish()).build());
        assert!(at.is_empty());
        assert_eq!(g.count(EdgeKind::IndirectResolved), 1);
        assert_eq!(g.count(EdgeKind::IndirectAt), 0);
    }

    #[test]
    fn compare_only_use() {
        let mut m = ModuleBuilder::executable("app", 0x10000);
        m.function("main", |f| {
            f.block(0)
                .load(Reg::Rcx)
                .call_reg(Reg::Rcx)
                .take(Reg::Rbx, "h")
                .load(Reg::Rcx)
                .cmp(Reg::Rbx, Reg::Rcx)
                .take(Reg::Rdx, "k")
                .store(Reg::Rdx)
                .ret();
        });
        handler(&mut m, "h");
        handler(&mut m, "k");
        let (g, at) = run(&ImageBuilder::new(m.finish()).build());
        assert_eq!(at, ["k"]);
        assert_eq!(g.count(EdgeKind::IndirectResolved), 0);
        assert_eq!(g.count(EdgeKind::IndirectAt), 1);
    }

    #[test]
    fn store_keeps_function_in_at_set() {
        let mut m = ModuleBuilder::executable("app", 0x10000);
        m.function("main", |f| {
            f.block(0).take(Reg::Rbx, "h").store(Reg::Rbx).ret();
        });
        handler(&mut m, "h");
        assert_eq!(run(&ImageBuilder::new(m.finish()).build()).1, ["h"]);
    }

    #[test]
    fn return_and_arith_escape() {
        for esc in 0..2 {
            let mut m = ModuleBuilder::executable("app", 0x10000);
            m.function("main", |f| {
                f.block(0).call("get").ret();
            });
            m.function("get", |f| {
                let b = f.block(0).take(Reg::Rax, "h");
                if esc == 1 {
                    b.arith(Reg::Rax, Reg::Rax);
                }
                b.ret();
            });
            handler(&mut m, "h");
            assert_eq!(run(&ImageBuilder::new(m.finish()).build()).1, ["h"]);
        }
    }

    #[test]
    fn constant_array_members_escape() {
        let mut m = ModuleBuilder::executable("app", 0x10000);
        m.function("main", |f| {
            f.block(0).take_data(Reg::Rbx, "table").ret();
        });
        handler(&mut m, "h");
        m.data("table", &["h"]);
        assert_eq!(run(&ImageBuilder::new(m.finish()).build()).1, ["h"]);
    }

    #[test]
    fn thread_start_taken_for_spawn() {
        let mut m = ModuleBuilder::executable("app", 0x10000);
        m.function("main", |f| {
            f.block(0).take(Reg::Rdx, "worker").plt("pthread_create").ret();
        });
        handler(&mut m, "worker");
        let (g, at) = run(&ImageBuilder::new(m.finish()).build());
        assert!(at.is_empty());
        assert_eq!(g.count(EdgeKind::Spawn), 1);
    }

    #[test]
    fn pointer_passed_to_library_entry_escapes() {
        let mut m = ModuleBuilder::executable("app", 0x10000);
        m.function("main", |f| {
            f.block(0).take(Reg::Rdi, "h").plt("dlopen").ret();
        });
        handler(&mut m, "h");
        assert_eq!(run(&ImageBuilder::new(m.finish()).build()).1, ["h"]);
    }
}
