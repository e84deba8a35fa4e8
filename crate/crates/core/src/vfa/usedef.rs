//! Register reaching definitions and the use-def / def-use chains derived
//! from them. Memory is opaque.

use std::collections::{BTreeSet, HashMap};

use crate::pmir::{FnCfg, FunctionDef, Reg};

/// Where a definition happens. Every register has an implicit definition
/// at function entry standing for the value the caller left in it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum DefSite {
    Entry,
    Instr { block: usize, instr: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Def {
    pub site: DefSite,
    pub reg: Reg,
}

/// A register read at an instruction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Use {
    pub block: usize,
    pub instr: usize,
    pub reg: Reg,
}

pub type DefId = usize;

#[derive(Debug, Clone)]
pub struct UseDef {
    pub defs: Vec<Def>,
    use_defs: HashMap<Use, Vec<DefId>>,
    def_uses: Vec<Vec<Use>>,
    def_index: HashMap<(usize, usize, Reg), DefId>,
}

type State = [BTreeSet<DefId>; 16];

impl UseDef {
    /// Definitions reaching the read of `reg` at `(block, instr)`. Empty if
    /// the instruction does not read `reg` or is unreachable.
    pub fn reaching(&self, block: usize, instr: usize, reg: Reg) -> &[DefId] {
        self.use_defs
            .get(&Use { block, instr, reg })
            .map_or(&[], |v| v.as_slice())
    }

    pub fn uses_of(&self, def: DefId) -> &[Use] {
        &self.def_uses[def]
    }

    /// The definition of `reg` made by the instruction at `(block, instr)`.
    pub fn def_at(&self, block: usize, instr: usize, reg: Reg) -> Option<DefId> {
        self.def_index.get(&(block, instr, reg)).copied()
    }

    pub fn entry_def(&self, reg: Reg) -> DefId {
        reg.index()
    }

    pub fn def(&self, id: DefId) -> Def {
        self.defs[id]
    }

    pub fn all_uses(&self) -> impl Iterator<Item = (&Use, &Vec<DefId>)> {
        self.use_defs.iter()
    }
}

/// Classic reaching-definitions fixpoint, then one pass per block to bind
/// each register read to the definitions live at that point.
pub fn build_usedef(f: &FunctionDef, cfg: &FnCfg) -> UseDef {
    let mut defs: Vec<Def> = Reg::ALL
        .iter()
        .map(|&reg| Def {
            site: DefSite::Entry,
            reg,
        })
        .collect();
    let mut def_index = HashMap::new();
    for (bi, b) in f.blocks.iter().enumerate() {
        for (ii, ins) in b.instructions.iter().enumerate() {
            for reg in ins.op.defs() {
                def_index.insert((bi, ii, reg), defs.len());
                defs.push(Def {
                    site: DefSite::Instr {
                        block: bi,
                        instr: ii,
                    },
                    reg,
                });
            }
        }
    }

    let n = f.blocks.len();
    let transfer = |bi: usize, mut st: State| -> State {
        for (ii, ins) in f.blocks[bi].instructions.iter().enumerate() {
            for reg in ins.op.defs() {
                st[reg.index()] = BTreeSet::from([def_index[&(bi, ii, reg)]]);
            }
        }
        st
    };
    let entry_state: State = std::array::from_fn(|r| BTreeSet::from([r]));
    let mut ins_state: Vec<Option<State>> = vec![None; n];
    let mut outs: Vec<Option<State>> = vec![None; n];
    if n > 0 {
        let mut work: Vec<usize> = vec![cfg.entry];
        let mut queued = vec![false; n];
        queued[cfg.entry] = true;
        while let Some(b) = work.pop() {
            queued[b] = false;
            let mut inb: State = if b == cfg.entry {
                entry_state.clone()
            } else {
                Default::default()
            };
            for &p in &cfg.preds[b] {
                if let Some(o) = &outs[p] {
                    for r in 0..16 {
                        inb[r].extend(o[r].iter().copied());
                    }
                }
            }
            let out = transfer(b, inb.clone());
            ins_state[b] = Some(inb);
            if outs[b].as_ref() != Some(&out) {
                outs[b] = Some(out);
                for &s in &cfg.succs[b] {
                    if !queued[s] {
                        queued[s] = true;
                        work.push(s);
                    }
                }
            }
        }
    }

    let mut use_defs = HashMap::new();
    let mut def_uses = vec![Vec::new(); defs.len()];
    for (bi, b) in f.blocks.iter().enumerate() {
        let Some(mut st) = ins_state[bi].clone() else {
            continue;
        };
        for (ii, ins) in b.instructions.iter().enumerate() {
            for reg in ins.op.uses() {
                let u = Use {
                    block: bi,
                    instr: ii,
                    reg,
                };
                let ds: Vec<DefId> = st[reg.index()].iter().copied().collect();
                for &d in &ds {
                    def_uses[d].push(u);
                }
                use_defs.insert(u, ds);
            }
            for reg in ins.op.defs() {
                st[reg.index()] = BTreeSet::from([def_index[&(bi, ii, reg)]]);
            }
        }
    }
    UseDef {
        defs,
        use_defs,
        def_uses,
        def_index,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pmir::{FunctionBuilder, ModuleBuilder, Op};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn func(body: impl FnOnce(&mut FunctionBuilder)) -> FunctionDef {
        let mut m = ModuleBuilder::executable("t", 0x1000);
        m.function("f", body);
        m.finish().functions.remove(0)
    }

    #[test]
    fn move_sees_single_def() {
        let f = func(|f| {
            f.block(0).konst(Reg::Rax, 5).mov(Reg::Rbx, Reg::Rax).ret();
        });
        let ud = build_usedef(&f, &FnCfg::of(&f));
        let d = ud.reaching(0, 1, Reg::Rax);
        assert_eq!(d.len(), 1);
        assert_eq!(ud.def(d[0]).site, DefSite::Instr { block: 0, instr: 0 });
    }

    #[test]
    fn diamond_join_has_two_defs() {
        let f = func(|f| {
            f.block(0).cond(1, 2);
            f.block(1).konst(Reg::Rcx, 1).jump(3);
            f.block(2).konst(Reg::Rcx, 2).jump(3);
            f.block(3).mov(Reg::Rax, Reg::Rcx).ret();
        });
        let ud = build_usedef(&f, &FnCfg::of(&f));
        assert_eq!(ud.reaching(3, 0, Reg::Rcx).len(), 2);
        // Converse chains agree.
        for &d in ud.reaching(3, 0, Reg::Rcx) {
            assert!(ud.uses_of(d).contains(&Use {
                block: 3,
                instr: 0,
                reg: Reg::Rcx
            }));
        }
    }

    #[test]
    fn entry_defs_reach_unwritten_reads() {
        let f = func(|f| {
            f.block(0).mov(Reg::Rax, Reg::Rdi).ret();
        });
        let ud = build_usedef(&f, &FnCfg::of(&f));
        assert_eq!(ud.reaching(0, 0, Reg::Rdi), &[ud.entry_def(Reg::Rdi)]);
    }

    #[test]
    fn loop_carried_definition() {
        let f = func(|f| {
            f.block(0).konst(Reg::Rbx, 0).jump(1);
            f.block(1).arith(Reg::Rbx, Reg::Rbx).cond(1, 2);
            f.block(2).ret();
        });
        let ud = build_usedef(&f, &FnCfg::of(&f));
        assert_eq!(ud.reaching(1, 0, Reg::Rbx).len(), 2);
    }

    const REGS: [Reg; 4] = [Reg::Rax, Reg::Rbx, Reg::Rcx, Reg::Rdi];

    /// Straight-line segments joined by diamonds.
    fn random_function(rng: &mut ChaCha8Rng) -> FunctionDef {
        let diamonds = rng.gen_range(0..4u32);
        let mut ops: Vec<Vec<Op>> = Vec::new();
        let nblocks = 1 + 3 * diamonds as usize;
        for _ in 0..nblocks {
            let k = rng.gen_range(1..5);
            let mut v = Vec::new();
            for _ in 0..k {
                let a = REGS[rng.gen_range(0..4)];
                let b = REGS[rng.gen_range(0..4)];
                v.push(match rng.gen_range(0..4) {
                    0 => Op::Const { reg: a, imm: 1 },
                    1 => Op::Move { dst: a, src: b },
                    2 => Op::Arith { dst: a, src: b },
                    _ => Op::Load { dst: a },
                });
            }
            ops.push(v);
        }
        func(|f| {
            // Block layout per diamond d: head 3d, arms 3d+1 and 3d+2, the
            // join is the next diamond's head (or the last block).
            for d in 0..diamonds {
                let h = 3 * d;
                let bb = f.block(h);
                for op in &ops[h as usize] {
                    bb.op(op.clone());
                }
                bb.cond(h + 1, h + 2);
                for arm in [h + 1, h + 2] {
                    let bb = f.block(arm);
                    for op in &ops[arm as usize] {
                        bb.op(op.clone());
                    }
                    bb.jump(h + 3);
                }
            }
            let last = 3 * diamonds;
            let bb = f.block(last);
            for op in &ops[last as usize] {
                bb.op(op.clone());
            }
            bb.ret();
        })
    }

    /// Every entry-to-block path; the CFG is acyclic.
    fn paths(cfg: &FnCfg, to: usize) -> Vec<Vec<usize>> {
        let mut out = Vec::new();
        let mut stack = vec![vec![cfg.entry]];
        while let Some(p) = stack.pop() {
            let last = *p.last().unwrap();
            if last == to {
                out.push(p.clone());
            }
            for &s in &cfg.succs[last] {
                let mut q = p.clone();
                q.push(s);
                stack.push(q);
            }
        }
        out
    }

    #[test]
    fn matches_path_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let f = random_function(&mut rng);
            let cfg = FnCfg::of(&f);
            let ud = build_usedef(&f, &cfg);
            for (bi, b) in f.blocks.iter().enumerate() {
                for (ii, ins) in b.instructions.iter().enumerate() {
                    for reg in ins.op.uses() {
                        let mut expect = BTreeSet::new();
                        for p in paths(&cfg, bi) {
                            // Walk the path's instructions backwards from the use.
                            let mut found = DefSite::Entry;
                            'walk: for (k, &pb) in p.iter().enumerate().rev() {
                                let upto = if k == p.len() - 1 {
                                    ii
                                } else {
                                    f.blocks[pb].instructions.len()
                                };
                                for j in (0..upto).rev() {
                                    if f.blocks[pb].instructions[j].op.defs().contains(&reg) {
                                        found = DefSite::Instr { block: pb, instr: j };
                                        break 'walk;
                                    }
                                }
                            }
                            expect.insert(found);
                        }
                        let got: BTreeSet<DefSite> = ud
                            .reaching(bi, ii, reg)
                            .iter()
                            .map(|&d| ud.def(d).site)
                            .collect();
                        assert_eq!(got, expect, "use of {reg} at block {bi} instr {ii}");
                    }
                }
            }
        }
    }
}
