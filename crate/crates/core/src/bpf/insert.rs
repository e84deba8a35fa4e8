use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{validate, BpfInsn};
use crate::cfg::find_loops;
use crate::error::AnalysisError;
use crate::pmir::{BasicBlock, BlockId, FnCfg, FuncRef, Instruction, Op, ProgramImage};

/// Where an `install_filter` instruction was placed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstallSite {
    pub partition: u32,
    pub function: FuncRef,
    pub block: BlockId,
    pub address: u64,
    /// True when a preheader block had to be created.
    pub synthesized: bool,
}

fn placement(partition: u32, reason: impl Into<String>) -> AnalysisError {
    AnalysisError::Placement {
        partition,
        reason: reason.into(),
    }
}

/// Smallest address strictly between `lo` and `hi` that is not in use,
/// preferring the midpoint.
fn free_between(used: &BTreeSet<u64>, lo: u64, hi: u64) -> Option<u64> {
    if hi <= lo + 1 {
        return None;
    }
    let mid = lo + (hi - lo) / 2;
    (mid..hi).chain(lo + 1..mid).find(|a| !used.contains(a))
}

/// Inserts a synthetic `install_filter(partition)` on every path into the
/// loop whose header starts at `entry_address` in `function`, and embeds
/// `program` in the image under `partition`.
///
/// A single out-of-loop predecessor that only flows into the header and
/// holds real instructions receives the instruction before its terminator.
/// Otherwise a preheader block `[install_filter; jump header]` is appended
/// to the function and every out-of-loop edge into the header (and the
/// function entry, when the header is the entry) is redirected to it.
pub fn insert_filter(
    image: &ProgramImage,
    partition: u32,
    function: &FuncRef,
    entry_address: u64,
    program: Vec<BpfInsn>,
) -> Result<(ProgramImage, InstallSite), AnalysisError> {
    validate(&program)?;
    let used: BTreeSet<u64> = image
        .modules()
        .flat_map(|m| m.functions.iter())
        .flat_map(|f| f.instructions().map(|i| i.address))
        .collect();
    let mut out = image.clone();
    let module = out
        .module_mut(&function.module)
        .ok_or_else(|| placement(partition, format!("no module `{}`", function.module)))?;
    let f = module
        .functions
        .iter_mut()
        .find(|f| f.name == function.name)
        .ok_or_else(|| placement(partition, format!("no function `{function}`")))?;
    let fl = find_loops(f);
    let lp = fl
        .loops
        .iter()
        .find(|l| l.entry_address == entry_address)
        .ok_or(AnalysisError::TransitionNotFound {
            function: function.to_string(),
            addr: entry_address,
        })?
        .clone();
    let cfg = FnCfg::of(f);
    let h = f.block_index(lp.header).expect("loop header exists");
    let outside: Vec<usize> = cfg.preds[h]
        .iter()
        .copied()
        .filter(|p| !lp.body.contains(&f.blocks[*p].id))
        .collect();
    let header_is_entry = cfg.entry == h;

    if !header_is_entry && outside.len() == 1 {
        let p = outside[0];
        let b = &f.blocks[p];
        let has_term = b.terminator().is_some();
        let real = b.instructions.len() > usize::from(has_term);
        if cfg.succs[p] == [h] && real && !b.synthetic {
            let (idx, lo, hi) = if has_term {
                let k = b.instructions.len() - 1;
                (k, b.instructions[k - 1].address, b.instructions[k].address)
            } else {
                let last = b.instructions.last().unwrap().address;
                let next = used.range(last + 1..).next().copied().unwrap_or(u64::MAX);
                (b.instructions.len(), last, next)
            };
            let address = free_between(&used, lo, hi)
                .ok_or_else(|| placement(partition, format!("no free address after {lo:#x}")))?;
            let block = b.id;
            f.blocks[p].instructions.insert(
                idx,
                Instruction {
                    address,
                    op: Op::InstallFilter { partition },
                },
            );
            out.filters.insert(partition, program);
            return Ok((
                out,
                InstallSite {
                    partition,
                    function: function.clone(),
                    block,
                    address,
                    synthesized: false,
                },
            ));
        }
    }

    if outside.is_empty() && !header_is_entry {
        return Err(placement(partition, "loop header has no entry edge"));
    }
    let last = f.instructions().map(|i| i.address).max().unwrap_or(f.address);
    let mut free = (last + 1..).filter(|a| !used.contains(a));
    let a0 = free.next().unwrap();
    let a1 = free.next().unwrap();
    let new_id = f.blocks.iter().map(|b| b.id).max().unwrap_or(0) + 1;
    let header_id = lp.header;
    for &p in &outside {
        let b = &mut f.blocks[p];
        for s in b.successors.iter_mut() {
            if *s == header_id {
                *s = new_id;
            }
        }
        if let Some(ins) = b.instructions.last_mut() {
            match &mut ins.op {
                Op::Jump { target } if *target == header_id => *target = new_id,
                Op::CondJump { taken, not_taken } => {
                    if *taken == header_id {
                        *taken = new_id;
                    }
                    if *not_taken == header_id {
                        *not_taken = new_id;
                    }
                }
                _ => {}
            }
        }
    }
    if header_is_entry {
        f.entry_block = new_id;
    }
    f.blocks.push(BasicBlock {
        id: new_id,
        address: a0,
        instructions: vec![
            Instruction {
                address: a0,
                op: Op::InstallFilter { partition },
            },
            Instruction {
                address: a1,
                op: Op::Jump { target: header_id },
            },
        ],
        successors: vec![header_id],
        synthetic: true,
    });
    out.filters.insert(partition, program);
    Ok((
        out,
        InstallSite {
            partition,
            function: function.clone(),
            block: new_id,
            address: a0,
            synthesized: true,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bpf::{compile_filter, DenyAction};
    use crate::pmir::{validate_image, ImageBuilder, ModuleBuilder, Reg};

    fn prog() -> Vec<BpfInsn> {
        compile_filter(&[0, 1].into(), DenyAction::KillThread)
    }

    #[test]
    fn single_predecessor() {
        let mut m = ModuleBuilder::executable("app", 0x1000);
        m.function("main", |f| {
            f.block(0).sys(49).jump(1);
            f.block(1).sys(0).cond(1, 2);
            f.block(2).ret();
        });
        let img = ImageBuilder::new(m.finish()).build();
        let entry = img.executable.functions[0].blocks[1].address;
        let fr = FuncRef::new("app", "main");
        let (h, site) = insert_filter(&img, 0, &fr, entry, prog()).unwrap();
        validate_image(&h).unwrap();
        assert!(!site.synthesized);
        assert_eq!(site.block, 0);
        let b0 = &h.executable.functions[0].blocks[0];
        assert_eq!(b0.instructions.len(), 4);
        assert!(matches!(b0.instructions[2].op, Op::InstallFilter { partition: 0 }));
        assert_eq!(find_loops(&h.executable.functions[0]), find_loops(&img.executable.functions[0]));
    }

    #[test]
    fn header_is_entry() {
        let mut m = ModuleBuilder::executable("app", 0x1000);
        m.function("main", |f| {
            f.block(0).konst(Reg::Rax, 0).syscall().cond(0, 1);
            f.block(1).ret();
        });
        let img = ImageBuilder::new(m.finish()).build();
        let f0 = &img.executable.functions[0];
        let fr = FuncRef::new("app", "main");
        let (h, site) = insert_filter(&img, 3, &fr, f0.address, prog()).unwrap();
        validate_image(&h).unwrap();
        assert!(site.synthesized);
        let hf = &h.executable.functions[0];
        assert_eq!(hf.entry_block, site.block);
        let before = find_loops(f0);
        let after = find_loops(hf);
        assert_eq!(before.loops, after.loops);
    }

    #[test]
    fn two_outside_predecessors() {
        let mut m = ModuleBuilder::executable("app", 0x1000);
        m.function("main", |f| {
            f.block(0).cond(1, 2);
            f.block(1).sys(1).jump(3);
            f.block(2).sys(2).jump(3);
            f.block(3).sys(0).cond(3, 4);
            f.block(4).ret();
        });
        let img = ImageBuilder::new(m.finish()).build();
        let entry = img.executable.functions[0].blocks[3].address;
        let fr = FuncRef::new("app", "main");
        let (h, site) = insert_filter(&img, 1, &fr, entry, prog()).unwrap();
        validate_image(&h).unwrap();
        assert!(site.synthesized);
        let hf = &h.executable.functions[0];
        assert_eq!(hf.blocks[1].successors, vec![site.block]);
        assert_eq!(hf.blocks[2].successors, vec![site.block]);
        assert_eq!(find_loops(hf).loops, find_loops(&img.executable.functions[0]).loops);
    }

    #[test]
    fn unknown_entry_address() {
        let mut m = ModuleBuilder::executable("app", 0x1000);
        m.function("main", |f| {
            f.block(0).ret();
        });
        let img = ImageBuilder::new(m.finish()).build();
        let fr = FuncRef::new("app", "main");
        assert!(matches!(
            insert_filter(&img, 0, &fr, 0x1000, prog()),
            Err(AnalysisError::TransitionNotFound { .. })
        ));
    }
}
