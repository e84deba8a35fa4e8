//! Programmatic construction of images, used for fixtures and the corpus.
//!
//! Addresses are assigned automatically: each function gets a 4 KiB slot
//! starting at the module base and instructions are 16 bytes apart, which
//! leaves room for synthetic instructions inserted later.

use std::collections::BTreeMap;

use super::{
    BasicBlock, BlockId, DataObject, FunctionDef, Instruction, ModuleKind, ModuleUnit, Op,
    ProgramImage, Reg, PMIR_VERSION,
};

pub const FUNCTION_SLOT: u64 = 0x1000;
pub const INSTRUCTION_STRIDE: u64 = 0x10;

pub struct ModuleBuilder {
    name: String,
    kind: ModuleKind,
    base: u64,
    functions: Vec<FunctionDef>,
    exports: BTreeMap<String, String>,
    data_objects: Vec<DataObject>,
}

impl ModuleBuilder {
    pub fn executable(name: &str, base: u64) -> Self {
        Self::new(name, ModuleKind::Executable, base)
    }

    pub fn library(name: &str, base: u64) -> Self {
        Self::new(name, ModuleKind::SharedLibrary, base)
    }

    fn new(name: &str, kind: ModuleKind, base: u64) -> Self {
        ModuleBuilder {
            name: name.to_string(),
            kind,
            base,
            functions: Vec::new(),
            exports: BTreeMap::new(),
            data_objects: Vec::new(),
        }
    }

    pub fn function(&mut self, name: &str, body: impl FnOnce(&mut FunctionBuilder)) -> &mut Self {
        let mut fb = FunctionBuilder::default();
        body(&mut fb);
        let addr = self.base + FUNCTION_SLOT * self.functions.len() as u64;
        self.functions.push(fb.finish(name, addr));
        self
    }

    /// Defines a function and exports it under its own name.
    pub fn exported(&mut self, name: &str, body: impl FnOnce(&mut FunctionBuilder)) -> &mut Self {
        self.function(name, body);
        self.export(name, name)
    }

    pub fn export(&mut self, symbol: &str, local: &str) -> &mut Self {
        self.exports.insert(symbol.to_string(), local.to_string());
        self
    }

    pub fn data(&mut self, id: &str, members: &[&str]) -> &mut Self {
        self.data_objects.push(DataObject {
            id: id.to_string(),
            symbol: Some(id.to_string()),
            members: members.iter().map(|s| s.to_string()).collect(),
        });
        self
    }

    pub fn finish(&mut self) -> ModuleUnit {
        ModuleUnit {
            name: self.name.clone(),
            kind: self.kind,
            functions: std::mem::take(&mut self.functions),
            exports: std::mem::take(&mut self.exports),
            data_objects: std::mem::take(&mut self.data_objects),
        }
    }
}

#[derive(Default)]
pub struct FunctionBuilder {
    blocks: Vec<BlockBuilder>,
}

impl FunctionBuilder {
    /// Starts a new block; the first block is the entry.
    pub fn block(&mut self, id: BlockId) -> &mut BlockBuilder {
        assert!(
            self.blocks.iter().all(|b| b.id != id),
            "block {id} defined twice"
        );
        self.blocks.push(BlockBuilder {
            id,
            ops: Vec::new(),
            fallthrough: None,
        });
        self.blocks.last_mut().unwrap()
    }

    fn finish(self, name: &str, address: u64) -> FunctionDef {
        let entry_block = self.blocks.first().map(|b| b.id).unwrap_or(0);
        let mut next = address;
        let blocks = self
            .blocks
            .into_iter()
            .map(|b| {
                let instructions: Vec<Instruction> = b
                    .ops
                    .into_iter()
                    .map(|op| {
                        let ins = Instruction { address: next, op };
                        next += INSTRUCTION_STRIDE;
                        ins
                    })
                    .collect();
                let successors = match instructions.last().map(|i| &i.op) {
                    Some(Op::Jump { target }) => vec![*target],
                    Some(Op::CondJump { taken, not_taken }) => vec![*taken, *not_taken],
                    Some(Op::Ret) => Vec::new(),
                    _ => b.fallthrough.into_iter().collect(),
                };
                BasicBlock {
                    id: b.id,
                    address: instructions.first().map(|i| i.address).unwrap_or(next),
                    instructions,
                    successors,
                    synthetic: false,
                }
            })
            .collect();
        assert!(
            next - address <= FUNCTION_SLOT,
            "function `{name}` overflows its address slot"
        );
        FunctionDef {
            name: name.to_string(),
            address,
            entry_block,
            blocks,
        }
    }
}

pub struct BlockBuilder {
    id: BlockId,
    ops: Vec<Op>,
    fallthrough: Option<BlockId>,
}

impl BlockBuilder {
    pub fn op(&mut self, op: Op) -> &mut Self {
        self.ops.push(op);
        self
    }

    pub fn konst(&mut self, reg: Reg, imm: i64) -> &mut Self {
        self.op(Op::Const { reg, imm })
    }

    pub fn mov(&mut self, dst: Reg, src: Reg) -> &mut Self {
        self.op(Op::Move { dst, src })
    }

    pub fn take(&mut self, reg: Reg, func: &str) -> &mut Self {
        self.op(Op::TakeAddr {
            reg,
            func: func.to_string(),
        })
    }

    pub fn take_data(&mut self, reg: Reg, object: &str) -> &mut Self {
        self.op(Op::TakeAddrData {
            reg,
            object: object.to_string(),
        })
    }

    pub fn string(&mut self, reg: Reg, value: &str) -> &mut Self {
        self.op(Op::StrConst {
            reg,
            value: value.to_string(),
        })
    }

    pub fn load(&mut self, dst: Reg) -> &mut Self {
        self.op(Op::Load { dst })
    }

    pub fn store(&mut self, src: Reg) -> &mut Self {
        self.op(Op::Store { src })
    }

    pub fn arith(&mut self, dst: Reg, src: Reg) -> &mut Self {
        self.op(Op::Arith { dst, src })
    }

    pub fn cmp(&mut self, a: Reg, b: Reg) -> &mut Self {
        self.op(Op::Cmp { a, b })
    }

    pub fn call(&mut self, func: &str) -> &mut Self {
        self.op(Op::CallDirect {
            func: func.to_string(),
        })
    }

    pub fn plt(&mut self, symbol: &str) -> &mut Self {
        self.op(Op::CallPlt {
            symbol: symbol.to_string(),
        })
    }

    pub fn call_reg(&mut self, reg: Reg) -> &mut Self {
        self.op(Op::CallIndirect { reg })
    }

    pub fn syscall(&mut self) -> &mut Self {
        self.op(Op::SyscallInstr)
    }

    /// `rax = nr; syscall`.
    pub fn sys(&mut self, nr: i64) -> &mut Self {
        self.konst(Reg::Rax, nr).syscall()
    }

    pub fn jump(&mut self, target: BlockId) {
        self.op(Op::Jump { target });
    }

    pub fn cond(&mut self, taken: BlockId, not_taken: BlockId) {
        self.op(Op::CondJump { taken, not_taken });
    }

    pub fn ret(&mut self) {
        self.op(Op::Ret);
    }

    /// Falls through to `next` without a branch instruction.
    pub fn falls(&mut self, next: BlockId) {
        self.fallthrough = Some(next);
    }
}

pub struct ImageBuilder {
    image: ProgramImage,
}

impl ImageBuilder {
    pub fn new(executable: ModuleUnit) -> Self {
        ImageBuilder {
            image: ProgramImage {
                pmir_version: PMIR_VERSION,
                executable,
                libraries: Vec::new(),
                library_corpus_path: None,
                main_function: "main".into(),
                preinit_functions: Vec::new(),
                init_functions: Vec::new(),
                fini_functions: Vec::new(),
                dl_bindings: Vec::new(),
                filters: BTreeMap::new(),
            },
        }
    }

    pub fn library(mut self, m: ModuleUnit) -> Self {
        self.image.libraries.push(m);
        self
    }

    pub fn main(mut self, name: &str) -> Self {
        self.image.main_function = name.to_string();
        self
    }

    pub fn preinit(mut self, f: &str) -> Self {
        self.image.preinit_functions.push(f.to_string());
        self
    }

    pub fn init(mut self, f: &str) -> Self {
        self.image.init_functions.push(f.to_string());
        self
    }

    pub fn fini(mut self, f: &str) -> Self {
        self.image.fini_functions.push(f.to_string());
        self
    }

    pub fn corpus(mut self, path: &str) -> Self {
        self.image.library_corpus_path = Some(path.into());
        self
    }

    pub fn build(self) -> ProgramImage {
        self.image
    }
}
