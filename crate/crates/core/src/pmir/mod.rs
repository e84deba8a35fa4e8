//! Lifted program model.
//!
//! A [`ProgramImage`] is an executable module plus the shared libraries it
//! depends on. Each module holds functions made of basic blocks of abstract
//! x86-64 style instructions. The model is the ingestion boundary for every
//! analysis in this crate; it is loaded from and written to canonical JSON
//! (`.pmir.json`).

mod builder;
mod link;
mod load;

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

pub use builder::{BlockBuilder, FunctionBuilder, ImageBuilder, ModuleBuilder};
pub use link::{FnCfg, FuncId, InstrLoc, Linked};
pub use load::{
    check_addresses, load_corpus, load_image, load_library, parse_image, parse_library,
    serialize_image, serialize_library, validate_image,
};

use crate::bpf::BpfInsn;

/// Current schema version written to every document.
pub const PMIR_VERSION: u32 = 1;

pub type BlockId = u32;

/// The closed set of general purpose registers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reg {
    Rax,
    Rbx,
    Rcx,
    Rdx,
    Rsi,
    Rdi,
    Rbp,
    Rsp,
    R8,
    R9,
    R10,
    R11,
    R12,
    R13,
    R14,
    R15,
}

impl Reg {
    pub const ALL: [Reg; 16] = [
        Reg::Rax,
        Reg::Rbx,
        Reg::Rcx,
        Reg::Rdx,
        Reg::Rsi,
        Reg::Rdi,
        Reg::Rbp,
        Reg::Rsp,
        Reg::R8,
        Reg::R9,
        Reg::R10,
        Reg::R11,
        Reg::R12,
        Reg::R13,
        Reg::R14,
        Reg::R15,
    ];

    /// SysV integer argument registers, in order.
    pub const ARGS: [Reg; 6] = [Reg::Rdi, Reg::Rsi, Reg::Rdx, Reg::Rcx, Reg::R8, Reg::R9];

    /// Registers a call may clobber.
    pub const CALLER_SAVED: [Reg; 9] = [
        Reg::Rax,
        Reg::Rcx,
        Reg::Rdx,
        Reg::Rsi,
        Reg::Rdi,
        Reg::R8,
        Reg::R9,
        Reg::R10,
        Reg::R11,
    ];

    /// Registers preserved across calls.
    pub const CALLEE_SAVED: [Reg; 7] = [
        Reg::Rbx,
        Reg::Rbp,
        Reg::Rsp,
        Reg::R12,
        Reg::R13,
        Reg::R14,
        Reg::R15,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Position in the argument order, if this is an argument register.
    pub fn arg_index(self) -> Option<usize> {
        Reg::ARGS.iter().position(|&r| r == self)
    }

    pub fn name(self) -> &'static str {
        match self {
            Reg::Rax => "rax",
            Reg::Rbx => "rbx",
            Reg::Rcx => "rcx",
            Reg::Rdx => "rdx",
            Reg::Rsi => "rsi",
            Reg::Rdi => "rdi",
            Reg::Rbp => "rbp",
            Reg::Rsp => "rsp",
            Reg::R8 => "r8",
            Reg::R9 => "r9",
            Reg::R10 => "r10",
            Reg::R11 => "r11",
            Reg::R12 => "r12",
            Reg::R13 => "r13",
            Reg::R14 => "r14",
            Reg::R15 => "r15",
        }
    }
}

impl fmt::Display for Reg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One instruction. `address` is unique across the whole image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instruction {
    pub address: u64,
    #[serde(flatten)]
    pub op: Op,
}

/// Instruction forms.
///
/// Function references are either a bare function name (resolved in the
/// containing module) or `module::function`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Op {
    Const { reg: Reg, imm: i64 },
    Move { dst: Reg, src: Reg },
    TakeAddr { reg: Reg, func: String },
    TakeAddrData { reg: Reg, object: String },
    StrConst { reg: Reg, value: String },
    Load { dst: Reg },
    Store { src: Reg },
    Arith { dst: Reg, src: Reg },
    Cmp { a: Reg, b: Reg },
    CallDirect { func: String },
    CallPlt { symbol: String },
    CallIndirect { reg: Reg },
    Jump { target: BlockId },
    CondJump { taken: BlockId, not_taken: BlockId },
    SyscallInstr,
    Ret,
    /// Synthetic: installs the filter embedded under `partition`.
    InstallFilter { partition: u32 },
}

impl Op {
    pub fn is_terminator(&self) -> bool {
        matches!(self, Op::Jump { .. } | Op::CondJump { .. } | Op::Ret)
    }

    pub fn is_call(&self) -> bool {
        matches!(
            self,
            Op::CallDirect { .. } | Op::CallPlt { .. } | Op::CallIndirect { .. }
        )
    }

    /// Registers written by this instruction. Calls clobber every
    /// caller-saved register; the kernel clobbers rax, rcx and r11.
    pub fn defs(&self) -> Vec<Reg> {
        match self {
            Op::Const { reg, .. }
            | Op::TakeAddr { reg, .. }
            | Op::TakeAddrData { reg, .. }
            | Op::StrConst { reg, .. } => vec![*reg],
            Op::Move { dst, .. } | Op::Load { dst } | Op::Arith { dst, .. } => vec![*dst],
            Op::CallDirect { .. } | Op::CallPlt { .. } | Op::CallIndirect { .. } => {
                Reg::CALLER_SAVED.to_vec()
            }
            Op::SyscallInstr => vec![Reg::Rax, Reg::Rcx, Reg::R11],
            Op::Store { .. }
            | Op::Cmp { .. }
            | Op::Jump { .. }
            | Op::CondJump { .. }
            | Op::Ret
            | Op::InstallFilter { .. } => Vec::new(),
        }
    }

    /// Registers read by this instruction. A call may read any register in
    /// the callee, so calls use all of them; `ret` reads the return value.
    pub fn uses(&self) -> Vec<Reg> {
        match self {
            Op::Move { src, .. } => vec![*src],
            Op::Store { src } => vec![*src],
            Op::Arith { dst, src } => {
                if dst == src {
                    vec![*dst]
                } else {
                    vec![*dst, *src]
                }
            }
            Op::Cmp { a, b } => {
                if a == b {
                    vec![*a]
                } else {
                    vec![*a, *b]
                }
            }
            Op::CallDirect { .. } | Op::CallPlt { .. } | Op::CallIndirect { .. } => {
                Reg::ALL.to_vec()
            }
            Op::SyscallInstr => vec![
                Reg::Rax,
                Reg::Rdi,
                Reg::Rsi,
                Reg::Rdx,
                Reg::R10,
                Reg::R8,
                Reg::R9,
            ],
            Op::Ret => vec![Reg::Rax],
            Op::Const { .. }
            | Op::TakeAddr { .. }
            | Op::TakeAddrData { .. }
            | Op::StrConst { .. }
            | Op::Load { .. }
            | Op::Jump { .. }
            | Op::CondJump { .. }
            | Op::InstallFilter { .. } => Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BasicBlock {
    pub id: BlockId,
    pub address: u64,
    pub instructions: Vec<Instruction>,
    pub successors: Vec<BlockId>,
    /// Blocks introduced by hardening; they carry no program semantics.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub synthetic: bool,
}

impl BasicBlock {
    pub fn terminator(&self) -> Option<&Op> {
        self.instructions
            .last()
            .map(|i| &i.op)
            .filter(|op| op.is_terminator())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FunctionDef {
    pub name: String,
    pub address: u64,
    pub entry_block: BlockId,
    pub blocks: Vec<BasicBlock>,
}

impl FunctionDef {
    pub fn block(&self, id: BlockId) -> Option<&BasicBlock> {
        self.blocks.iter().find(|b| b.id == id)
    }

    pub fn block_index(&self, id: BlockId) -> Option<usize> {
        self.blocks.iter().position(|b| b.id == id)
    }

    pub fn instructions(&self) -> impl Iterator<Item = &Instruction> {
        self.blocks.iter().flat_map(|b| b.instructions.iter())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModuleKind {
    Executable,
    SharedLibrary,
}

/// A constant array of function pointers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataObject {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub symbol: Option<String>,
    pub members: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModuleUnit {
    pub name: String,
    pub kind: ModuleKind,
    pub functions: Vec<FunctionDef>,
    /// Exported symbol name to local function name.
    pub exports: BTreeMap<String, String>,
    #[serde(default)]
    pub data_objects: Vec<DataObject>,
}

impl ModuleUnit {
    pub fn function(&self, name: &str) -> Option<&FunctionDef> {
        self.functions.iter().find(|f| f.name == name)
    }
}

/// A fully qualified function reference.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub struct FuncRef {
    pub module: String,
    pub name: String,
}

impl FuncRef {
    pub fn new(module: impl Into<String>, name: impl Into<String>) -> Self {
        FuncRef {
            module: module.into(),
            name: name.into(),
        }
    }

    /// Parses `module::name`, or a bare `name` relative to `default_module`.
    pub fn parse_in(text: &str, default_module: &str) -> FuncRef {
        match text.rsplit_once("::") {
            Some((module, name)) => FuncRef::new(module, name),
            None => FuncRef::new(default_module, text),
        }
    }
}

impl fmt::Display for FuncRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}::{}", self.module, self.name)
    }
}

impl From<FuncRef> for String {
    fn from(r: FuncRef) -> String {
        r.to_string()
    }
}

impl TryFrom<String> for FuncRef {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        match s.rsplit_once("::") {
            Some((m, n)) if !m.is_empty() && !n.is_empty() => Ok(FuncRef::new(m, n)),
            _ => Err(format!("expected `module::function`, got `{s}`")),
        }
    }
}

/// A function pointer obtained through `dlsym`, marked as taken at the
/// `dlsym` callsite.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DlBinding {
    pub callsite: u64,
    pub target: FuncRef,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProgramImage {
    pub pmir_version: u32,
    pub executable: ModuleUnit,
    #[serde(default)]
    pub libraries: Vec<ModuleUnit>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub library_corpus_path: Option<PathBuf>,
    /// Name of `main` inside the executable.
    pub main_function: String,
    #[serde(default)]
    pub preinit_functions: Vec<String>,
    #[serde(default)]
    pub init_functions: Vec<String>,
    #[serde(default)]
    pub fini_functions: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub dl_bindings: Vec<DlBinding>,
    /// Filters embedded by hardening, keyed by partition id.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub filters: BTreeMap<u32, Vec<BpfInsn>>,
}

impl ProgramImage {
    pub fn modules(&self) -> impl Iterator<Item = &ModuleUnit> {
        std::iter::once(&self.executable).chain(self.libraries.iter())
    }

    pub fn module(&self, name: &str) -> Option<&ModuleUnit> {
        self.modules().find(|m| m.name == name)
    }

    pub fn module_mut(&mut self, name: &str) -> Option<&mut ModuleUnit> {
        if self.executable.name == name {
            return Some(&mut self.executable);
        }
        self.libraries.iter_mut().find(|m| m.name == name)
    }

    pub fn main_ref(&self) -> FuncRef {
        FuncRef::new(&self.executable.name, &self.main_function)
    }

    fn root_refs(&self, list: &[String]) -> Vec<FuncRef> {
        list.iter()
            .map(|s| FuncRef::parse_in(s, &self.executable.name))
            .collect()
    }

    pub fn preinit_refs(&self) -> Vec<FuncRef> {
        self.root_refs(&self.preinit_functions)
    }

    pub fn init_refs(&self) -> Vec<FuncRef> {
        self.root_refs(&self.init_functions)
    }

    pub fn fini_refs(&self) -> Vec<FuncRef> {
        self.root_refs(&self.fini_functions)
    }
}

/// A standalone shared library document, as found in a library corpus.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LibraryDoc {
    pub pmir_version: u32,
    pub module: ModuleUnit,
}
