//! Classic BPF seccomp filters: compilation, validation and evaluation.

mod insert;

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use insert::{insert_filter, InstallSite};

pub const BPF_LD: u16 = 0x00;
pub const BPF_JMP: u16 = 0x05;
pub const BPF_RET: u16 = 0x06;
pub const BPF_W: u16 = 0x00;
pub const BPF_ABS: u16 = 0x20;
pub const BPF_JA: u16 = 0x00;
pub const BPF_JEQ: u16 = 0x10;
pub const BPF_K: u16 = 0x00;

pub const LD_W_ABS: u16 = BPF_LD | BPF_W | BPF_ABS;
pub const JMP_JEQ_K: u16 = BPF_JMP | BPF_JEQ | BPF_K;
pub const JMP_JA: u16 = BPF_JMP | BPF_JA;
pub const RET_K: u16 = BPF_RET | BPF_K;

pub const MAX_INSNS: usize = 4096;

pub const AUDIT_ARCH_X86_64: u32 = 0xC000_003E;
pub const SECCOMP_RET_KILL_THREAD: u32 = 0x0000_0000;
pub const SECCOMP_RET_ERRNO: u32 = 0x0005_0000;
pub const SECCOMP_RET_ALLOW: u32 = 0x7fff_0000;
pub const SECCOMP_RET_ACTION: u32 = 0xffff_0000;
pub const SECCOMP_RET_DATA: u32 = 0x0000_ffff;

pub const OFFSET_NR: u32 = 0;
pub const OFFSET_ARCH: u32 = 4;
pub const OFFSET_IP: u32 = 8;
pub const SECCOMP_DATA_SIZE: usize = 64;

/// Comparisons per chunk before a trampoline is needed. Each JEQ in a chunk
/// jumps forward at most this far, which stays under the 8-bit limit.
const CHUNK: usize = 250;

/// One `struct sock_filter`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BpfInsn {
    pub code: u16,
    pub jt: u8,
    pub jf: u8,
    pub k: u32,
}

impl BpfInsn {
    pub const fn stmt(code: u16, k: u32) -> Self {
        BpfInsn { code, jt: 0, jf: 0, k }
    }

    pub const fn jump(code: u16, k: u32, jt: u8, jf: u8) -> Self {
        BpfInsn { code, jt, jf, k }
    }

    pub fn to_bytes(self) -> [u8; 8] {
        let mut b = [0u8; 8];
        b[0..2].copy_from_slice(&self.code.to_le_bytes());
        b[2] = self.jt;
        b[3] = self.jf;
        b[4..8].copy_from_slice(&self.k.to_le_bytes());
        b
    }

    pub fn from_bytes(b: [u8; 8]) -> Self {
        BpfInsn {
            code: u16::from_le_bytes([b[0], b[1]]),
            jt: b[2],
            jf: b[3],
            k: u32::from_le_bytes([b[4], b[5], b[6], b[7]]),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BpfError {
    #[error("empty program")]
    Empty,
    #[error("program has {0} instructions, limit is 4096")]
    TooLong(usize),
    #[error("unsupported opcode {code:#06x} at {pc}")]
    BadOpcode { pc: usize, code: u16 },
    #[error("jump at {pc} lands outside the program")]
    JumpOutOfRange { pc: usize },
    #[error("load at {pc} reads offset {k}, outside seccomp_data or misaligned")]
    BadLoad { pc: usize, k: u32 },
    #[error("last instruction is not a return")]
    NoFinalReturn,
    #[error("blob length {0} is not a multiple of 8")]
    BlobLength(usize),
}

/// What the kernel does with a syscall.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Allow,
    KillThread,
    Errno(u16),
}

impl Action {
    pub fn ret_value(self) -> u32 {
        match self {
            Action::Allow => SECCOMP_RET_ALLOW,
            Action::KillThread => SECCOMP_RET_KILL_THREAD,
            Action::Errno(n) => SECCOMP_RET_ERRNO | n as u32,
        }
    }

    /// Decodes a filter return value. Unknown actions are treated as a kill,
    /// as the kernel does.
    pub fn from_ret(v: u32) -> Action {
        match v & SECCOMP_RET_ACTION {
            SECCOMP_RET_ALLOW => Action::Allow,
            SECCOMP_RET_ERRNO => Action::Errno((v & SECCOMP_RET_DATA) as u16),
            _ => Action::KillThread,
        }
    }

    /// Combines the verdicts of stacked filters, given newest first. The
    /// action with the lowest action value wins; on equal actions the newest
    /// filter's data is kept.
    pub fn most_restrictive(verdicts: impl IntoIterator<Item = Action>) -> Action {
        let mut best: Option<Action> = None;
        for v in verdicts {
            best = match best {
                Some(b) if (v.ret_value() & SECCOMP_RET_ACTION) >= (b.ret_value() & SECCOMP_RET_ACTION) => Some(b),
                _ => Some(v),
            };
        }
        best.unwrap_or(Action::Allow)
    }
}

/// Deny action used for syscalls outside the allow-list.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum DenyAction {
    #[default]
    KillThread,
    Errno(u16),
}

impl DenyAction {
    pub fn action(self) -> Action {
        match self {
            DenyAction::KillThread => Action::KillThread,
            DenyAction::Errno(n) => Action::Errno(n),
        }
    }
}

impl fmt::Display for DenyAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DenyAction::KillThread => f.write_str("kill-thread"),
            DenyAction::Errno(n) => write!(f, "errno:{n}"),
        }
    }
}

impl FromStr for DenyAction {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "kill-thread" {
            return Ok(DenyAction::KillThread);
        }
        s.strip_prefix("errno:")
            .and_then(|n| n.parse::<u16>().ok())
            .map(DenyAction::Errno)
            .ok_or_else(|| format!("expected `kill-thread` or `errno:<n>`, got `{s}`"))
    }
}

impl TryFrom<String> for DenyAction {
    type Error = String;
    fn try_from(s: String) -> Result<Self, String> {
        s.parse()
    }
}

impl From<DenyAction> for String {
    fn from(d: DenyAction) -> String {
        d.to_string()
    }
}

/// The datum a seccomp filter classifies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SeccompData {
    pub nr: u32,
    pub arch: u32,
    pub instruction_pointer: u64,
    pub args: [u64; 6],
}

impl SeccompData {
    pub fn syscall(nr: u32) -> Self {
        SeccompData {
            nr,
            arch: AUDIT_ARCH_X86_64,
            ..Default::default()
        }
    }

    /// Kernel ABI layout: nr@0, arch@4, ip@8, args@16+8i, little-endian.
    pub fn to_bytes(&self) -> [u8; SECCOMP_DATA_SIZE] {
        let mut b = [0u8; SECCOMP_DATA_SIZE];
        b[0..4].copy_from_slice(&self.nr.to_le_bytes());
        b[4..8].copy_from_slice(&self.arch.to_le_bytes());
        b[8..16].copy_from_slice(&self.instruction_pointer.to_le_bytes());
        for (i, a) in self.args.iter().enumerate() {
            b[16 + 8 * i..24 + 8 * i].copy_from_slice(&a.to_le_bytes());
        }
        b
    }
}

fn load_ok(k: u32) -> bool {
    (k as usize) + 4 <= SECCOMP_DATA_SIZE && k.is_multiple_of(4)
}

/// Checks the structural rules every program must satisfy before it is
/// evaluated or embedded.
pub fn validate(prog: &[BpfInsn]) -> Result<(), BpfError> {
    if prog.is_empty() {
        return Err(BpfError::Empty);
    }
    if prog.len() > MAX_INSNS {
        return Err(BpfError::TooLong(prog.len()));
    }
    let len = prog.len();
    for (pc, ins) in prog.iter().enumerate() {
        match ins.code {
            LD_W_ABS => {
                if !load_ok(ins.k) {
                    return Err(BpfError::BadLoad { pc, k: ins.k });
                }
            }
            JMP_JEQ_K => {
                let far = pc + 1 + ins.jt.max(ins.jf) as usize;
                if far >= len {
                    return Err(BpfError::JumpOutOfRange { pc });
                }
            }
            JMP_JA => {
                if (pc as u64) + 1 + ins.k as u64 >= len as u64 {
                    return Err(BpfError::JumpOutOfRange { pc });
                }
            }
            RET_K => {}
            code => return Err(BpfError::BadOpcode { pc, code }),
        }
    }
    if prog[len - 1].code != RET_K {
        return Err(BpfError::NoFinalReturn);
    }
    Ok(())
}

/// Runs a program against `data`. The program should be validated first;
/// loads outside the datum still fault here rather than being misread.
pub fn eval_bpf(prog: &[BpfInsn], data: &SeccompData) -> Result<Action, BpfError> {
    let bytes = data.to_bytes();
    let mut acc: u32 = 0;
    let mut pc = 0usize;
    // Every jump moves forward, so the program length bounds the steps.
    while let Some(ins) = prog.get(pc) {
        match ins.code {
            LD_W_ABS => {
                if !load_ok(ins.k) {
                    return Err(BpfError::BadLoad { pc, k: ins.k });
                }
                let k = ins.k as usize;
                acc = u32::from_le_bytes(bytes[k..k + 4].try_into().unwrap());
                pc += 1;
            }
            JMP_JEQ_K => {
                let off = if acc == ins.k { ins.jt } else { ins.jf };
                pc += 1 + off as usize;
            }
            JMP_JA => pc += 1 + ins.k as usize,
            RET_K => return Ok(Action::from_ret(ins.k)),
            code => return Err(BpfError::BadOpcode { pc, code }),
        }
    }
    Err(BpfError::JumpOutOfRange { pc })
}

/// Compiles an allow-list into an ascending JEQ chain.
///
/// Layout: arch check, load of `nr`, then the comparisons in chunks of at
/// most 250. A non-last chunk ends with `ja +1` to fall into the next chunk,
/// followed by a trampoline `ja` to the final allow return that the chunk's
/// comparisons target. The program ends with the deny return and, when the
/// set is nonempty, the allow return.
pub fn compile_filter(allowed: &BTreeSet<u32>, deny: DenyAction) -> Vec<BpfInsn> {
    let deny = deny.action().ret_value();
    let mut prog = vec![
        BpfInsn::stmt(LD_W_ABS, OFFSET_ARCH),
        BpfInsn::jump(JMP_JEQ_K, AUDIT_ARCH_X86_64, 1, 0),
        BpfInsn::stmt(RET_K, deny),
        BpfInsn::stmt(LD_W_ABS, OFFSET_NR),
    ];
    let nrs: Vec<u32> = allowed.iter().copied().collect();
    let chunks: Vec<&[u32]> = nrs.chunks(CHUNK).collect();
    let mut trampolines = Vec::new();
    for (ci, chunk) in chunks.iter().enumerate() {
        let c = chunk.len();
        for (j, &nr) in chunk.iter().enumerate() {
            prog.push(BpfInsn::jump(JMP_JEQ_K, nr, (c - j) as u8, 0));
        }
        if ci + 1 < chunks.len() {
            prog.push(BpfInsn::stmt(JMP_JA, 1));
            trampolines.push(prog.len());
            prog.push(BpfInsn::stmt(JMP_JA, 0));
        }
    }
    prog.push(BpfInsn::stmt(RET_K, deny));
    if !nrs.is_empty() {
        let allow = prog.len();
        prog.push(BpfInsn::stmt(RET_K, SECCOMP_RET_ALLOW));
        for t in trampolines {
            prog[t].k = (allow - t - 1) as u32;
        }
    }
    assert!(prog.len() <= MAX_INSNS);
    prog
}

/// Little-endian `sock_filter` records, 8 bytes each.
pub fn to_blob(prog: &[BpfInsn]) -> Vec<u8> {
    prog.iter().flat_map(|i| i.to_bytes()).collect()
}

pub fn from_blob(blob: &[u8]) -> Result<Vec<BpfInsn>, BpfError> {
    if !blob.len().is_multiple_of(8) {
        return Err(BpfError::BlobLength(blob.len()));
    }
    Ok(blob
        .chunks_exact(8)
        .map(|c| BpfInsn::from_bytes(c.try_into().unwrap()))
        .collect())
}

fn ret_name(k: u32) -> String {
    match Action::from_ret(k) {
        Action::Allow => "ALLOW".into(),
        Action::KillThread => "KILL_THREAD".into(),
        Action::Errno(n) => format!("ERRNO({n})"),
    }
}

/// One line per instruction, with jump targets as absolute indices.
pub fn disassemble(prog: &[BpfInsn]) -> String {
    let mut out = String::new();
    for (pc, ins) in prog.iter().enumerate() {
        let text = match ins.code {
            LD_W_ABS => {
                let field = match ins.k {
                    OFFSET_NR => "nr".to_string(),
                    OFFSET_ARCH => "arch".to_string(),
                    OFFSET_IP => "ip".to_string(),
                    k => format!("{k}"),
                };
                format!("ld  [{}]  ; {}", ins.k, field)
            }
            JMP_JEQ_K => {
                let name = if ins.k == AUDIT_ARCH_X86_64 {
                    "AUDIT_ARCH_X86_64".to_string()
                } else {
                    crate::systable::name(ins.k).unwrap_or("?").to_string()
                };
                format!(
                    "jeq #{:#x}, {}, {}  ; {}",
                    ins.k,
                    pc + 1 + ins.jt as usize,
                    pc + 1 + ins.jf as usize,
                    name
                )
            }
            JMP_JA => format!("ja  {}", pc + 1 + ins.k as usize),
            RET_K => format!("ret #{:#010x}  ; {}", ins.k, ret_name(ins.k)),
            code => format!(".word {code:#06x} {} {} {:#x}", ins.jt, ins.jf, ins.k),
        };
        out.push_str(&format!("{pc:04}: {text}\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn allow_set(prog: &[BpfInsn]) -> BTreeSet<u32> {
        (0..=crate::systable::MAX_NR)
            .filter(|&nr| eval_bpf(prog, &SeccompData::syscall(nr)).unwrap() == Action::Allow)
            .collect()
    }

    #[test]
    fn empty_set_is_five_instructions() {
        let p = compile_filter(&BTreeSet::new(), DenyAction::KillThread);
        assert_eq!(p.len(), 5);
        validate(&p).unwrap();
        assert!(allow_set(&p).is_empty());
    }

    #[test]
    fn small_set() {
        let s: BTreeSet<u32> = [0, 1].into();
        let p = compile_filter(&s, DenyAction::KillThread);
        validate(&p).unwrap();
        assert_eq!(eval_bpf(&p, &SeccompData::syscall(1)), Ok(Action::Allow));
        assert_eq!(eval_bpf(&p, &SeccompData::syscall(59)), Ok(Action::KillThread));
    }

    #[test]
    fn arch_gate() {
        let s: BTreeSet<u32> = (0..=460).collect();
        let p = compile_filter(&s, DenyAction::KillThread);
        let d = SeccompData {
            arch: 0xDEAD_BEEF,
            ..SeccompData::syscall(0)
        };
        assert_eq!(eval_bpf(&p, &d), Ok(Action::KillThread));
    }

    #[test]
    fn full_set_uses_trampoline() {
        let s: BTreeSet<u32> = (0..=460).collect();
        let p = compile_filter(&s, DenyAction::KillThread);
        validate(&p).unwrap();
        // header 4, 461 comparisons, one ja/trampoline pair, two returns
        assert_eq!(p.len(), 469);
        assert_eq!(allow_set(&p), s);
    }

    #[test]
    fn errno_deny() {
        let s: BTreeSet<u32> = [3].into();
        let p = compile_filter(&s, "errno:1".parse().unwrap());
        assert_eq!(p[2].k, 0x0005_0001);
        assert_eq!(eval_bpf(&p, &SeccompData::syscall(4)), Ok(Action::Errno(1)));
    }

    #[test]
    fn rejects_bad_programs() {
        assert_eq!(validate(&[]), Err(BpfError::Empty));
        let past_end = [BpfInsn::jump(JMP_JEQ_K, 0, 5, 0), BpfInsn::stmt(RET_K, 0)];
        assert_eq!(validate(&past_end), Err(BpfError::JumpOutOfRange { pc: 0 }));
        let bad_load = [BpfInsn::stmt(LD_W_ABS, 64), BpfInsn::stmt(RET_K, 0)];
        assert!(matches!(validate(&bad_load), Err(BpfError::BadLoad { .. })));
        let no_ret = [BpfInsn::stmt(LD_W_ABS, 0)];
        assert_eq!(validate(&no_ret), Err(BpfError::NoFinalReturn));
        let bad_op = [BpfInsn::stmt(0x07, 0), BpfInsn::stmt(RET_K, 0)];
        assert!(matches!(validate(&bad_op), Err(BpfError::BadOpcode { .. })));
        assert_eq!(
            validate(&vec![BpfInsn::stmt(RET_K, 0); 4097]),
            Err(BpfError::TooLong(4097))
        );
    }

    #[test]
    fn load_fault_is_not_a_kill() {
        let p = [BpfInsn::stmt(LD_W_ABS, 62), BpfInsn::stmt(RET_K, 0)];
        assert!(matches!(
            eval_bpf(&p, &SeccompData::syscall(0)),
            Err(BpfError::BadLoad { .. })
        ));
    }

    #[test]
    fn blob_round_trip() {
        let s: BTreeSet<u32> = [0, 1, 44].into();
        let p = compile_filter(&s, DenyAction::KillThread);
        let blob = to_blob(&p);
        assert_eq!(blob.len(), 8 * p.len());
        assert_eq!(&blob[0..8], &[0x20, 0, 0, 0, 4, 0, 0, 0]);
        assert_eq!(from_blob(&blob).unwrap(), p);
        assert_eq!(from_blob(&blob[1..]), Err(BpfError::BlobLength(8 * p.len() - 1)));
    }

    #[test]
    fn seccomp_data_layout() {
        let d = SeccompData {
            nr: 0x11223344,
            arch: AUDIT_ARCH_X86_64,
            instruction_pointer: 0x0102030405060708,
            args: [1, 2, 3, 4, 5, 6],
        };
        let b = d.to_bytes();
        assert_eq!(&b[0..4], &[0x44, 0x33, 0x22, 0x11]);
        assert_eq!(&b[4..8], &[0x3e, 0, 0, 0xc0]);
        assert_eq!(b[8], 0x08);
        assert_eq!(b[16], 1);
        assert_eq!(b[16 + 8 * 5], 6);
    }

    #[test]
    fn stacked_precedence() {
        use Action::*;
        assert_eq!(Action::most_restrictive([Allow, KillThread]), KillThread);
        assert_eq!(Action::most_restrictive([Errno(1), Allow]), Errno(1));
        assert_eq!(Action::most_restrictive([Errno(2), Errno(1)]), Errno(2));
        assert_eq!(Action::most_restrictive([Errno(5), KillThread]), KillThread);
        assert_eq!(Action::most_restrictive([]), Allow);
    }

    #[test]
    fn deny_action_parse() {
        assert_eq!("kill-thread".parse(), Ok(DenyAction::KillThread));
        assert_eq!("errno:13".parse(), Ok(DenyAction::Errno(13)));
        assert!("errno:x".parse::<DenyAction>().is_err());
    }
}
