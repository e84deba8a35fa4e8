//! Library entry points with fixed, modeled behavior.
//!
//! These symbols are never bound through export tables: the tracer executes
//! them as stubs and the static analyses use the same syscall footprints, so
//! both sides agree on what a call costs.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Intrinsic {
    Dlopen,
    Dlsym,
    Execve,
    PthreadCreate,
    Syscall,
    Exit,
    #[serde(rename = "_exit")]
    UnderscoreExit,
    Abort,
}

impl Intrinsic {
    pub const ALL: [Intrinsic; 8] = [
        Intrinsic::Dlopen,
        Intrinsic::Dlsym,
        Intrinsic::Execve,
        Intrinsic::PthreadCreate,
        Intrinsic::Syscall,
        Intrinsic::Exit,
        Intrinsic::UnderscoreExit,
        Intrinsic::Abort,
    ];

    pub fn from_symbol(symbol: &str) -> Option<Intrinsic> {
        Intrinsic::ALL.into_iter().find(|i| i.symbol() == symbol)
    }

    pub fn symbol(self) -> &'static str {
        match self {
            Intrinsic::Dlopen => "dlopen",
            Intrinsic::Dlsym => "dlsym",
            Intrinsic::Execve => "execve",
            Intrinsic::PthreadCreate => "pthread_create",
            Intrinsic::Syscall => "syscall",
            Intrinsic::Exit => "exit",
            Intrinsic::UnderscoreExit => "_exit",
            Intrinsic::Abort => "abort",
        }
    }

    /// Syscalls the stub itself performs. `syscall` performs the number in
    /// `rdi`, which is not part of the fixed footprint.
    pub fn syscalls(self) -> &'static [u32] {
        match self {
            // openat, mmap, close
            Intrinsic::Dlopen => &[257, 9, 3],
            Intrinsic::Dlsym | Intrinsic::Syscall => &[],
            Intrinsic::Execve => &[59],
            // clone
            Intrinsic::PthreadCreate => &[56],
            // exit_group
            Intrinsic::Exit | Intrinsic::UnderscoreExit => &[231],
            // tgkill
            Intrinsic::Abort => &[234],
        }
    }

    pub fn is_noreturn(self) -> bool {
        matches!(
            self,
            Intrinsic::Exit | Intrinsic::UnderscoreExit | Intrinsic::Abort
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn symbols_round_trip() {
        for i in Intrinsic::ALL {
            assert_eq!(Intrinsic::from_symbol(i.symbol()), Some(i));
        }
        assert_eq!(Intrinsic::from_symbol("write"), None);
    }
}
