//! x86-64 system call numbers and the report tables built on them.

use std::collections::BTreeSet;

/// Version of the vendored name table.
pub const TABLE_VERSION: u32 = 1;

/// Highest syscall number in the table.
pub const MAX_NR: u32 = 460;

/// First number of the block that follows the unassigned 335..=423 gap.
const HIGH_BASE: u32 = 424;

const LOW: [&str; 335] = [
    "read", "write", "open", "close", "stat", "fstat", "lstat", "poll", "lseek", "mmap",
    "mprotect", "munmap", "brk", "rt_sigaction", "rt_sigprocmask", "rt_sigreturn", "ioctl",
    "pread64", "pwrite64", "readv", "writev", "access", "pipe", "select", "sched_yield", "mremap",
    "msync", "mincore", "madvise", "shmget", "shmat", "shmctl", "dup", "dup2", "pause",
    "nanosleep", "getitimer", "alarm", "setitimer", "getpid", "sendfile", "socket", "connect",
    "accept", "sendto", "recvfrom", "sendmsg", "recvmsg", "shutdown", "bind", "listen",
    "getsockname", "getpeername", "socketpair", "setsockopt", "getsockopt", "clone", "fork",
    "vfork", "execve", "exit", "wait4", "kill", "uname", "semget", "semop", "semctl", "shmdt",
    "msgget", "msgsnd", "msgrcv", "msgctl", "fcntl", "flock", "fsync", "fdatasync", "truncate",
    "ftruncate", "getdents", "getcwd", "chdir", "fchdir", "rename", "mkdir", "rmdir", "creat",
    "link", "unlink", "symlink", "readlink", "chmod", "fchmod", "chown", "fchown", "lchown",
    "umask", "gettimeofday", "getrlimit", "getrusage", "sysinfo", "times", "ptrace", "getuid",
    "syslog", "getgid", "setuid", "setgid", "geteuid", "getegid", "setpgid", "getppid", "getpgrp",
    "setsid", "setreuid", "setregid", "getgroups", "setgroups", "setresuid", "getresuid",
    "setresgid", "getresgid", "getpgid", "setfsuid", "setfsgid", "getsid", "capget", "capset",
    "rt_sigpending", "rt_sigtimedwait", "rt_sigqueueinfo", "rt_sigsuspend", "sigaltstack", "utime",
    "mknod", "uselib", "personality", "ustat", "statfs", "fstatfs", "sysfs", "getpriority",
    "setpriority", "sched_setparam", "sched_getparam", "sched_setscheduler", "sched_getscheduler",
    "sched_get_priority_max", "sched_get_priority_min", "sched_rr_get_interval", "mlock",
    "munlock", "mlockall", "munlockall", "vhangup", "modify_ldt", "pivot_root", "_sysctl", "prctl",
    "arch_prctl", "adjtimex", "setrlimit", "chroot", "sync", "acct", "settimeofday", "mount",
    "umount2", "swapon", "swapoff", "reboot", "sethostname", "setdomainname", "iopl", "ioperm",
    "create_module", "init_module", "delete_module", "get_kernel_syms", "query_module", "quotactl",
    "nfsservctl", "getpmsg", "putpmsg", "afs_syscall", "tuxcall", "security", "gettid",
    "readahead", "setxattr", "lsetxattr", "fsetxattr", "getxattr", "lgetxattr", "fgetxattr",
    "listxattr", "llistxattr", "flistxattr", "removexattr", "lremovexattr", "fremovexattr",
    "tkill", "time", "futex", "sched_setaffinity", "sched_getaffinity", "set_thread_area",
    "io_setup", "io_destroy", "io_getevents", "io_submit", "io_cancel", "get_thread_area",
    "lookup_dcookie", "epoll_create", "epoll_ctl_old", "epoll_wait_old", "remap_file_pages",
    "getdents64", "set_tid_address", "restart_syscall", "semtimedop", "fadvise64", "timer_create",
    "timer_settime", "timer_gettime", "timer_getoverrun", "timer_delete", "clock_settime",
    "clock_gettime", "clock_getres", "clock_nanosleep", "exit_group", "epoll_wait", "epoll_ctl",
    "tgkill", "utimes", "vserver", "mbind", "set_mempolicy", "get_mempolicy", "mq_open",
    "mq_unlink", "mq_timedsend", "mq_timedreceive", "mq_notify", "mq_getsetattr", "kexec_load",
    "waitid", "add_key", "request_key", "keyctl", "ioprio_set", "ioprio_get", "inotify_init",
    "inotify_add_watch", "inotify_rm_watch", "migrate_pages", "openat", "mkdirat", "mknodat",
    "fchownat", "futimesat", "newfstatat", "unlinkat", "renameat", "linkat", "symlinkat",
    "readlinkat", "fchmodat", "faccessat", "pselect6", "ppoll", "unshare", "set_robust_list",
    "get_robust_list", "splice", "tee", "sync_file_range", "vmsplice", "move_pages", "utimensat",
    "epoll_pwait", "signalfd", "timerfd_create", "eventfd", "fallocate", "timerfd_settime",
    "timerfd_gettime", "accept4", "signalfd4", "eventfd2", "epoll_create1", "dup3", "pipe2",
    "inotify_init1", "preadv", "pwritev", "rt_tgsigqueueinfo", "perf_event_open", "recvmmsg",
    "fanotify_init", "fanotify_mark", "prlimit64", "name_to_handle_at", "open_by_handle_at",
    "clock_adjtime", "syncfs", "sendmmsg", "setns", "getcpu", "process_vm_readv",
    "process_vm_writev", "kcmp", "finit_module", "sched_setattr", "sched_getattr", "renameat2",
    "seccomp", "getrandom", "memfd_create", "kexec_file_load", "bpf", "execveat", "userfaultfd",
    "membarrier", "mlock2", "copy_file_range", "preadv2", "pwritev2", "pkey_mprotect",
    "pkey_alloc", "pkey_free", "statx", "io_pgetevents", "rseq",
];

const HIGH: [&str; 37] = [
    "pidfd_send_signal", "io_uring_setup", "io_uring_enter", "io_uring_register", "open_tree",
    "move_mount", "fsopen", "fsconfig", "fsmount", "fspick", "pidfd_open", "clone3", "close_range",
    "openat2", "pidfd_getfd", "faccessat2", "process_madvise", "epoll_pwait2", "mount_setattr",
    "quotactl_fd", "landlock_create_ruleset", "landlock_add_rule", "landlock_restrict_self",
    "memfd_secret", "process_mrelease", "futex_waitv", "set_mempolicy_home_node", "cachestat",
    "fchmodat2", "map_shadow_stack", "futex_wake", "futex_wait", "futex_requeue", "statmount",
    "listmount", "lsm_get_self_attr", "lsm_set_self_attr",
];

/// Name of syscall `nr`, or `None` for unassigned numbers.
pub fn name(nr: u32) -> Option<&'static str> {
    if (nr as usize) < LOW.len() {
        Some(LOW[nr as usize])
    } else if nr >= HIGH_BASE {
        HIGH.get((nr - HIGH_BASE) as usize).copied()
    } else {
        None
    }
}

pub fn number(name: &str) -> Option<u32> {
    if let Some(i) = LOW.iter().position(|n| *n == name) {
        return Some(i as u32);
    }
    HIGH.iter()
        .position(|n| *n == name)
        .map(|i| HIGH_BASE + i as u32)
}

/// Every valid number, `0..=MAX_NR`.
pub fn all_numbers() -> BTreeSet<u32> {
    (0..=MAX_NR).collect()
}

/// Interchangeable syscalls: a payload needing the key can use any value.
/// `recv` and `send` are libc-level names with no x86-64 number of their own.
pub const EQUIVALENCES: &[(&str, &[&str])] = &[
    ("execve", &["execveat"]),
    ("accept", &["accept4"]),
    ("dup", &["dup2", "dup3"]),
    ("eventfd", &["eventfd2"]),
    ("chmod", &["fchmodat"]),
    ("recv", &["recvfrom", "read"]),
    ("send", &["sendto", "write"]),
    ("open", &["openat"]),
    (
        "select",
        &["pselect6", "epoll_wait", "epoll_wait_old", "poll", "ppoll", "epoll_pwait"],
    ),
];

/// Names accepted by the report operations: the table plus equivalence keys.
pub fn is_known_name(name: &str) -> bool {
    number(name).is_some() || EQUIVALENCES.iter().any(|(k, _)| *k == name)
}

/// The equivalence class of `name`, including `name` itself.
pub fn equivalents(name: &str) -> BTreeSet<&str> {
    let mut class = BTreeSet::new();
    class.insert(name);
    for (key, alts) in EQUIVALENCES {
        if *key == name || alts.contains(&name) {
            class.insert(key);
            class.extend(alts.iter().copied());
        }
    }
    class
}

/// Security-sensitive syscalls tracked by the hardening report.
pub const SENSITIVE: [&str; 17] = [
    "accept", "accept4", "bind", "chmod", "clone", "connect", "execve", "execveat", "fork",
    "listen", "mprotect", "ptrace", "recvfrom", "setgid", "setreuid", "setuid", "socket",
];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn well_known_numbers() {
        for (n, nr) in [
            ("read", 0),
            ("write", 1),
            ("close", 3),
            ("sendto", 44),
            ("recvfrom", 45),
            ("bind", 49),
            ("listen", 50),
            ("clone", 56),
            ("execve", 59),
            ("exit", 60),
            ("exit_group", 231),
            ("openat", 257),
            ("accept4", 288),
            ("execveat", 322),
            ("rseq", 334),
            ("pidfd_send_signal", 424),
            ("clone3", 435),
            ("lsm_set_self_attr", 460),
        ] {
            assert_eq!(number(n), Some(nr), "{n}");
            assert_eq!(name(nr), Some(n));
        }
    }

    #[test]
    fn gap_is_unassigned() {
        assert!((335..424).all(|nr| name(nr).is_none()));
        assert_eq!(name(461), None);
        let named = (0..=MAX_NR).filter(|&nr| name(nr).is_some()).count();
        assert_eq!(named, 372);
    }

    #[test]
    fn names_are_unique() {
        let all: BTreeSet<&str> = (0..=MAX_NR).filter_map(name).collect();
        assert_eq!(all.len(), 372);
    }

    #[test]
    fn equivalence_names_resolve() {
        for (k, alts) in EQUIVALENCES {
            assert!(is_known_name(k));
            for a in *alts {
                assert!(number(a).is_some(), "{a}");
            }
        }
        for s in SENSITIVE {
            assert!(number(s).is_some(), "{s}");
        }
    }

    #[test]
    fn classes_are_symmetric() {
        assert!(equivalents("execveat").contains("execve"));
        assert!(equivalents("read").contains("recv"));
        assert_eq!(equivalents("bind").len(), 1);
        assert_eq!(equivalents("select").len(), 7);
    }
}
