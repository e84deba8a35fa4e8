#![allow(dead_code)]

use std::collections::BTreeSet;
use std::path::PathBuf;

use sysphase::pipeline::{analyze, Bundle, Config, PartitionResult};
use sysphase::tracer::{BranchPolicy, EventKind, Scenario, TraceLog};

pub fn corpus_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../corpus")
}

/// Names of the toy servers, sorted.
pub fn servers() -> Vec<String> {
    let mut v: Vec<String> = std::fs::read_dir(corpus_root().join("servers"))
        .expect("corpus present")
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    v.sort();
    v
}

pub fn config(name: &str) -> Config {
    Config::load(&corpus_root().join("servers").join(name).join("config.json")).expect("config loads")
}

pub fn run(name: &str) -> Bundle {
    analyze(&config(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

/// Every branch script of up to `depth` decisions under both default
/// policies, given to every thread, keeping `base`'s inputs.
pub fn exhaustive(base: &Scenario, depth: usize, budget: u64) -> Vec<Scenario> {
    let mut out = Vec::new();
    for len in 0..=depth {
        for bits in 0..(1u32 << len) {
            let script: Vec<bool> = (0..len).map(|i| bits >> i & 1 == 1).collect();
            for policy in [BranchPolicy::Taken, BranchPolicy::NotTaken] {
                let mut s = Scenario::new(budget);
                s.inputs = base.inputs.clone();
                s.default_policy = policy;
                for t in 0..8 {
                    s.scripts.insert(t, script.clone());
                }
                out.push(s);
            }
        }
    }
    out
}

/// Syscalls each thread issues at or after its first visit of `addr`.
pub fn after_transition(log: &TraceLog, addr: u64) -> Vec<(u32, BTreeSet<u32>)> {
    let mut out = Vec::new();
    for th in &log.threads {
        let Some(start) = th.addrs.iter().position(|&a| a == addr) else {
            continue;
        };
        let set = log
            .events
            .iter()
            .filter(|e| e.thread == th.id && e.time as usize >= start)
            .filter_map(|e| match e.kind {
                EventKind::Syscall { nr } => Some(nr),
                _ => None,
            })
            .collect();
        out.push((th.id, set));
    }
    out
}

/// Out-of-set syscalls observed after a partition's transition point.
pub fn violations(log: &TraceLog, p: &PartitionResult) -> Vec<String> {
    let mut v = Vec::new();
    for (thread, seen) in after_transition(log, p.transition.addr) {
        for nr in seen.difference(&p.syscalls.numbers) {
            v.push(format!(
                "partition {} ({} {:#x}) thread {thread}: syscall {nr} not in set",
                p.id, p.transition.function, p.transition.addr
            ));
        }
    }
    v
}

/// Events without filter installs, for comparing hardened and plain runs.
pub fn observable(log: &TraceLog) -> Vec<String> {
    let mut v: Vec<String> = log
        .events
        .iter()
        .filter(|e| !matches!(e.kind, EventKind::FilterInstall { .. }))
        .map(|e| format!("{} {:#x} {:?}", e.thread, e.addr, e.kind))
        .collect();
    v.extend(log.threads.iter().map(|t| format!("end {} {:?}", t.id, t.end)));
    v.push(format!("truncated {}", log.truncated));
    v
}
