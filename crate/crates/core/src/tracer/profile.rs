use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::TraceLog;
use crate::cfg::Loop;
use crate::pmir::FuncRef;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoopStats {
    pub function: FuncRef,
    pub entry_address: u64,
    pub entries: u64,
    pub iterations: u64,
    /// Cumulative duration over all entries, in instructions.
    pub duration: u64,
    /// False if the last entry was still open when the trace ended.
    pub finalized: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThreadProfile {
    pub thread: u32,
    /// Last timestamp of the thread's trace.
    pub total: u64,
    /// Loops that were entered at least once, by entry address.
    pub loops: Vec<LoopStats>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoopProfile {
    pub threads: Vec<ThreadProfile>,
}

/// Where a thread's serving phase begins: the entry of its main loop.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TransitionPoint {
    pub thread: u32,
    pub function: FuncRef,
    pub addr: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Selection {
    pub points: Vec<TransitionPoint>,
    pub warnings: Vec<String>,
}

/// Outer-loop timing over one address stream, using the index as the clock.
///
/// At most one loop is current. Executing the current loop's exit address
/// closes it; otherwise executing a loop's entry address opens it when no
/// loop is current, or counts an iteration when it is the current loop.
/// Entries of other loops while one is current are ignored.
pub fn profile_stream(addrs: &[u64], loops: &[(FuncRef, Loop)]) -> Vec<LoopStats> {
    let by_entry: HashMap<u64, usize> = loops
        .iter()
        .enumerate()
        .map(|(i, (_, l))| (l.entry_address, i))
        .collect();
    let mut stats: Vec<Option<LoopStats>> = vec![None; loops.len()];
    let mut cur: Option<(usize, u64)> = None;
    for (t, &a) in addrs.iter().enumerate() {
        let t = t as u64;
        if let Some((c, start)) = cur {
            if loops[c].1.exit_addresses.contains(&a) {
                let s = stats[c].as_mut().unwrap();
                s.duration += t - start;
                s.finalized = true;
                cur = None;
                continue;
            }
        }
        if let Some(&l) = by_entry.get(&a) {
            match cur {
                None => {
                    let s = stats[l].get_or_insert_with(|| LoopStats {
                        function: loops[l].0.clone(),
                        entry_address: a,
                        entries: 0,
                        iterations: 0,
                        duration: 0,
                        finalized: false,
                    });
                    s.entries += 1;
                    s.finalized = false;
                    cur = Some((l, t));
                }
                Some((c, _)) if c == l => {
                    stats[l].as_mut().unwrap().iterations += 1;
                }
                Some(_) => {}
            }
        }
    }
    if let Some((c, start)) = cur {
        let end = addrs.len().saturating_sub(1) as u64;
        stats[c].as_mut().unwrap().duration += end - start;
    }
    let mut out: Vec<LoopStats> = stats.into_iter().flatten().collect();
    out.sort_by_key(|s| s.entry_address);
    out
}

/// Runs [`profile_stream`] on every thread of `trace`.
pub fn profile_loops(trace: &TraceLog, loops: &[(FuncRef, Loop)]) -> LoopProfile {
    LoopProfile {
        threads: trace
            .threads
            .iter()
            .map(|th| ThreadProfile {
                thread: th.id,
                total: th.addrs.len().saturating_sub(1) as u64,
                loops: profile_stream(&th.addrs, loops),
            })
            .collect(),
    }
}

fn best<'a>(it: impl Iterator<Item = &'a LoopStats>) -> Option<&'a LoopStats> {
    // Longest duration; lowest entry address on ties.
    it.min_by(|a, b| {
        b.duration
            .cmp(&a.duration)
            .then(a.entry_address.cmp(&b.entry_address))
    })
}

/// Picks each thread's main loop: the longest loop among those entered
/// exactly once, falling back to the longest loop overall with a warning.
pub fn select_main_loops(profile: &LoopProfile) -> Selection {
    let mut points = Vec::new();
    let mut warnings = Vec::new();
    for th in &profile.threads {
        if th.loops.is_empty() {
            warnings.push(format!("thread {}: no loop executed, no transition point", th.thread));
            continue;
        }
        let chosen = match best(th.loops.iter().filter(|s| s.entries == 1)) {
            Some(s) => s,
            None => {
                let s = best(th.loops.iter()).unwrap();
                warnings.push(format!(
                    "thread {}: no loop entered exactly once; using longest loop at {:#x} ({} entries)",
                    th.thread, s.entry_address, s.entries
                ));
                s
            }
        };
        points.push(TransitionPoint {
            thread: th.thread,
            function: chosen.function.clone(),
            addr: chosen.entry_address,
        });
    }
    Selection { points, warnings }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn lp(entry: u64, exits: &[u64]) -> (FuncRef, Loop) {
        (
            FuncRef::new("app", "main"),
            Loop {
                header: 0,
                back_edges: vec![],
                body: BTreeSet::new(),
                exit_addresses: exits.iter().copied().collect(),
                entry_address: entry,
                top_level: true,
            },
        )
    }

    fn stat(entry: u64, entries: u64, duration: u64) -> LoopStats {
        LoopStats {
            function: FuncRef::new("app", "main"),
            entry_address: entry,
            entries,
            iterations: 0,
            duration,
            finalized: true,
        }
    }

    fn profile(loops: Vec<LoopStats>) -> LoopProfile {
        LoopProfile {
            threads: vec![ThreadProfile {
                thread: 0,
                total: 10_000,
                loops,
            }],
        }
    }

    #[test]
    fn no_entry_no_profile() {
        assert!(profile_stream(&[1, 2, 3], &[lp(100, &[200])]).is_empty());
    }

    #[test]
    fn nested_entries_are_ignored() {
        let loops = [lp(100, &[900]), lp(200, &[300])];
        let s = profile_stream(&[100, 200, 200, 100, 900], &loops);
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].iterations, 1);
        assert_eq!(s[0].duration, 4);
    }

    #[test]
    fn open_loop_finalized_at_end() {
        let s = profile_stream(&[1, 100, 5, 100, 5], &[lp(100, &[7])]);
        assert_eq!(s[0].duration, 3);
        assert!(!s[0].finalized);
    }

    #[test]
    fn entered_once_beats_longer_loop() {
        let sel = select_main_loops(&profile(vec![stat(0x10, 1, 1000), stat(0x20, 5, 5000)]));
        assert_eq!(sel.points[0].addr, 0x10);
        assert!(sel.warnings.is_empty());
    }

    #[test]
    fn tie_goes_to_lower_address() {
        let sel = select_main_loops(&profile(vec![stat(0x30, 1, 50), stat(0x20, 1, 50)]));
        assert_eq!(sel.points[0].addr, 0x20);
    }

    #[test]
    fn fallback_warns() {
        let sel = select_main_loops(&profile(vec![stat(0x30, 2, 50), stat(0x20, 3, 70)]));
        assert_eq!(sel.points[0].addr, 0x20);
        assert_eq!(sel.warnings.len(), 1);
    }

    #[test]
    fn empty_thread_warns() {
        let sel = select_main_loops(&profile(vec![]));
        assert!(sel.points.is_empty());
        assert_eq!(sel.warnings.len(), 1);
    }
}
