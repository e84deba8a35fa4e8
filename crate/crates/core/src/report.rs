//! Security reports over syscall sets: which payloads a filter stops, and
//! at which tier each sensitive syscall disappears.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::AnalysisError;
use crate::systable::{equivalents, is_known_name, number, SENSITIVE};

/// A payload and the syscalls it needs, by name.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Payload {
    pub name: String,
    pub requires: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PayloadOutcome {
    pub name: String,
    /// Stopped when every interchangeable alternative of some required
    /// syscall is blocked too.
    pub stopped: bool,
    /// Stopped when some required syscall itself is blocked.
    pub stopped_without_equivalence: bool,
    /// Required syscalls blocked together with all their alternatives.
    pub blocking: Vec<String>,
}

fn allowed_name(allowed: &BTreeSet<u32>, name: &str) -> bool {
    number(name).is_some_and(|nr| allowed.contains(&nr))
}

/// Decides, for each payload, whether a filter allowing `allowed` stops it.
pub fn payload_report(
    allowed: &BTreeSet<u32>,
    payloads: &[Payload],
) -> Result<Vec<PayloadOutcome>, AnalysisError> {
    payloads
        .iter()
        .map(|p| {
            if let Some(bad) = p.requires.iter().find(|r| !is_known_name(r)) {
                return Err(AnalysisError::UnknownSyscall(bad.clone()));
            }
            let blocking: Vec<String> = p
                .requires
                .iter()
                .filter(|r| !equivalents(r).iter().any(|e| allowed_name(allowed, e)))
                .cloned()
                .collect();
            Ok(PayloadOutcome {
                name: p.name.clone(),
                stopped: !blocking.is_empty(),
                stopped_without_equivalence: p.requires.iter().any(|r| !allowed_name(allowed, r)),
                blocking,
            })
        })
        .collect()
}

/// Where a syscall stops being available, from widest to narrowest set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Tier {
    /// Still allowed in the serving phase.
    NotFiltered,
    /// Reachable from main() but not from the main loop.
    MainLoop,
    /// Present in the image but not reachable from main().
    Main,
    /// Not present in the image at all.
    Absent,
}

impl Tier {
    pub fn label(self) -> &'static str {
        match self {
            Tier::NotFiltered => "not filtered",
            Tier::MainLoop => "filtered in main loop",
            Tier::Main => "filtered from main()",
            Tier::Absent => "absent everywhere",
        }
    }
}

/// Classifies each sensitive syscall by the three nested sets.
pub fn sensitive_report(
    whole: &BTreeSet<u32>,
    main: &BTreeSet<u32>,
    partition: &BTreeSet<u32>,
) -> BTreeMap<String, Tier> {
    SENSITIVE
        .iter()
        .map(|&name| {
            let nr = number(name).expect("sensitive names are numbered");
            let tier = if partition.contains(&nr) {
                Tier::NotFiltered
            } else if main.contains(&nr) {
                Tier::MainLoop
            } else if whole.contains(&nr) {
                Tier::Main
            } else {
                Tier::Absent
            };
            (name.to_string(), tier)
        })
        .collect()
}

pub fn payload_text(outcomes: &[PayloadOutcome]) -> String {
    let w = outcomes.iter().map(|o| o.name.len()).max().unwrap_or(0).max(7);
    let mut s = format!("{:<w$}  {:<11}  {:<11}  blocking\n", "payload", "with-equiv", "no-equiv");
    let yes = |b: bool| if b { "stopped" } else { "-" };
    for o in outcomes {
        let _ = writeln!(
            s,
            "{:<w$}  {:<11}  {:<11}  {}",
            o.name,
            yes(o.stopped),
            yes(o.stopped_without_equivalence),
            o.blocking.join(",")
        );
    }
    s
}

pub fn sensitive_text(tiers: &BTreeMap<String, Tier>) -> String {
    let mut s = String::new();
    for (name, t) in tiers {
        let _ = writeln!(s, "{name:<10}  {}", t.label());
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(names: &[&str]) -> BTreeSet<u32> {
        names.iter().map(|n| number(n).unwrap()).collect()
    }

    fn payload(req: &[&str]) -> Vec<Payload> {
        vec![Payload {
            name: "p".into(),
            requires: req.iter().map(|s| s.to_string()).collect(),
        }]
    }

    #[test]
    fn execveat_keeps_execve_payload_alive() {
        let r = payload_report(&set(&["execveat", "read"]), &payload(&["execve"])).unwrap();
        assert!(!r[0].stopped);
        assert!(r[0].stopped_without_equivalence);
    }

    #[test]
    fn select_family_fully_blocked() {
        let r = payload_report(&set(&["read", "write"]), &payload(&["select"])).unwrap();
        assert!(r[0].stopped);
        assert_eq!(r[0].blocking, ["select"]);
        let r = payload_report(&set(&["epoll_wait"]), &payload(&["select"])).unwrap();
        assert!(!r[0].stopped);
    }

    #[test]
    fn empty_requirements_are_never_stopped() {
        let r = payload_report(&BTreeSet::new(), &payload(&[])).unwrap();
        assert!(!r[0].stopped && !r[0].stopped_without_equivalence);
    }

    #[test]
    fn recv_is_covered_by_read() {
        let r = payload_report(&set(&["read"]), &payload(&["recv"])).unwrap();
        assert!(!r[0].stopped);
        assert!(r[0].stopped_without_equivalence);
    }

    #[test]
    fn unknown_name_is_rejected() {
        assert!(matches!(
            payload_report(&BTreeSet::new(), &payload(&["frobnicate"])),
            Err(AnalysisError::UnknownSyscall(_))
        ));
    }

    #[test]
    fn tiers_follow_nested_sets() {
        let whole = set(&["bind", "listen", "accept", "execve"]);
        let main = set(&["bind", "accept"]);
        let part = set(&["accept"]);
        let t = sensitive_report(&whole, &main, &part);
        assert_eq!(t["accept"], Tier::NotFiltered);
        assert_eq!(t["bind"], Tier::MainLoop);
        assert_eq!(t["listen"], Tier::Main);
        assert_eq!(t["ptrace"], Tier::Absent);
        assert_eq!(t.len(), 17);
    }
}
