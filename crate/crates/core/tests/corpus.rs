mod common;

#[allow(dead_code)]
#[path = "../examples/gen_corpus.rs"]
mod gen_corpus;

use std::collections::{BTreeMap, BTreeSet};

use common::{config, corpus_root, run, servers};
use sysphase::cfg::all_loops;
use sysphase::pipeline::{analyze, Config, Inputs, Status, UnresolvedPolicy};
use sysphase::pmir::{load_image, parse_image, serialize_image, FuncRef};
use sysphase::report::Tier;
use sysphase::sysgen::{program_syscalls, ExecveMode};
use sysphase::systable;

#[test]
fn checked_in_corpus_matches_generator() {
    let root = corpus_root();
    for (rel, bytes) in gen_corpus::files() {
        let on_disk = std::fs::read(root.join(&rel)).unwrap_or_default();
        assert!(
            on_disk == bytes,
            "{} is stale; rerun `cargo run -p sysphase --example gen_corpus`",
            rel.display()
        );
    }
}

#[test]
fn every_image_round_trips() {
    for name in servers() {
        let p = corpus_root().join("servers").join(&name).join("image.pmir.json");
        let img = load_image(&[&p]).unwrap();
        let text = String::from_utf8(serialize_image(&img)).unwrap();
        assert_eq!(parse_image(&p, &text).unwrap(), img, "{name}");
    }
}

#[derive(serde::Deserialize)]
struct LoopLabel {
    function: FuncRef,
    header: u32,
}

#[test]
fn echo_loops_match_labels() {
    let dir = corpus_root().join("servers/echo");
    let labels: Vec<LoopLabel> =
        serde_json::from_str(&std::fs::read_to_string(dir.join("loops.json")).unwrap()).unwrap();
    let want: BTreeSet<(FuncRef, u32)> = labels.into_iter().map(|l| (l.function, l.header)).collect();
    let img = load_image(&[dir.join("image.pmir.json")]).unwrap();
    let got: BTreeSet<(FuncRef, u32)> = all_loops(&img)
        .into_iter()
        .flat_map(|(f, fl)| fl.loops.into_iter().map(move |l| (f.clone(), l.header)))
        .collect();
    assert_eq!(got, want);
}

#[test]
fn tiered_sensitive_table() {
    let b = run("tiered");
    let got = &b.report.partitions[0].sensitive;
    let mut want: BTreeMap<String, Tier> = systable::SENSITIVE
        .iter()
        .map(|n| (n.to_string(), Tier::Absent))
        .collect();
    want.insert("accept4".into(), Tier::NotFiltered);
    for n in ["socket", "bind", "listen", "setuid", "setgid"] {
        want.insert(n.into(), Tier::MainLoop);
    }
    for n in ["ptrace", "chmod", "mprotect"] {
        want.insert(n.into(), Tier::Main);
    }
    assert_eq!(got, &want);
}

#[test]
fn single_loop_server_gets_one_filter() {
    let b = run("echo");
    assert_eq!(b.summary.status, Status::Ok);
    assert_eq!(b.summary.partitions, 1);
    assert_eq!(b.summary.filters, 1);
    let p = &b.result.partitions[0];
    assert_eq!(p.syscalls.numbers, BTreeSet::from([0, 1, 3, 43, 87]));
    assert!(b.hardened.filters.contains_key(&0));
}

#[test]
fn threads_get_their_own_partitions() {
    let b = run("workers");
    let parts: Vec<(String, Vec<u32>)> = b
        .result
        .partitions
        .iter()
        .map(|p| (p.transition.function.name.clone(), p.threads.clone()))
        .collect();
    assert_eq!(parts, [("main".to_string(), vec![0]), ("worker".to_string(), vec![1])]);
    assert_eq!(b.summary.filters, 2);
}

fn invalid_config() -> Config {
    Config::load(&corpus_root().join("invalid/unresolved/config.json")).unwrap()
}

#[test]
fn unresolved_number_fails_and_names_the_site() {
    let b = analyze(&invalid_config()).unwrap();
    assert_eq!(b.summary.status, Status::Unresolved);
    let p = &b.result.partitions[0];
    let site = *p.syscalls.unresolved_sites.iter().next().unwrap();
    assert!(p.failure.as_ref().unwrap().contains(&format!("{site:#x}")));
    assert!(p.install.is_none());
    assert!(b.hardened.filters.is_empty());
}

#[test]
fn allow_all_policy_emits_permissive_filter() {
    let mut c = invalid_config();
    c.unresolved = UnresolvedPolicy::AllowAll;
    let b = analyze(&c).unwrap();
    assert_eq!(b.summary.status, Status::Ok);
    let p = &b.result.partitions[0];
    assert!(p.allow_all);
    assert_eq!(p.syscalls.numbers.len(), 461);
    assert!(b.summary.warnings.iter().any(|w| w.contains("allowing every syscall")));
}

fn sh_set() -> BTreeSet<u32> {
    let img = load_image(&[corpus_root().join("bin/sh.pmir.json")]).unwrap();
    program_syscalls(&img).unwrap().numbers
}

#[test]
fn execve_target_extends_partition_by_missing_numbers() {
    assert_eq!(sh_set(), BTreeSet::from([0, 1, 12, 231]));
    let b = run("cgi_execve");
    let p = &b.result.partitions[0];
    let added: BTreeSet<u32> = p.syscalls.numbers.difference(&p.base.numbers).copied().collect();
    let want: BTreeSet<u32> = sh_set().difference(&p.base.numbers).copied().collect();
    assert_eq!(added, want);
    assert!(!added.is_empty());
    assert!(p.exec_filters.is_empty());
}

#[test]
fn reduce_on_exec_emits_target_filter() {
    let mut c = config("cgi_execve");
    c.execve_mode = ExecveMode::ReduceOnExec;
    let b = analyze(&c).unwrap();
    let p = &b.result.partitions[0];
    let want: BTreeSet<u32> = sh_set().intersection(&p.syscalls.numbers).copied().collect();
    assert_eq!(p.exec_filters.get("/bin/sh"), Some(&want));
    assert!(b.files().iter().any(|(f, _)| f == "filters/partition-0-exec-sh.bpf"));
}

#[test]
fn execveat_path_from_user_targets() {
    let b = run("cgi_execveat");
    let p = &b.result.partitions[0];
    assert!(p.base.numbers.contains(&322));
    assert_eq!(p.exec_targets.values().next().unwrap(), &BTreeSet::from(["/bin/sh".to_string()]));
    assert!(sh_set().is_subset(&p.syscalls.numbers));

    let mut c = config("cgi_execveat");
    c.execve_targets = None;
    let b = analyze(&c).unwrap();
    assert_eq!(b.summary.status, Status::Unresolved);
}

#[test]
fn observed_calls_are_graph_edges() {
    for name in servers() {
        let inputs = Inputs::load(&config(&name)).unwrap();
        let b = run(&name);
        let edges: BTreeSet<(u64, FuncRef, FuncRef)> = b
            .result
            .fcg
            .edges
            .iter()
            .map(|e| (e.site, e.caller.clone(), e.callee.clone()))
            .collect();
        for log in inputs.traces().unwrap() {
            for c in &log.calls {
                assert!(
                    edges.contains(&(c.site, c.caller.clone(), c.callee.clone())),
                    "{name}: {:#x} {} -> {}",
                    c.site,
                    c.caller,
                    c.callee
                );
            }
        }
    }
}
