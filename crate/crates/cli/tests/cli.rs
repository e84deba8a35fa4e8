use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn corpus() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../corpus")
}

fn server(name: &str) -> PathBuf {
    corpus().join("servers").join(name)
}

fn sysphase(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sysphase"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn analyze_writes_bundle_and_exits_zero() {
    let out = tempfile::tempdir().unwrap();
    let cfg = server("echo").join("config.json");
    let o = sysphase(&["--config", s(&cfg), "--out", s(out.path()), "analyze"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let summary: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(summary["status"], "ok");
    for f in ["summary.json", "syscalls.json", "report.txt", "hardened.pmir.json", "filters/partition-0.bpf"] {
        assert!(out.path().join(f).is_file(), "{f}");
    }
}

#[test]
fn analyze_is_byte_identical_across_runs() {
    let cfg = server("plugin_config").join("config.json");
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        let o = sysphase(&["--config", s(&cfg), "--out", s(d.path()), "analyze"]);
        assert_eq!(o.status.code(), Some(0));
    }
    assert_eq!(tree(a.path()), tree(b.path()));
}

#[test]
fn unresolved_site_exits_two() {
    let out = tempfile::tempdir().unwrap();
    let cfg = corpus().join("invalid/unresolved/config.json");
    let o = sysphase(&["--config", s(&cfg), "--out", s(out.path()), "analyze"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("unresolved syscall sites"));

    let o = sysphase(&["--config", s(&cfg), "--out", s(out.path()), "analyze", "--unresolved", "allow-all"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn missing_input_exits_one() {
    let out = tempfile::tempdir().unwrap();
    let o = sysphase(&["--out", s(out.path()), "analyze", "--image", "/nonexistent/image.json"]);
    assert_eq!(o.status.code(), Some(1));
    let o = sysphase(&["--config", "/nonexistent/config.json", "loops"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn filter_blobs_are_whole_instructions() {
    let out = tempfile::tempdir().unwrap();
    let cfg = server("workers").join("config.json");
    let o = sysphase(&["--config", s(&cfg), "--out", s(out.path()), "filter", "--deny", "errno:1"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    for id in [0, 1] {
        let blob = std::fs::read(out.path().join(format!("filters/partition-{id}.bpf"))).unwrap();
        assert!(!blob.is_empty() && blob.len().is_multiple_of(8));
        let text = std::fs::read_to_string(out.path().join(format!("filters/partition-{id}.txt"))).unwrap();
        assert!(text.contains("ERRNO"), "{text}");
    }
    assert!(out.path().join("hardened.pmir.json").is_file());
}

#[test]
fn syscalls_lists_each_partition() {
    let out = tempfile::tempdir().unwrap();
    let cfg = server("workers").join("config.json");
    let o = sysphase(&["--config", s(&cfg), "--out", s(out.path()), "syscalls"]);
    assert_eq!(o.status.code(), Some(0));
    let docs: Vec<serde_json::Value> = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(docs.len(), 2);
    for d in &docs {
        assert!(d["numbers"].as_array().is_some_and(|a| !a.is_empty()));
        assert!(d["unresolved"].as_array().is_some_and(|a| a.is_empty()));
        assert!(d["tp"]["addr"].is_u64());
    }
    assert!(out.path().join("syscalls.json").is_file());
}

#[test]
fn stages_run_standalone() {
    let dir = server("echo");
    let image = dir.join("image.pmir.json");
    let scenario = dir.join("scenario.json");
    let o = sysphase(&["loops", "--image", s(&image)]);
    assert_eq!(o.status.code(), Some(0));
    let loops: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(loops.get("app::main").is_some());

    let o = sysphase(&["--format", "text", "partition", "--image", s(&image), "--scenario", s(&scenario)]);
    assert_eq!(o.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&o.stdout).contains("app::main"));

    let out = tempfile::tempdir().unwrap();
    let dot = out.path().join("g.dot");
    let o = sysphase(&["fcg", "--image", s(&image), "--refined", "--dot", s(&dot)]);
    assert_eq!(o.status.code(), Some(0));
    assert!(std::fs::read_to_string(&dot).unwrap().starts_with("digraph"));
}
