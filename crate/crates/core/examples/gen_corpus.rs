//! Writes the toy-server corpus: program images, shared libraries, execve
//! targets, scenarios and one analysis configuration per server.
//!
//! Usage: `cargo run -p sysphase --example gen_corpus [-- <dir>]`, default
//! `corpus/` at the workspace root.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde_json::json;
use sysphase::pmir::{
    serialize_image, serialize_library, ImageBuilder, ModuleBuilder, ModuleUnit, Op, ProgramImage, Reg,
};
use sysphase::tracer::{BranchPolicy, Scenario};

const BUDGET: u64 = 10_000;

pub struct Server {
    pub name: &'static str,
    pub image: ProgramImage,
    pub scenario: Scenario,
    pub execve_targets: Option<serde_json::Value>,
}

/// Address of the `n`th `call_plt symbol` in the executable.
fn plt_site(img: &ProgramImage, symbol: &str, n: usize) -> u64 {
    img.executable
        .functions
        .iter()
        .flat_map(|f| f.instructions())
        .filter(|i| matches!(&i.op, Op::CallPlt { symbol: s } if s == symbol))
        .nth(n)
        .unwrap_or_else(|| panic!("no call to {symbol}"))
        .address
}

fn scenario(scripts: &[(u32, &[bool])]) -> Scenario {
    let mut s = Scenario::new(BUDGET);
    s.default_policy = BranchPolicy::NotTaken;
    for (t, bits) in scripts {
        s.scripts.insert(*t, bits.to_vec());
    }
    s
}

const LOOP3: &[bool] = &[true, true, true, false];

fn exe() -> ModuleBuilder {
    ModuleBuilder::executable("app", 0x10000)
}

/// socket, bind, listen; accept loop around `handle`; close.
fn echo() -> Server {
    let mut m = exe();
    m.function("main", |f| {
        f.block(0).sys(41).sys(49).sys(50).jump(1);
        f.block(1).sys(43).call("handle").cond(1, 2);
        f.block(2).sys(3).ret();
    });
    m.function("handle", |f| {
        f.block(0).sys(0).sys(1).sys(3).ret();
    });
    m.function("cleanup", |f| {
        f.block(0).sys(87).ret();
    });
    Server {
        name: "echo",
        image: ImageBuilder::new(m.finish()).fini("cleanup").build(),
        scenario: scenario(&[(0, LOOP3)]),
        execve_targets: None,
    }
}

/// Privileged setup before the loop and a debugging helper nothing calls.
fn tiered() -> Server {
    let mut m = exe();
    m.function("main", |f| {
        f.block(0).call("setup").jump(1);
        f.block(1).sys(232).call("serve").cond(1, 2);
        f.block(2).sys(3).ret();
    });
    m.function("setup", |f| {
        f.block(0).sys(41).sys(49).sys(50).sys(105).sys(106).ret();
    });
    m.function("serve", |f| {
        f.block(0).sys(288).sys(0).sys(1).ret();
    });
    m.function("debug_dump", |f| {
        f.block(0).sys(101).sys(90).sys(10).ret();
    });
    m.function("early", |f| {
        f.block(0).sys(158).ret();
    });
    Server {
        name: "tiered",
        image: ImageBuilder::new(m.finish()).preinit("early").build(),
        scenario: scenario(&[(0, LOOP3)]),
        execve_targets: None,
    }
}

/// An acceptor thread and a worker thread, each with its own loop.
fn workers() -> Server {
    let mut m = exe();
    m.function("main", |f| {
        f.block(0)
            .sys(41)
            .sys(49)
            .sys(50)
            .take(Reg::Rdx, "worker")
            .konst(Reg::Rcx, 0)
            .plt("pthread_create")
            .jump(1);
        f.block(1).sys(43).sys(72).cond(1, 2);
        f.block(2).sys(3).ret();
    });
    m.function("worker", |f| {
        f.block(0).sys(202).jump(1);
        f.block(1).sys(0).sys(1).cond(1, 2);
        f.block(2).sys(60).ret();
    });
    Server {
        name: "workers",
        image: ImageBuilder::new(m.finish()).build(),
        scenario: scenario(&[(0, LOOP3), (1, &[true, true, false])]),
        execve_targets: None,
    }
}

/// Threads spawned from inside the loop inherit its filter.
fn spawn_per_request() -> Server {
    let mut m = exe();
    m.function("main", |f| {
        f.block(0).sys(41).sys(49).sys(50).jump(1);
        f.block(1)
            .sys(43)
            .take(Reg::Rdx, "conn")
            .mov(Reg::Rcx, Reg::Rax)
            .plt("pthread_create")
            .cond(1, 2);
        f.block(2).plt("exit");
    });
    m.function("conn", |f| {
        f.block(0).sys(0).sys(1).sys(3).ret();
    });
    Server {
        name: "spawn_per_request",
        image: ImageBuilder::new(m.finish()).build(),
        scenario: scenario(&[(0, LOOP3)]),
        execve_targets: None,
    }
}

fn plug_lib() -> ModuleUnit {
    let mut m = ModuleBuilder::library("libplug.so", 0x7000_0000);
    m.exported("plug_handle", |f| {
        f.block(0).sys(0).sys(44).ret();
    });
    m.exported("plug_admin", |f| {
        f.block(0).sys(101).ret();
    });
    m.finish()
}

fn cfg_lib() -> ModuleUnit {
    let mut m = ModuleBuilder::library("libcfg.so", 0x7100_0000);
    m.exported("cfg_handle", |f| {
        f.block(0).sys(0).sys(46).ret();
    });
    m.finish()
}

fn dlz_lib() -> ModuleUnit {
    let mut m = ModuleBuilder::library("libdlz.so", 0x7200_0000);
    m.exported("dlz_create", |f| {
        f.block(0).sys(45).ret();
    });
    m.exported("dlz_destroy", |f| {
        f.block(0).sys(3).ret();
    });
    m.finish()
}

/// Loads a plugin, looks up its handler and calls it from the loop. The
/// library name and symbol come from `name` and `symbol`; `None` reads
/// them from memory.
fn plugin_main(m: &mut ModuleBuilder, name: Option<&str>, symbol: Option<&str>) {
    let name = name.map(str::to_string);
    let symbol = symbol.map(str::to_string);
    m.function("main", |f| {
        let b = f.block(0).sys(41).sys(49).sys(50);
        match &name {
            Some(n) => b.string(Reg::Rdi, n),
            None => b.load(Reg::Rdi),
        };
        b.konst(Reg::Rsi, 1).plt("dlopen").mov(Reg::Rdi, Reg::Rax);
        match &symbol {
            Some(s) => b.string(Reg::Rsi, s),
            None => b.load(Reg::Rsi),
        };
        b.plt("dlsym").mov(Reg::R12, Reg::Rax).jump(1);
        f.block(1).sys(43).call_reg(Reg::R12).cond(1, 2);
        f.block(2).sys(3).ret();
    });
}

/// Hardcoded library name and symbol.
fn plugin_static() -> Server {
    let mut m = exe();
    plugin_main(&mut m, Some("/usr/lib/libplug.so"), Some("plug_handle"));
    Server {
        name: "plugin_static",
        image: ImageBuilder::new(m.finish()).build(),
        scenario: scenario(&[(0, LOOP3)]),
        execve_targets: None,
    }
}

/// Library name and symbol read from a configuration file.
fn plugin_config() -> Server {
    let mut m = exe();
    plugin_main(&mut m, None, None);
    let image = ImageBuilder::new(m.finish()).build();
    let mut sc = scenario(&[(0, LOOP3)]);
    sc.inputs.insert(plt_site(&image, "dlopen", 0), "libcfg.so".into());
    sc.inputs.insert(plt_site(&image, "dlsym", 0), "cfg_handle".into());
    Server {
        name: "plugin_config",
        image,
        scenario: sc,
        execve_targets: None,
    }
}

/// Configured library name, hardcoded symbol.
fn plugin_dlz() -> Server {
    let mut m = exe();
    plugin_main(&mut m, None, Some("dlz_create"));
    let image = ImageBuilder::new(m.finish()).build();
    let mut sc = scenario(&[(0, LOOP3)]);
    sc.inputs.insert(plt_site(&image, "dlopen", 0), "/opt/dlz/libdlz.so".into());
    Server {
        name: "plugin_dlz",
        image,
        scenario: sc,
        execve_targets: None,
    }
}

fn sh() -> ProgramImage {
    let mut m = ModuleBuilder::executable("sh", 0x20000);
    m.function("main", |f| {
        f.block(0).sys(12).jump(1);
        f.block(1).sys(0).sys(1).cond(1, 2);
        f.block(2).plt("exit");
    });
    ImageBuilder::new(m.finish()).build()
}

/// Runs a shell for some requests through `execve`.
fn cgi_execve() -> Server {
    let mut m = exe();
    m.function("main", |f| {
        f.block(0).sys(41).sys(49).sys(50).jump(1);
        f.block(1).sys(43).call("handle").cond(1, 2);
        f.block(2).sys(3).ret();
    });
    m.function("handle", |f| {
        f.block(0).sys(0).cond(1, 2);
        f.block(1).string(Reg::Rdi, "/bin/sh").plt("execve").jump(2);
        f.block(2).sys(1).ret();
    });
    Server {
        name: "cgi_execve",
        image: ImageBuilder::new(m.finish()).build(),
        scenario: scenario(&[(0, &[true, false, true, false, false])]),
        execve_targets: None,
    }
}

/// Raw `execveat` whose path comes from a user-supplied target list.
fn cgi_execveat() -> Server {
    let mut m = exe();
    m.function("main", |f| {
        f.block(0).sys(41).sys(49).sys(50).jump(1);
        f.block(1).sys(43).sys(0).load(Reg::Rsi).sys(322).cond(1, 2);
        f.block(2).sys(3).ret();
    });
    let image = ImageBuilder::new(m.finish()).build();
    Server {
        name: "cgi_execveat",
        image,
        scenario: scenario(&[(0, LOOP3)]),
        execve_targets: Some(json!({ "all": ["/bin/sh"] })),
    }
}

/// Handlers reached through function pointers: one site the value flow
/// pins down, one only arity matching can narrow, and a callback passed
/// in a register.
fn dispatch() -> Server {
    let mut m = exe();
    m.function("main", |f| {
        f.block(0)
            .sys(41)
            .take(Reg::Rbx, "h_read")
            .store(Reg::Rbx)
            .take(Reg::Rbx, "h_write")
            .store(Reg::Rbx)
            .take(Reg::Rbx, "h_stat")
            .store(Reg::Rbx)
            .jump(1);
        f.block(1)
            .sys(43)
            .call("pick")
            .mov(Reg::R12, Reg::Rax)
            .konst(Reg::Rdi, 4)
            .call_reg(Reg::R12)
            .take(Reg::R13, "h_stat")
            .konst(Reg::Rdi, 5)
            .call_reg(Reg::R13)
            .take(Reg::Rdi, "on_close")
            .call("run_cb")
            .cond(1, 2);
        f.block(2).sys(3).ret();
    });
    m.function("pick", |f| {
        f.block(0).take(Reg::Rax, "h_read").ret();
    });
    m.function("run_cb", |f| {
        f.block(0).mov(Reg::R11, Reg::Rdi).call_reg(Reg::R11).ret();
    });
    m.function("h_read", |f| {
        f.block(0).cmp(Reg::Rdi, Reg::Rdi).sys(0).ret();
    });
    m.function("h_write", |f| {
        f.block(0).cmp(Reg::Rdx, Reg::Rdx).sys(1).ret();
    });
    m.function("h_stat", |f| {
        f.block(0).cmp(Reg::Rdi, Reg::Rdi).sys(4).ret();
    });
    m.function("on_close", |f| {
        f.block(0).sys(3).ret();
    });
    Server {
        name: "dispatch",
        image: ImageBuilder::new(m.finish()).build(),
        scenario: scenario(&[(0, LOOP3)]),
        execve_targets: None,
    }
}

/// Syscalls issued through a `syscall()` wrapper taking the number as its
/// first argument.
fn wrapper() -> Server {
    let mut m = exe();
    m.function("main", |f| {
        f.block(0).konst(Reg::Rdi, 41).call("sys_wrap").konst(Reg::Rdi, 49).call("sys_wrap").jump(1);
        f.block(1).konst(Reg::Rdi, 0).call("sys_wrap").konst(Reg::Rdi, 1).call("sys_wrap").cond(1, 2);
        f.block(2).konst(Reg::Rdi, 3).call("sys_wrap").ret();
    });
    m.function("sys_wrap", |f| {
        f.block(0).plt("syscall").ret();
    });
    Server {
        name: "wrapper",
        image: ImageBuilder::new(m.finish()).build(),
        scenario: scenario(&[(0, LOOP3)]),
        execve_targets: None,
    }
}

/// The loop lives in a function that never returns.
fn noreturn_serve() -> Server {
    let mut m = exe();
    m.function("main", |f| {
        f.block(0).sys(41).call("serve").sys(3).ret();
    });
    m.function("serve", |f| {
        f.block(0).sys(49).sys(50).jump(1);
        f.block(1).sys(43).sys(0).cond(1, 2);
        f.block(2).plt("exit");
    });
    m.function("cleanup", |f| {
        f.block(0).sys(87).ret();
    });
    Server {
        name: "noreturn_serve",
        image: ImageBuilder::new(m.finish()).fini("cleanup").build(),
        scenario: scenario(&[(0, LOOP3)]),
        execve_targets: None,
    }
}

/// Event loop with an inner read loop, recursive request parsing and
/// loader-run setup.
fn daemon() -> Server {
    let mut m = exe();
    m.function("main", |f| {
        f.block(0).sys(41).sys(49).jump(1);
        f.block(1).sys(7).jump(2);
        f.block(2).sys(0).call("parse").cond(2, 3);
        f.block(3).sys(1).cond(1, 4);
        f.block(4).sys(3).ret();
    });
    m.function("parse", |f| {
        f.block(0).sys(8).cond(1, 2);
        f.block(1).call("parse").jump(2);
        f.block(2).ret();
    });
    m.function("early", |f| {
        f.block(0).sys(158).ret();
    });
    m.function("setup", |f| {
        f.block(0).sys(9).sys(10).ret();
    });
    m.function("cleanup", |f| {
        f.block(0).sys(11).ret();
    });
    Server {
        name: "daemon",
        image: ImageBuilder::new(m.finish())
            .preinit("early")
            .init("setup")
            .fini("cleanup")
            .build(),
        scenario: scenario(&[(
            0,
            &[false, true, true, false, true, false, false, false, false, false],
        )]),
        execve_targets: None,
    }
}

/// Unused helper library linked at startup plus a local `write` that
/// shadows the library's.
fn interpose() -> Server {
    let mut lib = ModuleBuilder::library("libutil.so", 0x7300_0000);
    lib.exported("write", |f| {
        f.block(0).sys(1).ret();
    });
    lib.exported("log_msg", |f| {
        f.block(0).sys(20).ret();
    });
    lib.exported("spawn_shell", |f| {
        f.block(0).sys(57).sys(59).ret();
    });
    let mut m = exe();
    m.function("main", |f| {
        f.block(0).sys(41).plt("log_msg").jump(1);
        f.block(1).sys(43).plt("write").cond(1, 2);
        f.block(2).sys(3).ret();
    });
    m.exported("write", |f| {
        f.block(0).sys(18).ret();
    });
    Server {
        name: "interpose",
        image: ImageBuilder::new(m.finish()).library(lib.finish()).build(),
        scenario: scenario(&[(0, LOOP3)]),
        execve_targets: None,
    }
}

pub fn servers() -> Vec<Server> {
    vec![
        echo(),
        tiered(),
        workers(),
        spawn_per_request(),
        plugin_static(),
        plugin_config(),
        plugin_dlz(),
        cgi_execve(),
        cgi_execveat(),
        dispatch(),
        wrapper(),
        noreturn_serve(),
        daemon(),
        interpose(),
    ]
}

pub fn libraries() -> Vec<ModuleUnit> {
    vec![plug_lib(), cfg_lib(), dlz_lib()]
}

/// A server whose loop issues a syscall with a number loaded from memory.
pub fn unresolved() -> Server {
    let mut m = exe();
    m.function("main", |f| {
        f.block(0).sys(41).jump(1);
        f.block(1).load(Reg::Rax).syscall().cond(1, 2);
        f.block(2).ret();
    });
    Server {
        name: "unresolved",
        image: ImageBuilder::new(m.finish()).build(),
        scenario: scenario(&[(0, &[true, false])]),
        execve_targets: None,
    }
}

/// Payload requirement sets, by syscall name.
pub fn payloads() -> serde_json::Value {
    json!([
        { "name": "reverse-shell", "requires": ["socket", "connect", "dup2", "execve"] },
        { "name": "exec-shell", "requires": ["execve"] },
        { "name": "bind-shell", "requires": ["socket", "bind", "listen", "accept", "execve"] },
        { "name": "wait-for-input", "requires": ["select"] },
        { "name": "chmod-file", "requires": ["chmod"] },
        { "name": "mprotect-shellcode", "requires": ["mprotect"] },
        { "name": "nop", "requires": [] }
    ])
}

fn pretty(v: &impl serde::Serialize) -> Vec<u8> {
    let mut s = serde_json::to_vec_pretty(v).unwrap();
    s.push(b'\n');
    s
}

fn server_files(dir: &str, s: &Server, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
    let base = Path::new(dir).join(s.name);
    out.insert(base.join("image.pmir.json"), serialize_image(&s.image));
    out.insert(base.join("scenario.json"), pretty(&s.scenario));
    let mut cfg = json!({
        "image": ["image.pmir.json"],
        "scenarios": ["scenario.json"],
        "corpus": "../../lib",
        "exec_images": "../../bin",
        "payloads": "../../payloads.json",
    });
    if let Some(t) = &s.execve_targets {
        out.insert(base.join("execve_targets.json"), pretty(t));
        cfg["execve_targets"] = json!("execve_targets.json");
    }
    out.insert(base.join("config.json"), pretty(&cfg));
}

/// Every corpus file, keyed by path relative to the corpus root.
pub fn files() -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    for s in servers() {
        server_files("servers", &s, &mut out);
    }
    server_files("invalid", &unresolved(), &mut out);
    for l in libraries() {
        out.insert(
            Path::new("lib").join(format!("{}.pmir.json", l.name)),
            serialize_library(&l),
        );
    }
    out.insert("bin/sh.pmir.json".into(), serialize_image(&sh()));
    out.insert("payloads.json".into(), pretty(&payloads()));
    out.insert(
        "servers/echo/loops.json".into(),
        pretty(&json!([{ "function": "app::main", "header": 1 }])),
    );
    out
}

#[allow(dead_code)]
fn main() {
    let root = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../corpus"));
    for (rel, bytes) in files() {
        let p = root.join(rel);
        std::fs::create_dir_all(p.parent().unwrap()).unwrap();
        std::fs::write(&p, bytes).unwrap();
    }
    println!("wrote corpus to {}", root.display());
}
