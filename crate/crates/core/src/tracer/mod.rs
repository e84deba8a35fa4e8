//! Deterministic interpreter for program images.
//!
//! Threads are scheduled round-robin, one real instruction per turn.
//! Synthetic instructions (filter installation, hardening preheaders) take
//! no turn and no budget but still appear in the thread's address stream.

mod profile;

use std::collections::{BTreeMap, BTreeSet, HashSet, VecDeque};

use serde::{Deserialize, Serialize};

pub use profile::{
    profile_loops, profile_stream, select_main_loops, LoopProfile, LoopStats, Selection, ThreadProfile,
    TransitionPoint,
};

use crate::bpf::{eval_bpf, Action, SeccompData};
use crate::error::AnalysisError;
use crate::intrinsics::Intrinsic;
use crate::pmir::{FuncId, FuncRef, InstrLoc, Linked, ModuleUnit, Op, ProgramImage, Reg};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BranchPolicy {
    #[default]
    Taken,
    NotTaken,
}

/// Inputs that drive one deterministic run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scenario {
    /// Branch decisions per thread id, consumed by `cond_jump` in order;
    /// `true` takes the branch.
    #[serde(default)]
    pub scripts: BTreeMap<u32, Vec<bool>>,
    /// Decision once a thread's script is exhausted.
    #[serde(default)]
    pub default_policy: BranchPolicy,
    /// Maximum number of real instructions over all threads.
    pub budget: u64,
    /// String arguments for `dlopen`, `dlsym` and `execve` stubs whose
    /// argument register holds no known string, keyed by callsite.
    #[serde(default)]
    pub inputs: BTreeMap<u64, String>,
}

impl Scenario {
    pub fn new(budget: u64) -> Self {
        Scenario {
            scripts: BTreeMap::new(),
            default_policy: BranchPolicy::Taken,
            budget,
            inputs: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum EventKind {
    Syscall { nr: u32 },
    Dlopen { arg: String },
    Dlsym { arg: String },
    Execve { arg: String },
    ThreadSpawn { start: FuncRef, child: u32 },
    FilterInstall { partition: u32 },
    FilterKill { nr: u32 },
    FilterErrno { nr: u32, errno: u16 },
    Trap { reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub thread: u32,
    /// Index into the thread's address stream.
    pub time: u64,
    pub addr: u64,
    #[serde(flatten)]
    pub kind: EventKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThreadEnd {
    /// The thread's last root function returned.
    Returned,
    /// `exit`, `_exit`, `abort` or an exit syscall.
    Exited,
    /// Replaced by `execve`.
    Execed,
    /// Killed by a filter.
    Killed,
    Trapped,
    /// Stopped because another thread ended the process.
    Halted,
    /// Still running when the budget ran out.
    Running,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThreadTrace {
    pub id: u32,
    pub start: FuncRef,
    /// Executed addresses; the index is the thread's clock.
    pub addrs: Vec<u64>,
    pub end: ThreadEnd,
}

/// A call observed at run time.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CallEdge {
    pub site: u64,
    pub caller: FuncRef,
    pub callee: FuncRef,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceLog {
    pub threads: Vec<ThreadTrace>,
    pub events: Vec<Event>,
    pub truncated: bool,
    /// Distinct call edges, including thread spawns.
    pub calls: BTreeSet<CallEdge>,
}

impl TraceLog {
    pub fn syscalls(&self) -> impl Iterator<Item = (&Event, u32)> {
        self.events.iter().filter_map(|e| match e.kind {
            EventKind::Syscall { nr } => Some((e, nr)),
            _ => None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Value {
    Unknown,
    Int(i64),
    Func(FuncId),
    Data,
    Str(String),
}

enum Root {
    Call(FuncId),
    ExitGroup { addr: u64 },
}

struct Frame {
    ret: Option<InstrLoc>,
    saved: [Value; 7],
}

struct Thread {
    id: u32,
    start: FuncId,
    regs: Vec<Value>,
    frames: Vec<Frame>,
    pc: Option<InstrLoc>,
    roots: VecDeque<Root>,
    script: Vec<bool>,
    pos: usize,
    filters: Vec<u32>,
    addrs: Vec<u64>,
    end: Option<ThreadEnd>,
}

struct Machine<'a> {
    image: &'a ProgramImage,
    linked: Linked<'a>,
    scenario: &'a Scenario,
    threads: Vec<Thread>,
    events: Vec<Event>,
    calls: HashSet<(u64, FuncId, FuncId)>,
    /// Module indices loaded by `dlopen`, in load order.
    loaded: Vec<usize>,
}

/// Runs `image` under `scenario`. `corpus` holds libraries that `dlopen`
/// may load; their addresses must not collide with the image.
pub fn execute(
    image: &ProgramImage,
    corpus: &[ModuleUnit],
    scenario: &Scenario,
) -> Result<TraceLog, AnalysisError> {
    if scenario.budget == 0 {
        return Err(AnalysisError::InvalidScenario("budget must be positive".into()));
    }
    crate::pmir::check_addresses(image, corpus)?;
    let extra: Vec<&ModuleUnit> = corpus.iter().collect();
    let linked = Linked::with_extra(image, &extra);
    let main = linked.main().ok_or_else(|| AnalysisError::UnresolvedSymbol {
        symbol: image.main_function.clone(),
        requester: "loader".into(),
        searched: image.executable.name.clone(),
    })?;
    let mut roots = VecDeque::new();
    for r in image.preinit_refs().iter().chain(image.init_refs().iter()) {
        roots.push_back(Root::Call(linked.lookup(r).expect("validated root")));
    }
    roots.push_back(Root::Call(main));
    for r in image.fini_refs() {
        roots.push_back(Root::Call(linked.lookup(&r).expect("validated root")));
    }
    let mut m = Machine {
        image,
        linked,
        scenario,
        threads: Vec::new(),
        events: Vec::new(),
        calls: HashSet::new(),
        loaded: Vec::new(),
    };
    m.spawn(main, roots, Vec::new(), Value::Unknown);
    let truncated = m.run();
    let threads = m
        .threads
        .iter()
        .map(|t| ThreadTrace {
            id: t.id,
            start: m.linked.func_ref(t.start),
            addrs: t.addrs.clone(),
            end: t.end.unwrap_or(ThreadEnd::Running),
        })
        .collect();
    let calls = m
        .calls
        .iter()
        .map(|&(site, a, b)| CallEdge {
            site,
            caller: m.linked.func_ref(a),
            callee: m.linked.func_ref(b),
        })
        .collect();
    Ok(TraceLog {
        threads,
        events: m.events,
        truncated,
        calls,
    })
}

const CALLEE_SAVED: [Reg; 7] = Reg::CALLEE_SAVED;

impl<'a> Machine<'a> {
    fn spawn(&mut self, start: FuncId, roots: VecDeque<Root>, filters: Vec<u32>, rdi: Value) -> u32 {
        let id = self.threads.len() as u32;
        let mut regs = vec![Value::Unknown; 16];
        regs[Reg::Rdi.index()] = rdi;
        let roots = if roots.is_empty() {
            VecDeque::from([Root::Call(start)])
        } else {
            roots
        };
        self.threads.push(Thread {
            id,
            start,
            regs,
            frames: Vec::new(),
            pc: None,
            roots,
            script: self.scenario.scripts.get(&id).cloned().unwrap_or_default(),
            pos: 0,
            filters,
            addrs: Vec::new(),
            end: None,
        });
        id
    }

    /// Returns whether the budget ran out.
    fn run(&mut self) -> bool {
        let mut used = 0u64;
        loop {
            let mut any = false;
            let n = self.threads.len();
            for t in 0..n {
                if self.threads[t].end.is_some() {
                    continue;
                }
                any = true;
                if used >= self.scenario.budget {
                    return true;
                }
                if self.step(t) {
                    used += 1;
                }
            }
            if !any {
                return false;
            }
        }
    }

    fn entry_loc(&self, f: FuncId) -> InstrLoc {
        InstrLoc {
            func: f,
            block: self.linked.cfg(f).entry,
            instr: 0,
        }
    }

    /// Executes synthetic instructions and then one real instruction.
    /// Returns whether a real instruction ran.
    fn step(&mut self, t: usize) -> bool {
        loop {
            if self.threads[t].end.is_some() {
                return false;
            }
            if self.threads[t].pc.is_none() && !self.next_root(t) {
                return false;
            }
            let loc = self.threads[t].pc.unwrap();
            let real = self.exec(t, loc);
            if real {
                return true;
            }
        }
    }

    fn next_root(&mut self, t: usize) -> bool {
        match self.threads[t].roots.pop_front() {
            Some(Root::Call(f)) => {
                let loc = self.entry_loc(f);
                let th = &mut self.threads[t];
                th.frames.push(Frame {
                    ret: None,
                    saved: std::array::from_fn(|i| th.regs[CALLEE_SAVED[i].index()].clone()),
                });
                th.pc = Some(loc);
                true
            }
            Some(Root::ExitGroup { addr }) => {
                if self.syscall(t, 231, addr) == Action::Allow {
                    self.end_process(t, ThreadEnd::Exited);
                }
                false
            }
            None => {
                self.threads[t].end = Some(ThreadEnd::Returned);
                if t == 0 {
                    self.end_process(t, ThreadEnd::Returned);
                }
                false
            }
        }
    }

    fn end_process(&mut self, t: usize, why: ThreadEnd) {
        for (i, th) in self.threads.iter_mut().enumerate() {
            if i == t {
                th.end = Some(why);
            } else if th.end.is_none() {
                th.end = Some(ThreadEnd::Halted);
            }
        }
    }

    fn event(&mut self, t: usize, addr: u64, kind: EventKind) {
        let th = &self.threads[t];
        self.events.push(Event {
            thread: th.id,
            time: th.addrs.len() as u64 - 1,
            addr,
            kind,
        });
    }

    fn trap(&mut self, t: usize, addr: u64, reason: String) {
        self.event(t, addr, EventKind::Trap { reason });
        self.threads[t].end = Some(ThreadEnd::Trapped);
    }

    /// Location after a non-terminator instruction.
    fn fall(&self, loc: InstrLoc) -> Option<InstrLoc> {
        let b = self.linked.block(loc.func, loc.block);
        if loc.instr + 1 < b.instructions.len() {
            return Some(InstrLoc {
                instr: loc.instr + 1,
                ..loc
            });
        }
        self.goto(loc, 0)
    }

    fn goto(&self, loc: InstrLoc, succ: usize) -> Option<InstrLoc> {
        let s = *self.linked.cfg(loc.func).succs[loc.block].get(succ)?;
        Some(InstrLoc {
            func: loc.func,
            block: s,
            instr: 0,
        })
    }

    fn block_to(&self, loc: InstrLoc, id: u32) -> InstrLoc {
        InstrLoc {
            func: loc.func,
            block: self.linked.block_index(loc.func, id).expect("validated target"),
            instr: 0,
        }
    }

    fn advance(&mut self, t: usize, loc: InstrLoc, addr: u64) {
        match self.fall(loc) {
            Some(next) => self.threads[t].pc = Some(next),
            None => self.trap(t, addr, "control falls off a block with no successor".into()),
        }
    }

    fn call(&mut self, t: usize, site: InstrLoc, addr: u64, callee: FuncId) {
        self.calls.insert((addr, site.func, callee));
        let ret = self.fall(site);
        let entry = self.entry_loc(callee);
        let th = &mut self.threads[t];
        th.frames.push(Frame {
            ret,
            saved: std::array::from_fn(|i| th.regs[CALLEE_SAVED[i].index()].clone()),
        });
        th.pc = Some(entry);
    }

    fn clobber_caller_saved(&mut self, t: usize) {
        for r in Reg::CALLER_SAVED {
            if r != Reg::Rax {
                self.threads[t].regs[r.index()] = Value::Unknown;
            }
        }
    }

    /// Applies the thread's filters, newest first, and records the outcome.
    fn syscall(&mut self, t: usize, nr: u32, addr: u64) -> Action {
        let th = &self.threads[t];
        let data = SeccompData {
            instruction_pointer: addr,
            ..SeccompData::syscall(nr)
        };
        let verdicts: Vec<Action> = th
            .filters
            .iter()
            .rev()
            .map(|p| {
                self.image
                    .filters
                    .get(p)
                    .and_then(|prog| eval_bpf(prog, &data).ok())
                    .unwrap_or(Action::KillThread)
            })
            .collect();
        let action = Action::most_restrictive(verdicts);
        match action {
            Action::Allow => self.event(t, addr, EventKind::Syscall { nr }),
            Action::KillThread => {
                self.event(t, addr, EventKind::FilterKill { nr });
                self.threads[t].end = Some(ThreadEnd::Killed);
            }
            Action::Errno(errno) => self.event(t, addr, EventKind::FilterErrno { nr, errno }),
        }
        action
    }

    /// Kernel-level effects of an allowed syscall. Returns false when the
    /// calling thread no longer runs.
    fn syscall_effects(&mut self, t: usize, nr: u32, addr: u64) -> bool {
        match nr {
            60 => {
                self.threads[t].end = Some(ThreadEnd::Exited);
                false
            }
            231 => {
                self.end_process(t, ThreadEnd::Exited);
                false
            }
            59 => {
                let arg = match &self.threads[t].regs[Reg::Rdi.index()] {
                    Value::Str(s) => s.clone(),
                    _ => self.scenario.inputs.get(&addr).cloned().unwrap_or_default(),
                };
                self.event(t, addr, EventKind::Execve { arg });
                self.end_process(t, ThreadEnd::Execed);
                false
            }
            _ => true,
        }
    }

    fn string_arg(&self, t: usize, reg: Reg, addr: u64) -> Option<String> {
        match &self.threads[t].regs[reg.index()] {
            Value::Str(s) => Some(s.clone()),
            _ => self.scenario.inputs.get(&addr).cloned(),
        }
    }

    /// Runs the footprint syscalls of a stub; false if the thread stopped.
    fn footprint(&mut self, t: usize, which: Intrinsic, addr: u64) -> bool {
        for &nr in which.syscalls() {
            if self.syscall(t, nr, addr) == Action::KillThread {
                return false;
            }
        }
        true
    }

    fn intrinsic(&mut self, t: usize, loc: InstrLoc, addr: u64, which: Intrinsic) {
        match which {
            Intrinsic::Syscall => {
                let nr = match self.threads[t].regs[Reg::Rdi.index()] {
                    Value::Int(n) if (0..=u32::MAX as i64).contains(&n) => n as u32,
                    _ => return self.trap(t, addr, "syscall() number is not a known integer".into()),
                };
                match self.syscall(t, nr, addr) {
                    Action::KillThread => return,
                    Action::Allow => {
                        if !self.syscall_effects(t, nr, addr) {
                            return;
                        }
                    }
                    Action::Errno(_) => {}
                }
                self.threads[t].regs[Reg::Rax.index()] = Value::Unknown;
            }
            Intrinsic::Dlopen => {
                let Some(arg) = self.string_arg(t, Reg::Rdi, addr) else {
                    return self.trap(t, addr, "dlopen argument unknown".into());
                };
                self.event(t, addr, EventKind::Dlopen { arg: arg.clone() });
                if !self.footprint(t, which, addr) {
                    return;
                }
                let base = arg.rsplit('/').next().unwrap_or(&arg);
                let rax = match self.linked.module_index(base) {
                    Some(mi) => {
                        if mi >= self.linked.image_module_count() && !self.loaded.contains(&mi) {
                            self.loaded.push(mi);
                        }
                        Value::Int(mi as i64 + 1)
                    }
                    None => Value::Int(0),
                };
                self.threads[t].regs[Reg::Rax.index()] = rax;
            }
            Intrinsic::Dlsym => {
                let Some(arg) = self.string_arg(t, Reg::Rsi, addr) else {
                    return self.trap(t, addr, "dlsym argument unknown".into());
                };
                self.event(t, addr, EventKind::Dlsym { arg: arg.clone() });
                let rax = self
                    .lookup_global(&arg)
                    .map(Value::Func)
                    .unwrap_or(Value::Int(0));
                self.threads[t].regs[Reg::Rax.index()] = rax;
            }
            Intrinsic::Execve => {
                let Some(arg) = self.string_arg(t, Reg::Rdi, addr) else {
                    return self.trap(t, addr, "execve argument unknown".into());
                };
                match self.syscall(t, 59, addr) {
                    Action::Allow => {
                        self.event(t, addr, EventKind::Execve { arg });
                        return self.end_process(t, ThreadEnd::Execed);
                    }
                    Action::KillThread => return,
                    Action::Errno(_) => {
                        self.threads[t].regs[Reg::Rax.index()] = Value::Int(-1);
                    }
                }
            }
            Intrinsic::PthreadCreate => {
                let Value::Func(start) = self.threads[t].regs[Reg::Rdx.index()].clone() else {
                    return self.trap(t, addr, "pthread_create start routine unknown".into());
                };
                if !self.footprint(t, which, addr) {
                    return;
                }
                let arg = self.threads[t].regs[Reg::Rcx.index()].clone();
                let filters = self.threads[t].filters.clone();
                let child = self.spawn(start, VecDeque::new(), filters, arg);
                self.calls.insert((addr, loc.func, start));
                let start = self.linked.func_ref(start);
                self.event(t, addr, EventKind::ThreadSpawn { start, child });
                self.threads[t].regs[Reg::Rax.index()] = Value::Int(0);
            }
            Intrinsic::Exit => {
                let th = &mut self.threads[t];
                th.frames.clear();
                th.pc = None;
                th.roots.clear();
                for r in self.image.fini_refs() {
                    let f = self.linked.lookup(&r).expect("validated root");
                    self.threads[t].roots.push_back(Root::Call(f));
                }
                self.threads[t].roots.push_back(Root::ExitGroup { addr });
                return;
            }
            Intrinsic::UnderscoreExit | Intrinsic::Abort => {
                let nr = which.syscalls()[0];
                if self.syscall(t, nr, addr) == Action::Allow {
                    self.end_process(t, ThreadEnd::Exited);
                }
                return;
            }
        }
        self.clobber_caller_saved(t);
        self.advance(t, loc, addr);
    }

    /// Global symbol scope: image modules, then libraries loaded at run time.
    fn lookup_global(&self, symbol: &str) -> Option<FuncId> {
        let mods = self.linked.modules();
        (0..self.linked.image_module_count())
            .chain(self.loaded.iter().copied())
            .find_map(|mi| {
                let local = mods[mi].exports.get(symbol)?;
                self.linked.resolve_in(mi, &format!("{}::{}", mods[mi].name, local))
            })
    }

    /// Executes the instruction at `loc`; returns whether it was real.
    fn exec(&mut self, t: usize, loc: InstrLoc) -> bool {
        let ins = self.linked.instr(loc);
        let addr = ins.address;
        let synthetic = self.linked.block(loc.func, loc.block).synthetic
            || matches!(ins.op, Op::InstallFilter { .. });
        self.threads[t].addrs.push(addr);
        let set = |m: &mut Self, r: Reg, v: Value| m.threads[t].regs[r.index()] = v;
        match &ins.op {
            Op::Const { reg, imm } => {
                set(self, *reg, Value::Int(*imm));
                self.advance(t, loc, addr);
            }
            Op::Move { dst, src } => {
                let v = self.threads[t].regs[src.index()].clone();
                set(self, *dst, v);
                self.advance(t, loc, addr);
            }
            Op::TakeAddr { reg, func } => {
                let f = self.linked.resolve_from(loc.func, func).expect("validated ref");
                set(self, *reg, Value::Func(f));
                self.advance(t, loc, addr);
            }
            Op::TakeAddrData { reg, .. } => {
                set(self, *reg, Value::Data);
                self.advance(t, loc, addr);
            }
            Op::StrConst { reg, value } => {
                set(self, *reg, Value::Str(value.clone()));
                self.advance(t, loc, addr);
            }
            Op::Load { dst } | Op::Arith { dst, .. } => {
                set(self, *dst, Value::Unknown);
                self.advance(t, loc, addr);
            }
            Op::Store { .. } | Op::Cmp { .. } => self.advance(t, loc, addr),
            Op::CallDirect { func } => {
                let f = self.linked.resolve_from(loc.func, func).expect("validated ref");
                self.call(t, loc, addr, f);
            }
            Op::CallPlt { symbol } => {
                if let Some(i) = Intrinsic::from_symbol(symbol) {
                    self.intrinsic(t, loc, addr, i);
                } else if let Some(f) = self.lookup_global(symbol) {
                    self.call(t, loc, addr, f);
                } else {
                    self.trap(t, addr, format!("unresolved symbol `{symbol}`"));
                }
            }
            Op::CallIndirect { reg } => match self.threads[t].regs[reg.index()] {
                Value::Func(f) => self.call(t, loc, addr, f),
                ref v => {
                    let reason = format!("indirect call through {reg} holding {v:?}");
                    self.trap(t, addr, reason);
                }
            },
            Op::Jump { target } => {
                let next = self.block_to(loc, *target);
                self.threads[t].pc = Some(next);
            }
            Op::CondJump { taken, not_taken } => {
                let th = &mut self.threads[t];
                let take = match th.script.get(th.pos) {
                    Some(&d) => {
                        th.pos += 1;
                        d
                    }
                    None => self.scenario.default_policy == BranchPolicy::Taken,
                };
                let next = self.block_to(loc, if take { *taken } else { *not_taken });
                self.threads[t].pc = Some(next);
            }
            Op::SyscallInstr => {
                let nr = match self.threads[t].regs[Reg::Rax.index()] {
                    Value::Int(n) if (0..=u32::MAX as i64).contains(&n) => n as u32,
                    _ => {
                        self.trap(t, addr, "rax is not a known integer at syscall".into());
                        return !synthetic;
                    }
                };
                match self.syscall(t, nr, addr) {
                    Action::KillThread => return !synthetic,
                    Action::Allow => {
                        if !self.syscall_effects(t, nr, addr) {
                            return !synthetic;
                        }
                        set(self, Reg::Rax, Value::Unknown);
                    }
                    Action::Errno(e) => set(self, Reg::Rax, Value::Int(-(e as i64))),
                }
                set(self, Reg::Rcx, Value::Unknown);
                set(self, Reg::R11, Value::Unknown);
                self.advance(t, loc, addr);
            }
            Op::Ret => {
                let th = &mut self.threads[t];
                let frame = th.frames.pop().expect("ret with a frame");
                for (i, v) in frame.saved.into_iter().enumerate() {
                    th.regs[CALLEE_SAVED[i].index()] = v;
                }
                self.clobber_caller_saved(t);
                self.threads[t].pc = frame.ret;
            }
            Op::InstallFilter { partition } => {
                self.threads[t].filters.push(*partition);
                self.event(
                    t,
                    addr,
                    EventKind::FilterInstall {
                        partition: *partition,
                    },
                );
                self.advance(t, loc, addr);
            }
        }
        !synthetic
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pmir::{ImageBuilder, ModuleBuilder};

    fn run(img: &ProgramImage, sc: &Scenario) -> TraceLog {
        execute(img, &[], sc).unwrap()
    }

    fn nrs(log: &TraceLog) -> Vec<u32> {
        log.syscalls().map(|(_, n)| n).collect()
    }

    #[test]
    fn direct_syscall() {
        let mut m = ModuleBuilder::executable("app", 0x1000);
        m.function("main", |f| {
            f.block(0).sys(60).ret();
        });
        let log = run(&ImageBuilder::new(m.finish()).build(), &Scenario::new(100));
        assert_eq!(nrs(&log), vec![60]);
        assert_eq!(log.threads[0].end, ThreadEnd::Exited);
    }

    #[test]
    fn scripted_loop_revisits_header() {
        let mut m = ModuleBuilder::executable("app", 0x1000);
        m.function("main", |f| {
            f.block(0).konst(Reg::Rbx, 0).jump(1);
            f.block(1).cmp(Reg::Rbx, Reg::Rbx).cond(2, 3);
            f.block(2).sys(0).jump(1);
            f.block(3).ret();
        });
        let img = ImageBuilder::new(m.finish()).build();
        let header = img.executable.functions[0].blocks[1].address;
        let mut sc = Scenario::new(1000);
        sc.scripts.insert(0, vec![true, true, true, false]);
        let log = run(&img, &sc);
        let hits = log.threads[0].addrs.iter().filter(|&&a| a == header).count();
        assert_eq!(hits, 4);
        assert_eq!(nrs(&log), vec![0, 0, 0]);
        assert_eq!(log.threads[0].end, ThreadEnd::Returned);
        assert!(!log.truncated);
    }

    #[test]
    fn thread_spawn() {
        let mut m = ModuleBuilder::executable("app", 0x1000);
        m.function("main", |f| {
            f.block(0).take(Reg::Rdx, "worker").plt("pthread_create").sys(1).ret();
        });
        m.function("worker", |f| {
            f.block(0).sys(0).ret();
        });
        let log = run(&ImageBuilder::new(m.finish()).build(), &Scenario::new(100));
        assert_eq!(log.threads.len(), 2);
        assert!(log.events.iter().any(|e| matches!(
            &e.kind,
            EventKind::ThreadSpawn { start, child: 1 } if start.name == "worker"
        )));
        assert_eq!(log.threads[1].start.name, "worker");
        let t1: Vec<u32> = log
            .syscalls()
            .filter(|(e, _)| e.thread == 1)
            .map(|(_, n)| n)
            .collect();
        assert_eq!(t1, vec![0]);
    }

    #[test]
    fn traps_on_unknown_values() {
        let mut m = ModuleBuilder::executable("app", 0x1000);
        m.function("main", |f| {
            f.block(0).load(Reg::Rax).syscall().ret();
        });
        let log = run(&ImageBuilder::new(m.finish()).build(), &Scenario::new(100));
        assert_eq!(log.threads[0].end, ThreadEnd::Trapped);
        let mut m = ModuleBuilder::executable("app", 0x1000);
        m.function("main", |f| {
            f.block(0).konst(Reg::Rax, 0x400000).call_reg(Reg::Rax).ret();
        });
        let log = run(&ImageBuilder::new(m.finish()).build(), &Scenario::new(100));
        assert!(matches!(log.events[0].kind, EventKind::Trap { .. }));
    }

    #[test]
    fn budget_truncates() {
        let mut m = ModuleBuilder::executable("app", 0x1000);
        m.function("main", |f| {
            f.block(0).sys(0).jump(0);
        });
        let log = run(&ImageBuilder::new(m.finish()).build(), &Scenario::new(10));
        assert!(log.truncated);
        assert_eq!(log.threads[0].addrs.len(), 10);
        assert_eq!(log.threads[0].end, ThreadEnd::Running);
    }

    #[test]
    fn callee_saved_registers_survive_calls() {
        let mut m = ModuleBuilder::executable("app", 0x1000);
        m.function("main", |f| {
            f.block(0)
                .konst(Reg::Rbx, 7)
                .konst(Reg::Rdi, 3)
                .call("clobber")
                .mov(Reg::Rax, Reg::Rbx)
                .syscall()
                .ret();
        });
        m.function("clobber", |f| {
            f.block(0).konst(Reg::Rbx, 99).konst(Reg::Rax, 1).ret();
        });
        let log = run(&ImageBuilder::new(m.finish()).build(), &Scenario::new(100));
        assert_eq!(nrs(&log), vec![7]);
        assert_eq!(log.calls.len(), 1);
    }

    #[test]
    fn init_main_fini_order() {
        let mut m = ModuleBuilder::executable("app", 0x1000);
        m.function("main", |f| {
            f.block(0).sys(2).ret();
        });
        m.function("ctor", |f| {
            f.block(0).sys(1).ret();
        });
        m.function("dtor", |f| {
            f.block(0).sys(3).ret();
        });
        let img = ImageBuilder::new(m.finish()).init("ctor").fini("dtor").build();
        assert_eq!(nrs(&run(&img, &Scenario::new(100))), vec![1, 2, 3]);
    }

    #[test]
    fn exit_runs_fini_then_exit_group() {
        let mut m = ModuleBuilder::executable("app", 0x1000);
        m.function("main", |f| {
            f.block(0).plt("exit").sys(9).ret();
        });
        m.function("dtor", |f| {
            f.block(0).sys(3).ret();
        });
        let img = ImageBuilder::new(m.finish()).fini("dtor").build();
        assert_eq!(nrs(&run(&img, &Scenario::new(100))), vec![3, 231]);
    }

    #[test]
    fn dlopen_dlsym_call() {
        let mut lib = ModuleBuilder::library("libplug.so", 0x100000);
        lib.exported("plug_init", |f| {
            f.block(0).sys(41).ret();
        });
        let lib = lib.finish();
        let mut m = ModuleBuilder::executable("app", 0x1000);
        m.function("main", |f| {
            f.block(0)
                .string(Reg::Rdi, "/opt/libplug.so")
                .plt("dlopen")
                .string(Reg::Rsi, "plug_init")
                .plt("dlsym")
                .call_reg(Reg::Rax)
                .ret();
        });
        let img = ImageBuilder::new(m.finish()).build();
        let log = execute(&img, &[lib], &Scenario::new(100)).unwrap();
        assert_eq!(nrs(&log), vec![257, 9, 3, 41]);
        assert!(log.calls.iter().any(|c| c.callee.name == "plug_init"));
    }

    #[test]
    fn deterministic() {
        let mut m = ModuleBuilder::executable("app", 0x1000);
        m.function("main", |f| {
            f.block(0).take(Reg::Rdx, "w").plt("pthread_create").jump(1);
            f.block(1).sys(0).cond(1, 2);
            f.block(2).ret();
        });
        m.function("w", |f| {
            f.block(0).sys(1).cond(0, 1);
            f.block(1).ret();
        });
        let img = ImageBuilder::new(m.finish()).build();
        let sc = Scenario::new(500);
        assert_eq!(run(&img, &sc), run(&img, &sc));
    }
}
