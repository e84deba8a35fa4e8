//! Programs started through `execve` and the filters they inherit.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{SyscallAnalysis, SyscallSet, EXECVE, EXECVEAT};
use crate::dll::{library_name, DlApi, DynamicObservations};
use crate::error::AnalysisError;
use crate::fcg::{build_fcg, Fcg};
use crate::intrinsics::Intrinsic;
use crate::pmir::{load_image, Linked, Op, ProgramImage, Reg};
use crate::vfa::{refine, resolve_use, VfaCtx};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExecveMode {
    /// The new program's syscalls join the filter of the partition.
    #[default]
    #[serde(alias = "union")]
    UnionPropagate,
    /// As above, plus a tighter filter holding only the new program's
    /// syscalls, installed when it starts.
    #[serde(alias = "reduce")]
    ReduceOnExec,
}

/// User-supplied execve targets: `all` applies to every site, `sites` maps
/// a callsite address (decimal or `0x` hex) to its targets.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecTargetFile {
    #[serde(default)]
    pub all: Vec<String>,
    #[serde(default)]
    pub sites: BTreeMap<String, Vec<String>>,
}

impl ExecTargetFile {
    pub fn load(path: &Path) -> Result<Self, AnalysisError> {
        let text = std::fs::read_to_string(path).map_err(|source| AnalysisError::Io {
            context: path.display().to_string(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|source| AnalysisError::Json {
            context: path.display().to_string(),
            source,
        })
    }

    pub fn targets_at(&self, site: u64) -> BTreeSet<String> {
        let mut out: BTreeSet<String> = self.all.iter().cloned().collect();
        for (k, v) in &self.sites {
            let addr = match k.strip_prefix("0x") {
                Some(hex) => u64::from_str_radix(hex, 16).ok(),
                None => k.parse().ok(),
            };
            if addr == Some(site) {
                out.extend(v.iter().cloned());
            }
        }
        out
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecvePolicy {
    pub mode: ExecveMode,
    /// Program paths each exec site may start.
    pub targets: BTreeMap<u64, BTreeSet<String>>,
}

/// Registers holding the program path at an exec site.
fn path_registers(op: &Op, set: &SyscallSet) -> Vec<Reg> {
    let mut regs = Vec::new();
    let shift = match op {
        Op::CallPlt { symbol } => match Intrinsic::from_symbol(symbol) {
            Some(Intrinsic::Execve) => return vec![Reg::Rdi],
            // syscall(nr, args...) moves every argument one register up.
            Some(Intrinsic::Syscall) => 1,
            _ => return regs,
        },
        Op::SyscallInstr => 0,
        _ => return regs,
    };
    if set.contains(EXECVE) {
        regs.push(Reg::ARGS[shift]);
    }
    if set.contains(EXECVEAT) {
        regs.push(Reg::ARGS[1 + shift]);
    }
    regs
}

/// Target paths of every exec site in `sites`: values found by backward
/// value flow, plus recorded run-time arguments and the user's list. A
/// site left with no fully resolved path and nothing supplied is an error.
pub fn exec_site_targets(
    ctx: &VfaCtx,
    fcg: &Fcg,
    analysis: &SyscallAnalysis,
    sites: &BTreeSet<u64>,
    obs: &DynamicObservations,
    user: &ExecTargetFile,
) -> Result<BTreeMap<u64, BTreeSet<String>>, AnalysisError> {
    let mut out = BTreeMap::new();
    for &site in sites {
        let Some((_, ins)) = ctx.linked.instr_at(site) else {
            return Err(AnalysisError::UnknownExecTarget { site });
        };
        let set = analysis.sites.get(&site).cloned().unwrap_or_default();
        let mut paths = BTreeSet::new();
        let mut complete = true;
        for reg in path_registers(&ins.op, &set) {
            let r = resolve_use(ctx, fcg, site, reg);
            let strs = r.strings();
            complete &= r.is_full() && strs.len() == r.values.len();
            paths.extend(strs);
        }
        let extra: BTreeSet<String> = obs
            .args(DlApi::Execve, site)
            .into_iter()
            .chain(user.targets_at(site))
            .collect();
        if !complete && extra.is_empty() {
            return Err(AnalysisError::UnknownExecTarget { site });
        }
        paths.extend(extra);
        out.insert(site, paths);
    }
    Ok(out)
}

/// Where the image of the program at `path` is expected: its base name
/// with `.pmir.json` appended, inside `dir`.
pub fn target_image_path(dir: &Path, path: &str) -> PathBuf {
    dir.join(format!("{}.pmir.json", library_name(path)))
}

/// Syscalls reachable from the loader roots of `image`, after refinement.
pub fn program_syscalls(image: &ProgramImage) -> Result<SyscallSet, AnalysisError> {
    let linked = Linked::new(image);
    let (mut fcg, _) = build_fcg(&linked);
    let ctx = VfaCtx::new(&linked);
    refine(&ctx, &mut fcg);
    Ok(SyscallAnalysis::new(&ctx, &fcg)?.main_set())
}

/// Loads the image for every target path and computes its syscalls.
pub fn load_target_sets(
    dir: &Path,
    policy: &ExecvePolicy,
) -> Result<BTreeMap<String, SyscallSet>, AnalysisError> {
    let mut out = BTreeMap::new();
    for (&site, paths) in &policy.targets {
        for p in paths {
            if out.contains_key(p) {
                continue;
            }
            let file = target_image_path(dir, p);
            if !file.is_file() {
                return Err(AnalysisError::UnresolvedExecTarget {
                    path: p.clone(),
                    site,
                });
            }
            let image = load_image(&[file])?;
            out.insert(p.clone(), program_syscalls(&image)?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Composed {
    pub set: SyscallSet,
    /// Filters installed when each target program starts.
    pub exec_filters: BTreeMap<String, BTreeSet<u32>>,
}

/// Extends `base` with the syscalls of every program its exec sites may
/// start. A filter survives `execve`, so the partition must allow the new
/// program's syscalls in both modes; reduce mode also emits, per target,
/// the target's set intersected with the extended set. A target with
/// unresolved syscall sites marks its exec site unresolved.
pub fn compose_execve(
    policy: &ExecvePolicy,
    base: &SyscallSet,
    targets: &BTreeMap<String, SyscallSet>,
) -> Result<Composed, AnalysisError> {
    let mut set = base.clone();
    let mut used: BTreeSet<&String> = BTreeSet::new();
    for &site in &base.exec_sites {
        let paths = policy
            .targets
            .get(&site)
            .ok_or(AnalysisError::UnknownExecTarget { site })?;
        for p in paths {
            let t = targets.get(p).ok_or_else(|| AnalysisError::UnresolvedExecTarget {
                path: p.clone(),
                site,
            })?;
            for &nr in &t.numbers {
                set.insert(nr, site);
            }
            if !t.is_resolved() {
                set.unresolved_sites.insert(site);
            }
            used.insert(p);
        }
    }
    let mut exec_filters = BTreeMap::new();
    if policy.mode == ExecveMode::ReduceOnExec {
        for p in used {
            let reduced = targets[p].numbers.intersection(&set.numbers).copied().collect();
            exec_filters.insert(p.clone(), reduced);
        }
    }
    Ok(Composed { set, exec_filters })
}
